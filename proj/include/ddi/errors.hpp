#ifndef DDI_ERRORS_HPP
#define DDI_ERRORS_HPP

#include <sstream>
#include <stdexcept>
#include <string>

namespace ddi {

// Error taxonomy. The CLI maps each family to a distinct exit code.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelError : std::runtime_error {
  explicit ModelError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingDivergence : std::runtime_error {
  explicit TrainingDivergence(const std::string& msg) : std::runtime_error(msg) {}
};

struct WarmupFailure : std::runtime_error {
  explicit WarmupFailure(const std::string& msg) : std::runtime_error(msg) {}
};

struct BudgetInfeasible : std::runtime_error {
  BudgetInfeasible(const std::string& msg, double min_budget)
      : std::runtime_error(msg), min_feasible_budget(min_budget) {}
  double min_feasible_budget;
};

struct NonDifferentiableError : std::runtime_error {
  explicit NonDifferentiableError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void check_stream(std::ostringstream&) {}
template <typename T, typename... Rest>
void check_stream(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  check_stream(os, rest...);
}
}  // namespace detail

template <typename Err = ShapeError, typename... Args>
[[noreturn]] void fail(const Args&... args) {
  std::ostringstream os;
  detail::check_stream(os, args...);
  throw Err(os.str());
}

}  // namespace ddi

#define DDI_CHECK(cond, ...)                   \
  do {                                         \
    if (!(cond)) ::ddi::fail<::ddi::ShapeError>(__VA_ARGS__); \
  } while (0)

#define DDI_CHECK_T(ErrType, cond, ...)        \
  do {                                         \
    if (!(cond)) ::ddi::fail<ErrType>(__VA_ARGS__); \
  } while (0)

#endif  // DDI_ERRORS_HPP
