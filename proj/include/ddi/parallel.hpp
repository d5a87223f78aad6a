#ifndef DDI_PARALLEL_HPP
#define DDI_PARALLEL_HPP

#include <cstdint>
#include <functional>

namespace ddi {

// Worker count for intra-op parallelism. 0 = auto (hardware concurrency),
// 1 = serial. Overridable via the DDI_NUM_THREADS environment variable.
// Work is split by static index partition and every output element is
// produced by exactly one worker, so results are bitwise identical for
// any thread count.
void set_num_threads(int n);
int num_threads();

// fn(begin, end) over disjoint [begin, end) chunks of [0, n).
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace ddi

#endif  // DDI_PARALLEL_HPP
