#include "ddi/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace ddi {

namespace {
int g_threads = -1;  // -1 = uninitialized

int resolve_threads() {
  if (g_threads > 0) return g_threads;
  if (const char* env = std::getenv("DDI_NUM_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  if (g_threads == 0) {
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
  }
  return 1;
}
}  // namespace

void set_num_threads(int n) { g_threads = n; }

int num_threads() { return resolve_threads(); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int workers = std::min<int64_t>(resolve_threads(), n);
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    int64_t begin = w * chunk;
    int64_t end = std::min<int64_t>(begin + chunk, n);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace ddi
