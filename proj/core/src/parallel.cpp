#include "pani/parallel.hpp"

#include <algorithm>
#include <thread>
#include <vector>

namespace pani {

void parallel_for(long n, int threads,
                  const std::function<void(long, long)>& fn) {
  if (n <= 0) return;
  long workers = std::min<long>(std::max(threads, 1), n);
  if (workers == 1) {
    fn(0, n);
    return;
  }
  // Fixed ceil-division chunking: the chunk boundaries depend only on n and
  // the requested worker count, never on scheduling.
  long chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (long w = 0; w < workers; ++w) {
    long lo = w * chunk;
    long hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace pani
