#pragma once

#include <functional>

namespace pani {

// Splits [0, n) into contiguous chunks and runs fn(lo, hi) on each, using up
// to `threads` worker threads. Every index belongs to exactly one chunk and
// each chunk is processed sequentially, so as long as fn writes only to
// slots owned by its own indices the results are bit-identical for any
// thread count, including 1 (which runs inline).
void parallel_for(long n, int threads,
                  const std::function<void(long, long)>& fn);

}  // namespace pani
