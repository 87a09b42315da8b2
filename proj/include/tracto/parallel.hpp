#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace tracto {

// Effective worker count: explicit request > TRACTOFORMER_THREADS > hardware.
inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("TRACTOFORMER_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Static partition of [0, n) over `threads` workers: worker w owns the
// contiguous chunk [w*ceil(n/workers), ...). fn(worker, i) runs each index
// exactly once and must only write to per-index or per-worker slots, so the
// result is independent of scheduling.
template <class Fn>
void parallel_for_indexed(size_t n, int threads, Fn&& fn) {
  if (n == 0) return;
  const size_t workers = std::min<size_t>(std::max(threads, 1), n);
  const size_t chunk = (n + workers - 1) / workers;
  if (workers == 1) {
    for (size_t i = 0; i < n; ++i) fn(size_t(0), i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    const size_t lo = w * chunk;
    const size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([w, lo, hi, &fn] {
      for (size_t i = lo; i < hi; ++i) fn(w, i);
    });
  }
  for (auto& t : pool) t.join();
}

template <class Fn>
void parallel_for(size_t n, int threads, Fn&& fn) {
  parallel_for_indexed(n, threads, [&fn](size_t, size_t i) { fn(i); });
}

}  // namespace tracto
