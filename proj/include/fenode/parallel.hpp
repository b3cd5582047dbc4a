#pragma once

#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace fenode {

/// Runs fn(i) for i in [0, n). With threads <= 1 this is a plain loop; with
/// more, tasks are split into contiguous blocks, one thread per block.
///
/// The contract callers rely on: each task writes only to its own output slot,
/// so results are bitwise identical for every thread count. Reductions over
/// the slots happen after the join, in index order.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (n == 0) return;
  const auto want = threads < 1 ? std::size_t{1} : static_cast<std::size_t>(threads);
  const auto nthreads = want < n ? want : n;
  if (nthreads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }

  std::vector<std::exception_ptr> errors(nthreads);
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  const std::size_t chunk = (n + nthreads - 1) / nthreads;
  for (std::size_t t = 0; t < nthreads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = lo + chunk < n ? lo + chunk : n;
    pool.emplace_back([&, t, lo, hi] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);  // first failing block wins, fixed order
}

}  // namespace fenode
