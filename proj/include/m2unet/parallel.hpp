#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace m2unet {

namespace detail {
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

/// Operator-level worker count. 1 (the default) is the deterministic path; every
/// output element is produced by the same arithmetic regardless of the setting,
/// so results do not change with the thread count either.
inline void set_num_threads(int n) {
  if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  detail::thread_setting().store(n);
}

inline int num_threads() { return detail::thread_setting().load(); }

// Runs fn(i) for i in [0, count). Work is split into contiguous blocks; small
// loops stay on the calling thread.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn, std::size_t min_work_per_thread = 1) {
  const auto workers = static_cast<std::size_t>(num_threads());
  if (workers <= 1 || count < 2 || count < 2 * min_work_per_thread) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  const std::size_t n = std::min(workers, count);
  const std::size_t chunk = (count + n - 1) / n;
  std::vector<std::jthread> pool;
  pool.reserve(n - 1);
  for (std::size_t t = 1; t < n; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] {
      for (std::size_t i = begin; i < end; ++i) fn(i);
    });
  }
  for (std::size_t i = 0; i < std::min(chunk, count); ++i) fn(i);
}

}  // namespace m2unet
