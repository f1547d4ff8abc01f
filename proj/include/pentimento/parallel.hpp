#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace pentimento::detail {

/// Runs fn(i) for i in [0, count). Work is split into contiguous blocks over
/// worker threads only when `cost` (rough number of inner operations) is big
/// enough to amortize thread start-up. Each index is processed by exactly one
/// thread, so results never depend on the split.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t cost, Fn&& fn) {
  constexpr std::size_t kMinCostPerThread = 1u << 18;
  std::size_t threads = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  threads = std::min({threads, count, std::max<std::size_t>(1, cost / kMinCostPerThread)});
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(threads - 1);
  const std::size_t block = (count + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    const std::size_t begin = t * block;
    const std::size_t end = std::min(count, begin + block);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] {
      for (std::size_t i = begin; i < end; ++i) fn(i);
    });
  }
  for (std::size_t i = 0; i < std::min(count, block); ++i) fn(i);
}

}  // namespace pentimento::detail
