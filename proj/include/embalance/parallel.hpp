#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "embalance/types.hpp"

namespace embal {

/// Worker threads to use: EMBALANCE_THREADS if set and positive, otherwise
/// the hardware concurrency (at least 1).
std::size_t worker_count();

/// Runs body(block_begin, block_end) over [begin, end) split into blocks of
/// `grain` indices. Blocks are claimed dynamically, so the body must only
/// write state owned by its block. The first exception thrown is rethrown.
template <typename Body>
void parallel_for(Index begin, Index end, Index grain, Body&& body) {
  if (end <= begin) return;
  grain = std::max<Index>(grain, 1);
  const Index blocks = (end - begin + grain - 1) / grain;
  const auto threads = static_cast<Index>(std::min<std::size_t>(worker_count(), static_cast<std::size_t>(blocks)));
  if (threads <= 1) {
    for (Index b = begin; b < end; b += grain) body(b, std::min(b + grain, end));
    return;
  }

  std::atomic<Index> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (;;) {
      const Index block = next.fetch_add(1);
      if (block >= blocks) return;
      const Index b = begin + block * grain;
      try {
        body(b, std::min(b + grain, end));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(blocks);
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(threads - 1));
  for (Index t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace embal
