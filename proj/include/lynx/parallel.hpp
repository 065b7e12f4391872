#pragma once

#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "lynx/tensor.hpp"

namespace lynx::detail {

// Runs fn(begin, end) over disjoint row ranges. Ranges never overlap,
// so parallel execution produces the same bits as sequential. The first
// worker exception is rethrown on the calling thread.
template <typename Fn>
void for_row_blocks(index_t rows, int workers, Fn&& fn) {
  if (workers <= 1 || rows < 2) {
    fn(static_cast<index_t>(0), rows);
    return;
  }
  const int used = static_cast<int>(std::min<index_t>(workers, rows));
  const index_t chunk = (rows + used - 1) / used;
  std::vector<std::thread> pool;
  pool.reserve(used);
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (int t = 0; t < used; ++t) {
    const index_t begin = t * chunk;
    const index_t end = std::min(rows, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace lynx::detail
