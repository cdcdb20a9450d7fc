#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace hiap {

/// Worker count cap read from HIAP_THREADS (default 1). Work is always split by
/// output rows, so results do not depend on the thread count.
inline std::size_t& thread_override() {
  thread_local std::size_t limit = 0;
  return limit;
}

inline std::size_t thread_count() {
  if (thread_override()) return thread_override();
  static const std::size_t count = [] {
    const char* env = std::getenv("HIAP_THREADS");
    if (!env) return std::size_t{1};
    try {
      long v = std::stol(env);
      return v < 1 ? std::size_t{1} : static_cast<std::size_t>(v);
    } catch (...) {
      return std::size_t{1};
    }
  }();
  return count;
}

/// Caps the worker count on this thread for its lifetime.
class ThreadLimit {
 public:
  explicit ThreadLimit(std::size_t n) : previous_(thread_override()) { thread_override() = n; }
  ~ThreadLimit() { thread_override() = previous_; }
  ThreadLimit(const ThreadLimit&) = delete;
  ThreadLimit& operator=(const ThreadLimit&) = delete;

 private:
  std::size_t previous_;
};

template <typename Fn>
void parallel_rows(std::size_t rows, std::size_t work_per_row, Fn&& fn) {
  const std::size_t threads = std::min(thread_count(), rows);
  if (threads <= 1 || rows * work_per_row < (1u << 16)) {
    fn(std::size_t{0}, rows);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    std::size_t begin = t * chunk, end = std::min(rows, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace hiap
