#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dualband {

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Work is split into
// contiguous blocks; callers write results into per-index slots and reduce
// afterwards in index order, so output does not depend on `jobs`.
class ParallelFor {
 public:
  explicit ParallelFor(std::size_t jobs = 1) : jobs_(std::max<std::size_t>(jobs, 1)) {}

  template <typename Fn>
  void operator()(std::size_t n, const Fn& fn) const {
    const std::size_t workers = std::min(jobs_, n);
    if (workers <= 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::jthread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = n * w / workers, end = n * (w + 1) / workers;
      threads.emplace_back([&, begin, end] {
        try {
          for (std::size_t i = begin; i < end; ++i) fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      });
    }
    threads.clear();
    if (failure) std::rethrow_exception(failure);
  }

  std::size_t jobs() const { return jobs_; }

 private:
  std::size_t jobs_;
};

}  // namespace dualband
