#pragma once

#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace pqd {

/// Fixed-size worker pool. Work is handed out as static contiguous chunks
/// so every index is processed by exactly one worker in a fixed order;
/// results are bitwise independent of the pool size.
class ThreadPool {
 public:
  explicit ThreadPool(int threads);
  ~ThreadPool();

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  /// Runs fn(begin, end) over a static partition of [begin, end) and blocks
  /// until all chunks finish. With one thread (or a tiny range) the call
  /// runs inline.
  void parallel_for(int begin, int end, const std::function<void(int, int)>& fn);

  int thread_count() const { return static_cast<int>(workers_.size()) + 1; }

 private:
  struct Task {
    const std::function<void(int, int)>* fn = nullptr;
    int begin = 0, end = 0;
  };

  void worker_loop();

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<Task> queue_;
  int pending_ = 0;
  bool stop_ = false;
};

}  // namespace pqd
