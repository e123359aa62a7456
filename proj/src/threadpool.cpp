#include "pqd/threadpool.hpp"

#include <algorithm>

#include "pqd/errors.hpp"

namespace pqd {

ThreadPool::ThreadPool(int threads) {
  if (threads < 1) throw ConfigError("thread count must be >= 1");
  for (int i = 1; i < threads; ++i) workers_.emplace_back([this] { worker_loop(); });
}

ThreadPool::~ThreadPool() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  for (std::thread& t : workers_) t.join();
}

void ThreadPool::worker_loop() {
  for (;;) {
    Task task;
    {
      std::unique_lock<std::mutex> lock(mu_);
      cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
      if (stop_ && queue_.empty()) return;
      task = queue_.back();
      queue_.pop_back();
    }
    (*task.fn)(task.begin, task.end);
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }
}

void ThreadPool::parallel_for(int begin, int end, const std::function<void(int, int)>& fn) {
  const int n = end - begin;
  if (n <= 0) return;
  const int chunks = std::min(n, thread_count());
  if (chunks == 1) {
    fn(begin, end);
    return;
  }
  const int base = n / chunks, extra = n % chunks;
  std::vector<std::pair<int, int>> spans;
  spans.reserve(static_cast<std::size_t>(chunks));
  int at = begin;
  for (int c = 0; c < chunks; ++c) {
    const int len = base + (c < extra ? 1 : 0);
    spans.emplace_back(at, at + len);
    at += len;
  }
  {
    std::lock_guard<std::mutex> lock(mu_);
    for (int c = 1; c < chunks; ++c) queue_.push_back(Task{&fn, spans[c].first, spans[c].second});
    pending_ = chunks - 1;
  }
  cv_.notify_all();
  fn(spans[0].first, spans[0].second);  // chunk 0 on the calling thread
  std::unique_lock<std::mutex> lock(mu_);
  done_cv_.wait(lock, [this] { return pending_ == 0; });
}

}  // namespace pqd
