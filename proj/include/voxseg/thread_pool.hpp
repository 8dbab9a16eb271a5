#ifndef VOXSEG_THREAD_POOL_HPP
#define VOXSEG_THREAD_POOL_HPP

#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "voxseg/common.hpp"

namespace voxseg {

// Shared worker pool for data-parallel loops. Work is split into chunks whose
// boundaries depend only on the problem size and grain, never on the thread
// count, and every output element has exactly one writer. Results are therefore
// bit-identical for any --threads setting.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  void set_threads(int n) {
    if (n < 1) n = 1;
    std::lock_guard<std::mutex> outer(api_mutex_);
    stop_workers();
    n_threads_ = n;
    start_workers();
  }

  int threads() const { return n_threads_; }

  // Runs fn(chunk_index) for chunk_index in [0, n_chunks). The calling thread
  // participates. Nested calls from inside a worker run inline.
  void run_chunks(int64_t n_chunks, const std::function<void(int64_t)>& fn) {
    if (n_chunks <= 0) return;
    if (n_chunks == 1 || n_threads_ == 1 || inside_worker_) {
      for (int64_t i = 0; i < n_chunks; ++i) fn(i);
      return;
    }
    std::lock_guard<std::mutex> outer(api_mutex_);
    {
      std::lock_guard<std::mutex> lk(mutex_);
      job_fn_ = &fn;
      next_chunk_.store(0, std::memory_order_relaxed);
      end_chunk_ = n_chunks;
      pending_workers_ = static_cast<int>(workers_.size());
      ++generation_;
    }
    cv_.notify_all();
    work_loop(fn, n_chunks);  // caller participates
    std::unique_lock<std::mutex> lk(mutex_);
    done_cv_.wait(lk, [&] { return pending_workers_ == 0; });
    job_fn_ = nullptr;
  }

  ~ThreadPool() { stop_workers(); }

 private:
  ThreadPool() {
    n_threads_ = static_cast<int>(std::thread::hardware_concurrency());
    if (n_threads_ < 1) n_threads_ = 1;
    start_workers();
  }

  void start_workers() {
    shutdown_ = false;
    for (int i = 0; i < n_threads_ - 1; ++i) {
      workers_.emplace_back([this] { worker_main(); });
    }
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lk(mutex_);
      shutdown_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void worker_main() {
    inside_worker_ = true;
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t)>* fn = nullptr;
      int64_t end = 0;
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_.wait(lk, [&] { return shutdown_ || generation_ != seen; });
        seen = generation_;
        if (shutdown_) return;
        fn = job_fn_;
        end = end_chunk_;
      }
      if (fn) work_loop(*fn, end);
      {
        std::lock_guard<std::mutex> lk(mutex_);
        if (--pending_workers_ == 0) done_cv_.notify_all();
      }
    }
  }

  void work_loop(const std::function<void(int64_t)>& fn, int64_t end) {
    for (;;) {
      int64_t i = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      if (i >= end) break;
      fn(i);
    }
  }

  std::vector<std::thread> workers_;
  std::mutex api_mutex_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(int64_t)>* job_fn_ = nullptr;
  std::atomic<int64_t> next_chunk_{0};
  int64_t end_chunk_ = 0;
  int pending_workers_ = 0;
  uint64_t generation_ = 0;
  bool shutdown_ = false;
  int n_threads_ = 1;
  static thread_local bool inside_worker_;
};

inline thread_local bool ThreadPool::inside_worker_ = false;

inline void set_num_threads(int n) { ThreadPool::instance().set_threads(n); }
inline int num_threads() { return ThreadPool::instance().threads(); }

// Partitions [0, n) into fixed-size chunks of `grain` and runs body(i0, i1)
// over each. Chunk layout is independent of the worker count.
template <typename Body>
void parallel_for(int64_t n, int64_t grain, const Body& body) {
  if (n <= 0) return;
  if (grain < 1) grain = 1;
  const int64_t n_chunks = (n + grain - 1) / grain;
  ThreadPool::instance().run_chunks(n_chunks, [&](int64_t c) {
    const int64_t i0 = c * grain;
    const int64_t i1 = std::min(n, i0 + grain);
    body(i0, i1);
  });
}

}  // namespace voxseg

#endif  // VOXSEG_THREAD_POOL_HPP
