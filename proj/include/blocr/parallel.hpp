#pragma once

#include <atomic>
#include <condition_variable>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace blocr {

// Fixed-size worker pool. Tasks are indexed; the calling thread participates.
// All deterministic code paths key their randomness off task indices, so
// results never depend on which thread runs which index.
class ThreadPool {
public:
  explicit ThreadPool(int threads) {
    const int workers = std::max(0, threads - 1);
    for (int i = 0; i < workers; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    wake_cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  int thread_count() const { return static_cast<int>(workers_.size()) + 1; }

  // Runs fn(k) for every k in [0, count). Blocks until all complete.
  // The first exception thrown by any task is rethrown here.
  void parallel_for(int count, const std::function<void(int)>& fn) {
    if (count <= 0) return;
    if (workers_.empty()) {
      for (int k = 0; k < count; ++k) fn(k);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      fn_ = &fn;
      next_.store(0, std::memory_order_relaxed);
      count_ = count;
      pending_.store(count, std::memory_order_relaxed);
      ++generation_;
    }
    wake_cv_.notify_all();
    work();
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_.load(std::memory_order_acquire) == 0; });
    fn_ = nullptr;
    if (error_) {
      std::exception_ptr e = error_;
      error_ = nullptr;
      std::rethrow_exception(e);
    }
  }

private:
  void work() {
    for (;;) {
      const int idx = next_.fetch_add(1, std::memory_order_relaxed);
      if (idx >= count_) break;
      try {
        (*fn_)(idx);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu_);
        if (!error_) error_ = std::current_exception();
      }
      if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard<std::mutex> lk(mu_);
        done_cv_.notify_all();
      }
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(mu_);
        wake_cv_.wait(lk, [this, &seen] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
      }
      work();
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable wake_cv_;
  std::condition_variable done_cv_;
  const std::function<void(int)>* fn_ = nullptr;
  std::atomic<int> next_{0};
  std::atomic<int> pending_{0};
  int count_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
};

// Deterministic parallel reduction: [0, n) is cut into fixed-size chunks,
// each chunk is mapped serially in index order, and the partials are folded
// in chunk order on the calling thread. The grouping depends only on
// chunk_size, so the result is bitwise identical for any thread count.
template <typename Acc, typename MapChunk, typename Fold>
Acc chunked_reduce(ThreadPool& pool, int n, int chunk_size, Acc init, MapChunk map_chunk,
                   Fold fold) {
  if (n <= 0) return init;
  const int chunks = (n + chunk_size - 1) / chunk_size;
  std::vector<Acc> partials(chunks, init);
  pool.parallel_for(chunks, [&](int c) {
    const int begin = c * chunk_size;
    const int end = std::min(n, begin + chunk_size);
    partials[c] = map_chunk(begin, end);
  });
  Acc acc = std::move(init);
  for (int c = 0; c < chunks; ++c) fold(acc, std::move(partials[c]));
  return acc;
}

}  // namespace blocr
