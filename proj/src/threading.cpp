#include "tlkit/threading.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace tlkit {

namespace {

thread_local bool t_inside_worker = false;

struct Job {
  const std::function<void(int64_t, int64_t)>* fn = nullptr;
  int64_t n = 0;
  int64_t chunk = 0;
  std::atomic<int64_t> next{0};
  std::atomic<int64_t> remaining{0};
  std::atomic<int> drainers{0};
};

class Pool {
 public:
  explicit Pool(int workers) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(Job& job) {
    // One job at a time; concurrent callers serialize here.
    std::lock_guard<std::mutex> run_lk(run_mu_);
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_ = &job;
      ++epoch_;
    }
    cv_.notify_all();
    drain(job);
    {
      // The job may be destroyed as soon as run() returns, so wait until no
      // worker can still touch it: all chunks done and all drainers gone.
      std::unique_lock<std::mutex> lk(mu_);
      done_cv_.wait(lk, [&] {
        return job.remaining.load() == 0 && job.drainers.load() == 0;
      });
      job_ = nullptr;
    }
  }

 private:
  static void drain(Job& job) {
    for (;;) {
      int64_t begin = job.next.fetch_add(job.chunk);
      if (begin >= job.n) break;
      int64_t end = std::min(begin + job.chunk, job.n);
      (*job.fn)(begin, end);
      job.remaining.fetch_sub(end - begin);
    }
  }

  void worker_loop() {
    t_inside_worker = true;
    uint64_t seen = 0;
    for (;;) {
      Job* job = nullptr;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || (job_ != nullptr && epoch_ != seen); });
        if (stop_) return;
        job = job_;
        seen = epoch_;
        job->drainers.fetch_add(1);
      }
      drain(*job);
      job->drainers.fetch_sub(1);
      { std::lock_guard<std::mutex> lk(mu_); }
      done_cv_.notify_all();
    }
  }

  std::mutex run_mu_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  Job* job_ = nullptr;
  uint64_t epoch_ = 0;
  bool stop_ = false;
  std::vector<std::thread> threads_;
};

Pool* pool_instance(int workers) {
  static Pool pool(workers);
  return &pool;
}

}  // namespace

int thread_budget() {
  static const int budget = [] {
    int hw = int(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("TLKIT_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1) hw = std::min(hw, cap);
    }
    return hw;
  }();
  return budget;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  const int budget = thread_budget();
  if (budget == 1 || n < 2 || t_inside_worker) {
    fn(0, n);
    return;
  }
  Job job;
  job.fn = &fn;
  job.n = n;
  job.chunk = std::max<int64_t>(1, n / (int64_t(budget) * 8));
  job.remaining.store(n);
  pool_instance(budget - 1)->run(job);
}

}  // namespace tlkit
