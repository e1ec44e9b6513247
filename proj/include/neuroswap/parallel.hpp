#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace neuroswap {

// Worker cap: NEUROSWAP_THREADS env var, else hardware concurrency.
inline int max_threads() {
  if (const char* env = std::getenv("NEUROSWAP_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

inline bool& in_parallel_region() {
  thread_local bool flag = false;
  return flag;
}

// Runs fn(i) for i in [0, n) across up to max_threads() workers. Tasks must
// be independent: the library only uses this across separate forward
// evaluations (data generation, per-frame registration, benchmark folds),
// never inside a single backward pass. Nested calls run serially so the
// worker cap holds globally.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  int workers = std::min<int64_t>(max_threads(), n);
  if (in_parallel_region()) workers = 1;
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      in_parallel_region() = true;
      for (;;) {
        int64_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace neuroswap
