#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace space {

// Worker count: SPACE_THREADS if set, else hardware concurrency, clamped.
inline int thread_count() {
  if (const char* env = std::getenv("SPACE_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return std::min(n, 64);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(std::min(hw, 16u));
}

// Runs fn(i) for i in [0, n). Each index must write only to its own slots so
// results are identical for any worker count.
template <class F>
void parallel_for(int n, F&& fn, int workers = thread_count()) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace space
