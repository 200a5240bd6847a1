#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace rsmfc {

inline int& thread_cap_slot() {
  static int cap = 0;
  return cap;
}

// Programmatic override; 0 restores the RSMFC_THREADS / hardware default.
inline void set_thread_cap(int n) { thread_cap_slot() = n; }

inline int resolve_threads() {
  if (thread_cap_slot() > 0) return thread_cap_slot();
  if (const char* env = std::getenv("RSMFC_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(std::min(hw, 8u)) : 1;
}

// Chunked parallel loop. Bodies must write only to disjoint per-index slots
// and must not throw; chunking depends only on (n, thread count), and all
// reductions happen sequentially outside, so results are bitwise identical
// for any thread count.
template <class F>
inline void parallel_for(std::size_t n, F&& body) {
  const int nt = resolve_threads();
  if (nt <= 1 || n < 4096) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  const std::size_t chunk = (n + static_cast<std::size_t>(nt) - 1) / static_cast<std::size_t>(nt);
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(nt));
  for (int w = 0; w < nt; ++w) {
    const std::size_t lo = static_cast<std::size_t>(w) * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([&body, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& t : workers) t.join();
}

}  // namespace rsmfc
