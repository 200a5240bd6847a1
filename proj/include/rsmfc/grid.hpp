#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace rsmfc {

// Uniform time grid on [0, horizon]. The terminal node is pinned to the
// horizon exactly so accumulated rounding never shifts t_n.
struct TimeGrid {
  std::size_t n_steps = 0;
  double horizon = 0.0;
  double dt = 0.0;
  std::vector<double> times;

  TimeGrid() = default;

  TimeGrid(std::size_t n, double T) : n_steps(n), horizon(T) {
    if (n == 0) throw std::invalid_argument("TimeGrid: n_steps must be >= 1");
    if (!(T > 0.0)) throw std::invalid_argument("TimeGrid: horizon must be > 0");
    dt = T / static_cast<double>(n);
    times.resize(n + 1);
    for (std::size_t k = 0; k <= n; ++k) times[k] = dt * static_cast<double>(k);
    times[n] = T;
  }

  std::size_t n_nodes() const { return n_steps + 1; }
};

}  // namespace rsmfc
