#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsmfc/grid.hpp"
#include "rsmfc/model.hpp"

namespace rsmfc {

enum class RiccatiCase { Case1 = 1, Case2 = 2 };

// Backward scalar Riccati solution gamma(t) with terminal value 1 and the
// constant companion lambda = 1/theta.
struct RiccatiSolution {
  RiccatiCase case_id = RiccatiCase::Case1;
  std::vector<double> gamma;  // one value per grid node, gamma[n] == 1 exactly
  double lambda = 0.0;        // 1/theta, grid- and case-independent
  LqSpec params;
};

namespace detail {

// Forward-time right-hand sides gamma' = f(t, gamma) of the two equilibria:
//   case 1: gamma' + (2c + theta(alpha+sigma)) gamma - b^2 gamma^2 + beta - beta^2/theta = 0
//   case 2: gamma' + (2c + beta) gamma + (theta(alpha+sigma) - b^2) gamma^2 - beta^2/theta = 0
inline double riccati_rhs(const LqSpec& s, RiccatiCase which, double g) {
  const double c = s.c();
  if (which == RiccatiCase::Case1)
    return s.b_gain * s.b_gain * g * g - (2.0 * c + s.theta * (s.alpha + s.sigma)) * g -
           s.beta + s.beta * s.beta / s.theta;
  return -(2.0 * c + s.beta) * g - (s.theta * (s.alpha + s.sigma) - s.b_gain * s.b_gain) * g * g +
         s.beta * s.beta / s.theta;
}

}  // namespace detail

inline constexpr double kRiccatiBlowup = 1e8;

// Classical RK4 integrated backward from gamma(T) = 1. The terminal node is
// assigned, not integrated, so gamma[n] == 1 bit-exactly. Escaping
// |gamma| > 1e8 raises with the escape time: Riccati equations do blow up in
// finite time for adverse parameter signs.
inline RiccatiSolution solve_riccati(const LqSpec& spec, const TimeGrid& grid,
                                     RiccatiCase which) {
  spec.validate();
  if (std::fabs(grid.horizon - spec.horizon_T) > 1e-12 * std::max(1.0, spec.horizon_T))
    throw std::invalid_argument("solve_riccati: grid horizon does not match spec");

  RiccatiSolution sol;
  sol.case_id = which;
  sol.lambda = 1.0 / spec.theta;
  sol.params = spec;
  sol.gamma.assign(grid.n_nodes(), 0.0);

  const std::size_t n = grid.n_steps;
  sol.gamma[n] = 1.0;
  const double h = -grid.dt;  // backward step
  double g = 1.0;
  for (std::size_t k = n; k-- > 0;) {
    const double k1 = detail::riccati_rhs(spec, which, g);
    const double k2 = detail::riccati_rhs(spec, which, g + 0.5 * h * k1);
    const double k3 = detail::riccati_rhs(spec, which, g + 0.5 * h * k2);
    const double k4 = detail::riccati_rhs(spec, which, g + h * k3);
    g += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!std::isfinite(g) || std::fabs(g) > kRiccatiBlowup)
      throw std::runtime_error("riccati: blow-up, |gamma| escaped 1e8 near t = " +
                               std::to_string(grid.times[k]) + " (case " +
                               std::to_string(static_cast<int>(which)) + ")");
    sol.gamma[k] = g;
  }
  return sol;
}

inline RiccatiSolution solve_case1(const LqSpec& spec, const TimeGrid& grid) {
  return solve_riccati(spec, grid, RiccatiCase::Case1);
}

inline RiccatiSolution solve_case2(const LqSpec& spec, const TimeGrid& grid) {
  return solve_riccati(spec, grid, RiccatiCase::Case2);
}

// Max absolute defect of the defining ODE at interval midpoints, using cubic
// Hermite interpolation of (gamma, gamma') between nodes. Nodal derivatives
// come from the ODE itself, so a perturbed node shows up as a large defect.
inline double riccati_residual(const RiccatiSolution& sol, const TimeGrid& grid) {
  if (sol.gamma.size() != grid.n_nodes())
    throw std::invalid_argument("riccati_residual: solution/grid size mismatch");
  const double h = grid.dt;
  double worst = 0.0;
  for (std::size_t k = 0; k < grid.n_steps; ++k) {
    const double g0 = sol.gamma[k], g1 = sol.gamma[k + 1];
    const double d0 = detail::riccati_rhs(sol.params, sol.case_id, g0);
    const double d1 = detail::riccati_rhs(sol.params, sol.case_id, g1);
    // Hermite value and slope at the midpoint s = 1/2.
    const double gm = 0.5 * (g0 + g1) + 0.125 * h * (d0 - d1);
    const double dm = 1.5 * (g1 - g0) / h - 0.25 * (d0 + d1);
    const double defect = std::fabs(dm - detail::riccati_rhs(sol.params, sol.case_id, gm));
    if (defect > worst) worst = defect;
  }
  return worst;
}

}  // namespace rsmfc
