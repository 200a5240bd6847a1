#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

#include "rsmfc/model.hpp"
#include "rsmfc/riccati.hpp"
#include "rsmfc/sde.hpp"
#include "rsmfc/stats.hpp"

namespace rsmfc {

// First-order adjoint state for the two-component system, plus the pair
// (ell, v) driving the exponential martingale. v > 0 always.
struct AdjointState {
  double p1 = 0.0, p2 = 0.0;
  double q11 = 0.0, q12 = 0.0, q21 = 0.0, q22 = 0.0;
  double l1 = 0.0, l2 = 0.0;
  double v = 1.0;
};

// Three-component adjoints of the augmented system (state extended by the
// accumulated running cost).
struct AdjointState3 {
  double p1 = 0.0, p2 = 0.0, p3 = 0.0;
  double q11 = 0.0, q12 = 0.0;
  double q21 = 0.0, q22 = 0.0;
  double q31 = 0.0, q32 = 0.0;
};

// Risk-sensitive Hamiltonian, explicit form:
//   H = c p2 - f + rho beta (q11 + theta l1 p1)
//             + alpha (q21 + theta l1 p2) + sigma (q22 + theta l2 p2),
// with c = b - alpha beta. Each q entry (state row, noise column) pairs with
// theta p_state l_noise, the only pairing under which this function equals
// the augmented Hamiltonian through the adjoint transform. theta is passed
// explicitly so the theta = 0 identity with the risk-neutral form can be
// probed directly.
inline double eval_H_rs(const ModelSpec& model, double t, double rho, double x, double m,
                        double u, const AdjointState& adj,
                        double theta = std::numeric_limits<double>::quiet_NaN()) {
  if (std::isnan(theta)) theta = model.theta;
  const double b = model.drift_b(t, x, m, u);
  const double sg = model.diff_sigma(t, x, m);
  const double al = model.diff_alpha(t, x, m);
  const double be = model.obs_beta(t, x);
  const double f = model.run_cost_f(t, x, m, u);
  const double c = b - al * be;
  return c * adj.p2 - f + rho * be * (adj.q11 + theta * adj.l1 * adj.p1) +
         al * (adj.q21 + theta * adj.l1 * adj.p2) + sg * (adj.q22 + theta * adj.l2 * adj.p2);
}

// Risk-neutral Hamiltonian: same expression with the theta terms absent.
inline double eval_H_rn(const ModelSpec& model, double t, double rho, double x, double m,
                        double u, const AdjointState& adj) {
  const double b = model.drift_b(t, x, m, u);
  const double sg = model.diff_sigma(t, x, m);
  const double al = model.diff_alpha(t, x, m);
  const double be = model.obs_beta(t, x);
  const double f = model.run_cost_f(t, x, m, u);
  const double c = b - al * be;
  return c * adj.p2 - f + rho * be * adj.q11 + al * adj.q21 + sg * adj.q22;
}

// Hamiltonian of the augmented system; the running cost enters through p3
// rather than as a standalone -f term. xi itself does not appear in the
// coefficients, it is carried for signature completeness.
inline double eval_H_aug(const ModelSpec& model, double t, double rho, double x,
                         double /*xi*/, double m, double u, const AdjointState3& adj) {
  const double b = model.drift_b(t, x, m, u);
  const double sg = model.diff_sigma(t, x, m);
  const double al = model.diff_alpha(t, x, m);
  const double be = model.obs_beta(t, x);
  const double f = model.run_cost_f(t, x, m, u);
  const double c = b - al * be;
  return c * adj.p2 + f * adj.p3 + sg * adj.q22 + rho * be * adj.q11 + al * adj.q21;
}

struct HamiltonianPartials {
  double h_x = 0.0;
  double h_m = 0.0;
  double h_rho = 0.0;
};

// Partial derivatives of eval_H_rs in x, m and rho, assembled from the
// model's declared coefficient partials (c_x = b_x - alpha_x beta - alpha beta_x,
// c_m = b_m - alpha_m beta; beta carries no m dependence).
inline HamiltonianPartials eval_H_rs_partials(const ModelSpec& model, double t, double rho,
                                              double x, double m, double u,
                                              const AdjointState& adj,
                                              double theta = std::numeric_limits<double>::quiet_NaN()) {
  if (std::isnan(theta)) theta = model.theta;
  const double al = model.diff_alpha(t, x, m);
  const double be = model.obs_beta(t, x);
  const double bx = model.b_x(t, x, m, u), bm = model.b_m(t, x, m, u);
  const double ax = model.alpha_x(t, x, m), am = model.alpha_m(t, x, m);
  const double sx = model.sigma_x(t, x, m), sm = model.sigma_m(t, x, m);
  const double bex = model.beta_x(t, x);
  const double fx = model.f_x(t, x, m, u), fm = model.f_m(t, x, m, u);

  const double g1 = adj.q11 + theta * adj.l1 * adj.p1;
  const double g2 = adj.q21 + theta * adj.l1 * adj.p2;
  const double g3 = adj.q22 + theta * adj.l2 * adj.p2;

  HamiltonianPartials out;
  out.h_x = (bx - ax * be - al * bex) * adj.p2 - fx + rho * bex * g1 + ax * g2 + sx * g3;
  out.h_m = (bm - am * be) * adj.p2 - fm + am * g2 + sm * g3;
  out.h_rho = be * g1;
  return out;
}

// ---------------------------------------------------------------------------
// Adjoint transform between the augmented and risk-sensitive systems
// ---------------------------------------------------------------------------

// p_hat = p / (theta v), q_hat = q / (theta v) - theta p_hat ell^T.
inline AdjointState3 transform_adjoint(const AdjointState3& orig, double v, double l1,
                                       double l2, double theta) {
  if (!(v > 0.0)) throw std::invalid_argument("transform_adjoint: v must be > 0");
  if (theta == 0.0) throw std::invalid_argument("transform_adjoint: theta must be nonzero");
  const double s = 1.0 / (theta * v);
  AdjointState3 h;
  h.p1 = orig.p1 * s;
  h.p2 = orig.p2 * s;
  h.p3 = orig.p3 * s;
  h.q11 = orig.q11 * s - theta * h.p1 * l1;
  h.q12 = orig.q12 * s - theta * h.p1 * l2;
  h.q21 = orig.q21 * s - theta * h.p2 * l1;
  h.q22 = orig.q22 * s - theta * h.p2 * l2;
  h.q31 = orig.q31 * s - theta * h.p3 * l1;
  h.q32 = orig.q32 * s - theta * h.p3 * l2;
  return h;
}

inline AdjointState3 inverse_transform_adjoint(const AdjointState3& hat, double v, double l1,
                                               double l2, double theta) {
  if (!(v > 0.0)) throw std::invalid_argument("inverse_transform_adjoint: v must be > 0");
  if (theta == 0.0)
    throw std::invalid_argument("inverse_transform_adjoint: theta must be nonzero");
  const double s = theta * v;
  AdjointState3 p;
  p.p1 = hat.p1 * s;
  p.p2 = hat.p2 * s;
  p.p3 = hat.p3 * s;
  p.q11 = (hat.q11 + theta * hat.p1 * l1) * s;
  p.q12 = (hat.q12 + theta * hat.p1 * l2) * s;
  p.q21 = (hat.q21 + theta * hat.p2 * l1) * s;
  p.q22 = (hat.q22 + theta * hat.p2 * l2) * s;
  p.q31 = (hat.q31 + theta * hat.p3 * l1) * s;
  p.q32 = (hat.q32 + theta * hat.p3 * l2) * s;
  return p;
}

// ---------------------------------------------------------------------------
// LQ closed-form adjoints and feedback
// ---------------------------------------------------------------------------

// Closed-form adjoint series along simulated paths:
//   p1 = -lambda / rho,  p2 = -gamma x,
//   q11 = beta lambda x / rho,  q12 = 0,  q21 = -alpha gamma,  q22 = -sigma gamma.
// rho p1 = -lambda holds along each path by construction.
struct LqAdjointPath {
  TimeGrid grid;
  std::size_t n_paths = 0;
  std::vector<double> p1, p2, q11;  // (n+1) x N, step-major
  std::vector<double> q21, q22;     // n+1 (deterministic in the particle index)
  double q12 = 0.0;                 // identically zero

  std::size_t idx(std::size_t k, std::size_t i) const { return k * n_paths + i; }
};

inline LqAdjointPath lq_adjoints(const LqSpec& spec, const RiccatiSolution& sol,
                                 const EnsembleTrajectory& traj) {
  spec.validate();
  if (sol.gamma.size() != traj.grid.n_nodes())
    throw std::invalid_argument("lq_adjoints: gamma/grid size mismatch");
  LqAdjointPath out;
  out.grid = traj.grid;
  out.n_paths = traj.n_paths;
  const std::size_t N = traj.n_paths;
  const std::size_t nn = traj.grid.n_nodes();
  out.p1.resize(nn * N);
  out.p2.resize(nn * N);
  out.q11.resize(nn * N);
  out.q21.resize(nn);
  out.q22.resize(nn);
  const double lambda = sol.lambda;
  for (std::size_t k = 0; k < nn; ++k) {
    const double g = sol.gamma[k];
    out.q21[k] = -spec.alpha * g;
    out.q22[k] = -spec.sigma * g;
    for (std::size_t i = 0; i < N; ++i) {
      const double rho = traj.rho[traj.idx(k, i)];
      const double x = traj.x[traj.idx(k, i)];
      const double s = 1.0 / rho;
      out.p1[out.idx(k, i)] = -lambda * s;
      out.p2[out.idx(k, i)] = -g * x;
      out.q11[out.idx(k, i)] = spec.beta * lambda * x * s;
    }
  }
  return out;
}

struct LqControl {
  double u = 0.0;
  bool clamped = false;
};

// Feedback law u = -b gamma(t) pi, clamped to the admissible interval.
inline LqControl lq_control(const LqSpec& spec, const RiccatiSolution& sol,
                            std::size_t node, double filter_mean) {
  if (node >= sol.gamma.size()) throw std::out_of_range("lq_control: node out of range");
  LqControl out;
  out.u = -spec.b_gain * sol.gamma[node] * filter_mean;
  if (out.u < spec.u_lo) {
    out.u = spec.u_lo;
    out.clamped = true;
  } else if (out.u > spec.u_hi) {
    out.u = spec.u_hi;
    out.clamped = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quadratic-BSDE consistency through the logarithmic transform
// ---------------------------------------------------------------------------

// Z(t) = (1/theta) log v(t) - integral_0^t f ds, checked against its terminal
// target (1/theta) log rho(T) + h(x(T), m(T)). The terminal defect cannot
// vanish pathwise for an ansatz ell that only matches the martingale in
// conditional expectation; it does vanish (at the discretization order) when
// ell solves the underlying equation exactly.
struct BsdeCheck {
  TimeGrid grid;
  std::size_t n_paths = 0;
  std::vector<double> z;                  // (n+1) x N, step-major
  std::vector<double> terminal_residual;  // per path
  double mean_residual = 0.0;
  double mean_abs_residual = 0.0;
  double se_residual = 0.0;

  std::size_t idx(std::size_t k, std::size_t i) const { return k * n_paths + i; }
};

inline BsdeCheck bsde_consistency(const ModelSpec& model, const EnsembleTrajectory& traj,
                                  const VthetaPath& vpath) {
  if (vpath.n_paths != traj.n_paths || vpath.grid.n_steps != traj.grid.n_steps)
    throw std::invalid_argument("bsde_consistency: trajectory/vpath mismatch");
  const double theta = model.theta;
  const std::size_t N = traj.n_paths;
  const std::size_t nn = traj.grid.n_nodes();
  const std::size_t nT = traj.grid.n_steps;

  BsdeCheck out;
  out.grid = traj.grid;
  out.n_paths = N;
  out.z.resize(nn * N);
  out.terminal_residual.resize(N);
  for (std::size_t k = 0; k < nn; ++k)
    for (std::size_t i = 0; i < N; ++i)
      out.z[k * N + i] = vpath.log_v[k * N + i] / theta - traj.xi[traj.idx(k, i)];

  const double mT = traj.m[nT];
  for (std::size_t i = 0; i < N; ++i) {
    const double target = std::log(traj.rho[traj.idx(nT, i)]) / theta +
                          model.term_cost_h(traj.x[traj.idx(nT, i)], mT);
    out.terminal_residual[i] = out.z[nT * N + i] - target;
  }
  const auto ms = mean_with_se(out.terminal_residual);
  out.mean_residual = ms.mean;
  out.se_residual = ms.se;
  double acc = 0.0;
  for (double r : out.terminal_residual) acc += std::fabs(r);
  out.mean_abs_residual = acc / static_cast<double>(N);
  return out;
}

}  // namespace rsmfc
