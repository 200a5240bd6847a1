#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsmfc/filter.hpp"
#include "rsmfc/grid.hpp"
#include "rsmfc/hamiltonian.hpp"
#include "rsmfc/model.hpp"
#include "rsmfc/riccati.hpp"
#include "rsmfc/sde.hpp"
#include "rsmfc/stats.hpp"

namespace rsmfc {

// ---------------------------------------------------------------------------
// Cost estimation
// ---------------------------------------------------------------------------

struct CostEstimate {
  double j_theta = 0.0;  // > 0, expectation of a positive weight
  double se = 0.0;
  std::size_t n_paths = 0;
  double theta = 0.0;
  std::string control_label;
};

namespace detail {

// Mean and SE of exp(lp) computed against a common shift so the weights can
// span many orders of magnitude without overflow.
inline CostEstimate cost_from_log_weights(const std::vector<double>& lp, double theta,
                                          const std::string& label) {
  const std::size_t N = lp.size();
  double mx = lp[0];
  for (double v : lp) mx = std::max(mx, v);
  if (mx > 700.0)
    throw std::overflow_error("estimate_cost: terminal weight overflow; reduce theta or T");
  double s = 0.0;
  for (double v : lp) s += std::exp(v - mx);
  const double mean_shifted = s / static_cast<double>(N);
  double ss = 0.0;
  for (double v : lp) {
    const double d = std::exp(v - mx) - mean_shifted;
    ss += d * d;
  }
  const double sd_shifted = N > 1 ? std::sqrt(ss / static_cast<double>(N - 1)) : 0.0;
  CostEstimate out;
  out.j_theta = std::exp(mx) * mean_shifted;
  out.se = std::exp(mx) * sd_shifted / std::sqrt(static_cast<double>(N));
  out.n_paths = N;
  out.theta = theta;
  out.control_label = label;
  return out;
}

}  // namespace detail

// J^theta = E[rho(T) exp(theta (integral f dt + h))], Monte Carlo over the
// merged-system ensemble. Computed in log space throughout.
template <class Drivers>
inline CostEstimate estimate_cost(const ModelSpec& model, ControlPolicy& policy,
                                  const Drivers& drivers, const std::string& label = "") {
  const auto term = evolve_terminal(model, policy, drivers);
  const auto lp = log_terminal_weights(term.log_rho_T, term.x_T, term.xi_T,
                                       term.m[term.grid.n_steps], model);
  return detail::cost_from_log_weights(lp, model.theta, label);
}

inline CostEstimate estimate_cost(const ModelSpec& model, ControlPolicy& policy,
                                  const TimeGrid& grid, std::size_t n_paths,
                                  std::uint64_t seed, const std::string& label = "") {
  const CounterDrivers drivers(grid, n_paths, seed);
  return estimate_cost(model, policy, drivers, label);
}

// ---------------------------------------------------------------------------
// Small-theta expansion
// ---------------------------------------------------------------------------

struct ExpansionRow {
  double theta = 0.0;
  double j_theta = 0.0;
  double log_j_over_theta = 0.0;
  double residual = 0.0;
};

struct ExpansionReport {
  std::vector<ExpansionRow> rows;
  double psi_mean = 0.0;  // E^u[Psi], density-weighted
  double psi_var = 0.0;   // var_u(Psi)
  double slope = 0.0;     // log-log regression slope of residual vs theta
  bool slope_defined = false;
};

// Checks (1/theta) log J^theta against E^u[Psi] + (theta/2) var_u(Psi).
// One simulation serves every theta: the dynamics do not involve theta, so
// Psi and rho are shared and the residuals across theta use common random
// numbers. All P^u-moments are density-weighted, self-normalized.
template <class Drivers>
inline ExpansionReport theta_expansion_check(const ModelSpec& model, ControlPolicy& policy,
                                             const Drivers& drivers,
                                             const std::vector<double>& theta_list) {
  if (theta_list.empty()) throw std::invalid_argument("theta_expansion_check: empty theta list");
  for (double th : theta_list)
    if (th == 0.0 || std::fabs(th) > 0.5)
      throw std::invalid_argument("theta_expansion_check: theta must be nonzero and |theta| <= 0.5");

  const auto term = evolve_terminal(model, policy, drivers);
  const std::size_t N = term.n_paths;
  const double m_T = term.m[term.grid.n_steps];
  std::vector<double> psi(N);
  for (std::size_t i = 0; i < N; ++i)
    psi[i] = term.xi_T[i] + model.term_cost_h(term.x_T[i], m_T);

  // Normalized density weights.
  double mx = term.log_rho_T[0];
  for (double v : term.log_rho_T) mx = std::max(mx, v);
  std::vector<double> w(N);
  double sw = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    w[i] = std::exp(term.log_rho_T[i] - mx);
    sw += w[i];
  }
  double e_psi = 0.0;
  for (std::size_t i = 0; i < N; ++i) e_psi += w[i] * psi[i];
  e_psi /= sw;
  double v_psi = 0.0;
  for (std::size_t i = 0; i < N; ++i) v_psi += w[i] * (psi[i] - e_psi) * (psi[i] - e_psi);
  v_psi /= sw;

  ExpansionReport rep;
  rep.psi_mean = e_psi;
  rep.psi_var = v_psi;

  const double lse_rho = logsumexp(term.log_rho_T);
  std::vector<double> log_r, log_th;
  for (double th : theta_list) {
    std::vector<double> lp(N);
    for (std::size_t i = 0; i < N; ++i) lp[i] = term.log_rho_T[i] + th * psi[i];
    const double lse = logsumexp(lp);
    ExpansionRow row;
    row.theta = th;
    row.j_theta = std::exp(lse - std::log(static_cast<double>(N)));
    row.log_j_over_theta = (lse - std::log(static_cast<double>(N))) / th;
    // Self-normalized cumulant-generating function keeps the O(N^-1/2)
    // density-normalization noise out of the small-theta residual.
    const double k_norm = lse - lse_rho;
    row.residual = std::fabs(k_norm / th - e_psi - 0.5 * th * v_psi);
    rep.rows.push_back(row);
    if (row.residual > 0.0) {
      log_th.push_back(std::log(th));
      log_r.push_back(std::log(row.residual));
    }
  }
  if (log_r.size() == theta_list.size() && log_r.size() >= 2) {
    rep.slope = ols_slope(log_th, log_r);
    rep.slope_defined = true;
  }
  return rep;
}

inline ExpansionReport theta_expansion_check(const ModelSpec& model, ControlPolicy& policy,
                                             const TimeGrid& grid,
                                             const std::vector<double>& theta_list,
                                             std::size_t n_paths, std::uint64_t seed) {
  const CounterDrivers drivers(grid, n_paths, seed);
  return theta_expansion_check(model, policy, drivers, theta_list);
}

// ---------------------------------------------------------------------------
// Variational-inequality certificate
// ---------------------------------------------------------------------------

struct ViCell {
  std::size_t obs_path = 0;
  double t = 0.0;
  double u = 0.0;
  double u_bar = 0.0;
  double estimate = 0.0;  // weighted conditional mean of delta H
  double se = 0.0;
  double analytic = 0.0;  // -(u - u_bar)^2 / 2
  bool violation = false;
};

struct ViReport {
  RiccatiCase case_id = RiccatiCase::Case1;
  double abs_tol = 1e-6;
  std::vector<ViCell> cells;

  bool any_violation() const {
    for (const auto& c : cells)
      if (c.violation) return true;
    return false;
  }
  double worst_collapse_gap() const {
    double g = 0.0;
    for (const auto& c : cells) g = std::max(g, std::fabs(c.estimate - c.analytic));
    return g;
  }
};

struct ViOptions {
  std::vector<double> u_offsets = {-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0};
  std::vector<std::size_t> t_nodes;  // defaults to 5 interior nodes
  std::size_t n_obs_paths = 8;
  std::size_t n_particles = 10000;
  double abs_tol = 1e-6;
  std::uint64_t seed = 42;
};

// Monte Carlo certificate of the first-order condition: along the candidate
// feedback, the tilted conditional expectation of H(u) - H(u_bar) must be
// nonpositive for every admissible u. Conditioning on the observation record
// is realized by particle weights on a common observation path; the check is
// repeated over independent observation paths. For the LQ family the
// u-dependent part collapses analytically to -(u - u_bar)^2 / 2, which the
// estimator is compared against cell by cell.
inline ViReport check_variational_inequality(const LqSpec& spec, const RiccatiSolution& sol,
                                             const EllAnsatz& ansatz, const TimeGrid& grid,
                                             const ViOptions& opts = {}) {
  spec.validate();
  const ModelSpec model = expand_lq(spec);
  ViReport rep;
  rep.case_id = sol.case_id;
  rep.abs_tol = opts.abs_tol;

  std::vector<std::size_t> t_nodes = opts.t_nodes;
  if (t_nodes.empty()) {
    const std::size_t n = grid.n_steps;
    t_nodes = {n / 10, 3 * n / 10, n / 2, 7 * n / 10, 9 * n / 10};
  }

  for (std::size_t r = 0; r < opts.n_obs_paths; ++r) {
    const std::uint64_t obs_seed = sub_seed(opts.seed, 0x6f627320ULL + r);
    const auto dy = sample_observation_path(grid, obs_seed);

    ParticleFilterOptions pf;
    pf.control.mode = CommonControlConfig::Mode::LqFeedback;
    pf.control.lq = &spec;
    pf.control.sol = &sol;
    pf.observer = [&](const EnsembleStepView& view) {
      bool selected = false;
      for (std::size_t kn : t_nodes) selected = selected || kn == view.node;
      if (!selected) return;
      const std::size_t k = view.node;
      const std::size_t N = view.x->size();
      const double g = sol.gamma[k];
      const double lambda = sol.lambda;
      const double u_bar = view.u;
      std::vector<double> dH(N);
      for (double off : opts.u_offsets) {
        const double u = u_bar + off;
        for (std::size_t i = 0; i < N; ++i) {
          const double xv = (*view.x)[i];
          const double rv = (*view.rho)[i];
          AdjointState adj;
          adj.p1 = -lambda / rv;
          adj.p2 = -g * xv;
          adj.q11 = spec.beta * lambda * xv / rv;
          adj.q12 = 0.0;
          adj.q21 = -spec.alpha * g;
          adj.q22 = -spec.sigma * g;
          adj.l1 = ansatz.xi1[k] * xv;
          adj.l2 = ansatz.xi2[k] * xv;
          dH[i] = eval_H_rs(model, view.t, rv, xv, view.mean, u, adj) -
                  eval_H_rs(model, view.t, rv, xv, view.mean, u_bar, adj);
        }
        const auto wm = weighted_moments(*view.weights, dH);
        ViCell cell;
        cell.obs_path = r;
        cell.t = view.t;
        cell.u = u;
        cell.u_bar = u_bar;
        cell.estimate = wm.mean;
        cell.se = wm.se_mean;
        cell.analytic = -0.5 * (u - u_bar) * (u - u_bar);
        cell.violation = cell.estimate > 3.0 * cell.se + opts.abs_tol;
        rep.cells.push_back(cell);
      }
    };
    particle_filter(model, ansatz, dy, opts.n_particles,
                    sub_seed(opts.seed, 0x70662020ULL + r), pf);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Local-optimality probes with common random numbers
// ---------------------------------------------------------------------------

struct PerturbationArm {
  std::string label;
  double gain_scale = 1.0;  // gamma -> gain_scale * gamma in the feedback
  bool needle = false;
  double delta = 0.0, tau = 0.0, eps = 0.0;  // u -> u + delta on [tau, tau+eps)
};

struct PerturbationRow {
  std::string label;
  double j_arm = 0.0;
  double diff_mean = 0.0;  // paired mean of psi_arm - psi_base
  double diff_se = 0.0;
  bool increased = false;  // diff_mean > 3 diff_se
};

struct PerturbationReport {
  CostEstimate base;
  std::vector<PerturbationRow> rows;
};

// Paired comparison: every arm reuses the base arm's driver increments, so
// the cost difference estimator carries only the policy effect.
inline PerturbationReport perturbation_optimality_test(const LqSpec& spec,
                                                       const RiccatiSolution& sol,
                                                       const EllAnsatz& ansatz,
                                                       const TimeGrid& grid,
                                                       const std::vector<PerturbationArm>& arms,
                                                       std::size_t n_paths, std::uint64_t seed) {
  spec.validate();
  const ModelSpec model = expand_lq(spec);
  const CounterDrivers drivers(grid, n_paths, seed);

  const auto run_arm = [&](const PerturbationArm& arm) {
    auto base = std::make_shared<LqFeedbackPolicy>(spec, sol, ansatz, grid, arm.gain_scale);
    std::unique_ptr<ControlPolicy> policy;
    if (arm.needle)
      policy = std::make_unique<NeedlePolicy>(base, arm.delta, arm.tau, arm.eps);
    const auto term = arm.needle ? evolve_terminal(model, *policy, drivers)
                                 : evolve_terminal(model, *base, drivers);
    auto lp = log_terminal_weights(term.log_rho_T, term.x_T, term.xi_T,
                                   term.m[grid.n_steps], model);
    std::vector<double> psi(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) {
      if (lp[i] > 700.0)
        throw std::overflow_error("perturbation test: terminal weight overflow");
      psi[i] = std::exp(lp[i]);
    }
    return psi;
  };

  PerturbationArm base_arm;
  base_arm.label = "base";
  const auto psi_base = run_arm(base_arm);
  std::vector<double> lp_base(psi_base.size());
  for (std::size_t i = 0; i < psi_base.size(); ++i) lp_base[i] = std::log(psi_base[i]);

  PerturbationReport rep;
  rep.base = detail::cost_from_log_weights(lp_base, spec.theta, "base");
  for (const auto& arm : arms) {
    const auto psi_arm = run_arm(arm);
    std::vector<double> diff(psi_arm.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = psi_arm[i] - psi_base[i];
    const auto d = mean_with_se(diff);
    PerturbationRow row;
    row.label = arm.label;
    row.j_arm = rep.base.j_theta + d.mean;
    row.diff_mean = d.mean;
    row.diff_se = d.se;
    row.increased = d.mean > 3.0 * d.se;
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace rsmfc
