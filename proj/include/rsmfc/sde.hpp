#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsmfc/grid.hpp"
#include "rsmfc/model.hpp"
#include "rsmfc/parallel.hpp"
#include "rsmfc/rng.hpp"
#include "rsmfc/stats.hpp"

namespace rsmfc {

// ---------------------------------------------------------------------------
// Brownian drivers
// ---------------------------------------------------------------------------

// Lazy counter-based driver source: increments are pure functions of
// (seed, path, step), so path i is independent of the ensemble size and the
// same seed gives common random numbers across policy arms.
struct CounterDrivers {
  TimeGrid grid;
  std::size_t n_paths = 0;
  std::uint64_t seed = 0;
  double sqrt_dt = 0.0;

  CounterDrivers(const TimeGrid& g, std::size_t n, std::uint64_t s)
      : grid(g), n_paths(n), seed(s), sqrt_dt(std::sqrt(g.dt)) {
    if (n == 0) throw std::invalid_argument("CounterDrivers: n_paths must be >= 1");
  }

  // Returns {dW, dY} for the given path and step.
  std::array<double, 2> increments(std::size_t path, std::size_t step) const {
    const auto z = normal_pair(seed, path, step);
    return {sqrt_dt * z[0], sqrt_dt * z[1]};
  }
};

// Materialized increment matrices (step-major). Same values as CounterDrivers
// with the same seed; handy where the full bundle is inspected.
struct BrownianBundle {
  TimeGrid grid;
  std::size_t n_paths = 0;
  std::uint64_t seed = 0;
  std::vector<double> dW;  // n_steps x n_paths, index k*n_paths + i
  std::vector<double> dY;

  std::array<double, 2> increments(std::size_t path, std::size_t step) const {
    return {dW[step * n_paths + path], dY[step * n_paths + path]};
  }
};

inline BrownianBundle generate_drivers(const TimeGrid& grid, std::size_t n_paths,
                                       std::uint64_t seed) {
  if (n_paths == 0) throw std::invalid_argument("generate_drivers: n_paths must be >= 1");
  BrownianBundle b;
  b.grid = grid;
  b.n_paths = n_paths;
  b.seed = seed;
  b.dW.resize(grid.n_steps * n_paths);
  b.dY.resize(grid.n_steps * n_paths);
  const CounterDrivers src(grid, n_paths, seed);
  parallel_for(n_paths, [&](std::size_t i) {
    for (std::size_t k = 0; k < grid.n_steps; ++k) {
      const auto d = src.increments(i, k);
      b.dW[k * n_paths + i] = d[0];
      b.dY[k * n_paths + i] = d[1];
    }
  });
  return b;
}

// Shares one observation stream across all paths while keeping per-path state
// noise; used by the conditional-expectation machinery.
struct CommonObservationDrivers {
  TimeGrid grid;
  std::size_t n_paths = 0;
  std::uint64_t w_seed = 0;
  const std::vector<double>* dy_common = nullptr;  // n_steps increments
  double sqrt_dt = 0.0;

  CommonObservationDrivers(const TimeGrid& g, std::size_t n, std::uint64_t seed,
                           const std::vector<double>& dy)
      : grid(g), n_paths(n), w_seed(seed), dy_common(&dy), sqrt_dt(std::sqrt(g.dt)) {
    if (dy.size() != g.n_steps)
      throw std::invalid_argument("CommonObservationDrivers: dy length mismatch");
  }

  std::array<double, 2> increments(std::size_t path, std::size_t step) const {
    const auto z = normal_pair(w_seed, path, step);
    return {sqrt_dt * z[0], (*dy_common)[step]};
  }
};

inline std::vector<double> sample_observation_path(const TimeGrid& grid, std::uint64_t seed,
                                                   std::uint64_t path_index = 0) {
  std::vector<double> dy(grid.n_steps);
  const double s = std::sqrt(grid.dt);
  for (std::size_t k = 0; k < grid.n_steps; ++k)
    dy[k] = s * normal_pair(seed, path_index, k)[1];
  return dy;
}

// ---------------------------------------------------------------------------
// Control policies
// ---------------------------------------------------------------------------

// Adapted control: control() may read only the current (t, x, m) and whatever
// per-path summary the policy accumulated from past observation increments
// via observe(). Per-path state must live in disjoint slots; control() is
// called concurrently across paths.
class ControlPolicy {
 public:
  virtual ~ControlPolicy() = default;
  virtual void begin(std::size_t /*n_paths*/, const TimeGrid& /*grid*/) {}
  virtual double control(std::size_t path, std::size_t step, double t, double x,
                         double m) const = 0;
  virtual void observe(std::size_t /*path*/, std::size_t /*step*/, double /*dy*/,
                       double /*u_applied*/) {}
};

class ConstantPolicy : public ControlPolicy {
 public:
  explicit ConstantPolicy(double u) : u_(u) {}
  double control(std::size_t, std::size_t, double, double, double) const override {
    return u_;
  }

 private:
  double u_;
};

// Replaces the base control by base + delta on [tau, tau + eps); the base
// policy still sees the actually applied control through observe().
class NeedlePolicy : public ControlPolicy {
 public:
  NeedlePolicy(std::shared_ptr<ControlPolicy> base, double delta, double tau, double eps)
      : base_(std::move(base)), delta_(delta), tau_(tau), eps_(eps) {}

  void begin(std::size_t n_paths, const TimeGrid& grid) override { base_->begin(n_paths, grid); }

  double control(std::size_t path, std::size_t step, double t, double x, double m) const override {
    const double u = base_->control(path, step, t, x, m);
    return (t >= tau_ && t < tau_ + eps_) ? u + delta_ : u;
  }

  void observe(std::size_t path, std::size_t step, double dy, double u_applied) override {
    base_->observe(path, step, dy, u_applied);
  }

 private:
  std::shared_ptr<ControlPolicy> base_;
  double delta_, tau_, eps_;
};

// ---------------------------------------------------------------------------
// Ensemble evolution
// ---------------------------------------------------------------------------

// Full discretized history of the interacting ensemble; arrays are step-major
// (node k, particle i) -> k*n_paths + i.
struct EnsembleTrajectory {
  TimeGrid grid;
  std::size_t n_paths = 0;
  std::vector<double> rho;       // (n+1) x N, strictly positive
  std::vector<double> x;         // (n+1) x N
  std::vector<double> xi;        // (n+1) x N, accumulated running cost
  std::vector<double> m;         // n+1, empirical E[rho x]
  std::vector<double> controls;  // n x N, controls actually applied

  std::size_t idx(std::size_t k, std::size_t i) const { return k * n_paths + i; }
};

namespace detail {

struct ParticleScratch {
  std::vector<double> x, log_rho, xi;
};

[[noreturn]] inline void throw_nonfinite(std::size_t step, std::size_t particle) {
  throw std::runtime_error("evolve: non-finite state at step " + std::to_string(step) +
                           ", particle " + std::to_string(particle) +
                           " (overflow or NaN; check coefficients / reduce dt)");
}

}  // namespace detail

// Euler-Maruyama on the merged observed system. rho advances in log space
// (exact exponential of its linear SDE), which keeps it strictly positive;
// the mean-field term m is the ensemble's weighted mean, recomputed after
// each step and fed into coefficients at the next one.
template <class Drivers, class StepSink>
inline void evolve_core(const ModelSpec& model, ControlPolicy& policy, const Drivers& drivers,
                        StepSink&& sink) {
  model.validate();
  const TimeGrid& grid = drivers.grid;
  const std::size_t N = drivers.n_paths;
  const std::size_t n = grid.n_steps;
  const double dt = grid.dt;

  detail::ParticleScratch st;
  st.x.assign(N, model.x0);
  st.log_rho.assign(N, 0.0);
  st.xi.assign(N, 0.0);
  std::vector<double> u_row(N, 0.0);

  policy.begin(N, grid);

  double m = model.x0;  // rho(0) = 1, x(0) = x0
  sink.node(0, st, m);

  std::atomic<std::int64_t> bad{-1};
  for (std::size_t k = 0; k < n; ++k) {
    const double t = grid.times[k];
    parallel_for(N, [&](std::size_t i) {
      const double xv = st.x[i];
      const double u = policy.control(i, k, t, xv, m);
      const double bv = model.drift_b(t, xv, m, u);
      const double sv = model.diff_sigma(t, xv, m);
      const double av = model.diff_alpha(t, xv, m);
      const double ev = model.obs_beta(t, xv);
      const double fv = model.run_cost_f(t, xv, m, u);
      const auto d = drivers.increments(i, k);
      const double dw = d[0], dy = d[1];

      st.x[i] = xv + (bv - av * ev) * dt + sv * dw + av * dy;
      st.log_rho[i] += ev * dy - 0.5 * ev * ev * dt;
      st.xi[i] += fv * dt;
      u_row[i] = u;
      policy.observe(i, k, dy, u);
      if (!std::isfinite(st.x[i]) || !std::isfinite(st.log_rho[i]) || !std::isfinite(st.xi[i])) {
        std::int64_t expected = -1;
        bad.compare_exchange_strong(expected,
                                    static_cast<std::int64_t>(k * N + i));
      }
    });
    if (bad.load() >= 0) {
      const auto b = static_cast<std::size_t>(bad.load());
      detail::throw_nonfinite(b / N, b % N);
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < N; ++i) acc += std::exp(st.log_rho[i]) * st.x[i];
    m = acc / static_cast<double>(N);
    sink.controls(k, u_row);
    sink.node(k + 1, st, m);
  }
}

namespace detail {

struct RecordingSink {
  EnsembleTrajectory* traj;
  void node(std::size_t k, const ParticleScratch& st, double m) {
    const std::size_t N = traj->n_paths;
    for (std::size_t i = 0; i < N; ++i) {
      traj->rho[k * N + i] = std::exp(st.log_rho[i]);
      traj->x[k * N + i] = st.x[i];
      traj->xi[k * N + i] = st.xi[i];
    }
    traj->m[k] = m;
  }
  void controls(std::size_t k, const std::vector<double>& u_row) {
    const std::size_t N = traj->n_paths;
    for (std::size_t i = 0; i < N; ++i) traj->controls[k * N + i] = u_row[i];
  }
};

struct TerminalSink {
  std::size_t n_steps;
  std::vector<double>* x_T;
  std::vector<double>* xi_T;
  std::vector<double>* log_rho_T;
  std::vector<double>* m_series;
  void node(std::size_t k, const ParticleScratch& st, double m) {
    (*m_series)[k] = m;
    if (k == n_steps) {
      *x_T = st.x;
      *xi_T = st.xi;
      *log_rho_T = st.log_rho;
    }
  }
  void controls(std::size_t, const std::vector<double>&) {}
};

}  // namespace detail

template <class Drivers>
inline EnsembleTrajectory evolve_system(const ModelSpec& model, ControlPolicy& policy,
                                        const Drivers& drivers) {
  EnsembleTrajectory traj;
  traj.grid = drivers.grid;
  traj.n_paths = drivers.n_paths;
  const std::size_t N = traj.n_paths;
  const std::size_t nn = traj.grid.n_nodes();
  traj.rho.resize(nn * N);
  traj.x.resize(nn * N);
  traj.xi.resize(nn * N);
  traj.m.resize(nn);
  traj.controls.resize(traj.grid.n_steps * N);
  detail::RecordingSink sink{&traj};
  evolve_core(model, policy, drivers, sink);
  return traj;
}

// Terminal-only evolution for large ensembles: O(N) memory.
struct TerminalEnsemble {
  TimeGrid grid;
  std::size_t n_paths = 0;
  std::vector<double> x_T, xi_T, log_rho_T;
  std::vector<double> m;  // full series, n+1
};

template <class Drivers>
inline TerminalEnsemble evolve_terminal(const ModelSpec& model, ControlPolicy& policy,
                                        const Drivers& drivers) {
  TerminalEnsemble out;
  out.grid = drivers.grid;
  out.n_paths = drivers.n_paths;
  out.m.resize(drivers.grid.n_nodes());
  detail::TerminalSink sink{drivers.grid.n_steps, &out.x_T, &out.xi_T, &out.log_rho_T, &out.m};
  evolve_core(model, policy, drivers, sink);
  return out;
}

// Sample mean and standard error of rho(T); a martingale certificate caller
// checks as |mean - 1| <= 3 se.
inline MeanWithSE density_terminal_check(const EnsembleTrajectory& traj) {
  const std::size_t N = traj.n_paths;
  const std::size_t k = traj.grid.n_steps;
  std::vector<double> rho_T(traj.rho.begin() + static_cast<std::ptrdiff_t>(k * N),
                            traj.rho.begin() + static_cast<std::ptrdiff_t>((k + 1) * N));
  return mean_with_se(rho_T);
}

// ---------------------------------------------------------------------------
// Terminal exponential weights
// ---------------------------------------------------------------------------

// log psi_i = log rho_i(T) + theta (xi_i(T) + h(x_i(T), m(T)))
inline std::vector<double> log_terminal_weights(const std::vector<double>& log_rho_T,
                                                const std::vector<double>& x_T,
                                                const std::vector<double>& xi_T, double m_T,
                                                const ModelSpec& model) {
  const std::size_t N = x_T.size();
  std::vector<double> lp(N);
  for (std::size_t i = 0; i < N; ++i)
    lp[i] = log_rho_T[i] + model.theta * (xi_T[i] + model.term_cost_h(x_T[i], m_T));
  return lp;
}

// Per-path terminal weight psi; aborts on overflow rather than clamping so a
// too-aggressive theta or horizon is visible instead of corrupting averages.
inline std::vector<double> terminal_weight(const EnsembleTrajectory& traj,
                                           const ModelSpec& model) {
  const std::size_t N = traj.n_paths;
  const std::size_t kT = traj.grid.n_steps;
  std::vector<double> log_rho(N), x_T(N), xi_T(N);
  for (std::size_t i = 0; i < N; ++i) {
    log_rho[i] = std::log(traj.rho[traj.idx(kT, i)]);
    x_T[i] = traj.x[traj.idx(kT, i)];
    xi_T[i] = traj.xi[traj.idx(kT, i)];
  }
  const auto lp = log_terminal_weights(log_rho, x_T, xi_T, traj.m[kT], model);
  std::vector<double> psi(N);
  for (std::size_t i = 0; i < N; ++i) {
    if (lp[i] > 700.0)
      throw std::overflow_error(
          "terminal_weight: exp overflow on path " + std::to_string(i) +
          "; reduce theta or the horizon");
    psi[i] = std::exp(lp[i]);
  }
  return psi;
}

// ---------------------------------------------------------------------------
// Exponential martingale v^theta and its normalization L^theta
// ---------------------------------------------------------------------------

// ell(t, x) evaluated per step along simulated paths; slope is d ell / dx and
// is only needed when the order-one correction to the log update is requested.
struct EllPolicy {
  std::function<std::array<double, 2>(std::size_t k, double t, double x)> value;
  std::function<std::array<double, 2>(std::size_t k, double t, double x)> slope;
};

inline EllPolicy zero_ell_policy() {
  EllPolicy p;
  p.value = [](std::size_t, double, double) { return std::array<double, 2>{0.0, 0.0}; };
  p.slope = [](std::size_t, double, double) { return std::array<double, 2>{0.0, 0.0}; };
  return p;
}

struct VthetaPath {
  TimeGrid grid;
  std::size_t n_paths = 0;
  double v0 = 1.0;
  double log_v0 = 0.0;
  std::vector<double> log_v;  // (n+1) x N, step-major

  double v(std::size_t k, std::size_t i) const { return std::exp(log_v[k * n_paths + i]); }
  // L = v / v0 exactly, by construction in log space.
  double L(std::size_t k, std::size_t i) const {
    return std::exp(log_v[k * n_paths + i] - log_v0);
  }
};

namespace detail {

// One log-space step of d v = theta v <ell, dB>:
//   dlog v = theta <ell, dB> - theta^2/2 |ell|^2 dt.
// With `corr`, adds the iterated-integral correction for the x-dependence of
// ell inside the step (exact when sigma*dell1 == alpha*dell2, the commutative
// case; otherwise cross areas use the dW dY / 2 approximation).
inline double log_v_increment(double theta, double dt, double l1, double l2, double dw,
                              double dy, bool corr, double dl1, double dl2, double sig,
                              double al) {
  double inc = theta * (l1 * dy + l2 * dw) - 0.5 * theta * theta * (l1 * l1 + l2 * l2) * dt;
  if (corr) {
    const double iyy = 0.5 * (dy * dy - dt);
    const double iww = 0.5 * (dw * dw - dt);
    const double icross = 0.5 * dw * dy;
    inc += theta * (dl1 * (al * iyy + sig * icross) + dl2 * (al * icross + sig * iww));
  }
  return inc;
}

}  // namespace detail

// Single-pass terminal evolution that also tracks log L^theta per path;
// O(N) memory, for large ensembles where the full history would not fit.
struct TerminalEnsembleTracked {
  TimeGrid grid;
  std::size_t n_paths = 0;
  std::vector<double> x_T, xi_T, log_rho_T, log_L_T;
  std::vector<double> m;
  // Pathwise sums of B_T and of integral(ell dt), for Girsanov-shift checks.
  std::vector<double> sum_dy, sum_dw, int_l1_dt, int_l2_dt;
};

template <class Drivers>
inline TerminalEnsembleTracked evolve_terminal_tracked(const ModelSpec& model,
                                                       ControlPolicy& policy,
                                                       const EllPolicy& ell,
                                                       const Drivers& drivers,
                                                       double theta = std::numeric_limits<double>::quiet_NaN()) {
  model.validate();
  if (std::isnan(theta)) theta = model.theta;
  const TimeGrid& grid = drivers.grid;
  const std::size_t N = drivers.n_paths;
  const double dt = grid.dt;

  TerminalEnsembleTracked out;
  out.grid = grid;
  out.n_paths = N;
  out.x_T.assign(N, model.x0);
  out.xi_T.assign(N, 0.0);
  out.log_rho_T.assign(N, 0.0);
  out.log_L_T.assign(N, 0.0);
  out.m.assign(grid.n_nodes(), model.x0);
  out.sum_dy.assign(N, 0.0);
  out.sum_dw.assign(N, 0.0);
  out.int_l1_dt.assign(N, 0.0);
  out.int_l2_dt.assign(N, 0.0);

  policy.begin(N, grid);
  double m = model.x0;
  std::atomic<std::int64_t> bad{-1};
  for (std::size_t k = 0; k < grid.n_steps; ++k) {
    const double t = grid.times[k];
    parallel_for(N, [&](std::size_t i) {
      const double xv = out.x_T[i];
      const double u = policy.control(i, k, t, xv, m);
      const double bv = model.drift_b(t, xv, m, u);
      const double sv = model.diff_sigma(t, xv, m);
      const double av = model.diff_alpha(t, xv, m);
      const double ev = model.obs_beta(t, xv);
      const double fv = model.run_cost_f(t, xv, m, u);
      const auto lv = ell.value(k, t, xv);
      const auto d = drivers.increments(i, k);
      const double dw = d[0], dy = d[1];

      out.x_T[i] = xv + (bv - av * ev) * dt + sv * dw + av * dy;
      out.log_rho_T[i] += ev * dy - 0.5 * ev * ev * dt;
      out.xi_T[i] += fv * dt;
      out.log_L_T[i] += detail::log_v_increment(theta, dt, lv[0], lv[1], dw, dy, false,
                                                0.0, 0.0, 0.0, 0.0);
      out.sum_dy[i] += dy;
      out.sum_dw[i] += dw;
      out.int_l1_dt[i] += lv[0] * dt;
      out.int_l2_dt[i] += lv[1] * dt;
      policy.observe(i, k, dy, u);
      if (!std::isfinite(out.x_T[i]) || !std::isfinite(out.log_rho_T[i]) ||
          !std::isfinite(out.log_L_T[i])) {
        std::int64_t expected = -1;
        bad.compare_exchange_strong(expected, static_cast<std::int64_t>(k * N + i));
      }
    });
    if (bad.load() >= 0) {
      const auto b = static_cast<std::size_t>(bad.load());
      detail::throw_nonfinite(b / N, b % N);
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < N; ++i) acc += std::exp(out.log_rho_T[i]) * out.x_T[i];
    m = acc / static_cast<double>(N);
    out.m[k + 1] = m;
  }
  return out;
}

// Forward evolution of v^theta along the trajectory's paths, reusing the same
// driver increments. v stays strictly positive and v(t)/v(0) = L^theta(t)
// holds exactly at every node.
template <class Drivers>
inline VthetaPath evolve_vtheta(const ModelSpec& model, const EllPolicy& ell,
                                const Drivers& drivers, const EnsembleTrajectory& traj,
                                double v0, bool order_one_correction = false,
                                double theta = std::numeric_limits<double>::quiet_NaN()) {
  if (!(v0 > 0.0)) throw std::invalid_argument("evolve_vtheta: v0 must be > 0");
  if (std::isnan(theta)) theta = model.theta;
  if (order_one_correction && !ell.slope)
    throw std::invalid_argument("evolve_vtheta: correction requested without ell slope");

  const TimeGrid& grid = traj.grid;
  const std::size_t N = traj.n_paths;
  const std::size_t n = grid.n_steps;

  VthetaPath vp;
  vp.grid = grid;
  vp.n_paths = N;
  vp.v0 = v0;
  vp.log_v0 = std::log(v0);
  vp.log_v.assign(grid.n_nodes() * N, vp.log_v0);

  std::atomic<std::int64_t> bad{-1};
  for (std::size_t k = 0; k < n; ++k) {
    const double t = grid.times[k];
    parallel_for(N, [&](std::size_t i) {
      const double xv = traj.x[traj.idx(k, i)];
      const double mv = traj.m[k];
      const auto lv = ell.value(k, t, xv);
      const auto d = drivers.increments(i, k);
      double dl1 = 0.0, dl2 = 0.0, sig = 0.0, al = 0.0;
      if (order_one_correction) {
        const auto sl = ell.slope(k, t, xv);
        dl1 = sl[0];
        dl2 = sl[1];
        sig = model.diff_sigma(t, xv, mv);
        al = model.diff_alpha(t, xv, mv);
      }
      const double inc = detail::log_v_increment(theta, grid.dt, lv[0], lv[1], d[0], d[1],
                                                 order_one_correction, dl1, dl2, sig, al);
      vp.log_v[(k + 1) * N + i] = vp.log_v[k * N + i] + inc;
      if (!std::isfinite(vp.log_v[(k + 1) * N + i])) {
        std::int64_t expected = -1;
        bad.compare_exchange_strong(expected, static_cast<std::int64_t>(k * N + i));
      }
    });
    if (bad.load() >= 0) {
      const auto b = static_cast<std::size_t>(bad.load());
      detail::throw_nonfinite(b / N, b % N);
    }
  }
  return vp;
}

}  // namespace rsmfc
