#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsmfc/grid.hpp"
#include "rsmfc/model.hpp"
#include "rsmfc/riccati.hpp"
#include "rsmfc/rng.hpp"
#include "rsmfc/sde.hpp"
#include "rsmfc/stats.hpp"

namespace rsmfc {

// ---------------------------------------------------------------------------
// ell ansatz
// ---------------------------------------------------------------------------

// ell(t) = (xi1(t) x, xi2(t) x) with deterministic xi, tabulated on the grid.
struct EllAnsatz {
  std::vector<double> xi1, xi2;  // one value per grid node
};

inline EllAnsatz case1_ansatz(const TimeGrid& grid) {
  EllAnsatz a;
  a.xi1.assign(grid.n_nodes(), 1.0);
  a.xi2.assign(grid.n_nodes(), 1.0);
  return a;
}

inline EllAnsatz case2_ansatz(const RiccatiSolution& sol) {
  EllAnsatz a;
  a.xi1 = sol.gamma;
  a.xi2 = sol.gamma;
  return a;
}

inline EllAnsatz zero_ansatz(const TimeGrid& grid) {
  EllAnsatz a;
  a.xi1.assign(grid.n_nodes(), 0.0);
  a.xi2.assign(grid.n_nodes(), 0.0);
  return a;
}

inline EllPolicy ansatz_ell_policy(const EllAnsatz& ansatz) {
  EllPolicy p;
  p.value = [&ansatz](std::size_t k, double, double x) {
    return std::array<double, 2>{ansatz.xi1[k] * x, ansatz.xi2[k] * x};
  };
  p.slope = [&ansatz](std::size_t k, double, double) {
    return std::array<double, 2>{ansatz.xi1[k], ansatz.xi2[k]};
  };
  return p;
}

// ---------------------------------------------------------------------------
// Conditional mean/variance recursion (closed form)
// ---------------------------------------------------------------------------

// The tilted measure shifts both driving noises by theta ell, so the signal
// picks up the drift rate a1 = c + theta (alpha xi1 + sigma xi2) and the
// observation gains drift theta xi1 x. Applying the standard conditionally
// Gaussian filter to that pair gives
//   d pi = (a1 pi + b u) dt + (alpha + theta xi1 V) (dY - theta xi1 pi dt),
//   dV/dt = 2 a1 V + sigma^2 + alpha^2 - (alpha + theta xi1 V)^2,  V(0) = 0.
namespace detail {

inline double filter_a1(const LqSpec& s, const EllAnsatz& a, std::size_t k, double theta) {
  return s.c() + theta * (s.alpha * a.xi1[k] + s.sigma * a.xi2[k]);
}

inline double variance_rhs(const LqSpec& s, const EllAnsatz& a, std::size_t k, double V,
                           double theta) {
  const double gain = s.alpha + theta * a.xi1[k] * V;
  return 2.0 * filter_a1(s, a, k, theta) * V + s.sigma * s.sigma + s.alpha * s.alpha -
         gain * gain;
}

}  // namespace detail

// Deterministic conditional-variance path under the Gaussian closure (Heun).
inline std::vector<double> gaussian_variance_ode(const LqSpec& spec, const EllAnsatz& ansatz,
                                                 const TimeGrid& grid,
                                                 double theta = std::numeric_limits<double>::quiet_NaN()) {
  if (std::isnan(theta)) theta = spec.theta;
  std::vector<double> V(grid.n_nodes(), 0.0);
  for (std::size_t k = 0; k < grid.n_steps; ++k) {
    const double f0 = detail::variance_rhs(spec, ansatz, k, V[k], theta);
    const double pred = V[k] + grid.dt * f0;
    const double f1 = detail::variance_rhs(spec, ansatz, k + 1, pred, theta);
    V[k + 1] = V[k] + 0.5 * grid.dt * (f0 + f1);
  }
  return V;
}

// ---------------------------------------------------------------------------
// Filter estimates
// ---------------------------------------------------------------------------

struct FilterEstimate {
  std::vector<double> mean;      // conditional mean per node
  std::vector<double> variance;  // conditional variance per node (>= 0)
  std::vector<double> ess;       // effective sample size; empty for closed form
  std::vector<double> se_mean;   // Monte Carlo SE of the mean; empty for closed form
  std::size_t n_particles = 0;
};

enum class VarianceSource { ParticleSupplied, GaussianOde };

// Euler recursion of the conditional-mean SDE along one recorded observation
// path, with the feedback u = -b gamma pi baked in (clamped to the admissible
// interval). The variance entering the gain comes from the selected source.
inline FilterEstimate closed_form_filter(const LqSpec& spec, const RiccatiSolution& sol,
                                         const std::vector<double>& dy,
                                         const EllAnsatz& ansatz, VarianceSource source,
                                         const std::vector<double>* particle_variance = nullptr,
                                         double theta = std::numeric_limits<double>::quiet_NaN()) {
  if (std::isnan(theta)) theta = spec.theta;
  const TimeGrid grid(dy.size(), spec.horizon_T);
  if (sol.gamma.size() != grid.n_nodes())
    throw std::invalid_argument("closed_form_filter: gamma/grid size mismatch");

  std::vector<double> V;
  if (source == VarianceSource::ParticleSupplied) {
    if (!particle_variance || particle_variance->size() != grid.n_nodes())
      throw std::invalid_argument("closed_form_filter: missing particle variance series");
    V = *particle_variance;
  } else {
    V = gaussian_variance_ode(spec, ansatz, grid, theta);
  }

  FilterEstimate est;
  est.mean.assign(grid.n_nodes(), spec.x0);
  est.variance = V;
  const double b = spec.b_gain;
  for (std::size_t k = 0; k < grid.n_steps; ++k) {
    const double pi = est.mean[k];
    const double a1 = detail::filter_a1(spec, ansatz, k, theta);
    double u = -b * sol.gamma[k] * pi;
    u = std::min(spec.u_hi, std::max(spec.u_lo, u));
    const double gain = spec.alpha + theta * ansatz.xi1[k] * V[k];
    const double innovation = dy[k] - theta * ansatz.xi1[k] * pi * grid.dt;
    est.mean[k + 1] = pi + (a1 * pi + b * u) * grid.dt + gain * innovation;
  }
  return est;
}

// ---------------------------------------------------------------------------
// Weighted particle ensemble on a common observation path
// ---------------------------------------------------------------------------

struct FilterDiagnostics {
  std::size_t resample_count = 0;
  std::vector<std::size_t> resample_steps;
  std::vector<double> pre_resample_mean, post_resample_mean;
  std::size_t clamp_count = 0;
};

struct EnsembleStepView {
  std::size_t node = 0;
  double t = 0.0;
  const std::vector<double>* weights = nullptr;  // normalized, sum 1
  const std::vector<double>* x = nullptr;
  const std::vector<double>* rho = nullptr;
  double mean = 0.0, variance = 0.0, ess = 0.0, se_mean = 0.0;
  double u = 0.0;  // control decided at this node
};

struct CommonControlConfig {
  enum class Mode { Zero, Constant, LqFeedback };
  Mode mode = Mode::Zero;
  double constant_u = 0.0;
  // LqFeedback: u = clamp(-gain_scale * b gamma(t) * weighted mean)
  const LqSpec* lq = nullptr;
  const RiccatiSolution* sol = nullptr;
  double gain_scale = 1.0;
};

struct ParticleFilterOptions {
  CommonControlConfig control;
  double resample_fraction = 0.5;             // resample when ess < fraction * N
  std::size_t degeneracy_floor = 10;          // pre-resample ess below this aborts
  std::function<void(const EnsembleStepView&)> observer;
};

struct ParticleFilterResult {
  FilterEstimate est;
  FilterDiagnostics diag;
  std::vector<double> u_applied;  // one control per step, common to all particles
};

// Particles carry fresh state noise but share the recorded observation path.
// Under the reference measure that sampling scheme draws from the conditional
// law given the observations, so reweighting by L^theta (whose terminal value
// already contains the observation density) turns ensemble averages into
// conditional expectations under the tilted measure. Weights are normalized
// every step; systematic resampling fires when the effective sample size
// drops below the configured fraction.
inline ParticleFilterResult particle_filter(const ModelSpec& model, const EllAnsatz& ansatz,
                                            const std::vector<double>& dy,
                                            std::size_t n_particles, std::uint64_t seed,
                                            const ParticleFilterOptions& opts = {}) {
  if (n_particles == 0) throw std::invalid_argument("particle_filter: need >= 1 particle");
  model.validate();
  const TimeGrid grid(dy.size(), model.horizon_T);
  if (ansatz.xi1.size() != grid.n_nodes())
    throw std::invalid_argument("particle_filter: ansatz/grid size mismatch");
  const std::size_t N = n_particles;
  const std::size_t n = grid.n_steps;
  const double dt = grid.dt;
  const double theta = model.theta;
  const double sqrt_dt = std::sqrt(dt);
  const std::uint64_t w_seed = sub_seed(seed, 0x70617274ULL);
  const std::uint64_t r_seed = sub_seed(seed, 0x72657361ULL);

  std::vector<double> x(N, model.x0), log_rho(N, 0.0), log_w(N, 0.0);
  std::vector<double> w(N), rho(N);
  std::vector<double> xs(N), lr(N);  // resampling scratch

  ParticleFilterResult out;
  out.est.mean.resize(grid.n_nodes());
  out.est.variance.resize(grid.n_nodes());
  out.est.ess.resize(grid.n_nodes());
  out.est.se_mean.resize(grid.n_nodes());
  out.est.n_particles = N;
  out.u_applied.resize(n);

  const auto normalize = [&]() {
    double mx = log_w[0];
    for (double v : log_w) mx = std::max(mx, v);
    double sw = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      w[i] = std::exp(log_w[i] - mx);
      sw += w[i];
    }
    for (std::size_t i = 0; i < N; ++i) w[i] /= sw;
  };

  for (std::size_t k = 0; k <= n; ++k) {
    normalize();
    double mean = 0.0, sw2 = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      mean += w[i] * x[i];
      sw2 += w[i] * w[i];
    }
    double var = 0.0, se2 = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double d = x[i] - mean;
      var += w[i] * d * d;
      se2 += w[i] * w[i] * d * d;
    }
    const double ess = 1.0 / sw2;
    out.est.mean[k] = mean;
    out.est.variance[k] = var;
    out.est.ess[k] = ess;
    out.est.se_mean[k] = std::sqrt(se2);

    // Control decided at this node from the current conditional-mean estimate.
    double u = 0.0;
    switch (opts.control.mode) {
      case CommonControlConfig::Mode::Zero:
        break;
      case CommonControlConfig::Mode::Constant:
        u = opts.control.constant_u;
        break;
      case CommonControlConfig::Mode::LqFeedback: {
        const LqSpec& lq = *opts.control.lq;
        u = -opts.control.gain_scale * lq.b_gain * opts.control.sol->gamma[k] * mean;
        const double uc = std::min(lq.u_hi, std::max(lq.u_lo, u));
        if (uc != u) ++out.diag.clamp_count;
        u = uc;
        break;
      }
    }

    if (opts.observer) {
      EnsembleStepView view;
      view.node = k;
      view.t = grid.times[k];
      for (std::size_t i = 0; i < N; ++i) rho[i] = std::exp(log_rho[i]);
      view.weights = &w;
      view.x = &x;
      view.rho = &rho;
      view.mean = mean;
      view.variance = var;
      view.ess = ess;
      view.se_mean = out.est.se_mean[k];
      view.u = u;
      opts.observer(view);
    }

    if (k == n) break;

    if (ess < static_cast<double>(opts.degeneracy_floor))
      throw std::runtime_error("particle_filter: weight degeneracy, ess = " +
                               std::to_string(ess) + " at step " + std::to_string(k));
    if (ess < opts.resample_fraction * static_cast<double>(N)) {
      // Systematic resampling with one uniform offset; weights reset to
      // uniform, per-slot noise streams keep running so clones diverge.
      out.diag.resample_count++;
      out.diag.resample_steps.push_back(k);
      out.diag.pre_resample_mean.push_back(mean);
      const double u0 = uniform01(r_seed, k, 0) / static_cast<double>(N);
      double cum = w[0];
      std::size_t j = 0;
      for (std::size_t i = 0; i < N; ++i) {
        const double pos = u0 + static_cast<double>(i) / static_cast<double>(N);
        while (cum < pos && j + 1 < N) cum += w[++j];
        xs[i] = x[j];
        lr[i] = log_rho[j];
      }
      x.swap(xs);
      log_rho.swap(lr);
      std::fill(log_w.begin(), log_w.end(), 0.0);
      double post = 0.0;
      for (std::size_t i = 0; i < N; ++i) post += x[i];
      out.diag.post_resample_mean.push_back(post / static_cast<double>(N));
    }

    const double t = grid.times[k];
    const double dy_k = dy[k];
    const double m_k = out.est.mean[k];  // mean-field slot; unused by LQ coefficients
    out.u_applied[k] = u;
    parallel_for(N, [&](std::size_t i) {
      const double xv = x[i];
      const double bv = model.drift_b(t, xv, m_k, u);
      const double sv = model.diff_sigma(t, xv, m_k);
      const double av = model.diff_alpha(t, xv, m_k);
      const double ev = model.obs_beta(t, xv);
      const double dw = sqrt_dt * normal_pair(w_seed, i, k)[0];
      const double l1 = ansatz.xi1[k] * xv;
      const double l2 = ansatz.xi2[k] * xv;

      x[i] = xv + (bv - av * ev) * dt + sv * dw + av * dy_k;
      log_rho[i] += ev * dy_k - 0.5 * ev * ev * dt;
      log_w[i] += theta * (l1 * dy_k + l2 * dw) -
                  0.5 * theta * theta * (l1 * l1 + l2 * l2) * dt;
    });
    for (std::size_t i = 0; i < N; ++i)
      if (!std::isfinite(x[i]) || !std::isfinite(log_w[i]))
        throw std::runtime_error("particle_filter: non-finite state at step " +
                                 std::to_string(k) + ", particle " + std::to_string(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feedback state recursion and the synthesized control policy
// ---------------------------------------------------------------------------

// State-estimate recursion entering the synthesized feedback law:
//   d pi = (c - b^2 gamma) pi dt + alpha (1 + theta xi1 V) (dY - theta xi1 pi dt).
// This is not the conditional mean above: it omits the measure-shift drift
// and scales the variance bracket by alpha. It is the recursion under which
// the closed loop u = -b gamma pi is cost-stationary (the perturbation tests
// probe exactly that), so the controller runs on it while the estimator
// machinery runs on the conditional-mean recursion.
inline FilterEstimate feedback_state_filter(const LqSpec& spec, const RiccatiSolution& sol,
                                            const std::vector<double>& dy,
                                            const EllAnsatz& ansatz, VarianceSource source,
                                            const std::vector<double>* particle_variance = nullptr,
                                            double theta = std::numeric_limits<double>::quiet_NaN()) {
  if (std::isnan(theta)) theta = spec.theta;
  const TimeGrid grid(dy.size(), spec.horizon_T);
  if (sol.gamma.size() != grid.n_nodes())
    throw std::invalid_argument("feedback_state_filter: gamma/grid size mismatch");

  std::vector<double> V;
  if (source == VarianceSource::ParticleSupplied) {
    if (!particle_variance || particle_variance->size() != grid.n_nodes())
      throw std::invalid_argument("feedback_state_filter: missing particle variance series");
    V = *particle_variance;
  } else {
    V = gaussian_variance_ode(spec, ansatz, grid, theta);
  }

  FilterEstimate est;
  est.mean.assign(grid.n_nodes(), spec.x0);
  est.variance = V;
  const double b = spec.b_gain;
  for (std::size_t k = 0; k < grid.n_steps; ++k) {
    const double pi = est.mean[k];
    double u = -b * sol.gamma[k] * pi;
    u = std::min(spec.u_hi, std::max(spec.u_lo, u));
    const double gain = spec.alpha * (1.0 + theta * ansatz.xi1[k] * V[k]);
    const double innovation = dy[k] - theta * ansatz.xi1[k] * pi * grid.dt;
    est.mean[k + 1] = pi + (spec.c() * pi + b * u) * grid.dt + gain * innovation;
  }
  return est;
}

// Each simulated path carries its own feedback-state recursion driven by the
// path's observation increments; the control is the LQ feedback on that
// estimate, clamped to the admissible interval. The recursion sees the
// control actually applied, so needle or gain perturbations stay consistent.
// The variance entering the gain is the deterministic Gaussian-closure path:
// the policy is a pure function of the observation record and of its own
// applied controls.
class LqFeedbackPolicy : public ControlPolicy {
 public:
  LqFeedbackPolicy(const LqSpec& spec, const RiccatiSolution& sol, const EllAnsatz& ansatz,
                   const TimeGrid& grid, double gain_scale = 1.0)
      : spec_(spec),
        gamma_(sol.gamma),
        ansatz_(ansatz),
        variance_(gaussian_variance_ode(spec, ansatz, grid)),
        dt_(grid.dt),
        gain_scale_(gain_scale) {}

  void begin(std::size_t n_paths, const TimeGrid& grid) override {
    if (grid.dt != dt_ || grid.n_nodes() != gamma_.size())
      throw std::invalid_argument("LqFeedbackPolicy: grid mismatch");
    pi_.assign(n_paths, spec_.x0);
  }

  double control(std::size_t path, std::size_t step, double, double, double) const override {
    const double u = -gain_scale_ * spec_.b_gain * gamma_[step] * pi_[path];
    return std::min(spec_.u_hi, std::max(spec_.u_lo, u));
  }

  void observe(std::size_t path, std::size_t step, double dy, double u_applied) override {
    const double pi = pi_[path];
    const double gain =
        spec_.alpha * (1.0 + spec_.theta * ansatz_.xi1[step] * variance_[step]);
    const double innovation = dy - spec_.theta * ansatz_.xi1[step] * pi * dt_;
    pi_[path] = pi + (spec_.c() * pi + spec_.b_gain * u_applied) * dt_ + gain * innovation;
  }

  double filter_mean(std::size_t path) const { return pi_[path]; }

 private:
  LqSpec spec_;
  std::vector<double> gamma_;
  EllAnsatz ansatz_;
  std::vector<double> variance_;
  double dt_;
  double gain_scale_;
  std::vector<double> pi_;
};

}  // namespace rsmfc
