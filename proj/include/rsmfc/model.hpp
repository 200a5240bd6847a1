#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsmfc/grid.hpp"
#include "rsmfc/rng.hpp"

namespace rsmfc {

using Coeff4 = std::function<double(double t, double x, double m, double u)>;  // b, f
using Coeff3 = std::function<double(double t, double x, double m)>;            // sigma, alpha
using Coeff2 = std::function<double(double t, double x)>;                      // beta
using CoeffH = std::function<double(double x, double m)>;                      // h

// Scenario coefficient bundle for the controlled observed system
//
//   d rho = rho * beta(t,x) dY
//   d x   = (b(t,x,m,u) - alpha(t,x,m) beta(t,x)) dt + sigma(t,x,m) dW + alpha(t,x,m) dY
//   d xi  = f(t,x,m,u) dt
//
// with m = E[rho x] and cost weight rho(T) exp(theta (xi(T) + h(x(T), m(T)))).
// Partial derivatives are supplied alongside the base coefficients; they are
// audited against finite differences by validate_model, not derived
// symbolically. Coefficient functions must be pure: instances are immutable
// after construction and shared across worker threads.
struct ModelSpec {
  Coeff4 drift_b;
  Coeff3 diff_sigma;
  Coeff3 diff_alpha;
  Coeff2 obs_beta;
  Coeff4 run_cost_f;
  CoeffH term_cost_h;

  Coeff4 b_x, b_m;
  Coeff3 sigma_x, sigma_m;
  Coeff3 alpha_x, alpha_m;
  Coeff2 beta_x;
  Coeff4 f_x, f_m;
  CoeffH h_x, h_m;

  double theta = 1.0;      // risk-sensitivity index, nonzero
  double horizon_T = 1.0;  // > 0
  double x0 = 0.0;

  // Admissible control range; the SMP check searches this interval.
  double u_lo = -8.0;
  double u_hi = 8.0;

  // Declared bound on |f| and |h| when the scenario has bounded costs; only
  // then are the bound-dependent weight brackets asserted.
  std::optional<double> coeff_bound_C;

  void validate() const {
    if (theta == 0.0) throw std::invalid_argument("ModelSpec: theta must be nonzero");
    if (!(horizon_T > 0.0)) throw std::invalid_argument("ModelSpec: horizon_T must be > 0");
    if (!(u_lo < u_hi)) throw std::invalid_argument("ModelSpec: require u_lo < u_hi");
    if (coeff_bound_C && *coeff_bound_C < 0.0)
      throw std::invalid_argument("ModelSpec: coeff_bound_C must be >= 0");
  }
};

// Linear-quadratic scenario:
//   dx = (a x + b_gain u) dt + sigma dW + alpha dW~,   dY = beta x dt + dW~,
//   running cost u^2/2, terminal cost x^2/2.
// The closed form divides by theta, so theta > 0 is required here.
struct LqSpec {
  double a = 0.0;
  double b_gain = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double sigma = 0.0;
  double theta = 1.0;
  double horizon_T = 1.0;
  double x0 = 0.0;
  double u_lo = -8.0;
  double u_hi = 8.0;

  // Effective drift coefficient of the merged system.
  double c() const { return a - alpha * beta; }

  void validate() const {
    if (!(theta > 0.0)) throw std::invalid_argument("LqSpec: theta must be > 0");
    if (!(horizon_T > 0.0)) throw std::invalid_argument("LqSpec: horizon_T must be > 0");
    if (!(u_lo < u_hi)) throw std::invalid_argument("LqSpec: require u_lo < u_hi");
  }
};

// Expand an LQ scenario into the general coefficient bundle. All partials are
// exact constants or linear functions.
inline ModelSpec expand_lq(const LqSpec& spec) {
  spec.validate();
  const double a = spec.a, b = spec.b_gain, al = spec.alpha, be = spec.beta, sg = spec.sigma;
  ModelSpec m;
  m.drift_b = [a, b](double, double x, double, double u) { return a * x + b * u; };
  m.diff_sigma = [sg](double, double, double) { return sg; };
  m.diff_alpha = [al](double, double, double) { return al; };
  m.obs_beta = [be](double, double x) { return be * x; };
  m.run_cost_f = [](double, double, double, double u) { return 0.5 * u * u; };
  m.term_cost_h = [](double x, double) { return 0.5 * x * x; };

  m.b_x = [a](double, double, double, double) { return a; };
  m.b_m = [](double, double, double, double) { return 0.0; };
  m.sigma_x = [](double, double, double) { return 0.0; };
  m.sigma_m = [](double, double, double) { return 0.0; };
  m.alpha_x = [](double, double, double) { return 0.0; };
  m.alpha_m = [](double, double, double) { return 0.0; };
  m.beta_x = [be](double, double) { return be; };
  m.f_x = [](double, double, double, double) { return 0.0; };
  m.f_m = [](double, double, double, double) { return 0.0; };
  m.h_x = [](double x, double) { return x; };
  m.h_m = [](double, double) { return 0.0; };

  m.theta = spec.theta;
  m.horizon_T = spec.horizon_T;
  m.x0 = spec.x0;
  m.u_lo = spec.u_lo;
  m.u_hi = spec.u_hi;
  m.validate();
  return m;
}

struct PartialAudit {
  std::string name;
  double worst_abs_err = 0.0;
  double worst_rel_err = 0.0;
  bool pass = true;
};

struct ValidationReport {
  std::vector<PartialAudit> partials;
  std::size_t n_probe = 0;
  double rel_tol = 0.0;
  std::size_t bound_violations = 0;  // |f| or |h| above coeff_bound_C, if declared
  bool all_pass = true;
};

namespace detail {

inline double central_diff(const std::function<double(double)>& g, double v) {
  // Step ~ cbrt(eps) scaled to the probe magnitude balances truncation
  // against cancellation for a central difference.
  const double h = 6.055454452393343e-06 * (1.0 + std::fabs(v));
  return (g(v + h) - g(v - h)) / (2.0 * h);
}

inline void audit_one(ValidationReport& rep, const std::string& name, double declared,
                      const std::function<double(double)>& g, double at) {
  const double fd = detail::central_diff(g, at);
  const double abs_err = std::fabs(fd - declared);
  const double rel_err = abs_err / std::max({1.0, std::fabs(fd), std::fabs(declared)});
  for (auto& p : rep.partials) {
    if (p.name == name) {
      if (abs_err > p.worst_abs_err) p.worst_abs_err = abs_err;
      if (rel_err > p.worst_rel_err) p.worst_rel_err = rel_err;
      return;
    }
  }
  PartialAudit p;
  p.name = name;
  p.worst_abs_err = abs_err;
  p.worst_rel_err = rel_err;
  rep.partials.push_back(p);
}

}  // namespace detail

// Audit every declared partial derivative against a central finite difference
// of its base coefficient at n_probe random points. Failures are reported,
// not thrown: a wrong derivative is a scenario bug the caller should see.
inline ValidationReport validate_model(const ModelSpec& spec, std::size_t n_probe,
                                       std::uint64_t seed, double rel_tol = 1e-5) {
  if (n_probe < 1) throw std::invalid_argument("validate_model: n_probe must be >= 1");
  spec.validate();
  ValidationReport rep;
  rep.n_probe = n_probe;
  rep.rel_tol = rel_tol;

  const std::uint64_t s = sub_seed(seed, 0x76616c69ULL);
  for (std::size_t i = 0; i < n_probe; ++i) {
    const double t = uniform01(s, i, 0) * spec.horizon_T;
    const double x = -2.0 + 4.0 * uniform01(s, i, 1);
    const double m = -2.0 + 4.0 * uniform01(s, i, 2);
    const double ulo = std::max(spec.u_lo, -2.0), uhi = std::min(spec.u_hi, 2.0);
    const double u = ulo + (uhi - ulo) * uniform01(s, i, 3);

    detail::audit_one(rep, "b_x", spec.b_x(t, x, m, u),
                      [&](double v) { return spec.drift_b(t, v, m, u); }, x);
    detail::audit_one(rep, "b_m", spec.b_m(t, x, m, u),
                      [&](double v) { return spec.drift_b(t, x, v, u); }, m);
    detail::audit_one(rep, "sigma_x", spec.sigma_x(t, x, m),
                      [&](double v) { return spec.diff_sigma(t, v, m); }, x);
    detail::audit_one(rep, "sigma_m", spec.sigma_m(t, x, m),
                      [&](double v) { return spec.diff_sigma(t, x, v); }, m);
    detail::audit_one(rep, "alpha_x", spec.alpha_x(t, x, m),
                      [&](double v) { return spec.diff_alpha(t, v, m); }, x);
    detail::audit_one(rep, "alpha_m", spec.alpha_m(t, x, m),
                      [&](double v) { return spec.diff_alpha(t, x, v); }, m);
    detail::audit_one(rep, "beta_x", spec.beta_x(t, x),
                      [&](double v) { return spec.obs_beta(t, v); }, x);
    detail::audit_one(rep, "f_x", spec.f_x(t, x, m, u),
                      [&](double v) { return spec.run_cost_f(t, v, m, u); }, x);
    detail::audit_one(rep, "f_m", spec.f_m(t, x, m, u),
                      [&](double v) { return spec.run_cost_f(t, x, v, u); }, m);
    detail::audit_one(rep, "h_x", spec.h_x(x, m),
                      [&](double v) { return spec.term_cost_h(v, m); }, x);
    detail::audit_one(rep, "h_m", spec.h_m(x, m),
                      [&](double v) { return spec.term_cost_h(x, v); }, m);

    if (spec.coeff_bound_C) {
      const double C = *spec.coeff_bound_C;
      if (std::fabs(spec.run_cost_f(t, x, m, u)) > C) ++rep.bound_violations;
      if (std::fabs(spec.term_cost_h(x, m)) > C) ++rep.bound_violations;
    }
  }
  for (auto& p : rep.partials) {
    p.pass = p.worst_rel_err <= rel_tol;
    if (!p.pass) rep.all_pass = false;
  }
  if (rep.bound_violations > 0) rep.all_pass = false;
  return rep;
}

// Coefficient family expressible in scenario config files: every coefficient
// is a low-order polynomial in (x, m, u). Richer models are available only
// through the library interface.
struct PolyCoeffs {
  double b0 = 0, bx = 0, bm = 0, bu = 0;
  double sigma0 = 0, sigmax = 0, sigmam = 0;
  double alpha0 = 0, alphax = 0, alpham = 0;
  double beta0 = 0, betax = 0;
  double f0 = 0, fx = 0, fm = 0, fu = 0, fxx = 0, fmm = 0, fuu = 0;
  double h0 = 0, hx = 0, hm = 0, hxx = 0, hmm = 0;
};

inline ModelSpec make_poly_model(const PolyCoeffs& c, double theta, double horizon_T,
                                 double x0, double u_lo = -8.0, double u_hi = 8.0,
                                 std::optional<double> bound_C = std::nullopt) {
  ModelSpec m;
  m.drift_b = [c](double, double x, double mm, double u) {
    return c.b0 + c.bx * x + c.bm * mm + c.bu * u;
  };
  m.diff_sigma = [c](double, double x, double mm) { return c.sigma0 + c.sigmax * x + c.sigmam * mm; };
  m.diff_alpha = [c](double, double x, double mm) { return c.alpha0 + c.alphax * x + c.alpham * mm; };
  m.obs_beta = [c](double, double x) { return c.beta0 + c.betax * x; };
  m.run_cost_f = [c](double, double x, double mm, double u) {
    return c.f0 + c.fx * x + c.fm * mm + c.fu * u + c.fxx * x * x + c.fmm * mm * mm +
           c.fuu * u * u;
  };
  m.term_cost_h = [c](double x, double mm) {
    return c.h0 + c.hx * x + c.hm * mm + c.hxx * x * x + c.hmm * mm * mm;
  };

  m.b_x = [c](double, double, double, double) { return c.bx; };
  m.b_m = [c](double, double, double, double) { return c.bm; };
  m.sigma_x = [c](double, double, double) { return c.sigmax; };
  m.sigma_m = [c](double, double, double) { return c.sigmam; };
  m.alpha_x = [c](double, double, double) { return c.alphax; };
  m.alpha_m = [c](double, double, double) { return c.alpham; };
  m.beta_x = [c](double, double) { return c.betax; };
  m.f_x = [c](double, double x, double, double) { return c.fx + 2.0 * c.fxx * x; };
  m.f_m = [c](double, double, double mm, double) { return c.fm + 2.0 * c.fmm * mm; };
  m.h_x = [c](double x, double) { return c.hx + 2.0 * c.hxx * x; };
  m.h_m = [c](double, double mm) { return c.hm + 2.0 * c.hmm * mm; };

  m.theta = theta;
  m.horizon_T = horizon_T;
  m.x0 = x0;
  m.u_lo = u_lo;
  m.u_hi = u_hi;
  m.coeff_bound_C = bound_C;
  m.validate();
  return m;
}

}  // namespace rsmfc
