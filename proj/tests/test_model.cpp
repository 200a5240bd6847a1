#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "rsmfc/config.hpp"
#include "rsmfc/model.hpp"
#include "rsmfc/rng.hpp"

using namespace rsmfc;

namespace {

LqSpec default_lq() {
  LqSpec s;
  s.a = 0.3;
  s.b_gain = 1.0;
  s.alpha = 0.2;
  s.beta = 0.5;
  s.sigma = 0.4;
  s.theta = 1.0;
  s.horizon_T = 1.0;
  s.x0 = 1.0;
  return s;
}

}  // namespace

TEST_CASE("expand_lq reproduces the linear-quadratic coefficients") {
  SECTION("all-zero drift case") {
    LqSpec s;
    s.a = 0;
    s.b_gain = 0;
    s.alpha = 0;
    s.beta = 0;
    s.sigma = 1;
    s.theta = 1;
    s.horizon_T = 1;
    s.x0 = 0;
    const auto m = expand_lq(s);
    for (double x : {-1.5, 0.0, 2.0})
      for (double u : {-1.0, 0.5}) {
        REQUIRE(m.drift_b(0.3, x, 0.7, u) == 0.0);
        REQUIRE(m.obs_beta(0.3, x) == 0.0);
        REQUIRE(m.diff_sigma(0.3, x, 0.7) == 1.0);
      }
  }

  SECTION("terminal and running cost partials") {
    const auto m = expand_lq(default_lq());
    for (double x : {-2.0, 0.1, 3.0}) {
      REQUIRE(m.h_x(x, 0.4) == x);
      REQUIRE(m.f_x(0.2, x, 0.4, 1.1) == 0.0);
    }
  }

  SECTION("effective drift coefficient") {
    LqSpec s = default_lq();
    s.a = 1.0;
    s.alpha = 2.0;
    s.beta = 3.0;
    REQUIRE(s.c() == -5.0);
  }

  SECTION("nonpositive theta rejected") {
    LqSpec s = default_lq();
    s.theta = 0.0;
    REQUIRE_THROWS_AS(expand_lq(s), std::invalid_argument);
    s.theta = -0.5;
    REQUIRE_THROWS_AS(expand_lq(s), std::invalid_argument);
  }
}

TEST_CASE("expand_lq is pure") {
  const auto a = expand_lq(default_lq());
  const auto b = expand_lq(default_lq());
  const std::uint64_t s = 2024;
  for (std::size_t i = 0; i < 50; ++i) {
    const double t = uniform01(s, i, 0);
    const double x = -2 + 4 * uniform01(s, i, 1);
    const double m = -2 + 4 * uniform01(s, i, 2);
    const double u = -2 + 4 * uniform01(s, i, 3);
    REQUIRE(a.drift_b(t, x, m, u) == b.drift_b(t, x, m, u));
    REQUIRE(a.run_cost_f(t, x, m, u) == b.run_cost_f(t, x, m, u));
    REQUIRE(a.obs_beta(t, x) == b.obs_beta(t, x));
  }
}

TEST_CASE("validate_model accepts exact derivatives and flags wrong ones") {
  SECTION("expanded LQ model passes for any seed") {
    const auto m = expand_lq(default_lq());
    for (std::uint64_t seed : {1ull, 77ull, 31337ull}) {
      const auto rep = validate_model(m, 64, seed);
      REQUIRE(rep.all_pass);
      for (const auto& p : rep.partials) REQUIRE(p.pass);
    }
  }

  SECTION("polynomial model passes") {
    PolyCoeffs c;
    c.b0 = 0.2;
    c.bx = -0.4;
    c.bm = 0.3;
    c.bu = 1.1;
    c.sigma0 = 0.5;
    c.sigmax = 0.1;
    c.alpha0 = 0.2;
    c.alpham = -0.3;
    c.beta0 = 0.1;
    c.betax = 0.6;
    c.fxx = 0.5;
    c.fuu = 0.5;
    c.fm = -0.2;
    c.hxx = 0.5;
    c.hm = 0.7;
    const auto m = make_poly_model(c, 0.8, 1.0, 0.5);
    const auto rep = validate_model(m, 64, 5);
    REQUIRE(rep.all_pass);
  }

  SECTION("deliberately wrong b_x is flagged") {
    auto m = expand_lq(default_lq());
    m.b_x = [](double, double, double, double) { return 0.9; };  // truth is 0.3
    const auto rep = validate_model(m, 32, 11);
    REQUIRE_FALSE(rep.all_pass);
    bool found = false;
    for (const auto& p : rep.partials)
      if (p.name == "b_x") {
        found = true;
        REQUIRE_FALSE(p.pass);
        REQUIRE(p.worst_rel_err >= rep.rel_tol);
      } else {
        REQUIRE(p.pass);
      }
    REQUIRE(found);
  }

  SECTION("zero probes rejected") {
    const auto m = expand_lq(default_lq());
    REQUIRE_THROWS_AS(validate_model(m, 0, 1), std::invalid_argument);
  }

  SECTION("declared cost bound is spot-checked") {
    PolyCoeffs c;
    c.f0 = 2.0;  // |f| = 2 exceeds the declared bound
    auto m = make_poly_model(c, 0.5, 1.0, 0.0, -8, 8, 1.0);
    const auto rep = validate_model(m, 16, 3);
    REQUIRE(rep.bound_violations > 0);
    REQUIRE_FALSE(rep.all_pass);
  }
}

TEST_CASE("scenario config parsing") {
  SECTION("lq round trip") {
    std::stringstream in(
        "# scenario\n"
        "kind = lq\n"
        "a = 0.3\nb = 1.0\nalpha = 0.2\nbeta = 0.5\nsigma = 0.4\n"
        "theta = 1.0\nT = 1.0\nn_steps = 200\nx0 = 1.0\n"
        "seed = 42\npaths = 1000\n");
    const auto cfg = parse_run_config(in);
    REQUIRE(cfg.is_lq());
    REQUIRE(cfg.lq.a == 0.3);
    REQUIRE(cfg.lq.horizon_T == 1.0);
    REQUIRE(cfg.seed == 42);
    REQUIRE(cfg.paths == 1000);

    // A serialized config parses back to the same scenario.
    std::string text;
    for (const auto& [k, v] : config_to_kv(cfg)) text += k + " = " + v + "\n";
    std::stringstream in2(text);
    const auto cfg2 = parse_run_config(in2);
    REQUIRE(cfg2.lq.a == cfg.lq.a);
    REQUIRE(cfg2.lq.beta == cfg.lq.beta);
    REQUIRE(cfg2.n_steps == cfg.n_steps);
    REQUIRE(cfg2.seed == cfg.seed);
  }

  SECTION("custom-table scenario") {
    std::stringstream in(
        "kind = custom-table\n"
        "theta = 0.5\nT = 2.0\nn_steps = 100\nx0 = 0.7\n"
        "sigma0 = 0.5\nalpha0 = 0.3\nhx = 1.0\n");
    const auto cfg = parse_run_config(in);
    REQUIRE_FALSE(cfg.is_lq());
    const auto m = cfg.make_model();
    REQUIRE(m.diff_sigma(0, 0, 0) == 0.5);
    REQUIRE(m.term_cost_h(2.0, 0.0) == 2.0);
  }

  SECTION("errors name the offending key") {
    const auto expect_error = [](const std::string& text, const std::string& needle) {
      std::stringstream in(text);
      try {
        parse_run_config(in);
        FAIL("expected ConfigError");
      } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find(needle) != std::string::npos);
      }
    };
    expect_error("kind = lq\ntheta = 1\nT = -2\na=0\nb=0\nalpha=0\nbeta=0\nsigma=1\n", "'T'");
    expect_error("kind = lq\nT = 1\na=0\nb=0\nalpha=0\nbeta=0\nsigma=1\n", "'theta'");
    expect_error("kind = lq\ntheta = 0\nT = 1\na=0\nb=0\nalpha=0\nbeta=0\nsigma=1\n", "'theta'");
    expect_error(
        "kind = lq\ntheta = 1\nT = 1\na=0\nb=0\nalpha=0\nbeta=0\nsigma=1\nwobble = 3\n",
        "'wobble'");
    expect_error("kind = lq\ntheta = 1\nT = 1\na=0\nb=0\nalpha=0\nbeta=0\nsigma=abc\n",
                 "'sigma'");
    expect_error(
        "kind = lq\ntheta = 1\nT = 1\na=0\nb=0\nalpha=0\nbeta=0\nsigma=1\ncase = 3\n",
        "'case'");
    expect_error("kind = lq\ntheta = 1\ntheta = 2\nT = 1\na=0\nb=0\nalpha=0\nbeta=0\nsigma=1\n",
                 "duplicate");
  }

  SECTION("manifest bookkeeping keys are ignored") {
    std::stringstream in(
        "command = simulate\nversion = 0.1.0\n"
        "kind = lq\ntheta = 1\nT = 1\na=0.3\nb=1\nalpha=0.2\nbeta=0.5\nsigma=0.4\n");
    REQUIRE_NOTHROW(parse_run_config(in));
  }
}
