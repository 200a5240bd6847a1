#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rsmfc/config.hpp"
#include "rsmfc/csv.hpp"
#include "rsmfc/filter.hpp"
#include "rsmfc/grid.hpp"
#include "rsmfc/hamiltonian.hpp"
#include "rsmfc/model.hpp"
#include "rsmfc/montecarlo.hpp"
#include "rsmfc/riccati.hpp"
#include "rsmfc/sde.hpp"
#include "rsmfc/stats.hpp"

namespace rsmfc {

namespace cli_detail {

inline std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void write_manifest(const RunConfig& cfg, const std::string& command,
                           const std::string& out_dir) {
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("command", command);
  kv.emplace_back("version", kVersion);
  const auto body = config_to_kv(cfg);
  kv.insert(kv.end(), body.begin(), body.end());
  write_summary(join_path(out_dir, "manifest.txt"), kv);
}

struct PolicyBundle {
  std::unique_ptr<ControlPolicy> policy;
  std::string label;
  // Kept alive for feedback policies.
  std::unique_ptr<RiccatiSolution> sol;
  std::unique_ptr<EllAnsatz> ansatz;
};

inline PolicyBundle resolve_policy(const RunConfig& cfg, const TimeGrid& grid) {
  PolicyBundle out;
  std::string choice = cfg.policy;
  if (choice.empty()) choice = cfg.is_lq() ? "feedback" : "zero";

  if (choice == "zero") {
    out.policy = std::make_unique<ConstantPolicy>(0.0);
    out.label = "zero";
    return out;
  }
  if (choice.rfind("const:", 0) == 0) {
    const double u = detail::parse_num("policy", choice.substr(6));
    out.policy = std::make_unique<ConstantPolicy>(u);
    out.label = choice;
    return out;
  }
  if (choice == "feedback") {
    if (!cfg.is_lq())
      throw ConfigError("config key 'policy': feedback requires kind = lq");
    const RiccatiCase rc =
        cfg.riccati_case == 1 ? RiccatiCase::Case1 : RiccatiCase::Case2;
    out.sol = std::make_unique<RiccatiSolution>(solve_riccati(cfg.lq, grid, rc));
    out.ansatz = std::make_unique<EllAnsatz>(
        rc == RiccatiCase::Case1 ? case1_ansatz(grid) : case2_ansatz(*out.sol));
    out.policy = std::make_unique<LqFeedbackPolicy>(cfg.lq, *out.sol, *out.ansatz, grid);
    out.label = "feedback-case" + std::to_string(cfg.riccati_case);
    return out;
  }
  throw ConfigError("config key 'policy' must be zero, const:<v> or feedback");
}

// Records the full history of the first `keep` paths while the whole ensemble
// streams through; also keeps the terminal state of every path.
struct DumpSink {
  std::size_t keep = 0;
  std::size_t n_paths = 0;
  std::size_t n_steps = 0;
  std::vector<double> rho, x, xi;               // (n+1) x keep
  std::vector<double> m;                        // n+1
  std::vector<double> log_rho_T, x_T, xi_T;     // full ensemble at T

  void node(std::size_t k, const detail::ParticleScratch& st, double mval) {
    m[k] = mval;
    for (std::size_t i = 0; i < keep; ++i) {
      rho[k * keep + i] = std::exp(st.log_rho[i]);
      x[k * keep + i] = st.x[i];
      xi[k * keep + i] = st.xi[i];
    }
    if (k == n_steps) {
      log_rho_T = st.log_rho;
      x_T = st.x;
      xi_T = st.xi;
    }
  }
  void controls(std::size_t, const std::vector<double>&) {}
};

inline int cmd_simulate(const RunConfig& cfg, const std::string& out_dir) {
  const ModelSpec model = cfg.make_model();
  const TimeGrid grid = cfg.make_grid();
  auto pb = resolve_policy(cfg, grid);
  const CounterDrivers drivers(grid, cfg.paths, cfg.seed);

  DumpSink sink;
  sink.keep = std::min(cfg.dump_paths, cfg.paths);
  sink.n_paths = cfg.paths;
  sink.n_steps = grid.n_steps;
  sink.rho.resize(grid.n_nodes() * sink.keep);
  sink.x.resize(grid.n_nodes() * sink.keep);
  sink.xi.resize(grid.n_nodes() * sink.keep);
  sink.m.resize(grid.n_nodes());
  evolve_core(model, *pb.policy, drivers, sink);

  std::vector<double> rho_T(cfg.paths);
  for (std::size_t i = 0; i < cfg.paths; ++i) rho_T[i] = std::exp(sink.log_rho_T[i]);
  const auto check = mean_with_se(rho_T);
  const bool pass = std::fabs(check.mean - 1.0) <= 3.0 * check.se;

  CsvWriter csv(join_path(out_dir, "trajectory.csv"),
                {"path_id", "step", "t", "rho", "x", "xi", "m"});
  for (std::size_t i = 0; i < sink.keep; ++i)
    for (std::size_t k = 0; k <= grid.n_steps; ++k)
      csv.row({CsvWriter::cell(i), CsvWriter::cell(k), CsvWriter::cell(grid.times[k]),
               CsvWriter::cell(sink.rho[k * sink.keep + i]),
               CsvWriter::cell(sink.x[k * sink.keep + i]),
               CsvWriter::cell(sink.xi[k * sink.keep + i]), CsvWriter::cell(sink.m[k])});

  write_summary(join_path(out_dir, "summary.txt"),
                {{"command", "simulate"},
                 {"policy", pb.label},
                 {"n_paths", std::to_string(cfg.paths)},
                 {"rho_terminal_mean", format_double(check.mean)},
                 {"rho_terminal_se", format_double(check.se)},
                 {"martingale_pass", pass ? "true" : "false"}});
  if (!pass)
    std::cerr << "simulate: density martingale check failed, |mean-1| = "
              << std::fabs(check.mean - 1.0) << " > 3 se = " << 3.0 * check.se << "\n";
  return pass ? 0 : 1;
}

inline int cmd_riccati(const RunConfig& cfg, const std::string& out_dir) {
  if (!cfg.is_lq()) throw ConfigError("riccati requires kind = lq");
  const TimeGrid grid = cfg.make_grid();
  const RiccatiCase rc = cfg.riccati_case == 1 ? RiccatiCase::Case1 : RiccatiCase::Case2;
  const auto sol = solve_riccati(cfg.lq, grid, rc);
  const double res = riccati_residual(sol, grid);

  CsvWriter csv(join_path(out_dir, "riccati.csv"), {"step", "t", "gamma"});
  for (std::size_t k = 0; k <= grid.n_steps; ++k)
    csv.row({CsvWriter::cell(k), CsvWriter::cell(grid.times[k]),
             CsvWriter::cell(sol.gamma[k])});

  write_summary(join_path(out_dir, "summary.txt"),
                {{"command", "riccati"},
                 {"case", std::to_string(cfg.riccati_case)},
                 {"lambda", format_double(sol.lambda)},
                 {"gamma_T", format_double(sol.gamma[grid.n_steps])},
                 {"gamma_0", format_double(sol.gamma[0])},
                 {"max_residual", format_double(res)}});
  return 0;
}

inline int cmd_filter(const RunConfig& cfg, const std::string& out_dir,
                      const std::string& source) {
  const TimeGrid grid = cfg.make_grid();
  const auto dy = sample_observation_path(grid, sub_seed(cfg.seed, 0x6f627376ULL));

  FilterEstimate est;
  std::string src_label = source;
  std::size_t resamples = 0;
  if (source == "closed-form") {
    if (!cfg.is_lq()) throw ConfigError("closed-form filter requires kind = lq");
    const RiccatiCase rc = cfg.riccati_case == 1 ? RiccatiCase::Case1 : RiccatiCase::Case2;
    const auto sol = solve_riccati(cfg.lq, grid, rc);
    const auto ansatz = rc == RiccatiCase::Case1 ? case1_ansatz(grid) : case2_ansatz(sol);
    est = closed_form_filter(cfg.lq, sol, dy, ansatz, VarianceSource::GaussianOde);
  } else if (source == "particle") {
    const ModelSpec model = cfg.make_model();
    ParticleFilterOptions opts;
    std::unique_ptr<RiccatiSolution> sol;
    EllAnsatz ansatz = zero_ansatz(grid);
    if (cfg.is_lq()) {
      const RiccatiCase rc = cfg.riccati_case == 1 ? RiccatiCase::Case1 : RiccatiCase::Case2;
      sol = std::make_unique<RiccatiSolution>(solve_riccati(cfg.lq, grid, rc));
      ansatz = rc == RiccatiCase::Case1 ? case1_ansatz(grid) : case2_ansatz(*sol);
      opts.control.mode = CommonControlConfig::Mode::LqFeedback;
      opts.control.lq = &cfg.lq;
      opts.control.sol = sol.get();
    }
    auto res = particle_filter(model, ansatz, dy, cfg.particles,
                               sub_seed(cfg.seed, 0x70666c74ULL), opts);
    est = std::move(res.est);
    resamples = res.diag.resample_count;
  } else {
    throw ConfigError("filter --source must be 'particle' or 'closed-form'");
  }

  CsvWriter csv(join_path(out_dir, "filter.csv"), {"step", "t", "mean", "variance", "ess"});
  for (std::size_t k = 0; k <= grid.n_steps; ++k)
    csv.row({CsvWriter::cell(k), CsvWriter::cell(grid.times[k]), CsvWriter::cell(est.mean[k]),
             CsvWriter::cell(est.variance[k]),
             CsvWriter::cell(est.ess.empty() ? 0.0 : est.ess[k])});

  write_summary(join_path(out_dir, "summary.txt"),
                {{"command", "filter"},
                 {"source", src_label},
                 {"n_particles", std::to_string(est.n_particles)},
                 {"terminal_mean", format_double(est.mean[grid.n_steps])},
                 {"terminal_variance", format_double(est.variance[grid.n_steps])},
                 {"resample_count", std::to_string(resamples)}});
  return 0;
}

inline int cmd_cost(const RunConfig& cfg, const std::string& out_dir) {
  const ModelSpec model = cfg.make_model();
  const TimeGrid grid = cfg.make_grid();
  auto pb = resolve_policy(cfg, grid);
  const auto est = estimate_cost(model, *pb.policy, grid, cfg.paths, cfg.seed, pb.label);

  CsvWriter csv(join_path(out_dir, "cost.csv"),
                {"control", "theta", "n_paths", "j_theta", "se"});
  csv.row({CsvWriter::cell(est.control_label), CsvWriter::cell(est.theta),
           CsvWriter::cell(est.n_paths), CsvWriter::cell(est.j_theta),
           CsvWriter::cell(est.se)});
  write_summary(join_path(out_dir, "summary.txt"),
                {{"command", "cost"},
                 {"policy", est.control_label},
                 {"j_theta", format_double(est.j_theta)},
                 {"se", format_double(est.se)},
                 {"n_paths", std::to_string(est.n_paths)}});
  return 0;
}

inline int cmd_check_smp(const RunConfig& cfg, const std::string& out_dir) {
  if (!cfg.is_lq()) throw ConfigError("check-smp requires kind = lq");
  const TimeGrid grid = cfg.make_grid();
  const RiccatiCase rc = cfg.riccati_case == 1 ? RiccatiCase::Case1 : RiccatiCase::Case2;
  const auto sol = solve_riccati(cfg.lq, grid, rc);
  const auto ansatz = rc == RiccatiCase::Case1 ? case1_ansatz(grid) : case2_ansatz(sol);

  ViOptions opts;
  opts.n_obs_paths = cfg.obs_paths;
  opts.n_particles = cfg.particles;
  opts.seed = cfg.seed;
  const auto rep = check_variational_inequality(cfg.lq, sol, ansatz, grid, opts);

  CsvWriter csv(join_path(out_dir, "vi_report.csv"),
                {"obs_path", "t", "u", "u_bar", "estimate", "se", "analytic", "violation"});
  for (const auto& c : rep.cells)
    csv.row({CsvWriter::cell(c.obs_path), CsvWriter::cell(c.t), CsvWriter::cell(c.u),
             CsvWriter::cell(c.u_bar), CsvWriter::cell(c.estimate), CsvWriter::cell(c.se),
             CsvWriter::cell(c.analytic), CsvWriter::cell(c.violation ? 1 : 0)});

  const bool bad = rep.any_violation();
  write_summary(join_path(out_dir, "summary.txt"),
                {{"command", "check-smp"},
                 {"case", std::to_string(cfg.riccati_case)},
                 {"n_cells", std::to_string(rep.cells.size())},
                 {"worst_collapse_gap", format_double(rep.worst_collapse_gap())},
                 {"any_violation", bad ? "true" : "false"}});
  if (bad) {
    for (const auto& c : rep.cells)
      if (c.violation)
        std::cerr << "check-smp: variational inequality violated at t = " << c.t
                  << ", u = " << c.u << " (estimate " << c.estimate << ", se " << c.se
                  << ")\n";
    return 1;
  }
  return 0;
}

inline int cmd_sweep_theta(const RunConfig& cfg, const std::string& out_dir) {
  const ModelSpec model = cfg.make_model();
  const TimeGrid grid = cfg.make_grid();
  // The expansion compares moments of one fixed Psi across theta, so the
  // control must not depend on theta; default to the zero policy.
  RunConfig fixed = cfg;
  if (fixed.policy.empty() || fixed.policy == "feedback") fixed.policy = "zero";
  auto pb = resolve_policy(fixed, grid);
  const auto rep =
      theta_expansion_check(model, *pb.policy, grid, cfg.thetas, cfg.paths, cfg.seed);

  CsvWriter csv(join_path(out_dir, "sweep.csv"),
                {"theta", "j_theta", "log_j_over_theta", "residual"});
  for (const auto& r : rep.rows)
    csv.row({CsvWriter::cell(r.theta), CsvWriter::cell(r.j_theta),
             CsvWriter::cell(r.log_j_over_theta), CsvWriter::cell(r.residual)});

  write_summary(join_path(out_dir, "summary.txt"),
                {{"command", "sweep-theta"},
                 {"policy", pb.label},
                 {"psi_mean", format_double(rep.psi_mean)},
                 {"psi_var", format_double(rep.psi_var)},
                 {"residual_slope", rep.slope_defined ? format_double(rep.slope) : "undefined"},
                 {"n_thetas", std::to_string(rep.rows.size())}});
  return 0;
}

}  // namespace cli_detail

// Batch entry point; returns the process exit code.
// 0 = success, 1 = a check failed or a runtime error, 2 = configuration error.
inline int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"risk-sensitive partially observed mean-field control toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", filter_source = "particle";
  std::uint64_t seed = 0;
  std::size_t paths = 0, particles = 0;
  int riccati_case = 0;

  std::vector<CLI::App*> subs;
  const auto add_common = [&](const std::string& name, const std::string& desc) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "scenario config file")->required();
    sub->add_option("--seed", seed, "RNG seed");
    sub->add_option("--paths", paths, "Monte Carlo path count");
    sub->add_option("--particles", particles, "particle count");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--case", riccati_case, "Riccati case (1 or 2)")
        ->check(CLI::Range(1, 2));
    subs.push_back(sub);
    return sub;
  };

  add_common("simulate", "simulate the merged observed system, check the density martingale");
  add_common("riccati", "solve the backward Riccati equation");
  CLI::App* filter_cmd = add_common("filter", "run the conditional-mean filter");
  filter_cmd->add_option("--source", filter_source, "particle | closed-form");
  add_common("cost", "Monte Carlo estimate of the risk-sensitive cost");
  add_common("check-smp", "certify the maximum-principle variational inequality");
  add_common("sweep-theta", "small-theta expansion sweep");

  try {
    std::vector<const char*> argv;
    argv.push_back("rsmfc");
    for (const auto& a : args) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg = load_run_config(config_path);
    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--seed")) cfg.seed = seed;
    if (sub->count("--paths")) cfg.paths = paths;
    if (sub->count("--particles")) cfg.particles = particles;
    if (sub->count("--case")) cfg.riccati_case = riccati_case;

    std::filesystem::create_directories(out_dir);
    const std::string cmd = sub->get_name();
    cli_detail::write_manifest(cfg, cmd, out_dir);

    if (cmd == "simulate") return cli_detail::cmd_simulate(cfg, out_dir);
    if (cmd == "riccati") return cli_detail::cmd_riccati(cfg, out_dir);
    if (cmd == "filter") return cli_detail::cmd_filter(cfg, out_dir, filter_source);
    if (cmd == "cost") return cli_detail::cmd_cost(cfg, out_dir);
    if (cmd == "check-smp") return cli_detail::cmd_check_smp(cfg, out_dir);
    if (cmd == "sweep-theta") return cli_detail::cmd_sweep_theta(cfg, out_dir);
    std::cerr << "unknown subcommand: " << cmd << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace rsmfc
