#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rsmfc/grid.hpp"
#include "rsmfc/model.hpp"

namespace rsmfc {

inline constexpr const char* kVersion = "0.1.0";

// Configuration problems exit with code 2; everything else that fails exits 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

// "key = value" lines, '#' comments, blank lines ignored.
inline std::vector<std::pair<std::string, std::string>> parse_kv_text(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv.emplace_back(key, val);
  }
  return kv;
}

// Scenario plus run parameters; a written manifest is itself a loadable
// config, which is what makes bit-exact reruns possible.
struct RunConfig {
  // scenario
  std::string kind = "lq";  // "lq" | "custom-table"
  LqSpec lq;
  PolyCoeffs poly;
  double theta = 1.0;
  double horizon_T = 1.0;
  double x0 = 1.0;
  double u_lo = -8.0;
  double u_hi = 8.0;
  std::optional<double> bound_c;
  std::size_t n_steps = 200;

  // run parameters (CLI flags override)
  std::uint64_t seed = 42;
  std::size_t paths = 100000;
  std::size_t particles = 10000;
  int riccati_case = 1;
  std::vector<double> thetas = {0.05, 0.1, 0.2, 0.4};
  std::size_t dump_paths = 100;
  std::size_t obs_paths = 8;
  std::string policy = "";  // "", "feedback", "zero", "const:<v>"

  bool is_lq() const { return kind == "lq"; }

  ModelSpec make_model() const {
    if (is_lq()) return expand_lq(lq);
    return make_poly_model(poly, theta, horizon_T, x0, u_lo, u_hi, bound_c);
  }

  TimeGrid make_grid() const { return TimeGrid(n_steps, horizon_T); }
};

namespace detail {

inline double parse_num(const std::string& key, const std::string& val) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(val, &pos);
    if (pos != val.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (...) {
    throw ConfigError("config key '" + key + "' must be a number, got '" + val + "'");
  }
}

inline std::size_t parse_count(const std::string& key, const std::string& val) {
  const double v = parse_num(key, val);
  if (v < 1.0 || v != static_cast<double>(static_cast<std::size_t>(v)))
    throw ConfigError("config key '" + key + "' must be a positive integer");
  return static_cast<std::size_t>(v);
}

inline std::vector<double> parse_list(const std::string& key, const std::string& val) {
  std::vector<double> out;
  std::stringstream ss(val);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_num(key, item));
  }
  if (out.empty()) throw ConfigError("config key '" + key + "' must be a comma list of numbers");
  return out;
}

}  // namespace detail

inline RunConfig parse_run_config(std::istream& in) {
  const auto kv = parse_kv_text(in);
  RunConfig cfg;

  std::map<std::string, std::string> seen;
  for (const auto& [k, v] : kv) {
    if (seen.count(k)) throw ConfigError("duplicate config key '" + k + "'");
    seen[k] = v;
  }
  const auto take = [&](const char* key) -> std::optional<std::string> {
    auto it = seen.find(key);
    if (it == seen.end()) return std::nullopt;
    std::string v = it->second;
    seen.erase(it);
    return v;
  };
  const auto require = [&](const char* key) -> std::string {
    auto v = take(key);
    if (!v) throw ConfigError(std::string("missing config key '") + key + "'");
    return *v;
  };

  // Manifest bookkeeping keys are accepted and ignored on load.
  take("command");
  take("version");

  cfg.kind = require("kind");
  if (cfg.kind != "lq" && cfg.kind != "custom-table")
    throw ConfigError("config key 'kind' must be 'lq' or 'custom-table'");

  cfg.theta = detail::parse_num("theta", require("theta"));
  cfg.horizon_T = detail::parse_num("T", require("T"));
  if (!(cfg.horizon_T > 0.0)) throw ConfigError("config key 'T' must be > 0");
  if (auto v = take("n_steps")) cfg.n_steps = detail::parse_count("n_steps", *v);
  if (auto v = take("x0")) cfg.x0 = detail::parse_num("x0", *v);
  if (auto v = take("u_lo")) cfg.u_lo = detail::parse_num("u_lo", *v);
  if (auto v = take("u_hi")) cfg.u_hi = detail::parse_num("u_hi", *v);
  if (!(cfg.u_lo < cfg.u_hi)) throw ConfigError("config keys 'u_lo'/'u_hi' must satisfy u_lo < u_hi");

  if (cfg.kind == "lq") {
    if (!(cfg.theta > 0.0)) throw ConfigError("config key 'theta' must be > 0 for lq scenarios");
    cfg.lq.a = detail::parse_num("a", require("a"));
    cfg.lq.b_gain = detail::parse_num("b", require("b"));
    cfg.lq.alpha = detail::parse_num("alpha", require("alpha"));
    cfg.lq.beta = detail::parse_num("beta", require("beta"));
    cfg.lq.sigma = detail::parse_num("sigma", require("sigma"));
    cfg.lq.theta = cfg.theta;
    cfg.lq.horizon_T = cfg.horizon_T;
    cfg.lq.x0 = cfg.x0;
    cfg.lq.u_lo = cfg.u_lo;
    cfg.lq.u_hi = cfg.u_hi;
  } else {
    if (cfg.theta == 0.0) throw ConfigError("config key 'theta' must be nonzero");
    PolyCoeffs& p = cfg.poly;
    const auto num = [&](const char* key, double& slot) {
      if (auto v = take(key)) slot = detail::parse_num(key, *v);
    };
    num("b0", p.b0); num("bx", p.bx); num("bm", p.bm); num("bu", p.bu);
    num("sigma0", p.sigma0); num("sigmax", p.sigmax); num("sigmam", p.sigmam);
    num("alpha0", p.alpha0); num("alphax", p.alphax); num("alpham", p.alpham);
    num("beta0", p.beta0); num("betax", p.betax);
    num("f0", p.f0); num("fx", p.fx); num("fm", p.fm); num("fu", p.fu);
    num("fxx", p.fxx); num("fmm", p.fmm); num("fuu", p.fuu);
    num("h0", p.h0); num("hx", p.hx); num("hm", p.hm); num("hxx", p.hxx); num("hmm", p.hmm);
    if (auto v = take("bound_c")) {
      const double c = detail::parse_num("bound_c", *v);
      if (c < 0.0) throw ConfigError("config key 'bound_c' must be >= 0");
      cfg.bound_c = c;
    }
  }

  if (auto v = take("seed"))
    cfg.seed = static_cast<std::uint64_t>(detail::parse_count("seed", *v));
  if (auto v = take("paths")) cfg.paths = detail::parse_count("paths", *v);
  if (auto v = take("particles")) cfg.particles = detail::parse_count("particles", *v);
  if (auto v = take("case")) {
    const std::size_t c = detail::parse_count("case", *v);
    if (c != 1 && c != 2) throw ConfigError("config key 'case' must be 1 or 2");
    cfg.riccati_case = static_cast<int>(c);
  }
  if (auto v = take("thetas")) cfg.thetas = detail::parse_list("thetas", *v);
  if (auto v = take("dump_paths")) cfg.dump_paths = detail::parse_count("dump_paths", *v);
  if (auto v = take("obs_paths")) cfg.obs_paths = detail::parse_count("obs_paths", *v);
  if (auto v = take("policy")) cfg.policy = *v;

  if (!seen.empty())
    throw ConfigError("unknown config key '" + seen.begin()->first + "'");
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  return parse_run_config(in);
}

inline std::vector<std::pair<std::string, std::string>> config_to_kv(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> kv;
  const auto num = [&](const std::string& k, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    kv.emplace_back(k, buf);
  };
  kv.emplace_back("kind", cfg.kind);
  num("theta", cfg.theta);
  num("T", cfg.horizon_T);
  kv.emplace_back("n_steps", std::to_string(cfg.n_steps));
  num("x0", cfg.x0);
  num("u_lo", cfg.u_lo);
  num("u_hi", cfg.u_hi);
  if (cfg.kind == "lq") {
    num("a", cfg.lq.a);
    num("b", cfg.lq.b_gain);
    num("alpha", cfg.lq.alpha);
    num("beta", cfg.lq.beta);
    num("sigma", cfg.lq.sigma);
  } else {
    const PolyCoeffs& p = cfg.poly;
    num("b0", p.b0); num("bx", p.bx); num("bm", p.bm); num("bu", p.bu);
    num("sigma0", p.sigma0); num("sigmax", p.sigmax); num("sigmam", p.sigmam);
    num("alpha0", p.alpha0); num("alphax", p.alphax); num("alpham", p.alpham);
    num("beta0", p.beta0); num("betax", p.betax);
    num("f0", p.f0); num("fx", p.fx); num("fm", p.fm); num("fu", p.fu);
    num("fxx", p.fxx); num("fmm", p.fmm); num("fuu", p.fuu);
    num("h0", p.h0); num("hx", p.hx); num("hm", p.hm); num("hxx", p.hxx); num("hmm", p.hmm);
    if (cfg.bound_c) num("bound_c", *cfg.bound_c);
  }
  kv.emplace_back("seed", std::to_string(cfg.seed));
  kv.emplace_back("paths", std::to_string(cfg.paths));
  kv.emplace_back("particles", std::to_string(cfg.particles));
  kv.emplace_back("case", std::to_string(cfg.riccati_case));
  {
    std::string list;
    for (std::size_t i = 0; i < cfg.thetas.size(); ++i) {
      if (i) list += ",";
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", cfg.thetas[i]);
      list += buf;
    }
    kv.emplace_back("thetas", list);
  }
  kv.emplace_back("dump_paths", std::to_string(cfg.dump_paths));
  kv.emplace_back("obs_paths", std::to_string(cfg.obs_paths));
  if (!cfg.policy.empty()) kv.emplace_back("policy", cfg.policy);
  return kv;
}

}  // namespace rsmfc
