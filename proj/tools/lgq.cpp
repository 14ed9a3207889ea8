// lgq: command-line front end for simulation, estimation and the
// steady-state analyses of linear Gaussian quantum smoothing.

#include <CLI11.hpp>

#include <Eigen/Core>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lgq/analysis.hpp"
#include "lgq/io.hpp"
#include "lgq/steady_state.hpp"

namespace fs = std::filesystem;
using lgq::io::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Config {
  std::string command;
  std::optional<double> theta_o;
  std::optional<double> theta_u;
  std::optional<double> eta_o;
  std::optional<double> eta_u;
  std::optional<double> hbar;
  std::string system_file;
  double dt = 1e-3;
  double t_final = 10.0;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t grid = 64;
  unsigned threads = 0;
  std::string regime = "low";
  std::size_t n_traj = 10000;
  std::optional<double> time;
  double tolerance = 0.05;
  bool with_unobserved = false;
};

// Every command defaults to theta_o = pi/3 except the efficiency scan, which
// uses theta_o = 0 (there P_SWV passes 1 near eta_o = 1/16).
lgq::OPOParams opo_params(const Config& c, double default_theta_o) {
  lgq::OPOParams p;
  p.theta_o = c.theta_o.value_or(default_theta_o);
  p.theta_u = c.theta_u.value_or(0.2);
  p.eta_o = c.eta_o.value_or(0.5);
  p.eta_u = c.eta_u.value_or(1.0 - p.eta_o);
  p.hbar = c.hbar.value_or(1.0);
  p.validate();
  return p;
}

bool opo_flags_given(const Config& c) {
  return c.theta_o || c.theta_u || c.eta_o || c.eta_u || c.hbar;
}

lgq::LGQSystem system_of(const Config& c) {
  if (!c.system_file.empty()) {
    if (opo_flags_given(c)) {
      throw lgq::Error(lgq::ErrorKind::kInvalidArgument,
                       "--system cannot be combined with OPO parameter flags");
    }
    return lgq::io::load_system(c.system_file);
  }
  return lgq::build_opo(opo_params(c, std::numbers::pi / 3));
}

std::uint64_t resolve_seed(const Config& c) {
  if (c.seed) return *c.seed;
  if (const char* env = std::getenv("LGQ_SEED")) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw lgq::Error(lgq::ErrorKind::kInvalidArgument, "LGQ_SEED is not an unsigned integer");
  }
  return 0;
}

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

json config_json(const Config& c) {
  json j{{"command", c.command}, {"dt", c.dt},         {"t_final", c.t_final},
         {"out", c.out},         {"grid", c.grid},     {"threads", c.threads},
         {"regime", c.regime},   {"n_traj", c.n_traj}, {"tolerance", c.tolerance}};
  auto opt = [&j](const char* key, const std::optional<double>& v) {
    j[key] = v ? json(*v) : json(nullptr);
  };
  opt("theta_o", c.theta_o);
  opt("theta_u", c.theta_u);
  opt("eta_o", c.eta_o);
  opt("eta_u", c.eta_u);
  opt("hbar", c.hbar);
  opt("time", c.time);
  j["system_file"] = c.system_file;
  return j;
}

json manifest(const Config& c, const lgq::LGQSystem* sys, std::optional<std::uint64_t> seed) {
  json j{{"config", config_json(c)},
         {"seed", seed ? json(*seed) : json(nullptr)},
         {"versions",
          {{"lgq", kVersion},
           {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                         "." + std::to_string(EIGEN_MINOR_VERSION)},
           {"cli11", CLI11_VERSION},
           {"compiler", __VERSION__}}},
         {"timestamp", timestamp()}};
  if (sys) j["system"] = lgq::io::system_json(*sys);
  return j;
}

using Outputs = std::vector<std::pair<fs::path, std::string>>;

fs::path require_out(const Config& c) {
  if (c.out.empty()) throw lgq::Error(lgq::ErrorKind::kInvalidArgument, "--out is required");
  return fs::path(c.out);
}

fs::path sibling_manifest(const fs::path& file) {
  fs::path m = file;
  m += ".manifest.json";
  return m;
}

struct Run {
  lgq::LGQSystem sys;
  lgq::Simulation sim;
  lgq::Mat v0;
  lgq::Vec x0;
};

Run simulate(const Config& c, std::uint64_t seed) {
  Run r;
  r.sys = system_of(c);
  const lgq::TimeGrid grid(0.0, c.t_final, c.dt);
  r.v0 = 0.5 * r.sys.hbar * lgq::Mat::Identity(r.sys.dim(), r.sys.dim());
  r.x0 = lgq::Vec::Zero(r.sys.dim());
  r.sim = lgq::simulate_true(r.sys, r.v0, r.x0, grid, seed);
  return r;
}

Outputs cmd_simulate(const Config& c) {
  const fs::path dir = require_out(c);
  const std::uint64_t seed = resolve_seed(c);
  const Run r = simulate(c, seed);
  return {{dir / "trajectory.csv", lgq::io::trajectory_csv(r.sim, c.with_unobserved)},
          {dir / "manifest.json", lgq::io::dump(manifest(c, &r.sys, seed))}};
}

Outputs cmd_estimate(const Config& c) {
  const fs::path dir = require_out(c);
  const std::uint64_t seed = resolve_seed(c);
  const Run r = simulate(c, seed);
  const lgq::QuantumFilterOutput qf = lgq::quantum_filter(r.sys, r.sim.record, r.x0, r.v0);
  const lgq::RetrofilterOutput retro = lgq::haloed_retrofilter(r.sys, r.sim.record, qf.true_cov);
  const lgq::SmootherOutput sm = lgq::lgq_smoother(qf.filter, retro, qf.true_cov);
  json m = manifest(c, &r.sys, seed);
  m["checks"] = {{"filter_cov_identity_error", qf.cov_identity_error},
                 {"filter_mean_identity_error", qf.mean_identity_error},
                 {"retro_identity_error", retro.identity_error},
                 {"retro_identity_points", retro.identity_points},
                 {"min_lambda_eigenvalue", retro.min_lambda_eigenvalue}};
  return {{dir / "trajectory.csv", lgq::io::trajectory_csv(r.sim, false)},
          {dir / "estimation.csv", lgq::io::estimation_csv(qf.filter, sm, qf.true_cov, r.sys.hbar)},
          {dir / "manifest.json", lgq::io::dump(m)}};
}

Outputs cmd_steady_state(const Config& c) {
  const fs::path file = require_out(c);
  const lgq::LGQSystem sys = system_of(c);
  const lgq::SteadyStateReport rep = lgq::steady_report(sys);
  return {{file, lgq::io::dump(lgq::io::report_json(rep))},
          {sibling_manifest(file), lgq::io::dump(manifest(c, &sys, std::nullopt))}};
}

Outputs cmd_sweep(const Config& c) {
  const fs::path file = require_out(c);
  if (!c.system_file.empty() || c.theta_o || c.theta_u || c.eta_u) {
    throw lgq::Error(lgq::ErrorKind::kInvalidArgument, "sweep-rpr takes only --eta-o and --hbar");
  }
  const lgq::SweepResult res =
      lgq::sweep_rpr(c.eta_o.value_or(0.5), c.grid, c.threads, c.hbar.value_or(1.0));
  fs::path optimal = file;
  optimal.replace_extension(".optimal.csv");
  return {{file, lgq::io::sweep_csv(res)},
          {optimal, lgq::io::optimal_phase_csv(res)},
          {sibling_manifest(file), lgq::io::dump(manifest(c, nullptr, std::nullopt))}};
}

Outputs cmd_efficiency(const Config& c) {
  const fs::path file = require_out(c);
  if (!c.system_file.empty() || c.eta_o || c.eta_u) {
    throw lgq::Error(lgq::ErrorKind::kInvalidArgument,
                     "efficiency-scan takes --theta-o, --theta-u, --hbar and --grid");
  }
  if (c.grid < 2) throw lgq::Error(lgq::ErrorKind::kInvalidArgument, "--grid must be >= 2");
  const double theta_o = c.theta_o.value_or(0.0);
  const double theta_u = c.theta_u.value_or(0.2);
  const lgq::SweepResult res = lgq::efficiency_scan(
      theta_o, theta_u, lgq::log_grid(1e-4, 0.999, c.grid), c.threads, c.hbar.value_or(1.0));
  json m = manifest(c, nullptr, std::nullopt);
  m["operating_point"] = {{"theta_o", theta_o}, {"theta_u", theta_u}};
  m["rpr_slope"] = res.rpr_slope;
  return {{file, lgq::io::efficiency_csv(res)}, {sibling_manifest(file), lgq::io::dump(m)}};
}

Outputs cmd_snapshot(const Config& c) {
  const fs::path dir = require_out(c);
  const std::uint64_t seed = resolve_seed(c);
  const Run r = simulate(c, seed);
  const double t = c.time.value_or(0.5 * c.t_final);
  const auto entries = lgq::snapshot_states(r.sys, r.sim, t, r.x0, r.v0);
  json states = json::array();
  for (const auto& e : entries) {
    json contour = json::array();
    for (const lgq::Vec& p : e.contour) contour.push_back(lgq::io::vector_json(p));
    states.push_back(json{{"label", lgq::to_string(e.label)},
                          {"mean", lgq::io::vector_json(e.state.mean)},
                          {"cov", lgq::io::matrix_json(e.state.cov, e.divergent)},
                          {"area", lgq::io::number_json(e.area)},
                          {"physical", lgq::check_physical(e.state)},
                          {"contour", contour}});
  }
  const json out{{"t", r.sim.record.grid.time(r.sim.record.grid.index_of(t))}, {"states", states}};
  return {{dir / "snapshot.json", lgq::io::dump(out)},
          {dir / "manifest.json", lgq::io::dump(manifest(c, &r.sys, seed))}};
}

Outputs cmd_verify_mc(const Config& c) {
  const fs::path file = require_out(c);
  const std::uint64_t seed = resolve_seed(c);
  const lgq::LGQSystem sys = system_of(c);
  const lgq::MCReport rep =
      lgq::mc_consistency(sys, c.n_traj, seed, lgq::TimeGrid(0.0, c.t_final, c.dt), c.threads,
                          c.tolerance);
  return {{file, lgq::io::dump(lgq::io::mc_json(rep))},
          {sibling_manifest(file), lgq::io::dump(manifest(c, &sys, seed))}};
}

json check(double numeric, double predicted, double tol) {
  const double rel = std::abs(numeric / predicted - 1.0);
  return json{{"numeric", lgq::io::number_json(numeric)},
              {"analytic", lgq::io::number_json(predicted)},
              {"relative_error", lgq::io::number_json(rel)},
              {"pass", rel <= tol}};
}

Outputs cmd_asymptotics(const Config& c) {
  const fs::path file = require_out(c);
  if (!c.system_file.empty()) {
    throw lgq::Error(lgq::ErrorKind::kInvalidArgument, "asymptotics works on the OPO only");
  }
  json out;
  if (c.regime == "low") {
    Config lc = c;
    if (!lc.eta_o) lc.eta_o = 1e-4;
    const lgq::OPOParams p = opo_params(lc, std::numbers::pi / 3);
    const auto pred = lgq::low_efficiency_formulas(p.theta_o, p.eta_o, p.hbar);
    const lgq::SteadyStateReport rep = lgq::steady_report(lgq::build_opo(p));
    out = json{{"regime", "low"},
               {"params", lgq::io::opo_json(p)},
               {"P_F", check(rep.purity_filtered, pred.purity_filtered, 0.05)},
               {"P_SWV", check(rep.purity_swv, pred.purity_swv, 0.05)},
               {"P_S_over_P_F", check(rep.purity_smoothed / rep.purity_filtered, std::sqrt(2.0), 0.05)},
               {"V_F", {{"numeric", lgq::io::matrix_json(rep.filtered_cov.value)},
                        {"analytic", lgq::io::matrix_json(pred.filtered_cov)}}},
               {"V_R", {{"numeric", rep.retro_cov ? lgq::io::matrix_json(*rep.retro_cov) : json("inf")},
                        {"analytic", lgq::io::matrix_json(pred.retro_cov)}}},
               {"V_SWV", {{"numeric", lgq::io::matrix_json(rep.swv_cov.value)},
                          {"analytic", lgq::io::matrix_json(pred.swv_cov)}}}};
  } else if (c.regime == "high") {
    if (c.eta_o || c.eta_u) {
      throw lgq::Error(lgq::ErrorKind::kInvalidArgument, "the high regime scans its own eta_u values");
    }
    const lgq::OPOParams base = opo_params(c, std::numbers::pi / 3);
    const lgq::RPRScalingFit fit = lgq::rpr_high_efficiency_check(base, lgq::high_efficiency_eta_u());
    json points = json::array();
    for (const auto& pt : fit.points) {
      lgq::OPOParams p = base;
      p.eta_u = pt.eta_u;
      p.eta_o = 1.0 - pt.eta_u;
      const lgq::LGQSystem sys = lgq::build_opo(p);
      const lgq::HighEfficiencyQ q = lgq::high_efficiency_q(sys);
      const lgq::SteadyStateReport rep = lgq::steady_report(sys);
      const lgq::Mat diff = rep.filtered_cov.value - rep.true_cov.value;
      const double err = (q.q - diff).cwiseAbs().maxCoeff();
      const double bound = 5.0 * pt.eta_u * pt.eta_u * q.true_cov.norm();
      points.push_back(json{{"eta_u", pt.eta_u},
                            {"rpr", pt.rpr ? json(*pt.rpr) : json("undefined")},
                            {"Q", lgq::io::matrix_json(q.q)},
                            {"VF_minus_VT", lgq::io::matrix_json(diff)},
                            {"Q_error", err},
                            {"Q_bound", bound},
                            {"Q_pass", err <= bound}});
    }
    out = json{{"regime", "high"},
               {"params", lgq::io::opo_json(base)},
               {"slope", fit.slope},
               {"max_relative_residual", fit.max_relative_residual},
               {"pass", fit.max_relative_residual <= 0.1},
               {"points", points}};
  } else {
    throw lgq::Error(lgq::ErrorKind::kInvalidArgument, "--regime must be low or high");
  }
  return {{file, lgq::io::dump(out)},
          {sibling_manifest(file), lgq::io::dump(manifest(c, nullptr, std::nullopt))}};
}

void add_opo_flags(CLI::App* sub, Config& c) {
  sub->add_option("--theta-o", c.theta_o, "observed homodyne phase (default pi/3)");
  sub->add_option("--theta-u", c.theta_u, "unobserved homodyne phase (default 0.2)");
  sub->add_option("--eta-o", c.eta_o, "observed efficiency (default 0.5)");
  sub->add_option("--eta-u", c.eta_u, "unobserved efficiency (default 1 - eta_o)");
  sub->add_option("--hbar", c.hbar, "hbar (default 1)");
}

void add_system_flags(CLI::App* sub, Config& c) {
  add_opo_flags(sub, c);
  sub->add_option("--system", c.system_file, "system JSON file (instead of the OPO flags)");
}

void add_grid_flags(CLI::App* sub, Config& c) {
  sub->add_option("--dt", c.dt, "time step")->capture_default_str();
  sub->add_option("--t-final", c.t_final, "horizon T")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  Config c;
  CLI::App app{"Quantum state smoothing for linear Gaussian quantum systems"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  auto* sim = app.add_subcommand("simulate", "simulate a true trajectory and both records");
  add_system_flags(sim, c);
  add_grid_flags(sim, c);

  auto* est = app.add_subcommand("estimate", "simulate, then filter and smooth the observed record");
  add_system_flags(est, c);
  add_grid_flags(est, c);

  auto* ss = app.add_subcommand("steady-state", "stationary variances, purities and RPR");
  add_system_flags(ss, c);

  auto* sw = app.add_subcommand("sweep-rpr", "RPR over the (theta_o, theta_u) grid");
  add_opo_flags(sw, c);
  sw->add_option("--grid", c.grid, "points per phase axis")->capture_default_str();

  auto* eff = app.add_subcommand("efficiency-scan",
                                 "purities and RPR against eta_o (default theta_o = 0, theta_u = 0.2)");
  add_opo_flags(eff, c);
  eff->add_option("--grid", c.grid, "number of eta_o values in [1e-4, 0.999]")->capture_default_str();

  auto* snap = app.add_subcommand("snapshot", "states and 1-SD contours at one time of a run");
  add_system_flags(snap, c);
  add_grid_flags(snap, c);
  snap->add_option("--time", c.time, "snapshot time (default T/2)");

  auto* mc = app.add_subcommand("verify-mc", "Monte-Carlo check of V_F - V_T and V_S - V_T");
  add_system_flags(mc, c);
  add_grid_flags(mc, c);
  mc->add_option("--n-traj", c.n_traj, "trajectories")->capture_default_str();
  mc->add_option("--tolerance", c.tolerance, "relative to the largest entry")->capture_default_str();

  auto* asy = app.add_subcommand("asymptotics", "compare with the low/high-efficiency formulas");
  add_opo_flags(asy, c);
  asy->add_option("--regime", c.regime, "low or high")->capture_default_str();

  for (auto* sub : {sim, est, snap, mc}) sub->add_option("--seed", c.seed, "RNG seed (fallback LGQ_SEED)");
  for (auto* sub : {sim, est, ss, sw, eff, snap, mc, asy}) {
    sub->add_option("--out", c.out, "output file or directory")->required();
    sub->add_option("--threads", c.threads, "worker cap (0 = all cores)")->capture_default_str();
  }
  sim->add_flag("--with-unobserved", c.with_unobserved, "also write Bob's record");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    c.command = app.get_subcommands().front()->get_name();
    Outputs outputs;
    if (c.command == "simulate") {
      outputs = cmd_simulate(c);
    } else if (c.command == "estimate") {
      outputs = cmd_estimate(c);
    } else if (c.command == "steady-state") {
      outputs = cmd_steady_state(c);
    } else if (c.command == "sweep-rpr") {
      outputs = cmd_sweep(c);
    } else if (c.command == "efficiency-scan") {
      outputs = cmd_efficiency(c);
    } else if (c.command == "snapshot") {
      outputs = cmd_snapshot(c);
    } else if (c.command == "verify-mc") {
      outputs = cmd_verify_mc(c);
    } else {
      outputs = cmd_asymptotics(c);
    }
    for (const auto& [path, content] : outputs) lgq::io::write_atomic(path, content);
  } catch (const lgq::Error& e) {
    std::cerr << "lgq " << c.command << ": " << e.what() << "\n";
    return e.is_validation() ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "lgq " << c.command << ": " << e.what() << "\n";
    return 3;
  }
  return 0;
}
