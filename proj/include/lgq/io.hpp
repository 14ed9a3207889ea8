#pragma once

// Text formats: system files (JSON), CSV tables and JSON reports.
// Numbers are written with 17 significant digits independent of the locale.

#include <Eigen/Dense>
#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lgq/analysis.hpp"
#include "lgq/error.hpp"
#include "lgq/estimation.hpp"
#include "lgq/model.hpp"
#include "lgq/steady_state.hpp"
#include "lgq/trajectory.hpp"

namespace lgq::io {

using nlohmann::json;

inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x, std::chars_format::general, 17);
  return std::string(buf, r.ptr);
}

/// Number, or the string "inf"/"nan" where JSON has no literal.
inline json number_json(double x) {
  if (std::isfinite(x)) return x;
  return format_number(x);
}

inline json matrix_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(number_json(m(i, j)));
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Divergent entries become "inf".
inline json matrix_json(const Mat& m, const BoolMat& divergent) {
  json rows = matrix_json(m);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (divergent(i, j)) rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = "inf";
    }
  }
  return rows;
}

inline json vector_json(const Vec& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number_json(v(i)));
  return out;
}

/// Row-major nested array -> matrix. An empty array gives a 0 x cols matrix.
inline Mat matrix_from_json(const json& j, const std::string& key, Eigen::Index cols = -1) {
  if (!j.is_array()) throw Error(ErrorKind::kInvalidArgument, key + " must be a nested array");
  if (j.empty()) return Mat(0, std::max<Eigen::Index>(cols, 0));
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (!j[0].is_array()) throw Error(ErrorKind::kInvalidArgument, key + " must be a nested array");
  const auto ncols = static_cast<Eigen::Index>(j[0].size());
  Mat m(rows, ncols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != ncols) {
      throw Error(ErrorKind::kShapeMismatch, key + " has ragged rows");
    }
    for (Eigen::Index c = 0; c < ncols; ++c) {
      const json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) throw Error(ErrorKind::kInvalidArgument, key + " entries must be numbers");
      m(i, c) = v.get<double>();
    }
  }
  return m;
}

inline OPOParams opo_from_json(const json& j) {
  OPOParams p;
  auto get = [&](const char* key, double& field) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) throw Error(ErrorKind::kInvalidArgument, std::string(key) + " must be a number");
    field = j[key].get<double>();
  };
  get("theta_o", p.theta_o);
  get("theta_u", p.theta_u);
  get("eta_o", p.eta_o);
  if (j.contains("eta_u")) {
    get("eta_u", p.eta_u);
  } else {
    p.eta_u = 1.0 - p.eta_o;
  }
  get("hbar", p.hbar);
  p.validate();
  return p;
}

inline json opo_json(const OPOParams& p) {
  return json{{"theta_o", p.theta_o}, {"theta_u", p.theta_u}, {"eta_o", p.eta_o},
              {"eta_u", p.eta_u},     {"hbar", p.hbar}};
}

/// Either the explicit matrices or an "opo" object.
inline LGQSystem system_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::kInvalidArgument, "system file must hold a JSON object");
  if (j.contains("opo")) {
    if (j.contains("A")) throw Error(ErrorKind::kInvalidArgument, "give either \"opo\" or matrices");
    return build_opo(opo_from_json(j["opo"]));
  }
  for (const char* key : {"A", "D", "C_o", "Gamma_o"}) {
    if (!j.contains(key)) throw Error(ErrorKind::kInvalidArgument, std::string("missing key ") + key);
  }
  LGQSystem sys;
  sys.drift = matrix_from_json(j["A"], "A");
  const Eigen::Index m = sys.drift.rows();
  sys.diffusion = matrix_from_json(j["D"], "D", m);
  sys.obs_c = matrix_from_json(j["C_o"], "C_o", m);
  sys.obs_gamma = matrix_from_json(j["Gamma_o"], "Gamma_o", m);
  sys.unobs_c = j.contains("C_u") ? matrix_from_json(j["C_u"], "C_u", m) : Mat(0, m);
  sys.unobs_gamma = j.contains("Gamma_u") ? matrix_from_json(j["Gamma_u"], "Gamma_u", m) : Mat(0, m);
  if (j.contains("hbar")) {
    if (!j["hbar"].is_number()) throw Error(ErrorKind::kInvalidArgument, "hbar must be a number");
    sys.hbar = j["hbar"].get<double>();
  }
  sys.validate();
  return sys;
}

inline json system_json(const LGQSystem& sys) {
  return json{{"A", matrix_json(sys.drift)},         {"D", matrix_json(sys.diffusion)},
              {"C_o", matrix_json(sys.obs_c)},       {"C_u", matrix_json(sys.unobs_c)},
              {"Gamma_o", matrix_json(sys.obs_gamma)}, {"Gamma_u", matrix_json(sys.unobs_gamma)},
              {"hbar", sys.hbar}};
}

inline LGQSystem load_system(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kInvalidArgument, "cannot open system file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kInvalidArgument, "system file is not valid JSON: " + std::string(e.what()));
  }
  return system_from_json(j);
}

/// Writes the whole file next to its destination and renames it into place,
/// so a failed run never leaves a partial file behind.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kInvalidArgument, "cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw Error(ErrorKind::kInvalidArgument, "failed writing " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : width_(header.size()) { row_strings(header); }

  CsvTable& cell(double x) { return text(format_number(x)); }
  CsvTable& cell(bool b) { return text(b ? "1" : "0"); }
  CsvTable& cells(const Vec& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) cell(v(i));
    return *this;
  }
  /// Upper triangle, row by row.
  CsvTable& upper(const Mat& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = i; j < m.cols(); ++j) cell(m(i, j));
    }
    return *this;
  }
  CsvTable& text(const std::string& s) {
    if (col_ > 0) out_ << ',';
    out_ << s;
    ++col_;
    return *this;
  }
  void end_row() {
    if (col_ != width_) throw Error(ErrorKind::kShapeMismatch, "CSV row width differs from header");
    out_ << '\n';
    col_ = 0;
  }
  std::string str() const { return out_.str(); }

 private:
  void row_strings(const std::vector<std::string>& cols) {
    for (const auto& c : cols) text(c);
    out_ << '\n';
    col_ = 0;
  }

  std::ostringstream out_;
  std::size_t width_;
  std::size_t col_ = 0;
};

inline std::vector<std::string> indexed(const std::string& stem, Eigen::Index n) {
  std::vector<std::string> out;
  for (Eigen::Index i = 1; i <= n; ++i) out.push_back(stem + std::to_string(i));
  return out;
}

inline std::vector<std::string> upper_names(const std::string& stem, Eigen::Index m) {
  std::vector<std::string> out;
  for (Eigen::Index i = 1; i <= m; ++i) {
    for (Eigen::Index j = i; j <= m; ++j) out.push_back(stem + std::to_string(i) + std::to_string(j));
  }
  return out;
}

inline void append(std::vector<std::string>& to, const std::vector<std::string>& from) {
  to.insert(to.end(), from.begin(), from.end());
}

/// One row per step: t_k, the true mean at t_k and the record increments on [t_k, t_k+1).
inline std::string trajectory_csv(const Simulation& sim, bool include_unobserved) {
  const TrueTrajectory& tr = sim.trajectory;
  const MeasurementRecord& rec = sim.record;
  const auto m = tr.means.front().size();
  const auto lo = rec.obs_dt.empty() ? 0 : rec.obs_dt.front().size();
  const bool unobs = include_unobserved && rec.unobs_dt && !rec.unobs_dt->empty();
  std::vector<std::string> header{"t"};
  append(header, indexed("x_true_", m));
  append(header, indexed("yodt_", lo));
  if (unobs) append(header, indexed("yudt_", rec.unobs_dt->front().size()));
  CsvTable table(header);
  for (std::size_t k = 0; k < rec.grid.n_steps(); ++k) {
    table.cell(rec.grid.time(k)).cells(tr.means[k]).cells(rec.obs_dt[k]);
    if (unobs) table.cells((*rec.unobs_dt)[k]);
    table.end_row();
  }
  return table.str();
}

inline double purity_or_nan(const Mat& v, double hbar) {
  try {
    return purity(v, hbar);
  } catch (const Error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

/// One row per grid point with the filtered, smoothed and SWV moments.
inline std::string estimation_csv(const FilterOutput& filter, const SmootherOutput& sm,
                                  const std::vector<Mat>& true_cov, double hbar) {
  const Eigen::Index m = filter.cov.front().rows();
  std::vector<std::string> header{"t"};
  append(header, indexed("xF_", m));
  append(header, upper_names("VF_", m));
  append(header, indexed("xS_", m));
  append(header, upper_names("VS_", m));
  append(header, indexed("xSWV_", m));
  append(header, upper_names("VSWV_", m));
  append(header, {"PT", "PF", "PS", "PSWV", "physical_S", "physical_SWV"});
  CsvTable table(header);
  for (std::size_t k = 0; k < filter.cov.size(); ++k) {
    table.cell(filter.grid.time(k))
        .cells(filter.means[k])
        .upper(filter.cov[k])
        .cells(sm.means[k])
        .upper(sm.cov[k])
        .cells(sm.swv_means[k])
        .upper(sm.swv_cov[k])
        .cell(purity_or_nan(true_cov[k], hbar))
        .cell(purity_or_nan(filter.cov[k], hbar))
        .cell(purity_or_nan(sm.cov[k], hbar))
        .cell(purity_or_nan(sm.swv_cov[k], hbar))
        .cell(check_physical(sm.cov[k], hbar))
        .cell(check_physical(sm.swv_cov[k], hbar));
    table.end_row();
  }
  return table.str();
}

inline double rpr_or_nan(const std::optional<double>& r) {
  return r ? *r : std::numeric_limits<double>::quiet_NaN();
}

inline std::string sweep_csv(const SweepResult& res) {
  CsvTable table({"theta_o", "theta_u", "PF", "PS", "PSWV", "RPR", "physical_SWV"});
  for (const SweepPoint& p : res.points) {
    table.cell(p.theta_o).cell(p.theta_u).cell(p.purity_filtered).cell(p.purity_smoothed);
    table.cell(p.purity_swv).cell(rpr_or_nan(p.rpr)).cell(p.physical_swv);
    table.end_row();
  }
  return table.str();
}

inline std::string optimal_phase_csv(const SweepResult& res) {
  CsvTable table({"theta_o", "theta_u_opt", "RPR_opt"});
  for (std::size_t i = 0; i < res.theta_o.size(); ++i) {
    table.cell(res.theta_o[i]).cell(rpr_or_nan(res.optimal_theta_u[i]));
    table.cell(rpr_or_nan(res.optimal_rpr[i])).end_row();
  }
  return table.str();
}

inline std::string efficiency_csv(const SweepResult& res) {
  CsvTable table({"eta_o", "PF", "PS", "PSWV", "RPR", "PF_asym", "RPR_fit"});
  for (const SweepPoint& p : res.points) {
    table.cell(p.eta_o).cell(p.purity_filtered).cell(p.purity_smoothed).cell(p.purity_swv);
    table.cell(rpr_or_nan(p.rpr)).cell(p.pf_asym).cell(p.rpr_fit).end_row();
  }
  return table.str();
}

inline json stationary_json(const StationaryMatrix& s) {
  return json{{"value", matrix_json(s.value, s.divergent)}, {"converged", s.converged}};
}

inline json report_json(const SteadyStateReport& r) {
  json j{{"V_T", stationary_json(r.true_cov)},
         {"V_F", stationary_json(r.filtered_cov)},
         {"Lambda_R", stationary_json(r.lambda_r)},
         {"V_S", stationary_json(r.smoothed_cov)},
         {"V_SWV", stationary_json(r.swv_cov)},
         {"purity", {{"P_T", number_json(r.purity_true)},
                     {"P_F", number_json(r.purity_filtered)},
                     {"P_S", number_json(r.purity_smoothed)},
                     {"P_SWV", number_json(r.purity_swv)}}},
         {"rpr", r.rpr ? json(*r.rpr) : json("undefined")},
         {"hurwitz", {{"Abar", r.abar_hurwitz}, {"M", r.m_hurwitz}}},
         {"physical", {{"true", r.physical_true},
                       {"filtered", r.physical_filtered},
                       {"smoothed", r.physical_smoothed},
                       {"SWV", r.physical_swv}}},
         {"stationary", r.stationary}};
  j["V_R"] = r.retro_cov ? matrix_json(*r.retro_cov) : json("inf");
  return j;
}

inline json mc_json(const MCReport& r) {
  json probes = json::array();
  for (const MCProbe& p : r.probes) {
    probes.push_back(json{{"t", p.t},
                          {"index", p.index},
                          {"empirical_filtered", matrix_json(p.empirical_filtered)},
                          {"VF_minus_VT", matrix_json(p.halo_filtered)},
                          {"error_filtered", number_json(p.error_filtered)},
                          {"pass_filtered", p.pass_filtered},
                          {"empirical_smoothed", matrix_json(p.empirical_smoothed)},
                          {"VS_minus_VT", matrix_json(p.halo_smoothed)},
                          {"error_smoothed", number_json(p.error_smoothed)},
                          {"pass_smoothed", p.pass_smoothed}});
  }
  return json{{"n_traj", r.n_traj},   {"seed", r.seed}, {"tolerance", r.tolerance},
              {"probes", probes},     {"passed", r.passed}};
}

/// JSON text with full double precision.
inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

}  // namespace lgq::io
