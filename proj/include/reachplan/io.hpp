#pragma once

// Scenario files and mission outputs (JSON via nlohmann::json, CSV by hand).
//
// A scenario file names a system and overrides any subset of that system's
// built-in scenario. Unknown keys are errors, so typos do not pass silently.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "reachplan/planner.hpp"

namespace reachplan {

inline constexpr int kScenarioSchemaVersion = 1;

/// Scenario file problems, one "path: message" entry each.
class ScenarioError : public std::runtime_error {
 public:
  explicit ScenarioError(std::vector<std::string> errs)
      : std::runtime_error(join(errs)), errors_(std::move(errs)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& e) {
    std::string s;
    for (const auto& x : e) s += (s.empty() ? "" : "\n") + x;
    return s;
  }
  std::vector<std::string> errors_;
};

inline Scenario builtin_scenario(const std::string& name) {
  if (name == "mecanum") return mecanum_scenario();
  if (name == "unicycle") return unicycle_scenario();
  throw InvalidArgument("unknown built-in scenario '" + name + "'");
}

namespace detail {

using nlohmann::json;

inline json vec_json(const Vec& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

class ScenarioReader {
 public:
  std::vector<std::string> errors;

  void number(const json& j, const std::string& key, const std::string& path, double& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_number()) return fail(path + key, "expected a number");
    out = v.get<double>();
  }

  template <class Int>
  void integer(const json& j, const std::string& key, const std::string& path, Int& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_number_integer()) return fail(path + key, "expected an integer");
    out = v.get<Int>();
  }

  void boolean(const json& j, const std::string& key, const std::string& path, bool& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_boolean()) return fail(path + key, "expected true or false");
    out = j.at(key).get<bool>();
  }

  void text(const json& j, const std::string& key, const std::string& path, std::string& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_string()) return fail(path + key, "expected a string");
    out = j.at(key).get<std::string>();
  }

  void vector(const json& j, const std::string& key, const std::string& path, Vec& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_array() || v.empty()) return fail(path + key, "expected a non-empty array of numbers");
    Vec r(static_cast<int>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) return fail(path + key + "[" + std::to_string(i) + "]", "expected a number");
      r(static_cast<int>(i)) = v[i].get<double>();
    }
    out = r;
  }

  void box(const json& j, const std::string& key, const std::string& path, Box& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!object(v, path + key, {"lo", "hi"})) return;
    vector(v, "lo", path + key + ".", out.lo);
    vector(v, "hi", path + key + ".", out.hi);
    if (out.lo.size() != out.hi.size()) fail(path + key, "lo and hi differ in length");
  }

  /// Checks that v is an object with keys from `allowed` only.
  bool object(const json& v, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!v.is_object()) {
      fail(path.empty() ? "(root)" : path, "expected an object");
      return false;
    }
    for (const auto& [k, _] : v.items()) {
      bool ok = false;
      for (const char* a : allowed) ok |= k == a;
      if (!ok) fail(path.empty() ? k : path + "." + k, "unknown field");
    }
    return true;
  }

  void fail(const std::string& path, const std::string& what) { errors.push_back(path + ": " + what); }
};

/// 1-based line and column of a byte offset.
inline std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') ++line, col = 1;
    else ++col;
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace detail

/// Parses scenario JSON text. Throws ScenarioError listing every problem
/// found, each prefixed by its field path (or line/column for syntax).
inline Scenario parse_scenario(const std::string& text) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::string msg = e.what();
    throw ScenarioError({"syntax error at " + detail::line_col(text, e.byte > 0 ? e.byte - 1 : 0) + ": " +
                         msg.substr(msg.find(':') == std::string::npos ? 0 : msg.rfind(':') + 2)});
  }
  detail::ScenarioReader rd;
  if (!rd.object(j, "", {"schema_version", "name", "system", "workspace", "input_bounds", "L_df", "L_g", "h_min",
                         "C_u", "beta_u", "p_e_prior", "theta_thre_deg", "shrink", "x_initial", "x_target", "dt",
                         "excitation", "budgets", "entry_depth", "prediction_hops", "terminal", "seed"}))
    throw ScenarioError(rd.errors);
  if (!j.contains("schema_version")) rd.fail("schema_version", "missing");
  else if (!j.at("schema_version").is_number_integer() || j.at("schema_version").get<int>() != kScenarioSchemaVersion)
    rd.fail("schema_version", "expected " + std::to_string(kScenarioSchemaVersion));
  std::string system;
  if (!j.contains("system")) rd.fail("system", "missing");
  rd.text(j, "system", "", system);
  if (!rd.errors.empty()) throw ScenarioError(rd.errors);
  if (system != "mecanum" && system != "unicycle") throw ScenarioError({"system: must be \"mecanum\" or \"unicycle\""});

  Scenario s = builtin_scenario(system);
  rd.text(j, "name", "", s.name);
  rd.box(j, "workspace", "", s.workspace);
  rd.box(j, "input_bounds", "", s.Pu);
  rd.number(j, "L_df", "", s.L_df);
  rd.number(j, "L_g", "", s.L_g);
  rd.vector(j, "h_min", "", s.h_min);
  rd.number(j, "C_u", "", s.C_u);
  rd.number(j, "beta_u", "", s.beta_u);
  rd.number(j, "p_e_prior", "", s.p_e_prior);
  double deg = s.theta_thre * 180.0 / std::numbers::pi;
  rd.number(j, "theta_thre_deg", "", deg);
  s.theta_thre = deg * std::numbers::pi / 180.0;
  rd.number(j, "shrink", "", s.shrink);
  rd.vector(j, "x_initial", "", s.x_initial);
  rd.vector(j, "x_target", "", s.x_target);
  rd.number(j, "dt", "", s.dt);
  rd.number(j, "entry_depth", "", s.entry_depth);
  rd.integer(j, "prediction_hops", "", s.prediction_hops);
  if (j.contains("seed") && j["seed"].is_number_integer() && !j["seed"].is_number_unsigned())
    rd.fail("seed", "must be >= 0");
  else
    rd.integer(j, "seed", "", s.seed);
  if (j.contains("excitation") && rd.object(j["excitation"], "excitation", {"period", "scale"})) {
    rd.number(j["excitation"], "period", "excitation.", s.excitation_period);
    rd.number(j["excitation"], "scale", "excitation.", s.excitation_scale);
  }
  if (j.contains("budgets") &&
      rd.object(j["budgets"], "budgets", {"max_iters", "max_sim_time", "retry_budget", "timeout_factor"})) {
    const json& b = j["budgets"];
    rd.integer(b, "max_iters", "budgets.", s.max_iters);
    rd.number(b, "max_sim_time", "budgets.", s.max_sim_time);
    rd.integer(b, "retry_budget", "budgets.", s.retry_budget);
    rd.number(b, "timeout_factor", "budgets.", s.timeout_factor);
  }
  if (j.contains("terminal") &&
      rd.object(j["terminal"], "terminal",
                {"alpha", "kappa", "r_stop", "slack_weight", "equilibrium_reference", "period", "time"})) {
    const json& t = j["terminal"];
    rd.number(t, "alpha", "terminal.", s.terminal.alpha);
    rd.number(t, "kappa", "terminal.", s.terminal.kappa);
    rd.number(t, "r_stop", "terminal.", s.terminal.r_stop);
    rd.number(t, "slack_weight", "terminal.", s.terminal.slack_weight);
    rd.boolean(t, "equilibrium_reference", "terminal.", s.terminal.equilibrium_reference);
    rd.number(t, "period", "terminal.", s.terminal_period);
    rd.number(t, "time", "terminal.", s.terminal_time);
  }
  if (!rd.errors.empty()) throw ScenarioError(rd.errors);
  if (auto errs = validate_scenario(s); !errs.empty()) throw ScenarioError(errs);
  return s;
}

inline Scenario load_scenario(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ScenarioError({file.string() + ": cannot read"});
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

/// Full scenario as JSON (every field, so the file reproduces the run).
inline nlohmann::json scenario_json(const Scenario& s) {
  using detail::vec_json;
  nlohmann::json j;
  j["schema_version"] = kScenarioSchemaVersion;
  j["name"] = s.name;
  j["system"] = s.system;
  j["workspace"] = {{"lo", vec_json(s.workspace.lo)}, {"hi", vec_json(s.workspace.hi)}};
  j["input_bounds"] = {{"lo", vec_json(s.Pu.lo)}, {"hi", vec_json(s.Pu.hi)}};
  j["L_df"] = s.L_df;
  j["L_g"] = s.L_g;
  j["h_min"] = vec_json(s.h_min);
  j["C_u"] = s.C_u;
  j["beta_u"] = s.beta_u;
  j["p_e_prior"] = s.p_e_prior;
  j["theta_thre_deg"] = s.theta_thre * 180.0 / std::numbers::pi;
  j["shrink"] = s.shrink;
  j["x_initial"] = vec_json(s.x_initial);
  j["x_target"] = vec_json(s.x_target);
  j["dt"] = s.dt;
  j["excitation"] = {{"period", s.excitation_period}, {"scale", s.excitation_scale}};
  j["budgets"] = {{"max_iters", s.max_iters},
                  {"max_sim_time", s.max_sim_time},
                  {"retry_budget", s.retry_budget},
                  {"timeout_factor", s.timeout_factor}};
  j["entry_depth"] = s.entry_depth;
  j["prediction_hops"] = s.prediction_hops;
  j["terminal"] = {{"alpha", s.terminal.alpha},
                   {"kappa", s.terminal.kappa},
                   {"r_stop", s.terminal.r_stop},
                   {"slack_weight", s.terminal.slack_weight},
                   {"equilibrium_reference", s.terminal.equilibrium_reference},
                   {"period", s.terminal_period},
                   {"time", s.terminal_time}};
  j["seed"] = s.seed;
  return j;
}

// ---- mission outputs --------------------------------------------------------

inline void write_trajectory_csv(std::ostream& out, const MissionLog& log) {
  if (log.trajectory.empty()) return;
  const auto n = log.trajectory.front().x.size(), m = log.trajectory.front().u.size();
  out << "t";
  for (Eigen::Index i = 1; i <= n; ++i) out << ",x" << i;
  for (Eigen::Index i = 1; i <= m; ++i) out << ",u" << i;
  out << ",cell_id\n";
  out << std::setprecision(17);
  for (const auto& s : log.trajectory) {
    out << s.t;
    for (Eigen::Index i = 0; i < n; ++i) out << ',' << s.x(i);
    for (Eigen::Index i = 0; i < m; ++i) out << ',' << s.u(i);
    out << ',' << s.cell << '\n';
  }
}

inline nlohmann::json snapshot_json(const GraphSnapshot& s) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : s.edges)
    edges.push_back({{"source", e.from},
                     {"target", e.to},
                     {"status", to_string(e.status)},
                     {"weight", e.weight},
                     {"p_e", e.p_e},
                     {"capped", e.capped}});
  return {{"step", s.step},
          {"t", s.t},
          {"current_cell", s.current},
          {"target_cell", s.target},
          {"path", s.path},
          {"path_cost", s.path_cost},
          {"entropy", s.entropy},
          {"tally", {{"certain", s.tally.certain}, {"uncertain", s.tally.uncertain}, {"impossible", s.tally.impossible}}},
          {"nodes", s.nodes},
          {"edges", std::move(edges)}};
}

inline nlohmann::json partition_json(const std::vector<Box>& leaves) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& b : leaves)
    arr.push_back({{"id", b.id}, {"lo", detail::vec_json(b.lo)}, {"hi", detail::vec_json(b.hi)}, {"depth", b.depth}});
  return {{"leaves", std::move(arr)}};
}

/// Run summary. Everything except the "timing" block is a function of
/// (scenario, seed).
inline nlohmann::json summary_json(const Scenario& s, const MissionLog& log) {
  nlohmann::json tallies = nlohmann::json::array();
  for (const auto& sn : log.snapshots)
    tallies.push_back({{"step", sn.step},
                       {"current_cell", sn.current},
                       {"certain", sn.tally.certain},
                       {"uncertain", sn.tally.uncertain},
                       {"impossible", sn.tally.impossible}});
  nlohmann::json events = nlohmann::json::object();
  for (const auto& e : log.events) events[e.kind] = events.value(e.kind, 0) + 1;
  return {{"scenario", s.name},
          {"system", s.system},
          {"seed", s.seed},
          {"success", log.outcome == MissionOutcome::Success},
          {"outcome", to_string(log.outcome)},
          {"message", log.message},
          {"final_distance", log.final_distance},
          {"final_state", detail::vec_json(log.final_state)},
          {"leaf_count", log.leaf_count},
          {"uniform_count", log.uniform_count},
          {"reduction_ratio", log.reduction_ratio},
          {"lp_solves", log.lp_solves},
          {"qp_solves", log.qp_solves},
          {"sim_time", log.sim_time},
          {"iterations", log.iterations},
          {"identifications", log.identifications},
          {"unintended_exits", log.unintended_exits},
          {"timeouts", log.timeouts},
          {"max_retries_used", log.max_retries_used},
          {"time_bound_violations", log.time_bound_violations},
          {"max_workspace_violation", log.max_workspace_violation},
          {"reached_target_cell", log.reached_target_cell},
          {"terminal_converged", log.terminal_converged},
          {"terminal_steps", log.terminal_steps},
          {"min_terminal_barrier", log.terminal_steps > 0 ? nlohmann::json(log.min_terminal_barrier) : nlohmann::json()},
          {"max_kkt_residual", log.max_kkt_residual},
          {"event_counts", std::move(events)},
          {"edge_tallies", std::move(tallies)},
          {"timing", {{"wall_time_s", log.wall_time}}}};
}

/// Writes trajectory.csv, graph_step_K.json, partition.json, summary.json
/// and the resolved scenario.json into `dir` (created if needed).
inline void write_mission_outputs(const std::filesystem::path& dir, const Scenario& s, const MissionLog& log) {
  std::filesystem::create_directories(dir);
  auto open = [&](const std::string& name) {
    std::ofstream f(dir / name);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("trajectory.csv");
    write_trajectory_csv(f, log);
  }
  for (const auto& sn : log.snapshots) open("graph_step_" + std::to_string(sn.step) + ".json") << snapshot_json(sn).dump() << '\n';
  open("partition.json") << partition_json(log.leaves).dump(1) << '\n';
  open("summary.json") << summary_json(s, log).dump(2) << '\n';
  open("scenario.json") << scenario_json(s).dump(2) << '\n';
}


// ---- one-shot certification -------------------------------------------------

namespace detail {

inline Mat matrix_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) throw ScenarioError({path + ": expected an array of rows"});
  const auto r = j.size(), c = j[0].size();
  Mat M(static_cast<int>(r), static_cast<int>(c));
  for (std::size_t i = 0; i < r; ++i) {
    if (!j[i].is_array() || j[i].size() != c) throw ScenarioError({path + "[" + std::to_string(i) + "]: ragged row"});
    for (std::size_t k = 0; k < c; ++k) {
      if (!j[i][k].is_number())
        throw ScenarioError({path + "[" + std::to_string(i) + "][" + std::to_string(k) + "]: expected a number"});
      M(static_cast<int>(i), static_cast<int>(k)) = j[i][k].get<double>();
    }
  }
  return M;
}

inline nlohmann::json controls_json(const std::vector<Vec>& u) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& v : u) a.push_back(vec_json(v));
  return a;
}

}  // namespace detail

/// Reachability verdicts for the facets of one cell under a given model.
///
/// Request: {"model": {"A", "B", "c", "linearization_point"?}, "cell": {lo, hi},
/// "input_bounds": {lo, hi}, "facets"?: [k...], "mode"?: "exact" | "relaxed" |
/// "predictive", "theta_thre_deg"?, "shrink"?, "bounds"?: {eps_A, eps_B, eps_c},
/// "L_df"?, "L_g"?}. Predictive mode takes explicit bounds or derives them from
/// the Lipschitz constants and the linearization point.
inline nlohmann::json certify_request(const nlohmann::json& req) {
  detail::ScenarioReader rd;
  if (!rd.object(req, "", {"model", "cell", "input_bounds", "facets", "mode", "theta_thre_deg", "shrink", "bounds",
                           "L_df", "L_g"}))
    throw ScenarioError(rd.errors);
  for (const char* k : {"model", "cell", "input_bounds"})
    if (!req.contains(k)) rd.fail(k, "missing");
  if (!rd.errors.empty()) throw ScenarioError(rd.errors);
  const auto& mj = req.at("model");
  if (!rd.object(mj, "model", {"A", "B", "c", "linearization_point"})) throw ScenarioError(rd.errors);
  AffineModel model;
  model.A = detail::matrix_from_json(mj.value("A", nlohmann::json()), "model.A");
  model.B = detail::matrix_from_json(mj.value("B", nlohmann::json()), "model.B");
  rd.vector(mj, "c", "model.", model.c);
  rd.vector(mj, "linearization_point", "model.", model.linearization_point);
  Box cell, Pu;
  rd.box(req, "cell", "", cell);
  rd.box(req, "input_bounds", "", Pu);
  std::string mode = "exact";
  rd.text(req, "mode", "", mode);
  double deg = 10.0, shrink = 0.5, L_df = 0.0, L_g = 0.0;
  rd.number(req, "theta_thre_deg", "", deg);
  rd.number(req, "shrink", "", shrink);
  rd.number(req, "L_df", "", L_df);
  rd.number(req, "L_g", "", L_g);
  if (!rd.errors.empty()) throw ScenarioError(rd.errors);
  const int n = cell.dim(), m = Pu.dim();
  if (model.A.rows() != n || model.A.cols() != n || model.B.rows() != n || model.B.cols() != m || model.c.size() != n)
    throw ScenarioError({"model: dimensions do not match the cell and input bounds"});
  if (!cell.valid() || !Pu.valid()) throw ScenarioError({"cell/input_bounds: lo < hi required"});
  if (mode != "exact" && mode != "relaxed" && mode != "predictive")
    throw ScenarioError({"mode: must be \"exact\", \"relaxed\" or \"predictive\""});

  DeviationBounds bounds;
  if (mode == "predictive") {
    if (req.contains("bounds")) {
      const auto& b = req.at("bounds");
      if (!rd.object(b, "bounds", {"eps_A", "eps_B", "eps_c"})) throw ScenarioError(rd.errors);
      rd.number(b, "eps_A", "bounds.", bounds.eps_A);
      rd.number(b, "eps_B", "bounds.", bounds.eps_B);
      rd.number(b, "eps_c", "bounds.", bounds.eps_c);
    } else {
      if (model.linearization_point.size() != n)
        throw ScenarioError({"model.linearization_point: required for predictive mode without explicit bounds"});
      bounds = cell_pair_bounds(L_df, L_g, model, cell);
    }
    if (!rd.errors.empty()) throw ScenarioError(rd.errors);
  }

  std::vector<int> facets;
  if (req.contains("facets")) {
    const auto& f = req.at("facets");
    if (!f.is_array()) throw ScenarioError({"facets: expected an array of integers"});
    for (const auto& k : f) {
      if (!k.is_number_integer() || k.get<int>() < 0 || k.get<int>() >= 2 * n)
        throw ScenarioError({"facets: entries must be integers in [0, " + std::to_string(2 * n) + ")"});
      facets.push_back(k.get<int>());
    }
  } else {
    for (int k = 0; k < 2 * n; ++k) facets.push_back(k);
  }

  const Polytope p = box_to_polytope(cell);
  nlohmann::json out;
  out["mode"] = mode;
  out["facets"] = nlohmann::json::array();
  for (int f : facets) {
    nlohmann::json r;
    r["facet"] = f;
    r["axis"] = facet_axis(f);
    r["side"] = facet_is_upper(f) ? "upper" : "lower";
    if (mode == "predictive") {
      if (auto cert = predict_reachable(model, bounds, p, f, Pu)) {
        r["verdict"] = "reachable";
        if (auto T = robust_exit_time_bound(model, bounds, p, f, Pu, cert->rows)) {
          r["time_bound"] = T->bound.T0;
          r["controls"] = detail::controls_json(T->controls);
        } else {
          r["controls"] = detail::controls_json(cert->controls);
        }
      } else {
        r["verdict"] = predict_unreachable(model, bounds, p, f, Pu) ? "unreachable" : "undetermined";
      }
    } else {
      std::optional<ReachCertificate> cert =
          mode == "relaxed" ? relaxed_facet_reachable(model, cell, f, Pu, deg * std::numbers::pi / 180.0, shrink)
                            : facet_reachable(model, p, f, Pu);
      if (cert) {
        r["verdict"] = "reachable";
        r["kind"] = to_string(cert->kind);
        r["controls"] = detail::controls_json(cert->controls);
        if (cert->kind != CertKind::Relaxed || cert->relaxed_vertex.empty())
          r["time_bound"] = exit_time_bound(model, cert->region, cert->controls, f).T0;
      } else {
        r["verdict"] = "unreachable";
      }
    }
    out["facets"].push_back(std::move(r));
  }
  return out;
}

}  // namespace reachplan
