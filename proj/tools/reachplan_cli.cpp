// reachplan: run missions, inspect partitions, certify single cells,
// validate scenario files.
//
// Exit codes: 0 success, 2 mission failure (or partial success), 1 usage
// or input error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "reachplan/reachplan.hpp"

namespace fs = std::filesystem;
using namespace reachplan;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitMission = 2;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> dt;
  std::vector<double> h_min;
  std::optional<double> theta_thre_deg;
  std::optional<int> max_iters;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Random seed (excitation signals)");
  cmd->add_option("--dt", o.dt, "Integration step [s]");
  cmd->add_option("--h-min", o.h_min, "Minimum cell size, one value per state axis")->expected(1, -1);
  cmd->add_option("--theta-thre", o.theta_thre_deg, "Relaxation threshold angle [deg]");
  cmd->add_option("--max-iters", o.max_iters, "Planning iteration budget");
}

/// A file path, or the name of a built-in scenario.
Scenario resolve_scenario(const std::string& arg, const Overrides& o) {
  Scenario s = fs::exists(arg) ? load_scenario(arg)
               : (arg == "mecanum" || arg == "unicycle")
                   ? builtin_scenario(arg)
                   : throw ScenarioError({arg + ": no such file or built-in scenario"});
  if (o.seed) s.seed = *o.seed;
  if (o.dt) s.dt = *o.dt;
  if (!o.h_min.empty()) s.h_min = Eigen::Map<const Vec>(o.h_min.data(), static_cast<int>(o.h_min.size()));
  if (o.theta_thre_deg) s.theta_thre = *o.theta_thre_deg * std::numbers::pi / 180.0;
  if (o.max_iters) s.max_iters = *o.max_iters;
  if (auto errs = validate_scenario(s); !errs.empty()) throw ScenarioError(errs);
  return s;
}

void print_errors(const ScenarioError& e) {
  for (const auto& line : e.errors()) std::cerr << "error: " << line << '\n';
}

int cmd_run(const std::string& scenario, const std::string& out, const Overrides& o, bool quiet) {
  const Scenario s = resolve_scenario(scenario, o);
  if (!quiet) std::cout << "running scenario '" << s.name << "' (" << s.system << "), seed " << s.seed << '\n';
  const MissionLog log = run_mission(s);
  if (!out.empty()) write_mission_outputs(out, s, log);
  if (!quiet) {
    std::cout << "outcome: " << to_string(log.outcome) << " (" << log.message << ")\n"
              << "final distance: " << log.final_distance << '\n'
              << "leaves: " << log.leaf_count << " of " << log.uniform_count << " uniform cells, reduction "
              << log.reduction_ratio << '\n'
              << "simulated time: " << log.sim_time << " s, wall time: " << log.wall_time << " s\n"
              << "LP solves: " << log.lp_solves << ", QP solves: " << log.qp_solves << '\n'
              << "unintended exits: " << log.unintended_exits << ", timeouts: " << log.timeouts << '\n';
    if (!out.empty()) std::cout << "outputs written to " << out << '\n';
  }
  return log.outcome == MissionOutcome::Success ? kExitOk : kExitMission;
}

int cmd_partition_demo(const std::string& scenario, const std::string& out, const Overrides& o, bool quiet) {
  const Scenario s = resolve_scenario(scenario, o);
  const auto tree = nonuniform_partition(s.x_initial, s.x_target, s.workspace, s.h_min);
  const auto uniform = uniform_cell_count(s.workspace, s.h_min);
  const double ratio = 1.0 - static_cast<double>(tree.leaf_count()) / static_cast<double>(uniform);
  if (!out.empty()) {
    fs::create_directories(out);
    std::vector<Box> leaves;
    for (CellId id : tree.leaves()) leaves.push_back(tree.cell(id));
    std::ofstream(fs::path(out) / "partition.json") << partition_json(leaves).dump(1) << '\n';
  }
  if (quiet) std::cout << ratio << '\n';
  else
    std::cout << "leaves: " << tree.leaf_count() << "\nuniform cells: " << uniform << "\nreduction ratio: " << ratio
              << '\n';
  return kExitOk;
}

int cmd_certify(const std::string& model_file, const std::string& out) {
  std::ifstream in(model_file);
  if (!in) throw ScenarioError({model_file + ": cannot read"});
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json req;
  try {
    req = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ScenarioError({model_file + ": " + e.what()});
  }
  const auto result = certify_request(req).dump(2);
  if (out.empty()) std::cout << result << '\n';
  else std::ofstream(out) << result << '\n';
  return kExitOk;
}

int cmd_validate(const std::string& scenario, bool quiet) {
  const Scenario s = load_scenario(scenario);
  if (!quiet) std::cout << scenario << ": valid (" << s.system << ")\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical motion planning under unknown dynamics"};
  app.require_subcommand(1);

  std::string scenario, out, model;
  bool quiet = false;
  Overrides o;

  auto* run = app.add_subcommand("run", "Run a mission and write its outputs");
  run->add_option("--scenario", scenario, "Scenario file or built-in name (mecanum, unicycle)")->required();
  run->add_option("--out", out, "Output directory");
  run->add_flag("--quiet", quiet, "Print nothing on success");
  add_overrides(run, o);

  auto* demo = app.add_subcommand("partition-demo", "Refine along start -> target only and report the leaf count");
  demo->add_option("--scenario", scenario, "Scenario file or built-in name")->required();
  demo->add_option("--out", out, "Directory for partition.json");
  demo->add_flag("--quiet", quiet, "Print the reduction ratio only");
  add_overrides(demo, o);

  auto* cert = app.add_subcommand("certify", "Facet reachability of one cell from a model file");
  cert->add_option("--model", model, "Request JSON: model, cell, input bounds, mode")->required();
  cert->add_option("--out", out, "Write the verdicts here instead of stdout");
  cert->add_flag("--quiet", quiet, "Accepted for symmetry");

  auto* val = app.add_subcommand("validate", "Check a scenario file against the schema");
  val->add_option("--scenario", scenario, "Scenario file")->required();
  val->add_flag("--quiet", quiet, "Print nothing when valid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*run) return cmd_run(scenario, out, o, quiet);
    if (*demo) return cmd_partition_demo(scenario, out, o, quiet);
    if (*cert) return cmd_certify(model, out);
    if (*val) return cmd_validate(scenario, quiet);
  } catch (const ScenarioError& e) {
    print_errors(e);
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitMission;
  }
  return kExitUsage;
}
