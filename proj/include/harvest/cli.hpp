#pragma once

// Pipeline commands behind the `harvest` executable: scenario generation,
// training, evaluation and plotting. The executable writes a manifest.json
// per command listing its inputs and outputs with content hashes.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "harvest/config.hpp"
#include "harvest/eval.hpp"
#include "harvest/mosac.hpp"

namespace harvest::cli {

using ScenarioSet = std::vector<std::shared_ptr<const world::Scenario>>;

/// Device counts of the generalisation test sets.
inline constexpr int kTestDeviceCounts[] = {3, 5, 6, 9, 10};

/// Battery of the K-device test set: the configured battery, scaled by 100/80
/// (rounded) for K = 10.
int test_set_battery(const config::RunConfig& cfg, int devices);

/// Fixed scenario set on the run's map. Tag 0 is the validation set used
/// during training; tag K > 0 is the K-device test set.
ScenarioSet scenario_set(const config::RunConfig& cfg, const world::CityMap& map, int count, int devices, int battery,
                         std::uint64_t tag);

/// Fresh device placement per episode on the fixed map.
mosac::ScenarioFactory training_factory(const config::RunConfig& cfg, std::shared_ptr<const world::CityMap> map);

/// Argmax-policy evaluation over W_test: hv, utility, collected% under
/// w=(1,0) and energy under w=(0,1).
mosac::Evaluator make_evaluator(const config::RunConfig& cfg, ScenarioSet scenarios);

eval::PolicyFactory greedy_factory(const config::RunConfig& cfg);
eval::PolicyFactory random_factory(std::uint64_t seed);
eval::PolicyFactory agent_factory(const mosac::Agent& agent);

/// Agent rebuilt from the configuration stored in a checkpoint header.
std::unique_ptr<mosac::Agent> load_agent(const std::filesystem::path& checkpoint);

// ---------------------------------------------------------------------------
// Commands

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_ini;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
};

/// 64-bit FNV-1a of the file bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);
void write_manifest(const Manifest& m, const std::filesystem::path& dir);

/// Writes map.json, validation/ (training K and battery) and test_k{K}/ sets.
std::vector<std::filesystem::path> cmd_gen(const config::RunConfig& cfg, const std::filesystem::path& out,
                                           int scenarios);

struct TrainRun {
  mosac::TrainResult result;
  std::filesystem::path dir;
};
/// Trains one agent; writes metrics.csv and checkpoints/ under out.
TrainRun cmd_train(const config::RunConfig& cfg, const std::filesystem::path& out, bool verbose);

struct EvalRequest {
  std::optional<std::filesystem::path> checkpoint;
  /// "greedy" or "random"; used when no checkpoint is given.
  std::string baseline;
  /// Directory of scenario_*.json files; the validation set when absent.
  std::optional<std::filesystem::path> scenario_dir;
  int scenarios = 0;  // 0: eval.scenarios
  bool fading = false;
  bool stochastic = false;
};

struct EvalRun {
  eval::EvalResult result;
  std::vector<std::filesystem::path> outputs;
};
/// Writes returns.csv, summary.json, front.svg, trajectory and (for attention
/// agents) attention exports under out.
EvalRun cmd_eval(const config::RunConfig& cfg, const EvalRequest& req, const std::filesystem::path& out);

/// Renders SVGs from eval directories / summary.json (Pareto fronts),
/// metrics.csv (hypervolume vs step), trajectory_*.csv and attention.csv.
/// Throws std::invalid_argument when nothing plottable is given.
std::vector<std::filesystem::path> cmd_plot(const std::vector<std::filesystem::path>& inputs,
                                            const std::filesystem::path& out);

}  // namespace harvest::cli
