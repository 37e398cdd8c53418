// harvest: scenario generation, MOSAC training, evaluation and plotting.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error,
// 3 numerical abort during training.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "harvest/cli.hpp"
#include "harvest/config.hpp"

namespace fs = std::filesystem;
using namespace harvest;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> algo;
  std::optional<long> steps;
  int scenarios = 0;
};

config::RunConfig resolve(const Common& c) {
  config::RunConfig cfg = c.config_path ? config::load_config(*c.config_path) : config::RunConfig{};
  if (c.seed) cfg.seed = *c.seed;
  if (c.algo) cfg.algo = config::parse_algorithm(*c.algo);
  if (c.steps) cfg.train.total_steps = *c.steps;
  if (c.out) {
    cfg.output_dir = *c.out;
  } else if (const char* env = std::getenv("HARVEST_OUT"); env && *env) {
    cfg.output_dir = env;
  }
  cfg.validate();
  return cfg;
}

void print_counts(const config::RunConfig& cfg) {
  const nets::ParamCounts c = nets::param_count(cfg.network_spec());
  std::cout << "algo " << config::algorithm_name(cfg.algo) << '\n'
            << "actor_params " << c.actor << '\n'
            << "critic_params " << c.critic << '\n'
            << "trainable_total " << c.trainable_total << '\n'
            << "with_targets " << c.with_targets << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UAV data-harvesting with preference-conditioned multi-objective SAC"};
  app.require_subcommand(1);
  Common common;
  const std::vector<std::string> args(argv, argv + argc);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "INI run configuration (defaults when absent)");
    sub->add_option("--seed", common.seed, "Run seed");
    sub->add_option("--out", common.out, "Output root (else $HARVEST_OUT, else [run] output_dir)");
    sub->add_option("--algo", common.algo, "mosac-att or mosac-ftv")
        ->check(CLI::IsMember({"mosac-att", "mosac-ftv"}));
  };

  auto* show = app.add_subcommand("config", "Print the effective configuration as INI");
  add_common(show);
  auto* params = app.add_subcommand("params", "Print trainable-parameter counts");
  add_common(params);

  auto* gen = app.add_subcommand("gen", "Generate the map, validation set and K-device test sets");
  add_common(gen);
  gen->add_option("--scenarios", common.scenarios, "Scenarios per set (default [eval] scenarios)");

  auto* train = app.add_subcommand("train", "Train MOSAC-ATT or MOSAC-FTV");
  add_common(train);
  train->add_option("--steps", common.steps, "Environment steps (overrides [train] steps)");
  bool quiet = false;
  train->add_flag("--quiet", quiet, "No progress lines on stderr");

  auto* evaluate = app.add_subcommand("eval", "Evaluate a checkpoint or baseline over W_test");
  add_common(evaluate);
  cli::EvalRequest request;
  std::optional<std::string> checkpoint, scenario_dir;
  auto* checkpoint_opt = evaluate->add_option("--checkpoint", checkpoint, "Checkpoint JSON written by train");
  evaluate->add_option("--baseline", request.baseline, "greedy or random")
      ->check(CLI::IsMember({"greedy", "random"}))
      ->excludes(checkpoint_opt);
  evaluate->add_option("--set", scenario_dir, "Directory of scenario_*.json (default: validation set)");
  evaluate->add_option("--scenarios", common.scenarios, "Number of scenarios (default [eval] scenarios)");
  evaluate->add_flag("--fading", request.fading, "Also run the Rayleigh-fading robustness protocol");
  evaluate->add_flag("--stochastic", request.stochastic, "Sample actions instead of argmax");

  auto* plot = app.add_subcommand("plot", "Render SVG figures from eval and train outputs");
  add_common(plot);
  std::vector<std::string> plot_inputs;
  plot->add_option("inputs", plot_inputs, "Eval/train directories or summary.json, metrics.csv, *.csv files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    const config::RunConfig cfg = resolve(common);
    const fs::path root = cfg.output_dir;
    cli::Manifest manifest;
    manifest.argv = args;
    manifest.config_ini = config::to_ini(cfg);
    if (common.config_path) manifest.inputs.push_back(*common.config_path);

    if (show->parsed()) {
      std::cout << config::to_ini(cfg);
      return 0;
    }
    if (params->parsed()) {
      print_counts(cfg);
      return 0;
    }
    if (gen->parsed()) {
      const fs::path out = root / "scenarios";
      manifest.command = "gen";
      manifest.outputs = cli::cmd_gen(cfg, out, common.scenarios);
      cli::write_manifest(manifest, out);
      std::cout << "wrote " << manifest.outputs.size() << " files under " << out.string() << '\n';
      return 0;
    }
    if (train->parsed()) {
      const fs::path out = root / "train" / (std::string(config::algorithm_name(cfg.algo)) + "_seed" +
                                             std::to_string(cfg.seed));
      print_counts(cfg);
      manifest.command = "train";
      try {
        const cli::TrainRun run = cli::cmd_train(cfg, out, !quiet);
        manifest.outputs = run.result.checkpoints;
        if (fs::exists(out / "metrics.csv")) manifest.outputs.push_back(out / "metrics.csv");
        cli::write_manifest(manifest, out);
        std::cout << "steps " << run.result.steps << " episodes " << run.result.episodes << " updates "
                  << run.result.updates << '\n'
                  << "output " << out.string() << '\n';
      } catch (const mosac::NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << " (diagnostics in " << (out / "nan_dump.json").string()
                  << ")\n";
        return kExitNumerical;
      }
      return 0;
    }
    if (evaluate->parsed()) {
      if (checkpoint) request.checkpoint = fs::path(*checkpoint);
      if (scenario_dir) request.scenario_dir = fs::path(*scenario_dir);
      request.scenarios = common.scenarios;
      const std::string name = checkpoint ? fs::path(*checkpoint).parent_path().parent_path().filename().string() +
                                                "_" + fs::path(*checkpoint).stem().string()
                                          : request.baseline;
      const fs::path out = root / "eval" / (name.empty() ? std::string("policy") : name);
      manifest.command = "eval";
      if (request.checkpoint) manifest.inputs.push_back(*request.checkpoint);
      const cli::EvalRun run = cli::cmd_eval(cfg, request, out);
      manifest.outputs = run.outputs;
      cli::write_manifest(manifest, out);
      std::cout << "hv " << run.result.hv << '\n'
                << "mean_scenario_hv " << run.result.mean_scenario_hv << '\n'
                << "average_utility " << run.result.average_utility << '\n'
                << "collected_pct_w10 " << run.result.mean_collected_pct.back() << '\n'
                << "energy_w01 " << run.result.mean_energy.front() << '\n'
                << "output " << out.string() << '\n';
      return 0;
    }
    if (plot->parsed()) {
      std::vector<fs::path> inputs(plot_inputs.begin(), plot_inputs.end());
      const fs::path out = root / "plots";
      manifest.command = "plot";
      manifest.outputs = cli::cmd_plot(inputs, out);
      cli::write_manifest(manifest, out);
      for (const auto& p : manifest.outputs) std::cout << p.string() << '\n';
      return 0;
    }
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kExitConfig;
  } catch (const mosac::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
