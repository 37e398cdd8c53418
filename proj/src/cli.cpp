#include "harvest/cli.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "harvest/svg.hpp"

namespace harvest::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string pref_tag(const momdp::PreferenceVector& w) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << w.data();
  return os.str();
}

std::string header_for(const config::RunConfig& cfg) {
  json h;
  h["config"] = config::to_ini(cfg);
  h["algo"] = config::algorithm_name(cfg.algo);
  h["seed"] = cfg.seed;
  h["version"] = kVersion;
  return h.dump();
}

/// CSV with a header row; values parsed as doubles.
struct Csv {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    return it == columns.end() ? -1 : static_cast<int>(it - columns.begin());
  }
};

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

Csv read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Csv csv;
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument(path.string() + " is empty");
  csv.columns = split(line, ',');
  while (std::getline(in, line))
    if (!line.empty()) csv.rows.push_back(split(line, ','));
  return csv;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

}  // namespace

int test_set_battery(const config::RunConfig& cfg, int devices) {
  if (devices == 10) return static_cast<int>(std::lround(cfg.world.battery * 100.0 / 80.0));
  return cfg.world.battery;
}

ScenarioSet scenario_set(const config::RunConfig& cfg, const world::CityMap& map, int count, int devices, int battery,
                         std::uint64_t tag) {
  ScenarioSet out;
  out.reserve(count);
  const std::uint64_t base = eval::derive_seed(cfg.eval.seed, tag);
  for (int i = 0; i < count; ++i) {
    out.push_back(std::make_shared<const world::Scenario>(
        config::make_scenario(cfg, map, eval::derive_seed(base, static_cast<std::uint64_t>(i)), devices, battery)));
  }
  return out;
}

mosac::ScenarioFactory training_factory(const config::RunConfig& cfg, std::shared_ptr<const world::CityMap> map) {
  return [cfg, map](std::mt19937_64& rng) {
    return std::make_shared<const world::Scenario>(config::make_scenario(cfg, *map, rng()));
  };
}

eval::PolicyFactory greedy_factory(const config::RunConfig& cfg) {
  eval::GreedyParams params;
  params.slack_margin = cfg.eval.greedy_slack;
  params.data_epsilon = cfg.eval.greedy_data_epsilon;
  params.preference_scaled = cfg.eval.greedy_preference_scaled;
  return [params](std::size_t) { return std::make_unique<eval::GreedyPolicy>(params); };
}

eval::PolicyFactory random_factory(std::uint64_t seed) {
  return [seed](std::size_t s) { return std::make_unique<eval::RandomPolicy>(eval::derive_seed(seed, s)); };
}

eval::PolicyFactory agent_factory(const mosac::Agent& agent) {
  return [&agent](std::size_t) { return std::make_unique<eval::AgentPolicy>(agent); };
}

mosac::Evaluator make_evaluator(const config::RunConfig& cfg, ScenarioSet scenarios) {
  return [cfg, scenarios = std::move(scenarios)](const mosac::Agent& agent, long) {
    eval::EvalOptions opts;
    opts.channel = cfg.channel;
    opts.seed = cfg.eval.seed;
    opts.reference = cfg.eval.reference;
    opts.threads = cfg.eval.threads;
    const eval::EvalResult r = eval::evaluate(agent_factory(agent), scenarios, opts);
    const std::size_t last = opts.preferences.size() - 1;  // w = (1, 0)
    return mosac::Metrics{{"hv", r.hv},
                          {"mean_scenario_hv", r.mean_scenario_hv},
                          {"utility", r.average_utility},
                          {"collected_pct_w10", r.mean_collected_pct[last]},
                          {"energy_w01", r.mean_energy[0]}};
  };
}

std::unique_ptr<mosac::Agent> load_agent(const fs::path& checkpoint) {
  json root;
  try {
    root = json::parse(read_text(checkpoint));
  } catch (const json::parse_error& e) {
    throw std::runtime_error("checkpoint " + checkpoint.string() + " is not valid JSON: " + e.what());
  }
  if (!root.contains("header") || !root["header"].contains("config")) {
    throw config::ConfigError("checkpoint " + checkpoint.string() + " carries no run configuration");
  }
  const config::RunConfig stored = config::parse_config(root["header"]["config"].get<std::string>());
  auto agent = std::make_unique<mosac::Agent>(stored.network_spec(), stored.train, stored.seed);
  agent->load(checkpoint);
  return agent;
}

std::string file_hash(const fs::path& path) {
  const std::string bytes = read_text(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_manifest(const Manifest& m, const fs::path& dir) {
  json j;
  j["command"] = m.command;
  j["argv"] = m.argv;
  j["version"] = kVersion;
  j["compiler"] = __VERSION__;
  j["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  j["config_hash"] = [&] {
    const fs::path tmp = dir / "config.ini";
    write_text(tmp, m.config_ini);
    return file_hash(tmp);
  }();
  auto listing = [](const std::vector<fs::path>& files) {
    json arr = json::array();
    for (const auto& f : files) arr.push_back({{"path", f.string()}, {"fnv1a64", file_hash(f)}});
    return arr;
  };
  j["inputs"] = listing(m.inputs);
  j["outputs"] = listing(m.outputs);
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

std::vector<fs::path> cmd_gen(const config::RunConfig& cfg, const fs::path& out, int scenarios) {
  const int count = scenarios > 0 ? scenarios : cfg.eval.scenarios;
  std::vector<fs::path> files;
  const world::CityMap map = config::make_map(cfg);
  {
    world::Scenario empty;
    empty.map = map;
    empty.initial_battery = world::Battery::from_units(cfg.world.battery);
    empty.altitude = cfg.world.altitude;
    empty.kind = cfg.world.kind;
    empty.seed = cfg.world.map_seed;
    files.push_back(out / "map.json");
    world::save_scenario(empty, files.back());
  }
  auto dump = [&](const ScenarioSet& set, const fs::path& dir) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      std::ostringstream name;
      name << "scenario_" << std::setw(3) << std::setfill('0') << i << ".json";
      files.push_back(dir / name.str());
      world::save_scenario(*set[i], files.back());
    }
  };
  dump(scenario_set(cfg, map, count, cfg.world.devices.count, cfg.world.battery, 0), out / "validation");
  for (int k : kTestDeviceCounts) {
    dump(scenario_set(cfg, map, count, k, test_set_battery(cfg, k), static_cast<std::uint64_t>(k)),
         out / ("test_k" + std::to_string(k)));
  }
  return files;
}

TrainRun cmd_train(const config::RunConfig& cfg, const fs::path& out, bool verbose) {
  const auto map = std::make_shared<const world::CityMap>(config::make_map(cfg));
  mosac::Agent agent(cfg.network_spec(), cfg.train, cfg.seed);
  mosac::TrainOptions opts;
  opts.out_dir = out;
  opts.channel = cfg.channel;
  opts.header_json = header_for(cfg);
  opts.verbose = verbose;
  opts.evaluator = make_evaluator(
      cfg, scenario_set(cfg, *map, cfg.eval.scenarios, cfg.world.devices.count, cfg.world.battery, 0));
  TrainRun run;
  run.dir = out;
  run.result = mosac::train(agent, training_factory(cfg, map), opts, cfg.seed);
  return run;
}

EvalRun cmd_eval(const config::RunConfig& cfg, const EvalRequest& req, const fs::path& out) {
  std::unique_ptr<mosac::Agent> agent;
  eval::PolicyFactory factory;
  std::string policy_name;
  if (req.checkpoint) {
    agent = load_agent(*req.checkpoint);
    const mosac::Agent* a = agent.get();
    const bool stochastic = req.stochastic;
    const std::uint64_t seed = cfg.eval.seed;
    factory = [a, stochastic, seed](std::size_t s) {
      return std::make_unique<eval::AgentPolicy>(*a, stochastic, eval::derive_seed(seed, s));
    };
    policy_name = std::string(stochastic ? "mosac-stochastic" : "mosac") + "/" + req.checkpoint->stem().string();
  } else if (req.baseline == "greedy") {
    factory = greedy_factory(cfg);
    policy_name = "greedy";
  } else if (req.baseline == "random") {
    factory = random_factory(cfg.eval.seed);
    policy_name = "random";
  } else {
    throw config::ConfigError("eval needs --checkpoint or --baseline {greedy, random}");
  }

  ScenarioSet scenarios;
  if (req.scenario_dir) {
    std::vector<fs::path> paths;
    for (const auto& e : fs::directory_iterator(*req.scenario_dir)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("scenario_", 0) == 0 && e.path().extension() == ".json") paths.push_back(e.path());
    }
    std::sort(paths.begin(), paths.end());
    if (req.scenarios > 0 && static_cast<int>(paths.size()) > req.scenarios) paths.resize(req.scenarios);
    for (const auto& p : paths) scenarios.push_back(std::make_shared<const world::Scenario>(world::load_scenario(p)));
    if (scenarios.empty()) throw config::ConfigError("no scenario_*.json files in " + req.scenario_dir->string());
  } else {
    const world::CityMap map = config::make_map(cfg);
    scenarios = scenario_set(cfg, map, req.scenarios > 0 ? req.scenarios : cfg.eval.scenarios,
                             cfg.world.devices.count, cfg.world.battery, 0);
  }

  eval::EvalOptions opts;
  opts.channel = cfg.channel;
  opts.seed = cfg.eval.seed;
  opts.reference = cfg.eval.reference;
  opts.threads = cfg.eval.threads;
  const eval::EvalResult result = eval::evaluate(factory, scenarios, opts);

  fs::create_directories(out);
  std::vector<fs::path> outputs;
  outputs.push_back(out / "returns.csv");
  eval::write_table_csv(result, outputs.back());

  json summary;
  summary["policy"] = policy_name;
  summary["scenarios"] = scenarios.size();
  summary["hv"] = result.hv;
  summary["mean_scenario_hv"] = result.mean_scenario_hv;
  summary["average_utility"] = result.average_utility;
  summary["reference"] = {opts.reference[0], opts.reference[1]};
  summary["preferences"] = json::array();
  summary["mean_points"] = json::array();
  for (std::size_t i = 0; i < opts.preferences.size(); ++i) {
    summary["preferences"].push_back({opts.preferences[i].data(), opts.preferences[i].energy()});
    summary["mean_points"].push_back({result.mean_points[i][0], result.mean_points[i][1]});
  }
  summary["front_indices"] = eval::pareto_front_indices(result.mean_points);
  summary["mean_collected_pct"] = result.mean_collected_pct;
  summary["mean_energy"] = result.mean_energy;

  if (req.fading) {
    const momdp::PreferenceVector w(1.0, 0.0);
    const eval::RobustnessStats r =
        eval::fading_robustness(factory, scenarios, w, cfg.channel, cfg.eval.fading_repeats, cfg.eval.seed);
    summary["fading"] = {{"w", {1.0, 0.0}},         {"repeats", cfg.eval.fading_repeats},
                         {"mean_off", r.mean_off}, {"std_off", r.std_off},
                         {"mean_on", r.mean_on},   {"std_on", r.std_on}};
  }
  outputs.push_back(out / "summary.json");
  write_text(outputs.back(), summary.dump(2) + "\n");

  // Front figure: the Pareto-optimal mean points filled, dominated ones hollow.
  {
    const auto front = eval::pareto_front_indices(result.mean_points);
    const std::set<std::size_t> on_front(front.begin(), front.end());
    svg::Series filled{policy_name, {}, kPalette[0], false};
    svg::Series hollow{"", {}, kPalette[0], true};
    for (std::size_t i = 0; i < result.mean_points.size(); ++i) {
      (on_front.count(i) ? filled : hollow).points.emplace_back(result.mean_points[i][0], result.mean_points[i][1]);
    }
    outputs.push_back(out / "front.svg");
    svg::write_file(outputs.back(),
                    svg::scatter_plot({"Mean returns over W_test", "collected data (%)", "-energy (battery units)"},
                                      {filled, hollow}));
  }

  // Trajectories and attention on the first scenario.
  const auto& first = scenarios.front();
  outputs.push_back(out / "scenario.json");
  world::save_scenario(*first, outputs.back());
  const std::uint64_t channel_seed = eval::derive_seed(cfg.eval.seed, 0);
  for (const momdp::PreferenceVector w : {momdp::PreferenceVector(0.0, 1.0), momdp::PreferenceVector(0.5, 0.5),
                                          momdp::PreferenceVector(1.0, 0.0)}) {
    const std::string tag = pref_tag(w);
    const bool attention = agent && agent->spec().kind == nets::NetworkSpec::Kind::Attention;
    std::unique_ptr<eval::Policy> policy;
    eval::AgentPolicy* recorder = nullptr;
    if (attention) {
      auto p = std::make_unique<eval::AgentPolicy>(*agent, req.stochastic, eval::derive_seed(cfg.eval.seed, 0), true);
      recorder = p.get();
      policy = std::move(p);
    } else {
      policy = factory(0);
    }
    const eval::Episode ep = eval::run_episode(first, cfg.channel, channel_seed, *policy, w);
    outputs.push_back(out / ("trajectory_w" + tag + ".csv"));
    eval::export_trajectory(ep, outputs.back());
    outputs.push_back(out / ("trajectory_w" + tag + ".svg"));
    eval::export_trajectory_svg(*first, ep, outputs.back());
    if (recorder && !recorder->traces().empty()) {
      outputs.push_back(out / ("attention_w" + tag + ".csv"));
      outputs.push_back(out / ("attention_w" + tag + ".svg"));
      eval::export_attention(recorder->traces(), recorder->token_states(), outputs[outputs.size() - 2],
                             outputs.back());
    }
  }

  return {result, outputs};
}

// ---------------------------------------------------------------------------

namespace {

void collect_inputs(const fs::path& p, std::vector<fs::path>& summaries, std::vector<fs::path>& metrics,
                    std::vector<fs::path>& trajectories, std::vector<fs::path>& attention) {
  if (fs::is_directory(p)) {
    std::vector<fs::path> entries;
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) entries.push_back(e.path());
    std::sort(entries.begin(), entries.end());
    for (const auto& e : entries) collect_inputs(e, summaries, metrics, trajectories, attention);
    return;
  }
  if (!fs::exists(p)) throw std::invalid_argument("plot input " + p.string() + " does not exist");
  const std::string name = p.filename().string();
  if (name == "summary.json") summaries.push_back(p);
  else if (name == "metrics.csv") metrics.push_back(p);
  else if (name.rfind("trajectory_", 0) == 0 && p.extension() == ".csv") trajectories.push_back(p);
  else if (name.rfind("attention", 0) == 0 && p.extension() == ".csv") attention.push_back(p);
}

std::string series_label(const fs::path& file) {
  const fs::path parent = file.parent_path();
  return parent.empty() ? file.stem().string() : parent.filename().string();
}

}  // namespace

std::vector<fs::path> cmd_plot(const std::vector<fs::path>& inputs, const fs::path& out) {
  if (inputs.empty()) throw std::invalid_argument("plot: no inputs given");
  std::vector<fs::path> summaries, metrics, trajectories, attention;
  for (const auto& p : inputs) collect_inputs(p, summaries, metrics, trajectories, attention);
  if (summaries.empty() && metrics.empty() && trajectories.empty() && attention.empty()) {
    throw std::invalid_argument("plot: no summary.json, metrics.csv, trajectory_*.csv or attention*.csv found");
  }
  std::vector<fs::path> written;

  if (!summaries.empty()) {
    std::vector<svg::Series> series;
    for (std::size_t i = 0; i < summaries.size(); ++i) {
      const json s = json::parse(read_text(summaries[i]));
      std::vector<momdp::Vec2> points;
      for (const auto& p : s.at("mean_points")) points.push_back({p[0].get<double>(), p[1].get<double>()});
      const auto front = eval::pareto_front_indices(points);
      const std::set<std::size_t> on_front(front.begin(), front.end());
      const std::string color = kPalette[i % std::size(kPalette)];
      svg::Series filled{s.value("policy", series_label(summaries[i])), {}, color, false};
      svg::Series hollow{"", {}, color, true};
      for (std::size_t j = 0; j < points.size(); ++j) {
        (on_front.count(j) ? filled : hollow).points.emplace_back(points[j][0], points[j][1]);
      }
      series.push_back(std::move(filled));
      series.push_back(std::move(hollow));
    }
    written.push_back(out / "pareto_fronts.svg");
    svg::write_file(written.back(), svg::scatter_plot({"Pareto fronts (hollow: dominated)", "collected data (%)",
                                                       "-energy (battery units)"},
                                                      series));
  }

  if (!metrics.empty()) {
    std::vector<svg::Series> series;
    for (std::size_t i = 0; i < metrics.size(); ++i) {
      const Csv csv = read_csv(metrics[i]);
      const int step = csv.column("step"), hv = csv.column("hv");
      if (step < 0 || hv < 0) continue;
      svg::Series s{series_label(metrics[i]), {}, kPalette[i % std::size(kPalette)], false};
      for (const auto& row : csv.rows) s.points.emplace_back(std::stod(row[step]), std::stod(row[hv]));
      series.push_back(std::move(s));
    }
    if (!series.empty()) {
      written.push_back(out / "hypervolume.svg");
      svg::write_file(written.back(), svg::line_plot({"Hypervolume during training", "step", "hypervolume"}, series));
    }
  }

  for (const auto& t : trajectories) {
    const fs::path scenario_file = t.parent_path() / "scenario.json";
    if (!fs::exists(scenario_file)) continue;
    const world::Scenario scenario = world::load_scenario(scenario_file);
    const Csv csv = read_csv(t);
    const int x = csv.column("x"), y = csv.column("y");
    if (x < 0 || y < 0) continue;
    std::vector<world::Cell> path;
    for (const auto& row : csv.rows) path.push_back({std::stoi(row[x]), std::stoi(row[y])});
    written.push_back(out / (series_label(t) + "_" + t.stem().string() + ".svg"));
    svg::write_file(written.back(), svg::map_overlay(scenario, path));
  }

  for (const auto& a : attention) {
    const Csv csv = read_csv(a);
    const int step = csv.column("step"), layer = csv.column("layer"), query = csv.column("query");
    if (step < 0 || layer < 0 || query < 0) continue;
    const std::vector<std::string> labels(csv.columns.begin() + 4, csv.columns.end());
    int last_layer = 0;
    for (const auto& row : csv.rows)
      if (std::stoi(row[step]) == 0) last_layer = std::max(last_layer, std::stoi(row[layer]));
    ad::Matrix avg = ad::Matrix::Zero(labels.size(), labels.size());
    std::vector<int> heads(labels.size(), 0);
    for (const auto& row : csv.rows) {
      if (std::stoi(row[step]) != 0 || std::stoi(row[layer]) != last_layer) continue;
      const auto it = std::find(labels.begin(), labels.end(), row[query]);
      const auto r = static_cast<Eigen::Index>(it - labels.begin());
      for (std::size_t c = 0; c < labels.size(); ++c) avg(r, c) += std::stod(row[4 + c]);
      ++heads[r];
    }
    for (Eigen::Index r = 0; r < avg.rows(); ++r)
      if (heads[r] > 0) avg.row(r) /= heads[r];
    written.push_back(out / (series_label(a) + "_" + a.stem().string() + ".svg"));
    svg::write_file(written.back(), svg::heatmap("Last-layer attention (head average), first state", avg, labels,
                                                 labels));
  }
  if (written.empty()) throw std::invalid_argument("plot: inputs contained no plottable data");
  return written;
}

}  // namespace harvest::cli
