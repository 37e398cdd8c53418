#include "harvest/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <numeric>

#include "harvest/svg.hpp"

namespace harvest::eval {

using world::Action;
using world::Cell;

std::vector<PreferenceVector> test_preferences() {
  std::vector<PreferenceVector> out;
  for (int i = 0; i <= 10; ++i) out.emplace_back(i / 10.0, 1.0 - i / 10.0);
  return out;
}

std::vector<std::size_t> pareto_front_indices(std::span<const Vec2> points) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < points.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j) {
      dominated = j != i && momdp::pareto_dominates(points[j], points[i]);
    }
    if (!dominated) keep.push_back(i);
  }
  return keep;
}

std::vector<Vec2> pareto_front(std::span<const Vec2> points) {
  std::vector<Vec2> out;
  for (std::size_t i : pareto_front_indices(points)) out.push_back(points[i]);
  return out;
}

double hypervolume(std::span<const Vec2> points, const Vec2& ref, std::vector<std::size_t>* excluded) {
  std::vector<Vec2> pts;
  pts.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i][0] > ref[0] && points[i][1] > ref[1]) {
      pts.push_back(points[i]);
    } else if (excluded) {
      excluded->push_back(i);
    }
  }
  // Sweep from the largest first objective; each point adds the strip it
  // raises above the best second objective seen so far.
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) { return a[0] != b[0] ? a[0] > b[0] : a[1] > b[1]; });
  double area = 0.0, level = ref[1];
  for (const Vec2& p : pts) {
    if (p[1] <= level) continue;
    area += (p[0] - ref[0]) * (p[1] - level);
    level = p[1];
  }
  return area;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 of the pair
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Policies

Action RandomPolicy::act(const momdp::EnvState& env, const PreferenceVector&) {
  const world::ActionMask legal = env.legal();
  std::vector<int> options;
  for (int a = 0; a < world::kNumActions; ++a)
    if (legal[a]) options.push_back(a);
  if (options.empty()) throw world::ContractViolation("no legal action");
  std::uniform_int_distribution<std::size_t> pick(0, options.size() - 1);
  return static_cast<Action>(options[pick(rng_)]);
}

void GreedyPolicy::begin_episode(const momdp::EnvState& env, const PreferenceVector& w) {
  const int k = static_cast<int>(env.devices.size());
  target_.reset();
  abandoned_.assign(env.devices.size(), false);
  budget_ = params_.preference_scaled ? static_cast<int>(std::lround(w.data() * k)) : k;
  visited_ = 0;
  last_remaining_ = -1.0;
}

std::optional<std::size_t> GreedyPolicy::pick_device(const momdp::EnvState& env) const {
  if (visited_ >= budget_) return std::nullopt;
  const world::CityMap& map = env.map();
  const Cell p = env.uav.position;
  const bool rd = env.scenario->kind == world::ScenarioKind::ReachDestination;
  const int margin = static_cast<int>(std::ceil(2.0 * params_.slack_margin - 1e-9));
  std::optional<std::size_t> best;
  int best_dist = 0;
  for (std::size_t k = 0; k < env.devices.size(); ++k) {
    const world::Device& d = env.devices[k];
    if (abandoned_[k] || d.remaining_data <= params_.data_epsilon) continue;
    if (rd && d.position == map.terminal()) continue;  // arriving there ends the mission
    const int dist = world::manhattan(p, d.position);
    const int need = 2 * dist + world::reserve_halves(d.position, map) + margin;
    if (need > env.uav.battery.halves()) continue;
    if (!best || dist < best_dist) {
      best = k;
      best_dist = dist;
    }
  }
  return best;
}

Action GreedyPolicy::toward(const momdp::EnvState& env, Cell goal) const {
  const world::ActionMask legal = env.legal();
  const Cell p = env.uav.position;
  std::vector<Action> options;
  if (goal.x > p.x) options.push_back(Action::East);
  if (goal.x < p.x) options.push_back(Action::West);
  if (goal.y > p.y) options.push_back(Action::North);
  if (goal.y < p.y) options.push_back(Action::South);
  for (Action a : options)
    if (legal[static_cast<int>(a)]) return a;
  for (Action a : world::kAllActions)
    if (legal[static_cast<int>(a)]) return a;
  throw world::ContractViolation("no legal action");
}

Action GreedyPolicy::act(const momdp::EnvState& env, const PreferenceVector&) {
  const world::ActionMask legal = env.legal();
  const Cell p = env.uav.position;
  for (int guard = 0; guard <= static_cast<int>(env.devices.size()); ++guard) {
    if (!target_) {
      target_ = pick_device(env);
      if (!target_) break;
      ++visited_;
      last_remaining_ = -1.0;
    }
    const world::Device& d = env.devices[*target_];
    if (d.remaining_data <= params_.data_epsilon) {
      target_.reset();
      continue;
    }
    if (p == d.position) {
      const bool stalled = last_remaining_ >= 0.0 && d.remaining_data >= last_remaining_;
      if (legal[static_cast<int>(Action::Hover)] && !stalled) {
        last_remaining_ = d.remaining_data;
        return Action::Hover;
      }
      abandoned_[*target_] = true;
      target_.reset();
      continue;
    }
    const Action a = toward(env, d.position);
    const Cell step = world::displacement(a);
    const Cell next{p.x + step.x, p.y + step.y};
    if (world::manhattan(next, d.position) < world::manhattan(p, d.position) &&
        !(next == env.map().terminal() && env.scenario->kind == world::ScenarioKind::ReachDestination)) {
      return a;
    }
    abandoned_[*target_] = true;
    target_.reset();
  }
  // Home: in a return-base mission still on the base, step out first.
  const Cell f = env.map().terminal();
  if (p == f) {
    for (Action a : {Action::North, Action::West, Action::South, Action::East})
      if (legal[static_cast<int>(a)]) return a;
  }
  return toward(env, f);
}

AgentPolicy::AgentPolicy(const mosac::Agent& agent, bool stochastic, std::uint64_t seed, bool record_attention)
    : agent_(agent), stochastic_(stochastic), rng_(seed), record_(record_attention) {}

void AgentPolicy::begin_episode(const momdp::EnvState&, const PreferenceVector&) {
  traces_.clear();
  states_.clear();
}

Action AgentPolicy::act(const momdp::EnvState& env, const PreferenceVector& w) {
  const world::ActionMask legal = env.legal();
  const momdp::TokenState ts = momdp::token_state(env, w, agent_.token_config());
  const momdp::TokenState* one = &ts;
  const auto batch = nets::TokenBatch::from_states(std::span<const momdp::TokenState* const>(&one, 1));
  nets::AttentionTrace trace;
  const ad::Matrix logits = agent_.actor().infer(batch, record_ ? &trace : nullptr);
  if (record_) {
    traces_.push_back(std::move(trace));
    states_.push_back(ts);
  }
  const mosac::ActionProbs p =
      mosac::heated_softmax(std::span<const double>(logits.data(), mosac::kActions), 1.0, legal);
  if (stochastic_) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double x = u(rng_);
    double acc = 0.0;
    int last = -1;
    for (int a = 0; a < mosac::kActions; ++a) {
      if (!legal[a]) continue;
      last = a;
      acc += p[a];
      if (x < acc) return static_cast<Action>(a);
    }
    return static_cast<Action>(last);
  }
  int best = -1;
  for (int a = 0; a < mosac::kActions; ++a)
    if (legal[a] && (best < 0 || p[a] > p[best])) best = a;
  return static_cast<Action>(best);
}

// ---------------------------------------------------------------------------
// Episodes

Episode run_episode(std::shared_ptr<const world::Scenario> scenario, const channel::ChannelParams& channel,
                    std::uint64_t channel_seed, Policy& policy, const PreferenceVector& w) {
  momdp::EnvState env = momdp::reset(std::move(scenario), channel, channel_seed);
  policy.begin_episode(env, w);
  Episode ep;
  ep.initial_data = env.total_initial_data;
  ep.path.push_back(env.uav.position);
  while (!env.done) {
    const Action a = policy.act(env, w);
    const momdp::StepResult r = momdp::step(env, a);
    ep.actions.push_back(a);
    ep.rewards.push_back(r.reward);
    ep.scheduled.push_back(r.scheduled);
    ep.path.push_back(env.uav.position);
  }
  ep.collected = env.collected;
  ep.energy = env.energy;
  ep.collected_pct = ep.initial_data > 0.0 ? 100.0 * ep.collected / ep.initial_data : 0.0;
  ep.remaining_data = 0.0;
  for (const auto& d : env.devices) ep.remaining_data += d.remaining_data;
  ep.final_battery = env.uav.battery;
  ep.reached_terminal = env.uav.position == env.map().terminal() && !env.truncated;
  ep.truncated = env.truncated;
  return ep;
}

double average_utility(std::span<const ReturnRow> rows) {
  if (rows.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& r : rows) acc += momdp::scalarize(r.objective(), r.w);
  return acc / static_cast<double>(rows.size());
}

namespace {

std::vector<ReturnRow> evaluate_scenario(const PolicyFactory& policies, const std::shared_ptr<const world::Scenario>& s,
                                         std::size_t index, const EvalOptions& opts) {
  auto policy = policies(index);
  std::vector<ReturnRow> rows;
  const std::uint64_t channel_seed = derive_seed(opts.seed, index);
  for (const auto& w : opts.preferences) {
    const Episode ep = run_episode(s, opts.channel, channel_seed, *policy, w);
    rows.push_back(ReturnRow{index, w, ep.collected_pct, ep.collected, ep.energy});
  }
  return rows;
}

template <class Fn>
void for_each_index(std::size_t count, int threads, Fn fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), count);
  std::vector<std::future<void>> jobs;
  for (std::size_t t = 0; t < workers; ++t) {
    jobs.push_back(std::async(std::launch::async, [&, t] {
      for (std::size_t i = t; i < count; i += workers) fn(i);
    }));
  }
  for (auto& j : jobs) j.get();
}

}  // namespace

EvalResult evaluate(const PolicyFactory& policies, std::span<const std::shared_ptr<const world::Scenario>> scenarios,
                    const EvalOptions& opts) {
  const std::size_t n = scenarios.size(), np = opts.preferences.size();
  std::vector<std::vector<ReturnRow>> per(n);
  for_each_index(n, opts.threads, [&](std::size_t i) { per[i] = evaluate_scenario(policies, scenarios[i], i, opts); });

  EvalResult out;
  out.mean_points.assign(np, Vec2{0.0, 0.0});
  out.mean_collected_pct.assign(np, 0.0);
  out.mean_energy.assign(np, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Vec2> pts;
    for (std::size_t j = 0; j < np; ++j) {
      const ReturnRow& r = per[i][j];
      pts.push_back(r.objective());
      out.mean_collected_pct[j] += r.collected_pct / static_cast<double>(n);
      out.mean_energy[j] += r.energy / static_cast<double>(n);
      out.rows.push_back(r);
    }
    out.scenario_hv.push_back(hypervolume(pts, opts.reference));
    out.scenario_utility.push_back(average_utility(per[i]));
  }
  for (std::size_t j = 0; j < np; ++j) out.mean_points[j] = {out.mean_collected_pct[j], -out.mean_energy[j]};
  if (n > 0) {
    out.hv = hypervolume(out.mean_points, opts.reference);
    out.mean_scenario_hv = std::accumulate(out.scenario_hv.begin(), out.scenario_hv.end(), 0.0) / n;
    out.average_utility = std::accumulate(out.scenario_utility.begin(), out.scenario_utility.end(), 0.0) / n;
  }
  return out;
}

RobustnessStats fading_robustness(const PolicyFactory& policies,
                                  std::span<const std::shared_ptr<const world::Scenario>> scenarios,
                                  const PreferenceVector& w, channel::ChannelParams channel, int repeats,
                                  std::uint64_t seed) {
  if (repeats < 1) throw std::invalid_argument("fading_robustness: repeats must be >= 1");
  auto run = [&](bool fading, double& mean, double& sd) {
    channel.fading_enabled = fading;
    std::vector<double> per_repeat;
    for (int r = 0; r < repeats; ++r) {
      double acc = 0.0;
      for (std::size_t s = 0; s < scenarios.size(); ++s) {
        auto policy = policies(s);
        const auto ep = run_episode(scenarios[s], channel, derive_seed(seed, r * scenarios.size() + s), *policy, w);
        acc += ep.collected_pct;
      }
      per_repeat.push_back(scenarios.empty() ? 0.0 : acc / static_cast<double>(scenarios.size()));
    }
    mean = std::accumulate(per_repeat.begin(), per_repeat.end(), 0.0) / repeats;
    double ss = 0.0;
    for (double v : per_repeat) ss += (v - mean) * (v - mean);
    sd = repeats > 1 ? std::sqrt(ss / (repeats - 1)) : 0.0;
  };
  RobustnessStats out;
  run(false, out.mean_off, out.std_off);
  run(true, out.mean_on, out.std_on);
  return out;
}

// ---------------------------------------------------------------------------
// Attention

namespace {

ad::Matrix head_average(const nets::AttentionTrace& trace, std::size_t layer) {
  const auto& heads = trace.probs.at(layer);
  ad::Matrix avg = heads.front();
  for (std::size_t h = 1; h < heads.size(); ++h) avg += heads[h];
  return avg / static_cast<double>(heads.size());
}

}  // namespace

AttentionSums attention_column_sums(const nets::AttentionTrace& trace, const momdp::TokenState& state) {
  if (trace.probs.empty()) throw std::invalid_argument("attention trace is empty");
  const ad::Matrix p = head_average(trace, trace.probs.size() - 1);
  const int k = static_cast<int>(state.mask.size());
  const int tokens = k + 3;
  if (p.rows() < tokens || p.cols() != tokens) throw ad::DimensionError("attention trace does not match the state");
  AttentionSums out;
  for (int r = 0; r < tokens; ++r) {
    if (r >= 1 && r <= k && !state.mask[r - 1]) continue;
    out.uav += p(r, 0);
    for (int j = 0; j < k; ++j) out.devices += p(r, 1 + j);
    out.preference += p(r, k + 1);
    out.map += p(r, k + 2);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exports

void export_trajectory(const Episode& ep, const std::filesystem::path& csv) {
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  out << "step,x,y,reward_data,reward_energy,scheduled\n";
  for (std::size_t t = 0; t < ep.path.size(); ++t) {
    out << t << ',' << ep.path[t].x << ',' << ep.path[t].y << ',';
    if (t == 0) {
      out << ",,\n";
      continue;
    }
    out << ep.rewards[t - 1][0] << ',' << ep.rewards[t - 1][1] << ',';
    if (ep.scheduled[t - 1]) out << *ep.scheduled[t - 1];
    out << '\n';
  }
}

void export_attention(std::span<const nets::AttentionTrace> traces, std::span<const momdp::TokenState> states,
                      const std::filesystem::path& csv, const std::filesystem::path& svg_path) {
  if (traces.empty()) throw std::invalid_argument("export_attention: no attention traces");
  if (traces.size() != states.size()) throw std::invalid_argument("export_attention: traces and states differ in count");
  const int k = static_cast<int>(states.front().mask.size());
  const auto labels = nets::token_labels(k);
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  out << std::setprecision(10) << "step,layer,head,query";
  for (const auto& l : labels) out << ',' << l;
  out << '\n';
  for (std::size_t t = 0; t < traces.size(); ++t) {
    for (std::size_t l = 0; l < traces[t].probs.size(); ++l) {
      for (std::size_t h = 0; h < traces[t].probs[l].size(); ++h) {
        const ad::Matrix& p = traces[t].probs[l][h];
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
          out << t << ',' << l << ',' << h << ',' << labels[r];
          for (Eigen::Index c = 0; c < p.cols(); ++c) out << ',' << p(r, c);
          out << '\n';
        }
      }
    }
  }
  const ad::Matrix avg = head_average(traces.front(), traces.front().probs.size() - 1);
  svg::write_file(svg_path, svg::heatmap("Last-layer attention (head average), first state", avg, labels, labels));
}

void export_trajectory_svg(const world::Scenario& scenario, const Episode& ep, const std::filesystem::path& path) {
  svg::write_file(path, svg::map_overlay(scenario, ep.path));
}

void write_table_csv(const EvalResult& result, const std::filesystem::path& csv) {
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  out << std::setprecision(10) << "scenario,w_data,w_energy,collected_pct,collected,energy\n";
  for (const auto& r : result.rows) {
    out << r.scenario << ',' << r.w.data() << ',' << r.w.energy() << ',' << r.collected_pct << ',' << r.collected
        << ',' << r.energy << '\n';
  }
}

}  // namespace harvest::eval
