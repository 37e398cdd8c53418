#pragma once

// Multi-objective evaluation: preference sweeps, Pareto filtering, 2-D
// hypervolume, average utility, the nearest-device GREEDY baseline, fading
// robustness, and trajectory / attention exports.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "harvest/momdp.hpp"
#include "harvest/mosac.hpp"
#include "harvest/nets.hpp"

namespace harvest::eval {

using momdp::PreferenceVector;
using momdp::Vec2;

inline constexpr Vec2 kDefaultReference{-1.0, -200.0};

/// {(i/10, 1 - i/10) | i = 0..10}
std::vector<PreferenceVector> test_preferences();

/// Indices of points no other point dominates, in input order.
std::vector<std::size_t> pareto_front_indices(std::span<const Vec2> points);
std::vector<Vec2> pareto_front(std::span<const Vec2> points);

/// Area dominated by the points and bounded below by `ref` (maximisation).
/// Points that do not strictly dominate ref are skipped and their indices
/// reported through `excluded`.
double hypervolume(std::span<const Vec2> points, const Vec2& ref = kDefaultReference,
                   std::vector<std::size_t>* excluded = nullptr);

// ---------------------------------------------------------------------------
// Policies

class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::string name() const = 0;
  virtual void begin_episode(const momdp::EnvState& env, const PreferenceVector& w) {
    (void)env;
    (void)w;
  }
  virtual world::Action act(const momdp::EnvState& env, const PreferenceVector& w) = 0;
};

/// Uniform over legal actions.
class RandomPolicy final : public Policy {
 public:
  explicit RandomPolicy(std::uint64_t seed) : rng_(seed) {}
  std::string name() const override { return "random"; }
  world::Action act(const momdp::EnvState& env, const PreferenceVector& w) override;

 private:
  std::mt19937_64 rng_;
};

struct GreedyParams {
  /// Extra battery (units) the round trip must leave over.
  double slack_margin = 0.0;
  /// A device counts as drained below this much remaining data.
  double data_epsilon = 1.0;
  /// Scale the number of devices visited with w_data: round(w_data * K).
  bool preference_scaled = true;
};

/// Flies to the nearest battery-feasible device with data left (ties by index),
/// hovers until it is drained or feasibility breaks, repeats, then heads home.
class GreedyPolicy final : public Policy {
 public:
  explicit GreedyPolicy(GreedyParams params = {}) : params_(params) {}
  std::string name() const override { return "greedy"; }
  void begin_episode(const momdp::EnvState& env, const PreferenceVector& w) override;
  world::Action act(const momdp::EnvState& env, const PreferenceVector& w) override;

 private:
  std::optional<std::size_t> pick_device(const momdp::EnvState& env) const;
  world::Action toward(const momdp::EnvState& env, world::Cell goal) const;

  GreedyParams params_;
  std::optional<std::size_t> target_;
  std::vector<bool> abandoned_;
  int budget_ = 0;
  int visited_ = 0;
  double last_remaining_ = -1.0;
};

/// Acts with the trained actor: argmax (default) or sampling at temperature 1.
class AgentPolicy final : public Policy {
 public:
  AgentPolicy(const mosac::Agent& agent, bool stochastic = false, std::uint64_t seed = 0,
              bool record_attention = false);
  std::string name() const override { return stochastic_ ? "mosac-stochastic" : "mosac"; }
  world::Action act(const momdp::EnvState& env, const PreferenceVector& w) override;
  void begin_episode(const momdp::EnvState& env, const PreferenceVector& w) override;

  /// Traces of the current episode, one per act() call.
  const std::vector<nets::AttentionTrace>& traces() const { return traces_; }
  const std::vector<momdp::TokenState>& token_states() const { return states_; }

 private:
  const mosac::Agent& agent_;
  bool stochastic_;
  std::mt19937_64 rng_;
  bool record_;
  std::vector<nets::AttentionTrace> traces_;
  std::vector<momdp::TokenState> states_;
};

// ---------------------------------------------------------------------------
// Episodes and tables

struct Episode {
  std::vector<world::Cell> path;  // steps + 1 cells
  std::vector<Vec2> rewards;
  std::vector<world::Action> actions;
  std::vector<std::optional<std::size_t>> scheduled;
  double collected = 0.0;
  double energy = 0.0;
  double collected_pct = 0.0;
  double initial_data = 0.0;
  double remaining_data = 0.0;
  world::Battery final_battery;
  bool reached_terminal = false;
  bool truncated = false;
};

Episode run_episode(std::shared_ptr<const world::Scenario> scenario, const channel::ChannelParams& channel,
                    std::uint64_t channel_seed, Policy& policy, const PreferenceVector& w);

struct ReturnRow {
  std::size_t scenario = 0;
  PreferenceVector w;
  double collected_pct = 0.0;
  double collected = 0.0;
  double energy = 0.0;  // positive battery units consumed

  Vec2 objective() const { return {collected_pct, -energy}; }
};

struct EvalResult {
  std::vector<ReturnRow> rows;
  std::vector<double> scenario_hv;
  std::vector<double> scenario_utility;
  /// Per preference, (collected%, -energy) averaged over scenarios.
  std::vector<Vec2> mean_points;
  /// Hypervolume of mean_points.
  double hv = 0.0;
  /// Mean of the per-scenario hypervolumes.
  double mean_scenario_hv = 0.0;
  double average_utility = 0.0;
  /// Mean collected% and energy per preference.
  std::vector<double> mean_collected_pct;
  std::vector<double> mean_energy;
};

/// Builds the policy used for one scenario index; policies must not share
/// mutable state.
using PolicyFactory = std::function<std::unique_ptr<Policy>(std::size_t scenario)>;

struct EvalOptions {
  channel::ChannelParams channel;
  std::vector<PreferenceVector> preferences = test_preferences();
  std::uint64_t seed = 0;
  Vec2 reference = kDefaultReference;
  /// Worker threads; results are identical for any value.
  int threads = 1;
};

/// Runs every (scenario, preference) pair. Scenario s uses channel seed
/// derived from (seed, s) for every preference.
EvalResult evaluate(const PolicyFactory& policies, std::span<const std::shared_ptr<const world::Scenario>> scenarios,
                    const EvalOptions& opts);

/// (1 / |W|) sum_w w^T J_w over the rows of one scenario (J = (collected%, -energy)).
double average_utility(std::span<const ReturnRow> rows);

struct RobustnessStats {
  double mean_off = 0.0;
  double std_off = 0.0;
  double mean_on = 0.0;
  double std_on = 0.0;
};

/// Mean and sample standard deviation over `repeats` runs of the scenario-mean
/// collected%, with Rayleigh fading off and on. Repeat r draws fresh channel seeds.
RobustnessStats fading_robustness(const PolicyFactory& policies,
                                  std::span<const std::shared_ptr<const world::Scenario>> scenarios,
                                  const PreferenceVector& w, channel::ChannelParams channel, int repeats,
                                  std::uint64_t seed);

// ---------------------------------------------------------------------------
// Attention analysis

struct AttentionSums {
  double preference = 0.0;
  double devices = 0.0;
  double uav = 0.0;
  double map = 0.0;
};

/// Column sums of the last layer's head-averaged attention over unmasked
/// query rows of one state.
AttentionSums attention_column_sums(const nets::AttentionTrace& trace, const momdp::TokenState& state);

// ---------------------------------------------------------------------------
// Exports

/// CSV: step,x,y,reward_data,reward_energy,scheduled (one row per visited cell).
void export_trajectory(const Episode& ep, const std::filesystem::path& csv);
/// CSV of every layer/head matrix plus an SVG heatmap of the last layer's
/// head-averaged attention for step 0.
void export_attention(std::span<const nets::AttentionTrace> traces, std::span<const momdp::TokenState> states,
                      const std::filesystem::path& csv, const std::filesystem::path& svg);
/// SVG of the height map with devices, zones and the flown path.
void export_trajectory_svg(const world::Scenario& scenario, const Episode& ep, const std::filesystem::path& svg);

/// Deterministic per-index seed derivation.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

void write_table_csv(const EvalResult& result, const std::filesystem::path& csv);

}  // namespace harvest::eval
