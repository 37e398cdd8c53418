#pragma once

// Multi-objective MDP over the world and channel: episode stepping with vector
// rewards, the three state representations (feature vector, centred spatial
// maps, token set), preferences, scalarisation and Pareto order.

#include <array>
#include <memory>
#include <optional>
#include <stdexcept>
#include <span>
#include <vector>

#include "harvest/channel.hpp"
#include "harvest/world.hpp"

namespace harvest::momdp {

inline constexpr int kObjectives = 2;  // (data collected, -energy)
using Vec2 = std::array<double, kObjectives>;

/// Non-negative weights summing to one, ordered (data, energy).
class PreferenceVector {
 public:
  PreferenceVector() = default;
  /// Throws std::invalid_argument unless both weights are >= 0 and sum to 1.
  PreferenceVector(double data, double energy);
  double data() const { return w_[0]; }
  double energy() const { return w_[1]; }
  const Vec2& values() const { return w_; }
  double operator[](std::size_t i) const { return w_[i]; }
  friend bool operator==(const PreferenceVector&, const PreferenceVector&) = default;

 private:
  Vec2 w_{0.5, 0.5};
};

double scalarize(const Vec2& v, const PreferenceVector& w);
double scalarize(std::span<const double> v, std::span<const double> w);
/// (forall m: a_m >= b_m) and (exists m: a_m > b_m)
bool pareto_dominates(std::span<const double> a, std::span<const double> b);

struct EnvState {
  std::shared_ptr<const world::Scenario> scenario;
  world::UavState uav;
  std::vector<world::Device> devices;
  channel::LinkState link;
  int t = 0;
  bool done = false;
  bool truncated = false;
  double total_initial_data = 0.0;
  double collected = 0.0;
  double energy = 0.0;

  const world::CityMap& map() const { return scenario->map; }
  world::ActionMask legal() const { return world::legal_actions(uav, scenario->map); }
  /// Failsafe step cap of 2B (B in battery units).
  int horizon() const { return scenario->initial_battery.halves(); }
};

struct StepResult {
  Vec2 reward{0.0, 0.0};  // (data units collected, -energy)
  bool done = false;
  std::optional<std::size_t> scheduled;
};

class MaskedActionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Puts the UAV on the start zone with a full battery and every device full.
/// The channel stream is seeded from `channel_seed`, so equal seeds replay.
EnvState reset(std::shared_ptr<const world::Scenario> scenario, const channel::ChannelParams& params,
               std::uint64_t channel_seed);

/// Applies the action, refreshes the links (shadowing resampled on moves),
/// schedules one device and collects. The episode ends when a move enters the
/// terminal zone.
StepResult step(EnvState& env, world::Action a);

/// Reward rescaled for learning: data as percent of the scenario's initial data.
Vec2 percent_reward(const Vec2& r, double total_initial_data);

// ---------------------------------------------------------------------------
// State representations

struct FeatureScale {
  /// Upper bound of the initial data range; data features are divided by it.
  double data_max = 8000.0;
  double snr_log_min = -1.0;
  double snr_log_max = 8.0;
};

/// log10(snr) clipped to [snr_log_min, snr_log_max], divided by snr_log_max.
double snr_feature(double snr_linear, const FeatureScale& scale);

/// [s_uav, s_1, ..., s_K], length 4 + 5K. Devices in index order.
/// s_uav = (b_sc, b, x_f - x, y_f - y); s_k = (x_k - x, y_k - y, D_k, SNR_k, rho_k).
std::vector<double> ftv_state(const EnvState& env, const FeatureScale& scale);
std::vector<double> ftv_state(const EnvState& env, const FeatureScale& scale, int expected_devices);

struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;
  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Stacked map layers: heights E, zones Z (start 1, terminal -1), remaining
/// data D at device cells, and the UAV one-hot P. Rows are x, columns y.
struct SpatialState {
  Grid heights;
  Grid zones;
  Grid data;
  Grid uav;
  double pad_height = 0.0;  // value used for out-of-map heights
};

SpatialState spatial_state(const EnvState& env);
/// (2L-1) x (2W-1) maps with the UAV cell at the centre. Outside the map the
/// height layer is padded with H and the other layers with 0.
SpatialState f_center(const SpatialState& s);
/// Central l x l window (for even l the UAV sits at index l/2). Crops larger
/// than the centred map are padded like f_center.
SpatialState f_local(const SpatialState& centered, int l);
/// Non-overlapping g x g average pooling; trailing partial windows average
/// over the cells they cover.
SpatialState f_global(const SpatialState& centered, int g);

struct TokenConfig {
  int k_max = 12;
  int local_crop = 10;
  FeatureScale scale;

  int local_map_size() const { return 2 * local_crop * local_crop; }
  int tokens() const { return k_max + 3; }
};

inline constexpr int kUavFeatures = 4;
inline constexpr int kDeviceFeatures = 5;

/// Set-style state {uav, devices..., w, local map} with a device validity mask.
struct TokenState {
  std::array<double, kUavFeatures> uav{};
  std::vector<double> devices;    // k_max x 5, zero-filled for empty slots
  std::vector<std::uint8_t> mask;  // k_max, 1 for real devices
  Vec2 preference{0.0, 0.0};
  std::vector<double> local_map;  // crop of normalised heights then data
  std::vector<int> slot_device;   // source device index per slot, -1 if empty

  int active_devices() const;
};

/// Builds the token state. With more than k_max devices the k_max
/// highest-SNR ones are kept (ties by index), in device-index order.
TokenState token_state(const EnvState& env, const PreferenceVector& w, const TokenConfig& cfg);

// ---------------------------------------------------------------------------

/// Discounted and undiscounted vector returns of one episode.
struct MultiObjectiveReturn {
  Vec2 undiscounted{0.0, 0.0};
  Vec2 discounted{0.0, 0.0};
};

MultiObjectiveReturn episode_returns(std::span<const Vec2> rewards, double gamma);

}  // namespace harvest::momdp
