#include "harvest/momdp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace harvest::momdp {

using world::Action;
using world::Cell;

PreferenceVector::PreferenceVector(double data, double energy) : w_{data, energy} {
  if (!(data >= 0.0) || !(energy >= 0.0)) throw std::invalid_argument("preference weights must be non-negative");
  if (std::abs(data + energy - 1.0) > 1e-9) throw std::invalid_argument("preference weights must sum to 1");
}

double scalarize(const Vec2& v, const PreferenceVector& w) { return v[0] * w[0] + v[1] * w[1]; }

double scalarize(std::span<const double> v, std::span<const double> w) {
  if (v.size() != w.size()) throw std::invalid_argument("scalarize: dimension mismatch");
  return std::inner_product(v.begin(), v.end(), w.begin(), 0.0);
}

bool pareto_dominates(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("pareto_dominates: dimension mismatch");
  bool strict = false;
  for (std::size_t m = 0; m < a.size(); ++m) {
    if (a[m] < b[m]) return false;
    if (a[m] > b[m]) strict = true;
  }
  return strict;
}

EnvState reset(std::shared_ptr<const world::Scenario> scenario, const channel::ChannelParams& params,
               std::uint64_t channel_seed) {
  if (!scenario) throw std::invalid_argument("reset: null scenario");
  EnvState env;
  env.uav.position = scenario->map.start();
  env.uav.altitude = scenario->altitude;
  env.uav.battery = scenario->initial_battery;
  env.devices = scenario->devices;
  for (auto& d : env.devices) {
    d.remaining_data = d.initial_data;
    env.total_initial_data += d.initial_data;
  }
  env.link = channel::LinkState(params, *scenario, channel_seed);
  env.scenario = std::move(scenario);
  return env;
}

StepResult step(EnvState& env, Action a) {
  if (env.done) throw world::ContractViolation("step called on a finished episode");
  const world::ActionMask mask = env.legal();
  if (!mask[static_cast<int>(a)]) {
    throw MaskedActionError(std::string("action '") + world::action_name(a) + "' is masked");
  }
  const world::Scenario& s = *env.scenario;
  const int before = env.uav.battery.halves();
  env.uav = world::apply_action(env.uav, a, s.map);
  const bool moved = a != Action::Hover;
  env.link.update(s, env.uav.position, moved);
  const channel::CollectResult c = channel::collect_step(env.devices, env.link.snr(), env.link.params());

  StepResult out;
  out.scheduled = c.scheduled;
  const double energy = 0.5 * (before - env.uav.battery.halves());
  out.reward = {c.collected, -energy};
  env.collected += c.collected;
  env.energy += energy;
  ++env.t;
  env.done = moved && env.uav.position == s.map.terminal();
  if (!env.done && env.t >= env.horizon()) {
    env.done = true;
    env.truncated = true;
  }
  out.done = env.done;
  return out;
}

Vec2 percent_reward(const Vec2& r, double total_initial_data) {
  const double scale = total_initial_data > 0.0 ? 100.0 / total_initial_data : 0.0;
  return {r[0] * scale, r[1]};
}

// ---------------------------------------------------------------------------

double snr_feature(double snr_linear, const FeatureScale& scale) {
  const double lg = snr_linear > 0.0 ? std::log10(snr_linear) : scale.snr_log_min;
  return std::clamp(lg, scale.snr_log_min, scale.snr_log_max) / scale.snr_log_max;
}

namespace {

std::array<double, kUavFeatures> uav_features(const EnvState& env) {
  const world::CityMap& map = env.map();
  const double span = std::max(map.width(), map.length());
  const double battery_cap = env.scenario->initial_battery.units();
  const Cell p = env.uav.position, f = map.terminal();
  return {world::min_battery_to_terminal(p, map) / battery_cap, env.uav.battery.units() / battery_cap,
          (f.x - p.x) / span, (f.y - p.y) / span};
}

std::array<double, kDeviceFeatures> device_features(const EnvState& env, std::size_t k, const FeatureScale& scale) {
  const world::CityMap& map = env.map();
  const double span = std::max(map.width(), map.length());
  const Cell p = env.uav.position, q = env.devices[k].position;
  return {(q.x - p.x) / span, (q.y - p.y) / span, env.devices[k].remaining_data / scale.data_max,
          snr_feature(env.link.snr()[k], scale), env.link.reachable(k) ? 1.0 : 0.0};
}

Grid make_grid(int rows, int cols, double fill = 0.0) {
  return Grid{rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, fill)};
}

template <class Fn>
SpatialState map_layers(const SpatialState& s, Fn fn) {
  SpatialState out;
  out.heights = fn(s.heights, s.pad_height);
  out.zones = fn(s.zones, 0.0);
  out.data = fn(s.data, 0.0);
  out.uav = fn(s.uav, 0.0);
  out.pad_height = s.pad_height;
  return out;
}

}  // namespace

std::vector<double> ftv_state(const EnvState& env, const FeatureScale& scale) {
  std::vector<double> out;
  out.reserve(kUavFeatures + kDeviceFeatures * env.devices.size());
  const auto u = uav_features(env);
  out.insert(out.end(), u.begin(), u.end());
  for (std::size_t k = 0; k < env.devices.size(); ++k) {
    const auto d = device_features(env, k, scale);
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

std::vector<double> ftv_state(const EnvState& env, const FeatureScale& scale, int expected_devices) {
  if (static_cast<int>(env.devices.size()) != expected_devices) {
    throw std::invalid_argument("feature-vector state built for " + std::to_string(expected_devices) +
                                " devices but the scenario has " + std::to_string(env.devices.size()));
  }
  return ftv_state(env, scale);
}

SpatialState spatial_state(const EnvState& env) {
  const world::CityMap& map = env.map();
  const int rows = map.width(), cols = map.length();
  SpatialState s;
  s.heights = make_grid(rows, cols);
  for (int x = 0; x < rows; ++x) {
    for (int y = 0; y < cols; ++y) s.heights.at(x, y) = map.height(x, y);
  }
  s.zones = make_grid(rows, cols);
  s.zones.at(map.start().x, map.start().y) = 1.0;
  s.zones.at(map.terminal().x, map.terminal().y) = -1.0;  // wins when the zones coincide
  s.data = make_grid(rows, cols);
  for (const auto& d : env.devices) s.data.at(d.position.x, d.position.y) += d.remaining_data;
  s.uav = make_grid(rows, cols);
  s.uav.at(env.uav.position.x, env.uav.position.y) = 1.0;
  s.pad_height = map.max_height();
  return s;
}

SpatialState f_center(const SpatialState& s) {
  const int rows = s.uav.rows, cols = s.uav.cols;
  int ux = -1, uy = -1, hits = 0;
  for (int x = 0; x < rows; ++x) {
    for (int y = 0; y < cols; ++y) {
      if (s.uav.at(x, y) != 0.0) {
        ux = x;
        uy = y;
        ++hits;
      }
    }
  }
  if (hits != 1) throw std::invalid_argument("f_center: UAV layer must have exactly one nonzero cell");
  return map_layers(s, [&](const Grid& g, double pad) {
    Grid out = make_grid(2 * rows - 1, 2 * cols - 1, pad);
    for (int i = 0; i < out.rows; ++i) {
      const int x = i - (rows - 1) + ux;
      if (x < 0 || x >= rows) continue;
      for (int j = 0; j < out.cols; ++j) {
        const int y = j - (cols - 1) + uy;
        if (y >= 0 && y < cols) out.at(i, j) = g.at(x, y);
      }
    }
    return out;
  });
}

SpatialState f_local(const SpatialState& centered, int l) {
  if (l < 1) throw std::invalid_argument("f_local: crop size must be >= 1");
  const int rows = centered.uav.rows, cols = centered.uav.cols;
  const int r0 = rows / 2 - l / 2, c0 = cols / 2 - l / 2;
  // Crops wider than the centred map continue its padding.
  return map_layers(centered, [&](const Grid& g, double pad) {
    Grid out = make_grid(l, l, pad);
    for (int i = 0; i < l; ++i) {
      const int r = r0 + i;
      if (r < 0 || r >= rows) continue;
      for (int j = 0; j < l; ++j) {
        const int c = c0 + j;
        if (c >= 0 && c < cols) out.at(i, j) = g.at(r, c);
      }
    }
    return out;
  });
}

SpatialState f_global(const SpatialState& centered, int g) {
  if (g < 1) throw std::invalid_argument("f_global: pooling window must be >= 1");
  return map_layers(centered, [&](const Grid& in, double) {
    Grid out = make_grid((in.rows + g - 1) / g, (in.cols + g - 1) / g);
    for (int i = 0; i < out.rows; ++i) {
      for (int j = 0; j < out.cols; ++j) {
        double sum = 0.0;
        int n = 0;
        for (int x = i * g; x < std::min(in.rows, (i + 1) * g); ++x) {
          for (int y = j * g; y < std::min(in.cols, (j + 1) * g); ++y) {
            sum += in.at(x, y);
            ++n;
          }
        }
        out.at(i, j) = sum / n;
      }
    }
    return out;
  });
}

int TokenState::active_devices() const {
  return static_cast<int>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

TokenState token_state(const EnvState& env, const PreferenceVector& w, const TokenConfig& cfg) {
  TokenState ts;
  ts.uav = uav_features(env);
  ts.preference = w.values();
  ts.devices.assign(static_cast<std::size_t>(cfg.k_max) * kDeviceFeatures, 0.0);
  ts.mask.assign(cfg.k_max, 0);
  ts.slot_device.assign(cfg.k_max, -1);

  std::vector<std::size_t> keep(env.devices.size());
  std::iota(keep.begin(), keep.end(), std::size_t{0});
  if (keep.size() > static_cast<std::size_t>(cfg.k_max)) {
    const auto& snr = env.link.snr();
    std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) { return snr[a] > snr[b]; });
    keep.resize(cfg.k_max);
    std::sort(keep.begin(), keep.end());
  }
  for (std::size_t slot = 0; slot < keep.size(); ++slot) {
    const auto f = device_features(env, keep[slot], cfg.scale);
    std::copy(f.begin(), f.end(), ts.devices.begin() + static_cast<std::ptrdiff_t>(slot * kDeviceFeatures));
    ts.mask[slot] = 1;
    ts.slot_device[slot] = static_cast<int>(keep[slot]);
  }

  const SpatialState local = f_local(f_center(spatial_state(env)), cfg.local_crop);
  const double hnorm = local.pad_height > 0.0 ? local.pad_height : 1.0;
  ts.local_map.reserve(cfg.local_map_size());
  for (double h : local.heights.values) ts.local_map.push_back(h / hnorm);
  for (double d : local.data.values) ts.local_map.push_back(d / cfg.scale.data_max);
  return ts;
}

MultiObjectiveReturn episode_returns(std::span<const Vec2> rewards, double gamma) {
  MultiObjectiveReturn out;
  double discount = 1.0;
  for (const Vec2& r : rewards) {
    for (int m = 0; m < kObjectives; ++m) {
      out.undiscounted[m] += r[m];
      out.discounted[m] += discount * r[m];
    }
    discount *= gamma;
  }
  return out;
}

}  // namespace harvest::momdp
