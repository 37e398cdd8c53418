#include <algorithm>
#include "harvest/channel.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace harvest::channel {

using world::Cell;
using world::CityMap;

void ChannelParams::validate() const {
  if (alpha_nlos < alpha_los) throw std::invalid_argument("channel: alpha_nlos must be >= alpha_los");
  if (shadow_var_los < 0.0 || shadow_var_nlos < 0.0) {
    throw std::invalid_argument("channel: shadowing variances must be >= 0");
  }
  if (!std::isfinite(snr_threshold_db)) throw std::invalid_argument("channel: snr threshold must be finite");
  if (!(slot_duration > 0.0)) throw std::invalid_argument("channel: slot duration must be positive");
  if (!(data_scale > 0.0)) throw std::invalid_argument("channel: data scale must be positive");
}

LinkCondition los_condition(const CityMap& map, Cell uav, double altitude, Cell device, double step) {
  const double c = map.cell_size();
  const bool exact = step <= 0.0;
  if (exact) step = c / 4.0;
  const double x0 = uav.x * c, y0 = uav.y * c;
  const double x1 = device.x * c, y1 = device.y * c;
  auto blocked = [&](double t, double px, double py) {
    const Cell under{static_cast<int>(std::lround(px / c)), static_cast<int>(std::lround(py / c))};
    return map.contains(under) && altitude * (1.0 - t) < map.height(under);
  };
  const double horiz = std::hypot(x1 - x0, y1 - y0);
  const int n = std::max(1, static_cast<int>(std::ceil(horiz / step)));
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    if (blocked(t, x0 + t * (x1 - x0), y0 + t * (y1 - y0))) return LinkCondition::NLoS;
  }
  if (!exact) return LinkCondition::LoS;

  // Cell boundaries lie at half-integer multiples of c. Between consecutive
  // crossings the ray stays over one cell (found at the interval midpoint)
  // and is lowest at the interval end.
  std::vector<double> cuts{0.0, 1.0};
  auto add_crossings = [&](double a, double b) {
    if (a == b) return;
    const double lo = std::min(a, b) / c, hi = std::max(a, b) / c;
    for (double k = std::ceil(lo - 0.5) + 0.5; k < hi; k += 1.0)
      if (k > lo) cuts.push_back((k * c - a) / (b - a));
  };
  add_crossings(x0, x1);
  add_crossings(y0, y1);
  std::sort(cuts.begin(), cuts.end());
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double ta = cuts[i], tb = cuts[i + 1];
    if (tb <= ta) continue;
    const double tm = 0.5 * (ta + tb);
    const Cell under{static_cast<int>(std::lround((x0 + tm * (x1 - x0)) / c)),
                     static_cast<int>(std::lround((y0 + tm * (y1 - y0)) / c))};
    if (map.contains(under) && altitude * (1.0 - tb) < map.height(under)) return LinkCondition::NLoS;
  }
  return LinkCondition::LoS;
}

double link_distance(const CityMap& map, Cell uav, double altitude, Cell device) {
  const double c = map.cell_size();
  const double dx = (uav.x - device.x) * c, dy = (uav.y - device.y) * c;
  return std::sqrt(dx * dx + dy * dy + altitude * altitude);
}

double channel_gain_db(const ChannelParams& p, double distance, LinkCondition z, double shadow_db,
                       double fading_db) {
  const double d = std::max(distance, 1.0);
  const bool los = z == LinkCondition::LoS;
  const double beta = los ? p.beta_los_db : p.beta_nlos_db;
  const double alpha = los ? p.alpha_los : p.alpha_nlos;
  return beta - alpha * std::log10(d) + shadow_db + fading_db;
}

double sample_shadowing_db(const ChannelParams& p, LinkCondition z, std::mt19937_64& rng) {
  if (!p.shadowing_enabled) return 0.0;
  const double var = z == LinkCondition::LoS ? p.shadow_var_los : p.shadow_var_nlos;
  std::normal_distribution<double> n(0.0, std::sqrt(var));
  return n(rng);
}

double sample_fading_db(const ChannelParams& p, std::mt19937_64& rng) {
  if (!p.fading_enabled) return 0.0;
  // Rayleigh(scale 1) by inversion: sqrt(-2 ln U), U in (0, 1].
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double v = 1.0 - u(rng);
  const double mag = std::sqrt(-2.0 * std::log(v));
  return 20.0 * std::log10(std::max(mag, 1e-12));
}

double snr_linear(const ChannelParams& p, double gain_db) {
  return std::pow(10.0, (p.tx_power_dbm + gain_db - p.noise_power_dbm) / 10.0);
}

double snr_db(double snr_linear) { return 10.0 * std::log10(snr_linear); }

bool above_threshold(const ChannelParams& p, double snr_linear) {
  return snr_db(snr_linear) >= p.snr_threshold_db;
}

double rate(double snr_linear) { return std::log2(1.0 + snr_linear); }

double effective_rate(double r, double remaining, const ChannelParams& p) {
  const double per_slot = p.slot_duration * p.data_scale;
  if (remaining >= r * per_slot) return r;
  return remaining / per_slot;
}

std::optional<std::size_t> schedule(std::span<const double> snrs, std::span<const bool> reachable,
                                    std::span<const double> remaining) {
  if (snrs.size() != reachable.size() || snrs.size() != remaining.size()) {
    throw std::invalid_argument("schedule: per-device lists differ in length");
  }
  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < snrs.size(); ++k) {
    if (!reachable[k] || !(remaining[k] > 0.0)) continue;
    if (!best || snrs[k] > snrs[*best]) best = k;
  }
  return best;
}

CollectResult collect_step(std::vector<world::Device>& devices, std::span<const double> snrs,
                           const ChannelParams& p) {
  if (snrs.size() != devices.size()) throw std::invalid_argument("collect_step: SNR list length mismatch");
  std::vector<double> remaining(devices.size());
  std::unique_ptr<bool[]> reach(new bool[devices.size()]);
  for (std::size_t k = 0; k < devices.size(); ++k) {
    remaining[k] = devices[k].remaining_data;
    reach[k] = above_threshold(p, snrs[k]);
  }
  CollectResult out;
  out.scheduled = schedule(snrs, std::span<const bool>(reach.get(), devices.size()), remaining);
  if (!out.scheduled) return out;
  world::Device& d = devices[*out.scheduled];
  const double c = effective_rate(rate(snrs[*out.scheduled]), d.remaining_data, p);
  out.collected = std::min(d.remaining_data, c * p.slot_duration * p.data_scale);
  d.remaining_data -= out.collected;
  if (d.remaining_data < 0.0) d.remaining_data = 0.0;
  return out;
}

// ---------------------------------------------------------------------------

LinkState::LinkState(const ChannelParams& p, const world::Scenario& s, std::uint64_t seed)
    : params_(p), rng_(seed) {
  const std::size_t k = s.devices.size();
  shadow_std_normal_.assign(k, 0.0);
  cond_.assign(k, LinkCondition::LoS);
  snr_.assign(k, 0.0);
  update(s, s.map.start(), true);
}

void LinkState::update(const world::Scenario& s, Cell uav, bool moved) {
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t k = 0; k < s.devices.size(); ++k) {
    const Cell dev = s.devices[k].position;
    if (moved) {
      cond_[k] = los_condition(s.map, uav, s.altitude, dev);
      shadow_std_normal_[k] = params_.shadowing_enabled ? n01(rng_) : 0.0;
    }
    const double var = cond_[k] == LinkCondition::LoS ? params_.shadow_var_los : params_.shadow_var_nlos;
    const double shadow = shadow_std_normal_[k] * std::sqrt(var);
    const double fading = sample_fading_db(params_, rng_);
    const double g = channel_gain_db(params_, link_distance(s.map, uav, s.altitude, dev), cond_[k], shadow, fading);
    snr_[k] = snr_linear(params_, g);
  }
}

bool LinkState::reachable(std::size_t k) const { return above_threshold(params_, snr_[k]); }

std::vector<bool> LinkState::reachability() const {
  std::vector<bool> out(snr_.size());
  for (std::size_t k = 0; k < snr_.size(); ++k) out[k] = reachable(k);
  return out;
}

}  // namespace harvest::channel
