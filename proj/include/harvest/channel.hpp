#pragma once

// Air-to-ground link model: geometric LoS test, log-distance gain with
// log-normal shadowing (and optional Rayleigh fading), SNR, rate, effective
// rate, and single-device SNR scheduling.

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "harvest/world.hpp"

namespace harvest::channel {

struct ChannelParams {
  double tx_power_dbm = 36.0;
  /// Receiver noise power. The gain model spans only ~10 dB over a city block,
  /// so this default places the 5 dB threshold between LoS and NLoS links.
  double noise_power_dbm = -9.0;
  double snr_threshold_db = 5.0;
  double alpha_los = 2.5;
  double alpha_nlos = 3.04;
  double beta_los_db = -30.0;
  double beta_nlos_db = -35.0;
  double shadow_var_los = 2.0;   // dB^2
  double shadow_var_nlos = 5.0;  // dB^2
  bool shadowing_enabled = true;
  bool fading_enabled = false;
  double slot_duration = 1.0;  // seconds
  /// Data units per (rate x slot).
  double data_scale = 100.0;

  /// Throws std::invalid_argument naming the broken invariant.
  void validate() const;
};

enum class LinkCondition { LoS, NLoS };

/// Ray-samples the segment from the UAV (uav*c, h) to the device (device*c, 0)
/// every `step` meters of horizontal travel (default c/4); NLoS iff a sample
/// passes strictly below the building under it. With the default step the
/// exit point of every traversed cell is sampled too, where the descending
/// ray is lowest over that cell, so clipped corners are never skipped.
LinkCondition los_condition(const world::CityMap& map, world::Cell uav, double altitude, world::Cell device,
                            double step = 0.0);

/// 3-D UAV-device distance in meters.
double link_distance(const world::CityMap& map, world::Cell uav, double altitude, world::Cell device);

/// beta_z - alpha_z * log10(max(d, 1)) + shadow_db + fading_db.
double channel_gain_db(const ChannelParams& p, double distance, LinkCondition z, double shadow_db = 0.0,
                       double fading_db = 0.0);
/// Samples eta ~ N(0, sigma_z^2) (zero when shadowing is disabled).
double sample_shadowing_db(const ChannelParams& p, LinkCondition z, std::mt19937_64& rng);
/// 20 log10 |h| with |h| ~ Rayleigh(1) (zero when fading is disabled).
double sample_fading_db(const ChannelParams& p, std::mt19937_64& rng);

double snr_linear(const ChannelParams& p, double gain_db);
double snr_db(double snr_linear);
/// Reachability indicator: SNR (dB) >= threshold.
bool above_threshold(const ChannelParams& p, double snr_linear);
double rate(double snr_linear);
/// R if the device holds at least R * dt * scale, else D / (dt * scale).
double effective_rate(double rate, double remaining, const ChannelParams& p);

/// Index of the highest-SNR device among those with SNR >= threshold and data
/// left. Ties go to the lowest index.
std::optional<std::size_t> schedule(std::span<const double> snrs, std::span<const bool> reachable,
                                    std::span<const double> remaining);

struct CollectResult {
  std::optional<std::size_t> scheduled;
  double collected = 0.0;
};

/// Schedules one device from the given per-device SNRs and drains it by
/// C * dt * scale. Mutates `devices` in place.
CollectResult collect_step(std::vector<world::Device>& devices, std::span<const double> snrs,
                           const ChannelParams& p);

/// Per-episode link state: shadowing samples held between moves.
class LinkState {
 public:
  LinkState() = default;
  LinkState(const ChannelParams& p, const world::Scenario& s, std::uint64_t seed);

  /// Recomputes SNRs at the UAV position. Shadowing is resampled only when
  /// `moved`; fading, when enabled, is drawn every slot.
  void update(const world::Scenario& s, world::Cell uav, bool moved);

  const std::vector<double>& snr() const { return snr_; }
  const std::vector<LinkCondition>& conditions() const { return cond_; }
  bool reachable(std::size_t k) const;
  std::vector<bool> reachability() const;
  const ChannelParams& params() const { return params_; }

 private:
  ChannelParams params_;
  std::mt19937_64 rng_;
  std::vector<double> shadow_std_normal_;
  std::vector<LinkCondition> cond_;
  std::vector<double> snr_;
};

}  // namespace harvest::channel
