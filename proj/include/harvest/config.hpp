#pragma once

// Run configuration: one INI-style file with sections [run], [world],
// [channel], [momdp], [net], [train] and [eval]. Unknown sections or keys are
// rejected on load.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "harvest/channel.hpp"
#include "harvest/momdp.hpp"
#include "harvest/mosac.hpp"
#include "harvest/nets.hpp"
#include "harvest/world.hpp"

namespace harvest::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct WorldSection {
  world::CityParams city;
  world::DeviceParams devices;
  int battery = 80;  // units
  double altitude = 60.0;
  world::ScenarioKind kind = world::ScenarioKind::ReachDestination;
  /// Seed of the fixed city map shared by training and test scenarios.
  std::uint64_t map_seed = 1;
};

struct EvalSection {
  int scenarios = 100;
  std::uint64_t seed = 1000;
  int threads = 1;
  int fading_repeats = 30;
  momdp::Vec2 reference{-1.0, -200.0};
  double greedy_slack = 0.0;
  double greedy_data_epsilon = 1.0;
  bool greedy_preference_scaled = true;
};

enum class Algorithm { MosacAtt, MosacFtv };
const char* algorithm_name(Algorithm a);
Algorithm parse_algorithm(const std::string& name);

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  Algorithm algo = Algorithm::MosacAtt;
  WorldSection world;
  channel::ChannelParams channel;
  momdp::FeatureScale momdp;
  nets::EncoderConfig net;
  int ftv_hidden = 128;
  mosac::TrainConfig train;
  EvalSection eval;

  /// Throws ConfigError naming the broken invariant.
  void validate() const;
  /// Network layout for the configured algorithm; FTV is sized to the
  /// training device count.
  nets::NetworkSpec network_spec() const;
};

/// Defaults overridden by the file's keys, then validated.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Complete INI round-trippable through parse_config.
std::string to_ini(const RunConfig& cfg);

/// The fixed city map of the run.
world::CityMap make_map(const RunConfig& cfg);
/// Devices placed on `map` from `seed`; count and battery default to the
/// [world] values when non-positive.
world::Scenario make_scenario(const RunConfig& cfg, const world::CityMap& map, std::uint64_t seed,
                              int device_count = 0, int battery = 0);

}  // namespace harvest::config
