#pragma once

// Urban grid world: city maps, IoT devices, UAV kinematics and battery,
// the safety controller, and scenario persistence.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace harvest::world {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PlacementError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a caller breaks an operation's precondition (illegal action,
/// unreachable battery state).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ScenarioFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

int manhattan(Cell a, Cell b);

/// Battery level in half units, so hover (0.5) and move (1.0) are exact.
class Battery {
 public:
  constexpr Battery() = default;
  static constexpr Battery from_halves(int halves) { return Battery(halves); }
  static constexpr Battery from_units(int units) { return Battery(2 * units); }
  /// Exact for multiples of 0.5; throws otherwise.
  static Battery from_double(double units);

  constexpr int halves() const { return halves_; }
  constexpr double units() const { return 0.5 * halves_; }

  friend constexpr bool operator==(Battery, Battery) = default;
  friend constexpr auto operator<=>(Battery, Battery) = default;

 private:
  constexpr explicit Battery(int halves) : halves_(halves) {}
  int halves_ = 0;
};

enum class Action : int { Hover = 0, North = 1, West = 2, South = 3, East = 4 };
inline constexpr int kNumActions = 5;
inline constexpr std::array<Action, kNumActions> kAllActions{Action::Hover, Action::North, Action::West,
                                                             Action::South, Action::East};

/// Displacement in cells; multiply by the cell size for meters.
Cell displacement(Action a);
/// Battery cost in half units: 1 for hover, 2 for a move.
int cost_halves(Action a);
const char* action_name(Action a);

using ActionMask = std::array<bool, kNumActions>;

class CityMap {
 public:
  CityMap() = default;
  /// heights is indexed [x * length + y] (x-major), x in [0, width), y in [0, length).
  CityMap(int width, int length, double cell_size, std::vector<double> heights, Cell start, Cell terminal);

  int width() const { return width_; }
  int length() const { return length_; }
  double cell_size() const { return cell_size_; }
  Cell start() const { return start_; }
  Cell terminal() const { return terminal_; }
  double max_height() const { return max_height_; }

  double height(Cell c) const { return heights_[index(c)]; }
  double height(int x, int y) const { return heights_[index({x, y})]; }
  bool contains(Cell c) const { return c.x >= 0 && c.y >= 0 && c.x < width_ && c.y < length_; }
  bool is_building(Cell c) const { return height(c) > 0.0; }
  const std::vector<double>& heights() const { return heights_; }
  std::size_t index(Cell c) const { return static_cast<std::size_t>(c.x) * length_ + c.y; }

  /// Throws ContractViolation naming the broken invariant.
  void validate() const;

  friend bool operator==(const CityMap&, const CityMap&) = default;

 private:
  int width_ = 0;
  int length_ = 0;
  double cell_size_ = 20.0;
  std::vector<double> heights_;
  Cell start_;
  Cell terminal_;
  double max_height_ = 0.0;
};

struct CityParams {
  int width = 40;
  int length = 30;
  double cell_size = 20.0;
  double building_density = 0.25;
  double min_height = 10.0;
  double max_height = 50.0;
  /// Side range of the rectangular building footprints, in cells.
  int min_building_side = 1;
  int max_building_side = 4;
  /// Start and terminal zones; when absent they are picked by the generator.
  std::optional<Cell> start;
  std::optional<Cell> terminal;
  bool return_base = false;
};

/// Procedural city: axis-aligned rectangular buildings placed by rejection
/// sampling until the requested fraction of cells is covered. Pure function of
/// (params, seed).
CityMap generate_city(std::uint64_t seed, const CityParams& params);

struct Device {
  Cell position;
  double initial_data = 0.0;
  double remaining_data = 0.0;
  friend bool operator==(const Device&, const Device&) = default;
};

struct DeviceParams {
  int count = 6;
  double min_spacing = 100.0;  // meters
  double data_min = 5000.0;
  double data_max = 8000.0;
  int max_attempts = 100000;
};

/// Uniform rejection sampling of off-building cells with pairwise spacing.
std::vector<Device> place_devices(const CityMap& map, const DeviceParams& params, std::uint64_t seed);

struct UavState {
  Cell position;
  double altitude = 60.0;
  Battery battery;
  friend bool operator==(const UavState&, const UavState&) = default;
};

/// Moves the UAV and drains its battery. Throws ContractViolation if the action
/// is masked by legal_actions.
UavState apply_action(const UavState& uav, Action a, const CityMap& map);

/// Manhattan distance to the terminal, one battery unit per move.
double min_battery_to_terminal(Cell p, const CityMap& map);

/// Battery (half units) the safety controller reserves at p. Equals the
/// Manhattan cost except on the terminal cell before the mission has ended
/// (return-base start), where finishing takes a step out and back.
int reserve_halves(Cell p, const CityMap& map);

/// Safety controller. An action is legal iff it stays on the grid and leaves
/// enough battery to still reach the terminal. At zero slack only moves that
/// strictly approach the terminal survive.
ActionMask legal_actions(const UavState& uav, const CityMap& map);

enum class ScenarioKind { ReachDestination, ReturnBase };
const char* kind_name(ScenarioKind k);

struct Scenario {
  CityMap map;
  std::vector<Device> devices;
  Battery initial_battery = Battery::from_units(80);
  double altitude = 60.0;
  ScenarioKind kind = ScenarioKind::ReachDestination;
  std::uint64_t seed = 0;

  /// Throws ContractViolation naming the broken invariant.
  void validate(double min_spacing = 0.0) const;
  friend bool operator==(const Scenario&, const Scenario&) = default;
};

std::string scenario_to_json(const Scenario& s);
Scenario scenario_from_json(const std::string& text);
void save_scenario(const Scenario& s, const std::filesystem::path& path);
Scenario load_scenario(const std::filesystem::path& path);

}  // namespace harvest::world
