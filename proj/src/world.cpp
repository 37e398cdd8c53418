#include "harvest/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace harvest::world {

int manhattan(Cell a, Cell b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }

Battery Battery::from_double(double units) {
  const double halves = units * 2.0;
  const double rounded = std::round(halves);
  if (std::abs(halves - rounded) > 1e-9) {
    throw ContractViolation("battery level " + std::to_string(units) + " is not a multiple of 0.5");
  }
  return Battery(static_cast<int>(rounded));
}

Cell displacement(Action a) {
  switch (a) {
    case Action::Hover: return {0, 0};
    case Action::North: return {0, 1};
    case Action::West: return {-1, 0};
    case Action::South: return {0, -1};
    case Action::East: return {1, 0};
  }
  throw ContractViolation("unknown action");
}

int cost_halves(Action a) { return a == Action::Hover ? 1 : 2; }

const char* action_name(Action a) {
  switch (a) {
    case Action::Hover: return "hover";
    case Action::North: return "north";
    case Action::West: return "west";
    case Action::South: return "south";
    case Action::East: return "east";
  }
  return "?";
}

const char* kind_name(ScenarioKind k) { return k == ScenarioKind::ReturnBase ? "RB" : "RD"; }

// ---------------------------------------------------------------------------
// CityMap

CityMap::CityMap(int width, int length, double cell_size, std::vector<double> heights, Cell start,
                 Cell terminal)
    : width_(width),
      length_(length),
      cell_size_(cell_size),
      heights_(std::move(heights)),
      start_(start),
      terminal_(terminal) {
  if (width_ < 1 || length_ < 1) throw ContractViolation("map dimensions must be positive");
  if (heights_.size() != static_cast<std::size_t>(width_) * length_) {
    throw ContractViolation("height grid has " + std::to_string(heights_.size()) + " entries, expected " +
                            std::to_string(width_ * length_));
  }
  max_height_ = heights_.empty() ? 0.0 : *std::max_element(heights_.begin(), heights_.end());
}

void CityMap::validate() const {
  if (!(cell_size_ > 0.0)) throw ContractViolation("cell size must be positive");
  for (double h : heights_) {
    if (!(h >= 0.0) || !std::isfinite(h)) throw ContractViolation("building heights must be finite and >= 0");
  }
  if (!contains(start_)) throw ContractViolation("start zone lies outside the map");
  if (!contains(terminal_)) throw ContractViolation("terminal zone lies outside the map");
  if (is_building(start_)) throw ContractViolation("start zone lies on a building");
  if (is_building(terminal_)) throw ContractViolation("terminal zone lies on a building");
}

// ---------------------------------------------------------------------------
// Generation

namespace {

struct Rect {
  int x0, y0, w, l;
};

bool rect_touches(const std::vector<std::uint8_t>& occupied, int width, int length, const Rect& r) {
  // footprint plus a one-cell alley must be free
  for (int x = r.x0 - 1; x <= r.x0 + r.w; ++x) {
    for (int y = r.y0 - 1; y <= r.y0 + r.l; ++y) {
      if (x < 0 || y < 0 || x >= width || y >= length) continue;
      if (occupied[static_cast<std::size_t>(x) * length + y]) return true;
    }
  }
  return false;
}

bool rect_covers(const Rect& r, Cell c) {
  return c.x >= r.x0 && c.x < r.x0 + r.w && c.y >= r.y0 && c.y < r.y0 + r.l;
}

}  // namespace

CityMap generate_city(std::uint64_t seed, const CityParams& p) {
  if (p.width < 2 || p.length < 2) throw GenerationError("map must be at least 2x2 cells");
  if (p.building_density < 0.0 || p.building_density >= 1.0) {
    throw GenerationError("building_density must lie in [0, 1)");
  }
  if (p.min_height <= 0.0 || p.min_height > p.max_height) {
    throw GenerationError("height range must satisfy 0 < min_height <= max_height");
  }
  if (p.min_building_side < 1 || p.max_building_side < p.min_building_side) {
    throw GenerationError("building side range is empty");
  }

  std::mt19937_64 rng(seed);
  const int W = p.width, L = p.length;
  const std::size_t n = static_cast<std::size_t>(W) * L;

  auto random_cell = [&]() {
    std::uniform_int_distribution<int> dx(0, W - 1), dy(0, L - 1);
    return Cell{dx(rng), dy(rng)};
  };

  // Zones are fixed before buildings so the footprints can avoid them.
  Cell start = p.start.value_or(Cell{-1, -1});
  Cell terminal = p.terminal.value_or(Cell{-1, -1});
  if (!p.start) start = random_cell();
  if (p.return_base) {
    if (p.terminal && !(p.terminal == start)) {
      throw GenerationError("return-base map needs start and terminal to coincide");
    }
    terminal = start;
  } else if (!p.terminal) {
    const int want = std::max(1, (W + L) / 3);
    int tries = 0;
    do {
      terminal = random_cell();
    } while (manhattan(start, terminal) < want && ++tries < 10000);
    if (terminal == start) throw GenerationError("could not place a distinct terminal zone");
  }
  CityMap probe(W, L, p.cell_size, std::vector<double>(n, 0.0), start, terminal);
  if (!probe.contains(start) || !probe.contains(terminal)) {
    throw GenerationError("start/terminal zone lies outside the map");
  }
  if (!p.return_base && start == terminal) {
    throw GenerationError("reach-destination map needs distinct start and terminal zones");
  }

  std::vector<double> heights(n, 0.0);
  std::vector<std::uint8_t> occupied(n, 0);
  const std::size_t target = static_cast<std::size_t>(std::llround(p.building_density * static_cast<double>(n)));
  std::size_t covered = 0;
  std::uniform_int_distribution<int> side(p.min_building_side, p.max_building_side);
  std::uniform_real_distribution<double> hgt(p.min_height, p.max_height);
  const int budget = 200 * static_cast<int>(n) + 1000;
  int attempts = 0;
  while (covered < target) {
    if (++attempts > budget) {
      throw GenerationError("building_density " + std::to_string(p.building_density) +
                            " unreachable: covered " + std::to_string(covered) + " of " +
                            std::to_string(target) + " cells before the placement budget ran out");
    }
    Rect r{0, 0, side(rng), side(rng)};
    if (r.w > W || r.l > L) continue;
    r.x0 = std::uniform_int_distribution<int>(0, W - r.w)(rng);
    r.y0 = std::uniform_int_distribution<int>(0, L - r.l)(rng);
    if (rect_covers(r, start) || rect_covers(r, terminal)) continue;
    if (rect_touches(occupied, W, L, r)) continue;
    const double h = hgt(rng);
    for (int x = r.x0; x < r.x0 + r.w; ++x) {
      for (int y = r.y0; y < r.y0 + r.l; ++y) {
        const std::size_t i = static_cast<std::size_t>(x) * L + y;
        occupied[i] = 1;
        heights[i] = h;
        ++covered;
      }
    }
  }
  return CityMap(W, L, p.cell_size, std::move(heights), start, terminal);
}

std::vector<Device> place_devices(const CityMap& map, const DeviceParams& p, std::uint64_t seed) {
  if (p.count < 1) throw PlacementError("device count must be >= 1");
  if (p.data_min < 0.0 || p.data_max < p.data_min) throw PlacementError("data range is empty");

  std::vector<Cell> free_cells;
  for (int x = 0; x < map.width(); ++x)
    for (int y = 0; y < map.length(); ++y)
      if (!map.is_building({x, y})) free_cells.push_back({x, y});
  if (free_cells.empty()) throw PlacementError("no free cell for devices");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, free_cells.size() - 1);
  std::uniform_real_distribution<double> data(p.data_min, p.data_max);
  const double c = map.cell_size();
  const double min_sq = p.min_spacing * p.min_spacing;

  // Whole-set restarts avoid getting stuck with an early bad choice.
  int attempts = 0;
  while (attempts < p.max_attempts) {
    std::vector<Cell> chosen;
    int stalls = 0;
    while (static_cast<int>(chosen.size()) < p.count && stalls < 200 && attempts < p.max_attempts) {
      ++attempts;
      const Cell cand = free_cells[pick(rng)];
      bool ok = true;
      for (const Cell& o : chosen) {
        const double dx = (cand.x - o.x) * c, dy = (cand.y - o.y) * c;
        if (dx * dx + dy * dy < min_sq) {
          ok = false;
          break;
        }
      }
      if (ok) {
        chosen.push_back(cand);
        stalls = 0;
      } else {
        ++stalls;
      }
    }
    if (static_cast<int>(chosen.size()) == p.count) {
      std::vector<Device> out;
      out.reserve(chosen.size());
      for (const Cell& cell : chosen) {
        const double d0 = data(rng);
        out.push_back(Device{cell, d0, d0});
      }
      return out;
    }
  }
  throw PlacementError("could not place " + std::to_string(p.count) + " devices " +
                       std::to_string(p.min_spacing) + " m apart within " + std::to_string(p.max_attempts) +
                       " draws");
}

// ---------------------------------------------------------------------------
// Kinematics and safety controller

double min_battery_to_terminal(Cell p, const CityMap& map) {
  return static_cast<double>(manhattan(p, map.terminal()));
}

int reserve_halves(Cell p, const CityMap& map) {
  if (p == map.terminal()) return 4;  // one move out, one move back
  return 2 * manhattan(p, map.terminal());
}

ActionMask legal_actions(const UavState& uav, const CityMap& map) {
  if (!map.contains(uav.position)) throw ContractViolation("UAV is outside the map");
  const int have = uav.battery.halves();
  if (have < 2 * manhattan(uav.position, map.terminal())) {
    throw ContractViolation("battery " + std::to_string(uav.battery.units()) +
                            " is below the minimum needed to reach the terminal (" +
                            std::to_string(min_battery_to_terminal(uav.position, map)) + ")");
  }
  ActionMask mask{};
  for (Action a : kAllActions) {
    const Cell d = displacement(a);
    const Cell next{uav.position.x + d.x, uav.position.y + d.y};
    if (!map.contains(next)) continue;
    const int left = have - cost_halves(a);
    // Entering the terminal by a move ends the mission.
    const int need = (a != Action::Hover && next == map.terminal()) ? 0 : reserve_halves(next, map);
    mask[static_cast<int>(a)] = left >= need;
  }
  return mask;
}

UavState apply_action(const UavState& uav, Action a, const CityMap& map) {
  const ActionMask mask = legal_actions(uav, map);
  if (!mask[static_cast<int>(a)]) {
    throw ContractViolation(std::string("action '") + action_name(a) + "' is masked by the safety controller");
  }
  const Cell d = displacement(a);
  UavState next = uav;
  next.position = {uav.position.x + d.x, uav.position.y + d.y};
  next.battery = Battery::from_halves(uav.battery.halves() - cost_halves(a));
  return next;
}

// ---------------------------------------------------------------------------
// Scenario

void Scenario::validate(double min_spacing) const {
  map.validate();
  if (kind == ScenarioKind::ReturnBase && !(map.start() == map.terminal())) {
    throw ContractViolation("RB scenario requires coinciding start and terminal zones");
  }
  if (kind == ScenarioKind::ReachDestination && map.start() == map.terminal()) {
    throw ContractViolation("RD scenario requires distinct start and terminal zones");
  }
  if (!(altitude > map.max_height())) {
    throw ContractViolation("UAV altitude must exceed the tallest building");
  }
  if (initial_battery.halves() < reserve_halves(map.start(), map)) {
    throw ContractViolation("initial battery cannot complete the mission");
  }
  for (std::size_t i = 0; i < devices.size(); ++i) {
    const Device& d = devices[i];
    if (!map.contains(d.position)) throw ContractViolation("device " + std::to_string(i) + " lies outside the map");
    if (map.is_building(d.position)) throw ContractViolation("device " + std::to_string(i) + " lies on a building");
    if (!(d.initial_data >= 0.0) || d.remaining_data < 0.0 || d.remaining_data > d.initial_data) {
      throw ContractViolation("device " + std::to_string(i) + " has an invalid data load");
    }
    for (std::size_t j = 0; j < i; ++j) {
      const double dx = (d.position.x - devices[j].position.x) * map.cell_size();
      const double dy = (d.position.y - devices[j].position.y) * map.cell_size();
      if (std::sqrt(dx * dx + dy * dy) < min_spacing) {
        throw ContractViolation("devices " + std::to_string(j) + " and " + std::to_string(i) +
                                " are closer than " + std::to_string(min_spacing) + " m");
      }
    }
  }
}

std::string scenario_to_json(const Scenario& s) {
  using nlohmann::json;
  json j;
  j["cell_size_m"] = s.map.cell_size();
  json rows = json::array();
  for (int x = 0; x < s.map.width(); ++x) {
    json row = json::array();
    for (int y = 0; y < s.map.length(); ++y) row.push_back(s.map.height(x, y));
    rows.push_back(std::move(row));
  }
  j["heights"] = std::move(rows);
  j["start"] = {s.map.start().x, s.map.start().y};
  j["terminal"] = {s.map.terminal().x, s.map.terminal().y};
  json devs = json::array();
  for (const Device& d : s.devices) devs.push_back({{"x", d.position.x}, {"y", d.position.y}, {"data", d.initial_data}});
  j["devices"] = std::move(devs);
  j["battery"] = s.initial_battery.units();
  j["altitude_m"] = s.altitude;
  j["kind"] = kind_name(s.kind);
  j["seed"] = s.seed;
  return j.dump(1);
}

namespace {

[[noreturn]] void format_error(const std::string& field, const std::string& what) {
  throw ScenarioFormatError("scenario field '" + field + "': " + what);
}

const nlohmann::json& require(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) format_error(key, "missing");
  return j.at(key);
}

Cell read_cell(const nlohmann::json& j, const char* key) {
  const auto& v = require(j, key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer()) {
    format_error(key, "expected [x, y] integer pair");
  }
  return {v[0].get<int>(), v[1].get<int>()};
}

}  // namespace

Scenario scenario_from_json(const std::string& text) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ScenarioFormatError(std::string("malformed scenario JSON: ") + e.what());
  }
  if (!j.is_object()) throw ScenarioFormatError("scenario must be a JSON object");

  const auto& cs = require(j, "cell_size_m");
  if (!cs.is_number()) format_error("cell_size_m", "expected number");
  const auto& rows = require(j, "heights");
  if (!rows.is_array() || rows.empty()) format_error("heights", "expected non-empty list of rows");
  const int width = static_cast<int>(rows.size());
  if (!rows[0].is_array() || rows[0].empty()) format_error("heights[0]", "expected non-empty row");
  const int length = static_cast<int>(rows[0].size());
  std::vector<double> heights;
  heights.reserve(static_cast<std::size_t>(width) * length);
  for (int x = 0; x < width; ++x) {
    const auto& row = rows[x];
    if (!row.is_array() || static_cast<int>(row.size()) != length) {
      format_error("heights[" + std::to_string(x) + "]", "expected " + std::to_string(length) + " entries");
    }
    for (int y = 0; y < length; ++y) {
      if (!row[y].is_number()) {
        format_error("heights[" + std::to_string(x) + "][" + std::to_string(y) + "]", "expected number");
      }
      heights.push_back(row[y].get<double>());
    }
  }

  Scenario s;
  try {
    s.map = CityMap(width, length, cs.get<double>(), std::move(heights), read_cell(j, "start"),
                    read_cell(j, "terminal"));
  } catch (const ContractViolation& e) {
    throw ScenarioFormatError(std::string("invalid map: ") + e.what());
  }

  const auto& devs = require(j, "devices");
  if (!devs.is_array()) format_error("devices", "expected list");
  for (std::size_t i = 0; i < devs.size(); ++i) {
    const auto& d = devs[i];
    const std::string where = "devices[" + std::to_string(i) + "]";
    if (!d.is_object() || !d.contains("x") || !d.contains("y") || !d.contains("data") ||
        !d["x"].is_number_integer() || !d["y"].is_number_integer() || !d["data"].is_number()) {
      format_error(where, "expected {x: int, y: int, data: number}");
    }
    const double data = d["data"].get<double>();
    s.devices.push_back(Device{{d["x"].get<int>(), d["y"].get<int>()}, data, data});
  }

  const auto& bat = require(j, "battery");
  if (!bat.is_number()) format_error("battery", "expected number");
  try {
    s.initial_battery = Battery::from_double(bat.get<double>());
  } catch (const ContractViolation& e) {
    format_error("battery", e.what());
  }
  if (j.contains("altitude_m")) {
    if (!j["altitude_m"].is_number()) format_error("altitude_m", "expected number");
    s.altitude = j["altitude_m"].get<double>();
  }
  const auto& kind = require(j, "kind");
  if (!kind.is_string() || (kind != "RD" && kind != "RB")) format_error("kind", "expected \"RD\" or \"RB\"");
  s.kind = kind == "RB" ? ScenarioKind::ReturnBase : ScenarioKind::ReachDestination;
  const auto& seed = require(j, "seed");
  if (!seed.is_number_unsigned()) format_error("seed", "expected non-negative integer");
  s.seed = seed.get<std::uint64_t>();

  try {
    s.validate();
  } catch (const ContractViolation& e) {
    throw ScenarioFormatError(std::string("scenario validation failed: ") + e.what());
  }
  return s;
}

void save_scenario(const Scenario& s, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write scenario file " + path.string());
  out << scenario_to_json(s) << '\n';
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioFormatError("cannot open scenario file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return scenario_from_json(ss.str());
  } catch (const ScenarioFormatError& e) {
    throw ScenarioFormatError(path.string() + ": " + e.what());
  }
}

}  // namespace harvest::world
