#include <doctest.h>

#include <cmath>
#include <fstream>
#include <queue>
#include <random>

#include "harvest/world.hpp"
#include "support.hpp"

using namespace harvest;
using namespace harvest::world;

namespace {

/// Moves-only breadth-first distance on the grid (no obstacles at flight altitude).
int bfs_distance(const CityMap& map, Cell from, Cell to) {
  std::vector<int> dist(static_cast<std::size_t>(map.width()) * map.length(), -1);
  std::queue<Cell> frontier;
  dist[map.index(from)] = 0;
  frontier.push(from);
  while (!frontier.empty()) {
    const Cell c = frontier.front();
    frontier.pop();
    if (c == to) return dist[map.index(c)];
    for (Action a : {Action::North, Action::West, Action::South, Action::East}) {
      const Cell d = displacement(a);
      const Cell n{c.x + d.x, c.y + d.y};
      if (!map.contains(n) || dist[map.index(n)] >= 0) continue;
      dist[map.index(n)] = dist[map.index(c)] + 1;
      frontier.push(n);
    }
  }
  return -1;
}

UavState uav_at(Cell p, double battery_units) {
  return UavState{p, 60.0, Battery::from_double(battery_units)};
}

Scenario small_scenario() {
  CityParams cp;
  cp.width = 12;
  cp.length = 10;
  cp.building_density = 0.2;
  cp.start = Cell{0, 0};
  cp.terminal = Cell{11, 9};
  Scenario s;
  s.map = generate_city(3, cp);
  DeviceParams dp;
  dp.count = 3;
  dp.min_spacing = 60.0;
  s.devices = place_devices(s.map, dp, 4);
  s.initial_battery = Battery::from_units(40);
  s.seed = 42;
  return s;
}

}  // namespace

TEST_SUITE("world") {
  TEST_CASE("city generation is a pure function of the seed") {
    CityParams p;
    p.width = 40;
    p.length = 30;
    const CityMap a = generate_city(7, p);
    const CityMap b = generate_city(7, p);
    CHECK(a == b);
    CHECK(a.max_height() <= 50.0);
    CHECK(generate_city(8, p).heights() != a.heights());
    CHECK_NOTHROW(a.validate());
  }

  TEST_CASE("zero density gives a flat map") {
    CityParams p;
    p.building_density = 0.0;
    const CityMap m = generate_city(1, p);
    for (double h : m.heights()) CHECK(h == 0.0);
  }

  TEST_CASE("generated buildings respect the height range and spare the zones") {
    CityParams p;
    p.width = 20;
    p.length = 15;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const CityMap m = generate_city(seed, p);
      CHECK_FALSE(m.is_building(m.start()));
      CHECK_FALSE(m.is_building(m.terminal()));
      CHECK_FALSE(m.start() == m.terminal());
      int covered = 0;
      for (double h : m.heights()) {
        if (h > 0.0) {
          ++covered;
          CHECK(h >= 10.0);
          CHECK(h <= 50.0);
        }
      }
      CHECK(covered >= 75);
      CHECK(covered < 75 + 16);
    }
  }

  TEST_CASE("return-base generation makes the zones coincide") {
    CityParams p;
    p.return_base = true;
    const CityMap m = generate_city(5, p);
    CHECK(m.start() == m.terminal());
  }

  TEST_CASE("unreachable density raises a generation error naming it") {
    CityParams p;
    p.width = 10;
    p.length = 10;
    p.building_density = 0.9;
    try {
      generate_city(1, p);
      FAIL("expected GenerationError");
    } catch (const GenerationError& e) {
      CHECK(std::string(e.what()).find("building_density") != std::string::npos);
    }
  }

  TEST_CASE("device placement honours spacing, data range and free cells") {
    CityParams cp;
    const CityMap map = generate_city(11, cp);
    DeviceParams dp;
    const auto devices = place_devices(map, dp, 5);
    REQUIRE(devices.size() == 6);
    for (std::size_t i = 0; i < devices.size(); ++i) {
      CHECK_FALSE(map.is_building(devices[i].position));
      CHECK(devices[i].initial_data >= 5000.0);
      CHECK(devices[i].initial_data <= 8000.0);
      CHECK(devices[i].remaining_data == devices[i].initial_data);
      for (std::size_t j = 0; j < i; ++j) {
        const double dx = (devices[i].position.x - devices[j].position.x) * map.cell_size();
        const double dy = (devices[i].position.y - devices[j].position.y) * map.cell_size();
        CHECK(std::hypot(dx, dy) >= 100.0);
      }
    }
    CHECK(place_devices(map, dp, 5) == devices);
    dp.count = 1;
    CHECK(place_devices(map, dp, 9).size() == 1);
  }

  TEST_CASE("infeasible spacing exhausts the placement budget") {
    const CityMap map = testing::flat_map(3, 3, {0, 0}, {2, 2});
    DeviceParams dp;
    dp.count = 4;
    dp.min_spacing = 100.0;
    dp.max_attempts = 2000;
    CHECK_THROWS_AS(place_devices(map, dp, 1), PlacementError);
  }

  TEST_CASE("actions move the UAV and drain the battery in half units") {
    const CityMap map = testing::flat_map(10, 10, {0, 0}, {9, 9});
    const UavState start = uav_at({3, 3}, 80);
    const UavState hovered = apply_action(start, Action::Hover, map);
    CHECK(hovered.position == Cell{3, 3});
    CHECK(hovered.battery.units() == 79.5);
    const UavState north = apply_action(start, Action::North, map);
    CHECK(north.position == Cell{3, 4});
    CHECK(north.battery.units() == 79.0);
    const UavState twice = apply_action(hovered, Action::Hover, map);
    CHECK(start.battery.units() - twice.battery.units() == 1.0);
    CHECK(apply_action(start, Action::West, map).position == Cell{2, 3});
    CHECK(apply_action(start, Action::South, map).position == Cell{3, 2});
    CHECK(apply_action(start, Action::East, map).position == Cell{4, 3});
  }

  TEST_CASE("masked actions are contract violations") {
    const CityMap map = testing::flat_map(10, 10, {0, 0}, {9, 9});
    CHECK_THROWS_AS(apply_action(uav_at({0, 0}, 80), Action::West, map), ContractViolation);
    CHECK_THROWS_AS(apply_action(uav_at({8, 9}, 1), Action::Hover, map), ContractViolation);
  }

  TEST_CASE("battery is exact in half units") {
    CHECK(Battery::from_double(79.5).halves() == 159);
    CHECK_THROWS_AS(Battery::from_double(1.25), ContractViolation);
  }

  TEST_CASE("minimum battery to the terminal matches BFS") {
    const CityMap small = testing::flat_map(4, 4, {0, 0}, {3, 2});
    CHECK(min_battery_to_terminal({3, 2}, small) == 0.0);
    CHECK(min_battery_to_terminal({0, 0}, small) == 5.0);

    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
      std::uniform_int_distribution<int> dim(2, 9);
      const int w = dim(rng), l = dim(rng);
      std::uniform_int_distribution<int> ux(0, w - 1), uy(0, l - 1);
      const CityMap map = testing::flat_map(w, l, {ux(rng), uy(rng)}, {ux(rng), uy(rng)});
      const Cell p{ux(rng), uy(rng)};
      CHECK(min_battery_to_terminal(p, map) == static_cast<double>(bfs_distance(map, p, map.terminal())));
    }
  }

  TEST_CASE("safety controller masks off-grid moves and enforces the critical-battery rule") {
    const CityMap map = testing::flat_map(10, 10, {0, 0}, {9, 9});
    const ActionMask corner = legal_actions(uav_at({0, 0}, 80), map);
    CHECK_FALSE(corner[static_cast<int>(Action::West)]);
    CHECK_FALSE(corner[static_cast<int>(Action::South)]);
    CHECK(corner[static_cast<int>(Action::North)]);
    CHECK(corner[static_cast<int>(Action::East)]);
    CHECK(corner[static_cast<int>(Action::Hover)]);

    // zero slack, terminal strictly north-east
    const ActionMask tight = legal_actions(uav_at({5, 5}, 8), map);
    CHECK(tight == ActionMask{false, true, false, false, true});

    // two units of slack admit every action in the interior
    const ActionMask loose = legal_actions(uav_at({5, 5}, 10), map);
    for (bool b : loose) CHECK(b);

    // half a unit of slack only buys a hover
    const ActionMask half = legal_actions(uav_at({5, 5}, 8.5), map);
    CHECK(half == ActionMask{true, true, false, false, true});

    CHECK_THROWS_AS(legal_actions(uav_at({5, 5}, 7), map), ContractViolation);
  }

  TEST_CASE("return base reserves a step out and back on the base cell") {
    const CityMap map = testing::flat_map(6, 6, {2, 2}, {2, 2});
    CHECK(reserve_halves({2, 2}, map) == 4);
    CHECK(reserve_halves({2, 3}, map) == 2);
    const ActionMask at_base = legal_actions(uav_at({2, 2}, 2), map);
    CHECK(at_base == ActionMask{false, true, true, true, true});
  }

  TEST_CASE("random rollouts under the safety controller always finish at the terminal") {
    std::mt19937_64 rng(99);
    for (int episode = 0; episode < 300; ++episode) {
      std::uniform_int_distribution<int> dim(2, 12);
      const int w = dim(rng), l = dim(rng);
      std::uniform_int_distribution<int> ux(0, w - 1), uy(0, l - 1);
      const Cell start{ux(rng), uy(rng)};
      Cell terminal{ux(rng), uy(rng)};
      const bool rb = episode % 4 == 0;
      if (rb) terminal = start;
      if (!rb && terminal == start) continue;
      const CityMap map = testing::flat_map(w, l, start, terminal);
      UavState uav{start, 60.0, Battery::from_halves(reserve_halves(start, map) + 2 * (episode % 20))};
      const Battery initial = uav.battery;
      double consumed = 0.0;
      bool moved = false;
      bool finished = false;
      for (int t = 0; t < 2 * initial.halves() + 2; ++t) {
        const ActionMask legal = legal_actions(uav, map);
        std::vector<Action> options;
        for (Action a : kAllActions)
          if (legal[static_cast<int>(a)]) options.push_back(a);
        REQUIRE_FALSE(options.empty());
        const Action a = options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
        const UavState next = apply_action(uav, a, map);
        const double e = uav.battery.units() - next.battery.units();
        CHECK((e == 0.5 || e == 1.0));
        consumed += e;
        REQUIRE(map.contains(next.position));
        uav = next;
        moved |= a != Action::Hover;
        if (a != Action::Hover && uav.position == map.terminal()) {
          finished = true;
          break;
        }
      }
      CHECK(finished);
      CHECK(uav.battery.halves() >= 0);
      CHECK(consumed == initial.units() - uav.battery.units());
      (void)moved;
    }
  }

  TEST_CASE("scenario JSON round-trips and rejects invalid content") {
    const Scenario s = small_scenario();
    CHECK(scenario_from_json(scenario_to_json(s)) == s);

    const auto dir = testing::scratch_dir("world_json");
    save_scenario(s, dir / "nested" / "s.json");
    CHECK(load_scenario(dir / "nested" / "s.json") == s);

    Scenario bad = s;
    bad.devices[0].position = Cell{-1, -1};
    for (int x = 0; x < bad.map.width() && bad.devices[0].position.x < 0; ++x)
      for (int y = 0; y < bad.map.length(); ++y)
        if (bad.map.is_building({x, y})) {
          bad.devices[0].position = {x, y};
          break;
        }
    REQUIRE(bad.map.is_building(bad.devices[0].position));
    CHECK_THROWS_AS(scenario_from_json(scenario_to_json(bad)), ScenarioFormatError);

    CHECK_THROWS_AS(scenario_from_json("{not json"), ScenarioFormatError);
    try {
      scenario_from_json(R"({"cell_size_m": 20, "heights": [[0, 0], [0]], "start": [0, 0]})");
      FAIL("expected ScenarioFormatError");
    } catch (const ScenarioFormatError& e) {
      CHECK(std::string(e.what()).find("heights[1]") != std::string::npos);
    }
  }

  TEST_CASE("a scenario with the default parameters loads") {
    CityParams cp;
    Scenario s;
    s.map = generate_city(21, cp);
    s.devices = place_devices(s.map, DeviceParams{}, 22);
    s.initial_battery = Battery::from_units(80);
    s.seed = 22;
    CHECK(s.map.cell_size() == 20.0);
    CHECK(s.map.max_height() <= 50.0);
    const auto dir = testing::scratch_dir("world_default");
    save_scenario(s, dir / "s.json");
    const Scenario loaded = load_scenario(dir / "s.json");
    CHECK(loaded.devices.size() == 6);
    CHECK(loaded.initial_battery.units() == 80.0);
  }
}
