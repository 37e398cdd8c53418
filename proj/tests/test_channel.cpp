#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "harvest/channel.hpp"
#include "support.hpp"

using namespace harvest;
using namespace harvest::channel;
using world::Cell;

namespace {

/// Same geometric test sampled every c/1000 of horizontal travel; cells own
/// the half-open square [x*c - c/2, x*c + c/2).
LinkCondition dense_los_oracle(const world::CityMap& map, Cell uav, double h, Cell dev) {
  const double c = map.cell_size();
  const double x0 = uav.x * c, y0 = uav.y * c, x1 = dev.x * c, y1 = dev.y * c;
  const double horiz = std::hypot(x1 - x0, y1 - y0);
  const int n = std::max(1, static_cast<int>(std::ceil(horiz / (c / 1000.0))));
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const int cx = static_cast<int>(std::floor((x0 + t * (x1 - x0)) / c + 0.5));
    const int cy = static_cast<int>(std::floor((y0 + t * (y1 - y0)) / c + 0.5));
    if (cx < 0 || cy < 0 || cx >= map.width() || cy >= map.length()) continue;
    if (h * (1.0 - t) < map.height(cx, cy)) return LinkCondition::NLoS;
  }
  return LinkCondition::LoS;
}

/// True when the ray's ground track goes exactly through a lattice corner
/// next to a building taller than the ray there. Which of the four cells a
/// sample on the corner belongs to is a rounding convention, so such
/// instances have no geometric answer.
bool grazes_building_corner(const world::CityMap& map, Cell a, Cell b, double h) {
  const int dx = b.x - a.x, dy = b.y - a.y;
  if (dx == 0 || dy == 0) return false;
  // x = a.x + dx t crosses k + 1/2 where 2 dx t = 2k + 1 - 2 a.x; likewise y
  for (int k = std::min(a.x, b.x); k < std::max(a.x, b.x); ++k)
    for (int m = std::min(a.y, b.y); m < std::max(a.y, b.y); ++m) {
      if ((2 * k + 1 - 2 * a.x) * dy != (2 * m + 1 - 2 * a.y) * dx) continue;
      const double t = (k + 0.5 - a.x) / dx;
      for (const Cell c : {Cell{k, m}, Cell{k + 1, m}, Cell{k, m + 1}, Cell{k + 1, m + 1}})
        if (map.contains(c) && map.height(c) > h * (1.0 - t)) return true;
    }
  return false;
}

ChannelParams deterministic() {
  ChannelParams p;
  p.shadowing_enabled = false;
  p.fading_enabled = false;
  return p;
}

world::Scenario scenario_on(world::CityMap map, std::vector<world::Device> devices) {
  world::Scenario s;
  s.map = std::move(map);
  s.devices = std::move(devices);
  s.initial_battery = world::Battery::from_units(40);
  return s;
}

}  // namespace

TEST_SUITE("channel") {
  TEST_CASE("line of sight on trivial geometry") {
    const auto flat = testing::flat_map(10, 10, {0, 0}, {9, 9});
    CHECK(los_condition(flat, {3, 3}, 60.0, {3, 3}) == LinkCondition::LoS);
    CHECK(los_condition(flat, {0, 0}, 60.0, {9, 7}) == LinkCondition::LoS);
  }

  TEST_CASE("a single building midway blocks iff the ray passes below its top") {
    // UAV at x=0, device at x=4, building on x=2: ray height over the building
    // cell spans [h*(1 - 50/80), h*(1 - 30/80)] = [22.5, 37.5] for h=60.
    std::vector<double> heights(5 * 1, 0.0);
    heights[2] = 50.0;
    const world::CityMap tall(5, 1, 20.0, heights, {0, 0}, {4, 0});
    CHECK(los_condition(tall, {0, 0}, 60.0, {4, 0}) == LinkCondition::NLoS);
    CHECK(dense_los_oracle(tall, {0, 0}, 60.0, {4, 0}) == LinkCondition::NLoS);
    heights[2] = 20.0;
    const world::CityMap low(5, 1, 20.0, heights, {0, 0}, {4, 0});
    CHECK(los_condition(low, {0, 0}, 60.0, {4, 0}) == LinkCondition::LoS);
    CHECK(dense_los_oracle(low, {0, 0}, 60.0, {4, 0}) == LinkCondition::LoS);
  }

  TEST_CASE("line of sight agrees with the dense oracle on random geometry") {
    std::mt19937_64 rng(2024);
    world::CityParams cp;
    cp.width = 12;
    cp.length = 12;
    cp.building_density = 0.3;
    int agree = 0, nlos = 0, degenerate = 0;
    constexpr int kInstances = 1000;
    for (int i = 0; i < kInstances; ++i) {
      world::CityMap map;
      try {
        map = world::generate_city(rng(), cp);
      } catch (const world::GenerationError&) {
        --i;  // dense footprints occasionally exhaust the placement budget
        continue;
      }
      std::uniform_int_distribution<int> coord(0, 11);
      const Cell uav{coord(rng), coord(rng)};
      Cell dev{coord(rng), coord(rng)};
      while (map.is_building(dev)) dev = {coord(rng), coord(rng)};
      if (grazes_building_corner(map, uav, dev, 60.0)) {
        ++degenerate;
        continue;
      }
      const LinkCondition got = los_condition(map, uav, 60.0, dev);
      const LinkCondition want = dense_los_oracle(map, uav, 60.0, dev);
      agree += got == want;
      nlos += want == LinkCondition::NLoS;
    }
    INFO("NLoS instances: " << nlos << ", corner grazes excluded: " << degenerate);
    CHECK(nlos > 100);
    CHECK(kInstances - degenerate >= 800);
    CHECK(agree == kInstances - degenerate);
  }

  TEST_CASE("gain follows the log-distance law") {
    const ChannelParams p = deterministic();
    CHECK(channel_gain_db(p, 1.0, LinkCondition::LoS) == doctest::Approx(-30.0).epsilon(1e-12));
    CHECK(channel_gain_db(p, 100.0, LinkCondition::LoS) == doctest::Approx(-35.0).epsilon(1e-12));
    CHECK(channel_gain_db(p, 100.0, LinkCondition::NLoS) == doctest::Approx(-41.08).epsilon(1e-12));
    CHECK(channel_gain_db(p, 0.2, LinkCondition::LoS) == channel_gain_db(p, 1.0, LinkCondition::LoS));
    CHECK(channel_gain_db(p, 100.0, LinkCondition::LoS, 1.5, -0.5) ==
          doctest::Approx(-34.0).epsilon(1e-12));
  }

  TEST_CASE("shadowing samples have the configured variance") {
    ChannelParams p;
    std::mt19937_64 rng(5);
    for (auto z : {LinkCondition::LoS, LinkCondition::NLoS}) {
      double sum = 0.0, sq = 0.0;
      constexpr int n = 200000;
      for (int i = 0; i < n; ++i) {
        const double v = sample_shadowing_db(p, z, rng);
        sum += v;
        sq += v * v;
      }
      const double var = sq / n - (sum / n) * (sum / n);
      CHECK(std::abs(sum / n) < 0.02);
      CHECK(var == doctest::Approx(z == LinkCondition::LoS ? 2.0 : 5.0).epsilon(0.02));
    }
    p.shadowing_enabled = false;
    CHECK(sample_shadowing_db(p, LinkCondition::NLoS, rng) == 0.0);
  }

  TEST_CASE("Rayleigh fading has unit scale") {
    ChannelParams p;
    p.fading_enabled = true;
    std::mt19937_64 rng(6);
    double power = 0.0;
    constexpr int n = 200000;
    for (int i = 0; i < n; ++i) power += std::pow(10.0, sample_fading_db(p, rng) / 10.0);
    // E|h|^2 = 2 sigma^2 = 2 for Rayleigh(1)
    CHECK(power / n == doctest::Approx(2.0).epsilon(0.02));
    p.fading_enabled = false;
    CHECK(sample_fading_db(p, rng) == 0.0);
  }

  TEST_CASE("SNR, rate and effective rate") {
    ChannelParams p;
    p.noise_power_dbm = -90.0;
    CHECK(snr_linear(p, -35.0) == doctest::Approx(std::pow(10.0, 9.1)).epsilon(1e-12));
    CHECK(snr_linear(p, p.noise_power_dbm - p.tx_power_dbm) == doctest::Approx(1.0).epsilon(1e-12));
    double prev = 0.0;
    for (double g = -140.0; g <= 0.0; g += 5.0) {
      const double s = snr_linear(p, g);
      CHECK(s > prev);
      CHECK(rate(s) >= rate(prev));
      prev = s;
    }
    CHECK(rate(0.0) == 0.0);
    CHECK(rate(1.0) == 1.0);
    CHECK(rate(3.0) == 2.0);

    ChannelParams unit;
    unit.data_scale = 1.0;
    CHECK(effective_rate(10.0, 1e6, unit) == 10.0);
    CHECK(effective_rate(10.0, 4.0, unit) == 4.0);
    CHECK(effective_rate(10.0, 0.0, unit) == 0.0);
  }

  TEST_CASE("scheduling picks the strongest reachable device with data") {
    ChannelParams p;
    const std::vector<double> snrs{std::pow(10.0, 0.3), std::pow(10.0, 0.7)};
    const bool reach[] = {above_threshold(p, snrs[0]), above_threshold(p, snrs[1])};
    const std::vector<double> data{10.0, 10.0};
    CHECK_FALSE(reach[0]);
    CHECK(reach[1]);
    CHECK(schedule(snrs, reach, data) == std::optional<std::size_t>(1));

    const bool none[] = {false, false};
    CHECK_FALSE(schedule(snrs, none, data).has_value());
    const bool both[] = {true, true};
    const std::vector<double> empty_second{10.0, 0.0};
    CHECK(schedule(snrs, both, empty_second) == std::optional<std::size_t>(0));
    const std::vector<double> tied{5.0, 5.0};
    CHECK(schedule(tied, both, data) == std::optional<std::size_t>(0));
  }

  TEST_CASE("collection drains at most the remaining data") {
    ChannelParams p;
    p.data_scale = 1.0;
    std::vector<world::Device> devices{{{0, 0}, 5.0, 5.0}, {{1, 1}, 9.0, 9.0}};
    // rate log2(1 + 255) = 8 for device 0, device 1 below threshold
    const std::vector<double> snrs{255.0, 1.0};
    const CollectResult r = collect_step(devices, snrs, p);
    CHECK(r.scheduled == std::optional<std::size_t>(0));
    CHECK(r.collected == 5.0);
    CHECK(devices[0].remaining_data == 0.0);
    CHECK(devices[1].remaining_data == 9.0);

    const std::vector<double> weak{1.0, 1.0};
    const CollectResult idle = collect_step(devices, weak, p);
    CHECK_FALSE(idle.scheduled.has_value());
    CHECK(idle.collected == 0.0);
    CHECK(devices[1].remaining_data == 9.0);
  }

  TEST_CASE("conservation over many random slots") {
    std::mt19937_64 rng(8);
    ChannelParams p;
    std::vector<world::Device> devices;
    for (int k = 0; k < 5; ++k) devices.push_back({{k, 0}, 3000.0 + 500 * k, 3000.0 + 500 * k});
    const double initial = 3000 * 5 + 500 * 10;
    double collected = 0.0;
    std::uniform_real_distribution<double> snr_db_dist(-5.0, 15.0);
    for (int t = 0; t < 400; ++t) {
      std::vector<double> snrs(devices.size());
      for (auto& s : snrs) s = std::pow(10.0, snr_db_dist(rng) / 10.0);
      const double before = std::accumulate(devices.begin(), devices.end(), 0.0,
                                            [](double a, const world::Device& d) { return a + d.remaining_data; });
      int drained = 0;
      std::vector<double> prev;
      for (const auto& d : devices) prev.push_back(d.remaining_data);
      const CollectResult r = collect_step(devices, snrs, p);
      for (std::size_t k = 0; k < devices.size(); ++k) {
        drained += devices[k].remaining_data != prev[k];
        CHECK(devices[k].remaining_data >= 0.0);
      }
      CHECK(drained <= 1);
      const double after = std::accumulate(devices.begin(), devices.end(), 0.0,
                                           [](double a, const world::Device& d) { return a + d.remaining_data; });
      CHECK(before - after == doctest::Approx(r.collected).epsilon(1e-12));
      collected += r.collected;
    }
    const double remaining = std::accumulate(devices.begin(), devices.end(), 0.0,
                                             [](double a, const world::Device& d) { return a + d.remaining_data; });
    CHECK(initial - remaining == doctest::Approx(collected).epsilon(1e-12));
    CHECK(collected <= initial * (1.0 + 1e-12));
  }

  TEST_CASE("link state is a deterministic function of geometry without randomness") {
    const auto map = testing::flat_map(8, 8, {0, 0}, {7, 7});
    const auto s = scenario_on(map, {{{3, 4}, 6000, 6000}, {{6, 1}, 6000, 6000}});
    const ChannelParams p = deterministic();
    LinkState a(p, s, 1), b(p, s, 999);
    CHECK(a.snr() == b.snr());
    a.update(s, {2, 2}, true);
    b.update(s, {2, 2}, true);
    CHECK(a.snr() == b.snr());
    const double d = link_distance(map, {2, 2}, 60.0, {3, 4});
    CHECK(a.snr()[0] == doctest::Approx(snr_linear(p, channel_gain_db(p, d, LinkCondition::LoS))).epsilon(1e-12));
  }

  TEST_CASE("shadowing is held while hovering and resampled on moves") {
    const auto map = testing::flat_map(8, 8, {0, 0}, {7, 7});
    const auto s = scenario_on(map, {{{3, 4}, 6000, 6000}});
    LinkState link(ChannelParams{}, s, 3);
    link.update(s, {1, 1}, true);
    const double first = link.snr()[0];
    link.update(s, {1, 1}, false);
    CHECK(link.snr()[0] == first);
    link.update(s, {1, 1}, true);
    CHECK(link.snr()[0] != first);

    LinkState replay_a(ChannelParams{}, s, 11), replay_b(ChannelParams{}, s, 11);
    for (Cell c : {Cell{1, 0}, Cell{1, 1}, Cell{2, 1}}) {
      replay_a.update(s, c, true);
      replay_b.update(s, c, true);
      CHECK(replay_a.snr() == replay_b.snr());
    }
  }

  TEST_CASE("three-dimensional link distance") {
    const auto map = testing::flat_map(8, 8, {0, 0}, {7, 7});
    CHECK(link_distance(map, {0, 0}, 60.0, {0, 0}) == 60.0);
    CHECK(link_distance(map, {0, 0}, 60.0, {4, 0}) == doctest::Approx(100.0).epsilon(1e-12));
  }

  TEST_CASE("parameter validation names the broken invariant") {
    ChannelParams p;
    p.alpha_nlos = 2.0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    ChannelParams q;
    q.shadow_var_los = -1.0;
    CHECK_THROWS_AS(q.validate(), std::invalid_argument);
    CHECK_NOTHROW(ChannelParams{}.validate());
  }
}
