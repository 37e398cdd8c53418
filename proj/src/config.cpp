#include "harvest/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

namespace harvest::config {

namespace pt = boost::property_tree;

namespace {

struct Binding {
  std::string section;
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& raw, const std::string& where) {
  const std::string s = trim(raw);
  T value{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError(where + ": cannot parse '" + s + "' as a number");
  }
  return value;
}

bool parse_bool(const std::string& raw, const std::string& where) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(where + ": expected a boolean, got '" + s + "'");
}

std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc{} ? std::string(buf, end) : std::to_string(v);
}

/// "a, b" -> (a, b)
std::pair<double, double> parse_pair(const std::string& raw, const std::string& where) {
  const auto comma = raw.find(',');
  if (comma == std::string::npos) throw ConfigError(where + ": expected 'a, b', got '" + raw + "'");
  return {parse_number<double>(raw.substr(0, comma), where), parse_number<double>(raw.substr(comma + 1), where)};
}

std::optional<world::Cell> parse_cell(const std::string& raw, const std::string& where) {
  if (trim(raw).empty() || trim(raw) == "auto") return std::nullopt;
  const auto comma = raw.find(',');
  if (comma == std::string::npos) throw ConfigError(where + ": expected 'x, y' or 'auto'");
  return world::Cell{parse_number<int>(raw.substr(0, comma), where), parse_number<int>(raw.substr(comma + 1), where)};
}

std::string format_cell(const std::optional<world::Cell>& c) {
  return c ? std::to_string(c->x) + ", " + std::to_string(c->y) : "auto";
}

class Table {
 public:
  void add(std::string section, std::string key, std::function<void(const std::string&)> set,
           std::function<std::string()> get) {
    bindings_.push_back({std::move(section), std::move(key), std::move(set), std::move(get)});
  }

  template <class T>
  void number(const std::string& section, const std::string& key, T& ref) {
    const std::string where = section + "." + key;
    if constexpr (std::is_floating_point_v<T>) {
      add(section, key, [&ref, where](const std::string& s) { ref = parse_number<T>(s, where); },
          [&ref] { return format_double(ref); });
    } else {
      add(section, key, [&ref, where](const std::string& s) { ref = parse_number<T>(s, where); },
          [&ref] { return std::to_string(ref); });
    }
  }

  void flag(const std::string& section, const std::string& key, bool& ref) {
    const std::string where = section + "." + key;
    add(section, key, [&ref, where](const std::string& s) { ref = parse_bool(s, where); },
        [&ref] { return std::string(ref ? "true" : "false"); });
  }

  const Binding* find(const std::string& section, const std::string& key) const {
    for (const auto& b : bindings_)
      if (b.section == section && b.key == key) return &b;
    return nullptr;
  }
  bool has_section(const std::string& section) const {
    for (const auto& b : bindings_)
      if (b.section == section) return true;
    return false;
  }
  const std::vector<Binding>& bindings() const { return bindings_; }

 private:
  std::vector<Binding> bindings_;
};

Table bind(RunConfig& c) {
  Table t;
  t.number("run", "seed", c.seed);
  t.add("run", "output_dir", [&c](const std::string& s) { c.output_dir = trim(s); }, [&c] { return c.output_dir; });
  t.add("run", "algo", [&c](const std::string& s) { c.algo = parse_algorithm(trim(s)); },
        [&c] { return std::string(algorithm_name(c.algo)); });

  auto& w = c.world;
  t.number("world", "width", w.city.width);
  t.number("world", "length", w.city.length);
  t.number("world", "cell_size", w.city.cell_size);
  t.number("world", "building_density", w.city.building_density);
  t.number("world", "min_building_height", w.city.min_height);
  t.number("world", "max_building_height", w.city.max_height);
  t.number("world", "min_building_side", w.city.min_building_side);
  t.number("world", "max_building_side", w.city.max_building_side);
  t.add("world", "start", [&w](const std::string& s) { w.city.start = parse_cell(s, "world.start"); },
        [&w] { return format_cell(w.city.start); });
  t.add("world", "terminal", [&w](const std::string& s) { w.city.terminal = parse_cell(s, "world.terminal"); },
        [&w] { return format_cell(w.city.terminal); });
  t.add(
      "world", "kind",
      [&w](const std::string& raw) {
        const std::string s = trim(raw);
        if (s == "rd") w.kind = world::ScenarioKind::ReachDestination;
        else if (s == "rb") w.kind = world::ScenarioKind::ReturnBase;
        else throw ConfigError("world.kind: expected 'rd' or 'rb', got '" + s + "'");
      },
      [&w] { return std::string(w.kind == world::ScenarioKind::ReturnBase ? "rb" : "rd"); });
  t.number("world", "map_seed", w.map_seed);
  t.number("world", "devices", w.devices.count);
  t.number("world", "min_spacing", w.devices.min_spacing);
  t.number("world", "data_min", w.devices.data_min);
  t.number("world", "data_max", w.devices.data_max);
  t.number("world", "battery", w.battery);
  t.number("world", "altitude", w.altitude);

  auto& ch = c.channel;
  t.number("channel", "tx_power_dbm", ch.tx_power_dbm);
  t.number("channel", "noise_power_dbm", ch.noise_power_dbm);
  t.number("channel", "snr_threshold_db", ch.snr_threshold_db);
  t.number("channel", "alpha_los", ch.alpha_los);
  t.number("channel", "alpha_nlos", ch.alpha_nlos);
  t.number("channel", "beta_los_db", ch.beta_los_db);
  t.number("channel", "beta_nlos_db", ch.beta_nlos_db);
  t.number("channel", "shadow_var_los", ch.shadow_var_los);
  t.number("channel", "shadow_var_nlos", ch.shadow_var_nlos);
  t.flag("channel", "shadowing", ch.shadowing_enabled);
  t.flag("channel", "fading", ch.fading_enabled);
  t.number("channel", "slot_duration", ch.slot_duration);
  t.number("channel", "data_scale", ch.data_scale);

  t.number("momdp", "data_max", c.momdp.data_max);
  t.number("momdp", "snr_log_min", c.momdp.snr_log_min);
  t.number("momdp", "snr_log_max", c.momdp.snr_log_max);

  t.number("net", "embed_dim", c.net.embed_dim);
  t.number("net", "heads", c.net.heads);
  t.number("net", "layers", c.net.layers);
  t.number("net", "ffn_hidden", c.net.ffn_hidden);
  t.number("net", "head_hidden", c.net.head_hidden);
  t.number("net", "k_max", c.net.k_max);
  t.number("net", "local_crop", c.net.local_crop);
  t.number("net", "ftv_hidden", c.ftv_hidden);

  auto& tr = c.train;
  t.number("train", "lr", tr.lr);
  t.number("train", "batch", tr.batch);
  t.number("train", "gamma", tr.gamma);
  t.number("train", "prefs_per_update", tr.prefs_per_update);
  t.number("train", "entropy_start_frac", tr.entropy_start_frac);
  t.number("train", "entropy_final_frac", tr.entropy_final_frac);
  t.number("train", "tau_start", tr.tau_start);
  t.number("train", "tau_final", tr.tau_final);
  t.number("train", "anneal_steps", tr.anneal_steps);
  t.number("train", "target_rho", tr.target_rho);
  t.number("train", "eval_every", tr.eval_every);
  t.number("train", "steps", tr.total_steps);
  t.number("train", "replay_capacity", tr.replay_capacity);
  t.number("train", "learning_starts", tr.learning_starts);
  t.number("train", "update_every", tr.update_every);
  t.number("train", "initial_nu", tr.initial_nu);
  t.add(
      "train", "fixed_preference",
      [&tr](const std::string& s) {
        if (trim(s).empty() || trim(s) == "none") tr.fixed_preference.reset();
        else {
          const auto [a, b] = parse_pair(s, "train.fixed_preference");
          tr.fixed_preference = momdp::Vec2{a, b};
        }
      },
      [&tr] {
        return tr.fixed_preference ? format_double((*tr.fixed_preference)[0]) + ", " +
                                         format_double((*tr.fixed_preference)[1])
                                   : std::string("none");
      });

  auto& ev = c.eval;
  t.number("eval", "scenarios", ev.scenarios);
  t.number("eval", "seed", ev.seed);
  t.number("eval", "threads", ev.threads);
  t.number("eval", "fading_repeats", ev.fading_repeats);
  t.add(
      "eval", "reference",
      [&ev](const std::string& s) {
        const auto [a, b] = parse_pair(s, "eval.reference");
        ev.reference = {a, b};
      },
      [&ev] { return format_double(ev.reference[0]) + ", " + format_double(ev.reference[1]); });
  t.number("eval", "greedy_slack", ev.greedy_slack);
  t.number("eval", "greedy_data_epsilon", ev.greedy_data_epsilon);
  t.flag("eval", "greedy_preference_scaled", ev.greedy_preference_scaled);
  return t;
}

}  // namespace

const char* algorithm_name(Algorithm a) { return a == Algorithm::MosacFtv ? "mosac-ftv" : "mosac-att"; }

Algorithm parse_algorithm(const std::string& name) {
  if (name == "mosac-att") return Algorithm::MosacAtt;
  if (name == "mosac-ftv") return Algorithm::MosacFtv;
  throw ConfigError("unknown algorithm '" + name + "' (expected mosac-att or mosac-ftv)");
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(world.city.width > 0 && world.city.length > 0, "world: map dimensions must be positive");
  require(world.city.cell_size > 0.0, "world.cell_size must be positive");
  require(world.city.building_density >= 0.0 && world.city.building_density < 1.0,
          "world.building_density must lie in [0, 1)");
  require(world.devices.count >= 0, "world.devices must be non-negative");
  require(world.devices.data_min > 0.0 && world.devices.data_min <= world.devices.data_max,
          "world: need 0 < data_min <= data_max");
  require(world.battery > 0, "world.battery must be positive");
  require(world.altitude > 0.0, "world.altitude must be positive");
  require(channel.slot_duration > 0.0 && channel.data_scale > 0.0,
          "channel: slot_duration and data_scale must be positive");
  require(channel.shadow_var_los >= 0.0 && channel.shadow_var_nlos >= 0.0, "channel: variances must be >= 0");
  require(momdp.data_max > 0.0, "momdp.data_max must be positive");
  require(momdp.snr_log_max > momdp.snr_log_min && momdp.snr_log_max > 0.0,
          "momdp: need snr_log_min < snr_log_max and snr_log_max > 0");
  require(ftv_hidden > 0, "net.ftv_hidden must be positive");
  require(eval.scenarios > 0, "eval.scenarios must be positive");
  require(eval.threads > 0, "eval.threads must be positive");
  require(eval.fading_repeats > 1, "eval.fading_repeats must exceed 1");
  try {
    net.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (algo == Algorithm::MosacAtt) {
    require(world.devices.count <= net.k_max, "world.devices exceeds net.k_max");
  }
}

nets::NetworkSpec RunConfig::network_spec() const {
  nets::NetworkSpec spec;
  spec.kind = algo == Algorithm::MosacFtv ? nets::NetworkSpec::Kind::Ftv : nets::NetworkSpec::Kind::Attention;
  spec.encoder = net;
  spec.ftv_devices = world.devices.count;
  spec.ftv_hidden = ftv_hidden;
  spec.features = momdp;
  return spec;
}

RunConfig parse_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  RunConfig cfg;
  const Table table = bind(cfg);
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError("key '" + section + "' outside of any section");
    if (!table.has_section(section)) throw ConfigError("unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      const Binding* b = table.find(section, key);
      if (!b) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
      b->set(value.data());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_ini(const RunConfig& cfg) {
  RunConfig copy = cfg;
  const Table table = bind(copy);
  std::ostringstream os;
  std::string section;
  for (const auto& b : table.bindings()) {
    if (b.section != section) {
      if (!section.empty()) os << '\n';
      section = b.section;
      os << '[' << section << "]\n";
    }
    os << b.key << " = " << b.get() << '\n';
  }
  return os.str();
}

world::CityMap make_map(const RunConfig& cfg) {
  world::CityParams params = cfg.world.city;
  params.return_base = cfg.world.kind == world::ScenarioKind::ReturnBase;
  return world::generate_city(cfg.world.map_seed, params);
}

world::Scenario make_scenario(const RunConfig& cfg, const world::CityMap& map, std::uint64_t seed, int device_count,
                              int battery) {
  world::DeviceParams devices = cfg.world.devices;
  if (device_count > 0) devices.count = device_count;
  world::Scenario s;
  s.map = map;
  s.devices = world::place_devices(map, devices, seed);
  s.initial_battery = world::Battery::from_units(battery > 0 ? battery : cfg.world.battery);
  s.altitude = cfg.world.altitude;
  s.kind = cfg.world.kind;
  s.seed = seed;
  return s;
}

}  // namespace harvest::config
