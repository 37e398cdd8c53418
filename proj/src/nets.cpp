#include "harvest/nets.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace harvest::nets {

namespace {

using ad::Mask;

std::string join(const std::string& a, const std::string& b) { return a.empty() ? b : a + "/" + b; }

Matrix uniform_matrix(int rows, int cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace

const char* role_name(Role r) { return r == Role::Actor ? "actor" : "critic"; }

int output_size(Role r) {
  return r == Role::Actor ? world::kNumActions : momdp::kObjectives * world::kNumActions;
}

void EncoderConfig::validate() const {
  if (embed_dim <= 0 || heads <= 0) throw std::invalid_argument("net: embed_dim and heads must be positive");
  if (embed_dim % heads != 0) throw std::invalid_argument("net: embed_dim must be divisible by heads");
  if (layers < 0) throw std::invalid_argument("net: layers must be >= 0");
  if (ffn_hidden <= 0 || head_hidden <= 0) throw std::invalid_argument("net: hidden widths must be positive");
  if (k_max < 1) throw std::invalid_argument("net: k_max must be >= 1");
  if (local_crop < 1) throw std::invalid_argument("net: local_crop must be >= 1");
}

// ---------------------------------------------------------------------------
// Batches

TokenBatch TokenBatch::from_states(std::span<const momdp::TokenState* const> states) {
  TokenBatch b;
  b.size = static_cast<int>(states.size());
  if (states.empty()) return b;
  b.k_max = static_cast<int>(states.front()->mask.size());
  const int lm = static_cast<int>(states.front()->local_map.size());
  b.uav.resize(b.size, momdp::kUavFeatures);
  b.devices.resize(static_cast<Eigen::Index>(b.size) * b.k_max, momdp::kDeviceFeatures);
  b.preference.resize(b.size, momdp::kObjectives);
  b.local_map.resize(b.size, lm);
  b.device_mask.resize(static_cast<std::size_t>(b.size) * b.k_max);
  for (int i = 0; i < b.size; ++i) {
    const momdp::TokenState& s = *states[i];
    if (static_cast<int>(s.mask.size()) != b.k_max || static_cast<int>(s.local_map.size()) != lm ||
        s.devices.size() != static_cast<std::size_t>(b.k_max) * momdp::kDeviceFeatures) {
      throw ad::DimensionError("token batch: state " + std::to_string(i) + " has a different layout");
    }
    for (int f = 0; f < momdp::kUavFeatures; ++f) b.uav(i, f) = s.uav[f];
    for (int m = 0; m < momdp::kObjectives; ++m) b.preference(i, m) = s.preference[m];
    for (int c = 0; c < lm; ++c) b.local_map(i, c) = s.local_map[c];
    for (int k = 0; k < b.k_max; ++k) {
      b.device_mask[static_cast<std::size_t>(i) * b.k_max + k] = s.mask[k];
      for (int f = 0; f < momdp::kDeviceFeatures; ++f) {
        b.devices(static_cast<Eigen::Index>(i) * b.k_max + k, f) = s.devices[k * momdp::kDeviceFeatures + f];
      }
    }
  }
  return b;
}

TokenBatch TokenBatch::from_states(std::span<const momdp::TokenState> states) {
  std::vector<const momdp::TokenState*> ptrs;
  ptrs.reserve(states.size());
  for (const auto& s : states) ptrs.push_back(&s);
  return from_states(std::span<const momdp::TokenState* const>(ptrs));
}

TokenBatch TokenBatch::with_preferences(const TokenBatch& base, std::span<const momdp::Vec2> prefs) {
  if (static_cast<int>(prefs.size()) != base.size) {
    throw ad::DimensionError("token batch: " + std::to_string(prefs.size()) + " preferences for " +
                             std::to_string(base.size) + " states");
  }
  TokenBatch b = base;
  for (int i = 0; i < b.size; ++i) {
    for (int m = 0; m < momdp::kObjectives; ++m) b.preference(i, m) = prefs[i][m];
  }
  return b;
}

TokenBatch TokenBatch::tile_preferences(const TokenBatch& base, std::span<const momdp::Vec2> prefs) {
  const int reps = static_cast<int>(prefs.size());
  const int n = base.size, k = base.k_max;
  TokenBatch b;
  b.size = n * reps;
  b.k_max = k;
  b.uav.resize(b.size, base.uav.cols());
  b.devices.resize(static_cast<Eigen::Index>(b.size) * k, base.devices.cols());
  b.preference.resize(b.size, momdp::kObjectives);
  b.local_map.resize(b.size, base.local_map.cols());
  b.device_mask.reserve(static_cast<std::size_t>(b.size) * k);
  for (int j = 0; j < reps; ++j) {
    b.uav.middleRows(static_cast<Eigen::Index>(j) * n, n) = base.uav;
    b.devices.middleRows(static_cast<Eigen::Index>(j) * n * k, static_cast<Eigen::Index>(n) * k) = base.devices;
    b.local_map.middleRows(static_cast<Eigen::Index>(j) * n, n) = base.local_map;
    for (int i = 0; i < n; ++i) {
      for (int m = 0; m < momdp::kObjectives; ++m) b.preference(j * n + i, m) = prefs[j][m];
    }
    b.device_mask.insert(b.device_mask.end(), base.device_mask.begin(), base.device_mask.end());
  }
  return b;
}

std::vector<std::string> token_labels(int k_max) {
  std::vector<std::string> out{"uav"};
  for (int k = 1; k <= k_max; ++k) out.push_back("dev" + std::to_string(k));
  out.push_back("w");
  out.push_back("map");
  return out;
}

// ---------------------------------------------------------------------------
// Building blocks

std::vector<const Parameter*> Network::parameters() const {
  auto ps = const_cast<Network*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->size();
  return n;
}

Matrix Network::infer(const TokenBatch& batch, AttentionTrace* trace) const {
  Tape tape;
  tape.set_grad_enabled(false);
  return forward(tape, batch, false, trace).value();
}

Linear::Linear(const std::string& name, int in, int out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = Parameter(join(name, "weight"), uniform_matrix(in, out, bound, rng));
  bias = Parameter(join(name, "bias"), uniform_matrix(1, out, bound, rng));
}

Tensor Linear::operator()(Tape& tape, const Tensor& x, bool train) const {
  return ad::add_bias(ad::matmul(x, tape.param(weight, train)), tape.param(bias, train));
}

LayerNormParams::LayerNormParams(const std::string& name, int dim)
    : gamma(join(name, "gamma"), Matrix::Ones(1, dim)), beta(join(name, "beta"), Matrix::Zero(1, dim)) {}

Tensor LayerNormParams::operator()(Tape& tape, const Tensor& x, bool train) const {
  return ad::layer_norm(x, tape.param(gamma, train), tape.param(beta, train));
}

// ---------------------------------------------------------------------------
// Attention network

AttentionNetwork::AttentionNetwork(const EncoderConfig& cfg, Role role, std::uint64_t seed, const std::string& name)
    : cfg_(cfg), role_(role) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::string root = name.empty() ? role_name(role) : name;
  const int d = cfg_.embed_dim;
  proj_uav_ = Linear(root + "/proj_uav", momdp::kUavFeatures, d, rng);
  proj_device_ = Linear(root + "/proj_device", momdp::kDeviceFeatures, d, rng);
  proj_pref_ = Linear(root + "/proj_pref", momdp::kObjectives, d, rng);
  proj_map_ = Linear(root + "/proj_map", cfg_.local_map_size(), d, rng);
  layers_.reserve(cfg_.layers);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = root + "/enc" + std::to_string(l);
    EncoderLayer layer;
    layer.query = Linear(p + "/query", d, d, rng);
    layer.key = Linear(p + "/key", d, d, rng);
    layer.value = Linear(p + "/value", d, d, rng);
    layer.out = Linear(p + "/out", d, d, rng);
    layer.norm1 = LayerNormParams(p + "/norm1", d);
    layer.ffn1 = Linear(p + "/ffn1", d, cfg_.ffn_hidden, rng);
    layer.ffn2 = Linear(p + "/ffn2", cfg_.ffn_hidden, d, rng);
    layer.norm2 = LayerNormParams(p + "/norm2", d);
    layers_.push_back(std::move(layer));
  }
  head1_ = Linear(root + "/head1", 4 * d, cfg_.head_hidden, rng);
  head2_ = Linear(root + "/head2", cfg_.head_hidden, output_size(role), rng);
}

std::vector<Parameter*> AttentionNetwork::parameters() {
  std::vector<Parameter*> out;
  auto lin = [&](Linear& l) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  };
  auto norm = [&](LayerNormParams& n) {
    out.push_back(&n.gamma);
    out.push_back(&n.beta);
  };
  lin(proj_uav_);
  lin(proj_device_);
  lin(proj_pref_);
  lin(proj_map_);
  for (auto& l : layers_) {
    lin(l.query);
    lin(l.key);
    lin(l.value);
    lin(l.out);
    norm(l.norm1);
    lin(l.ffn1);
    lin(l.ffn2);
    norm(l.norm2);
  }
  lin(head1_);
  lin(head2_);
  return out;
}

Tensor AttentionNetwork::embed(Tape& tape, const TokenBatch& batch, bool train) const {
  const int n = batch.size, k = batch.k_max, tokens = k + 3;
  if (k != cfg_.k_max || batch.local_map.cols() != cfg_.local_map_size()) {
    throw ad::DimensionError("attention net: batch layout (k_max " + std::to_string(k) + ", map " +
                             std::to_string(batch.local_map.cols()) + ") does not match the network (k_max " +
                             std::to_string(cfg_.k_max) + ", map " + std::to_string(cfg_.local_map_size()) + ")");
  }
  const Tensor u = proj_uav_(tape, tape.constant(batch.uav), train);
  std::vector<double> keep(batch.device_mask.begin(), batch.device_mask.end());
  const Tensor dev = ad::scale_rows(proj_device_(tape, tape.constant(batch.devices), train), keep);
  const Tensor w = proj_pref_(tape, tape.constant(batch.preference), train);
  const Tensor lm = proj_map_(tape, tape.constant(batch.local_map), train);
  const Tensor stacked = ad::concat_rows({u, dev, w, lm});

  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(n) * tokens);
  for (int i = 0; i < n; ++i) {
    order.push_back(i);
    for (int j = 0; j < k; ++j) order.push_back(n + i * k + j);
    order.push_back(n + n * k + i);
    order.push_back(2 * n + n * k + i);
  }
  return ad::gather_rows(stacked, order);
}

Tensor AttentionNetwork::encode(Tape& tape, const Tensor& x, const ad::Mask& key_mask, int n, int layer,
                                bool train, AttentionTrace* trace) const {
  (void)n;
  const EncoderLayer& l = layers_[layer];
  const int tokens = cfg_.tokens();
  const int dh = cfg_.embed_dim / cfg_.heads;
  const Tensor q = l.query(tape, x, train);
  const Tensor kk = l.key(tape, x, train);
  const Tensor v = l.value(tape, x, train);
  std::vector<Tensor> heads;
  heads.reserve(cfg_.heads);
  for (int h = 0; h < cfg_.heads; ++h) {
    const Tensor qh = ad::slice_cols(q, h * dh, dh);
    const Tensor kh = ad::slice_cols(kk, h * dh, dh);
    const Tensor vh = ad::slice_cols(v, h * dh, dh);
    const Tensor scores = ad::scale(ad::group_matmul_nt(qh, kh, tokens), 1.0 / std::sqrt(static_cast<double>(dh)));
    const Tensor probs = ad::masked_softmax(scores, key_mask);
    if (trace) trace->probs[layer][h] = probs.value();
    heads.push_back(ad::group_matmul(probs, vh, tokens));
  }
  const Tensor attended = l.out(tape, cfg_.heads == 1 ? heads.front() : ad::concat_cols(heads), train);
  const Tensor x1 = l.norm1(tape, ad::add(x, attended), train);
  const Tensor ff = l.ffn2(tape, ad::relu(l.ffn1(tape, x1, train)), train);
  return l.norm2(tape, ad::add(x1, ff), train);
}

Tensor AttentionNetwork::aggregate(Tape& tape, const Tensor& x, const TokenBatch& batch) const {
  (void)tape;
  const int n = batch.size, k = batch.k_max, tokens = k + 3;
  std::vector<int> uav_rows(n), pref_rows(n), map_rows(n);
  for (int i = 0; i < n; ++i) {
    uav_rows[i] = i * tokens;
    pref_rows[i] = i * tokens + k + 1;
    map_rows[i] = i * tokens + k + 2;
  }
  const Tensor pooled = ad::max_pool_rows(x, tokens, 1, k, batch.device_mask);
  return ad::concat_cols(
      {ad::gather_rows(x, uav_rows), pooled, ad::gather_rows(x, pref_rows), ad::gather_rows(x, map_rows)});
}

Tensor AttentionNetwork::forward(Tape& tape, const TokenBatch& batch, bool train, AttentionTrace* trace) const {
  if (batch.size <= 0) throw ad::DimensionError("attention net: empty batch");
  const int n = batch.size, k = batch.k_max, tokens = k + 3;
  Tensor x = embed(tape, batch, train);

  // Device keys are masked per element; uav, w and map keys never are.
  Mask key_mask(static_cast<std::size_t>(n) * tokens * tokens, 1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      if (batch.device_mask[static_cast<std::size_t>(i) * k + j]) continue;
      for (int r = 0; r < tokens; ++r) key_mask[(static_cast<std::size_t>(i) * tokens + r) * tokens + 1 + j] = 0;
    }
  }
  if (trace) trace->probs.assign(cfg_.layers, std::vector<Matrix>(cfg_.heads));
  for (int l = 0; l < cfg_.layers; ++l) x = encode(tape, x, key_mask, n, l, train, trace);
  const Tensor latent = aggregate(tape, x, batch);
  return head2_(tape, ad::relu(head1_(tape, latent, train)), train);
}

// ---------------------------------------------------------------------------
// Feature-vector baseline

FtvNetwork::FtvNetwork(int devices, Role role, std::uint64_t seed, int hidden, const std::string& name)
    : devices_(devices), role_(role) {
  if (devices < 1) throw std::invalid_argument("ftv net: device count must be >= 1");
  if (hidden < 1) throw std::invalid_argument("ftv net: hidden width must be >= 1");
  std::mt19937_64 rng(seed);
  const std::string root = name.empty() ? role_name(role) : name;
  l1_ = Linear(root + "/fc1", input_size(), hidden, rng);
  l2_ = Linear(root + "/fc2", hidden, hidden, rng);
  l3_ = Linear(root + "/fc3", hidden, output_size(role), rng);
}

std::vector<Parameter*> FtvNetwork::parameters() {
  return {&l1_.weight, &l1_.bias, &l2_.weight, &l2_.bias, &l3_.weight, &l3_.bias};
}

Matrix FtvNetwork::features(const TokenBatch& batch) const {
  if (batch.k_max != devices_) {
    throw ad::DimensionError("ftv net: built for " + std::to_string(devices_) + " devices, batch has " +
                             std::to_string(batch.k_max) + " slots");
  }
  for (std::uint8_t m : batch.device_mask) {
    if (!m) throw ad::DimensionError("ftv net: every device slot must be occupied");
  }
  const int n = batch.size;
  Matrix f(n, input_size());
  for (int i = 0; i < n; ++i) {
    int c = 0;
    for (int j = 0; j < momdp::kUavFeatures; ++j) f(i, c++) = batch.uav(i, j);
    for (int k = 0; k < devices_; ++k) {
      for (int j = 0; j < momdp::kDeviceFeatures; ++j) {
        f(i, c++) = batch.devices(static_cast<Eigen::Index>(i) * devices_ + k, j);
      }
    }
    for (int m = 0; m < momdp::kObjectives; ++m) f(i, c++) = batch.preference(i, m);
  }
  return f;
}

Tensor FtvNetwork::forward_features(Tape& tape, const Tensor& features, bool train) const {
  if (features.cols() != input_size()) {
    throw ad::DimensionError("ftv net: input " + ad::shape_str(features.rows(), features.cols()) +
                             " but the network expects width " + std::to_string(input_size()));
  }
  const Tensor h1 = ad::relu(l1_(tape, features, train));
  const Tensor h2 = ad::relu(l2_(tape, h1, train));
  return l3_(tape, h2, train);
}

Tensor FtvNetwork::forward(Tape& tape, const TokenBatch& batch, bool train, AttentionTrace* trace) const {
  (void)trace;
  return forward_features(tape, tape.constant(features(batch)), train);
}

momdp::TokenConfig NetworkSpec::token_config() const {
  momdp::TokenConfig t;
  t.k_max = kind == Kind::Ftv ? ftv_devices : encoder.k_max;
  t.local_crop = encoder.local_crop;
  t.scale = features;
  return t;
}

std::unique_ptr<Network> make_network(const NetworkSpec& spec, Role role, std::uint64_t seed,
                                      const std::string& name) {
  if (spec.kind == NetworkSpec::Kind::Ftv) {
    return std::make_unique<FtvNetwork>(spec.ftv_devices, role, seed, spec.ftv_hidden, name);
  }
  return std::make_unique<AttentionNetwork>(spec.encoder, role, seed, name);
}

ParamCounts param_count(const NetworkSpec& spec) {
  ParamCounts c;
  c.actor = make_network(spec, Role::Actor, 0, "actor")->param_count();
  c.critic = make_network(spec, Role::Critic, 0, "critic")->param_count();
  c.trainable_total = c.actor + 2 * c.critic;
  c.with_targets = c.trainable_total + 2 * c.critic;
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_parameters(const std::filesystem::path& path, const std::string& header_json,
                     const std::vector<std::pair<std::string, const Network*>>& nets) {
  using nlohmann::json;
  json root;
  root["format"] = "harvest-parameters";
  root["version"] = 1;
  root["header"] = header_json.empty() ? json::object() : json::parse(header_json);
  json& all = root["networks"];
  all = json::object();
  for (const auto& [key, net] : nets) {
    json params = json::object();
    for (const Parameter* p : net->parameters()) {
      json t;
      t["rows"] = p->value.rows();
      t["cols"] = p->value.cols();
      t["data"] = std::vector<double>(p->value.data(), p->value.data() + p->value.size());
      params[p->name] = std::move(t);
    }
    all[key] = std::move(params);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << root.dump() << '\n';
}

std::string load_parameters(const std::filesystem::path& path,
                            const std::vector<std::pair<std::string, Network*>>& nets) {
  using nlohmann::json;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint " + path.string() + ": " + e.what());
  }
  if (root.value("format", "") != "harvest-parameters") {
    throw std::runtime_error("checkpoint " + path.string() + ": unrecognised format");
  }
  for (const auto& [key, net] : nets) {
    if (!root["networks"].contains(key)) throw std::runtime_error("checkpoint lacks network '" + key + "'");
    const json& params = root["networks"][key];
    for (Parameter* p : net->parameters()) {
      if (!params.contains(p->name)) throw std::runtime_error("checkpoint lacks parameter '" + p->name + "'");
      const json& t = params[p->name];
      const auto rows = t.at("rows").get<Eigen::Index>(), cols = t.at("cols").get<Eigen::Index>();
      if (rows != p->value.rows() || cols != p->value.cols()) {
        throw std::runtime_error("parameter '" + p->name + "' has shape " + ad::shape_str(rows, cols) +
                                 " in the checkpoint, expected " + ad::shape_str(p->value.rows(), p->value.cols()));
      }
      const auto data = t.at("data").get<std::vector<double>>();
      std::copy(data.begin(), data.end(), p->value.data());
    }
  }
  return root["header"].dump();
}

}  // namespace harvest::nets
