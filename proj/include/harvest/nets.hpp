#pragma once

// Preference-conditioned actor/critic networks over token states: per-type
// linear projectors, post-norm self-attention encoder layers, MaxPool over
// device rows and an MLP head. Also the flat feed-forward baseline.

#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "harvest/autodiff.hpp"
#include "harvest/momdp.hpp"

namespace harvest::nets {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Tensor;

enum class Role { Actor, Critic };
const char* role_name(Role r);
/// Output width: |A| logits for the actor, M x |A| values for a critic.
int output_size(Role r);

struct EncoderConfig {
  int embed_dim = 64;
  int heads = 4;
  int layers = 2;
  int ffn_hidden = 128;
  int head_hidden = 64;
  int k_max = 12;
  int local_crop = 10;

  int tokens() const { return k_max + 3; }
  int local_map_size() const { return 2 * local_crop * local_crop; }
  /// Throws std::invalid_argument naming the broken invariant.
  void validate() const;
};

/// n token states stacked for one forward pass.
struct TokenBatch {
  int size = 0;
  int k_max = 0;
  Matrix uav;                 // n x 4
  Matrix devices;             // (n * k_max) x 5, element-major
  Matrix preference;          // n x 2
  Matrix local_map;           // n x lm
  ad::Mask device_mask;       // n x k_max

  static TokenBatch from_states(std::span<const momdp::TokenState* const> states);
  static TokenBatch from_states(std::span<const momdp::TokenState> states);
  /// Same states, each paired with its own preference vector.
  static TokenBatch with_preferences(const TokenBatch& base, std::span<const momdp::Vec2> prefs);
  /// Tiles the batch once per preference: row j * n + i holds state i under prefs[j].
  static TokenBatch tile_preferences(const TokenBatch& base, std::span<const momdp::Vec2> prefs);
};

/// Attention probabilities recorded during a forward pass:
/// probs[layer][head] is (n * T) x T, rows are queries.
struct AttentionTrace {
  std::vector<std::vector<Matrix>> probs;
};

std::vector<std::string> token_labels(int k_max);

class Network {
 public:
  virtual ~Network() = default;
  virtual Role role() const = 0;
  /// n x output_size(role).
  virtual Tensor forward(Tape& tape, const TokenBatch& batch, bool train = true,
                         AttentionTrace* trace = nullptr) const = 0;
  virtual std::unique_ptr<Network> clone() const = 0;
  virtual std::vector<Parameter*> parameters() = 0;
  std::vector<const Parameter*> parameters() const;
  std::size_t param_count() const;

  /// Gradient-free forward.
  Matrix infer(const TokenBatch& batch, AttentionTrace* trace = nullptr) const;
};

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, int in, int out, std::mt19937_64& rng);
  Tensor operator()(Tape& tape, const Tensor& x, bool train) const;
};

struct LayerNormParams {
  Parameter gamma;
  Parameter beta;

  LayerNormParams() = default;
  LayerNormParams(const std::string& name, int dim);
  Tensor operator()(Tape& tape, const Tensor& x, bool train) const;
};

struct EncoderLayer {
  Linear query, key, value, out;
  LayerNormParams norm1;
  Linear ffn1, ffn2;
  LayerNormParams norm2;
};

class AttentionNetwork final : public Network {
 public:
  AttentionNetwork(const EncoderConfig& cfg, Role role, std::uint64_t seed, const std::string& name = "");

  Role role() const override { return role_; }
  const EncoderConfig& config() const { return cfg_; }
  Tensor forward(Tape& tape, const TokenBatch& batch, bool train = true,
                 AttentionTrace* trace = nullptr) const override;
  std::unique_ptr<Network> clone() const override { return std::make_unique<AttentionNetwork>(*this); }
  std::vector<Parameter*> parameters() override;

  /// (n * T) x d token matrix in order [uav, devices..., w, local map];
  /// masked device rows are zero.
  Tensor embed(Tape& tape, const TokenBatch& batch, bool train) const;
  /// One post-norm block: MHA, add, norm, FFN, add, norm.
  Tensor encode(Tape& tape, const Tensor& x, const ad::Mask& key_mask, int n, int layer, bool train,
                AttentionTrace* trace) const;
  /// n x 4d: [uav row, max over unmasked device rows, w row, local-map row].
  Tensor aggregate(Tape& tape, const Tensor& x, const TokenBatch& batch) const;

 private:
  EncoderConfig cfg_;
  Role role_;
  Linear proj_uav_, proj_device_, proj_pref_, proj_map_;
  std::vector<EncoderLayer> layers_;
  Linear head1_, head2_;
};

/// Two 128-wide hidden layers over [s_uav, s_1..s_K, w]; K fixed at build.
class FtvNetwork final : public Network {
 public:
  FtvNetwork(int devices, Role role, std::uint64_t seed, int hidden = 128, const std::string& name = "");

  Role role() const override { return role_; }
  int devices() const { return devices_; }
  int input_size() const { return momdp::kUavFeatures + momdp::kDeviceFeatures * devices_ + momdp::kObjectives; }
  /// Tokens must hold exactly `devices()` active slots, in order.
  Tensor forward(Tape& tape, const TokenBatch& batch, bool train = true,
                 AttentionTrace* trace = nullptr) const override;
  /// Rows are [ftv_state ++ w]; wrong width is a DimensionError.
  Tensor forward_features(Tape& tape, const Tensor& features, bool train = true) const;
  std::unique_ptr<Network> clone() const override { return std::make_unique<FtvNetwork>(*this); }
  std::vector<Parameter*> parameters() override;

  Matrix features(const TokenBatch& batch) const;

 private:
  int devices_;
  Role role_;
  Linear l1_, l2_, l3_;
};

struct NetworkSpec {
  enum class Kind { Attention, Ftv } kind = Kind::Attention;
  EncoderConfig encoder;
  int ftv_devices = 6;
  int ftv_hidden = 128;
  momdp::FeatureScale features;

  /// Token layout the networks consume (FTV uses exactly ftv_devices slots).
  momdp::TokenConfig token_config() const;
};

std::unique_ptr<Network> make_network(const NetworkSpec& spec, Role role, std::uint64_t seed,
                                      const std::string& name);

// ---------------------------------------------------------------------------
// Checkpoints: named parameter tensors plus a free-form JSON header.

struct ParamCounts {
  std::size_t actor = 0;
  std::size_t critic = 0;
  /// Actor plus two online critics.
  std::size_t trainable_total = 0;
  /// Including the two target critics.
  std::size_t with_targets = 0;
};

ParamCounts param_count(const NetworkSpec& spec);

void save_parameters(const std::filesystem::path& path, const std::string& header_json,
                     const std::vector<std::pair<std::string, const Network*>>& nets);
/// Restores parameters by name; throws std::runtime_error on missing names or
/// shape mismatches. Returns the header JSON text.
std::string load_parameters(const std::filesystem::path& path,
                            const std::vector<std::pair<std::string, Network*>>& nets);

}  // namespace harvest::nets
