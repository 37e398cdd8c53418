#pragma once

// Multi-objective discrete soft actor-critic: replay, preference sampling,
// vector-valued twin critics, entropy-regularised actor, adaptive entropy
// coefficient, annealed behaviour temperature and Polyak target updates.

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "harvest/autodiff.hpp"
#include "harvest/momdp.hpp"
#include "harvest/nets.hpp"

namespace harvest::mosac {

using ad::Matrix;
using momdp::Vec2;

inline constexpr int kActions = world::kNumActions;
using ActionProbs = std::array<double, kActions>;

struct TrainConfig {
  double lr = 3e-4;
  int batch = 32;
  double gamma = 0.99;
  int prefs_per_update = 3;
  double entropy_start_frac = 0.6;  // of ln|A|
  double entropy_final_frac = 0.3;
  double tau_start = 5.0;
  double tau_final = 1.5;
  long anneal_steps = 100000;
  double target_rho = 0.005;
  long eval_every = 20000;
  long total_steps = 0;
  std::size_t replay_capacity = 100000;
  /// Environment steps before the first update.
  long learning_starts = 1000;
  /// Environment steps between gradient updates.
  int update_every = 1;
  double initial_nu = 0.1;
  /// Fixed preference for behaviour and updates; sampled when absent.
  std::optional<Vec2> fixed_preference;

  double entropy_max() const;
  /// Throws std::invalid_argument naming the broken invariant.
  void validate() const;
};

struct Transition {
  momdp::TokenState state;  // preference slot is overwritten at sampling time
  int action = 0;
  Vec2 reward{0.0, 0.0};
  momdp::TokenState next_state;
  bool done = false;
  world::ActionMask legal{};
  world::ActionMask next_legal{};
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);
  void add(Transition t);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& operator[](std::size_t i) const { return items_[i]; }
  /// Uniform with replacement.
  std::vector<std::size_t> sample(std::size_t count, std::mt19937_64& rng) const;

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<Transition> items_;
};

/// Uniform on the 2-simplex.
std::vector<Vec2> sample_preferences(int count, std::mt19937_64& rng);

/// Linear H_0 -> H_final over anneal_steps, constant afterwards.
double entropy_target(long step, const TrainConfig& cfg);
/// Linear tau_0 -> tau_final over anneal_steps, constant afterwards.
double temperature(long step, const TrainConfig& cfg);

/// softmax(logits / tau) over legal actions; illegal actions get exactly 0.
ActionProbs heated_softmax(std::span<const double> logits, double tau, const world::ActionMask& legal);
double entropy(const ActionProbs& p);

ad::Mask legal_mask(std::span<const world::ActionMask> legal);

/// Per-action scalarised critic values Q^T w: (n x M|A|) -> (n x |A|).
Matrix scalarize_q(const Matrix& q, const Matrix& prefs);
/// Row-wise twin choice: the twin whose policy-expected scalarised value is
/// smaller supplies the whole M x |A| block.
Matrix select_twin(const Matrix& q1, const Matrix& q2, const Matrix& probs, const Matrix& prefs);

/// y = r + gamma (1 - done) sum_a pi(a) (Qbar(., a) - nu log pi(a)), n x M.
/// Masked actions carry pi = 0 and contribute nothing.
Matrix compute_target_y(const Matrix& rewards, std::span<const double> done, const Matrix& next_probs,
                        const Matrix& next_log_probs, const Matrix& next_q, double nu, double gamma);

/// 1/2 mean_i ||Q(s_i, a_i) - y_i||^2 for one critic.
ad::Tensor critic_loss(const ad::Tensor& q, std::span<const int> actions, const Matrix& y);
/// mean_i pi_i^T (nu log pi_i - qw_i) over legal actions.
ad::Tensor actor_loss(const ad::Tensor& logits, const ad::Mask& legal, const Matrix& qw, double nu);
/// mean_i pi_i^T [-nu (log pi_i + H)] with nu = exp(log_nu).
ad::Tensor entropy_coefficient_loss(const ad::Tensor& log_nu, const Matrix& probs, const Matrix& log_probs,
                                    double target);

/// target <- (1 - rho) target + rho online.
void soft_update(nets::Network& target, const nets::Network& online, double rho);

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct UpdateStats {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double nu_loss = 0.0;
  double nu = 0.0;
  double policy_entropy = 0.0;
};

/// Actor, twin critics, target twins, entropy coefficient and their optimisers.
class Agent {
 public:
  Agent(const nets::NetworkSpec& spec, const TrainConfig& cfg, std::uint64_t seed);
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  const nets::Network& actor() const { return *actor_; }
  const nets::Network& critic(int i) const { return i == 0 ? *critic1_ : *critic2_; }
  const nets::Network& target(int i) const { return i == 0 ? *target1_ : *target2_; }
  nets::Network& actor() { return *actor_; }
  nets::Network& critic(int i) { return i == 0 ? *critic1_ : *critic2_; }
  double nu() const;
  const nets::NetworkSpec& spec() const { return spec_; }
  const TrainConfig& config() const { return cfg_; }
  momdp::TokenConfig token_config() const;

  ActionProbs policy(const momdp::TokenState& s, const world::ActionMask& legal, double tau = 1.0) const;
  world::Action act_greedy(const momdp::TokenState& s, const world::ActionMask& legal) const;
  world::Action act_sample(const momdp::TokenState& s, const world::ActionMask& legal, double tau,
                           std::mt19937_64& rng) const;

  /// One gradient step of critics, actor and nu on the given transitions,
  /// each paired with every preference; then a Polyak step of the targets.
  UpdateStats update(std::span<const Transition* const> batch, std::span<const Vec2> prefs, double entropy_goal);

  void save(const std::filesystem::path& path, const std::string& header_json) const;
  /// Returns the stored header.
  std::string load(const std::filesystem::path& path);

 private:
  nets::NetworkSpec spec_;
  TrainConfig cfg_;
  std::unique_ptr<nets::Network> actor_, critic1_, critic2_, target1_, target2_;
  ad::Parameter log_nu_;
  std::unique_ptr<ad::Adam> actor_opt_, critic_opt_, nu_opt_;
};

/// Episode source for training: returns a scenario for each new episode.
using ScenarioFactory = std::function<std::shared_ptr<const world::Scenario>(std::mt19937_64&)>;

/// Ordered named metric columns.
using Metrics = std::vector<std::pair<std::string, double>>;
/// Called every eval_every steps and after the last step.
using Evaluator = std::function<Metrics(const Agent&, long step)>;

struct TrainOptions {
  std::filesystem::path out_dir;        // metrics.csv and checkpoints/; empty disables files
  channel::ChannelParams channel;
  Evaluator evaluator;
  std::string header_json = "{}";
  bool verbose = false;
};

struct TrainResult {
  long steps = 0;
  long episodes = 0;
  long updates = 0;
  std::vector<Metrics> evaluations;
  std::vector<std::filesystem::path> checkpoints;
};

/// Runs the training loop. Throws NumericalError (after writing a diagnostic
/// dump under out_dir) if any loss turns non-finite.
TrainResult train(Agent& agent, const ScenarioFactory& scenarios, const TrainOptions& opts, std::uint64_t seed);

}  // namespace harvest::mosac
