#include "harvest/mosac.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace harvest::mosac {

using ad::Mask;
using ad::Tape;
using ad::Tensor;

double TrainConfig::entropy_max() const { return std::log(static_cast<double>(kActions)); }

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("train: gamma must lie in (0, 1)");
  if (prefs_per_update < 1) throw std::invalid_argument("train: prefs_per_update must be >= 1");
  if (entropy_final_frac > entropy_start_frac) {
    throw std::invalid_argument("train: final entropy target must not exceed the initial one");
  }
  if (!(tau_final > 0.0) || tau_final > tau_start) {
    throw std::invalid_argument("train: need 0 < tau_final <= tau_start");
  }
  if (anneal_steps < 0 || total_steps < 0 || learning_starts < 0) {
    throw std::invalid_argument("train: step counts must be >= 0");
  }
  if (!(target_rho >= 0.0 && target_rho <= 1.0)) throw std::invalid_argument("train: target_rho must lie in [0, 1]");
  if (eval_every < 1) throw std::invalid_argument("train: eval_every must be >= 1");
  if (replay_capacity < 1) throw std::invalid_argument("train: replay_capacity must be >= 1");
  if (update_every < 1) throw std::invalid_argument("train: update_every must be >= 1");
  if (!(initial_nu > 0.0)) throw std::invalid_argument("train: initial_nu must be positive");
  if (fixed_preference) momdp::PreferenceVector((*fixed_preference)[0], (*fixed_preference)[1]);
}

// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be >= 1");
  items_.reserve(std::min<std::size_t>(capacity, 4096));
}

void ReplayBuffer::add(Transition t) {
  if (items_.size() < capacity_) {
    items_.push_back(std::move(t));
  } else {
    items_[next_] = std::move(t);
  }
  next_ = (next_ + 1) % capacity_;
}

std::vector<std::size_t> ReplayBuffer::sample(std::size_t count, std::mt19937_64& rng) const {
  if (items_.empty()) throw std::logic_error("cannot sample from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
  std::vector<std::size_t> out(count);
  for (auto& i : out) i = pick(rng);
  return out;
}

std::vector<Vec2> sample_preferences(int count, std::mt19937_64& rng) {
  if (count < 1) throw std::invalid_argument("sample_preferences: count must be >= 1");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Vec2> out(count);
  for (auto& w : out) {
    const double a = u(rng);
    w = {a, 1.0 - a};
  }
  return out;
}

namespace {

double progress(long step, long horizon) {
  if (horizon <= 0) return 1.0;
  return std::clamp(static_cast<double>(step) / static_cast<double>(horizon), 0.0, 1.0);
}

/// Row-wise masked softmax and log-softmax of plain matrices.
void masked_policy(const Matrix& logits, const Mask& mask, Matrix& probs, Matrix& log_probs) {
  const Eigen::Index n = logits.rows(), m = logits.cols();
  probs = Matrix::Zero(n, m);
  log_probs = Matrix::Zero(n, m);
  for (Eigen::Index r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (Eigen::Index c = 0; c < m; ++c)
      if (mask[r * m + c]) {
        any = true;
        mx = std::max(mx, logits(r, c));
      }
    if (!any) throw ad::ContractError("policy row " + std::to_string(r) + " has no legal action");
    if (!std::isfinite(mx) || !logits.row(r).allFinite()) throw NumericalError("actor logits are not finite");
    double z = 0.0;
    for (Eigen::Index c = 0; c < m; ++c)
      if (mask[r * m + c]) z += std::exp(logits(r, c) - mx);
    const double lz = std::log(z);
    for (Eigen::Index c = 0; c < m; ++c) {
      if (!mask[r * m + c]) continue;
      log_probs(r, c) = logits(r, c) - mx - lz;
      probs(r, c) = std::exp(log_probs(r, c));
    }
  }
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

double entropy_target(long step, const TrainConfig& cfg) {
  const double t = progress(step, cfg.anneal_steps);
  const double frac = cfg.entropy_start_frac + t * (cfg.entropy_final_frac - cfg.entropy_start_frac);
  return frac * cfg.entropy_max();
}

double temperature(long step, const TrainConfig& cfg) {
  const double t = progress(step, cfg.anneal_steps);
  return cfg.tau_start + t * (cfg.tau_final - cfg.tau_start);
}

ActionProbs heated_softmax(std::span<const double> logits, double tau, const world::ActionMask& legal) {
  if (logits.size() != static_cast<std::size_t>(kActions)) {
    throw ad::DimensionError("heated_softmax: expected " + std::to_string(kActions) + " logits");
  }
  if (!(tau > 0.0)) throw std::invalid_argument("heated_softmax: temperature must be positive");
  ActionProbs p{};
  if (std::none_of(legal.begin(), legal.end(), [](bool b) { return b; }))
    throw ad::ContractError("heated_softmax: no legal action");
  double mx = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < kActions; ++a)
    if (legal[a]) mx = std::max(mx, logits[a] / tau);
  if (!std::isfinite(mx)) throw NumericalError("heated_softmax: logits are not finite");
  double z = 0.0;
  for (int a = 0; a < kActions; ++a) {
    if (!legal[a]) continue;
    p[a] = std::exp(logits[a] / tau - mx);
    z += p[a];
  }
  for (double& v : p) v /= z;
  return p;
}

double entropy(const ActionProbs& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

Mask legal_mask(std::span<const world::ActionMask> legal) {
  Mask m;
  m.reserve(legal.size() * kActions);
  for (const auto& row : legal)
    for (bool b : row) m.push_back(b ? 1 : 0);
  return m;
}

Matrix scalarize_q(const Matrix& q, const Matrix& prefs) {
  if (q.cols() != momdp::kObjectives * kActions || prefs.cols() != momdp::kObjectives || q.rows() != prefs.rows()) {
    throw ad::DimensionError("scalarize_q: got q " + ad::shape_str(q.rows(), q.cols()) + " and w " +
                             ad::shape_str(prefs.rows(), prefs.cols()));
  }
  Matrix out = Matrix::Zero(q.rows(), kActions);
  for (int m = 0; m < momdp::kObjectives; ++m) {
    out += q.middleCols(m * kActions, kActions).cwiseProduct(prefs.col(m).replicate(1, kActions));
  }
  return out;
}

Matrix select_twin(const Matrix& q1, const Matrix& q2, const Matrix& probs, const Matrix& prefs) {
  const Matrix v1 = scalarize_q(q1, prefs).cwiseProduct(probs).rowwise().sum();
  const Matrix v2 = scalarize_q(q2, prefs).cwiseProduct(probs).rowwise().sum();
  Matrix out = q1;
  for (Eigen::Index r = 0; r < q1.rows(); ++r)
    if (v2(r, 0) < v1(r, 0)) out.row(r) = q2.row(r);
  return out;
}

Matrix compute_target_y(const Matrix& rewards, std::span<const double> done, const Matrix& next_probs,
                        const Matrix& next_log_probs, const Matrix& next_q, double nu, double gamma) {
  const Eigen::Index n = rewards.rows();
  if (rewards.cols() != momdp::kObjectives || static_cast<Eigen::Index>(done.size()) != n ||
      next_probs.rows() != n || next_probs.cols() != kActions || next_log_probs.rows() != n ||
      next_log_probs.cols() != kActions || next_q.rows() != n || next_q.cols() != momdp::kObjectives * kActions) {
    throw ad::DimensionError("compute_target_y: inconsistent batch shapes");
  }
  Matrix y = rewards;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (done[i] != 0.0) continue;
    for (int m = 0; m < momdp::kObjectives; ++m) {
      double v = 0.0;
      for (int a = 0; a < kActions; ++a) {
        const double p = next_probs(i, a);
        if (p == 0.0) continue;
        v += p * (next_q(i, m * kActions + a) - nu * next_log_probs(i, a));
      }
      y(i, m) += gamma * (1.0 - done[i]) * v;
    }
  }
  return y;
}

Tensor critic_loss(const Tensor& q, std::span<const int> actions, const Matrix& y) {
  const Eigen::Index n = q.rows();
  if (q.cols() != momdp::kObjectives * kActions || static_cast<Eigen::Index>(actions.size()) != n ||
      y.rows() != n || y.cols() != momdp::kObjectives) {
    throw ad::DimensionError("critic_loss: q " + ad::shape_str(q.rows(), q.cols()) + ", y " +
                             ad::shape_str(y.rows(), y.cols()));
  }
  Tape& tape = *q.tape();
  // Select Q(s, a, .) with a one-hot mask, then fold the M blocks into columns.
  Matrix select = Matrix::Zero(n, q.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    for (int m = 0; m < momdp::kObjectives; ++m) select(i, m * kActions + actions[i]) = 1.0;
  Matrix fold = Matrix::Zero(q.cols(), momdp::kObjectives);
  for (int m = 0; m < momdp::kObjectives; ++m)
    for (int a = 0; a < kActions; ++a) fold(m * kActions + a, m) = 1.0;
  const Tensor q_taken = ad::matmul(ad::mul(q, tape.constant(std::move(select))), tape.constant(std::move(fold)));
  const Tensor residual = ad::sub(q_taken, tape.constant(y));
  return ad::scale(ad::sum(ad::mul(residual, residual)), 0.5 / static_cast<double>(n));
}

Tensor actor_loss(const Tensor& logits, const Mask& legal, const Matrix& qw, double nu) {
  if (qw.rows() != logits.rows() || qw.cols() != logits.cols()) {
    throw ad::DimensionError("actor_loss: logits " + ad::shape_str(logits.rows(), logits.cols()) + ", qw " +
                             ad::shape_str(qw.rows(), qw.cols()));
  }
  Tape& tape = *logits.tape();
  const Tensor probs = ad::masked_softmax(logits, legal);
  const Tensor log_probs = ad::masked_log_softmax(logits, legal);
  const Tensor inner = ad::sub(ad::scale(log_probs, nu), tape.constant(qw));
  return ad::scale(ad::sum(ad::mul(probs, inner)), 1.0 / static_cast<double>(logits.rows()));
}

Tensor entropy_coefficient_loss(const Tensor& log_nu, const Matrix& probs, const Matrix& log_probs, double target) {
  if (log_nu.rows() != 1 || log_nu.cols() != 1) throw ad::DimensionError("entropy_coefficient_loss: log_nu must be 1x1");
  const Eigen::Index n = probs.rows();
  // mean_i pi_i^T (log pi_i + H) = H - mean entropy
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index a = 0; a < probs.cols(); ++a)
      if (probs(i, a) > 0.0) acc += probs(i, a) * (log_probs(i, a) + target);
  acc /= static_cast<double>(n);
  Tape& tape = *log_nu.tape();
  return ad::mul(ad::exp(log_nu), tape.constant(Matrix::Constant(1, 1, -acc)));
}

void soft_update(nets::Network& target, const nets::Network& online, double rho) {
  auto t = target.parameters();
  auto o = online.parameters();
  if (t.size() != o.size()) throw ad::DimensionError("soft_update: networks differ in structure");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i]->value.rows() != o[i]->value.rows() || t[i]->value.cols() != o[i]->value.cols()) {
      throw ad::DimensionError("soft_update: parameter '" + t[i]->name + "' differs in shape");
    }
    if (rho == 1.0) {
      t[i]->value = o[i]->value;
    } else if (rho != 0.0) {
      t[i]->value = (1.0 - rho) * t[i]->value + rho * o[i]->value;
    }
  }
}

// ---------------------------------------------------------------------------
// Agent

Agent::Agent(const nets::NetworkSpec& spec, const TrainConfig& cfg, std::uint64_t seed) : spec_(spec), cfg_(cfg) {
  cfg_.validate();
  actor_ = nets::make_network(spec_, nets::Role::Actor, mix(seed, 1), "actor");
  critic1_ = nets::make_network(spec_, nets::Role::Critic, mix(seed, 2), "critic1");
  critic2_ = nets::make_network(spec_, nets::Role::Critic, mix(seed, 3), "critic2");
  target1_ = critic1_->clone();
  target2_ = critic2_->clone();
  log_nu_ = ad::Parameter("log_nu", Matrix::Constant(1, 1, std::log(cfg_.initial_nu)));

  const ad::Adam::Options opt{cfg_.lr, 0.9, 0.999, 1e-8};
  actor_opt_ = std::make_unique<ad::Adam>(actor_->parameters(), opt);
  auto critic_params = critic1_->parameters();
  for (auto* p : critic2_->parameters()) critic_params.push_back(p);
  critic_opt_ = std::make_unique<ad::Adam>(std::move(critic_params), opt);
  nu_opt_ = std::make_unique<ad::Adam>(std::vector<ad::Parameter*>{&log_nu_}, opt);
}

double Agent::nu() const { return std::exp(log_nu_.value(0, 0)); }

momdp::TokenConfig Agent::token_config() const { return spec_.token_config(); }

ActionProbs Agent::policy(const momdp::TokenState& s, const world::ActionMask& legal, double tau) const {
  const momdp::TokenState* one = &s;
  const Matrix logits = actor_->infer(nets::TokenBatch::from_states(std::span<const momdp::TokenState* const>(&one, 1)));
  if (!logits.allFinite()) throw NumericalError("actor logits are not finite");
  return heated_softmax(std::span<const double>(logits.data(), kActions), tau, legal);
}

world::Action Agent::act_greedy(const momdp::TokenState& s, const world::ActionMask& legal) const {
  const ActionProbs p = policy(s, legal);
  int best = -1;
  for (int a = 0; a < kActions; ++a)
    if (legal[a] && (best < 0 || p[a] > p[best])) best = a;
  return static_cast<world::Action>(best);
}

world::Action Agent::act_sample(const momdp::TokenState& s, const world::ActionMask& legal, double tau,
                                std::mt19937_64& rng) const {
  const ActionProbs p = policy(s, legal, tau);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double x = u(rng);
  double acc = 0.0;
  int last = -1;
  for (int a = 0; a < kActions; ++a) {
    if (!legal[a]) continue;
    last = a;
    acc += p[a];
    if (x < acc) return static_cast<world::Action>(a);
  }
  return static_cast<world::Action>(last);
}

UpdateStats Agent::update(std::span<const Transition* const> batch, std::span<const Vec2> prefs,
                          double entropy_goal) {
  const int n = static_cast<int>(batch.size());
  const int reps = static_cast<int>(prefs.size());
  if (n == 0 || reps == 0) throw std::invalid_argument("update: empty batch or preference set");
  const int rows = n * reps;

  std::vector<const momdp::TokenState*> states(n), next_states(n);
  std::vector<world::ActionMask> legal(rows), next_legal(rows);
  std::vector<int> actions(rows);
  std::vector<double> done(rows);
  Matrix rewards(rows, momdp::kObjectives);
  Matrix w(rows, momdp::kObjectives);
  for (int i = 0; i < n; ++i) {
    states[i] = &batch[i]->state;
    next_states[i] = &batch[i]->next_state;
  }
  for (int j = 0; j < reps; ++j) {
    for (int i = 0; i < n; ++i) {
      const int r = j * n + i;
      const Transition& t = *batch[i];
      legal[r] = t.legal;
      next_legal[r] = t.next_legal;
      actions[r] = t.action;
      done[r] = t.done ? 1.0 : 0.0;
      for (int m = 0; m < momdp::kObjectives; ++m) {
        rewards(r, m) = t.reward[m];
        w(r, m) = prefs[j][m];
      }
    }
  }
  const Mask mask = legal_mask(legal);
  const Mask next_mask = legal_mask(next_legal);
  const nets::TokenBatch s_batch = nets::TokenBatch::tile_preferences(
      nets::TokenBatch::from_states(std::span<const momdp::TokenState* const>(states)), prefs);
  const nets::TokenBatch next_batch = nets::TokenBatch::tile_preferences(
      nets::TokenBatch::from_states(std::span<const momdp::TokenState* const>(next_states)), prefs);

  const double nu_now = nu();
  UpdateStats stats;
  stats.nu = nu_now;

  // Targets: no gradient flows into y.
  Matrix next_probs, next_log_probs;
  masked_policy(actor_->infer(next_batch), next_mask, next_probs, next_log_probs);
  const Matrix next_q = select_twin(target1_->infer(next_batch), target2_->infer(next_batch), next_probs, w);
  const Matrix y = compute_target_y(rewards, done, next_probs, next_log_probs, next_q, nu_now, cfg_.gamma);

  Matrix q1v, q2v;
  {
    Tape tape;
    const Tensor q1 = critic1_->forward(tape, s_batch);
    const Tensor q2 = critic2_->forward(tape, s_batch);
    const Tensor loss = ad::add(critic_loss(q1, actions, y), critic_loss(q2, actions, y));
    stats.critic_loss = loss.item();
    q1v = q1.value();
    q2v = q2.value();
    if (!std::isfinite(stats.critic_loss)) throw NumericalError("critic loss is not finite");
    critic_opt_->step(tape.backward(loss));
  }

  Matrix probs, log_probs;
  {
    Tape tape;
    const Tensor logits = actor_->forward(tape, s_batch);
    masked_policy(logits.value(), mask, probs, log_probs);
    const Matrix qw = scalarize_q(select_twin(q1v, q2v, probs, w), w);
    const Tensor loss = actor_loss(logits, mask, qw, nu_now);
    stats.actor_loss = loss.item();
    if (!std::isfinite(stats.actor_loss)) throw NumericalError("actor loss is not finite");
    actor_opt_->step(tape.backward(loss));
  }

  {
    Tape tape;
    const Tensor loss = entropy_coefficient_loss(tape.param(log_nu_), probs, log_probs, entropy_goal);
    stats.nu_loss = loss.item();
    if (!std::isfinite(stats.nu_loss)) throw NumericalError("entropy coefficient loss is not finite");
    nu_opt_->step(tape.backward(loss));
  }
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    for (Eigen::Index a = 0; a < probs.cols(); ++a)
      if (probs(i, a) > 0.0) stats.policy_entropy -= probs(i, a) * log_probs(i, a);
  stats.policy_entropy /= static_cast<double>(rows);

  soft_update(*target1_, *critic1_, cfg_.target_rho);
  soft_update(*target2_, *critic2_, cfg_.target_rho);
  if (!std::isfinite(nu())) throw NumericalError("entropy coefficient is not finite");
  return stats;
}

void Agent::save(const std::filesystem::path& path, const std::string& header_json) const {
  nlohmann::json header = header_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(header_json);
  header["log_nu"] = log_nu_.value(0, 0);
  nets::save_parameters(path, header.dump(),
                        {{"actor", actor_.get()},
                         {"critic1", critic1_.get()},
                         {"critic2", critic2_.get()},
                         {"target1", target1_.get()},
                         {"target2", target2_.get()}});
}

std::string Agent::load(const std::filesystem::path& path) {
  const std::string header = nets::load_parameters(path, {{"actor", actor_.get()},
                                                          {"critic1", critic1_.get()},
                                                          {"critic2", critic2_.get()},
                                                          {"target1", target1_.get()},
                                                          {"target2", target2_.get()}});
  const auto j = nlohmann::json::parse(header);
  if (j.contains("log_nu")) log_nu_.value(0, 0) = j["log_nu"].get<double>();
  return header;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

world::Action uniform_legal(const world::ActionMask& legal, std::mt19937_64& rng) {
  std::vector<int> options;
  for (int a = 0; a < kActions; ++a)
    if (legal[a]) options.push_back(a);
  std::uniform_int_distribution<std::size_t> pick(0, options.size() - 1);
  return static_cast<world::Action>(options[pick(rng)]);
}

void write_dump(const std::filesystem::path& dir, long step, const std::string& what,
                std::span<const Transition* const> batch, std::span<const Vec2> prefs) {
  if (dir.empty()) return;
  nlohmann::json j;
  j["step"] = step;
  j["error"] = what;
  j["preferences"] = nlohmann::json::array();
  for (const auto& w : prefs) j["preferences"].push_back({w[0], w[1]});
  j["batch"] = nlohmann::json::array();
  for (const Transition* t : batch) {
    nlohmann::json e;
    e["uav"] = t->state.uav;
    e["devices"] = t->state.devices;
    e["mask"] = t->state.mask;
    e["action"] = t->action;
    e["reward"] = t->reward;
    e["done"] = t->done;
    j["batch"].push_back(std::move(e));
  }
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "nan_dump.json") << j.dump(2) << '\n';
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& dir) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    out_.open(dir / "metrics.csv");
    if (!out_) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
    out_ << std::setprecision(10);
  }
  void row(const Metrics& m) {
    if (!out_.is_open()) return;
    if (!header_written_) {
      for (std::size_t i = 0; i < m.size(); ++i) out_ << (i ? "," : "") << m[i].first;
      out_ << '\n';
      header_written_ = true;
    }
    for (std::size_t i = 0; i < m.size(); ++i) out_ << (i ? "," : "") << m[i].second;
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  bool header_written_ = false;
};

}  // namespace

TrainResult train(Agent& agent, const ScenarioFactory& scenarios, const TrainOptions& opts, std::uint64_t seed) {
  const TrainConfig& cfg = agent.config();
  const momdp::TokenConfig tokens = agent.token_config();
  std::mt19937_64 rng(mix(seed, 11));
  std::mt19937_64 env_rng(mix(seed, 12));
  ReplayBuffer buffer(cfg.replay_capacity);
  MetricsWriter metrics(opts.out_dir);
  TrainResult result;

  auto checkpoint = [&](const std::string& tag) {
    if (opts.out_dir.empty()) return;
    const auto path = opts.out_dir / "checkpoints" / (tag + ".json");
    agent.save(path, opts.header_json);
    result.checkpoints.push_back(path);
  };
  checkpoint("step_0");

  double loss_c = 0.0, loss_a = 0.0, loss_n = 0.0;
  long since = 0;
  auto evaluate = [&](long step) {
    Metrics m{{"step", static_cast<double>(step)}, {"seed", static_cast<double>(seed)}};
    if (opts.evaluator) {
      for (auto& kv : opts.evaluator(agent, step)) m.push_back(std::move(kv));
    }
    const double denom = since > 0 ? static_cast<double>(since) : 1.0;
    m.emplace_back("critic_loss", loss_c / denom);
    m.emplace_back("actor_loss", loss_a / denom);
    m.emplace_back("nu_loss", loss_n / denom);
    m.emplace_back("nu", agent.nu());
    m.emplace_back("tau", temperature(step, cfg));
    m.emplace_back("entropy_target", entropy_target(step, cfg));
    loss_c = loss_a = loss_n = 0.0;
    since = 0;
    metrics.row(m);
    if (opts.verbose) {
      std::cerr << "[train] step " << step;
      for (const auto& [k, v] : m)
        if (k != "step" && k != "seed" && k.find("_w") == std::string::npos) std::cerr << ' ' << k << '=' << v;
      std::cerr << '\n';
    }
    result.evaluations.push_back(std::move(m));
    checkpoint("step_" + std::to_string(step));
  };

  long step = 0;
  while (step < cfg.total_steps) {
    const auto scenario = scenarios(env_rng);
    const Vec2 w = cfg.fixed_preference ? *cfg.fixed_preference : sample_preferences(1, rng).front();
    const momdp::PreferenceVector pref(w[0], w[1]);
    momdp::EnvState env = momdp::reset(scenario, opts.channel, env_rng());
    ++result.episodes;
    momdp::TokenState state = momdp::token_state(env, pref, tokens);
    while (!env.done && step < cfg.total_steps) {
      Transition t;
      t.legal = env.legal();
      world::Action a;
      try {
        a = step < cfg.learning_starts ? uniform_legal(t.legal, rng)
                                       : agent.act_sample(state, t.legal, temperature(step, cfg), rng);
      } catch (const NumericalError& e) {
        t.state = state;
        const Transition* current = &t;
        write_dump(opts.out_dir, step, e.what(), std::span(&current, 1), std::span(&w, 1));
        throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step));
      }
      const momdp::StepResult res = momdp::step(env, a);
      t.state = std::move(state);
      t.action = static_cast<int>(a);
      t.reward = momdp::percent_reward(res.reward, env.total_initial_data);
      t.done = env.done && !env.truncated;
      t.next_state = momdp::token_state(env, pref, tokens);
      if (t.done) {
        t.next_legal.fill(true);  // unused: the bootstrap term is masked
      } else {
        t.next_legal = env.legal();
      }
      state = t.next_state;
      buffer.add(std::move(t));
      ++step;

      if (step >= cfg.learning_starts && step % cfg.update_every == 0 &&
          buffer.size() >= static_cast<std::size_t>(cfg.batch)) {
        const auto idx = buffer.sample(cfg.batch, rng);
        std::vector<const Transition*> picked;
        picked.reserve(idx.size());
        for (auto i : idx) picked.push_back(&buffer[i]);
        const auto prefs = cfg.fixed_preference ? std::vector<Vec2>{*cfg.fixed_preference}
                                                : sample_preferences(cfg.prefs_per_update, rng);
        UpdateStats s;
        try {
          s = agent.update(picked, prefs, entropy_target(step, cfg));
        } catch (const NumericalError& e) {
          write_dump(opts.out_dir, step, e.what(), picked, prefs);
          throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step));
        }
        loss_c += s.critic_loss;
        loss_a += s.actor_loss;
        loss_n += s.nu_loss;
        ++since;
        ++result.updates;
      }
      if (step % cfg.eval_every == 0) evaluate(step);
    }
  }
  if (step > 0 && step % cfg.eval_every != 0) evaluate(step);
  result.steps = step;
  if (!opts.out_dir.empty() && step > 0) {
    agent.save(opts.out_dir / "checkpoints" / "final.json", opts.header_json);
    result.checkpoints.push_back(opts.out_dir / "checkpoints" / "final.json");
  }
  return result;
}

}  // namespace harvest::mosac
