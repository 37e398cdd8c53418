#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "harvest/eval.hpp"
#include "harvest/mosac.hpp"
#include "support.hpp"

using namespace harvest;
using namespace harvest::mosac;
using ad::Tape;
using ad::Tensor;

namespace {

nets::NetworkSpec small_spec() {
  nets::NetworkSpec spec;
  spec.encoder.embed_dim = 16;
  spec.encoder.heads = 2;
  spec.encoder.layers = 1;
  spec.encoder.ffn_hidden = 32;
  spec.encoder.head_hidden = 16;
  spec.encoder.k_max = 3;
  spec.encoder.local_crop = 3;
  return spec;
}

std::vector<Transition> random_transitions(const nets::NetworkSpec& spec, int n, std::mt19937_64& rng) {
  std::vector<Transition> out;
  std::uniform_int_distribution<int> action(0, kActions - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    Transition t;
    t.state = testing::random_token_state(spec.encoder.k_max, 2, spec.encoder.local_crop, rng);
    t.next_state = testing::random_token_state(spec.encoder.k_max, 2, spec.encoder.local_crop, rng);
    t.legal.fill(true);
    t.next_legal.fill(true);
    t.next_legal[i % kActions] = false;
    t.action = action(rng);
    t.reward = {10.0 * u(rng), -0.5 - 0.5 * (u(rng) < 0.5)};
    t.done = i % 7 == 0;
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<const Transition*> pointers(const std::vector<Transition>& ts) {
  std::vector<const Transition*> out;
  for (const auto& t : ts) out.push_back(&t);
  return out;
}

Matrix row_probs(std::mt19937_64& rng, int n) {
  Matrix p = testing::random_matrix(n, kActions, rng, 0.05, 1.0);
  for (int i = 0; i < n; ++i) p.row(i) /= p.row(i).sum();
  return p;
}

std::shared_ptr<const world::Scenario> flat_scenario(int w, int l, world::Cell start, world::Cell terminal,
                                                     int battery) {
  auto s = std::make_shared<world::Scenario>();
  s->map = testing::flat_map(w, l, start, terminal);
  s->devices = {world::Device{{w / 2, l / 2}, 5000, 5000}};
  s->initial_battery = world::Battery::from_units(battery);
  return s;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("mosac") {
  TEST_CASE("preference samples are uniform on the simplex") {
    std::mt19937_64 rng(1);
    CHECK(sample_preferences(3, rng).size() == 3);
    double mean0 = 0.0, mean1 = 0.0;
    constexpr int n = 100000;
    for (const auto& w : sample_preferences(n, rng)) {
      CHECK(w[0] >= 0.0);
      CHECK(w[1] >= 0.0);
      CHECK(std::abs(w[0] + w[1] - 1.0) < 1e-15);
      mean0 += w[0];
      mean1 += w[1];
    }
    CHECK(std::abs(mean0 / n - 0.5) < 0.01);
    CHECK(std::abs(mean1 / n - 0.5) < 0.01);
    CHECK_THROWS_AS(sample_preferences(0, rng), std::invalid_argument);
  }

  TEST_CASE("entropy target and temperature anneal linearly") {
    TrainConfig cfg;
    const double h_max = std::log(5.0);
    CHECK(entropy_target(0, cfg) == doctest::Approx(0.6 * h_max));
    CHECK(entropy_target(50000, cfg) == doctest::Approx(0.45 * h_max));
    CHECK(entropy_target(100000, cfg) == doctest::Approx(0.3 * h_max));
    CHECK(entropy_target(500000, cfg) == doctest::Approx(0.3 * h_max));
    CHECK(temperature(0, cfg) == 5.0);
    CHECK(temperature(50000, cfg) == doctest::Approx(3.25));
    CHECK(temperature(100000, cfg) == 1.5);
    CHECK(temperature(200000, cfg) == 1.5);
  }

  TEST_CASE("heated softmax") {
    world::ActionMask all;
    all.fill(true);
    const std::vector<double> equal(5, 0.7);
    for (double tau : {0.1, 1.0, 5.0})
      for (double p : heated_softmax(equal, tau, all)) CHECK(p == doctest::Approx(0.2));
    const std::vector<double> peaked{1, 0, 0, 0, 0};
    const auto cold = heated_softmax(peaked, 1e-3, all);
    CHECK(cold[0] == doctest::Approx(1.0));
    CHECK(entropy(heated_softmax(peaked, 5.0, all)) > entropy(heated_softmax(peaked, 1.0, all)));
    world::ActionMask some{true, false, true, false, true};
    const auto masked = heated_softmax(std::vector<double>{5, 9, 1, 9, 2}, 2.0, some);
    CHECK(masked[1] == 0.0);
    CHECK(masked[3] == 0.0);
    CHECK(masked[0] + masked[2] + masked[4] == doctest::Approx(1.0));
    CHECK_THROWS(heated_softmax(peaked, 0.0, all));
  }

  TEST_CASE("scalarised critic values and twin selection") {
    Matrix q1(1, 10), q2(1, 10);
    q1 << 1, 2, 3, 4, 5, -1, -1, -1, -1, -1;
    q2 << 0, 0, 0, 0, 0, 0, 0, 0, 0, 0;
    Matrix w(1, 2);
    w << 0.5, 0.5;
    const Matrix qw = scalarize_q(q1, w);
    CHECK(qw(0, 0) == 0.0);
    CHECK(qw(0, 4) == 2.0);
    Matrix probs = Matrix::Constant(1, 5, 0.2);
    // q1 expected value 0.5 > q2's 0, so the pessimistic choice is q2
    CHECK((select_twin(q1, q2, probs, w) == q2));
    w << 0.0, 1.0;
    CHECK((select_twin(q1, q2, probs, w) == q1));
  }

  TEST_CASE("target vectors") {
    std::mt19937_64 rng(2);
    const int n = 6;
    const Matrix r = testing::random_matrix(n, 2, rng);
    const Matrix p = row_probs(rng, n);
    const Matrix logp = p.array().log().matrix();
    const Matrix q = testing::random_matrix(n, 10, rng, -5, 5);
    const double nu = 0.3, gamma = 0.9;
    std::vector<double> done{0, 1, 0, 0, 1, 0};
    const Matrix y = compute_target_y(r, done, p, logp, q, nu, gamma);
    for (int i = 0; i < n; ++i) {
      // (Qbar - nu 1_M log pi^T) pi with Qbar as an M x |A| matrix
      Matrix qbar(2, 5);
      for (int m = 0; m < 2; ++m)
        for (int a = 0; a < 5; ++a) qbar(m, a) = q(i, m * 5 + a);
      const Matrix bracket = qbar - nu * Matrix::Ones(2, 1) * logp.row(i);
      const Matrix expect = r.row(i).transpose() + gamma * (1.0 - done[i]) * bracket * p.row(i).transpose();
      CHECK(y(i, 0) == doctest::Approx(expect(0, 0)).epsilon(1e-12));
      CHECK(y(i, 1) == doctest::Approx(expect(1, 0)).epsilon(1e-12));
      if (done[i] != 0.0) CHECK((y.row(i) == r.row(i)));
    }

    Matrix one_hot = Matrix::Zero(1, 5);
    one_hot(0, 3) = 1.0;
    const Matrix y1 = compute_target_y(r.topRows(1), std::vector<double>{0.0}, one_hot, Matrix::Zero(1, 5),
                                       q.topRows(1), 0.0, gamma);
    CHECK(y1(0, 0) == doctest::Approx(r(0, 0) + gamma * q(0, 3)));
    CHECK(y1(0, 1) == doctest::Approx(r(0, 1) + gamma * q(0, 8)));
  }

  TEST_CASE("critic loss") {
    Tape tape;
    Matrix qv(1, 10);
    qv << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10;
    Matrix y(1, 2);
    y << 0.0, 10.0;
    const int action[] = {2};
    // Q(s, 2) = (3, 8); residual (3, -2); 1/2 (9 + 4)
    CHECK(critic_loss(tape.constant(qv), action, y).item() == doctest::Approx(6.5));
    Matrix exact(1, 2);
    exact << 3.0, 8.0;
    CHECK(critic_loss(tape.constant(qv), action, exact).item() == 0.0);
    Matrix doubled(1, 2);
    doubled << -3.0, 12.0;  // residual (6, -4)
    CHECK(critic_loss(tape.constant(qv), action, doubled).item() == doctest::Approx(4 * 6.5));

    const Tensor q = tape.variable(qv);
    const auto grads = tape.backward(critic_loss(q, action, y));
    (void)grads;
    Matrix expected = Matrix::Zero(1, 10);
    expected(0, 2) = 3.0;
    expected(0, 7) = -2.0;
    CHECK((q.grad() == expected));
  }

  TEST_CASE("actor loss") {
    Tape tape;
    Matrix logits(1, 5);
    logits << 0.0, std::log(2.0), 0.0, 0.0, 0.0;
    Matrix qw(1, 5);
    qw << 1, 2, 3, 4, 5;
    const ad::Mask legal{1, 1, 0, 1, 1};
    // pi = (1, 2, 0, 1, 1) / 5 over legal actions
    const double pi[] = {0.2, 0.4, 0.0, 0.2, 0.2};
    double expect = 0.0;
    for (int a = 0; a < 5; ++a)
      if (pi[a] > 0) expect += pi[a] * (0.5 * std::log(pi[a]) - qw(0, a));
    CHECK(actor_loss(tape.constant(logits), legal, qw, 0.5).item() == doctest::Approx(expect).epsilon(1e-12));

    // nu = 0: concentrating on the best scalarised action lowers the loss
    const ad::Mask all(5, 1);
    Matrix flat = Matrix::Zero(1, 5), sharp = Matrix::Zero(1, 5);
    sharp(0, 4) = 5.0;
    CHECK(actor_loss(tape.constant(sharp), all, qw, 0.0).item() < actor_loss(tape.constant(flat), all, qw, 0.0).item());

    // uniform values with nu > 0: the uniform policy is stationary
    const Tensor x = tape.variable(Matrix::Zero(1, 5));
    tape.backward(actor_loss(x, all, Matrix::Constant(1, 5, 3.0), 0.7));
    CHECK(x.grad().cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("entropy coefficient loss drives entropy toward the target") {
    auto grad_at = [](const Matrix& probs, double target) {
      Tape tape;
      const Tensor log_nu = tape.variable(Matrix::Constant(1, 1, std::log(0.2)));
      const Matrix logp = probs.unaryExpr([](double p) { return p > 0 ? std::log(p) : 0.0; });
      tape.backward(entropy_coefficient_loss(log_nu, probs, logp, target));
      return log_nu.grad()(0, 0);
    };
    const Matrix uniform = Matrix::Constant(1, 5, 0.2);
    CHECK(std::abs(grad_at(uniform, std::log(5.0))) < 1e-14);
    Matrix peaked(1, 5);
    peaked << 0.96, 0.01, 0.01, 0.01, 0.01;
    double h = 0.0;
    for (int a = 0; a < 5; ++a) h -= peaked(0, a) * std::log(peaked(0, a));
    CHECK(std::abs(grad_at(peaked, h)) < 1e-14);
    // below target: descent raises log nu; above target: it lowers it
    CHECK(grad_at(peaked, 0.3 * std::log(5.0)) < 0.0);
    CHECK(grad_at(uniform, 0.3 * std::log(5.0)) > 0.0);
  }

  TEST_CASE("Polyak target updates") {
    const auto spec = small_spec();
    auto online = nets::make_network(spec, nets::Role::Critic, 1, "c");
    auto target = nets::make_network(spec, nets::Role::Critic, 2, "t");
    const auto before = target->clone();
    soft_update(*target, *online, 0.0);
    for (std::size_t i = 0; i < target->parameters().size(); ++i)
      CHECK((target->parameters()[i]->value == before->parameters()[i]->value));

    const double rho = 0.1;
    const Matrix gap0 = before->parameters()[0]->value - online->parameters()[0]->value;
    for (int k = 0; k < 20; ++k) soft_update(*target, *online, rho);
    const Matrix gap = target->parameters()[0]->value - online->parameters()[0]->value;
    CHECK((gap - std::pow(1 - rho, 20) * gap0).cwiseAbs().maxCoeff() < 1e-12);

    soft_update(*target, *online, 1.0);
    for (std::size_t i = 0; i < target->parameters().size(); ++i)
      CHECK((target->parameters()[i]->value == online->parameters()[i]->value));
  }

  TEST_CASE("replay buffer is a ring with uniform sampling") {
    ReplayBuffer buffer(4);
    std::mt19937_64 rng(3);
    CHECK_THROWS(buffer.sample(1, rng));
    for (int i = 0; i < 6; ++i) {
      Transition t;
      t.action = i;
      buffer.add(std::move(t));
    }
    CHECK(buffer.size() == 4);
    std::vector<int> actions;
    for (std::size_t i = 0; i < 4; ++i) actions.push_back(buffer[i].action);
    std::sort(actions.begin(), actions.end());
    CHECK(actions == std::vector<int>{2, 3, 4, 5});
    std::vector<int> counts(4, 0);
    for (auto i : buffer.sample(40000, rng)) ++counts[i];
    for (int c : counts) CHECK(std::abs(c - 10000) < 400);
  }

  TEST_CASE("updates touch only online networks and keep nu positive") {
    const auto spec = small_spec();
    TrainConfig cfg;
    cfg.target_rho = 0.0;
    Agent agent(spec, cfg, 4);
    std::mt19937_64 rng(5);
    const auto ts = random_transitions(spec, 16, rng);
    const auto batch = pointers(ts);
    const auto t0 = agent.target(0).clone();
    const auto c0 = agent.critic(0).clone();
    const auto prefs = sample_preferences(3, rng);
    for (int k = 0; k < 5; ++k) {
      const auto stats = agent.update(batch, prefs, entropy_target(0, cfg));
      CHECK(std::isfinite(stats.critic_loss));
      CHECK(std::isfinite(stats.actor_loss));
      CHECK(agent.nu() > 0.0);
    }
    const auto tp = agent.target(0).parameters();
    const auto t0p = t0->parameters();
    for (std::size_t i = 0; i < tp.size(); ++i) CHECK((tp[i]->value == t0p[i]->value));
    CHECK((agent.critic(0).parameters()[0]->value != c0->parameters()[0]->value));
  }

  TEST_CASE("critic targets carry no gradient into the target networks") {
    // Perturbing a target network changes the loss value but leaves the
    // online critic gradient's dependence purely through the constant y.
    const auto spec = small_spec();
    std::mt19937_64 rng(6);
    const auto ts = random_transitions(spec, 8, rng);
    auto critic = nets::make_network(spec, nets::Role::Critic, 7, "c");
    const auto batch = nets::TokenBatch::from_states(std::vector<momdp::TokenState>{ts[0].state, ts[1].state});
    const std::vector<int> actions{ts[0].action, ts[1].action};
    const Matrix y = testing::random_matrix(2, 2, rng);
    Tape tape;
    const Tensor q = critic->forward(tape, batch);
    const auto grads = tape.backward(critic_loss(q, actions, y));
    for (const auto& [param, g] : grads) CHECK(param->name.rfind("c/", 0) == 0);
  }

  TEST_CASE("critic loss falls on a frozen buffer") {
    const auto spec = small_spec();
    TrainConfig cfg;
    cfg.lr = 1e-3;
    Agent agent(spec, cfg, 8);
    std::mt19937_64 rng(9);
    const auto ts = random_transitions(spec, 64, rng);
    std::vector<double> losses;
    for (int k = 0; k < 1000; ++k) {
      std::vector<const Transition*> batch;
      std::uniform_int_distribution<std::size_t> pick(0, ts.size() - 1);
      for (int i = 0; i < 16; ++i) batch.push_back(&ts[pick(rng)]);
      const auto stats = agent.update(batch, sample_preferences(3, rng), entropy_target(k, cfg));
      REQUIRE(std::isfinite(stats.critic_loss));
      REQUIRE(agent.nu() > 0.0);
      losses.push_back(stats.critic_loss);
    }
    const double head = std::accumulate(losses.begin(), losses.begin() + 50, 0.0) / 50;
    const double tail = std::accumulate(losses.end() - 50, losses.end(), 0.0) / 50;
    INFO("head " << head << " tail " << tail);
    CHECK(tail < head);
  }

  TEST_CASE("executed policy never picks masked actions") {
    const auto spec = small_spec();
    Agent agent(spec, TrainConfig{}, 10);
    std::mt19937_64 rng(11);
    std::bernoulli_distribution coin(0.5);
    for (int i = 0; i < 200; ++i) {
      const auto s = testing::random_token_state(3, 1 + i % 3, 3, rng);
      world::ActionMask legal;
      for (auto& b : legal) b = coin(rng);
      legal[i % kActions] = true;
      const auto p = agent.policy(s, legal, 1.0 + i % 5);
      for (int a = 0; a < kActions; ++a)
        if (!legal[a]) CHECK(p[a] == 0.0);
      CHECK(legal[static_cast<int>(agent.act_sample(s, legal, 3.0, rng))]);
      CHECK(legal[static_cast<int>(agent.act_greedy(s, legal))]);
    }
  }

  TEST_CASE("checkpoints restore the agent") {
    const auto spec = small_spec();
    Agent a(spec, TrainConfig{}, 12), b(spec, TrainConfig{}, 13);
    const auto dir = testing::scratch_dir("mosac_ckpt");
    a.save(dir / "a.json", R"({"k": 1})");
    const std::string header = b.load(dir / "a.json");
    CHECK(header.find("\"k\"") != std::string::npos);
    std::mt19937_64 rng(14);
    const auto s = testing::random_token_state(3, 2, 3, rng);
    world::ActionMask legal;
    legal.fill(true);
    CHECK(a.policy(s, legal) == b.policy(s, legal));
    CHECK(a.nu() == b.nu());
  }

  TEST_CASE("zero steps writes only the initial checkpoint") {
    const auto spec = small_spec();
    TrainConfig cfg;
    cfg.total_steps = 0;
    Agent agent(spec, cfg, 15);
    TrainOptions opts;
    opts.out_dir = testing::scratch_dir("mosac_zero");
    const auto factory = [](std::mt19937_64&) { return flat_scenario(5, 5, {0, 0}, {4, 4}, 20); };
    const auto result = train(agent, factory, opts, 1);
    CHECK(result.steps == 0);
    REQUIRE(result.checkpoints.size() == 1);
    CHECK(result.checkpoints[0].filename() == "step_0.json");
    CHECK(read_file(opts.out_dir / "metrics.csv").empty());
  }

  TEST_CASE("training is bit-reproducible from the seed") {
    const auto spec = small_spec();
    TrainConfig cfg;
    cfg.total_steps = 300;
    cfg.learning_starts = 100;
    cfg.eval_every = 100;
    cfg.batch = 8;
    const auto factory = [](std::mt19937_64& rng) {
      auto s = std::make_shared<world::Scenario>();
      s->map = testing::flat_map(6, 6, {0, 0}, {5, 5});
      world::DeviceParams dp;
      dp.count = 2;
      dp.min_spacing = 20;
      s->devices = world::place_devices(s->map, dp, rng());
      s->initial_battery = world::Battery::from_units(20);
      return std::shared_ptr<const world::Scenario>(s);
    };
    std::string runs[2];
    for (int r = 0; r < 2; ++r) {
      Agent agent(spec, cfg, 16);
      TrainOptions opts;
      opts.out_dir = testing::scratch_dir("mosac_repro_" + std::to_string(r));
      opts.evaluator = [](const Agent& a, long) { return Metrics{{"nu_probe", a.nu()}}; };
      const auto result = train(agent, factory, opts, 3);
      CHECK(result.steps == 300);
      CHECK(result.evaluations.size() == 3);
      CHECK(result.updates == 201);
      runs[r] = read_file(opts.out_dir / "metrics.csv");
    }
    CHECK(runs[0] == runs[1]);
    CHECK(runs[0].find("step,seed,nu_probe,critic_loss") == 0);
  }

  TEST_CASE("non-finite losses abort with a diagnostic dump") {
    const auto spec = small_spec();
    TrainConfig cfg;
    cfg.total_steps = 200;
    cfg.learning_starts = 20;
    cfg.batch = 4;
    cfg.lr = 1e300;  // one Adam step puts every weight near 1e300
    Agent agent(spec, cfg, 17);
    TrainOptions opts;
    opts.out_dir = testing::scratch_dir("mosac_nan");
    const auto factory = [](std::mt19937_64&) { return flat_scenario(5, 5, {0, 0}, {4, 4}, 20); };
    CHECK_THROWS_AS(train(agent, factory, opts, 1), NumericalError);
    CHECK(std::filesystem::exists(opts.out_dir / "nan_dump.json"));
    CHECK(read_file(opts.out_dir / "nan_dump.json").find("not finite") != std::string::npos);
  }

  TEST_CASE("fixed energy preference learns the shortest path on a small flat map") {
    auto spec = small_spec();
    spec.encoder.k_max = 2;
    TrainConfig cfg;
    cfg.total_steps = 6000;
    cfg.learning_starts = 500;
    cfg.anneal_steps = 4000;
    cfg.batch = 32;
    cfg.lr = 1e-3;
    cfg.fixed_preference = momdp::Vec2{0.0, 1.0};
    const auto scenario = flat_scenario(5, 5, {0, 0}, {4, 4}, 20);
    Agent agent(spec, cfg, 18);
    TrainOptions opts;
    opts.channel.shadowing_enabled = false;
    train(agent, [&](std::mt19937_64&) { return scenario; }, opts, 19);

    eval::AgentPolicy policy(agent);
    const auto ep = eval::run_episode(scenario, opts.channel, 1, policy, momdp::PreferenceVector(0.0, 1.0));
    CHECK(ep.reached_terminal);
    CHECK(ep.energy == 8.0);
  }
}
