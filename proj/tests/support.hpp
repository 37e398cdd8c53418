#pragma once

// Shared test helpers: central finite-difference gradient checks, random
// scenarios and token states, and scratch directories.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "harvest/autodiff.hpp"
#include "harvest/momdp.hpp"
#include "harvest/nets.hpp"
#include "harvest/world.hpp"

namespace harvest::testing {

using ad::Matrix;

inline std::filesystem::path scratch_dir(const std::string& name) {
  const char* env = std::getenv("HARVEST_TEST_TMP");
  const std::filesystem::path root = env && *env ? env : std::filesystem::temp_directory_path() / "harvest_tests";
  const auto dir = root / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is ~0 from dividing round-off by round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  int entries = 0;
  /// Entries whose one-sided differences disagree (a kink of relu / max
  /// lies within the step); they are re-drawn by the caller, never scored.
  int kinks = 0;
};

/// Scalar-valued function of leaf tensors recorded on the given tape.
using ScalarFn = std::function<ad::Tensor(ad::Tape&, const std::vector<ad::Tensor>&)>;

/// Compares Tape::backward against central differences for every entry of
/// every input (or `max_entries` random entries per input when positive).
inline GradCheckResult grad_check(const ScalarFn& fn, const std::vector<Matrix>& inputs, std::mt19937_64& rng,
                                  double h = 1e-5, int max_entries = 0) {
  GradCheckResult res;
  std::vector<Matrix> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Tensor> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.variable(m));
    const ad::Tensor loss = fn(tape, leaves);
    tape.backward(loss);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      Matrix g = leaves[i].grad();
      if (g.size() == 0) g = Matrix::Zero(inputs[i].rows(), inputs[i].cols());
      analytic.push_back(std::move(g));
    }
  }
  auto eval = [&](const std::vector<Matrix>& xs) {
    ad::Tape tape;
    tape.set_grad_enabled(false);
    std::vector<ad::Tensor> leaves;
    for (const auto& m : xs) leaves.push_back(tape.constant(m));
    return fn(tape, leaves).item();
  };
  std::vector<Matrix> xs = inputs;
  const double f0 = eval(xs);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::vector<Eigen::Index> idx(xs[i].size());
    for (Eigen::Index e = 0; e < xs[i].size(); ++e) idx[e] = e;
    if (max_entries > 0 && static_cast<int>(idx.size()) > max_entries) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_entries);
    }
    for (Eigen::Index e : idx) {
      const double orig = xs[i].data()[e];
      xs[i].data()[e] = orig + h;
      const double fp = eval(xs);
      xs[i].data()[e] = orig - h;
      const double fm = eval(xs);
      xs[i].data()[e] = orig;
      const double forward = (fp - f0) / h, backward = (f0 - fm) / h;
      if (relative_error(forward, backward, 1e-2) > 1e-2) {
        ++res.kinks;
        continue;
      }
      const double numeric = (fp - fm) / (2 * h);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[i].data()[e], numeric));
      ++res.entries;
    }
  }
  return res;
}

/// Same check against a network's parameters: loss = sum(forward(batch) .* weights).
inline GradCheckResult network_grad_check(nets::Network& net, const nets::TokenBatch& batch, const Matrix& weights,
                                          std::mt19937_64& rng, int entries_per_param, double h = 1e-5) {
  GradCheckResult res;
  auto loss_of = [&](ad::Tape& tape) { return ad::sum(ad::mul(net.forward(tape, batch), tape.constant(weights))); };
  ad::Gradients grads;
  {
    ad::Tape tape;
    grads = tape.backward(loss_of(tape));
  }
  auto eval = [&] {
    ad::Tape tape;
    tape.set_grad_enabled(false);
    return loss_of(tape).item();
  };
  const double f0 = eval();
  for (ad::Parameter* p : net.parameters()) {
    const auto it = grads.find(p);
    const Matrix g = it == grads.end() ? Matrix::Zero(p->value.rows(), p->value.cols()) : it->second;
    std::uniform_int_distribution<Eigen::Index> pick(0, p->value.size() - 1);
    for (int k = 0; k < entries_per_param; ++k) {
      const Eigen::Index e = pick(rng);
      const double orig = p->value.data()[e];
      p->value.data()[e] = orig + h;
      const double fp = eval();
      p->value.data()[e] = orig - h;
      const double fm = eval();
      p->value.data()[e] = orig;
      const double forward = (fp - f0) / h, backward = (f0 - fm) / h;
      if (relative_error(forward, backward, 1e-2) > 1e-2) {
        ++res.kinks;
        continue;
      }
      res.max_rel_error = std::max(res.max_rel_error, relative_error(g.data()[e], (fp - fm) / (2 * h)));
      ++res.entries;
    }
  }
  return res;
}

/// Random token state with `active` devices in a k_max layout.
inline momdp::TokenState random_token_state(int k_max, int active, int local_crop, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.0, 1.0);
  momdp::TokenState s;
  for (auto& v : s.uav) v = u(rng);
  s.devices.assign(static_cast<std::size_t>(k_max) * momdp::kDeviceFeatures, 0.0);
  s.mask.assign(k_max, 0);
  s.slot_device.assign(k_max, -1);
  for (int k = 0; k < active; ++k) {
    for (int f = 0; f < momdp::kDeviceFeatures; ++f) s.devices[k * momdp::kDeviceFeatures + f] = u(rng);
    s.mask[k] = 1;
    s.slot_device[k] = k;
  }
  const double wd = pos(rng);
  s.preference = {wd, 1.0 - wd};
  s.local_map.resize(static_cast<std::size_t>(2 * local_crop * local_crop));
  for (auto& v : s.local_map) v = pos(rng);
  return s;
}

inline world::CityMap flat_map(int width, int length, world::Cell start, world::Cell terminal,
                               double cell = 20.0) {
  return world::CityMap(width, length, cell, std::vector<double>(static_cast<std::size_t>(width) * length, 0.0),
                        start, terminal);
}

}  // namespace harvest::testing
