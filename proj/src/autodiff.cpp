#include "harvest/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace harvest::ad {

std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  std::ostringstream os;
  os << "(" << rows << "x" << cols << ")";
  return os.str();
}

namespace {

[[noreturn]] void shape_mismatch(const char* op, const Matrix& a, const Matrix& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.rows(), a.cols()) +
                       " and " + shape_str(b.rows(), b.cols()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch(op, a.value(), b.value());
}

void require_same_tape(const Tensor& a, const Tensor& b) {
  if (a.tape() != b.tape()) throw ContractError("tensors recorded on different tapes");
}

Tape& tape_of(const Tensor& t) {
  if (!t.valid()) throw ContractError("use of an empty tensor handle");
  return *t.tape();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

const Matrix& Tensor::value() const { return tape_of(*this).value(id_); }

double Tensor::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(v.rows(), v.cols()));
  return v(0, 0);
}

bool Tensor::requires_grad() const { return tape_of(*this).requires_grad(id_); }

const Matrix& Tensor::grad() const { return tape_of(*this).grad(id_); }

// ---------------------------------------------------------------------------
// Tape

const Matrix& Tape::value(int id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

Tensor Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::param(const Parameter& p, bool train) {
  Node n;
  n.external = &p.value;
  n.requires_grad = grad_enabled_ && train;
  n.param = n.requires_grad ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::record(Matrix value, std::initializer_list<Tensor> parents, BackwardFn fn) {
  bool needs = false;
  if (grad_enabled_) {
    for (const Tensor& p : parents) {
      if (p.tape() != this) throw ContractError("tensors recorded on different tapes");
      needs = needs || nodes_[p.id()].requires_grad;
    }
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::record(Matrix value, const std::vector<Tensor>& parents, BackwardFn fn) {
  bool needs = false;
  if (grad_enabled_) {
    for (const Tensor& p : parents) {
      if (p.tape() != this) throw ContractError("tensors recorded on different tapes");
      needs = needs || nodes_[p.id()].requires_grad;
    }
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Gradients Tape::backward(const Tensor& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (backward_done_) throw ContractError("backward: tape already consumed");
  const Matrix& lv = value(loss.id());
  if (lv.size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(lv.rows(), lv.cols()));
  }
  backward_done_ = true;
  Gradients out;
  if (!nodes_[loss.id()].requires_grad) return out;

  nodes_[loss.id()].grad = Matrix::Ones(1, 1);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      auto it = out.find(n.param);
      if (it == out.end()) {
        out.emplace(n.param, n.grad);
      } else {
        it->second += n.grad;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) shape_mismatch("matmul", a.value(), b.value());
  Matrix out;
  out.noalias() = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  require_same_shape("add", a, b);
  Matrix out = a.value() + b.value();
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  require_same_shape("sub", a, b);
  Matrix out = a.value() - b.value();
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    if (t.requires_grad(ib)) t.accumulate(ib, -t.grad(self));
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_same_tape(x, bias);
  if (bias.rows() != 1 || bias.cols() != x.cols()) shape_mismatch("add_bias", x.value(), bias.value());
  Matrix out = x.value();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id(), ib = bias.id();
  return tape_of(x).record(std::move(out), {x, bias}, [ix, ib](Tape& t, int self) {
    t.accumulate(ix, t.grad(self));
    if (t.requires_grad(ib)) t.accumulate(ib, t.grad(self).colwise().sum());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  require_same_shape("mul", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Tensor scale(const Tensor& a, double s) {
  Matrix out = a.value() * s;
  const int ia = a.id();
  return tape_of(a).record(std::move(out), {a},
                           [ia, s](Tape& t, int self) { t.accumulate(ia, t.grad(self) * s); });
}

Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  const int ia = a.id();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    t.accumulate(ia, (x.array() > 0.0).select(t.grad(self), 0.0).matrix());
  });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp().matrix();
  const int ia = a.id();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(self)));
  });
}

Tensor log(const Tensor& a) {
  Matrix out = a.value().array().log().matrix();
  const int ia = a.id();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseQuotient(t.value(ia)));
  });
}

namespace {

void check_mask(const char* op, const Matrix& a, const Mask& mask) {
  if (mask.size() != static_cast<std::size_t>(a.size())) {
    throw DimensionError(std::string(op) + ": mask has " + std::to_string(mask.size()) +
                         " entries for shape " + shape_str(a.rows(), a.cols()));
  }
}

/// Max over the unmasked entries of row r; -inf when none is unmasked and
/// NaN when any unmasked entry is NaN, so bad values propagate downstream.
double masked_row_max(const Matrix& x, Eigen::Index r, const std::uint8_t* mk) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    if (!mk[c]) continue;
    if (std::isnan(x(r, c))) return x(r, c);
    mx = std::max(mx, x(r, c));
  }
  return mx;
}

}  // namespace

Tensor masked_softmax(const Tensor& a, const Mask& mask) {
  const Matrix& x = a.value();
  check_mask("masked_softmax", x, mask);
  const Eigen::Index n = x.rows(), m = x.cols();
  Matrix out = Matrix::Zero(n, m);
  for (Eigen::Index r = 0; r < n; ++r) {
    const std::uint8_t* mk = mask.data() + r * m;
    const double mx = masked_row_max(x, r, mk);
    if (std::isinf(mx) && mx < 0) throw ContractError("masked_softmax: row " + std::to_string(r) + " is fully masked");
    double z = 0.0;
    for (Eigen::Index c = 0; c < m; ++c) {
      if (mk[c]) {
        out(r, c) = std::exp(x(r, c) - mx);
        z += out(r, c);
      }
    }
    out.row(r) /= z;
  }
  const int ia = a.id();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    // dx = y * (g - sum(g * y)); masked entries have y = 0 and so get 0.
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = y.cwiseProduct(g - dot * Eigen::RowVectorXd::Ones(y.cols()));
    t.accumulate(ia, dx);
  });
}

Tensor masked_log_softmax(const Tensor& a, const Mask& mask) {
  const Matrix& x = a.value();
  check_mask("masked_log_softmax", x, mask);
  const Eigen::Index n = x.rows(), m = x.cols();
  Matrix out = Matrix::Zero(n, m);
  Matrix probs = Matrix::Zero(n, m);
  for (Eigen::Index r = 0; r < n; ++r) {
    const std::uint8_t* mk = mask.data() + r * m;
    const double mx = masked_row_max(x, r, mk);
    if (std::isinf(mx) && mx < 0) throw ContractError("masked_log_softmax: row " + std::to_string(r) + " is fully masked");
    double z = 0.0;
    for (Eigen::Index c = 0; c < m; ++c)
      if (mk[c]) z += std::exp(x(r, c) - mx);
    const double lse = mx + std::log(z);
    for (Eigen::Index c = 0; c < m; ++c) {
      if (mk[c]) {
        out(r, c) = x(r, c) - lse;
        probs(r, c) = std::exp(out(r, c));
      }
    }
  }
  const int ia = a.id();
  Mask mk = mask;
  return tape_of(a).record(std::move(out), {a},
                           [ia, probs = std::move(probs), mk = std::move(mk)](Tape& t, int self) {
                             const Matrix& g = t.grad(self);
                             const Eigen::Index n = g.rows(), m = g.cols();
                             Matrix dx = Matrix::Zero(n, m);
                             for (Eigen::Index r = 0; r < n; ++r) {
                               double gs = 0.0;
                               for (Eigen::Index c = 0; c < m; ++c)
                                 if (mk[r * m + c]) gs += g(r, c);
                               for (Eigen::Index c = 0; c < m; ++c)
                                 if (mk[r * m + c]) dx(r, c) = g(r, c) - probs(r, c) * gs;
                             }
                             t.accumulate(ia, dx);
                           });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const Matrix& xv = x.value();
  const Eigen::Index m = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != m) shape_mismatch("layer_norm", xv, gamma.value());
  if (beta.rows() != 1 || beta.cols() != m) shape_mismatch("layer_norm", xv, beta.value());

  Eigen::VectorXd mu = xv.rowwise().mean();
  Matrix xc = xv - mu * Eigen::RowVectorXd::Ones(m);
  Eigen::VectorXd inv_std =
      ((xc.array().square().rowwise().sum() / static_cast<double>(m)) + eps).rsqrt().matrix();
  Matrix xhat = inv_std.asDiagonal() * xc;
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);

  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape_of(x).record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (t.requires_grad(ix)) {
          Matrix gh = g.array().rowwise() * t.value(ig).row(0).array();
          Eigen::VectorXd mean_gh = gh.rowwise().mean();
          Eigen::VectorXd mean_ghx = gh.cwiseProduct(xhat).rowwise().mean();
          Matrix dx = gh;
          dx.colwise() -= mean_gh;
          dx -= (xhat.array().colwise() * mean_ghx.array()).matrix();
          dx = inv_std.asDiagonal() * dx;
          t.accumulate(ix, dx);
        }
      });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Eigen::Index n = parts.front().rows();
  Eigen::Index total = 0;
  for (const Tensor& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != n) shape_mismatch("concat_cols", parts.front().value(), p.value());
    total += p.cols();
  }
  Matrix out(n, total);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const Tensor& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.cols();
  }
  return tape_of(parts.front())
      .record(std::move(out), parts, [spans = std::move(spans)](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        for (const auto& [id, start] : spans) {
          if (t.requires_grad(id)) t.accumulate(id, g.middleCols(start, t.value(id).cols()));
        }
      });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Eigen::Index m = parts.front().cols();
  Eigen::Index total = 0;
  for (const Tensor& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != m) shape_mismatch("concat_rows", parts.front().value(), p.value());
    total += p.rows();
  }
  Matrix out(total, m);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const Tensor& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.rows();
  }
  return tape_of(parts.front())
      .record(std::move(out), parts, [spans = std::move(spans)](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        for (const auto& [id, start] : spans) {
          if (t.requires_grad(id)) t.accumulate(id, g.middleRows(start, t.value(id).rows()));
        }
      });
}

Tensor slice_cols(const Tensor& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " +
                         shape_str(x.rows(), x.cols()));
  }
  Matrix out = x.value().middleCols(start, count);
  const int ix = x.id();
  return tape_of(x).record(std::move(out), {x}, [ix, start](Tape& t, int self) {
    t.accumulate_cols(ix, start, t.grad(self));
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  const Matrix& xv = x.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= xv.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_str(xv.rows(), xv.cols()));
    }
    out.row(static_cast<Eigen::Index>(i)) = xv.row(rows[i]);
  }
  const int ix = x.id();
  return tape_of(x).record(std::move(out), {x}, [ix, rows](Tape& t, int self) {
    const Matrix& xv = t.value(ix);
    const Matrix& g = t.grad(self);
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(ix, dx);
  });
}

Tensor scale_rows(const Tensor& x, const std::vector<double>& weights) {
  if (static_cast<Eigen::Index>(weights.size()) != x.rows()) {
    throw DimensionError("scale_rows: " + std::to_string(weights.size()) + " weights for " +
                         shape_str(x.rows(), x.cols()));
  }
  Eigen::Map<const Eigen::VectorXd> w(weights.data(), x.rows());
  Matrix out = w.asDiagonal() * x.value();
  const int ix = x.id();
  return tape_of(x).record(std::move(out), {x}, [ix, weights](Tape& t, int self) {
    Eigen::Map<const Eigen::VectorXd> w(weights.data(), static_cast<Eigen::Index>(weights.size()));
    t.accumulate(ix, w.asDiagonal() * t.grad(self));
  });
}

Tensor group_matmul_nt(const Tensor& a, const Tensor& b, Eigen::Index group) {
  require_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (group <= 0 || av.rows() % group != 0 || av.rows() != bv.rows() || av.cols() != bv.cols()) {
    shape_mismatch("group_matmul_nt", av, bv);
  }
  const Eigen::Index blocks = av.rows() / group;
  Matrix out(av.rows(), group);
  for (Eigen::Index k = 0; k < blocks; ++k) {
    out.middleRows(k * group, group).noalias() =
        av.middleRows(k * group, group).lazyProduct(bv.middleRows(k * group, group).transpose());
  }
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(std::move(out), {a, b}, [ia, ib, group, blocks](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& av = t.value(ia);
    const Matrix& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Matrix da(av.rows(), av.cols());
      for (Eigen::Index k = 0; k < blocks; ++k)
        da.middleRows(k * group, group).noalias() =
            g.middleRows(k * group, group).lazyProduct(bv.middleRows(k * group, group));
      t.accumulate(ia, da);
    }
    if (t.requires_grad(ib)) {
      Matrix db(bv.rows(), bv.cols());
      for (Eigen::Index k = 0; k < blocks; ++k)
        db.middleRows(k * group, group).noalias() =
            g.middleRows(k * group, group).transpose().lazyProduct(av.middleRows(k * group, group));
      t.accumulate(ib, db);
    }
  });
}

Tensor group_matmul(const Tensor& p, const Tensor& v, Eigen::Index group) {
  require_same_tape(p, v);
  const Matrix& pv = p.value();
  const Matrix& vv = v.value();
  if (group <= 0 || pv.cols() != group || pv.rows() % group != 0 || pv.rows() != vv.rows()) {
    shape_mismatch("group_matmul", pv, vv);
  }
  const Eigen::Index blocks = pv.rows() / group;
  Matrix out(vv.rows(), vv.cols());
  for (Eigen::Index k = 0; k < blocks; ++k) {
    out.middleRows(k * group, group).noalias() =
        pv.middleRows(k * group, group).lazyProduct(vv.middleRows(k * group, group));
  }
  const int ip = p.id(), iv = v.id();
  return tape_of(p).record(std::move(out), {p, v}, [ip, iv, group, blocks](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& pv = t.value(ip);
    const Matrix& vv = t.value(iv);
    if (t.requires_grad(ip)) {
      Matrix dp(pv.rows(), pv.cols());
      for (Eigen::Index k = 0; k < blocks; ++k)
        dp.middleRows(k * group, group).noalias() =
            g.middleRows(k * group, group).lazyProduct(vv.middleRows(k * group, group).transpose());
      t.accumulate(ip, dp);
    }
    if (t.requires_grad(iv)) {
      Matrix dv(vv.rows(), vv.cols());
      for (Eigen::Index k = 0; k < blocks; ++k)
        dv.middleRows(k * group, group).noalias() =
            pv.middleRows(k * group, group).transpose().lazyProduct(g.middleRows(k * group, group));
      t.accumulate(iv, dv);
    }
  });
}

Tensor max_pool_rows(const Tensor& x, Eigen::Index group, Eigen::Index offset, Eigen::Index count,
                     const Mask& mask) {
  const Matrix& xv = x.value();
  if (group <= 0 || xv.rows() % group != 0 || offset < 0 || count < 0 || offset + count > group) {
    throw DimensionError("max_pool_rows: bad grouping for " + shape_str(xv.rows(), xv.cols()));
  }
  const Eigen::Index blocks = xv.rows() / group;
  if (static_cast<Eigen::Index>(mask.size()) != blocks * count) {
    throw DimensionError("max_pool_rows: mask has " + std::to_string(mask.size()) +
                         " entries, expected " + std::to_string(blocks * count));
  }
  const Eigen::Index d = xv.cols();
  Matrix out = Matrix::Zero(blocks, d);
  // argmax source row per output entry, -1 when the block is fully masked
  std::vector<int> src(static_cast<std::size_t>(blocks * d), -1);
  for (Eigen::Index k = 0; k < blocks; ++k) {
    for (Eigen::Index i = 0; i < count; ++i) {
      if (!mask[k * count + i]) continue;
      const Eigen::Index r = k * group + offset + i;
      for (Eigen::Index c = 0; c < d; ++c) {
        int& s = src[k * d + c];
        if (s < 0 || xv(r, c) > out(k, c)) {
          out(k, c) = xv(r, c);
          s = static_cast<int>(r);
        }
      }
    }
  }
  const int ix = x.id();
  return tape_of(x).record(std::move(out), {x}, [ix, src = std::move(src), d](Tape& t, int self) {
    const Matrix& xv = t.value(ix);
    const Matrix& g = t.grad(self);
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    for (Eigen::Index k = 0; k < g.rows(); ++k)
      for (Eigen::Index c = 0; c < d; ++c)
        if (const int s = src[k * d + c]; s >= 0) dx(s, c) += g(k, c);
    t.accumulate(ix, dx);
  });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& av = t.value(ia);
    t.accumulate(ia, Matrix::Constant(av.rows(), av.cols(), t.grad(self)(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Tensor row_sum(const Tensor& a) {
  Matrix out = a.value().rowwise().sum();
  const int ia = a.id();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& av = t.value(ia);
    t.accumulate(ia, t.grad(self) * Eigen::RowVectorXd::Ones(av.cols()));
  });
}

Tensor mean_squared_error(const Tensor& a, const Tensor& b) {
  require_same_shape("mean_squared_error", a, b);
  Tensor d = sub(a, b);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Parameter*> params, Options opts) : params_(std::move(params)), opts_(opts) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step(const Gradients& grads) {
  ++t_;
  const double b1 = opts_.beta1, b2 = opts_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    auto it = grads.find(&p);
    if (it != grads.end()) {
      const Matrix& g = it->second;
      if (g.rows() != p.value.rows() || g.cols() != p.value.cols()) {
        throw DimensionError("adam: gradient " + shape_str(g.rows(), g.cols()) + " for parameter " +
                             p.name + " " + shape_str(p.value.rows(), p.value.cols()));
      }
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    } else {
      m_[i] *= b1;
      v_[i] *= b2;
    }
    p.value.array() -= opts_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + opts_.eps);
  }
}

}  // namespace harvest::ad
