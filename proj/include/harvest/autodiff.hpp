#pragma once

// Define-by-run reverse-mode differentiation over dense row-major matrices.
//
// Every tensor is rank 2 (scalars are 1x1). A Tape records the forward
// computation; Tape::backward walks it in reverse and returns the gradient of a
// scalar loss with respect to every Parameter that was bound to the tape.
// Dense kernels are Eigen's; the tape, the op set and the backward rules live
// here.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace harvest::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row-major 0/1 mask. 1 keeps an entry, 0 masks it out.
using Mask = std::vector<std::uint8_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(Eigen::Index rows, Eigen::Index cols);

/// A named trainable matrix that outlives any tape.
struct Parameter {
  std::string name;
  Matrix value;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {}
  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

/// Gradients keyed by the parameter they belong to.
using Gradients = std::unordered_map<const Parameter*, Matrix>;

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while its tape lives.
class Tensor {
 public:
  Tensor() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double item() const;
  bool requires_grad() const;
  /// Gradient after Tape::backward. Empty matrix if the node received none.
  const Matrix& grad() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Tensor constant(Matrix value);
  /// Leaf whose gradient is kept on the tape (readable through Tensor::grad).
  Tensor variable(Matrix value);
  /// Leaf bound to a parameter. The parameter must outlive the tape.
  /// With grad disabled, or train=false, it behaves like a constant.
  Tensor param(const Parameter& p, bool train = true);

  /// Disables gradient tracking for everything recorded afterwards.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  /// Reverse pass from a 1x1 loss. Callable once per tape.
  Gradients backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  Tensor record(Matrix value, std::initializer_list<Tensor> parents, BackwardFn fn);
  Tensor record(Matrix value, const std::vector<Tensor>& parents, BackwardFn fn);
  const Matrix& value(int id) const;
  const Matrix& grad(int id) const { return nodes_[id].grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// grad(id) += g, allocating on first use. No-op for nodes without grad.
  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }
  /// grad(id).middleCols(start, g.cols()) += g.
  template <typename Expr>
  void accumulate_cols(int id, Eigen::Index start, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      const Matrix& v = value(id);
      n.grad = Matrix::Zero(v.rows(), v.cols());
    }
    n.grad.middleCols(start, g.cols()) += g;
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Ops. All shape checks throw DimensionError naming both shapes.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// x (n x m) plus a 1 x m row added to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Row-wise softmax over unmasked entries; masked entries are exactly 0.
/// A row with every entry masked is a contract error.
Tensor masked_softmax(const Tensor& a, const Mask& mask);
/// Row-wise log-softmax over unmasked entries; masked entries are 0.
Tensor masked_log_softmax(const Tensor& a, const Mask& mask);
/// Per-row normalisation followed by gamma * xhat + beta (gamma, beta: 1 x m).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, Eigen::Index start, Eigen::Index count);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
/// Multiplies row r by weights[r].
Tensor scale_rows(const Tensor& x, const std::vector<double>& weights);
/// Blocks of `group` rows: out_g = a_g * b_g^T  -> (n x group).
Tensor group_matmul_nt(const Tensor& a, const Tensor& b, Eigen::Index group);
/// Blocks of `group` rows: out_g = p_g (group x group) * v_g (group x h).
Tensor group_matmul(const Tensor& p, const Tensor& v, Eigen::Index group);
/// For each block of `group` rows, the elementwise max over rows
/// [offset, offset + count) whose mask entry (n_groups x count) is 1.
/// Blocks with no unmasked row produce zeros.
Tensor max_pool_rows(const Tensor& x, Eigen::Index group, Eigen::Index offset, Eigen::Index count,
                     const Mask& mask);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// n x m -> n x 1
Tensor row_sum(const Tensor& a);
/// Mean over all entries of (a - b)^2.
Tensor mean_squared_error(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------

class Adam {
 public:
  struct Options {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<Parameter*> params, Options opts);

  /// One bias-corrected update. Parameters absent from `grads` count as zero gradient.
  void step(const Gradients& grads);

  long steps() const { return t_; }
  const Options& options() const { return opts_; }
  const std::vector<Parameter*>& parameters() const { return params_; }
  const Matrix& first_moment(std::size_t i) const { return m_[i]; }
  const Matrix& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  Options opts_;
  long t_ = 0;
};

}  // namespace harvest::ad
