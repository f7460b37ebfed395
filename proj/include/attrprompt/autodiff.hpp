// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace attrprompt::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named, optionally trainable array. `grad` accumulates across backward
/// passes until `zero_grad()`; `touched` records whether any gradient reached
/// it, so an optimizer can leave parameters outside the active graph alone.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;
  bool touched = false;

  void zero_grad();
};

struct Node {
  Matrix value;
  const Matrix* external = nullptr;  // parameter leaves alias the stored value
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  Parameter* param = nullptr;

  const Matrix& val() const { return external != nullptr ? *external : value; }
  void accumulate(const Matrix& g);
};

/// Handle to a value in the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->val(); }
  const Matrix& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->val().rows(); }
  Eigen::Index cols() const { return node_->val().cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  double scalar() const;
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on this thread for its lifetime. Parameters
/// referenced while it is active are treated as constants.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Parameters enter graphs as constants for its lifetime; other leaves still
/// record gradients. Used to differentiate with respect to inputs only.
class ConstantParametersGuard {
 public:
  ConstantParametersGuard();
  ~ConstantParametersGuard();
  ConstantParametersGuard(const ConstantParametersGuard&) = delete;
  ConstantParametersGuard& operator=(const ConstantParametersGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Matrix value);
Var leaf(Matrix value, bool requires_grad);
Var parameter(Parameter& p);

/// Reverse pass from a 1x1 root. Parameter leaves receive their gradient in
/// `Parameter::grad`; intermediate nodes keep theirs in `Node::grad`.
void backward(const Var& root);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var scale_by(const Var& a, const Var& s);  // s is 1x1
Var add_row(const Var& a, const Var& row);  // row is 1xC, broadcast over rows
Var sqrt(const Var& a);
Var exp(const Var& a);
Var sigmoid(const Var& a);
Var quick_gelu(const Var& a);

// Reductions.
Var sum(const Var& a);
Var row_sum(const Var& a);  // Rx1

// Shape.
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);

// Fused layers.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Row softmax. Entries where `blocked(i, j)` is true get zero probability;
/// every row must keep at least one entry.
Var softmax_rows(const Var& x, const BoolMatrix* blocked = nullptr);

/// Sum over entries of w * BCE(sigmoid(z), y). Probabilities are clamped to
/// [clamp, 1 - clamp] in the value. The gradient is the exact derivative of
/// the unclamped logistic loss, w * (sigmoid(z) - y).
Var bce_with_logits(const Var& logits, const Matrix& targets, const Matrix& weights,
                    double clamp = 1e-7);

/// Per-row cosine similarity of equally shaped a and b, Rx1.
Var row_cosine(const Var& a, const Var& b);

}  // namespace attrprompt::ad
