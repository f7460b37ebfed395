// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace attrprompt::ad {

namespace {

thread_local bool g_grad_enabled = true;
thread_local bool g_parameters_constant = false;

using BackwardFn = std::function<void(Node&)>;

Var make(Matrix value, std::vector<Var> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  node->requires_grad = needs;
  if (needs) {
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

void Parameter::zero_grad() {
  if (trainable) {
    grad.setZero(value.rows(), value.cols());
  } else {
    grad.resize(0, 0);
  }
  touched = false;
}

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

double Var::scalar() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("Var::scalar on non-1x1 value");
  return node_->val()(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

ConstantParametersGuard::ConstantParametersGuard() : previous_(g_parameters_constant) {
  g_parameters_constant = true;
}
ConstantParametersGuard::~ConstantParametersGuard() { g_parameters_constant = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var constant(Matrix value) { return leaf(std::move(value), false); }

Var leaf(Matrix value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad && g_grad_enabled;
  return Var(std::move(node));
}

Var parameter(Parameter& p) {
  auto node = std::make_shared<Node>();
  node->external = &p.value;
  node->requires_grad = p.trainable && g_grad_enabled && !g_parameters_constant;
  if (node->requires_grad) node->param = &p;
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward: root must be 1x1");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == 0) continue;
    if (n->backward_fn) n->backward_fn(*n);
    if (n->param != nullptr) {
      Parameter& p = *n->param;
      if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
        p.grad.setZero(p.value.rows(), p.value.cols());
      }
      p.grad += n->grad;
      p.touched = true;
    }
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  return make(a.value() * b.value(), {a, b}, [](Node& n) {
    if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad * in(n, 1).val().transpose());
    if (in(n, 1).requires_grad) in(n, 1).accumulate(in(n, 0).val().transpose() * n.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  return make(a.value() * b.value().transpose(), {a, b}, [](Node& n) {
    if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad * in(n, 1).val());
    if (in(n, 1).requires_grad) in(n, 1).accumulate(n.grad.transpose() * in(n, 0).val());
  });
}

Var transpose(const Var& a) {
  return make(a.value().transpose(), {a}, [](Node& n) { in(n, 0).accumulate(n.grad.transpose()); });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make(a.value() + b.value(), {a, b}, [](Node& n) {
    in(n, 0).accumulate(n.grad);
    in(n, 1).accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a, b}, [](Node& n) {
    in(n, 0).accumulate(n.grad);
    in(n, 1).accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad.cwiseProduct(in(n, 1).val()));
    if (in(n, 1).requires_grad) in(n, 1).accumulate(n.grad.cwiseProduct(in(n, 0).val()));
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  return make(a.value().cwiseQuotient(b.value()), {a, b}, [](Node& n) {
    const Matrix& bv = in(n, 1).val();
    if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad.cwiseQuotient(bv));
    if (in(n, 1).requires_grad) {
      in(n, 1).accumulate(-n.grad.cwiseProduct(n.value).cwiseQuotient(bv));
    }
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a}, [s](Node& n) { in(n, 0).accumulate(n.grad * s); });
}

Var scale_by(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument("scale_by: scalar must be 1x1");
  return make(a.value() * s.value()(0, 0), {a, s}, [](Node& n) {
    const double sv = in(n, 1).val()(0, 0);
    if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad * sv);
    if (in(n, 1).requires_grad) {
      Matrix g(1, 1);
      g(0, 0) = n.grad.cwiseProduct(in(n, 0).val()).sum();
      in(n, 1).accumulate(g);
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bad row shape");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make(std::move(out), {a, row}, [](Node& n) {
    in(n, 0).accumulate(n.grad);
    if (in(n, 1).requires_grad) in(n, 1).accumulate(n.grad.colwise().sum());
  });
}

Var sqrt(const Var& a) {
  return make(a.value().cwiseSqrt(), {a}, [](Node& n) {
    in(n, 0).accumulate(n.grad.cwiseQuotient(2.0 * n.value));
  });
}

Var exp(const Var& a) {
  return make(a.value().array().exp().matrix(), {a},
              [](Node& n) { in(n, 0).accumulate(n.grad.cwiseProduct(n.value)); });
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return make(std::move(out), {a}, [](Node& n) {
    Matrix d = n.value.cwiseProduct((1.0 - n.value.array()).matrix());
    in(n, 0).accumulate(n.grad.cwiseProduct(d));
  });
}

Var quick_gelu(const Var& a) {
  static constexpr double k = 1.702;
  Matrix s = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-k * x)); });
  Matrix out = a.value().cwiseProduct(s);
  return make(std::move(out), {a}, [s = std::move(s)](Node& n) {
    const Matrix& x = in(n, 0).val();
    Matrix d = s.array() + k * x.array() * s.array() * (1.0 - s.array());
    in(n, 0).accumulate(n.grad.cwiseProduct(d));
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {a}, [](Node& n) {
    const Node& src = in(n, 0);
    in(n, 0).accumulate(Matrix::Constant(src.val().rows(), src.val().cols(), n.grad(0, 0)));
  });
}

Var row_sum(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  return make(std::move(out), {a}, [](Node& n) {
    const Eigen::Index cols = in(n, 0).val().cols();
    in(n, 0).accumulate(n.grad.replicate(1, cols));
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  Matrix out = a.value().middleRows(start, count);
  return make(std::move(out), {a}, [start, count](Node& n) {
    Node& src = in(n, 0);
    Matrix g = Matrix::Zero(src.val().rows(), src.val().cols());
    g.middleRows(start, count) = n.grad;
    src.accumulate(g);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  Matrix out = a.value().middleCols(start, count);
  return make(std::move(out), {a}, [start, count](Node& n) {
    Node& src = in(n, 0);
    Matrix g = Matrix::Zero(src.val().rows(), src.val().cols());
    g.middleCols(start, count) = n.grad;
    src.accumulate(g);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make(std::move(out), parts, [](Node& n) {
    Eigen::Index offset = 0;
    for (auto& src : n.inputs) {
      const Eigen::Index r = src->val().rows();
      if (src->requires_grad) src->accumulate(n.grad.middleRows(offset, r));
      offset += r;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make(std::move(out), parts, [](Node& n) {
    Eigen::Index offset = 0;
    for (auto& src : n.inputs) {
      const Eigen::Index c = src->val().cols();
      if (src->requires_grad) src->accumulate(n.grad.middleCols(offset, c));
      offset += c;
    }
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make(std::move(out), {a}, [](Node& n) {
    const Node& src = in(n, 0);
    in(n, 0).accumulate(Eigen::Map<const Matrix>(n.grad.data(), src.val().rows(), src.val().cols()));
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
    throw std::invalid_argument("layer_norm: gamma/beta must be 1x" + std::to_string(cols));
  }
  Matrix normed(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = x.value().row(r);
    const double mean = row.mean();
    const double var = (row.array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    normed.row(r) = (row.array() - mean) * inv_std(r);
  }
  Matrix out = (normed.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return make(std::move(out), {x, gamma, beta},
              [normed = std::move(normed), inv_std = std::move(inv_std)](Node& n) {
                const Matrix& dy = n.grad;
                if (in(n, 1).requires_grad) in(n, 1).accumulate(dy.cwiseProduct(normed).colwise().sum());
                if (in(n, 2).requires_grad) in(n, 2).accumulate(dy.colwise().sum());
                if (in(n, 0).requires_grad) {
                  const auto g = in(n, 1).val().row(0).array();
                  Matrix dx(dy.rows(), dy.cols());
                  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                    Eigen::ArrayXd dn = (dy.row(r).array() * g).transpose();
                    Eigen::ArrayXd nr = normed.row(r).array().transpose();
                    dx.row(r) = (inv_std(r) * (dn - dn.mean() - nr * (dn * nr).mean())).transpose();
                  }
                  in(n, 0).accumulate(dx);
                }
              });
}

Var softmax_rows(const Var& x, const BoolMatrix* blocked) {
  if (blocked != nullptr && (blocked->rows() != x.rows() || blocked->cols() != x.cols())) {
    throw std::invalid_argument("softmax_rows: mask shape mismatch");
  }
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double peak = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (blocked == nullptr || !(*blocked)(r, c)) peak = std::max(peak, x.value()(r, c));
    }
    if (!std::isfinite(peak)) throw std::invalid_argument("softmax_rows: fully masked row");
    double total = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const bool off = blocked != nullptr && (*blocked)(r, c);
      out(r, c) = off ? 0.0 : std::exp(x.value()(r, c) - peak);
      total += out(r, c);
    }
    out.row(r) /= total;
  }
  return make(std::move(out), {x}, [](Node& n) {
    const Matrix& y = n.value;
    Eigen::VectorXd dot = n.grad.cwiseProduct(y).rowwise().sum();
    Matrix dx = y.cwiseProduct((n.grad.colwise() - dot));
    in(n, 0).accumulate(dx);
  });
}

Var bce_with_logits(const Var& logits, const Matrix& targets, const Matrix& weights, double clamp) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols() ||
      weights.rows() != logits.rows() || weights.cols() != logits.cols()) {
    throw std::invalid_argument("bce_with_logits: shape mismatch");
  }
  const double lo = std::log(clamp);
  const double hi = std::log1p(-clamp);
  double total = 0.0;
  const Matrix& z = logits.value();
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double zi = z.data()[i];
    const double log_p = std::clamp(-softplus(-zi), lo, hi);
    const double log_q = std::clamp(-softplus(zi), lo, hi);
    const double y = targets.data()[i];
    total -= weights.data()[i] * (y * log_p + (1.0 - y) * log_q);
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return make(std::move(out), {logits}, [targets, weights](Node& n) {
    const Matrix& zv = in(n, 0).val();
    Matrix g = zv.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); }) - targets;
    in(n, 0).accumulate(g.cwiseProduct(weights) * n.grad(0, 0));
  });
}

Var row_cosine(const Var& a, const Var& b) {
  require_same_shape(a, b, "row_cosine");
  Var dot = row_sum(mul(a, b));
  Var norms = sqrt(mul(row_sum(mul(a, a)), row_sum(mul(b, b))));
  return div(dot, norms);
}

}  // namespace attrprompt::ad
