// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace attrprompt {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

ad::Var param(const ParameterStore& store, const std::string& name) {
  // Leaves alias the stored value; backward writes only Parameter::grad.
  return ad::parameter(const_cast<Parameter&>(store.at(name)));
}

std::vector<std::string> block_parameter_names(const std::string& prefix) {
  std::vector<std::string> out;
  for (const char* n : {"ln_1.weight", "ln_1.bias", "attn.in_proj_weight", "attn.in_proj_bias",
                        "attn.out_proj.weight", "attn.out_proj.bias", "ln_2.weight", "ln_2.bias",
                        "mlp.c_fc.weight", "mlp.c_fc.bias", "mlp.c_proj.weight", "mlp.c_proj.bias"}) {
    out.push_back(prefix + n);
  }
  return out;
}

void init_block(ParameterStore& store, const std::string& prefix, const BlockShape& s, int depth,
                std::mt19937_64& rng) {
  const int d = s.width;
  const int hidden = s.mlp_ratio * d;
  const double attn_std = std::pow(d, -0.5);
  const double proj_std = attn_std * std::pow(2.0 * depth, -0.5);
  const double fc_std = std::pow(2.0 * d, -0.5);
  store.add(prefix + "ln_1.weight", Matrix::Ones(1, d));
  store.add(prefix + "ln_1.bias", Matrix::Zero(1, d));
  store.add(prefix + "attn.in_proj_weight", gaussian(3 * d, d, attn_std, rng));
  store.add(prefix + "attn.in_proj_bias", Matrix::Zero(1, 3 * d));
  store.add(prefix + "attn.out_proj.weight", gaussian(d, d, proj_std, rng));
  store.add(prefix + "attn.out_proj.bias", Matrix::Zero(1, d));
  store.add(prefix + "ln_2.weight", Matrix::Ones(1, d));
  store.add(prefix + "ln_2.bias", Matrix::Zero(1, d));
  store.add(prefix + "mlp.c_fc.weight", gaussian(hidden, d, fc_std, rng));
  store.add(prefix + "mlp.c_fc.bias", Matrix::Zero(1, hidden));
  store.add(prefix + "mlp.c_proj.weight", gaussian(d, hidden, proj_std, rng));
  store.add(prefix + "mlp.c_proj.bias", Matrix::Zero(1, d));
}

ad::Var block_forward(const ParameterStore& store, const std::string& prefix, const BlockShape& s,
                      const ad::Var& x, const ad::BoolMatrix* blocked, std::vector<Matrix>* attention) {
  const int d = s.width;
  if (x.cols() != d) throw std::invalid_argument(prefix + ": token width " + std::to_string(x.cols()) +
                                                 " != " + std::to_string(d));
  if (d % s.heads != 0) throw std::invalid_argument(prefix + ": width not divisible by heads");
  const int head_dim = d / s.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  auto p = [&](const char* n) { return param(store, prefix + n); };

  ad::Var h = ad::layer_norm(x, p("ln_1.weight"), p("ln_1.bias"));
  ad::Var qkv = ad::add_row(ad::matmul_nt(h, p("attn.in_proj_weight")), p("attn.in_proj_bias"));
  std::vector<ad::Var> heads;
  heads.reserve(s.heads);
  for (int k = 0; k < s.heads; ++k) {
    ad::Var q = ad::slice_cols(qkv, k * head_dim, head_dim);
    ad::Var key = ad::slice_cols(qkv, d + k * head_dim, head_dim);
    ad::Var v = ad::slice_cols(qkv, 2 * d + k * head_dim, head_dim);
    ad::Var probs = ad::softmax_rows(ad::scale(ad::matmul_nt(q, key), scale), blocked);
    if (attention != nullptr) attention->push_back(probs.value());
    heads.push_back(ad::matmul(probs, v));
  }
  ad::Var attn = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
  attn = ad::add_row(ad::matmul_nt(attn, p("attn.out_proj.weight")), p("attn.out_proj.bias"));
  ad::Var mid = ad::add(x, attn);

  ad::Var m = ad::layer_norm(mid, p("ln_2.weight"), p("ln_2.bias"));
  m = ad::quick_gelu(ad::add_row(ad::matmul_nt(m, p("mlp.c_fc.weight")), p("mlp.c_fc.bias")));
  m = ad::add_row(ad::matmul_nt(m, p("mlp.c_proj.weight")), p("mlp.c_proj.bias"));
  return ad::add(mid, m);
}

}  // namespace attrprompt
