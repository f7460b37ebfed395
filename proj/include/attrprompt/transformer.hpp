// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/autodiff.hpp"
#include "attrprompt/parameters.hpp"

#include <random>
#include <string>
#include <vector>

namespace attrprompt {

/// Pre-norm residual block: x + MHA(LN1(x)), then h + MLP(LN2(h)).
/// Parameter names follow the common dual-encoder layout under `prefix`:
///   ln_1.{weight,bias}, attn.in_proj_weight (3d x d), attn.in_proj_bias,
///   attn.out_proj.{weight,bias}, ln_2.{weight,bias},
///   mlp.c_fc.{weight,bias} (r*d x d), mlp.c_proj.{weight,bias} (d x r*d).
struct BlockShape {
  int width = 0;
  int heads = 1;
  int mlp_ratio = 4;
};

void init_block(ParameterStore& store, const std::string& prefix, const BlockShape& shape, int depth,
                std::mt19937_64& rng);

/// Names the parameters `init_block` creates, relative to nothing (full names).
std::vector<std::string> block_parameter_names(const std::string& prefix);

/// Looks up parameters from `store` by name. `blocked(i, j)` true removes key j
/// from query i's attention. When `attention` is non-null the per-head
/// attention probabilities are appended to it.
ad::Var block_forward(const ParameterStore& store, const std::string& prefix, const BlockShape& shape,
                      const ad::Var& x, const ad::BoolMatrix* blocked,
                      std::vector<Matrix>* attention = nullptr);

/// Leaf for a stored parameter: trainable ones join the graph, frozen ones
/// are constants.
ad::Var param(const ParameterStore& store, const std::string& name);

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng);

}  // namespace attrprompt
