// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/autodiff.hpp"
#include "attrprompt/data.hpp"
#include "attrprompt/parameters.hpp"
#include "attrprompt/transformer.hpp"

#include <map>
#include <random>
#include <string>
#include <vector>

namespace attrprompt {

struct TextConfig {
  int width = 512;            // d_t
  int context_length = 77;    // L
  int depth = 12;             // K
  int heads = 8;
  int mlp_ratio = 4;
  int embed_dim = 512;        // d_vt
  int vocab_size = 49408;
  int sos_id = 49406;
  int eos_id = 49407;
  int pad_id = 0;

  BlockShape block() const { return {width, heads, mlp_ratio}; }
  void validate() const;
};

enum class TextTemplate {
  PersonAndAttribute,  // [SOS] X_1..X_G Y^j_1..Y^j_S [EOS]
  PersonOnly,          // [SOS] X_1..X_G <embedded attribute name> [EOS]
};

enum class ContextInit {
  Gaussian,         // N(0, init_std^2)
  AttributePhrase,  // Y^j from the embedded attribute name, truncated/padded to S
};

struct TextPromptConfig {
  int person_context = 4;      // G, shared by all attributes
  int attribute_context = 16;  // S, one block per attribute
  TextTemplate template_kind = TextTemplate::PersonAndAttribute;
  ContextInit init = ContextInit::Gaussian;
  double init_std = 0.02;
  /// Explicit token ids per attribute name. Names without an entry fall back
  /// to the built-in hashing word tokenizer.
  std::map<std::string, std::vector<int>> attribute_token_ids;
};

/// Assembled token embeddings, one L x d_t matrix per attribute.
struct AssembledSequences {
  std::vector<ad::Var> sequences;
  std::vector<int> eos_positions;
};

/// Frozen causal text transformer plus the learnable prompt bank.
///
/// Encoder parameters live under `text.`: token_embedding.weight
/// (vocab x d_t), positional_embedding (L x d_t), the blocks under
/// transformer.resblocks.<i>., ln_final, text_projection (d_t x d_vt).
/// The bank lives under `prompts.`: person_context (G x d_t) and
/// attribute_contexts (A*S x d_t, attribute j in rows j*S..j*S+S-1).
class TextEncoder {
 public:
  TextEncoder(TextConfig config, TextPromptConfig prompts, AttributeSchema schema);

  const TextConfig& config() const { return config_; }
  const TextPromptConfig& prompt_config() const { return prompts_; }

  void init_encoder(ParameterStore& store, std::mt19937_64& rng) const;
  void init_bank(ParameterStore& store, std::mt19937_64& rng) const;
  std::vector<std::string> encoder_parameter_names() const;
  std::vector<std::string> bank_parameter_names() const;

  /// Word-level tokenization of an attribute name, special ids excluded.
  std::vector<int> tokenize(const std::string& attribute) const;

  AssembledSequences assemble(const ParameterStore& store) const;

  /// Runs each sequence through the causal blocks, takes the EOS-position
  /// state after the final norm and projects it: A x d_vt. With
  /// `truncate_after_eos` positions after EOS are dropped before the blocks;
  /// causal masking makes the result independent of them either way.
  ad::Var forward(const ParameterStore& store, const AssembledSequences& seqs,
                  bool truncate_after_eos = true) const;

  ad::Var encode(const ParameterStore& store) const { return forward(store, assemble(store)); }

 private:
  ad::Var embed(const ParameterStore& store, const std::vector<int>& ids) const;
  std::vector<int> attribute_ids(std::size_t j) const;

  TextConfig config_;
  TextPromptConfig prompts_;
  AttributeSchema schema_;
};

}  // namespace attrprompt
