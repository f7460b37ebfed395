// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/text.hpp"

#include <cctype>
#include <cmath>
#include <stdexcept>

namespace attrprompt {

namespace {

std::string block_prefix(int i) { return "text.transformer.resblocks." + std::to_string(i) + "."; }

std::vector<std::string> split_words(const std::string& name) {
  std::vector<std::string> words;
  std::string cur;
  for (std::size_t i = 0; i < name.size(); ++i) {
    const unsigned char ch = static_cast<unsigned char>(name[i]);
    if (!std::isalnum(ch)) {
      if (!cur.empty()) words.push_back(std::exchange(cur, {}));
      continue;
    }
    // camelCase boundary
    if (std::isupper(ch) && !cur.empty() && std::islower(static_cast<unsigned char>(cur.back()))) {
      words.push_back(std::exchange(cur, {}));
    }
    cur.push_back(static_cast<char>(std::tolower(ch)));
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

ad::BoolMatrix causal_mask(Eigen::Index n) {
  ad::BoolMatrix m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = j > i;
  }
  return m;
}

}  // namespace

void TextConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("text config: " + msg); };
  if (depth < 1) fail("depth K must be >= 1");
  if (width < 1) fail("width d_t must be >= 1");
  if (embed_dim < 1) fail("embed_dim d_vt must be >= 1");
  if (heads < 1 || width % heads != 0) fail("heads must divide width");
  if (context_length < 2) fail("context_length must be >= 2");
  for (int id : {sos_id, eos_id, pad_id}) {
    if (id < 0 || id >= vocab_size) fail("special token id " + std::to_string(id) + " outside vocabulary");
  }
  if (sos_id == eos_id) fail("SOS and EOS ids must differ");
}

TextEncoder::TextEncoder(TextConfig config, TextPromptConfig prompts, AttributeSchema schema)
    : config_(config), prompts_(std::move(prompts)), schema_(std::move(schema)) {
  config_.validate();
  const int g = prompts_.person_context;
  const int s = prompts_.attribute_context;
  if (g < 0 || s < 0) throw std::invalid_argument("context lengths must be non-negative");
  if (prompts_.template_kind == TextTemplate::PersonAndAttribute) {
    if (g + s + 2 > config_.context_length) {
      throw std::invalid_argument("G + S + 2 = " + std::to_string(g + s + 2) + " exceeds context length L = " +
                                  std::to_string(config_.context_length));
    }
  } else {
    for (std::size_t j = 0; j < schema_.size(); ++j) {
      const auto n = static_cast<int>(attribute_ids(j).size());
      if (g + n + 2 > config_.context_length) {
        throw std::invalid_argument("attribute '" + schema_.name(j) + "' needs " + std::to_string(g + n + 2) +
                                    " positions, context length L = " + std::to_string(config_.context_length));
      }
    }
  }
}

std::vector<int> TextEncoder::tokenize(const std::string& attribute) const {
  std::vector<int> ids;
  const auto vocab = static_cast<std::uint64_t>(config_.vocab_size);
  for (const auto& w : split_words(attribute)) {
    int id = static_cast<int>(fnv1a(w) % vocab);
    while (id == config_.pad_id || id == config_.sos_id || id == config_.eos_id) id = (id + 1) % config_.vocab_size;
    ids.push_back(id);
  }
  return ids;
}

std::vector<int> TextEncoder::attribute_ids(std::size_t j) const {
  const auto& name = schema_.name(j);
  if (auto it = prompts_.attribute_token_ids.find(name); it != prompts_.attribute_token_ids.end()) {
    for (int id : it->second) {
      if (id < 0 || id >= config_.vocab_size) {
        throw std::invalid_argument("token id " + std::to_string(id) + " for '" + name + "' outside vocabulary");
      }
    }
    return it->second;
  }
  return tokenize(name);
}

void TextEncoder::init_encoder(ParameterStore& store, std::mt19937_64& rng) const {
  const int d = config_.width;
  store.add("text.token_embedding.weight", gaussian(config_.vocab_size, d, 0.02, rng));
  store.add("text.positional_embedding", gaussian(config_.context_length, d, 0.01, rng));
  for (int i = 0; i < config_.depth; ++i) init_block(store, block_prefix(i), config_.block(), config_.depth, rng);
  store.add("text.ln_final.weight", Matrix::Ones(1, d));
  store.add("text.ln_final.bias", Matrix::Zero(1, d));
  store.add("text.text_projection", gaussian(d, config_.embed_dim, std::pow(d, -0.5), rng));
}

void TextEncoder::init_bank(ParameterStore& store, std::mt19937_64& rng) const {
  const int d = config_.width;
  const int g = prompts_.person_context;
  const int s = prompts_.attribute_context;
  auto put = [&](const std::string& name, Matrix value) {
    if (auto* p = store.find(name)) {
      p->value = std::move(value);
    } else {
      store.add(name, std::move(value));
    }
  };
  if (g > 0) put("prompts.person_context", gaussian(g, d, prompts_.init_std, rng));
  if (prompts_.template_kind != TextTemplate::PersonAndAttribute || s == 0) return;

  const auto a = static_cast<Eigen::Index>(schema_.size());
  Matrix contexts = gaussian(a * s, d, prompts_.init_std, rng);
  if (prompts_.init == ContextInit::AttributePhrase) {
    const Matrix& table = store.at("text.token_embedding.weight").value;
    for (Eigen::Index j = 0; j < a; ++j) {
      const auto ids = attribute_ids(static_cast<std::size_t>(j));
      for (int q = 0; q < s; ++q) {
        const int id = q < static_cast<int>(ids.size()) ? ids[q] : config_.pad_id;
        contexts.row(j * s + q) = table.row(id);
      }
    }
  }
  put("prompts.attribute_contexts", std::move(contexts));
}

std::vector<std::string> TextEncoder::encoder_parameter_names() const {
  std::vector<std::string> out = {"text.token_embedding.weight", "text.positional_embedding"};
  for (int i = 0; i < config_.depth; ++i) {
    for (auto& n : block_parameter_names(block_prefix(i))) out.push_back(std::move(n));
  }
  for (const char* n : {"text.ln_final.weight", "text.ln_final.bias", "text.text_projection"}) out.emplace_back(n);
  return out;
}

std::vector<std::string> TextEncoder::bank_parameter_names() const {
  std::vector<std::string> out;
  if (prompts_.person_context > 0) out.emplace_back("prompts.person_context");
  if (prompts_.template_kind == TextTemplate::PersonAndAttribute && prompts_.attribute_context > 0) {
    out.emplace_back("prompts.attribute_contexts");
  }
  return out;
}

ad::Var TextEncoder::embed(const ParameterStore& store, const std::vector<int>& ids) const {
  const auto& table = store.at("text.token_embedding.weight");
  if (table.trainable && ad::grad_enabled()) {
    ad::Var t = param(store, table.name);
    std::vector<ad::Var> rows;
    for (int id : ids) rows.push_back(ad::slice_rows(t, id, 1));
    return ad::concat_rows(rows);
  }
  Matrix rows(static_cast<Eigen::Index>(ids.size()), config_.width);
  for (std::size_t i = 0; i < ids.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = table.value.row(ids[i]);
  return ad::constant(std::move(rows));
}

AssembledSequences TextEncoder::assemble(const ParameterStore& store) const {
  const int g = prompts_.person_context;
  const int s = prompts_.attribute_context;
  const int len = config_.context_length;

  ad::Var sos = embed(store, {config_.sos_id});
  ad::Var eos = embed(store, {config_.eos_id});
  ad::Var person;
  if (g > 0) person = param(store, "prompts.person_context");
  ad::Var contexts;
  if (prompts_.template_kind == TextTemplate::PersonAndAttribute && s > 0) {
    contexts = param(store, "prompts.attribute_contexts");
    if (contexts.rows() != static_cast<Eigen::Index>(schema_.size()) * s) {
      throw std::invalid_argument("attribute_contexts has " + std::to_string(contexts.rows()) +
                                  " rows, expected A*S = " + std::to_string(schema_.size() * s));
    }
  }

  AssembledSequences out;
  for (std::size_t j = 0; j < schema_.size(); ++j) {
    std::vector<ad::Var> parts = {sos};
    if (g > 0) parts.push_back(person);
    int block = 0;
    if (prompts_.template_kind == TextTemplate::PersonAndAttribute) {
      if (s > 0) parts.push_back(ad::slice_rows(contexts, static_cast<Eigen::Index>(j) * s, s));
      block = s;
    } else {
      const auto ids = attribute_ids(j);
      if (!ids.empty()) parts.push_back(embed(store, ids));
      block = static_cast<int>(ids.size());
    }
    parts.push_back(eos);
    const int eos_at = 1 + g + block;
    if (eos_at + 1 < len) parts.push_back(embed(store, std::vector<int>(len - eos_at - 1, config_.pad_id)));
    out.sequences.push_back(ad::concat_rows(parts));
    out.eos_positions.push_back(eos_at);
  }
  return out;
}

ad::Var TextEncoder::forward(const ParameterStore& store, const AssembledSequences& seqs,
                             bool truncate_after_eos) const {
  if (seqs.sequences.size() != seqs.eos_positions.size() || seqs.sequences.empty()) {
    throw std::invalid_argument("forward_text: malformed sequences");
  }
  ad::Var pos = param(store, "text.positional_embedding");
  ad::Var ln_w = param(store, "text.ln_final.weight");
  ad::Var ln_b = param(store, "text.ln_final.bias");
  std::vector<ad::Var> summaries;
  for (std::size_t j = 0; j < seqs.sequences.size(); ++j) {
    const ad::Var& seq = seqs.sequences[j];
    if (seq.rows() != config_.context_length || seq.cols() != config_.width) {
      throw std::invalid_argument("forward_text: sequence " + std::to_string(j) + " is " + std::to_string(seq.rows()) +
                                  "x" + std::to_string(seq.cols()) + ", expected L x d_t");
    }
    for (Eigen::Index i = 0; i < seq.value().size(); ++i) {
      if (!std::isfinite(seq.value().data()[i])) throw std::invalid_argument("forward_text: non-finite input");
    }
    const int eos_at = seqs.eos_positions[j];
    const Eigen::Index n = truncate_after_eos ? eos_at + 1 : seq.rows();
    ad::Var x = n == seq.rows() ? seq : ad::slice_rows(seq, 0, n);
    x = ad::add(x, n == pos.rows() ? pos : ad::slice_rows(pos, 0, n));
    const ad::BoolMatrix mask = causal_mask(n);
    for (int i = 0; i < config_.depth; ++i) x = block_forward(store, block_prefix(i), config_.block(), x, &mask);
    summaries.push_back(ad::layer_norm(ad::slice_rows(x, eos_at, 1), ln_w, ln_b));
  }
  return ad::matmul(ad::concat_rows(summaries), param(store, "text.text_projection"));
}

}  // namespace attrprompt
