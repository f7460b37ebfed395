// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace attrprompt {

namespace {

template <typename E>
using EnumTable = std::initializer_list<std::pair<E, const char*>>;

constexpr EnumTable<PromptAttention> kAttention = {{PromptAttention::Full, "full"},
                                                    {PromptAttention::IsolatePrompts, "isolate_prompts"}};
constexpr EnumTable<TextTemplate> kTemplate = {{TextTemplate::PersonAndAttribute, "person_and_attribute"},
                                               {TextTemplate::PersonOnly, "person_only"}};
constexpr EnumTable<ContextInit> kContextInit = {{ContextInit::Gaussian, "gaussian"},
                                                 {ContextInit::AttributePhrase, "attribute_phrase"}};
constexpr EnumTable<HeadKind> kHead = {{HeadKind::PerAttribute, "per_attribute"}, {HeadKind::SharedMlp, "shared_mlp"}};
constexpr EnumTable<AblationMode> kMode = {{AblationMode::FrozenProbe, "frozen_probe"},
                                           {AblationMode::VisualPrompts, "visual_prompts"},
                                           {AblationMode::Full, "full"}};
constexpr EnumTable<PromptInit> kPromptInit = {{PromptInit::Gaussian, "gaussian"},
                                               {PromptInit::ClassToken, "class_token"}};
constexpr EnumTable<WeightScheme> kWeights = {{WeightScheme::Exponential, "exponential"},
                                              {WeightScheme::Uniform, "uniform"}};

template <typename E>
std::string enum_name(E value, EnumTable<E> table) {
  for (const auto& [v, name] : table) {
    if (v == value) return name;
  }
  throw std::logic_error("unnamed enum value");
}

template <typename E>
E enum_value(const json& j, EnumTable<E> table, const char* what) {
  const auto s = j.get<std::string>();
  std::string options;
  for (const auto& [v, name] : table) {
    if (s == name) return v;
    options += (options.empty() ? "" : ", ") + std::string(name);
  }
  throw std::invalid_argument(std::string(what) + ": unknown value '" + s + "' (expected one of " + options + ")");
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* section) {
  if (!j.is_object()) throw std::invalid_argument(std::string(section) + ": expected a mapping");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (ok.count(key) == 0) throw std::invalid_argument(std::string(section) + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& dst) {
  if (j.contains(key) && !j.at(key).is_null()) dst = j.at(key).get<T>();
}

template <typename E>
void read_enum(const json& j, const char* key, E& dst, EnumTable<E> table) {
  if (j.contains(key) && !j.at(key).is_null()) dst = enum_value(j.at(key), table, key);
}

json scalar_to_json(const YAML::Node& node) {
  const std::string s = node.Scalar();
  if (node.Tag() == "!") return s;  // quoted
  if (s.empty() || s == "~" || s == "null" || s == "Null" || s == "NULL") return nullptr;
  if (s == "true" || s == "True" || s == "TRUE") return true;
  if (s == "false" || s == "False" || s == "FALSE") return false;
  std::int64_t i = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), i);
  if (ec == std::errc() && p == s.data() + s.size()) return i;
  char* end = nullptr;
  const double d = std::strtod(s.c_str(), &end);
  if (end == s.c_str() + s.size()) return d;
  return s;
}

json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined: return nullptr;
    case YAML::NodeType::Scalar: return scalar_to_json(node);
    case YAML::NodeType::Sequence: {
      json arr = json::array();
      for (const auto& child : node) arr.push_back(yaml_to_json(child));
      return arr;
    }
    case YAML::NodeType::Map: {
      json obj = json::object();
      for (const auto& kv : node) obj[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return obj;
    }
  }
  return nullptr;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  return base / p;
}

}  // namespace

void to_json(json& j, const VisualConfig& c) {
  j = {{"image_height", c.image_height}, {"image_width", c.image_width}, {"patch_size", c.patch_size},
       {"width", c.width},               {"depth", c.depth},             {"heads", c.heads},
       {"mlp_ratio", c.mlp_ratio},       {"embed_dim", c.embed_dim},     {"normalize_prompts", c.normalize_prompts},
       {"attention", enum_name(c.attention, kAttention)}};
}

void from_json(const json& j, VisualConfig& c) {
  check_keys(j, {"image_height", "image_width", "patch_size", "width", "depth", "heads", "mlp_ratio", "embed_dim",
                 "normalize_prompts", "attention"},
             "model.visual");
  read(j, "image_height", c.image_height);
  read(j, "image_width", c.image_width);
  read(j, "patch_size", c.patch_size);
  read(j, "width", c.width);
  read(j, "depth", c.depth);
  read(j, "heads", c.heads);
  read(j, "mlp_ratio", c.mlp_ratio);
  read(j, "embed_dim", c.embed_dim);
  read(j, "normalize_prompts", c.normalize_prompts);
  read_enum(j, "attention", c.attention, kAttention);
}

void to_json(json& j, const TextConfig& c) {
  j = {{"width", c.width},         {"context_length", c.context_length}, {"depth", c.depth},
       {"heads", c.heads},         {"mlp_ratio", c.mlp_ratio},           {"embed_dim", c.embed_dim},
       {"vocab_size", c.vocab_size}, {"sos_id", c.sos_id},               {"eos_id", c.eos_id},
       {"pad_id", c.pad_id}};
}

void from_json(const json& j, TextConfig& c) {
  check_keys(j, {"width", "context_length", "depth", "heads", "mlp_ratio", "embed_dim", "vocab_size", "sos_id",
                 "eos_id", "pad_id"},
             "model.text");
  read(j, "width", c.width);
  read(j, "context_length", c.context_length);
  read(j, "depth", c.depth);
  read(j, "heads", c.heads);
  read(j, "mlp_ratio", c.mlp_ratio);
  read(j, "embed_dim", c.embed_dim);
  read(j, "vocab_size", c.vocab_size);
  read(j, "sos_id", c.sos_id);
  read(j, "eos_id", c.eos_id);
  read(j, "pad_id", c.pad_id);
}

void to_json(json& j, const TextPromptConfig& c) {
  j = {{"person_context", c.person_context},
       {"attribute_context", c.attribute_context},
       {"template", enum_name(c.template_kind, kTemplate)},
       {"init", enum_name(c.init, kContextInit)},
       {"init_std", c.init_std},
       {"attribute_token_ids", c.attribute_token_ids}};
}

void from_json(const json& j, TextPromptConfig& c) {
  check_keys(j, {"person_context", "attribute_context", "template", "init", "init_std", "attribute_token_ids"},
             "model.text_prompts");
  read(j, "person_context", c.person_context);
  read(j, "attribute_context", c.attribute_context);
  read_enum(j, "template", c.template_kind, kTemplate);
  read_enum(j, "init", c.init, kContextInit);
  read(j, "init_std", c.init_std);
  read(j, "attribute_token_ids", c.attribute_token_ids);
}

void to_json(json& j, const HeadConfig& c) { j = {{"kind", enum_name(c.kind, kHead)}, {"hidden", c.hidden}}; }

void from_json(const json& j, HeadConfig& c) {
  check_keys(j, {"kind", "hidden"}, "model.head");
  read_enum(j, "kind", c.kind, kHead);
  read(j, "hidden", c.hidden);
}

void to_json(json& j, const ModelConfig& c) {
  j = {{"visual", c.visual},
       {"text", c.text},
       {"text_prompts", c.text_prompts},
       {"head", c.head},
       {"mode", enum_name(c.mode, kMode)},
       {"prompt_init", enum_name(c.prompt_init, kPromptInit)},
       {"prompt_init_std", c.prompt_init_std},
       {"tau", c.tau},
       {"learnable_tau", c.learnable_tau},
       {"weighted_alignment", c.weighted_alignment},
       {"train_visual_encoder", c.train_visual_encoder},
       {"unfreeze_text", c.unfreeze_text}};
}

void from_json(const json& j, ModelConfig& c) {
  check_keys(j, {"visual", "text", "text_prompts", "head", "mode", "prompt_init", "prompt_init_std", "tau",
                 "learnable_tau", "weighted_alignment", "train_visual_encoder", "unfreeze_text"},
             "model");
  read(j, "visual", c.visual);
  read(j, "text", c.text);
  read(j, "text_prompts", c.text_prompts);
  read(j, "head", c.head);
  read_enum(j, "mode", c.mode, kMode);
  read_enum(j, "prompt_init", c.prompt_init, kPromptInit);
  read(j, "prompt_init_std", c.prompt_init_std);
  read(j, "tau", c.tau);
  read(j, "learnable_tau", c.learnable_tau);
  read(j, "weighted_alignment", c.weighted_alignment);
  read(j, "train_visual_encoder", c.train_visual_encoder);
  read(j, "unfreeze_text", c.unfreeze_text);
}

void to_json(json& j, const LossSchedule& s) {
  j = json::array();
  for (const auto& p : s.phases()) j.push_back({{"start_epoch", p.start_epoch}, {"alpha", p.alpha}, {"beta", p.beta}});
}

void from_json(const json& j, LossSchedule& s) {
  if (!j.is_array()) throw std::invalid_argument("train.schedule: expected a list of {start_epoch, alpha, beta}");
  std::vector<LossPhase> phases;
  for (const auto& item : j) {
    check_keys(item, {"start_epoch", "alpha", "beta"}, "train.schedule");
    LossPhase p;
    p.start_epoch = item.at("start_epoch").get<int>();
    p.alpha = item.at("alpha").get<double>();
    p.beta = item.at("beta").get<double>();
    phases.push_back(p);
  }
  s = LossSchedule(std::move(phases));
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.optimizer.weight_decay},
       {"adam_beta1", c.optimizer.beta1},
       {"adam_beta2", c.optimizer.beta2},
       {"adam_eps", c.optimizer.eps},
       {"grad_clip", c.grad_clip},
       {"seed", c.seed},
       {"shuffle", c.shuffle},
       {"schedule", c.schedule},
       {"force_text_forward", c.force_text_forward},
       {"audit_freeze", c.audit_freeze},
       {"threshold", c.threshold},
       {"save_interval", c.save_interval}};
}

void from_json(const json& j, TrainConfig& c) {
  check_keys(j, {"epochs", "batch_size", "learning_rate", "weight_decay", "adam_beta1", "adam_beta2", "adam_eps",
                 "grad_clip", "seed", "shuffle", "schedule", "force_text_forward", "audit_freeze", "threshold",
                 "save_interval"},
             "train");
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "learning_rate", c.learning_rate);
  read(j, "weight_decay", c.optimizer.weight_decay);
  read(j, "adam_beta1", c.optimizer.beta1);
  read(j, "adam_beta2", c.optimizer.beta2);
  read(j, "adam_eps", c.optimizer.eps);
  read(j, "grad_clip", c.grad_clip);
  read(j, "seed", c.seed);
  read(j, "shuffle", c.shuffle);
  read(j, "schedule", c.schedule);
  read(j, "force_text_forward", c.force_text_forward);
  read(j, "audit_freeze", c.audit_freeze);
  read(j, "threshold", c.threshold);
  read(j, "save_interval", c.save_interval);
}

void to_json(json& j, const Normalization& n) { j = {{"mean", n.mean}, {"std", n.std}}; }

void from_json(const json& j, Normalization& n) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "clip") {
      n = Normalization::clip();
    } else if (s == "symmetric") {
      n = Normalization::symmetric();
    } else if (s == "identity") {
      n = Normalization::identity();
    } else {
      throw std::invalid_argument("data.normalization: unknown preset '" + s + "' (clip, symmetric, identity)");
    }
    return;
  }
  check_keys(j, {"mean", "std"}, "data.normalization");
  read(j, "mean", n.mean);
  read(j, "std", n.std);
}

void to_json(json& j, const SyntheticSpec& s) {
  j = {{"attributes", s.attributes},
       {"samples", s.samples},
       {"height", s.height},
       {"width", s.width},
       {"cue_size", s.cue_size},
       {"seed", s.seed},
       {"min_positive_rate", s.min_positive_rate},
       {"max_positive_rate", s.max_positive_rate},
       {"train_fraction", s.train_fraction},
       {"val_fraction", s.val_fraction},
       {"normalization", s.normalization}};
}

void from_json(const json& j, SyntheticSpec& s) {
  check_keys(j, {"attributes", "samples", "height", "width", "cue_size", "seed", "min_positive_rate",
                 "max_positive_rate", "train_fraction", "val_fraction", "normalization"},
             "data.synthetic");
  read(j, "attributes", s.attributes);
  read(j, "samples", s.samples);
  read(j, "height", s.height);
  read(j, "width", s.width);
  read(j, "cue_size", s.cue_size);
  read(j, "seed", s.seed);
  read(j, "min_positive_rate", s.min_positive_rate);
  read(j, "max_positive_rate", s.max_positive_rate);
  read(j, "train_fraction", s.train_fraction);
  read(j, "val_fraction", s.val_fraction);
  read(j, "normalization", s.normalization);
}

void to_json(json& j, const DataConfig& c) {
  j = {{"normalization", c.normalization}, {"weights", enum_name(c.weights, kWeights)}};
  if (!c.annotations.empty()) j["annotations"] = c.annotations.string();
  if (c.synthetic) j["synthetic"] = *c.synthetic;
}

void from_json(const json& j, DataConfig& c) {
  check_keys(j, {"annotations", "synthetic", "normalization", "weights"}, "data");
  if (j.contains("annotations")) c.annotations = j.at("annotations").get<std::string>();
  if (j.contains("synthetic")) c.synthetic = j.at("synthetic").get<SyntheticSpec>();
  read(j, "normalization", c.normalization);
  read_enum(j, "weights", c.weights, kWeights);
  if (!c.annotations.empty() && c.synthetic) {
    throw std::invalid_argument("data: give either annotations or synthetic, not both");
  }
}

void to_json(json& j, const RunConfig& c) {
  j = {{"model", c.model}, {"train", c.train}, {"data", c.data}};
  if (!c.pretrained.empty()) j["pretrained"] = {{"path", c.pretrained.string()}, {"strict", c.pretrained_strict}};
  if (!c.output.empty()) j["output"] = c.output.string();
}

void from_json(const json& j, RunConfig& c) {
  check_keys(j, {"model", "train", "data", "pretrained", "output"}, "config");
  read(j, "model", c.model);
  read(j, "train", c.train);
  read(j, "data", c.data);
  if (j.contains("pretrained") && !j.at("pretrained").is_null()) {
    const auto& p = j.at("pretrained");
    check_keys(p, {"path", "strict"}, "pretrained");
    c.pretrained = p.at("path").get<std::string>();
    read(p, "strict", c.pretrained_strict);
  }
  if (j.contains("output") && !j.at("output").is_null()) c.output = j.at("output").get<std::string>();
}

json parse_yaml(const std::string& text) {
  try {
    return yaml_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const json j = parse_yaml(ss.str());
  RunConfig c = j.is_null() ? RunConfig{} : j.get<RunConfig>();
  const auto base = path.parent_path();
  c.data.annotations = resolve(base, c.data.annotations);
  c.pretrained = resolve(base, c.pretrained);
  c.output = resolve(base, c.output);
  return c;
}

PreparedData prepare_data(const RunConfig& config) {
  PreparedData out;
  if (config.data.synthetic) {
    SyntheticSpec spec = *config.data.synthetic;
    spec.height = config.model.visual.image_height;
    spec.width = config.model.visual.image_width;
    spec.normalization = config.data.normalization;
    const auto ds = generate_synthetic_dataset(spec);
    out.schema = ds.schema;
    out.train = ds.split(Split::Train);
    out.val = ds.split(Split::Val);
    out.test = ds.split(Split::Test);
  } else {
    if (config.data.annotations.empty()) throw std::invalid_argument("data: annotations or synthetic is required");
    const auto opts = config.image_options();
    std::tie(out.schema, out.train) = load_annotations(config.data.annotations, Split::Train, opts);
    out.val = load_annotations(config.data.annotations, Split::Val, opts).second;
    out.test = load_annotations(config.data.annotations, Split::Test, opts).second;
  }
  out.weights = compute_imbalance_weights(out.train, out.schema, config.data.weights);
  return out;
}

TrainedModel train_from_config(const RunConfig& config, const PreparedData& data,
                               const Trainer::EpochCallback& on_epoch) {
  TrainedModel out{Model(config.model, data.schema), {}, {}};
  out.store = out.model.init(config.train.seed);
  if (!config.pretrained.empty()) {
    load_pretrained(out.model, out.store, config.pretrained, config.pretrained_strict);
    out.model.apply_freeze(out.store);
  }
  TrainConfig tc = config.train;
  if (!config.output.empty()) tc.output_dir = config.output;
  tc.schedule = tc.schedule.with_end(std::max(tc.epochs, 1));
  Trainer trainer(out.model, out.store, tc, json(config));
  out.result = trainer.fit(data.train, data.weights, on_epoch);
  return out;
}

Model model_from_checkpoint(const LoadedCheckpoint& ckpt) {
  const auto& cfg = ckpt.meta.config;
  if (!cfg.contains("model")) throw std::runtime_error("checkpoint has no model config");
  return Model(cfg.at("model").get<ModelConfig>(), ckpt.meta.schema);
}

ImageOptions image_options_from_checkpoint(const LoadedCheckpoint& ckpt) {
  const Model model = model_from_checkpoint(ckpt);
  ImageOptions opts{model.config().visual.image_height, model.config().visual.image_width, Normalization::clip()};
  const auto& cfg = ckpt.meta.config;
  if (cfg.contains("data") && cfg.at("data").contains("normalization")) {
    opts.normalization = cfg.at("data").at("normalization").get<Normalization>();
  }
  return opts;
}

}  // namespace attrprompt
