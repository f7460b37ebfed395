// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/trainer.hpp"

#include "attrprompt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace attrprompt {

namespace {

std::vector<double> sigmoid_column(const Matrix& logits) {
  std::vector<double> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index j = 0; j < logits.rows(); ++j) out[static_cast<std::size_t>(j)] = 1.0 / (1.0 + std::exp(-logits(j, 0)));
  return out;
}

bool same_bytes(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0;
}

std::string epoch_file(int epoch) {
  std::string n = std::to_string(epoch);
  return "checkpoint_epoch" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n + ".apa";
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (grad_clip < 0.0) throw std::invalid_argument("grad_clip must be >= 0");
  if (save_interval < 0) throw std::invalid_argument("save_interval must be >= 0");
  if (epochs > 0 && schedule.end_epoch() && *schedule.end_epoch() < epochs) {
    throw std::invalid_argument("loss schedule ends at epoch " + std::to_string(*schedule.end_epoch()) +
                                " but training runs " + std::to_string(epochs) + " epochs");
  }
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j = {{"epoch", epoch}, {"alpha", alpha}, {"beta", beta}, {"l_pred", l_pred}, {"lr", lr}};
  j["l_align"] = l_align ? nlohmann::json(*l_align) : nlohmann::json(nullptr);
  j["mA"] = mA ? nlohmann::json(*mA) : nlohmann::json(nullptr);
  return j;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, const CheckpointMeta& meta,
                     const AdamW* optimizer) {
  ArrayFile file;
  nlohmann::json trainable = nlohmann::json::array();
  for (const auto& [name, p] : store) {
    file.arrays.emplace(name, NamedArray::from_matrix(p.value));
    if (p.trainable) trainable.push_back(name);
  }
  nlohmann::json steps = nlohmann::json::object();
  if (optimizer != nullptr) {
    for (const auto& [name, s] : optimizer->state()) {
      file.arrays.emplace("optim.m." + name, NamedArray::from_matrix(s.m));
      file.arrays.emplace("optim.v." + name, NamedArray::from_matrix(s.v));
      steps[name] = s.step;
    }
  }
  file.metadata = {{"kind", "checkpoint"},
                   {"epoch", meta.epoch},
                   {"schema", meta.schema.names()},
                   {"config", meta.config},
                   {"trainable", trainable},
                   {"optimizer_steps", steps}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_array_file(path, file);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  ArrayFile file = read_array_file(path);
  const auto& md = file.metadata;
  if (md.value("kind", "") != "checkpoint") throw std::runtime_error("'" + path.string() + "' is not a checkpoint");
  LoadedCheckpoint out;
  out.meta.epoch = md.at("epoch").get<int>();
  out.meta.schema = AttributeSchema(md.at("schema").get<std::vector<std::string>>());
  out.meta.config = md.value("config", nlohmann::json::object());
  const auto trainable = md.value("trainable", std::vector<std::string>{});
  const auto steps = md.value("optimizer_steps", nlohmann::json::object());
  for (auto& [name, arr] : file.arrays) {
    if (has_prefix(name, "optim.m.") || has_prefix(name, "optim.v.")) {
      const std::string target = name.substr(8);
      auto& s = out.optimizer[target];
      (name[6] == 'm' ? s.m : s.v) = arr.as_matrix();
      if (steps.contains(target)) s.step = steps.at(target).get<std::int64_t>();
      continue;
    }
    const bool is_trainable = std::find(trainable.begin(), trainable.end(), name) != trainable.end();
    out.store.add(name, arr.as_matrix(), is_trainable);
  }
  return out;
}

Trainer::Trainer(const Model& model, ParameterStore& store, TrainConfig config, nlohmann::json snapshot)
    : model_(model), store_(store), config_(std::move(config)), snapshot_(std::move(snapshot)),
      optimizer_(config_.optimizer) {
  config_.validate();
}

void Trainer::write_checkpoint(const std::filesystem::path& path, int epoch) const {
  save_checkpoint(path, store_, {epoch, model_.schema(), snapshot_}, &optimizer_);
}

Trainer::BatchStats Trainer::run_batch(const std::vector<const LabeledSample*>& batch,
                                       const ImbalanceWeights& weights, double alpha, double beta, double lr,
                                       int epoch, std::int64_t step) {
  store_.zero_grad();
  BatchStats stats;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  const bool align_grad = beta > 0.0;
  const bool run_text = align_grad || (config_.force_text_forward && model_.uses_text());
  const ImbalanceWeights* align_weights = model_.config().weighted_alignment ? &weights : nullptr;

  ad::Var f_t;
  ad::Var inv_tau;
  if (run_text) {
    std::optional<ad::NoGradGuard> guard;
    if (!align_grad) guard.emplace();
    f_t = model_.text_features(store_);
    inv_tau = model_.inverse_temperature(store_);
    stats.text_ran = true;
  }

  std::vector<ad::Var> terms;
  for (const LabeledSample* s : batch) {
    ad::Var tokens = model_.attribute_tokens(store_, s->image);
    ad::Var logits;
    if (alpha > 0.0) {
      logits = model_.logits(store_, tokens);
      ad::Var lp = prediction_loss_graph(logits, s->labels, weights);
      stats.l_pred += lp.scalar();
      terms.push_back(ad::scale(lp, alpha * inv_batch));
    } else {
      ad::NoGradGuard guard;
      logits = model_.logits(store_, ad::constant(tokens.value()));
      stats.l_pred += prediction_loss_graph(logits, s->labels, weights).scalar();
    }
    stats.probabilities.push_back(sigmoid_column(logits.value()));

    if (run_text) {
      if (align_grad) {
        ad::Var la = alignment_loss_graph(model_.visual_features(store_, tokens), f_t, inv_tau, s->labels,
                                          align_weights);
        stats.l_align += la.scalar();
        terms.push_back(ad::scale(la, beta * inv_batch));
      } else {
        ad::NoGradGuard guard;
        ad::Var f_v = model_.visual_features(store_, ad::constant(tokens.value()));
        stats.l_align += alignment_loss_graph(f_v, f_t, inv_tau, s->labels, align_weights).scalar();
      }
    }
  }
  stats.l_pred *= inv_batch;
  stats.l_align *= inv_batch;

  if (terms.empty()) return stats;
  ad::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  if (!std::isfinite(total.scalar()) || !std::isfinite(stats.l_pred) || !std::isfinite(stats.l_align)) {
    throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
  }
  ad::backward(total);
  if (config_.grad_clip > 0.0) clip_grad_norm(store_, config_.grad_clip);
  optimizer_.step(store_, lr);
  return stats;
}

TrainResult Trainer::fit(const std::vector<LabeledSample>& train, const ImbalanceWeights& weights,
                         const EpochCallback& on_epoch) {
  TrainResult result;
  if (config_.epochs == 0) {
    if (!config_.output_dir.empty()) write_checkpoint(config_.output_dir / "final.apa", 0);
    return result;
  }
  if (train.empty()) throw std::invalid_argument("training set is empty");
  if (weights.size() != model_.attributes()) throw std::invalid_argument("imbalance weights do not match the schema");
  for (int e = 0; e < config_.epochs; ++e) {
    if (config_.schedule.coefficients(e).second > 0.0 && !model_.uses_text()) {
      throw std::invalid_argument("schedule sets beta > 0 at epoch " + std::to_string(e) +
                                  " but the model has no text branch");
    }
  }

  std::map<std::string, Matrix> frozen;
  if (config_.audit_freeze) {
    for (const auto& [name, p] : store_) {
      if (!p.trainable) frozen.emplace(name, p.value);
    }
  }

  std::ofstream log;
  if (!config_.output_dir.empty()) {
    std::filesystem::create_directories(config_.output_dir);
    log.open(config_.output_dir / "metrics.jsonl", std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write metrics log in '" + config_.output_dir.string() + "'");
  }

  const auto n = train.size();
  const auto bs = static_cast<std::size_t>(config_.batch_size);
  const auto steps_per_epoch = static_cast<std::int64_t>((n + bs - 1) / bs);
  const std::int64_t total_steps = steps_per_epoch * config_.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(config_.seed);

  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    const auto [alpha, beta] = config_.schedule.coefficients(epoch);
    if (config_.shuffle) std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.alpha = alpha;
    rec.beta = beta;
    double l_pred = 0.0;
    double l_align = 0.0;
    bool text_ran = false;
    BinaryMatrix preds(n);
    BinaryMatrix labels(n);

    for (std::size_t start = 0; start < n; start += bs) {
      std::vector<const LabeledSample*> batch;
      for (std::size_t i = start; i < std::min(n, start + bs); ++i) batch.push_back(&train[order[i]]);
      const double lr = cosine_lr(config_.learning_rate, result.steps, total_steps);
      if (start == 0) rec.lr = lr;
      result.lr_history.push_back(lr);
      auto stats = run_batch(batch, weights, alpha, beta, lr, epoch, result.steps);
      ++result.steps;
      const double share = static_cast<double>(batch.size());
      l_pred += stats.l_pred * share;
      l_align += stats.l_align * share;
      text_ran = text_ran || stats.text_ran;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        const std::size_t idx = order[start + k];
        preds[idx] = binarize({stats.probabilities[k]}, config_.threshold).front();
        labels[idx] = train[idx].labels;
      }
    }
    rec.l_pred = l_pred / static_cast<double>(n);
    if (text_ran) rec.l_align = l_align / static_cast<double>(n);
    try {
      rec.mA = mean_accuracy(preds, labels).value;
    } catch (const std::invalid_argument&) {
      rec.mA.reset();
    }

    if (config_.audit_freeze) {
      for (const auto& [name, before] : frozen) {
        const Parameter* p = store_.find(name);
        if (p == nullptr || !same_bytes(before, p->value)) {
          throw std::logic_error("frozen parameter '" + name + "' changed during epoch " + std::to_string(epoch));
        }
      }
    }

    result.log.push_back(rec);
    if (log.is_open()) log << rec.to_json().dump() << '\n' << std::flush;
    if (on_epoch) on_epoch(rec);
    const int done = epoch + 1;
    if (!config_.output_dir.empty() && config_.save_interval > 0 && done % config_.save_interval == 0 &&
        done != config_.epochs) {
      write_checkpoint(config_.output_dir / epoch_file(done), done);
    }
  }
  if (!config_.output_dir.empty()) write_checkpoint(config_.output_dir / "final.apa", config_.epochs);
  return result;
}

}  // namespace attrprompt
