// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/data.hpp"
#include "attrprompt/losses.hpp"
#include "attrprompt/model.hpp"
#include "attrprompt/optim.hpp"
#include "attrprompt/parameters.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace attrprompt {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;
  double learning_rate = 2e-3;
  AdamWConfig optimizer;
  double grad_clip = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  bool shuffle = true;
  LossSchedule schedule = LossSchedule::standard();
  /// Run the text branch (without gradients) when beta is 0, for logging.
  bool force_text_forward = false;
  /// Byte-compare frozen parameters after every epoch.
  bool audit_freeze = true;
  double threshold = 0.5;
  /// When set, checkpoints and `metrics.jsonl` are written here.
  std::filesystem::path output_dir;
  int save_interval = 0;  // every N epochs; 0 writes only the final one

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double alpha = 0.0;
  double beta = 0.0;
  double l_pred = 0.0;
  std::optional<double> l_align;  // unset when the text branch did not run
  std::optional<double> mA;       // train-split mA of the epoch's predictions
  double lr = 0.0;                // learning rate of the epoch's first step

  nlohmann::json to_json() const;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  std::vector<double> lr_history;  // one entry per optimizer step
  std::int64_t steps = 0;
};

struct CheckpointMeta {
  int epoch = 0;  // epochs completed
  AttributeSchema schema;
  nlohmann::json config = nlohmann::json::object();
};

struct LoadedCheckpoint {
  ParameterStore store;
  CheckpointMeta meta;
  std::map<std::string, MomentState> optimizer;
};

/// Single named-array file: parameters under their own names, optimizer
/// moments under optim.m.<name> / optim.v.<name>, metadata in the manifest.
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, const CheckpointMeta& meta,
                     const AdamW* optimizer = nullptr);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

class Trainer {
 public:
  using EpochCallback = std::function<void(const EpochRecord&)>;

  /// `snapshot` is stored as the config of every checkpoint written.
  Trainer(const Model& model, ParameterStore& store, TrainConfig config,
          nlohmann::json snapshot = nlohmann::json::object());

  TrainResult fit(const std::vector<LabeledSample>& train, const ImbalanceWeights& weights,
                  const EpochCallback& on_epoch = {});

  const AdamW& optimizer() const { return optimizer_; }
  AdamW& optimizer() { return optimizer_; }
  const TrainConfig& config() const { return config_; }

 private:
  struct BatchStats {
    double l_pred = 0.0;
    double l_align = 0.0;
    bool text_ran = false;
    std::vector<std::vector<double>> probabilities;
  };

  BatchStats run_batch(const std::vector<const LabeledSample*>& batch, const ImbalanceWeights& weights, double alpha,
                       double beta, double lr, int epoch, std::int64_t step);
  void write_checkpoint(const std::filesystem::path& path, int epoch) const;

  const Model& model_;
  ParameterStore& store_;
  TrainConfig config_;
  nlohmann::json snapshot_;
  AdamW optimizer_;
};

}  // namespace attrprompt
