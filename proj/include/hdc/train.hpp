#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hdc/checkpoint.hpp"
#include "hdc/data.hpp"
#include "hdc/loss.hpp"
#include "hdc/model.hpp"
#include "hdc/optim.hpp"

namespace hdc {

struct TrainConfig {
  ModelConfig model = ModelConfig::desk();
  int epochs = 40;
  int64_t steps = 0;  // > 0: stop after this many optimizer steps, overriding epochs
  int64_t batch = 8;
  double lr = 1e-3;
  double lambda = 0.1;
  double weight_decay = 0.01;
  uint64_t seed = 0;

  void validate() const;
  /// Model keys plus training keys.
  KeyValues to_kv() const;
  static TrainConfig from_kv(const KeyValues& kv, const TrainConfig& base);
  static TrainConfig from_kv(const KeyValues& kv) { return from_kv(kv, TrainConfig{}); }
};

/// A network together with the store that owns its parameters.
struct LoadedModel {
  ModelConfig config;
  std::unique_ptr<ParamStore<float>> params;
  std::unique_ptr<HdcNet<float>> net;
};

LoadedModel create_model(const ModelConfig& cfg, uint64_t seed);
/// Rebuilds the model described by the checkpoint's config and binds its tensors.
LoadedModel model_from_checkpoint(const Checkpoint& ck);

struct EpochLog {
  int epoch = 0;
  int64_t step = 0;
  double mse = 0, normal = 0, total = 0;  // means over the epoch's batches
  double wall_seconds = 0;
};

std::string epoch_log_header();
std::string epoch_log_row(const EpochLog& e);

struct TrainOutputs {
  std::string dir;  // checkpoints go here when non-empty
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(const std::string&)> on_message;
};

struct TrainResult {
  bool diverged = false;
  std::string error;
  std::vector<EpochLog> log;
  int64_t steps = 0;
};

/// Seeded shuffling; deterministic for a fixed config and data.
TrainResult train_model(const TrainConfig& cfg, LoadedModel& model, const std::vector<DepthSample>& train,
                        const std::vector<DepthSample>* val, const TrainOutputs& out);

/// Predicted depth per sample, row-major [H,W].
std::vector<std::vector<float>> predict(const HdcNet<float>& net, const std::vector<DepthSample>& samples,
                                        int64_t batch = 8);

struct EvalResult {
  MetricsReport summary;
  std::vector<MetricsReport> per_sample;
  std::vector<std::vector<float>> predictions;
};

/// Metrics under each sample's evaluation mask; the summary averages samples.
EvalResult evaluate(const HdcNet<float>& net, const std::vector<DepthSample>& samples, int64_t batch = 8);
EvalResult evaluate_predictions(const std::vector<DepthSample>& samples,
                                const std::vector<std::vector<float>>& predictions);

/// Summary row, or one row per sample id plus a "mean" row.
std::string eval_csv(const EvalResult& r, const std::vector<DepthSample>& samples, bool per_sample);

struct LossSummary {
  double mse = 0, normal = 0, total = 0;
};

/// Training-mask losses over a sample set, averaged over batches, no gradients.
LossSummary dataset_losses(const HdcNet<float>& net, const std::vector<DepthSample>& samples, double lambda,
                           int64_t batch = 8);

struct AblationRow {
  std::string variant;
  bool use_smfm = false, use_btmfm = false;
  MetricsReport metrics;
  std::string config_text;
};

/// Trains and evaluates {none, smfm, btmfm, smfm+btmfm} with a shared seed.
std::vector<AblationRow> run_ablation(const TrainConfig& cfg, const std::vector<DepthSample>& train,
                                      const std::vector<DepthSample>& test, const TrainOutputs& out);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace hdc
