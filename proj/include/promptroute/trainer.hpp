#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptroute/instance_gen.hpp"
#include "promptroute/model.hpp"
#include "promptroute/prompt_pool.hpp"

namespace promptroute {

// lr(e) = start * (end / start)^((e - 1) / (total - 1)); e in [1, total].
double lr_at(int epoch, int total_epochs, double lr_start, double lr_end);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ad::Matrix m, v;
  std::int64_t step = 0;
};

// One bias-corrected Adam update of `tensor` (descent on `grad`).
void adam_update(ad::Tensor& tensor, const ad::Matrix& grad, double lr, AdamState& state,
                 const AdamConfig& config = {});

enum class TrainMode { kPretrain, kPrompt };

struct TrainConfig {
  TrainMode mode = TrainMode::kPretrain;
  int batch_size = 64;
  int epochs = 1;
  int instances_per_epoch = 64;
  double lr_start = 1e-3;
  double lr_end = 1e-5;
  std::uint64_t seed = 1;
  // Epoch e draws from schedule[(e - 1) mod size].
  std::vector<DistributionSpec> schedule;
  DecodeMode rollout = DecodeMode::kSample;
  int checkpoint_every = 0;  // epochs; 0 saves only at the end
  AdamConfig adam;

  int batches_per_epoch() const;
  void validate() const;

  static TrainConfig desk_pretrain();
  static TrainConfig paper_pretrain();
  static TrainConfig desk_prompt();
  static TrainConfig paper_prompt();
};

nlohmann::json train_config_to_json(const TrainConfig& config);
// Starts from `base` and overrides the keys present in `j`; unknown keys are
// rejected with kConfig.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base);

struct BatchStats {
  int epoch = 0;
  int batch = 0;
  std::string distribution;
  double mean_cost = 0.0;      // over every trajectory of the batch
  double mean_best = 0.0;      // mean over instances of the best trajectory
  double baseline = 0.0;       // mean of the per-instance shared baselines
  double loss = 0.0;           // surrogate value
  double grad_norm = 0.0;
  double lr = 0.0;
  std::vector<int> selected;   // prompt index per instance (prompt mode)

  nlohmann::json to_json(int pool_size) const;
};

// Gradients of the surrogate -(1/(nB)) sum (R - b) log p over one batch.
// In prompt mode (pool given) each instance uses its best-matched prompt and
// gradients flow only to prompts; otherwise to trainable backbone tensors.
struct BatchGradients {
  ad::Gradients grads;
  BatchStats stats;
};

BatchGradients reinforce_gradients(const std::vector<Instance>& batch, const ModelParams& params,
                                   const KeyPromptPool* pool, DecodeMode rollout,
                                   std::uint64_t rollout_seed);

// Instances of batch `batch` in epoch `epoch`.
std::vector<Instance> training_batch(const TrainConfig& config, int epoch, int batch);

struct TrainHooks {
  std::ostream* log = nullptr;  // NDJSON, one record per batch
  // Called every checkpoint_every epochs and after the last epoch.
  std::function<void(int epoch)> checkpoint;
  // Where a diagnostic JSON goes if the loss turns non-finite.
  std::filesystem::path diagnostic_path;
};

struct TrainSummary {
  int epochs = 0;
  int batches = 0;
  std::vector<BatchStats> batches_log;
};

// REINFORCE over every backbone tensor.
TrainSummary pretrain_backbone(ModelParams& params, const TrainConfig& config,
                               const TrainHooks& hooks = {});

// REINFORCE over prompts only; the backbone is never written. Per-prompt Adam
// moments advance only when the prompt is selected in a batch.
TrainSummary train_prompts(const ModelParams& backbone, KeyPromptPool& pool,
                           const TrainConfig& config, const TrainHooks& hooks = {});

}  // namespace promptroute
