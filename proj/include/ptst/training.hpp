#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ptst/analysis.hpp"
#include "ptst/checkpoint.hpp"
#include "ptst/data.hpp"
#include "ptst/model.hpp"
#include "ptst/objective.hpp"

namespace ptst {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 64;
  // Records per forward pass; gradients of the micro-batches are summed into
  // one optimizer step. 0 means the whole batch at once.
  int micro_batch_size = 0;
  double weight_decay = 4e-5;
  // false: L2 term added to the gradient; true: decoupled decay.
  bool decoupled_weight_decay = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 40;
  std::uint64_t seed = 0;
  ObjectiveKind objective = ObjectiveKind::tvae;
  std::string preset = "VII";
  // Replaces the preset's objective settings when set (model options still
  // come from the preset).
  std::optional<ObjectiveConfig> objective_override;
  double labelled_fraction = 1.0;
  // Synchronous batch assembly; otherwise a producer thread prepares batches.
  bool deterministic = true;
  bool standardize = true;
  // Evaluate after every epoch.
  bool eval_every_epoch = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

double learning_rate(long step, long total_steps, double lr0);

struct HeadResult {
  std::string head;  // "Y", "Z" or "Cos"
  ConfusionMatrix confusion;
  MacroMetrics metrics;
};

struct Evaluation {
  std::vector<HeadResult> heads;
  std::size_t n_records = 0;

  const HeadResult* find(const std::string& head) const;
};

nlohmann::json to_json(const Evaluation& e);

struct EpochRecord {
  int epoch = 0;
  LossComponents mean_terms;
  LossComponents weights;  // at the last step of the epoch
  double mean_total = 0;
  double lr_last = 0;
  double seconds = 0;
  std::optional<Evaluation> eval;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  double wall_seconds = 0;
  std::uint64_t seed = 0;
  nlohmann::json config;
};

void write_run_jsonl(const RunRecord& r, const std::filesystem::path& path);

struct TrainHooks {
  // Held-out data for per-epoch evaluation (training data when null).
  const Dataset* eval_ds = nullptr;
  std::function<void(const EpochRecord&)> on_epoch;
  // Stop after this many optimizer steps (schedules still span all epochs).
  long max_steps = -1;
};

struct TrainResult {
  Checkpoint checkpoint;
  RunRecord record;
};

TrainResult train(const Dataset& train_ds, const TrainConfig& cfg, const ModelConfig& model_cfg,
                  const TrainHooks& hooks = {});

/// Per-record outputs of a trained model in evaluation mode.
struct Predictions {
  std::vector<std::int64_t> ids;
  std::vector<int> truth;  // -1 when the record has no label at all
  std::vector<int> y, z, cos;  // z and cos empty when the head is absent
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> latent_mean;
};

Predictions predict(const TvaeModel<float>& model, const Checkpoint& ckpt, const Dataset& ds);

/// Metrics per head against the records' labels, hidden or not.
Evaluation evaluate(const Checkpoint& ckpt, const Dataset& ds, AbsentClassRule rule = AbsentClassRule::exclude);
Evaluation evaluate(const Predictions& p, int K, AbsentClassRule rule = AbsentClassRule::exclude);

struct SweepRow {
  double fraction = 1.0;
  std::string head;
  MacroMetrics metrics;
};

std::vector<SweepRow> semi_supervised_sweep(const Dataset& train_ds, const Dataset& test_ds,
                                            const std::vector<double>& fractions, const TrainConfig& cfg,
                                            const ModelConfig& model_cfg);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

}  // namespace ptst
