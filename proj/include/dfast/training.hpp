#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dfast/dataset.hpp"
#include "dfast/metrics.hpp"
#include "dfast/model.hpp"
#include "dfast/train_ops.hpp"

namespace dfast {

struct SplitPlan {
  std::vector<std::string> train, val, test;
};

// Scales the reference 29/4/4 subject proportions to n subjects, rounding
// the validation and test shares up.
std::array<int, 3> scaled_split_counts(int n_subjects);

// Seeded shuffle of the (sorted, unique) subject ids followed by assignment
// in train/val/test order. Counts must sum to the subject total.
SplitPlan subject_split(const std::vector<std::string>& subjects, std::array<int, 3> counts,
                        uint64_t seed);
SplitPlan subject_split(const Manifest& manifest, std::array<int, 3> counts, uint64_t seed);

struct TrainConfig {
  int epochs = 300;
  double lr = 1e-4;
  int batch_size = 8;
  uint64_t seed = 1;
  bool record_fusion_weights = false;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  metrics::MetricReport val;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_val_f1_epoch = -1;  // earliest epoch attaining the max validation F1
  double initial_train_loss = 0;
  double final_train_loss = 0;
  // per-batch fusion weights (row-major, one row per sample) when recording
  std::vector<Tensor<float>> fusion_weight_batches;
};

// Seeded epoch shuffling, mini-batch Adam on BCE, per-epoch validation
// metrics. Frozen-encoder models train on cached encoder features. Aborts
// with NumericError naming epoch and batch if the loss turns non-finite.
TrainResult train_model(Model<float>& model, const Dataset& train_set, const Dataset& val_set,
                        const TrainConfig& cfg);

// Eval-mode probabilities for a dataset; optionally collects per-sample
// fusion weights (empty when the strategy reports none).
metrics::ScoredSet score_dataset(const Model<float>& model, const Dataset& ds,
                                 std::vector<std::vector<float>>* weights_out = nullptr);

void write_history_csv(const std::filesystem::path& path, const TrainResult& result,
                       const std::vector<std::string>& frozen_groups);

// ---------------------------------------------------------------------------
// Proxy pretraining: severity regression on synthetic auxiliary data
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int epochs = 20;
  double lr = 3e-4;
  int batch_size = 8;
  uint64_t seed = 1;
  int n_subjects = 12;       // training subjects (severities spread over [0.1, 0.9])
  int holdout_subjects = 4;  // extra subjects for the regression sanity check
  double sigma = 1.0;
};

struct PretrainResult {
  std::map<std::string, Tensor<float>> encoder_values;
  // held-out severity-regression MSE per modality (NaN when unused) and the
  // variance of the held-out targets (the predict-the-mean baseline)
  std::array<double, 3> holdout_mse{};
  double holdout_target_variance = 0;
};

// Trains each used encoder alone with a temporary linear regression head to
// predict the generator severity, then discards the heads.
PretrainResult proxy_pretrain(const ModelConfig& cfg, const PretrainConfig& pcfg);

void load_parameter_values(ParameterSet<float>& ps,
                           const std::map<std::string, Tensor<float>>& values);

}  // namespace dfast
