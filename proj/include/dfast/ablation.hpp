#pragma once

#include <array>
#include <string>
#include <vector>

#include "dfast/dataset.hpp"
#include "dfast/metrics.hpp"
#include "dfast/training.hpp"

namespace dfast {

struct AblationRow {
  std::string name;
  std::array<bool, 3> use{true, true, true};
  FusionKind fusion = FusionKind::Attention;
  bool freeze = false;
};

// The eight model-comparison rows: three unimodal, three pairwise, and the
// trimodal attention fusion with frozen and fine-tuned encoders.
std::vector<AblationRow> model_comparison_rows();

// The four fusion-strategy rows (trimodal, fine-tuned encoders).
std::vector<AblationRow> fusion_strategy_rows();

struct AblationConfig {
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  int epochs = 60;
  double lr = 1e-4;
  int batch_size = 8;
  double dropout = 0.1;
  std::array<int, 3> split_counts{-1, -1, -1};  // -1: scale 29/4/4 proportions
  bool use_pretrain = true;
  int pretrain_epochs = 20;
  int pretrain_subjects = 12;
  double pretrain_lr = 3e-4;
  double pretrain_sigma = 1.0;
  int threads = 0;  // 0: hardware concurrency
  // when false, only the eight model-comparison rows are trained (the
  // synthetic benchmark); the fusion-strategy table needs three extra runs
  bool include_fusion_table = true;
  // encoder dimensions are taken from this template (modality mask, fusion
  // and freeze flag are overridden per row)
  ModelConfig model_template;
};

struct RunOutcome {
  std::string row;
  uint64_t seed = 0;
  bool failed = false;
  std::string error;
  metrics::MetricReport test;
  int best_val_f1_epoch = -1;
  double initial_train_loss = 0;
  double final_train_loss = 0;
  bool weights_on_simplex = true;  // fusion-weight invariant over all train batches
};

struct AblationReport {
  std::vector<AblationRow> table1_rows, table2_rows;
  std::vector<RunOutcome> runs;  // every (row, seed), table rows deduplicated

  const RunOutcome* find(const std::string& row, uint64_t seed) const;
  std::vector<double> metric_values(const std::string& row,
                                    double metrics::MetricReport::* field) const;
  double median_metric(const std::string& row, double metrics::MetricReport::* field) const;

  std::string table1_csv() const;
  std::string table2_csv() const;
  std::string runs_csv() const;
};

// Trains and evaluates every row over every seed with a shared per-seed
// split and (optionally) shared proxy-pretrained encoder weights.
// Independent runs execute on a thread pool; results are deterministic for
// a fixed seed list regardless of scheduling.
AblationReport run_ablation(const Dataset& data, const AblationConfig& cfg);

double median(std::vector<double> v);

}  // namespace dfast
