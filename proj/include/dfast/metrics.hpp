#pragma once

#include <string>
#include <vector>

namespace dfast::metrics {

// Scores are probabilities in [0,1]; the decision threshold is fixed at 0.5
// with scores exactly at the threshold classified positive.
constexpr double kThreshold = 0.5;

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;  // {0,1}
};

struct Confusion {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  int64_t total() const { return tp + fp + tn + fn; }
};

// Metrics are NaN where the defining ratio has a zero denominator (reported
// as an error value downstream, never silently zero).
struct MetricReport {
  double accuracy = 0, auc = 0, f1 = 0, sensitivity = 0, specificity = 0;
  Confusion counts;

  std::string csv_row(const std::string& model_id) const;
  static std::string csv_header();
};

Confusion confusion(const ScoredSet& s);

// Positive-class F1, accuracy, sensitivity, specificity from the confusion
// counts, plus AUC when both classes are present (NaN otherwise).
MetricReport summary(const ScoredSet& s);

// Mann-Whitney AUC with half credit for ties (equals trapezoidal ROC area).
// Requires both classes present.
double auc(const ScoredSet& s);

}  // namespace dfast::metrics
