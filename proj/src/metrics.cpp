#include "dfast/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "dfast/error.hpp"

namespace dfast::metrics {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_set(const ScoredSet& s) {
  if (s.scores.empty()) throw ContractError("metrics: empty scored set");
  if (s.scores.size() != s.labels.size())
    throw ContractError("metrics: scores and labels differ in length");
  for (size_t i = 0; i < s.scores.size(); ++i) {
    if (!(s.scores[i] >= 0.0 && s.scores[i] <= 1.0))
      throw ContractError("metrics: score out of [0,1] at index " + std::to_string(i));
    if (s.labels[i] != 0 && s.labels[i] != 1)
      throw ContractError("metrics: label not in {0,1} at index " + std::to_string(i));
  }
}

std::string fmt(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

Confusion confusion(const ScoredSet& s) {
  check_set(s);
  Confusion c;
  for (size_t i = 0; i < s.scores.size(); ++i) {
    const bool pred = s.scores[i] >= kThreshold;
    const bool pos = s.labels[i] == 1;
    if (pred && pos)
      ++c.tp;
    else if (pred && !pos)
      ++c.fp;
    else if (!pred && pos)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double auc(const ScoredSet& s) {
  check_set(s);
  const int64_t pos = std::count(s.labels.begin(), s.labels.end(), 1);
  const int64_t neg = int64_t(s.labels.size()) - pos;
  if (pos == 0 || neg == 0)
    throw ContractError("auc requires at least one sample of each class");

  // rank-based Mann-Whitney statistic with midranks for ties
  std::vector<size_t> order(s.scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return s.scores[a] < s.scores[b]; });
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && s.scores[order[j + 1]] == s.scores[order[i]]) ++j;
    const double midrank = 0.5 * double(i + 1 + j + 1);  // 1-based average rank
    for (size_t k = i; k <= j; ++k)
      if (s.labels[order[k]] == 1) pos_rank_sum += midrank;
    i = j + 1;
  }
  return (pos_rank_sum - double(pos) * double(pos + 1) / 2.0) / (double(pos) * double(neg));
}

MetricReport summary(const ScoredSet& s) {
  const Confusion c = confusion(s);
  MetricReport r;
  r.counts = c;
  const int64_t total = c.total();
  r.accuracy = double(c.tp + c.tn) / double(total);
  r.sensitivity = (c.tp + c.fn) > 0 ? double(c.tp) / double(c.tp + c.fn) : kNaN;
  r.specificity = (c.tn + c.fp) > 0 ? double(c.tn) / double(c.tn + c.fp) : kNaN;
  r.f1 = (2 * c.tp + c.fp + c.fn) > 0 ? 2.0 * double(c.tp) / double(2 * c.tp + c.fp + c.fn)
                                      : kNaN;
  const bool both = (c.tp + c.fn) > 0 && (c.tn + c.fp) > 0;
  r.auc = both ? auc(s) : kNaN;
  return r;
}

std::string MetricReport::csv_header() {
  return "model,accuracy,auc,f1,sensitivity,specificity,tp,fp,tn,fn";
}

std::string MetricReport::csv_row(const std::string& model_id) const {
  std::ostringstream os;
  os << model_id << ',' << fmt(accuracy) << ',' << fmt(auc) << ',' << fmt(f1) << ','
     << fmt(sensitivity) << ',' << fmt(specificity) << ',' << counts.tp << ',' << counts.fp
     << ',' << counts.tn << ',' << counts.fn;
  return os.str();
}

}  // namespace dfast::metrics
