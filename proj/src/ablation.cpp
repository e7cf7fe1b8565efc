#include "dfast/ablation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "dfast/error.hpp"

namespace dfast {

std::vector<AblationRow> model_comparison_rows() {
  return {
      {"Pose only", {false, false, true}, FusionKind::Concat, false},
      {"Voice only", {false, true, false}, FusionKind::Concat, false},
      {"Face only", {true, false, false}, FusionKind::Concat, false},
      {"Face + Pose", {true, false, true}, FusionKind::Attention, false},
      {"Voice + Pose", {false, true, true}, FusionKind::Attention, false},
      {"Face + Voice", {true, true, false}, FusionKind::Attention, false},
      {"Fusion (Frozen weight)", {true, true, true}, FusionKind::Attention, true},
      {"Fusion (Fine-tuned)", {true, true, true}, FusionKind::Attention, false},
  };
}

std::vector<AblationRow> fusion_strategy_rows() {
  return {
      {"Concat", {true, true, true}, FusionKind::Concat, false},
      {"Sum", {true, true, true}, FusionKind::Sum, false},
      {"Learnable Weighted Sum", {true, true, true}, FusionKind::WeightedSum, false},
      {"Attention Fusion", {true, true, true}, FusionKind::Attention, false},
  };
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

const RunOutcome* AblationReport::find(const std::string& row, uint64_t seed) const {
  for (const auto& r : runs)
    if (r.row == row && r.seed == seed) return &r;
  return nullptr;
}

std::vector<double> AblationReport::metric_values(const std::string& row,
                                                  double metrics::MetricReport::* field) const {
  std::vector<double> out;
  for (const auto& r : runs)
    if (r.row == row && !r.failed) out.push_back(r.test.*field);
  return out;
}

double AblationReport::median_metric(const std::string& row,
                                     double metrics::MetricReport::* field) const {
  return median(metric_values(row, field));
}

namespace {

std::string fmt_metric(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string table_csv(const AblationReport& rep, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "model,accuracy,auc,f1,sensitivity,specificity\n";
  using MR = metrics::MetricReport;
  for (const auto& row : rows) {
    os << row.name << ',' << fmt_metric(rep.median_metric(row.name, &MR::accuracy)) << ','
       << fmt_metric(rep.median_metric(row.name, &MR::auc)) << ','
       << fmt_metric(rep.median_metric(row.name, &MR::f1)) << ','
       << fmt_metric(rep.median_metric(row.name, &MR::sensitivity)) << ','
       << fmt_metric(rep.median_metric(row.name, &MR::specificity)) << "\n";
  }
  return os.str();
}

struct Task {
  AblationRow row;
  uint64_t seed;
  size_t slot;  // index into the outcome vector
};

std::string config_key(const AblationRow& row, uint64_t seed) {
  std::string k = std::to_string(seed) + "|" + fusion_name(row.fusion) + "|" +
                  (row.freeze ? "frozen" : "finetuned") + "|";
  for (bool b : row.use) k += b ? '1' : '0';
  return k;
}

}  // namespace

std::string AblationReport::table1_csv() const { return table_csv(*this, table1_rows); }
std::string AblationReport::table2_csv() const { return table_csv(*this, table2_rows); }

std::string AblationReport::runs_csv() const {
  std::ostringstream os;
  os << "model,seed,accuracy,auc,f1,sensitivity,specificity,tp,fp,tn,fn,best_val_f1_epoch,"
        "initial_train_loss,final_train_loss,status\n";
  char buf[64];
  for (const auto& r : runs) {
    os << r.row << ',' << r.seed << ',';
    if (r.failed) {
      os << "NA,NA,NA,NA,NA,0,0,0,0,-1,0,0,failed: " << r.error << "\n";
      continue;
    }
    os << fmt_metric(r.test.accuracy) << ',' << fmt_metric(r.test.auc) << ','
       << fmt_metric(r.test.f1) << ',' << fmt_metric(r.test.sensitivity) << ','
       << fmt_metric(r.test.specificity) << ',' << r.test.counts.tp << ',' << r.test.counts.fp
       << ',' << r.test.counts.tn << ',' << r.test.counts.fn << ',' << r.best_val_f1_epoch
       << ',';
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f", r.initial_train_loss, r.final_train_loss);
    os << buf << ",ok\n";
  }
  return os.str();
}

AblationReport run_ablation(const Dataset& data, const AblationConfig& cfg) {
  AblationReport rep;
  rep.table1_rows = model_comparison_rows();
  rep.table2_rows = fusion_strategy_rows();

  // deduplicate configurations shared between the two tables
  std::vector<AblationRow> distinct;
  std::map<std::string, size_t> slot_of_key;
  std::vector<Task> tasks;
  std::vector<RunOutcome> outcomes;
  auto add_row = [&](const AblationRow& row) {
    for (uint64_t seed : cfg.seeds) {
      const std::string key = config_key(row, seed);
      const auto it = slot_of_key.find(key);
      if (it != slot_of_key.end()) {
        // same trained model, second table row: alias the outcome by name
        RunOutcome alias;
        alias.row = row.name;
        alias.seed = seed;
        alias.failed = true;
        alias.error = "alias:" + std::to_string(it->second);
        outcomes.push_back(alias);
        continue;
      }
      RunOutcome slot;
      slot.row = row.name;
      slot.seed = seed;
      slot_of_key.emplace(key, outcomes.size());
      tasks.push_back(Task{row, seed, outcomes.size()});
      outcomes.push_back(slot);
    }
  };
  for (const auto& row : rep.table1_rows) add_row(row);
  for (const auto& row : rep.table2_rows) add_row(row);

  const auto subjects = data.subjects();
  const std::array<int, 3> counts = cfg.split_counts[0] < 0
                                        ? scaled_split_counts(int(subjects.size()))
                                        : cfg.split_counts;

  // shared per-seed artifacts: split plan and proxy-pretrained encoders
  std::map<uint64_t, SplitPlan> plans;
  for (uint64_t seed : cfg.seeds) plans.emplace(seed, subject_split(subjects, counts, seed));

  std::map<uint64_t, PretrainResult> pretrained;
  if (cfg.use_pretrain) {
    std::mutex mu;
    std::vector<std::thread> workers;
    std::atomic<size_t> next{0};
    const std::vector<uint64_t> seeds = cfg.seeds;
    const unsigned pool = std::max(1u, cfg.threads > 0 ? unsigned(cfg.threads)
                                                       : std::thread::hardware_concurrency());
    for (unsigned w = 0; w < std::min<size_t>(pool, seeds.size()); ++w)
      workers.emplace_back([&] {
        for (size_t i = next.fetch_add(1); i < seeds.size(); i = next.fetch_add(1)) {
          PretrainConfig pc;
          pc.epochs = cfg.pretrain_epochs;
          pc.lr = cfg.pretrain_lr;
          pc.batch_size = cfg.batch_size;
          pc.seed = seeds[i];
          pc.n_subjects = cfg.pretrain_subjects;
          pc.sigma = cfg.pretrain_sigma;
          ModelConfig mc = cfg.model_template;
          mc.use = {true, true, true};
          mc.fusion = FusionKind::Attention;
          PretrainResult pr = proxy_pretrain(mc, pc);
          std::lock_guard<std::mutex> lock(mu);
          pretrained.emplace(seeds[i], std::move(pr));
        }
      });
    for (auto& t : workers) t.join();
  }

  // independent training runs on the pool
  std::atomic<size_t> next_task{0};
  const unsigned pool = std::max(1u, cfg.threads > 0 ? unsigned(cfg.threads)
                                                     : std::thread::hardware_concurrency());
  auto run_task = [&](const Task& task) {
    RunOutcome& out = outcomes[task.slot];
    try {
      const SplitPlan& plan = plans.at(task.seed);
      ModelConfig mc = cfg.model_template;
      mc.use = task.row.use;
      mc.fusion = task.row.fusion;
      mc.freeze_encoders = false;
      mc.validate();
      Model<float> model(mc, task.seed);
      if (cfg.use_pretrain)
        load_parameter_values(model.params(), pretrained.at(task.seed).encoder_values);
      if (task.row.freeze) model.apply_freeze();

      const Dataset train_set = data.subset_by_subject(plan.train);
      const Dataset val_set = data.subset_by_subject(plan.val);
      const Dataset test_set = data.subset_by_subject(plan.test);

      TrainConfig tc;
      tc.epochs = cfg.epochs;
      tc.lr = cfg.lr;
      tc.batch_size = cfg.batch_size;
      tc.seed = task.seed;
      tc.record_fusion_weights = true;
      const TrainResult tr = train_model(model, train_set, val_set, tc);

      out.best_val_f1_epoch = tr.best_val_f1_epoch;
      out.initial_train_loss = tr.initial_train_loss;
      out.final_train_loss = tr.final_train_loss;
      for (const auto& wb : tr.fusion_weight_batches) {
        const int64_t rows = wb.rank() == 2 ? wb.dim(0) : 1;
        const int64_t m = wb.rank() == 2 ? wb.dim(1) : wb.numel();
        for (int64_t r = 0; r < rows; ++r) {
          double sum = 0;
          for (int64_t c = 0; c < m; ++c) {
            const double w = double(wb[r * m + c]);
            if (w < 0) out.weights_on_simplex = false;
            sum += w;
          }
          if (std::abs(sum - 1.0) > 1e-5) out.weights_on_simplex = false;
        }
      }
      out.test = metrics::summary(score_dataset(model, test_set));
    } catch (const std::exception& e) {
      out.failed = true;
      out.error = e.what();
    }
  };
  std::vector<std::thread> workers;
  for (unsigned w = 0; w < std::min<size_t>(pool, tasks.size()); ++w)
    workers.emplace_back([&] {
      for (size_t i = next_task.fetch_add(1); i < tasks.size(); i = next_task.fetch_add(1))
        run_task(tasks[i]);
    });
  for (auto& t : workers) t.join();

  // resolve aliases now that the underlying runs are complete
  for (auto& out : outcomes) {
    if (out.failed && out.error.rfind("alias:", 0) == 0) {
      const size_t src = size_t(std::stoull(out.error.substr(6)));
      const std::string row = out.row;
      const uint64_t seed = out.seed;
      out = outcomes[src];
      out.row = row;
      out.seed = seed;
    }
  }
  rep.runs = std::move(outcomes);
  return rep;
}

}  // namespace dfast
