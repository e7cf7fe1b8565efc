#include "dfast/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "dfast/error.hpp"
#include "dfast/synthgen.hpp"

namespace dfast {

namespace {

std::vector<int64_t> shuffled_indices(int64_t n, Rng& rng) {
  std::vector<int64_t> idx(static_cast<size_t>(n), 0);
  std::iota(idx.begin(), idx.end(), int64_t{0});
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = int64_t(rng.uniform_int(uint64_t(i + 1)));
    std::swap(idx[size_t(i)], idx[size_t(j)]);
  }
  return idx;
}

// Encoder outputs for every sample, computed once; rows are gathered into
// batches when the encoders are frozen.
struct FeatureCache {
  std::array<Tensor<float>, 3> features;  // (N, enc_dim) per used modality

  static FeatureCache build(const Model<float>& model, const Dataset& ds) {
    FeatureCache fc;
    const ModelConfig& cfg = model.config();
    const int64_t n = ds.size();
    constexpr int64_t kChunk = 16;
    for (int64_t lo = 0; lo < n; lo += kChunk) {
      std::vector<int64_t> idx;
      for (int64_t i = lo; i < std::min(n, lo + kChunk); ++i) idx.push_back(i);
      const FeatureSet<float> feats = model.encode_features(make_batch(ds, idx, cfg));
      for (int m = 0; m < 3; ++m) {
        if (!cfg.use[size_t(m)]) continue;
        const int64_t dim = feats[size_t(m)].dim(1);
        if (fc.features[size_t(m)].empty()) fc.features[size_t(m)] = Tensor<float>({n, dim});
        std::copy(feats[size_t(m)].data.begin(), feats[size_t(m)].data.end(),
                  fc.features[size_t(m)].data.begin() + lo * dim);
      }
    }
    return fc;
  }

  FeatureSet<float> gather(const std::vector<int64_t>& idx, const ModelConfig& cfg) const {
    FeatureSet<float> out;
    for (int m = 0; m < 3; ++m) {
      if (!cfg.use[size_t(m)]) continue;
      const Tensor<float>& all = features[size_t(m)];
      const int64_t dim = all.dim(1);
      Tensor<float> batch({int64_t(idx.size()), dim});
      for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(all.data.begin() + idx[i] * dim, dim, batch.data.begin() + int64_t(i) * dim);
      out[size_t(m)] = std::move(batch);
    }
    return out;
  }
};

double eval_loss(const Model<float>& model, const Dataset& ds, int batch_size) {
  Rng no_drop(0);
  double acc = 0;
  const int64_t n = ds.size();
  for (int64_t lo = 0; lo < n; lo += batch_size) {
    std::vector<int64_t> idx;
    for (int64_t i = lo; i < std::min(n, lo + batch_size); ++i) idx.push_back(i);
    const auto out = model.forward(make_batch(ds, idx, model.config()), false, no_drop);
    const auto labels = batch_labels(ds, idx);
    acc += double(bce_with_logits(out.logits, labels).value()[0]) * double(idx.size());
  }
  return acc / double(n);
}

}  // namespace

std::array<int, 3> scaled_split_counts(int n_subjects) {
  if (n_subjects < 3) throw ContractError("need at least 3 subjects to split");
  const auto share = [&](int part) {
    return std::max<int>(1, int(std::ceil(double(part) * n_subjects / 37.0)));
  };
  const int val = share(4), test = share(4);
  if (val + test >= n_subjects)
    throw ContractError("too few subjects for a train/val/test split");
  return {n_subjects - val - test, val, test};
}

SplitPlan subject_split(const std::vector<std::string>& subjects_in, std::array<int, 3> counts,
                        uint64_t seed) {
  std::vector<std::string> subjects = subjects_in;
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  const int64_t total = counts[0] + counts[1] + counts[2];
  if (counts[0] < 0 || counts[1] < 0 || counts[2] < 0 || total != int64_t(subjects.size()))
    throw ContractError("subject_split: counts " + std::to_string(counts[0]) + "/" +
                        std::to_string(counts[1]) + "/" + std::to_string(counts[2]) +
                        " do not sum to " + std::to_string(subjects.size()) + " subjects");
  Rng rng(Rng::mix({seed, 0x5911d7ull}));
  for (int64_t i = int64_t(subjects.size()) - 1; i > 0; --i) {
    const int64_t j = int64_t(rng.uniform_int(uint64_t(i + 1)));
    std::swap(subjects[size_t(i)], subjects[size_t(j)]);
  }
  SplitPlan plan;
  plan.train.assign(subjects.begin(), subjects.begin() + counts[0]);
  plan.val.assign(subjects.begin() + counts[0], subjects.begin() + counts[0] + counts[1]);
  plan.test.assign(subjects.begin() + counts[0] + counts[1], subjects.end());
  return plan;
}

SplitPlan subject_split(const Manifest& manifest, std::array<int, 3> counts, uint64_t seed) {
  return subject_split(manifest.subjects(), counts, seed);
}

metrics::ScoredSet score_dataset(const Model<float>& model, const Dataset& ds,
                                 std::vector<std::vector<float>>* weights_out) {
  metrics::ScoredSet out;
  Rng no_drop(0);
  const int64_t n = ds.size();
  constexpr int64_t kChunk = 16;
  for (int64_t lo = 0; lo < n; lo += kChunk) {
    std::vector<int64_t> idx;
    for (int64_t i = lo; i < std::min(n, lo + kChunk); ++i) idx.push_back(i);
    const auto fwd = model.forward(make_batch(ds, idx, model.config()), false, no_drop);
    const auto probs = sigmoid(fwd.logits);
    for (size_t i = 0; i < idx.size(); ++i) {
      out.scores.push_back(double(probs.value()[int64_t(i)]));
      out.labels.push_back(ds.samples[size_t(idx[i])].label);
      if (weights_out) {
        std::vector<float> row;
        if (fwd.fusion_weights.defined()) {
          const Tensor<float>& w = fwd.fusion_weights.value();
          if (w.rank() == 2)
            for (int64_t m = 0; m < w.dim(1); ++m) row.push_back(w.at(int64_t(i), m));
          else
            for (int64_t m = 0; m < w.numel(); ++m) row.push_back(w[m]);
        }
        weights_out->push_back(std::move(row));
      }
    }
  }
  return out;
}

TrainResult train_model(Model<float>& model, const Dataset& train_set, const Dataset& val_set,
                        const TrainConfig& cfg) {
  if (train_set.size() == 0) throw ContractError("train_model: empty training split");
  const ModelConfig& mcfg = model.config();
  const bool frozen = mcfg.freeze_encoders;

  std::optional<FeatureCache> train_cache, val_cache;
  if (frozen) {
    train_cache = FeatureCache::build(model, train_set);
    if (val_set.size() > 0) val_cache = FeatureCache::build(model, val_set);
  }

  AdamState<float> state(model.params());
  AdamConfig adam;
  adam.lr = cfg.lr;
  Rng drop_rng(Rng::mix({cfg.seed, 0xd809ull}));

  TrainResult result;
  double best_f1 = -1.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(Rng::mix({cfg.seed, uint64_t(epoch), 0x5487ull}));
    const auto order = shuffled_indices(train_set.size(), shuffle_rng);
    double loss_acc = 0;
    for (int64_t lo = 0; lo < train_set.size(); lo += cfg.batch_size) {
      std::vector<int64_t> idx(order.begin() + lo,
                               order.begin() + std::min<int64_t>(train_set.size(),
                                                                 lo + cfg.batch_size));
      model.params().zero_grads();
      ForwardResult<float> fwd =
          frozen ? model.forward_from_features(train_cache->gather(idx, mcfg), true, drop_rng)
                 : model.forward(make_batch(train_set, idx, mcfg), true, drop_rng);
      const Var<float> loss = bce_with_logits(fwd.logits, batch_labels(train_set, idx));
      const double loss_v = double(loss.value()[0]);
      if (!std::isfinite(loss_v))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(lo / cfg.batch_size));
      if (cfg.record_fusion_weights && fwd.fusion_weights.defined())
        result.fusion_weight_batches.push_back(fwd.fusion_weights.value());
      backward(loss);
      adam_step(model.params(), state, adam);
      loss_acc += loss_v * double(idx.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_acc / double(train_set.size());
    if (val_set.size() > 0) {
      Rng no_drop(0);
      if (frozen) {
        // validation loss through the cached features (same computation path)
        double vloss = 0;
        for (int64_t lo = 0; lo < val_set.size(); lo += cfg.batch_size) {
          std::vector<int64_t> idx;
          for (int64_t i = lo; i < std::min(val_set.size(), lo + cfg.batch_size); ++i)
            idx.push_back(i);
          const auto out = model.forward_from_features(val_cache->gather(idx, mcfg), false,
                                                       no_drop);
          vloss += double(bce_with_logits(out.logits, batch_labels(val_set, idx)).value()[0]) *
                   double(idx.size());
        }
        rec.val_loss = vloss / double(val_set.size());
      } else {
        rec.val_loss = eval_loss(model, val_set, cfg.batch_size);
      }
      rec.val = metrics::summary(score_dataset(model, val_set));
      if (std::isfinite(rec.val.f1) && rec.val.f1 > best_f1) {
        best_f1 = rec.val.f1;
        result.best_val_f1_epoch = epoch;
      }
    }
    result.history.push_back(rec);
  }
  if (!result.history.empty()) {
    result.initial_train_loss = result.history.front().train_loss;
    result.final_train_loss = result.history.back().train_loss;
  }
  return result;
}

void write_history_csv(const std::filesystem::path& path, const TrainResult& result,
                       const std::vector<std::string>& frozen_groups) {
  std::ofstream out(path);
  if (!out) throw Error("cannot create history file: " + path.string());
  out << "# frozen_groups:";
  for (size_t i = 0; i < frozen_groups.size(); ++i)
    out << (i ? "," : " ") << frozen_groups[i];
  if (frozen_groups.empty()) out << " none";
  out << "\n";
  out << "epoch,train_loss,val_loss,val_accuracy,val_auc,val_f1,val_sensitivity,val_"
         "specificity\n";
  char buf[256];
  for (const auto& r : result.history) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.epoch,
                  r.train_loss, r.val_loss, r.val.accuracy, r.val.auc, r.val.f1,
                  r.val.sensitivity, r.val.specificity);
    out << buf;
  }
  out << "# best_val_f1_epoch: " << result.best_val_f1_epoch << "\n";
}

// ---------------------------------------------------------------------------
// Proxy pretraining
// ---------------------------------------------------------------------------

namespace {

struct AuxSample {
  Tensor<float> face, voice, pose;
  float target = 0;  // generator severity
};

std::vector<AuxSample> make_aux_set(const ModelConfig& cfg, uint64_t seed, int first_subject,
                                    int n_subjects, double sigma) {
  std::vector<AuxSample> out;
  for (int s = first_subject; s < first_subject + n_subjects; ++s) {
    Rng srng(Rng::mix({seed, uint64_t(s), 0xa0cull}));
    const bool affected_left = srng.coin();
    const double delta = srng.uniform(0.1, 0.9);
    for (int t = 0; t < 6; ++t) {
      const bool stroke = t >= 3;
      const auto trial =
          synthgen::gen_trial(seed, s, t, stroke, delta, sigma, affected_left);
      AuxSample a;
      a.target = float(trial.delta);
      if (cfg.uses(Modality::Face)) a.face = prep_face(trial.face, cfg.face);
      if (cfg.uses(Modality::Voice)) a.voice = prep_voice(trial.voice, cfg.voice);
      if (cfg.uses(Modality::Pose)) a.pose = prep_pose(trial.pose, cfg.pose);
      out.push_back(std::move(a));
    }
  }
  return out;
}

Tensor<float> stack_aux(const std::vector<AuxSample>& samples, const std::vector<int64_t>& idx,
                        Tensor<float> AuxSample::* field) {
  const Tensor<float>& first = samples[size_t(idx[0])].*field;
  Shape s = first.shape;
  s.insert(s.begin(), int64_t(idx.size()));
  Tensor<float> out(s);
  const int64_t n = first.numel();
  for (size_t i = 0; i < idx.size(); ++i) {
    const Tensor<float>& src = samples[size_t(idx[i])].*field;
    std::copy(src.data.begin(), src.data.end(), out.data.begin() + int64_t(i) * n);
  }
  return out;
}

}  // namespace

void load_parameter_values(ParameterSet<float>& ps,
                           const std::map<std::string, Tensor<float>>& values) {
  for (const auto& [name, t] : values) {
    if (!ps.has(name)) continue;
    if (ps.get(name).shape() != t.shape)
      throw DimensionError("pretrained tensor '" + name + "' has shape " + shape_str(t.shape) +
                           " but the model expects " + shape_str(ps.get(name).shape()));
    ps.get(name).mutable_value() = t;
  }
}

PretrainResult proxy_pretrain(const ModelConfig& cfg, const PretrainConfig& pcfg) {
  PretrainResult result;
  result.holdout_mse = {std::numeric_limits<double>::quiet_NaN(),
                        std::numeric_limits<double>::quiet_NaN(),
                        std::numeric_limits<double>::quiet_NaN()};
  const auto train_aux = make_aux_set(cfg, pcfg.seed, 0, pcfg.n_subjects, pcfg.sigma);
  const auto holdout_aux =
      make_aux_set(cfg, pcfg.seed, pcfg.n_subjects, pcfg.holdout_subjects, pcfg.sigma);

  {
    double mean = 0;
    for (const auto& a : holdout_aux) mean += double(a.target);
    mean /= double(holdout_aux.size());
    double var = 0;
    for (const auto& a : holdout_aux) var += (double(a.target) - mean) * (double(a.target) - mean);
    result.holdout_target_variance = var / double(holdout_aux.size());
  }

  for (int m = 0; m < 3; ++m) {
    if (!cfg.use[size_t(m)]) continue;
    const Modality mod = Modality(m);
    const std::string prefix = "encoder." + std::string(modality_name(mod));
    Tensor<float> AuxSample::* field = mod == Modality::Face
                                           ? &AuxSample::face
                                           : (mod == Modality::Voice ? &AuxSample::voice
                                                                     : &AuxSample::pose);
    ParameterSet<float> ps;
    Rng init_rng(Rng::mix({pcfg.seed, uint64_t(m), 0x12e7ull}));
    int enc_dim = 0;
    if (mod == Modality::Face) {
      init_patch_transformer(ps, prefix, cfg.face, init_rng);
      enc_dim = cfg.face.embed_dim;
    } else if (mod == Modality::Voice) {
      init_patch_transformer(ps, prefix, cfg.voice, init_rng);
      enc_dim = cfg.voice.embed_dim;
    } else {
      init_mixer(ps, prefix, cfg.pose, init_rng);
      enc_dim = cfg.pose.width;
    }
    ps.add("aux_head.weight", trunc_normal_init<float>({1, enc_dim}, 0.02, init_rng));
    ps.add("aux_head.bias", Tensor<float>::zeros({1}));

    auto forward = [&](const std::vector<int64_t>& idx,
                       const std::vector<AuxSample>& pool) -> Var<float> {
      Var<float> tokens(stack_aux(pool, idx, field));
      Var<float> feat = mod == Modality::Pose
                            ? mixer_forward(ps, prefix, cfg.pose, tokens)
                            : patch_transformer_forward(
                                  ps, prefix, mod == Modality::Face ? cfg.face : cfg.voice,
                                  tokens);
      Var<float> pred = linear(feat, ps.get("aux_head.weight"), ps.get("aux_head.bias"));
      return reshape(pred, {int64_t(idx.size())});
    };

    AdamState<float> state(ps);
    AdamConfig adam;
    adam.lr = pcfg.lr;
    const int64_t n = int64_t(train_aux.size());
    for (int epoch = 0; epoch < pcfg.epochs; ++epoch) {
      Rng shuffle_rng(Rng::mix({pcfg.seed, uint64_t(m), uint64_t(epoch), 0x3e11ull}));
      const auto order = shuffled_indices(n, shuffle_rng);
      for (int64_t lo = 0; lo < n; lo += pcfg.batch_size) {
        std::vector<int64_t> idx(order.begin() + lo,
                                 order.begin() + std::min(n, lo + pcfg.batch_size));
        std::vector<float> targets;
        for (int64_t i : idx) targets.push_back(train_aux[size_t(i)].target);
        ps.zero_grads();
        const Var<float> loss = mse_loss(forward(idx, train_aux), targets);
        if (!std::isfinite(double(loss.value()[0])))
          throw NumericError("non-finite proxy-pretraining loss at epoch " +
                             std::to_string(epoch));
        backward(loss);
        adam_step(ps, state, adam);
      }
    }

    // held-out regression check and weight export
    {
      double mse = 0;
      const int64_t hn = int64_t(holdout_aux.size());
      for (int64_t lo = 0; lo < hn; lo += pcfg.batch_size) {
        std::vector<int64_t> idx;
        for (int64_t i = lo; i < std::min(hn, int64_t(lo + pcfg.batch_size)); ++i)
          idx.push_back(i);
        const auto pred = forward(idx, holdout_aux);
        for (size_t i = 0; i < idx.size(); ++i) {
          const double d =
              double(pred.value()[int64_t(i)]) - double(holdout_aux[size_t(idx[i])].target);
          mse += d * d;
        }
      }
      result.holdout_mse[size_t(m)] = mse / double(hn);
    }
    for (const auto& name : ps.names())
      if (name.rfind(prefix + ".", 0) == 0)
        result.encoder_values.emplace(name, ps.get(name).value());
  }
  return result;
}

}  // namespace dfast
