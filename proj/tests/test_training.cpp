#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dfast/checkpoint.hpp"
#include "dfast/error.hpp"
#include "dfast/synthgen.hpp"
#include "dfast/training.hpp"

using namespace dfast;

namespace {

namespace fs = std::filesystem;

// Small encoder dims so the training tests stay quick.
ModelConfig small_config(std::array<bool, 3> use, FusionKind fusion) {
  ModelConfig cfg;
  cfg.use = use;
  cfg.fusion = fusion;
  cfg.face.embed_dim = 32;
  cfg.face.depth = 1;
  cfg.face.heads = 2;
  cfg.face.mlp_ratio = 2;
  cfg.voice.embed_dim = 24;
  cfg.voice.depth = 1;
  cfg.voice.heads = 2;
  cfg.voice.mlp_ratio = 2;
  cfg.pose.width = 16;
  cfg.pose.depth = 1;
  cfg.pose.token_hidden = 8;
  cfg.pose.channel_hidden = 16;
  return cfg;
}

Dataset tiny_synth_dataset(int subjects, uint64_t seed, const ModelConfig& cfg,
                           double delta = 0.7, double sigma = 0.5) {
  Dataset ds;
  synthgen::GenParams p;
  p.seed = seed;
  p.delta = delta;
  p.sigma = sigma;
  p.n_subjects = subjects;
  for (int s = 0; s < subjects; ++s) {
    const auto sp = synthgen::subject_params(p, s);
    for (int t = 0; t < 6; ++t) {
      const bool stroke = t >= 3;
      const auto trial =
          synthgen::gen_trial(seed, s, t, stroke, sp.delta, sigma, sp.affected_left);
      PreppedSample ps;
      char sid[8];
      std::snprintf(sid, sizeof(sid), "s%03d", s);
      ps.subject_id = sid;
      ps.trial_id = "t" + std::to_string(t);
      ps.label = trial.label;
      ps.delta = trial.delta;
      if (cfg.uses(Modality::Face)) ps.face_patches = prep_face(trial.face, cfg.face);
      if (cfg.uses(Modality::Voice)) ps.voice_patches = prep_voice(trial.voice, cfg.voice);
      if (cfg.uses(Modality::Pose)) ps.pose_tokens = prep_pose(trial.pose, cfg.pose);
      ds.samples.push_back(std::move(ps));
    }
  }
  return ds;
}

}  // namespace

TEST_CASE("bce closed forms and saturation") {
  Var<float> z0(Tensor<float>::scalar(0.0f));
  CHECK(double(bce_with_logits(z0, {1.0f}).value()[0]) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-6));

  Var<float> big(Tensor<float>::scalar(100.0f));
  CHECK(double(bce_with_logits(big, {1.0f}).value()[0]) < 1e-40);

  Var<float> neg(Tensor<float>::scalar(-3.0f));
  CHECK(double(bce_with_logits(neg, {0.0f}).value()[0]) ==
        doctest::Approx(std::log1p(std::exp(-3.0))).epsilon(1e-6));
}

TEST_CASE("bce gradient matches finite differences") {
  Rng rng(9);
  Tensor<double> logits({5});
  std::vector<double> labels;
  for (int i = 0; i < 5; ++i) {
    logits[i] = rng.uniform(-3, 3);
    labels.push_back(double(rng.uniform_int(2)));
  }
  auto f = [&](const Var<double>& v) { return bce_with_logits(v, labels); };
  CHECK(finite_diff_check<double>(f, logits, 1e-6) < 1e-6);
}

TEST_CASE("adam: first-step magnitude, zero grads, frozen groups, missing state") {
  ParameterSet<float> ps;
  Rng rng(1);
  ps.add("head.w", trunc_normal_init<float>({4}, 0.02, rng));
  ps.add("encoder.face.w", trunc_normal_init<float>({4}, 0.02, rng));
  const auto before = ps.get("encoder.face.w").value().data;
  const auto head_before = ps.get("head.w").value().data;

  AdamState<float> state(ps);
  AdamConfig cfg;
  cfg.lr = 1e-3;

  // positive gradient on head only; bias-corrected first step is ~lr
  ps.get("head.w").grad_mut().data = {0.5f, 1.0f, 2.0f, 0.25f};
  ps.set_group_trainable("encoder.face", false);
  adam_step(ps, state, cfg);
  for (int i = 0; i < 4; ++i) {
    const double delta = double(head_before[size_t(i)]) - double(ps.get("head.w").value()[i]);
    CHECK(delta == doctest::Approx(cfg.lr).epsilon(1e-4));
  }
  CHECK(ps.get("encoder.face.w").value().data == before);

  // zero gradient from a fresh state: parameters unchanged, timestep advances
  {
    ParameterSet<float> fresh;
    Rng r2(2);
    fresh.add("w", trunc_normal_init<float>({6}, 0.02, r2));
    const auto w0 = fresh.get("w").value().data;
    AdamState<float> fresh_state(fresh);
    fresh.get("w").grad_mut();  // allocated, all zero
    adam_step(fresh, fresh_state, cfg);
    CHECK(fresh_state.t == 1);
    CHECK(fresh.get("w").value().data == w0);
  }

  for (int i = 0; i < 10; ++i) adam_step(ps, state, cfg);
  CHECK(ps.get("encoder.face.w").value().data == before);

  ParameterSet<float> other;
  other.add("something.else", Tensor<float>::zeros({2}));
  CHECK_THROWS_AS(adam_step(other, state, cfg), ContractError);
}

TEST_CASE("subject_split: sizes, disjointness, determinism, contract") {
  std::vector<std::string> subjects;
  for (int i = 0; i < 37; ++i) subjects.push_back("s" + std::to_string(i));
  const SplitPlan plan = subject_split(subjects, {29, 4, 4}, 7);
  CHECK(plan.train.size() == 29);
  CHECK(plan.val.size() == 4);
  CHECK(plan.test.size() == 4);
  std::set<std::string> all(plan.train.begin(), plan.train.end());
  all.insert(plan.val.begin(), plan.val.end());
  all.insert(plan.test.begin(), plan.test.end());
  CHECK(all.size() == 37);

  const SplitPlan again = subject_split(subjects, {29, 4, 4}, 7);
  CHECK(again.train == plan.train);
  CHECK(again.val == plan.val);
  CHECK(again.test == plan.test);

  const SplitPlan tiny = subject_split({"a", "b", "c"}, {1, 1, 1}, 3);
  CHECK(tiny.train.size() == 1);
  CHECK(tiny.val.size() == 1);
  CHECK(tiny.test.size() == 1);

  CHECK_THROWS_AS(subject_split(subjects, {30, 4, 4}, 7), ContractError);

  // random draws stay disjoint covers with exact counts
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + int(rng.uniform_int(40));
    std::vector<std::string> ss;
    for (int i = 0; i < n; ++i) ss.push_back("p" + std::to_string(i));
    const int val = 1 + int(rng.uniform_int(uint64_t(n - 2)));
    const int test = 1 + int(rng.uniform_int(uint64_t(n - val - 1)));
    const auto sp = subject_split(ss, {n - val - test, val, test}, rng.next_u64());
    std::set<std::string> seen(sp.train.begin(), sp.train.end());
    seen.insert(sp.val.begin(), sp.val.end());
    seen.insert(sp.test.begin(), sp.test.end());
    CHECK(int(seen.size()) == n);
    CHECK(int(sp.val.size()) == val);
    CHECK(int(sp.test.size()) == test);
  }
}

TEST_CASE("scaled split counts reproduce the 29/4/4 reference") {
  const auto c = scaled_split_counts(37);
  CHECK(c == std::array<int, 3>{29, 4, 4});
  const auto c40 = scaled_split_counts(40);
  CHECK(c40[1] == c40[2]);
  CHECK(c40[0] + c40[1] + c40[2] == 40);
}

TEST_CASE("model build: head shapes, determinism, finite logits") {
  const ModelConfig cfg = small_config({true, true, true}, FusionKind::Concat);
  Model<float> m(cfg, 11);
  CHECK(m.params().get("head.linear.weight").shape() == Shape{1, 3 * kEmbedDim});

  const ModelConfig sum_cfg = small_config({true, true, true}, FusionKind::Sum);
  Model<float> ms(sum_cfg, 11);
  CHECK(ms.params().get("head.linear.weight").shape() == Shape{1, kEmbedDim});

  Model<float> m2(cfg, 11);
  for (const auto& n : m.params().names())
    CHECK(m.params().get(n).value().data == m2.params().get(n).value().data);

  const ModelConfig pose_cfg = small_config({false, false, true}, FusionKind::Concat);
  Model<float> mp(pose_cfg, 3);
  for (const auto& n : mp.params().names()) {
    CHECK(n.rfind("encoder.face", 0) != 0);
    CHECK(n.rfind("encoder.voice", 0) != 0);
  }

  const Dataset ds = tiny_synth_dataset(3, 21, cfg);
  Rng drop(1);
  const auto out = m.forward(make_batch(ds, {0, 1, 2}, cfg), false, drop);
  CHECK(out.logits.shape() == Shape{3});
  for (int64_t i = 0; i < 3; ++i) CHECK(std::isfinite(double(out.logits.value()[i])));
}

TEST_CASE("every encoder parameter receives gradient on a training batch") {
  const ModelConfig cfg = small_config({true, true, true}, FusionKind::Attention);
  Model<float> m(cfg, 5);
  const Dataset ds = tiny_synth_dataset(3, 33, cfg);
  Rng drop(2);
  std::vector<int64_t> idx{0, 1, 3, 4};
  const auto out = m.forward(make_batch(ds, idx, cfg), true, drop);
  backward(bce_with_logits(out.logits, batch_labels(ds, idx)));
  for (const auto& name : m.params().names()) {
    if (name.rfind("encoder.", 0) != 0) continue;
    REQUIRE(m.params().get(name).has_grad());
    const auto& g = m.params().get(name).grad();
    bool any = false;
    for (float v : g.data)
      if (v != 0.0f) {
        any = true;
        break;
      }
    CHECK_MESSAGE(any, "dead parameter: ", name);
  }
}

TEST_CASE("head-only training drives a separable toy problem below 0.01 loss") {
  // logistic-regression convergence oracle on linearly separable embeddings
  ParameterSet<float> ps;
  Rng rng(3);
  const int dim = 16;
  ps.add("head.norm.gain", Tensor<float>::full({dim}, 1.0f));
  ps.add("head.norm.shift", Tensor<float>::zeros({dim}));
  ps.add("head.linear.weight", trunc_normal_init<float>({1, dim}, 0.02, rng));
  ps.add("head.linear.bias", Tensor<float>::zeros({1}));

  Tensor<float> x({16, dim});
  std::vector<float> labels;
  for (int i = 0; i < 16; ++i) {
    const bool pos = i % 2 == 0;
    labels.push_back(pos ? 1.0f : 0.0f);
    for (int j = 0; j < dim; ++j)
      x.at(i, j) = float((pos ? 1.0 : -1.0) * (0.5 + 0.1 * double(j % 3)) + 0.01 * i);
  }
  AdamState<float> state(ps);
  AdamConfig adam;
  adam.lr = 0.05;
  double loss_v = 1;
  Rng drop(4);
  for (int epoch = 0; epoch < 300; ++epoch) {
    ps.zero_grads();
    Var<float> h = layer_norm(Var<float>(x), ps.get("head.norm.gain"),
                              ps.get("head.norm.shift"));
    h = dropout(gelu(h), 0.0, true, drop);
    h = linear(h, ps.get("head.linear.weight"), ps.get("head.linear.bias"));
    const Var<float> loss = bce_with_logits(reshape(h, {16}), labels);
    loss_v = double(loss.value()[0]);
    if (loss_v < 0.005) break;
    backward(loss);
    adam_step(ps, state, adam);
  }
  CHECK(loss_v < 0.01);
}

TEST_CASE("freeze contract: encoder bits never move; fine-tuning moves them") {
  const ModelConfig base = small_config({false, true, true}, FusionKind::Attention);
  const Dataset ds = tiny_synth_dataset(4, 55, base);
  const auto plan = subject_split(ds.subjects(), {2, 1, 1}, 5);

  ModelConfig frozen_cfg = base;
  Model<float> frozen(frozen_cfg, 9);
  frozen.apply_freeze();
  std::map<std::string, Tensor<float>::Buffer> before;
  for (const auto& n : frozen.params().names())
    if (n.rfind("encoder.", 0) == 0) before[n] = frozen.params().get(n).value().data;

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.lr = 1e-3;
  tc.seed = 17;
  train_model(frozen, ds.subset_by_subject(plan.train), ds.subset_by_subject(plan.val), tc);
  for (const auto& [n, bits] : before)
    CHECK(frozen.params().get(n).value().data == bits);

  Model<float> tuned(base, 9);
  std::map<std::string, Tensor<float>::Buffer> before2;
  for (const auto& n : tuned.params().names())
    if (n.rfind("encoder.", 0) == 0) before2[n] = tuned.params().get(n).value().data;
  train_model(tuned, ds.subset_by_subject(plan.train), ds.subset_by_subject(plan.val), tc);
  bool any_moved = false;
  for (const auto& [n, bits] : before2)
    if (tuned.params().get(n).value().data != bits) any_moved = true;
  CHECK(any_moved);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const ModelConfig cfg = small_config({false, false, true}, FusionKind::Concat);
  const Dataset ds = tiny_synth_dataset(4, 77, cfg);
  const auto plan = subject_split(ds.subjects(), {2, 1, 1}, 1);
  auto run = [&] {
    Model<float> m(cfg, 13);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 4;
    tc.seed = 99;
    const auto r =
        train_model(m, ds.subset_by_subject(plan.train), ds.subset_by_subject(plan.val), tc);
    return std::make_pair(r.history.back().train_loss, r.history.back().val.accuracy);
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("frozen training path matches the direct path's computation") {
  const ModelConfig cfg = small_config({false, true, true}, FusionKind::Sum);
  const Dataset ds = tiny_synth_dataset(3, 88, cfg);
  Model<float> m(cfg, 31);
  m.apply_freeze();
  // features computed through the cache equal a direct eval forward
  const auto batch = make_batch(ds, {0, 1, 2, 3}, cfg);
  const auto feats = m.encode_features(batch);
  Rng no_drop(0);
  const auto direct = m.forward(batch, false, no_drop);
  Rng no_drop2(0);
  const auto cached = m.forward_from_features(feats, false, no_drop2);
  CHECK(direct.logits.value().data == cached.logits.value().data);
}

TEST_CASE("checkpoint round trip is bitwise and mismatches are named") {
  const fs::path dir = fs::temp_directory_path() / "dfast_ckpt_test";
  fs::create_directories(dir);
  const ModelConfig cfg = small_config({true, true, true}, FusionKind::Concat);
  Model<float> m(cfg, 41);
  const fs::path p1 = dir / "a.ckpt";
  const fs::path p2 = dir / "b.ckpt";
  save_checkpoint(m.params(), p1);
  Model<float> loaded(cfg, 999);
  load_checkpoint_into(loaded.params(), p1);
  save_checkpoint(loaded.params(), p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  // truncation -> format error, nothing loaded
  const fs::path trunc = dir / "trunc.ckpt";
  {
    std::ofstream out(trunc, std::ios::binary);
    out.write(b1.data(), std::streamsize(b1.size() / 3));
  }
  CHECK_THROWS_AS(load_checkpoint(trunc), FormatError);

  // concat checkpoint into an attention model names the offending tensor
  const ModelConfig attn_cfg = small_config({true, true, true}, FusionKind::Attention);
  Model<float> attn(attn_cfg, 41);
  try {
    load_checkpoint_into(attn.params(), p1);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("head.norm.gain") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("proxy pretraining beats the predict-the-mean baseline") {
  ModelConfig cfg = small_config({false, false, true}, FusionKind::Concat);
  PretrainConfig pc;
  pc.epochs = 30;
  pc.lr = 2e-3;
  pc.n_subjects = 8;
  pc.holdout_subjects = 3;
  pc.seed = 2;
  const PretrainResult pr = proxy_pretrain(cfg, pc);
  CHECK(pr.holdout_mse[2] < pr.holdout_target_variance);
  bool has_pose = false;
  for (const auto& [name, t] : pr.encoder_values)
    if (name.rfind("encoder.pose.", 0) == 0) has_pose = true;
  CHECK(has_pose);

  // loading pretrained values changes the encoder and keeps shapes
  Model<float> m(cfg, 7);
  const auto before = m.params().get("encoder.pose.embed.weight").value().data;
  load_parameter_values(m.params(), pr.encoder_values);
  CHECK(m.params().get("encoder.pose.embed.weight").value().data != before);
}

TEST_CASE("history csv records epochs and frozen groups") {
  const fs::path dir = fs::temp_directory_path() / "dfast_hist_test";
  fs::create_directories(dir);
  TrainResult r;
  EpochRecord e;
  e.epoch = 0;
  e.train_loss = 0.5;
  e.val_loss = 0.6;
  r.history.push_back(e);
  r.best_val_f1_epoch = 0;
  const fs::path p = dir / "h.csv";
  write_history_csv(p, r, {"encoder.face"});
  std::ifstream in(p);
  std::string first;
  std::getline(in, first);
  CHECK(first.find("encoder.face") != std::string::npos);
  fs::remove_all(dir);
}
