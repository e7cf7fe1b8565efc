#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dfast/ablation.hpp"
#include "dfast/checkpoint.hpp"
#include "dfast/config.hpp"
#include "dfast/dataset.hpp"
#include "dfast/error.hpp"
#include "dfast/metrics.hpp"
#include "dfast/model.hpp"
#include "dfast/synthgen.hpp"
#include "dfast/training.hpp"

namespace fs = std::filesystem;
using namespace dfast;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
};

RunConfig resolve_config(const CommonArgs& common) {
  RunConfig cfg;
  std::string path = common.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv("DFAST_CONFIG")) path = env;
  }
  if (!path.empty()) cfg.load_file(path);
  for (const auto& kv : common.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ContractError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void print_config(const RunConfig& cfg, const std::string& command) {
  std::cout << "# resolved configuration (" << command << ")\n";
  cfg.print_resolved(std::cout);
  std::cout << "# ---\n";
}

// Modality set and fusion strategy are recoverable from the tensor names
// (and the head width separates concat from sum).
ModelConfig config_from_checkpoint(const fs::path& path, RunConfig run_cfg) {
  const auto tensors = load_checkpoint(path);
  bool face = false, voice = false, pose = false;
  bool attention = false, wsum = false;
  int64_t head_dim = 0;
  for (const auto& [name, t] : tensors) {
    if (name.rfind("encoder.face.", 0) == 0) face = true;
    if (name.rfind("encoder.voice.", 0) == 0) voice = true;
    if (name.rfind("encoder.pose.", 0) == 0) pose = true;
    if (name.rfind("fusion.attention.", 0) == 0) attention = true;
    if (name.rfind("fusion.wsum.", 0) == 0) wsum = true;
    if (name == "head.norm.gain") head_dim = t.numel();
  }
  std::string mods;
  if (face) mods += "face";
  if (voice) mods += (mods.empty() ? "" : ",") + std::string("voice");
  if (pose) mods += (mods.empty() ? "" : ",") + std::string("pose");
  if (mods.empty()) throw FormatError("checkpoint contains no encoder tensors");
  run_cfg.modalities = mods;
  if (attention)
    run_cfg.fusion = "attention";
  else if (wsum)
    run_cfg.fusion = "wsum";
  else
    run_cfg.fusion = head_dim > kEmbedDim ? "concat" : "sum";
  return run_cfg.model_config();
}

int cmd_generate(const CommonArgs& common, int subjects, double delta, double sigma,
                 uint64_t seed, const std::string& out_dir, bool force, bool flags_set[4]) {
  RunConfig cfg = resolve_config(common);
  if (flags_set[0]) cfg.gen_subjects = subjects;
  if (flags_set[1]) cfg.gen_delta = delta;
  if (flags_set[2]) cfg.gen_sigma = sigma;
  if (flags_set[3]) cfg.seed = seed;
  print_config(cfg, "generate");
  synthgen::GenParams p;
  p.n_subjects = cfg.gen_subjects;
  p.delta = cfg.gen_delta;
  p.sigma = cfg.gen_sigma;
  p.seed = cfg.seed;
  const auto sum = synthgen::gen_dataset(p, out_dir, force);
  std::cout << sum.subjects << " subjects, " << sum.samples << " samples, " << sum.files
            << " files\n"
            << "manifest: " << sum.manifest_path.string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& manifest_path,
              const std::string& checkpoint_path, const std::string& history_path) {
  const Manifest manifest = Manifest::load(manifest_path);
  const ModelConfig mcfg = cfg.model_config();
  const auto counts = cfg.split_counts(int(manifest.subjects().size()));
  const SplitPlan plan = subject_split(manifest, counts, cfg.seed);
  std::cout << "split: " << plan.train.size() << " train / " << plan.val.size() << " val / "
            << plan.test.size() << " test subjects\n";

  Dataset data = Dataset::load(manifest, mcfg);
  Model<float> model(mcfg, cfg.seed);
  if (cfg.pretrain == "proxy") {
    std::cout << "proxy pretraining encoders (" << cfg.pretrain_epochs << " epochs, "
              << cfg.pretrain_subjects << " auxiliary subjects)\n";
    const PretrainResult pr = proxy_pretrain(mcfg, cfg.pretrain_config());
    load_parameter_values(model.params(), pr.encoder_values);
  } else if (cfg.pretrain != "none") {
    throw ContractError("pretrain must be 'none' or 'proxy', got '" + cfg.pretrain + "'");
  }
  if (cfg.freeze_encoders) model.apply_freeze();

  const TrainResult tr = train_model(model, data.subset_by_subject(plan.train),
                                     data.subset_by_subject(plan.val), cfg.train_config());
  save_checkpoint(model.params(), checkpoint_path);
  const std::string hist =
      history_path.empty() ? checkpoint_path + ".history.csv" : history_path;
  write_history_csv(hist, tr, model.params().frozen_groups());
  std::cout << "final train loss " << tr.final_train_loss << ", best val F1 epoch "
            << tr.best_val_f1_epoch << "\n"
            << "checkpoint: " << checkpoint_path << "\nhistory: " << hist << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& manifest_path,
             const std::string& checkpoint_path, const std::string& split,
             const std::string& report_path) {
  const Manifest manifest = Manifest::load(manifest_path);
  const ModelConfig mcfg = config_from_checkpoint(checkpoint_path, cfg);
  Model<float> model(mcfg, cfg.seed);
  load_checkpoint_into(model.params(), checkpoint_path);

  Dataset data = Dataset::load(manifest, mcfg);
  if (split != "all") {
    const auto counts = cfg.split_counts(int(manifest.subjects().size()));
    const SplitPlan plan = subject_split(manifest, counts, cfg.seed);
    if (split == "train")
      data = data.subset_by_subject(plan.train);
    else if (split == "val")
      data = data.subset_by_subject(plan.val);
    else if (split == "test")
      data = data.subset_by_subject(plan.test);
    else
      throw ContractError("--split must be train|val|test|all, got '" + split + "'");
  }
  if (data.size() == 0) throw Error("selected split contains no samples");

  std::vector<std::vector<float>> weights;
  const metrics::ScoredSet scored = score_dataset(model, data, &weights);
  metrics::MetricReport rep;
  try {
    rep = metrics::summary(scored);
  } catch (const ContractError&) {
    throw;
  }
  std::ofstream rep_out(report_path);
  if (!rep_out) throw Error("cannot create report: " + report_path);
  rep_out << metrics::MetricReport::csv_header() << "\n"
          << rep.csv_row(fusion_name(mcfg.fusion) + std::string("|") +
                         mcfg.modalities_string())
          << "\n";

  const std::string samples_path = report_path + ".samples.csv";
  std::ofstream samp(samples_path);
  if (!samp) throw Error("cannot create per-sample report: " + samples_path);
  samp << "id,label,score,prediction";
  const bool emit_weights = !weights.empty() && !weights[0].empty();
  if (emit_weights) {
    for (int m = 0; m < 3; ++m)
      if (mcfg.use[size_t(m)]) samp << ",w_" << modality_name(Modality(m));
  }
  samp << "\n";
  char buf[64];
  for (size_t i = 0; i < scored.scores.size(); ++i) {
    const auto& s = data.samples[i];
    std::snprintf(buf, sizeof(buf), "%.6f", scored.scores[i]);
    samp << s.subject_id << '/' << s.trial_id << ',' << scored.labels[i] << ',' << buf << ','
         << (scored.scores[i] >= metrics::kThreshold ? 1 : 0);
    if (emit_weights)
      for (float w : weights[i]) {
        std::snprintf(buf, sizeof(buf), "%.6f", double(w));
        samp << ',' << buf;
      }
    samp << "\n";
  }
  std::cout << "accuracy " << rep.accuracy << ", auc "
            << (std::isnan(rep.auc) ? std::string("NA") : std::to_string(rep.auc)) << ", f1 "
            << rep.f1 << "\nreport: " << report_path << "\nper-sample: " << samples_path
            << "\n";
  return 0;
}

int cmd_infer(const RunConfig& cfg, const std::string& checkpoint_path,
              const std::string& face_path, const std::string& voice_path,
              const std::string& pose_path) {
  const ModelConfig mcfg = config_from_checkpoint(checkpoint_path, cfg);
  Model<float> model(mcfg, cfg.seed);
  load_checkpoint_into(model.params(), checkpoint_path);

  auto require = [&](Modality m, const std::string& path, const char* flag) {
    if (mcfg.uses(m) && path.empty())
      throw ContractError(std::string("the checkpoint requires ") + flag + " (modality '" +
                          modality_name(m) + "' is part of this model)");
  };
  require(Modality::Face, face_path, "--face");
  require(Modality::Voice, voice_path, "--audio");
  require(Modality::Pose, pose_path, "--pose");

  BatchInput<float> in;
  in.batch = 1;
  auto lift = [](Tensor<float> t) {
    Shape s = t.shape;
    s.insert(s.begin(), 1);
    return Tensor<float>(s, std::move(t.data));
  };
  if (mcfg.uses(Modality::Face)) in.face = lift(prep_face_file(face_path, mcfg.face));
  if (mcfg.uses(Modality::Voice)) in.voice = lift(prep_voice_file(voice_path, mcfg.voice));
  if (mcfg.uses(Modality::Pose)) in.pose = lift(prep_pose_file(pose_path, mcfg.pose));

  Rng no_drop(0);
  const auto fwd = model.forward(in, false, no_drop);
  const double prob = double(sigmoid(fwd.logits).value()[0]);
  std::cout << "probability = " << prob << "\n"
            << "class = " << (prob >= metrics::kThreshold ? 1 : 0) << "\n";
  if (mcfg.fusion == FusionKind::Attention && fwd.fusion_weights.defined()) {
    std::cout << "attention weights:";
    const auto& w = fwd.fusion_weights.value();
    int col = 0;
    for (int m = 0; m < 3; ++m)
      if (mcfg.use[size_t(m)])
        std::cout << ' ' << modality_name(Modality(m)) << '=' << w[col++];
    std::cout << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Digital FAST multimodal stroke-screening pipeline"};
  app.require_subcommand(1);
  CommonArgs common;
  app.add_option("--config", common.config_path,
                 "key=value config file (default: $DFAST_CONFIG)");
  app.add_option("--set", common.overrides, "override a config key, e.g. --set lr=0.001");

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic F.A.S.T. dataset");
  int g_subjects = 8;
  double g_delta = 0.6, g_sigma = 1.0;
  uint64_t g_seed = 1;
  std::string g_out;
  bool g_force = false;
  auto* o_sub = gen->add_option("--subjects", g_subjects, "number of subjects");
  auto* o_delta = gen->add_option("--delta", g_delta, "severity in [0,1]");
  auto* o_sigma = gen->add_option("--sigma", g_sigma, "noise scale");
  auto* o_seed = gen->add_option("--seed", g_seed, "generator seed");
  gen->add_option("--out", g_out, "output directory")->required();
  gen->add_flag("--force", g_force, "overwrite a non-empty output directory");

  // train
  auto* train = app.add_subcommand("train", "train a screening model");
  std::string t_manifest, t_checkpoint, t_history, t_modalities, t_fusion, t_pretrain;
  int t_epochs = -1;
  uint64_t t_seed = 0;
  bool t_freeze = false, t_seed_set = false;
  train->add_option("--manifest", t_manifest, "dataset manifest")->required();
  train->add_option("--checkpoint", t_checkpoint, "output checkpoint path")->required();
  train->add_option("--history", t_history, "per-epoch history CSV path");
  train->add_option("--modalities", t_modalities, "comma list of face,voice,pose");
  train->add_option("--fusion", t_fusion, "concat|sum|wsum|attention");
  train->add_option("--epochs", t_epochs, "training epochs");
  train->add_option("--pretrain", t_pretrain, "none|proxy");
  train->add_flag("--freeze-encoders", t_freeze, "freeze encoder groups");
  auto* t_seed_opt = train->add_option("--seed", t_seed, "training seed");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string e_manifest, e_checkpoint, e_split = "test", e_report;
  uint64_t e_seed = 0;
  eval->add_option("--manifest", e_manifest, "dataset manifest")->required();
  eval->add_option("--checkpoint", e_checkpoint, "model checkpoint")->required();
  eval->add_option("--split", e_split, "train|val|test|all");
  eval->add_option("--report", e_report, "metrics CSV path")->required();
  auto* e_seed_opt = eval->add_option("--seed", e_seed, "split seed used at training time");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run the model and fusion comparisons");
  std::string a_manifest, a_out, a_seeds;
  int a_epochs = -1, a_threads = -1, a_pre_epochs = -1;
  ablate->add_option("--manifest", a_manifest, "dataset manifest")->required();
  ablate->add_option("--out", a_out, "output directory for the CSV tables")->required();
  ablate->add_option("--seeds", a_seeds, "comma list of seeds");
  ablate->add_option("--epochs", a_epochs, "training epochs per run");
  ablate->add_option("--threads", a_threads, "worker threads (0 = hardware)");
  ablate->add_option("--pretrain-epochs", a_pre_epochs, "proxy pretraining epochs");

  // infer
  auto* infer = app.add_subcommand("infer", "score one multimodal sample");
  std::string i_checkpoint, i_face, i_audio, i_pose;
  infer->add_option("--checkpoint", i_checkpoint, "model checkpoint")->required();
  infer->add_option("--face", i_face, "face landmark file (LMK1)");
  infer->add_option("--audio", i_audio, "speech WAV file");
  infer->add_option("--pose", i_pose, "pose landmark file (LMK1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      bool flags_set[4] = {o_sub->count() > 0, o_delta->count() > 0, o_sigma->count() > 0,
                           o_seed->count() > 0};
      return cmd_generate(common, g_subjects, g_delta, g_sigma, g_seed, g_out, g_force,
                          flags_set);
    }
    if (train->parsed()) {
      RunConfig cfg = resolve_config(common);
      if (!t_modalities.empty()) cfg.modalities = t_modalities;
      if (!t_fusion.empty()) cfg.fusion = t_fusion;
      if (!t_pretrain.empty()) cfg.pretrain = t_pretrain;
      if (t_epochs >= 0) cfg.epochs = t_epochs;
      if (t_freeze) cfg.freeze_encoders = true;
      t_seed_set = t_seed_opt->count() > 0;
      if (t_seed_set) cfg.seed = t_seed;
      print_config(cfg, "train");
      return cmd_train(cfg, t_manifest, t_checkpoint, t_history);
    }
    if (eval->parsed()) {
      RunConfig cfg = resolve_config(common);
      if (e_seed_opt->count() > 0) cfg.seed = e_seed;
      print_config(cfg, "eval");
      return cmd_eval(cfg, e_manifest, e_checkpoint, e_split, e_report);
    }
    if (ablate->parsed()) {
      RunConfig cfg = resolve_config(common);
      if (!a_seeds.empty()) cfg.ablate_seeds = a_seeds;
      if (a_epochs >= 0) cfg.ablate_epochs = a_epochs;
      if (a_threads >= 0) cfg.threads = a_threads;
      if (a_pre_epochs >= 0) cfg.pretrain_epochs = a_pre_epochs;
      print_config(cfg, "ablate");

      const Manifest manifest = Manifest::load(a_manifest);
      ModelConfig all = cfg.model_config();
      all.use = {true, true, true};
      const Dataset data = Dataset::load(manifest, all);

      AblationConfig acfg;
      acfg.seeds = cfg.ablation_seeds();
      acfg.epochs = cfg.ablate_epochs;
      acfg.lr = cfg.lr;
      acfg.batch_size = cfg.batch;
      acfg.dropout = cfg.dropout;
      acfg.split_counts = {cfg.train_subjects, cfg.val_subjects, cfg.test_subjects};
      acfg.use_pretrain = cfg.pretrain != "none";
      acfg.pretrain_epochs = cfg.pretrain_epochs;
      acfg.pretrain_subjects = cfg.pretrain_subjects;
      acfg.pretrain_lr = cfg.pretrain_lr;
      acfg.pretrain_sigma = cfg.pretrain_sigma;
      acfg.threads = cfg.threads;
      acfg.model_template = all;
      acfg.model_template.dropout = cfg.dropout;

      const AblationReport rep = run_ablation(data, acfg);
      fs::create_directories(a_out);
      for (const auto& [name, text] :
           {std::pair<std::string, std::string>{"table1.csv", rep.table1_csv()},
            {"table2.csv", rep.table2_csv()},
            {"runs.csv", rep.runs_csv()}}) {
        std::ofstream out(fs::path(a_out) / name);
        if (!out) throw Error("cannot create " + name + " in " + a_out);
        out << text;
      }
      std::cout << rep.table1_csv() << "\n" << rep.table2_csv();
      int failures = 0;
      for (const auto& r : rep.runs) failures += r.failed ? 1 : 0;
      if (failures) std::cout << failures << " run(s) failed; see runs.csv\n";
      return 0;
    }
    if (infer->parsed()) {
      RunConfig cfg = resolve_config(common);
      print_config(cfg, "infer");
      return cmd_infer(cfg, i_checkpoint, i_face, i_audio, i_pose);
    }
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
