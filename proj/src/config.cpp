#include "dfast/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dfast/error.hpp"

namespace dfast {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ContractError("expected a boolean, got '" + v + "'");
}

}  // namespace

std::vector<std::string> split_csv_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  const std::map<std::string, std::function<void()>> setters{
      {"modalities", [&] { modalities = v; }},
      {"fusion", [&] { fusion = v; }},
      {"dropout", [&] { dropout = std::stod(v); }},
      {"face_embed_dim", [&] { face_embed_dim = std::stoi(v); }},
      {"face_depth", [&] { face_depth = std::stoi(v); }},
      {"face_heads", [&] { face_heads = std::stoi(v); }},
      {"face_mlp_ratio", [&] { face_mlp_ratio = std::stoi(v); }},
      {"voice_embed_dim", [&] { voice_embed_dim = std::stoi(v); }},
      {"voice_depth", [&] { voice_depth = std::stoi(v); }},
      {"voice_heads", [&] { voice_heads = std::stoi(v); }},
      {"voice_mlp_ratio", [&] { voice_mlp_ratio = std::stoi(v); }},
      {"mixer_width", [&] { mixer_width = std::stoi(v); }},
      {"mixer_depth", [&] { mixer_depth = std::stoi(v); }},
      {"mixer_token_hidden", [&] { mixer_token_hidden = std::stoi(v); }},
      {"mixer_channel_hidden", [&] { mixer_channel_hidden = std::stoi(v); }},
      {"epochs", [&] { epochs = std::stoi(v); }},
      {"lr", [&] { lr = std::stod(v); }},
      {"batch", [&] { batch = std::stoi(v); }},
      {"seed", [&] { seed = std::stoull(v); }},
      {"freeze_encoders", [&] { freeze_encoders = parse_bool(v); }},
      {"pretrain", [&] { pretrain = v; }},
      {"pretrain_epochs", [&] { pretrain_epochs = std::stoi(v); }},
      {"pretrain_subjects", [&] { pretrain_subjects = std::stoi(v); }},
      {"pretrain_lr", [&] { pretrain_lr = std::stod(v); }},
      {"pretrain_sigma", [&] { pretrain_sigma = std::stod(v); }},
      {"train_subjects", [&] { train_subjects = std::stoi(v); }},
      {"val_subjects", [&] { val_subjects = std::stoi(v); }},
      {"test_subjects", [&] { test_subjects = std::stoi(v); }},
      {"ablate_seeds", [&] { ablate_seeds = v; }},
      {"ablate_epochs", [&] { ablate_epochs = std::stoi(v); }},
      {"threads", [&] { threads = std::stoi(v); }},
      {"gen_subjects", [&] { gen_subjects = std::stoi(v); }},
      {"gen_delta", [&] { gen_delta = std::stod(v); }},
      {"gen_sigma", [&] { gen_sigma = std::stod(v); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ContractError("unknown config key: " + key);
  try {
    it->second();
  } catch (const std::invalid_argument&) {
    throw ContractError("bad value '" + v + "' for config key " + key);
  } catch (const std::out_of_range&) {
    throw ContractError("value out of range for config key " + key);
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open config file: " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError("config line " + std::to_string(lineno) + " is not key = value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::print_resolved(std::ostream& os) const {
  os << "modalities = " << modalities << "\n"
     << "fusion = " << fusion << "\n"
     << "dropout = " << dropout << "\n"
     << "face_embed_dim = " << face_embed_dim << "\n"
     << "face_depth = " << face_depth << "\n"
     << "face_heads = " << face_heads << "\n"
     << "face_mlp_ratio = " << face_mlp_ratio << "\n"
     << "voice_embed_dim = " << voice_embed_dim << "\n"
     << "voice_depth = " << voice_depth << "\n"
     << "voice_heads = " << voice_heads << "\n"
     << "voice_mlp_ratio = " << voice_mlp_ratio << "\n"
     << "mixer_width = " << mixer_width << "\n"
     << "mixer_depth = " << mixer_depth << "\n"
     << "mixer_token_hidden = " << mixer_token_hidden << "\n"
     << "mixer_channel_hidden = " << mixer_channel_hidden << "\n"
     << "epochs = " << epochs << "\n"
     << "lr = " << lr << "\n"
     << "batch = " << batch << "\n"
     << "seed = " << seed << "\n"
     << "freeze_encoders = " << (freeze_encoders ? "true" : "false") << "\n"
     << "pretrain = " << pretrain << "\n"
     << "pretrain_epochs = " << pretrain_epochs << "\n"
     << "pretrain_subjects = " << pretrain_subjects << "\n"
     << "pretrain_lr = " << pretrain_lr << "\n"
     << "pretrain_sigma = " << pretrain_sigma << "\n"
     << "train_subjects = " << train_subjects << "\n"
     << "val_subjects = " << val_subjects << "\n"
     << "test_subjects = " << test_subjects << "\n"
     << "ablate_seeds = " << ablate_seeds << "\n"
     << "ablate_epochs = " << ablate_epochs << "\n"
     << "threads = " << threads << "\n"
     << "gen_subjects = " << gen_subjects << "\n"
     << "gen_delta = " << gen_delta << "\n"
     << "gen_sigma = " << gen_sigma << "\n";
}

ModelConfig RunConfig::model_config() const {
  ModelConfig cfg;
  cfg.use = {false, false, false};
  for (const auto& m : split_csv_list(modalities))
    cfg.use[size_t(modality_from_name(m))] = true;
  cfg.fusion = fusion_from_name(fusion);
  cfg.dropout = dropout;
  cfg.freeze_encoders = freeze_encoders;
  cfg.face.embed_dim = face_embed_dim;
  cfg.face.depth = face_depth;
  cfg.face.heads = face_heads;
  cfg.face.mlp_ratio = face_mlp_ratio;
  cfg.voice.embed_dim = voice_embed_dim;
  cfg.voice.depth = voice_depth;
  cfg.voice.heads = voice_heads;
  cfg.voice.mlp_ratio = voice_mlp_ratio;
  cfg.pose.width = mixer_width;
  cfg.pose.depth = mixer_depth;
  cfg.pose.token_hidden = mixer_token_hidden;
  cfg.pose.channel_hidden = mixer_channel_hidden;
  cfg.validate();
  return cfg;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.lr = lr;
  t.batch_size = batch;
  t.seed = seed;
  return t;
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig p;
  p.epochs = pretrain_epochs;
  p.lr = pretrain_lr;
  p.batch_size = batch;
  p.seed = seed;
  p.n_subjects = pretrain_subjects;
  p.sigma = pretrain_sigma;
  return p;
}

std::vector<uint64_t> RunConfig::ablation_seeds() const {
  std::vector<uint64_t> out;
  for (const auto& s : split_csv_list(ablate_seeds)) out.push_back(std::stoull(s));
  if (out.empty()) throw ContractError("ablate_seeds must name at least one seed");
  return out;
}

std::array<int, 3> RunConfig::split_counts(int n_subjects) const {
  if (train_subjects < 0 && val_subjects < 0 && test_subjects < 0)
    return scaled_split_counts(n_subjects);
  if (train_subjects < 0 || val_subjects < 0 || test_subjects < 0)
    throw ContractError("set all of train/val/test_subjects or none");
  return {train_subjects, val_subjects, test_subjects};
}

}  // namespace dfast
