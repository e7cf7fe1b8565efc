#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "dfast/model.hpp"
#include "dfast/training.hpp"

namespace dfast {

// Every tunable of the pipeline with its default, readable from a key=value
// config file and overridable by CLI flags. Unknown keys are rejected.
struct RunConfig {
  // model
  std::string modalities = "face,voice,pose";
  std::string fusion = "attention";
  double dropout = 0.1;
  int face_embed_dim = 128, face_depth = 4, face_heads = 4, face_mlp_ratio = 4;
  int voice_embed_dim = 96, voice_depth = 4, voice_heads = 3, voice_mlp_ratio = 4;
  int mixer_width = 128, mixer_depth = 4, mixer_token_hidden = 64, mixer_channel_hidden = 256;
  // training
  int epochs = 300;
  double lr = 1e-4;
  int batch = 8;
  uint64_t seed = 1;
  bool freeze_encoders = false;
  std::string pretrain = "none";  // none | proxy
  int pretrain_epochs = 20;
  int pretrain_subjects = 12;
  double pretrain_lr = 3e-4;
  double pretrain_sigma = 1.0;
  // split (-1: scale the 29/4/4 reference proportions to the subject count)
  int train_subjects = -1;
  int val_subjects = -1;
  int test_subjects = -1;
  // ablation
  std::string ablate_seeds = "1,2,3,4,5";
  int ablate_epochs = 60;
  int threads = 0;  // 0: hardware concurrency
  // generator
  int gen_subjects = 8;
  double gen_delta = 0.6;
  double gen_sigma = 1.0;

  void set(const std::string& key, const std::string& value);  // unknown key -> ContractError
  void load_file(const std::filesystem::path& path);
  void print_resolved(std::ostream& os) const;

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  PretrainConfig pretrain_config() const;
  std::vector<uint64_t> ablation_seeds() const;
  std::array<int, 3> split_counts(int n_subjects) const;
};

std::vector<std::string> split_csv_list(const std::string& s);

}  // namespace dfast
