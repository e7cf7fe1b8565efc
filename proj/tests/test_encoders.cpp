#include <doctest.h>

#include <cmath>

#include "dfast/encoders.hpp"
#include "dfast/error.hpp"

using namespace dfast;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

PatchTransformerConfig tiny_cfg() {
  PatchTransformerConfig c;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.input_h = 8;
  c.input_w = 12;
  return c;
}

}  // namespace

TEST_CASE("patchify shapes and ordering") {
  Rng rng(2);
  const auto grid = random_tensor({128, 128}, rng);
  const auto patches = patchify(grid, 16);
  CHECK(patches.shape == Shape{64, 256});
  // first patch is the top-left 16x16 block, row-major
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) CHECK(patches.at(0, r * 16 + c) == grid.at(r, c));
  // patch row-major order: second patch starts at column 16
  CHECK(patches.at(1, 0) == grid.at(0, 16));

  const auto mel_grid = random_tensor({96, 256}, rng);
  CHECK(patchify(mel_grid, 16).shape == Shape{96, 256});

  const auto constant = Tensor<double>::full({32, 32}, 3.25);
  const auto cpat = patchify(constant, 16);
  for (int64_t t = 1; t < cpat.dim(0); ++t)
    for (int64_t j = 0; j < cpat.dim(1); ++j) CHECK(cpat.at(t, j) == cpat.at(0, j));

  CHECK_THROWS_AS(patchify(random_tensor({100, 256}, rng), 16), ContractError);
}

TEST_CASE("pose_to_tokens uses frame-major channels per joint") {
  Tensor<double> pose({2, 3, 3});
  for (int64_t i = 0; i < pose.numel(); ++i) pose[i] = double(i);
  const auto tokens = pose_to_tokens(pose);
  CHECK(tokens.shape == Shape{3, 6});
  // token j = [f0 xyz, f1 xyz]
  for (int j = 0; j < 3; ++j)
    for (int f = 0; f < 2; ++f)
      for (int c = 0; c < 3; ++c) CHECK(tokens.at(j, f * 3 + c) == pose.at(f, j, c));
}

TEST_CASE("transformer produces an embed_dim class vector across token counts") {
  Rng rng(5);
  for (int w : {4, 12, 20}) {
    PatchTransformerConfig cfg = tiny_cfg();
    cfg.input_w = w;  // token count varies with the grid
    ParameterSet<double> ps;
    Rng init(7);
    init_patch_transformer(ps, "encoder.face", cfg, init);
    const auto batch = random_tensor({2, cfg.tokens(), cfg.patch_values()}, rng);
    const auto out = patch_transformer_forward(ps, "encoder.face", cfg, Var<double>(batch));
    CHECK(out.shape() == Shape{2, cfg.embed_dim});
    for (int64_t i = 0; i < out.value().numel(); ++i) CHECK(std::isfinite(out.value()[i]));
  }
}

TEST_CASE("attention rows are probability vectors") {
  Rng rng(9);
  const auto q = random_tensor({2, 5, 4}, rng);
  const auto k = random_tensor({2, 5, 4}, rng);
  Var<double> scores = softmax(scale(matmul(Var<double>(q), permute(Var<double>(k), {0, 2, 1})),
                                     0.5));
  for (int64_t r = 0; r < 2 * 5; ++r) {
    double sum = 0;
    for (int64_t c = 0; c < 5; ++c) {
      const double w = scores.value()[r * 5 + c];
      CHECK(w >= 0.0);
      sum += w;
    }
    CHECK(std::abs(sum - 1.0) < 1e-5);
  }
}

TEST_CASE("permuting patches with zero positional embeddings keeps the class output") {
  const auto cfg = tiny_cfg();
  ParameterSet<double> ps;
  Rng init(21);
  init_patch_transformer(ps, "enc", cfg, init);
  // learned positional table is zero-initialized; make that explicit here
  for (auto& v : ps.get("enc.pos_embed").mutable_value().data) v = 0.0;

  Rng rng(22);
  const int64_t n = cfg.tokens();
  const auto patches = random_tensor({1, n, cfg.patch_values()}, rng);
  Tensor<double> permuted = patches;
  // rotate token order by 3
  for (int64_t t = 0; t < n; ++t)
    for (int64_t j = 0; j < cfg.patch_values(); ++j)
      permuted.at(0, t, j) = patches.at(0, (t + 3) % n, j);

  const auto a = patch_transformer_forward(ps, "enc", cfg, Var<double>(patches));
  const auto b = patch_transformer_forward(ps, "enc", cfg, Var<double>(permuted));
  for (int64_t i = 0; i < a.value().numel(); ++i)
    CHECK(a.value()[i] == doctest::Approx(b.value()[i]).epsilon(1e-5));
}

TEST_CASE("mixer output width and zeroed-token-mixing permutation symmetry") {
  MixerConfig cfg;
  cfg.tokens = 33;
  cfg.input_channels = 12;  // 4 frames x 3 coords for speed
  cfg.width = 16;
  cfg.token_hidden = 8;
  cfg.channel_hidden = 24;
  cfg.depth = 2;
  ParameterSet<double> ps;
  Rng init(31);
  init_mixer(ps, "enc.pose", cfg, init);

  Rng rng(32);
  const auto tokens = random_tensor({2, cfg.tokens, cfg.input_channels}, rng);
  const auto out = mixer_forward(ps, "enc.pose", cfg, Var<double>(tokens));
  CHECK(out.shape() == Shape{2, cfg.width});

  // zero the token-mixing branches; joint order then only enters a mean-pool
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string b = "enc.pose.block" + std::to_string(i);
    for (const char* nm : {".token_mlp.fc1.weight", ".token_mlp.fc1.bias",
                           ".token_mlp.fc2.weight", ".token_mlp.fc2.bias"})
      for (auto& v : ps.get(b + nm).mutable_value().data) v = 0.0;
  }
  Tensor<double> shuffled = tokens;
  for (int64_t j = 0; j < cfg.tokens; ++j)
    for (int64_t c = 0; c < cfg.input_channels; ++c) {
      shuffled.at(0, j, c) = tokens.at(0, (j * 7 + 5) % cfg.tokens, c);
      shuffled.at(1, j, c) = tokens.at(1, (j * 7 + 5) % cfg.tokens, c);
    }
  const auto a = mixer_forward(ps, "enc.pose", cfg, Var<double>(tokens));
  const auto b = mixer_forward(ps, "enc.pose", cfg, Var<double>(shuffled));
  for (int64_t i = 0; i < a.value().numel(); ++i)
    CHECK(a.value()[i] == doctest::Approx(b.value()[i]).epsilon(1e-6));
}

TEST_CASE("mixer on zero input with zero embedding bias pools to zero") {
  MixerConfig cfg;
  cfg.tokens = 5;
  cfg.input_channels = 6;
  cfg.width = 8;
  cfg.token_hidden = 4;
  cfg.channel_hidden = 8;
  cfg.depth = 1;
  ParameterSet<double> ps;
  Rng init(41);
  init_mixer(ps, "m", cfg, init);
  // zero both residual branches; the embedding bias is zero-initialized
  for (const char* nm :
       {"m.block0.token_mlp.fc1.weight", "m.block0.token_mlp.fc1.bias",
        "m.block0.token_mlp.fc2.weight", "m.block0.token_mlp.fc2.bias",
        "m.block0.channel_mlp.fc1.weight", "m.block0.channel_mlp.fc1.bias",
        "m.block0.channel_mlp.fc2.weight", "m.block0.channel_mlp.fc2.bias"})
    for (auto& v : ps.get(nm).mutable_value().data) v = 0.0;
  const auto out =
      mixer_forward(ps, "m", cfg, Var<double>(Tensor<double>::zeros({1, 5, 6})));
  for (int64_t i = 0; i < out.value().numel(); ++i) CHECK(out.value()[i] == 0.0);
}

TEST_CASE("projector maps to 256 dimensions with a gradient that checks out") {
  Rng init(51);
  for (int in_dim : {8, 12, 16}) {
    ParameterSet<double> ps;
    init_projector(ps, "projector.x", in_dim, init);
    Rng rng(52);
    const auto x = random_tensor({3, in_dim}, rng);
    const auto out = project(ps, "projector.x", Var<double>(x));
    CHECK(out.shape() == Shape{3, kEmbedDim});

    auto f = [&]() { return project(ps, "projector.x", Var<double>(x)); };
    const double err = finite_diff_check_params<double>(
        f, {ps.get("projector.x.weight"), ps.get("projector.x.bias")}, 1e-5);
    CHECK(err < 1e-4);
  }

  // zero input, zero bias -> zero embedding
  ParameterSet<double> ps;
  init_projector(ps, "p", 8, init);
  const auto z = project(ps, "p", Var<double>(Tensor<double>::zeros({2, 8})));
  for (int64_t i = 0; i < z.value().numel(); ++i) CHECK(z.value()[i] == 0.0);
}

TEST_CASE("encoder initialization is deterministic per seed") {
  const auto cfg = tiny_cfg();
  ParameterSet<double> a, b;
  Rng ra(99), rb(99);
  init_patch_transformer(a, "e", cfg, ra);
  init_patch_transformer(b, "e", cfg, rb);
  REQUIRE(a.names() == b.names());
  for (const auto& n : a.names()) CHECK(a.get(n).value().data == b.get(n).value().data);
}
