#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dfast/audio.hpp"
#include "dfast/error.hpp"
#include "dfast/landmarks.hpp"
#include "dfast/rng.hpp"

using namespace dfast;
using namespace dfast::landmarks;

namespace {

FaceSequence random_face(int frames, Rng& rng) {
  Tensor<double> t({int64_t(frames), kFacePoints, 2});
  for (auto& v : t.data) v = rng.uniform(0.1, 0.9);
  return {std::move(t), 30.0};
}

PoseSequence random_pose(int frames, Rng& rng) {
  Tensor<double> t({int64_t(frames), kPosePoints, 3});
  for (auto& v : t.data) v = rng.uniform(-0.5, 0.9);
  return {std::move(t), 30.0};
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("validate enforces point and coordinate counts") {
  Rng rng(3);
  CHECK_NOTHROW(validate(random_face(5, rng)));
  CHECK_NOTHROW(validate(random_pose(5, rng)));

  FaceSequence wrong_points{Tensor<double>({4, 100, 2}), 30.0};
  CHECK_THROWS_AS(validate(wrong_points), SchemaError);
  FaceSequence one_frame{Tensor<double>({1, kFacePoints, 2}), 30.0};
  CHECK_THROWS_AS(validate(one_frame), SchemaError);
  // z must be dropped upstream: a 478x3 array is rejected
  try {
    validate(FaceSequence{Tensor<double>({4, kFacePoints, 3}), 30.0});
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("478 x 2") != std::string::npos);
    CHECK(msg.find("478 x 3") != std::string::npos);
  }
}

TEST_CASE("normalize_face: centroid at origin, unit RMS, idempotent, invariant") {
  Rng rng(11);
  const FaceSequence s = random_face(6, rng);
  const FaceSequence n = normalize_face(s);
  for (int64_t f = 0; f < 6; ++f) {
    double cx = 0, cy = 0, sq = 0;
    for (int p = 0; p < kFacePoints; ++p) {
      cx += n.frames.at(f, p, 0);
      cy += n.frames.at(f, p, 1);
    }
    cx /= kFacePoints;
    cy /= kFacePoints;
    CHECK(std::abs(cx) < 1e-6);
    CHECK(std::abs(cy) < 1e-6);
    for (int p = 0; p < kFacePoints; ++p) {
      sq += n.frames.at(f, p, 0) * n.frames.at(f, p, 0) +
            n.frames.at(f, p, 1) * n.frames.at(f, p, 1);
    }
    CHECK(std::sqrt(sq / kFacePoints) == doctest::Approx(1.0).epsilon(1e-9));
  }

  // idempotence
  const FaceSequence nn = normalize_face(n);
  CHECK(max_abs_diff(nn.frames, n.frames) < 1e-6);

  // scale and translation invariance
  FaceSequence scaled = s;
  for (auto& v : scaled.frames.data) v = 2.0 * v;
  CHECK(max_abs_diff(normalize_face(scaled).frames, n.frames) < 1e-6);
  FaceSequence shifted = s;
  for (int64_t f = 0; f < 6; ++f)
    for (int p = 0; p < kFacePoints; ++p) {
      shifted.frames.at(f, p, 0) += 0.37;
      shifted.frames.at(f, p, 1) -= 0.11;
    }
  CHECK(max_abs_diff(normalize_face(shifted).frames, n.frames) < 1e-6);

  // degenerate frame
  FaceSequence flat{Tensor<double>::full({3, kFacePoints, 2}, 0.25), 30.0};
  CHECK_THROWS_AS(normalize_face(flat), NumericError);
}

TEST_CASE("normalize_pose applies the same contract in three dimensions") {
  Rng rng(13);
  const PoseSequence s = random_pose(4, rng);
  const PoseSequence n = normalize_pose(s);
  PoseSequence scaled = s;
  for (auto& v : scaled.frames.data) v *= 3.0;
  CHECK(max_abs_diff(normalize_pose(scaled).frames, n.frames) < 1e-6);
  const PoseSequence nn = normalize_pose(n);
  CHECK(max_abs_diff(nn.frames, n.frames) < 1e-6);
}

TEST_CASE("resample_time: identity, constants, and the linear-ramp closed form") {
  Rng rng(17);
  const FaceSequence s = random_face(7, rng);
  const auto same = resample_time(s.frames, 7);
  CHECK(same.data == s.frames.data);

  Tensor<double> constant = Tensor<double>::full({5, 3, 2}, 1.25);
  const auto c19 = resample_time(constant, 19);
  CHECK(c19.dim(0) == 19);
  for (double v : c19.data) CHECK(v == doctest::Approx(1.25));

  // one point, one coordinate ramping 0..9 over 10 frames -> k/18 * 9
  Tensor<double> ramp({10, 1, 1});
  for (int f = 0; f < 10; ++f) ramp.at(f, 0, 0) = double(f);
  const auto r = resample_time(ramp, 19);
  for (int k = 0; k < 19; ++k)
    CHECK(r.at(k, 0, 0) == doctest::Approx(double(k) / 18.0 * 9.0).epsilon(1e-12));
  CHECK(r.at(0, 0, 0) == 0.0);
  CHECK(r.at(18, 0, 0) == 9.0);
}

TEST_CASE("face_to_grid: shape, zero input, and identity-size resize") {
  Rng rng(23);
  FaceSequence s = random_face(256, rng);
  const auto grid = face_to_grid(s, 128, 128);
  CHECK(grid.dim(0) == 128);
  CHECK(grid.dim(1) == 128);
  double mean = 0, var = 0;
  for (double v : grid.data) {
    CHECK(std::isfinite(v));
    mean += v;
  }
  mean /= double(grid.numel());
  for (double v : grid.data) var += (v - mean) * (v - mean);
  var /= double(grid.numel());
  CHECK(std::abs(mean) <= 1e-5);
  CHECK(std::abs(var - 1.0) <= 1e-3);

  FaceSequence zero{Tensor<double>::zeros({256, kFacePoints, 2}), 30.0};
  const auto zgrid = face_to_grid(zero, 128, 128);
  for (double v : zgrid.data) CHECK(v == 0.0);

  const auto ident = face_to_grid(s, 256, 956);
  // flatten by hand and standardize with the same helper
  Tensor<double> stack({256, 956});
  for (int64_t f = 0; f < 256; ++f)
    for (int p = 0; p < kFacePoints; ++p) {
      stack.at(f, 2 * p) = s.frames.at(f, p, 0);
      stack.at(f, 2 * p + 1) = s.frames.at(f, p, 1);
    }
  const auto expect = audio::standardize(stack);
  CHECK(max_abs_diff(ident, expect) == 0.0);

  FaceSequence short_seq = random_face(100, rng);
  CHECK_THROWS_AS(face_to_grid(short_seq, 128, 128), ContractError);
}

TEST_CASE("LMK1 container round trip and malformed inputs") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dfast_lmk_test";
  fs::create_directories(dir);
  Rng rng(29);
  Tensor<double> t({5, 4, 3});
  for (auto& v : t.data) v = double(float(rng.uniform(-2, 2)));  // f32-exact values
  const fs::path p = dir / "seq.lmk";
  write_lmk1(p, t);
  const auto r = read_lmk1(p);
  CHECK(r.shape == t.shape);
  CHECK(r.data == t.data);

  const fs::path trunc = dir / "trunc.lmk";
  {
    std::ifstream in(p, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    std::ofstream out(trunc, std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size() / 2));
  }
  CHECK_THROWS_AS(read_lmk1(trunc), FormatError);

  const fs::path badmagic = dir / "bad.lmk";
  {
    std::ofstream out(badmagic, std::ios::binary);
    out << "NOPE";
  }
  CHECK_THROWS_AS(read_lmk1(badmagic), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("CSV import validates the header and cell counts") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dfast_csv_test";
  fs::create_directories(dir);
  const fs::path p = dir / "pose.csv";
  {
    std::ofstream out(p);
    out << "p0_x,p0_y,p0_z,p1_x,p1_y,p1_z\n";
    out << "0.1,0.2,0.3,0.4,0.5,0.6\n";
    out << "1.1,1.2,1.3,1.4,1.5,1.6\n";
  }
  const auto t = read_landmarks_csv(p, 2, 3);
  CHECK(t.shape == Shape{2, 2, 3});
  CHECK(t.at(1, 1, 2) == doctest::Approx(1.6));

  const fs::path bad = dir / "bad.csv";
  {
    std::ofstream out(bad);
    out << "x0,y0\n0.1,0.2\n";
  }
  CHECK_THROWS_AS(read_landmarks_csv(bad, 2, 3), SchemaError);
  fs::remove_all(dir);
}
