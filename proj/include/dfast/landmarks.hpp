#pragma once

#include <filesystem>

#include "dfast/tensor.hpp"

namespace dfast::landmarks {

constexpr int kFacePoints = 478;
constexpr int kFaceCoords = 2;
constexpr int kPosePoints = 33;
constexpr int kPoseCoords = 3;

// Semantic indices shared with the synthetic generator (extraction-tool
// topology): mouth corners on the face mesh, wrists and nose on the skeleton.
constexpr int kLeftMouthCorner = 61;
constexpr int kRightMouthCorner = 291;
constexpr int kLeftWrist = 15;
constexpr int kRightWrist = 16;
constexpr int kNose = 0;

struct FaceSequence {
  Tensor<double> frames;  // (F, 478, 2), normalized image coordinates
  double fps = 30.0;
};

struct PoseSequence {
  Tensor<double> frames;  // (F, 33, 3)
  double fps = 30.0;
};

// Shape contract checks; the value passes through untouched.
const FaceSequence& validate(const FaceSequence& s);
const PoseSequence& validate(const PoseSequence& s);

// Per frame: translate the landmark centroid to the origin and scale the
// centroid-to-landmark RMS distance to one.
FaceSequence normalize_face(const FaceSequence& s);
PoseSequence normalize_pose(const PoseSequence& s);

// Per-coordinate linear interpolation onto a uniform grid over [0, F-1];
// the first and last frames are preserved exactly.
Tensor<double> resample_time(const Tensor<double>& frames, int64_t target_frames);
FaceSequence resample_time(const FaceSequence& s, int64_t target_frames);
PoseSequence resample_time(const PoseSequence& s, int64_t target_frames);

// Bilinear resize with corner-aligned sampling (identity at matching size).
Tensor<double> bilinear_resize(const Tensor<double>& src, int64_t h, int64_t w);

// Flattens a 256-frame face sequence into a 256 x 956 time-by-feature stack
// (478 interleaved x,y pairs in landmark-index order), resizes to h x w and
// standardizes to zero mean, unit variance.
Tensor<double> face_to_grid(const FaceSequence& s, int64_t h = 128, int64_t w = 128);

// LMK1 binary tensor container (little-endian):
// magic "LMK1", u32 version=1, u8 rank, u32 dims[rank], f32 payload row-major.
void write_lmk1(const std::filesystem::path& path, const Tensor<double>& t);
Tensor<double> read_lmk1(const std::filesystem::path& path);

// CSV import, one row per frame with header p0_x,p0_y[,p0_z],p1_x,...
Tensor<double> read_landmarks_csv(const std::filesystem::path& path, int points, int coords);

}  // namespace dfast::landmarks
