#include "dfast/landmarks.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dfast/audio.hpp"
#include "dfast/error.hpp"

namespace dfast::landmarks {

namespace {

void check_shape(const Tensor<double>& frames, int points, int coords, const char* kind) {
  if (frames.rank() != 3)
    throw SchemaError(std::string(kind) + " sequence must be rank 3 (frames,points,coords), got " +
                      shape_str(frames.shape));
  if (frames.dim(1) != points || frames.dim(2) != coords)
    throw SchemaError(std::string(kind) + " sequence must be F x " + std::to_string(points) +
                      " x " + std::to_string(coords) + ", found F x " +
                      std::to_string(frames.dim(1)) + " x " + std::to_string(frames.dim(2)));
  if (frames.dim(0) < 2)
    throw SchemaError(std::string(kind) + " sequence needs at least 2 frames, found " +
                      std::to_string(frames.dim(0)));
}

Tensor<double> normalize_frames(const Tensor<double>& frames) {
  const int64_t f_n = frames.dim(0), p_n = frames.dim(1), c_n = frames.dim(2);
  Tensor<double> out = frames;
  for (int64_t f = 0; f < f_n; ++f) {
    std::vector<double> centroid(size_t(c_n), 0.0);
    for (int64_t p = 0; p < p_n; ++p)
      for (int64_t c = 0; c < c_n; ++c) centroid[size_t(c)] += frames.at(f, p, c);
    for (auto& v : centroid) v /= double(p_n);
    double sq = 0.0;
    for (int64_t p = 0; p < p_n; ++p)
      for (int64_t c = 0; c < c_n; ++c) {
        const double d = frames.at(f, p, c) - centroid[size_t(c)];
        sq += d * d;
      }
    const double rms = std::sqrt(sq / double(p_n));
    if (rms < 1e-12)
      throw NumericError("degenerate landmark frame " + std::to_string(f) +
                         ": all points coincide");
    const double inv = 1.0 / rms;
    for (int64_t p = 0; p < p_n; ++p)
      for (int64_t c = 0; c < c_n; ++c)
        out.at(f, p, c) = (frames.at(f, p, c) - centroid[size_t(c)]) * inv;
  }
  return out;
}

}  // namespace

const FaceSequence& validate(const FaceSequence& s) {
  check_shape(s.frames, kFacePoints, kFaceCoords, "face");
  return s;
}

const PoseSequence& validate(const PoseSequence& s) {
  check_shape(s.frames, kPosePoints, kPoseCoords, "pose");
  return s;
}

FaceSequence normalize_face(const FaceSequence& s) {
  validate(s);
  return {normalize_frames(s.frames), s.fps};
}

PoseSequence normalize_pose(const PoseSequence& s) {
  validate(s);
  return {normalize_frames(s.frames), s.fps};
}

Tensor<double> resample_time(const Tensor<double>& frames, int64_t target_frames) {
  if (frames.rank() != 3) throw ContractError("resample_time expects rank 3 input");
  const int64_t f_n = frames.dim(0), p_n = frames.dim(1), c_n = frames.dim(2);
  if (f_n < 2 || target_frames < 2)
    throw ContractError("resample_time: need at least 2 frames on both sides");
  if (f_n == target_frames) return frames;
  Tensor<double> out({target_frames, p_n, c_n});
  for (int64_t t = 0; t < target_frames; ++t) {
    const double pos = double(t) * double(f_n - 1) / double(target_frames - 1);
    const int64_t i0 = std::min<int64_t>(int64_t(pos), f_n - 2);
    const double frac = pos - double(i0);
    for (int64_t p = 0; p < p_n; ++p)
      for (int64_t c = 0; c < c_n; ++c)
        out.at(t, p, c) =
            (1.0 - frac) * frames.at(i0, p, c) + frac * frames.at(i0 + 1, p, c);
  }
  // endpoints are exact by construction of the grid
  for (int64_t p = 0; p < p_n; ++p)
    for (int64_t c = 0; c < c_n; ++c) {
      out.at(0, p, c) = frames.at(0, p, c);
      out.at(target_frames - 1, p, c) = frames.at(f_n - 1, p, c);
    }
  return out;
}

FaceSequence resample_time(const FaceSequence& s, int64_t target_frames) {
  return {resample_time(s.frames, target_frames), s.fps};
}

PoseSequence resample_time(const PoseSequence& s, int64_t target_frames) {
  return {resample_time(s.frames, target_frames), s.fps};
}

Tensor<double> bilinear_resize(const Tensor<double>& src, int64_t h, int64_t w) {
  if (src.rank() != 2) throw ContractError("bilinear_resize expects a matrix");
  const int64_t h0 = src.dim(0), w0 = src.dim(1);
  if (h < 1 || w < 1) throw ContractError("bilinear_resize: target dims must be positive");
  if (h == h0 && w == w0) return src;
  Tensor<double> out({h, w});
  for (int64_t i = 0; i < h; ++i) {
    const double sy = (h == 1) ? 0.0 : double(i) * double(h0 - 1) / double(h - 1);
    const int64_t y0 = std::min<int64_t>(int64_t(sy), h0 - 1);
    const int64_t y1 = std::min<int64_t>(y0 + 1, h0 - 1);
    const double fy = sy - double(y0);
    for (int64_t j = 0; j < w; ++j) {
      const double sx = (w == 1) ? 0.0 : double(j) * double(w0 - 1) / double(w - 1);
      const int64_t x0 = std::min<int64_t>(int64_t(sx), w0 - 1);
      const int64_t x1 = std::min<int64_t>(x0 + 1, w0 - 1);
      const double fx = sx - double(x0);
      out.at(i, j) = (1 - fy) * ((1 - fx) * src.at(y0, x0) + fx * src.at(y0, x1)) +
                     fy * ((1 - fx) * src.at(y1, x0) + fx * src.at(y1, x1));
    }
  }
  return out;
}

Tensor<double> face_to_grid(const FaceSequence& s, int64_t h, int64_t w) {
  validate(s);
  const int64_t f_n = s.frames.dim(0);
  if (f_n != 256)
    throw ContractError("face_to_grid expects a 256-frame sequence, got " +
                        std::to_string(f_n) + " (resample_time first)");
  Tensor<double> stack({f_n, int64_t(kFacePoints) * 2});
  for (int64_t f = 0; f < f_n; ++f)
    for (int64_t p = 0; p < kFacePoints; ++p) {
      stack.at(f, 2 * p) = s.frames.at(f, p, 0);
      stack.at(f, 2 * p + 1) = s.frames.at(f, p, 1);
    }
  return audio::standardize(bilinear_resize(stack, h, w));
}

void write_lmk1(const std::filesystem::path& path, const Tensor<double>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot create LMK1 file: " + path.string());
  out.write("LMK1", 4);
  const uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const uint8_t rank = uint8_t(t.rank());
  out.write(reinterpret_cast<const char*>(&rank), 1);
  for (int i = 0; i < t.rank(); ++i) {
    const uint32_t d = uint32_t(t.dim(i));
    out.write(reinterpret_cast<const char*>(&d), 4);
  }
  std::vector<float> payload(t.data.begin(), t.data.end());
  out.write(reinterpret_cast<const char*>(payload.data()),
            std::streamsize(payload.size() * sizeof(float)));
  if (!out) throw FormatError("failed writing LMK1 file: " + path.string());
}

Tensor<double> read_lmk1(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open LMK1 file: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::strncmp(magic, "LMK1", 4) != 0)
    throw FormatError("bad LMK1 magic in " + path.string());
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (!in || version != 1)
    throw FormatError("unsupported LMK1 version " + std::to_string(version) + " in " +
                      path.string());
  uint8_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), 1);
  if (!in || rank == 0 || rank > 8) throw FormatError("bad LMK1 rank in " + path.string());
  Shape shape(rank);
  for (auto& d : shape) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in || v == 0) throw FormatError("bad LMK1 dims in " + path.string());
    d = int64_t(v);
  }
  const int64_t n = numel_of(shape);
  std::vector<float> payload(static_cast<size_t>(n), 0.0f);
  in.read(reinterpret_cast<char*>(payload.data()), std::streamsize(n * sizeof(float)));
  if (in.gcount() != std::streamsize(n * sizeof(float)))
    throw FormatError("truncated LMK1 payload in " + path.string());
  Tensor<double> t;
  t.shape = shape;
  t.data.assign(payload.begin(), payload.end());
  return t;
}

Tensor<double> read_landmarks_csv(const std::filesystem::path& path, int points, int coords) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open CSV file: " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw SchemaError("empty CSV file: " + path.string());

  const char* axes = "xyz";
  std::ostringstream expect;
  for (int p = 0; p < points; ++p)
    for (int c = 0; c < coords; ++c) expect << (p || c ? "," : "") << "p" << p << "_" << axes[c];
  if (!header.empty() && header.back() == '\r') header.pop_back();
  if (header != expect.str())
    throw SchemaError("CSV header does not match the p<i>_<axis> layout for " +
                      std::to_string(points) + " points x " + std::to_string(coords) +
                      " coords: " + path.string());

  std::vector<double> values;
  std::string line;
  int64_t rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    int64_t got = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++got;
    }
    if (got != int64_t(points) * coords)
      throw SchemaError("CSV row " + std::to_string(rows + 1) + " has " + std::to_string(got) +
                        " cells, expected " + std::to_string(points * coords));
    ++rows;
  }
  if (rows < 1) throw SchemaError("CSV has no data rows: " + path.string());
  Tensor<double> out({rows, int64_t(points), int64_t(coords)});
  std::copy(values.begin(), values.end(), out.data.begin());
  return out;
}

}  // namespace dfast::landmarks
