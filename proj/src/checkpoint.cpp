#include "dfast/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>

#include "dfast/error.hpp"

namespace dfast {

namespace {

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(uint64_t(v) >> (8 * i));
  out.write(reinterpret_cast<char*>(b), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char b[sizeof(T)];
  in.read(reinterpret_cast<char*>(b), sizeof(T));
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= uint64_t(b[i]) << (8 * i);
  return T(v);
}

}  // namespace

void save_checkpoint(const ParameterSet<float>& ps, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot create checkpoint: " + path.string());
  out.write("DFST", 4);
  write_le<uint32_t>(out, kCheckpointVersion);
  write_le<uint32_t>(out, uint32_t(ps.names().size()));
  for (const auto& name : ps.names()) {
    const Tensor<float>& t = ps.get(name).value();
    write_le<uint16_t>(out, uint16_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    out.put(char(0));  // dtype f32
    out.put(char(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_le<uint32_t>(out, uint32_t(t.dim(i)));
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(t.data.data()),
              std::streamsize(t.data.size() * 4));
  }
  if (!out) throw FormatError("failed writing checkpoint: " + path.string());
}

std::vector<std::pair<std::string, Tensor<float>>> load_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::strncmp(magic, "DFST", 4) != 0)
    throw FormatError("bad checkpoint magic in " + path.string());
  const uint32_t version = read_le<uint32_t>(in);
  if (!in || version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " +
                      path.string());
  const uint32_t count = read_le<uint32_t>(in);
  if (!in) throw FormatError("truncated checkpoint header in " + path.string());

  std::vector<std::pair<std::string, Tensor<float>>> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = read_le<uint16_t>(in);
    if (!in) throw FormatError("truncated checkpoint at tensor " + std::to_string(i));
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const int dtype = in.get();
    const int rank = in.get();
    if (!in || dtype != 0 || rank <= 0 || rank > 8)
      throw FormatError("malformed tensor record '" + name + "' in " + path.string());
    Shape shape(static_cast<size_t>(rank), 0);
    for (auto& d : shape) {
      d = int64_t(read_le<uint32_t>(in));
      if (!in || d <= 0) throw FormatError("malformed dims for tensor '" + name + "'");
    }
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.data.size() * 4));
    if (in.gcount() != std::streamsize(t.data.size() * 4))
      throw FormatError("truncated payload for tensor '" + name + "' in " + path.string());
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

void load_checkpoint_into(ParameterSet<float>& ps, const std::filesystem::path& path) {
  const auto tensors = load_checkpoint(path);
  std::set<std::string> seen;
  for (const auto& [name, t] : tensors) {
    if (!ps.has(name))
      throw DimensionError("checkpoint tensor '" + name +
                           "' has no matching parameter in this model configuration");
    if (ps.get(name).shape() != t.shape)
      throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape) +
                           " but the model expects " + shape_str(ps.get(name).shape()));
    seen.insert(name);
  }
  for (const auto& name : ps.names())
    if (!seen.count(name))
      throw DimensionError("model parameter '" + name + "' is missing from the checkpoint");
  for (auto& [name, t] : tensors) ps.get(name).mutable_value() = t;
}

}  // namespace dfast
