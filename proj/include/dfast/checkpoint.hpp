#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dfast/params.hpp"
#include "dfast/tensor.hpp"

namespace dfast {

// Checkpoint container: magic "DFST", u32 version, u32 tensor count; per
// tensor u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 rank,
// u32 dims[rank], little-endian f32 payload.
constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParameterSet<float>& ps, const std::filesystem::path& path);

// Reads the whole file (validating structure) and returns tensors in file
// order. Truncated or malformed files raise FormatError without partial data.
std::vector<std::pair<std::string, Tensor<float>>> load_checkpoint(
    const std::filesystem::path& path);

// Loads a checkpoint into an existing parameter set. Every model parameter
// must be present with a matching shape and no extra tensors may remain;
// violations raise an error naming the tensor.
void load_checkpoint_into(ParameterSet<float>& ps, const std::filesystem::path& path);

}  // namespace dfast
