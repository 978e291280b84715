#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "kdseg/nn.hpp"

namespace kdseg {

// Checkpoint container (little-endian):
//   bytes 0..7   magic "KDSEGCK1"
//   bytes 8..15  uint64 length L of the JSON header
//   L bytes      UTF-8 JSON header
//   remainder    raw float32 payload
// The header holds "format_version", "model", "class_count", "meta" and a
// "tensors" array of {"name", "group", "shape" [4], "offset", "count"}, with
// offsets counted in floats from the start of the payload.

struct NamedArray {
  std::string name;
  std::string group;  // "model", "adapter", "discriminator"
  Tensorf value;
};

struct Checkpoint {
  std::string model;
  std::size_t class_count = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> tensors;

  const NamedArray* find(const std::string& name) const;
};

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies parameter values into a checkpoint under `group`.
void append_parameters(Checkpoint& ckpt, const nn::ParamRefs<float>& params, const std::string& group);

/// Loads every parameter in `params` from `ckpt` (group-filtered); throws
/// IoError on a missing name or shape mismatch.
void restore_parameters(const Checkpoint& ckpt, const nn::ParamRefs<float>& params, const std::string& group);

}  // namespace kdseg
