#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "kdseg/data.hpp"
#include "kdseg/trainer.hpp"

namespace kdseg {

// A run configuration is a JSON tree with sections "model", "data", "train"
// and "seeds". Resolution order: defaults, then a preset, then a config
// file, then --set overrides; later layers win.

struct Preset {
  std::string name;
  std::string description;
  nlohmann::json patch;
};

const std::vector<Preset>& presets();
const Preset& find_preset(const std::string& name);

/// Default tree with every field present.
nlohmann::json default_config();

struct Override {
  std::string path;  // dotted, e.g. "train.weights.pi"
  nlohmann::json value;
};

/// Parses "dotted.path=value". The value is read as JSON when it parses,
/// otherwise as a string. A bare key naming a "train" field is taken as
/// "train.<key>".
Override parse_override(std::string_view text);

/// Applies defaults, preset, file contents and overrides, then checks the
/// result against the schema. Throws ConfigError on unknown fields, type
/// mismatches, or the same path overridden with two different values.
nlohmann::json resolve_config(const std::optional<std::string>& preset, const nlohmann::json& file,
                              const std::vector<std::string>& overrides);

void set_path(nlohmann::json& tree, const std::string& dotted, const nlohmann::json& value);
const nlohmann::json* get_path(const nlohmann::json& tree, const std::string& dotted);

/// Typed view of a resolved tree.
struct RunConfig {
  nlohmann::json resolved;
  std::string student;
  std::optional<std::string> teacher;
  std::optional<std::string> teacher_weights;
  DatasetSpec data;
  std::optional<SyntheticSceneConfig> synthetic;
  TrainConfig train;
  std::vector<std::uint64_t> seeds;
};

/// Validates field values and builds the typed view. Relative paths are
/// resolved against `base_dir`.
RunConfig materialize(const nlohmann::json& resolved, const std::filesystem::path& base_dir = ".");

/// Fields that must be set before the configuration can run (e.g. eta and
/// data.root for the benchmark-dataset presets). Empty when runnable.
std::vector<std::string> missing_requirements(const RunConfig& rc);

/// Stable short hash of a resolved tree, used in run-directory names.
std::string config_hash(const nlohmann::json& resolved);

/// Directory holding shipped fixtures (remap tables, toy teacher).
std::filesystem::path data_dir();

}  // namespace kdseg
