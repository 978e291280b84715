#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kdseg/datamodel.hpp"

namespace kdseg {

enum class DatasetLayout {
  /// images/<split>/<stem>.png paired with labels/<split>/<stem>.png
  standard,
  /// leftImg8bit/<split>/<city>/<stem>_leftImg8bit.png paired with
  /// gtFine/<split>/<city>/<stem>_gtFine_labelIds.png
  cityscapes,
};

/// Raw label id -> train id table. Ids not listed are errors.
class LabelRemap {
 public:
  /// Parses "raw train" pairs, one per line; '#' starts a comment.
  static LabelRemap load(const std::filesystem::path& path);

  void set(int raw, std::int32_t train_id);
  std::optional<std::int32_t> lookup(int raw) const;
  std::size_t size() const noexcept;

 private:
  std::array<std::optional<std::int32_t>, 256> table_{};
};

struct DatasetSpec {
  std::filesystem::path root;
  std::size_t class_count = 0;
  std::int32_t ignore_id = kDefaultIgnoreId;
  DatasetLayout layout = DatasetLayout::standard;
  std::optional<std::filesystem::path> remap_table;
  std::size_t crop_size = 64;
  std::array<float, 3> mean{123.675f, 116.28f, 103.53f};
  std::array<float, 3> stddev{58.395f, 57.12f, 57.375f};
  std::map<std::string, std::size_t> split_sizes;

  void validate() const;
};

/// Reads <root>/manifest.json written by generate_synthetic (or by hand).
DatasetSpec read_manifest(const std::filesystem::path& root);

struct Sample {
  std::string id;
  Tensorf image;  // (1, 3, H, W), raw 0..255 intensities
  LabelMap label;  // (1, H, W), remapped to [0, C) or ignore_id
};

struct SampleRef {
  std::string id;
  std::filesystem::path image;
  std::filesystem::path label;
};

/// One split of a dataset; samples are ordered by id and loaded on demand.
/// `load` is const and safe to call from several workers at once.
class Split {
 public:
  Split(DatasetSpec spec, std::string name, std::vector<SampleRef> refs,
        std::optional<LabelRemap> remap);

  const std::string& name() const noexcept { return name_; }
  const DatasetSpec& spec() const noexcept { return spec_; }
  std::size_t size() const noexcept { return refs_.size(); }
  bool empty() const noexcept { return refs_.empty(); }
  const SampleRef& ref(std::size_t i) const { return refs_.at(i); }
  Sample load(std::size_t i) const;

 private:
  DatasetSpec spec_;
  std::string name_;
  std::vector<SampleRef> refs_;
  std::optional<LabelRemap> remap_;
};

/// Resolves image/label pairs for `split`. Throws PairingError naming the
/// first image without a label.
Split load_split(const DatasetSpec& spec, const std::string& split);

/// Keeps every loaded sample in memory; for desk-scale datasets.
class CachedSplit {
 public:
  explicit CachedSplit(const Split& split);
  std::size_t size() const noexcept { return samples_.size(); }
  const Sample& operator[](std::size_t i) const { return samples_.at(i); }
  const DatasetSpec& spec() const noexcept { return spec_; }

 private:
  DatasetSpec spec_;
  std::vector<Sample> samples_;
};

/// Yields batches of sample indices from a stream of per-epoch shuffles;
/// every sample appears exactly once per epoch. A batch may straddle two
/// epochs.
class EpochSampler {
 public:
  EpochSampler(std::size_t sample_count, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  void reshuffle();

  std::size_t count_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

/// Derives an independent 64-bit seed from a base seed and a tuple of ids.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts);

struct AugmentConfig {
  std::size_t crop_size = 64;
  double scale_min = 0.5;
  double scale_max = 2.0;
  double flip_prob = 0.5;
  std::array<float, 3> pad_value{123.675f, 116.28f, 103.53f};
};

/// Random scale (bilinear image / nearest label), horizontal flip and crop,
/// identical for image and label. Regions outside the source are padded with
/// pad_value (image) and ignore_id (label). Pure function of its inputs.
std::pair<Tensorf, LabelMap> augment(const Tensorf& image, const LabelMap& label, const AugmentConfig& cfg,
                                     std::uint64_t seed);

/// (x - mean) / std per channel.
Tensorf normalize(const Tensorf& image, const std::array<float, 3>& mean, const std::array<float, 3>& stddev);

/// Stacks same-sized (1, ...) samples into a batch.
Tensorf stack_images(const std::vector<Tensorf>& images);
LabelMap stack_labels(const std::vector<LabelMap>& labels);

struct SyntheticSceneConfig {
  std::size_t image_size = 64;
  std::size_t class_count = 4;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  std::size_t train_count = 200;
  std::size_t val_count = 50;
  /// Probability that a shape takes a random colour instead of its class
  /// colour, which forces the model to use shape rather than colour alone.
  double random_color_prob = 0.0;
  std::uint64_t seed = 0;
};

/// Writes images/, labels/ and manifest.json under `root` in the standard
/// layout. Deterministic: identical config gives byte-identical files.
DatasetSpec generate_synthetic(const SyntheticSceneConfig& cfg, const std::filesystem::path& root);

/// Renders one synthetic sample without touching the filesystem.
Sample render_synthetic(const SyntheticSceneConfig& cfg, const std::string& split, std::size_t index);

}  // namespace kdseg
