#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kdseg/datamodel.hpp"
#include "kdseg/nn.hpp"

namespace kdseg {

struct InitPolicy {
  enum class Mode { random, pretrained };
  Mode mode = Mode::random;
  std::optional<std::string> weight_source;
  std::uint64_t seed = 0;

  static InitPolicy random(std::uint64_t seed) { return {Mode::random, std::nullopt, seed}; }
  static InitPolicy pretrained(std::string path) { return {Mode::pretrained, std::move(path), 0}; }
};

struct ModelSpec {
  std::string name;
  std::size_t class_count = 0;
};

struct ForwardResult {
  LogitMap logits;
  std::map<std::string, FeatureMap> taps;
};

/// A dense-prediction network. Forward maps images (B,3,H,W) to logits at
/// input resolution plus any requested intermediate feature taps. In training
/// mode normalization layers use batch statistics and activations are kept
/// for backward; otherwise the model runs in inference mode. Backward
/// consumes the logit gradient and optional tap gradients and accumulates
/// parameter gradients.
class SegmentationModel {
 public:
  virtual ~SegmentationModel() = default;

  virtual const std::string& name() const noexcept = 0;
  virtual std::size_t class_count() const noexcept = 0;
  virtual std::vector<std::string> tap_names() const = 0;
  /// Name of the tap used for feature distillation by default.
  virtual std::string default_tap() const = 0;
  /// Required divisor of input height and width.
  virtual std::size_t input_multiple() const noexcept = 0;

  virtual ForwardResult forward(const Tensorf& images, const std::vector<std::string>& taps = {},
                                bool training = true) = 0;
  virtual void backward(const Tensorf& dlogits, const std::map<std::string, Tensorf>& dtaps = {}) = 0;

  virtual nn::ParamRefs<float> parameters() = 0;
  /// Non-trainable state saved with the model (normalization statistics).
  virtual nn::ParamRefs<float> buffers() { return {}; }
  /// parameters() followed by buffers().
  nn::ParamRefs<float> state();

  std::size_t parameter_count() { return nn::parameter_count(parameters()); }
  void zero_grad() { nn::zero_grads(parameters()); }

 protected:
  void check_input(const Tensorf& images) const;
  void check_taps(const std::vector<std::string>& taps) const;
};

struct RegistryEntry {
  std::string name;
  std::string description;
  bool bundled = true;
};

/// Registered model names. Entries with bundled == false are placeholders for
/// architectures whose weights (and implementation) come from outside this
/// repository.
const std::vector<RegistryEntry>& model_registry();

/// Builds a registered model. Random init is seeded by `init.seed`;
/// pretrained init loads a checkpoint written by save_checkpoint and verifies
/// model name, class count and every parameter shape.
std::unique_ptr<SegmentationModel> build_model(const ModelSpec& spec, const InitPolicy& init);

/// 1x1 convolution projecting student features onto the teacher channel
/// width for feature-level losses; trained jointly with the student.
class FeatureAdapter {
 public:
  FeatureAdapter(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed);
  FeatureMap forward(const FeatureMap& student);
  Tensorf backward(const Tensorf& dout);
  nn::ParamRefs<float> parameters();

 private:
  nn::Conv2d<float> conv_;
};

/// FNV-1a over parameter and buffer names and raw values; used to assert a frozen model
/// is bit-identical before and after training.
std::uint64_t parameter_hash(SegmentationModel& model);

}  // namespace kdseg
