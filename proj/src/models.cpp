#include "kdseg/models.hpp"

#include <algorithm>
#include <array>
#include <cstring>

#include "kdseg/checkpoint.hpp"
#include "kdseg/kernels.hpp"
#include "kdseg/util.hpp"

namespace kdseg {
namespace {

using nn::Conv2d;
using Relu = nn::LeakyRelu<float>;

constexpr ConvGeometry k3s1{3, 1, 1, 1};
constexpr ConvGeometry k3s2{3, 2, 1, 1};
constexpr ConvGeometry k1{1, 1, 0, 1};

ConvGeometry dilated(std::size_t d) { return {3, 1, d, d}; }

void add_into(Tensorf& dst, const Tensorf& src) {
  require_same_shape(dst, src, "tap gradient");
  float* d = dst.data();
  const float* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

void add_tap_grad(Tensorf& grad, const std::map<std::string, Tensorf>& dtaps, const std::string& name) {
  if (auto it = dtaps.find(name); it != dtaps.end()) add_into(grad, it->second);
}

// Conv (no bias), batch norm, ReLU.
struct ConvBnRelu {
  Conv2d<float> conv;
  nn::BatchNorm2d<float> bn;
  Relu act;

  void init(const std::string& name, std::size_t in, std::size_t out, ConvGeometry g) {
    conv = Conv2d<float>(name, in, out, g, false);
    bn = nn::BatchNorm2d<float>(name + ".bn", out);
  }
  Tensorf forward(const Tensorf& x, bool training) {
    return act.forward(bn.forward(conv.forward(x, training), training), training);
  }
  Tensorf backward(const Tensorf& d, bool input_grad = true) {
    return conv.backward(bn.backward(act.backward(d)), true, input_grad);
  }
  void collect(nn::ParamRefs<float>& out) {
    conv.collect(out);
    bn.collect(out);
  }
};

/// Three conv blocks (output stride 4) and a 1x1 classifier; ~28k parameters.
class ToyStudent final : public SegmentationModel {
 public:
  ToyStudent(std::size_t classes, std::uint64_t seed) : classes_(classes) {
    b1_.init("block1", 3, 16, k3s1);
    b2_.init("block2", 16, 32, k3s2);
    b3_.init("block3", 32, 80, k3s2);
    cls_ = Conv2d<float>("classifier", 80, classes, k1);
    std::mt19937_64 rng(seed);
    for (auto* c : {&b1_.conv, &b2_.conv, &b3_.conv, &cls_}) c->init_he(rng);
  }

  const std::string& name() const noexcept override { return name_; }
  std::size_t class_count() const noexcept override { return classes_; }
  std::vector<std::string> tap_names() const override { return {"block1", "block2", "backbone"}; }
  std::string default_tap() const override { return "backbone"; }
  std::size_t input_multiple() const noexcept override { return 4; }

  ForwardResult forward(const Tensorf& images, const std::vector<std::string>& taps, bool training) override {
    check_input(images);
    check_taps(taps);
    in_h_ = images.h();
    in_w_ = images.w();
    std::map<std::string, Tensorf> all;
    Tensorf x = b1_.forward(images, training);
    all["block1"] = x;
    x = b2_.forward(x, training);
    all["block2"] = x;
    x = b3_.forward(x, training);
    all["backbone"] = x;
    Tensorf small = cls_.forward(x, training);
    small_h_ = small.h();
    small_w_ = small.w();
    ForwardResult out{LogitMap(kernels::resize_bilinear(small, in_h_, in_w_)), {}};
    for (const auto& t : taps) out.taps.emplace(t, FeatureMap(std::move(all[t]), t));
    return out;
  }

  void backward(const Tensorf& dlogits, const std::map<std::string, Tensorf>& dtaps) override {
    Tensorf d = kernels::resize_bilinear_backward(dlogits, small_h_, small_w_);
    d = cls_.backward(d);
    add_tap_grad(d, dtaps, "backbone");
    d = b3_.backward(d);
    add_tap_grad(d, dtaps, "block2");
    d = b2_.backward(d);
    add_tap_grad(d, dtaps, "block1");
    b1_.backward(d, /*input_grad=*/false);
  }

  nn::ParamRefs<float> parameters() override {
    nn::ParamRefs<float> out;
    for (auto* b : {&b1_, &b2_, &b3_}) b->collect(out);
    cls_.collect(out);
    return out;
  }

  nn::ParamRefs<float> buffers() override {
    nn::ParamRefs<float> out;
    for (auto* b : {&b1_, &b2_, &b3_}) b->bn.collect_buffers(out);
    return out;
  }

 private:
  std::string name_ = "toy_student";
  std::size_t classes_;
  ConvBnRelu b1_, b2_, b3_;
  Conv2d<float> cls_;
  std::size_t in_h_ = 0, in_w_ = 0, small_h_ = 0, small_w_ = 0;
};

/// Six conv blocks (output stride 4, dilated tail), a pyramid-pooling context
/// block over bins {1, 2, 4}, a 3x3 fusion head and a 1x1 classifier, plus a
/// full-resolution refinement of the upsampled logits from block1 features;
/// ~300k parameters.
class ToyTeacher final : public SegmentationModel {
 public:
  static constexpr std::array<std::size_t, 3> kBins{1, 2, 4};
  static constexpr std::size_t kBranchWidth = 24;
  static constexpr std::size_t kRefineWidth = 32;

  ToyTeacher(std::size_t classes, std::uint64_t seed) : classes_(classes) {
    blocks_[0].init("block1", 3, 16, k3s1);
    blocks_[1].init("block2", 16, 32, k3s2);
    blocks_[2].init("block3", 32, 64, k3s1);
    blocks_[3].init("block4", 64, 64, k3s2);
    blocks_[4].init("block5", 64, 96, dilated(2));
    blocks_[5].init("block6", 96, 96, dilated(4));
    for (std::size_t i = 0; i < kBins.size(); ++i) {
      branches_[i].init("context.bin" + std::to_string(kBins[i]), 96, kBranchWidth, k1);
    }
    head_.init("head", 96 + kBins.size() * kBranchWidth, 64, k3s1);
    cls_ = Conv2d<float>("classifier", 64, classes, k1);
    refine_.init("refine", 16 + classes, kRefineWidth, k3s1);
    refine_cls_ = Conv2d<float>("refine.classifier", kRefineWidth, classes, k1);
    std::mt19937_64 rng(seed);
    for (auto& b : blocks_) b.conv.init_he(rng);
    for (auto& b : branches_) b.conv.init_he(rng);
    head_.conv.init_he(rng);
    cls_.init_he(rng);
    refine_.conv.init_he(rng);
    refine_cls_.init_zero();
  }

  const std::string& name() const noexcept override { return name_; }
  std::size_t class_count() const noexcept override { return classes_; }
  std::vector<std::string> tap_names() const override { return {"block2", "block4", "backbone", "context"}; }
  std::string default_tap() const override { return "backbone"; }
  std::size_t input_multiple() const noexcept override { return 4; }

  ForwardResult forward(const Tensorf& images, const std::vector<std::string>& taps, bool training) override {
    check_input(images);
    check_taps(taps);
    in_h_ = images.h();
    in_w_ = images.w();
    std::map<std::string, Tensorf> all;
    Tensorf x = images;
    Tensorf skip;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      x = blocks_[i].forward(x, training);
      if (i == 0) skip = x;
      if (i == 1) all["block2"] = x;
      if (i == 3) all["block4"] = x;
    }
    feat_h_ = x.h();
    feat_w_ = x.w();
    std::array<Tensorf, kBins.size()> pyramid;
    std::vector<const Tensorf*> parts{&x};
    for (std::size_t i = 0; i < kBins.size(); ++i) {
      Tensorf pooled = kernels::adaptive_avg_pool(x, kBins[i], kBins[i]);
      pyramid[i] = kernels::resize_bilinear(branches_[i].forward(pooled, training), feat_h_, feat_w_);
      parts.push_back(&pyramid[i]);
    }
    Tensorf context = nn::concat_channels(parts);
    all["backbone"] = std::move(x);
    Tensorf small = cls_.forward(head_.forward(context, training), training);
    all["context"] = std::move(context);
    Tensorf coarse = kernels::resize_bilinear(small, in_h_, in_w_);
    Tensorf residual = refine_cls_.forward(refine_.forward(nn::concat_channels<float>({&skip, &coarse}), training), training);
    add_into(coarse, residual);
    ForwardResult out{LogitMap(std::move(coarse)), {}};
    for (const auto& t : taps) out.taps.emplace(t, FeatureMap(std::move(all[t]), t));
    return out;
  }

  void backward(const Tensorf& dlogits, const std::map<std::string, Tensorf>& dtaps) override {
    auto refined = nn::split_channels<float>(refine_.backward(refine_cls_.backward(dlogits)), {16, classes_});
    Tensorf dskip = std::move(refined[0]);
    add_into(refined[1], dlogits);
    Tensorf d = kernels::resize_bilinear_backward(refined[1], feat_h_, feat_w_);
    d = head_.backward(cls_.backward(d));
    add_tap_grad(d, dtaps, "context");
    std::vector<std::size_t> widths{blocks_.back().conv.out_channels()};
    for (std::size_t i = 0; i < kBins.size(); ++i) widths.push_back(kBranchWidth);
    auto parts = nn::split_channels(d, widths);
    Tensorf dfeat = std::move(parts[0]);
    for (std::size_t i = 0; i < kBins.size(); ++i) {
      Tensorf db = kernels::resize_bilinear_backward(parts[i + 1], kBins[i], kBins[i]);
      add_into(dfeat, kernels::adaptive_avg_pool_backward(branches_[i].backward(db), feat_h_, feat_w_));
    }
    add_tap_grad(dfeat, dtaps, "backbone");
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      if (i == 3) add_tap_grad(dfeat, dtaps, "block4");
      if (i == 1) add_tap_grad(dfeat, dtaps, "block2");
      if (i == 0) add_into(dfeat, dskip);
      dfeat = blocks_[i].backward(dfeat, /*input_grad=*/i > 0);
    }
  }

  nn::ParamRefs<float> parameters() override {
    nn::ParamRefs<float> out;
    for (auto& b : blocks_) b.collect(out);
    for (auto& b : branches_) b.collect(out);
    head_.collect(out);
    cls_.collect(out);
    refine_.collect(out);
    refine_cls_.collect(out);
    return out;
  }

  nn::ParamRefs<float> buffers() override {
    nn::ParamRefs<float> out;
    for (auto& b : blocks_) b.bn.collect_buffers(out);
    for (auto& b : branches_) b.bn.collect_buffers(out);
    head_.bn.collect_buffers(out);
    refine_.bn.collect_buffers(out);
    return out;
  }

 private:
  std::string name_ = "toy_teacher";
  std::size_t classes_;
  std::array<ConvBnRelu, 6> blocks_;
  std::array<ConvBnRelu, kBins.size()> branches_;
  ConvBnRelu head_;
  Conv2d<float> cls_;
  ConvBnRelu refine_;
  Conv2d<float> refine_cls_;
  std::size_t in_h_ = 0, in_w_ = 0, feat_h_ = 0, feat_w_ = 0;
};

std::unique_ptr<SegmentationModel> make_bundled(const std::string& name, std::size_t classes,
                                                std::uint64_t seed) {
  if (name == "toy_student") return std::make_unique<ToyStudent>(classes, seed);
  if (name == "toy_teacher") return std::make_unique<ToyTeacher>(classes, seed);
  return nullptr;
}

}  // namespace

nn::ParamRefs<float> SegmentationModel::state() {
  nn::ParamRefs<float> out = parameters();
  for (auto* b : buffers()) out.push_back(b);
  return out;
}

void SegmentationModel::check_input(const Tensorf& images) const {
  const std::size_t m = input_multiple();
  if (images.c() != 3 || images.n() == 0 || images.h() == 0 || images.w() == 0 || images.h() % m != 0 ||
      images.w() % m != 0) {
    throw ShapeError(name() + ": incompatible input size " + shape_string(images.shape()) +
                     " (expected (B,3,H,W) with H, W multiples of " + std::to_string(m) + ")");
  }
}

void SegmentationModel::check_taps(const std::vector<std::string>& taps) const {
  const auto known = tap_names();
  for (const auto& t : taps) {
    if (std::find(known.begin(), known.end(), t) == known.end()) {
      throw UnknownTapError(name() + ": unknown feature tap '" + t + "'");
    }
  }
}

const std::vector<RegistryEntry>& model_registry() {
  static const std::vector<RegistryEntry> entries{
      {"toy_student", "3 conv blocks, output stride 4, ~28k parameters", true},
      {"toy_teacher", "6 conv blocks + pyramid pooling context, ~300k parameters", true},
      {"pspnet_resnet18", "PSPNet, ResNet18 backbone (external weights)", false},
      {"pspnet_effnet_b0", "PSPNet, EfficientNet-B0 backbone (external weights)", false},
      {"pspnet_resnet101", "PSPNet, ResNet101 backbone (external weights)", false},
  };
  return entries;
}

std::unique_ptr<SegmentationModel> build_model(const ModelSpec& spec, const InitPolicy& init) {
  const auto& reg = model_registry();
  auto it = std::find_if(reg.begin(), reg.end(), [&](const RegistryEntry& e) { return e.name == spec.name; });
  if (it == reg.end()) throw UnknownModelError("unknown model '" + spec.name + "'");
  if (!it->bundled) {
    throw UnknownModelError("model '" + spec.name +
                            "' is registered for external backbones and has no bundled implementation");
  }
  if (spec.class_count < 2) throw ValidationError("model class_count must be >= 2");

  if (init.mode == InitPolicy::Mode::random) return make_bundled(spec.name, spec.class_count, init.seed);

  if (!init.weight_source) throw IoError("pretrained init requires a weight source");
  const Checkpoint ckpt = load_checkpoint(*init.weight_source);
  if (ckpt.model != spec.name) {
    throw IoError("checkpoint " + *init.weight_source + " holds model '" + ckpt.model + "', expected '" +
                  spec.name + "'");
  }
  if (ckpt.class_count != spec.class_count) {
    throw IoError("checkpoint class_count " + std::to_string(ckpt.class_count) + " does not match " +
                  std::to_string(spec.class_count));
  }
  auto model = make_bundled(spec.name, spec.class_count, 0);
  restore_parameters(ckpt, model->state(), "model");
  return model;
}

FeatureAdapter::FeatureAdapter(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed)
    : conv_("adapter", in_channels, out_channels, k1, false) {
  std::mt19937_64 rng(seed);
  conv_.init_he(rng);
}

FeatureMap FeatureAdapter::forward(const FeatureMap& student) {
  return FeatureMap(conv_.forward(student.values()), student.source_layer());
}

Tensorf FeatureAdapter::backward(const Tensorf& dout) { return conv_.backward(dout); }

nn::ParamRefs<float> FeatureAdapter::parameters() {
  nn::ParamRefs<float> out;
  conv_.collect(out);
  return out;
}

std::uint64_t parameter_hash(SegmentationModel& model) {
  std::uint64_t h = kFnvOffset;
  for (const auto* p : model.state()) {
    h = fnv1a(p->name, h);
    h = fnv1a(p->value.data(), p->value.size() * sizeof(float), h);
  }
  return h;
}

}  // namespace kdseg
