#include "kdseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "kdseg/image_io.hpp"
#include "kdseg/kernels.hpp"
#include "kdseg/util.hpp"

namespace kdseg {
namespace fs = std::filesystem;
namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<SampleRef> pair_standard(const DatasetSpec& spec, const std::string& split) {
  const fs::path image_dir = spec.root / "images" / split;
  const fs::path label_dir = spec.root / "labels" / split;
  if (!fs::is_directory(image_dir)) throw IoError("missing image directory " + image_dir.string());
  std::vector<SampleRef> refs;
  for (const auto& entry : fs::directory_iterator(image_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
    const std::string stem = entry.path().stem().string();
    const fs::path label = label_dir / (stem + ".png");
    if (!fs::is_regular_file(label)) {
      throw PairingError("no label for image " + entry.path().string() + " (expected " + label.string() + ")");
    }
    refs.push_back({stem, entry.path(), label});
  }
  return refs;
}

std::vector<SampleRef> pair_cityscapes(const DatasetSpec& spec, const std::string& split) {
  const std::string image_suffix = "_leftImg8bit.png";
  const std::string label_suffix = "_gtFine_labelIds.png";
  const fs::path image_dir = spec.root / "leftImg8bit" / split;
  const fs::path label_dir = spec.root / "gtFine" / split;
  if (!fs::is_directory(image_dir)) throw IoError("missing image directory " + image_dir.string());
  std::vector<SampleRef> refs;
  for (const auto& entry : fs::recursive_directory_iterator(image_dir)) {
    const std::string file = entry.path().filename().string();
    if (!entry.is_regular_file() || !ends_with(file, image_suffix)) continue;
    const std::string stem = file.substr(0, file.size() - image_suffix.size());
    const fs::path rel = fs::relative(entry.path().parent_path(), image_dir);
    const fs::path label = label_dir / rel / (stem + label_suffix);
    if (!fs::is_regular_file(label)) {
      throw PairingError("no label for image " + entry.path().string() + " (expected " + label.string() + ")");
    }
    refs.push_back({(rel / stem).generic_string(), entry.path(), label});
  }
  return refs;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32)};
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq full(words.begin(), words.end());
  std::array<std::uint32_t, 2> out{};
  full.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}


EpochSampler::EpochSampler(std::size_t sample_count, std::size_t batch_size, std::uint64_t seed)
    : count_(sample_count), batch_(batch_size), seed_(seed) {
  if (count_ == 0) throw EmptyBatchError("EpochSampler: empty split");
  if (batch_ == 0) throw ValidationError("EpochSampler: batch_size must be positive");
  reshuffle();
}

void EpochSampler::reshuffle() {
  order_.resize(count_);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed_, {epoch_}));
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

std::vector<std::size_t> EpochSampler::next() {
  std::vector<std::size_t> batch;
  batch.reserve(batch_);
  while (batch.size() < batch_) {
    if (cursor_ == count_) {
      ++epoch_;
      reshuffle();
    }
    batch.push_back(order_[cursor_++]);
  }
  return batch;
}

LabelRemap LabelRemap::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open remap table " + path.string());
  LabelRemap remap;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    int raw = 0;
    std::int32_t train = 0;
    if (!(ss >> raw)) continue;
    if (!(ss >> train)) throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 'raw train'");
    remap.set(raw, train);
  }
  return remap;
}

void LabelRemap::set(int raw, std::int32_t train_id) {
  if (raw < 0 || raw > 255) throw ValidationError("LabelRemap: raw id must be in [0, 255]");
  table_[static_cast<std::size_t>(raw)] = train_id;
}

std::optional<std::int32_t> LabelRemap::lookup(int raw) const {
  if (raw < 0 || raw > 255) return std::nullopt;
  return table_[static_cast<std::size_t>(raw)];
}

std::size_t LabelRemap::size() const noexcept {
  return static_cast<std::size_t>(std::count_if(table_.begin(), table_.end(), [](const auto& v) { return v.has_value(); }));
}

void DatasetSpec::validate() const {
  if (class_count < 2) throw ValidationError("dataset class_count must be >= 2");
  if (crop_size == 0) throw ValidationError("dataset crop_size must be positive");
  for (float s : stddev)
    if (!(s > 0)) throw ValidationError("dataset normalization std must be positive");
}

DatasetSpec read_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset manifest " + path.string());
  DatasetSpec spec;
  spec.root = root;
  try {
    const auto j = nlohmann::json::parse(in);
    spec.class_count = j.at("class_count").get<std::size_t>();
    spec.ignore_id = j.value("ignore_id", kDefaultIgnoreId);
    const std::string layout = j.value("layout", "standard");
    if (layout == "standard") spec.layout = DatasetLayout::standard;
    else if (layout == "cityscapes") spec.layout = DatasetLayout::cityscapes;
    else throw IoError("unknown dataset layout '" + layout + "'");
    if (j.contains("remap_table")) spec.remap_table = root / j.at("remap_table").get<std::string>();
    if (j.contains("crop_size")) spec.crop_size = j.at("crop_size").get<std::size_t>();
    if (j.contains("splits")) spec.split_sizes = j.at("splits").get<std::map<std::string, std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  spec.validate();
  return spec;
}

Split::Split(DatasetSpec spec, std::string name, std::vector<SampleRef> refs, std::optional<LabelRemap> remap)
    : spec_(std::move(spec)), name_(std::move(name)), refs_(std::move(refs)), remap_(std::move(remap)) {}

Sample Split::load(std::size_t i) const {
  const SampleRef& r = refs_.at(i);
  const Image8 rgb = read_png(r.image, 3);
  const Image8 gray = read_png(r.label, 1);
  if (rgb.width != gray.width || rgb.height != gray.height) {
    throw PairingError("label " + r.label.string() + " size differs from image " + r.image.string());
  }
  const std::size_t h = rgb.height, w = rgb.width;
  Tensorf image(1, 3, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) image(0, c, y, x) = rgb.pixels[(y * w + x) * 3 + c];

  std::vector<std::int32_t> ids(h * w);
  const auto classes = static_cast<std::int32_t>(spec_.class_count);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const int raw = gray.pixels[k];
    std::int32_t id = raw;
    if (remap_) {
      const auto mapped = remap_->lookup(raw);
      if (!mapped) throw LabelRangeError("label " + r.label.string() + " contains unmapped id " + std::to_string(raw));
      id = *mapped;
    }
    if (id != spec_.ignore_id && (id < 0 || id >= classes)) {
      throw LabelRangeError("label " + r.label.string() + " contains id " + std::to_string(id) + " outside [0," +
                            std::to_string(classes) + ")");
    }
    ids[k] = id;
  }
  return {r.id, std::move(image), LabelMap(1, h, w, std::move(ids), spec_.ignore_id)};
}

Split load_split(const DatasetSpec& spec, const std::string& split) {
  spec.validate();
  if (!fs::is_directory(spec.root)) throw IoError("dataset root " + spec.root.string() + " does not exist");
  std::vector<SampleRef> refs =
      spec.layout == DatasetLayout::cityscapes ? pair_cityscapes(spec, split) : pair_standard(spec, split);
  std::sort(refs.begin(), refs.end(), [](const SampleRef& a, const SampleRef& b) { return a.id < b.id; });
  std::optional<LabelRemap> remap;
  if (spec.remap_table) remap = LabelRemap::load(*spec.remap_table);
  return Split(spec, split, std::move(refs), std::move(remap));
}

CachedSplit::CachedSplit(const Split& split) : spec_(split.spec()) {
  std::vector<std::optional<Sample>> loaded(split.size());
  std::vector<std::exception_ptr> errors(split.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < split.size(); ++i) {
    try {
      loaded[i] = split.load(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  samples_.reserve(loaded.size());
  for (auto& s : loaded) samples_.push_back(std::move(*s));
}

std::pair<Tensorf, LabelMap> augment(const Tensorf& image, const LabelMap& label, const AugmentConfig& cfg,
                                     std::uint64_t seed) {
  if (image.n() != 1 || label.batch() != 1 || image.h() != label.height() || image.w() != label.width()) {
    throw ShapeError("augment: expects a single image/label pair of equal size");
  }
  if (cfg.crop_size == 0) throw ValidationError("augment: crop_size must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double scale = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * unit(rng);
  const bool flip = unit(rng) < cfg.flip_prob;
  const std::size_t sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(image.h() * scale)));
  const std::size_t sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(image.w() * scale)));

  Tensorf scaled = (sh == image.h() && sw == image.w()) ? image : kernels::resize_bilinear(image, sh, sw);
  LabelMap scaled_label = (sh == image.h() && sw == image.w()) ? label : label.resized_nearest(sh, sw);

  const std::size_t ph = std::max(sh, cfg.crop_size), pw = std::max(sw, cfg.crop_size);
  const std::size_t oy = ph > cfg.crop_size ? static_cast<std::size_t>(unit(rng) * static_cast<double>(ph - cfg.crop_size + 1)) : 0;
  const std::size_t ox = pw > cfg.crop_size ? static_cast<std::size_t>(unit(rng) * static_cast<double>(pw - cfg.crop_size + 1)) : 0;

  const std::size_t crop = cfg.crop_size;
  Tensorf out(1, 3, crop, crop);
  std::vector<std::int32_t> out_label(crop * crop, label.ignore_id());
  for (std::size_t y = 0; y < crop; ++y) {
    const std::size_t sy = y + std::min(oy, ph - crop);
    for (std::size_t x = 0; x < crop; ++x) {
      const std::size_t px = x + std::min(ox, pw - crop);
      const bool inside = sy < sh && px < sw;
      const std::size_t srcx = flip ? sw - 1 - px : px;
      for (std::size_t c = 0; c < 3; ++c) out(0, c, y, x) = inside ? scaled(0, c, sy, srcx) : cfg.pad_value[c];
      if (inside) out_label[y * crop + x] = scaled_label.at(0, sy, srcx);
    }
  }
  return {std::move(out), LabelMap(1, crop, crop, std::move(out_label), label.ignore_id())};
}

Tensorf normalize(const Tensorf& image, const std::array<float, 3>& mean, const std::array<float, 3>& stddev) {
  if (image.c() != 3) throw ShapeError("normalize: expects 3 channels");
  Tensorf out(image.shape());
  for (std::size_t b = 0; b < image.n(); ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      const float* src = image.plane_ptr(b, c);
      float* dst = out.plane_ptr(b, c);
      const float inv = 1.0f / stddev[c];
      for (std::size_t i = 0; i < image.plane(); ++i) dst[i] = (src[i] - mean[c]) * inv;
    }
  return out;
}

Tensorf stack_images(const std::vector<Tensorf>& images) {
  if (images.empty()) throw EmptyBatchError("stack_images: no images");
  const auto& f = images.front();
  Tensorf out(images.size(), f.c(), f.h(), f.w());
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b].n() != 1 || images[b].c() != f.c() || images[b].h() != f.h() || images[b].w() != f.w()) {
      throw ShapeError("stack_images: samples differ in shape");
    }
    std::copy(images[b].data(), images[b].data() + images[b].size(), out.plane_ptr(b, 0));
  }
  return out;
}

LabelMap stack_labels(const std::vector<LabelMap>& labels) {
  if (labels.empty()) throw EmptyBatchError("stack_labels: no labels");
  const auto& f = labels.front();
  std::vector<std::int32_t> values;
  values.reserve(labels.size() * f.size());
  for (const auto& l : labels) {
    if (l.batch() != 1 || l.height() != f.height() || l.width() != f.width()) {
      throw ShapeError("stack_labels: samples differ in shape");
    }
    values.insert(values.end(), l.values().begin(), l.values().end());
  }
  return LabelMap(labels.size(), f.height(), f.width(), std::move(values), f.ignore_id());
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

enum class ShapeKind { disk, square, triangle, ring, cross };

struct ShapeInstance {
  ShapeKind kind;
  double cx, cy, radius, angle;
};

bool inside(const ShapeInstance& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  const double ca = std::cos(s.angle), sa = std::sin(s.angle);
  const double x = ca * dx + sa * dy, y = -sa * dx + ca * dy;
  const double r = s.radius;
  switch (s.kind) {
    case ShapeKind::disk:
      return x * x + y * y <= r * r;
    case ShapeKind::square:
      return std::abs(x) <= 0.8 * r && std::abs(y) <= 0.8 * r;
    case ShapeKind::triangle: {
      // Equilateral, circumradius r, apex pointing along -y.
      const double k = std::numbers::sqrt3;
      return y <= r / 2 && (k * x - y) <= r && (-k * x - y) <= r;
    }
    case ShapeKind::ring: {
      const double d2 = x * x + y * y;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    case ShapeKind::cross:
      return (std::abs(x) <= r / 3 && std::abs(y) <= r) || (std::abs(y) <= r / 3 && std::abs(x) <= r);
  }
  return false;
}

std::array<double, 3> class_color(std::size_t cls) {
  // Evenly spaced hues at fixed saturation/value.
  const double hue = std::fmod(static_cast<double>(cls) * 0.61803398875, 1.0) * 6.0;
  const int sector = static_cast<int>(hue);
  const double f = hue - sector, v = 210, p = 60, q = v - (v - p) * f, t = p + (v - p) * f;
  switch (sector % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

}  // namespace

Sample render_synthetic(const SyntheticSceneConfig& cfg, const std::string& split, std::size_t index) {
  if (cfg.class_count < 2) throw ValidationError("synthetic class_count must be >= 2");
  if (cfg.image_size == 0) throw ValidationError("synthetic image_size must be positive");
  const std::size_t n = cfg.image_size;
  std::mt19937_64 rng(derive_seed(cfg.seed, {fnv1a(split), index}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  // Background: dim base colour, two sinusoidal gratings, pixel noise.
  std::array<double, 3> base{uniform(40, 140), uniform(40, 140), uniform(40, 140)};
  const double f1 = uniform(0.05, 0.4), f2 = uniform(0.05, 0.4), ph1 = uniform(0, 6.3), ph2 = uniform(0, 6.3);
  const double th1 = uniform(0, 3.14), th2 = uniform(0, 3.14);
  std::vector<double> rgb(n * n * 3);
  std::normal_distribution<double> noise(0.0, 10.0);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double g = 22 * std::sin(f1 * (std::cos(th1) * x + std::sin(th1) * y) + ph1) +
                       14 * std::sin(f2 * (std::cos(th2) * x + std::sin(th2) * y) + ph2);
      for (std::size_t c = 0; c < 3; ++c) rgb[(y * n + x) * 3 + c] = base[c] + g + noise(rng);
    }
  std::vector<std::int32_t> label(n * n, 0);

  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_shapes, std::max(cfg.min_shapes, cfg.max_shapes));
  std::uniform_int_distribution<std::size_t> class_dist(1, cfg.class_count - 1);
  const std::size_t shapes = count_dist(rng);
  const double size = static_cast<double>(n);
  for (std::size_t s = 0; s < shapes; ++s) {
    const std::size_t cls = class_dist(rng);
    ShapeInstance inst{static_cast<ShapeKind>((cls - 1) % 5), uniform(0.15, 0.85) * size, uniform(0.15, 0.85) * size,
                       uniform(0.11, 0.25) * size, uniform(0, 6.283)};
    std::array<double, 3> color = class_color(cls);
    if (unit(rng) < cfg.random_color_prob) {
      // Random colours stay clearly apart from the background so the shape
      // is always visible; only its class has to be inferred from geometry.
      do {
        color = {uniform(20, 235), uniform(20, 235), uniform(20, 235)};
      } while (std::hypot(color[0] - base[0], color[1] - base[1], color[2] - base[2]) < 110.0);
    }
    for (auto& c : color) c += uniform(-20, 20);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        if (!inside(inst, x + 0.5, y + 0.5)) continue;
        label[y * n + x] = static_cast<std::int32_t>(cls);
        for (std::size_t c = 0; c < 3; ++c) rgb[(y * n + x) * 3 + c] = color[c] + noise(rng) * 0.8;
      }
  }

  Tensorf image(1, 3, n, n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        image(0, c, y, x) = static_cast<float>(std::clamp(std::round(rgb[(y * n + x) * 3 + c]), 0.0, 255.0));
      }
  char id[16];
  std::snprintf(id, sizeof id, "%05zu", index);
  return {id, std::move(image), LabelMap(1, n, n, std::move(label))};
}

DatasetSpec generate_synthetic(const SyntheticSceneConfig& cfg, const fs::path& root) {
  if (cfg.class_count > 255) throw ValidationError("synthetic class_count must fit an 8-bit label");
  const std::map<std::string, std::size_t> splits{{"train", cfg.train_count}, {"val", cfg.val_count}};
  for (const auto& [split, count] : splits) {
    fs::create_directories(root / "images" / split);
    fs::create_directories(root / "labels" / split);
    for (std::size_t i = 0; i < count; ++i) {
      const Sample s = render_synthetic(cfg, split, i);
      const std::size_t n = cfg.image_size;
      Image8 rgb{n, n, 3, std::vector<std::uint8_t>(n * n * 3)};
      Image8 gray{n, n, 1, std::vector<std::uint8_t>(n * n)};
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          for (std::size_t c = 0; c < 3; ++c) rgb.pixels[(y * n + x) * 3 + c] = static_cast<std::uint8_t>(s.image(0, c, y, x));
          gray.pixels[y * n + x] = static_cast<std::uint8_t>(s.label.at(0, y, x));
        }
      write_png(root / "images" / split / (s.id + ".png"), rgb);
      write_png(root / "labels" / split / (s.id + ".png"), gray);
    }
  }
  nlohmann::json manifest{{"name", "synthetic"},
                          {"layout", "standard"},
                          {"class_count", cfg.class_count},
                          {"ignore_id", kDefaultIgnoreId},
                          {"crop_size", cfg.image_size},
                          {"image_size", {cfg.image_size, cfg.image_size}},
                          {"splits", splits},
                          {"generator",
                           {{"seed", cfg.seed},
                            {"min_shapes", cfg.min_shapes},
                            {"max_shapes", cfg.max_shapes},
                            {"random_color_prob", cfg.random_color_prob}}}};
  std::ofstream(root / "manifest.json") << manifest.dump(2) << '\n';
  return read_manifest(root);
}

}  // namespace kdseg
