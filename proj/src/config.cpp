#include "kdseg/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <map>

#include "kdseg/error.hpp"
#include "kdseg/util.hpp"

#ifndef KDSEG_SOURCE_DATA_DIR
#define KDSEG_SOURCE_DATA_DIR "data"
#endif

namespace kdseg {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json synthetic_defaults() {
  const SyntheticSceneConfig s;
  return {{"image_size", s.image_size},   {"class_count", s.class_count}, {"min_shapes", s.min_shapes},
          {"max_shapes", s.max_shapes},   {"train_count", s.train_count}, {"val_count", s.val_count},
          {"random_color_prob", s.random_color_prob}, {"seed", s.seed}};
}

// Type accepted by fields whose default is null.
const std::map<std::string, json::value_t>& nullable_fields() {
  static const std::map<std::string, json::value_t> fields{
      {"model.teacher", json::value_t::string},
      {"model.teacher_weights", json::value_t::string}, {"data.root", json::value_t::string},
      {"data.class_count", json::value_t::number_unsigned}, {"data.remap_table", json::value_t::string},
      {"data.synthetic", json::value_t::object},        {"train.eta", json::value_t::number_unsigned},
      {"train.init.weights", json::value_t::string},
  };
  return fields;
}

std::string type_name(json::value_t t) {
  switch (t) {
    case json::value_t::string: return "a string";
    case json::value_t::number_unsigned:
    case json::value_t::number_integer: return "a non-negative integer";
    case json::value_t::number_float: return "a number";
    case json::value_t::boolean: return "a boolean";
    case json::value_t::array: return "an array";
    case json::value_t::object: return "an object";
    default: return "null";
  }
}

bool matches(const json& v, json::value_t expected) {
  switch (expected) {
    case json::value_t::number_unsigned:
    case json::value_t::number_integer:
      if (v.is_number_unsigned()) return true;
      if (v.is_number_integer()) return v.get<std::int64_t>() >= 0;
      if (v.is_number_float()) {
        const double d = v.get<double>();
        return d >= 0 && d == static_cast<double>(static_cast<std::uint64_t>(d));
      }
      return false;
    case json::value_t::number_float: return v.is_number();
    default: return v.type() == expected;
  }
}

void check_schema(const json& node, const json& schema, const std::string& path) {
  const std::string where = path.empty() ? "config" : "field '" + path + "'";
  if (schema.is_null()) {
    const auto& nf = nullable_fields();
    auto it = nf.find(path);
    if (it == nf.end()) throw ConfigError(where + ": unknown field");
    if (node.is_null()) return;
    if (!matches(node, it->second)) throw ConfigError(where + ": expected " + type_name(it->second) + " or null");
    if (path == "data.synthetic") check_schema(node, synthetic_defaults(), path);
    return;
  }
  if (schema.is_object()) {
    if (!node.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, value] : node.items()) {
      const std::string sub = path.empty() ? key : path + "." + key;
      if (!schema.contains(key)) throw ConfigError("field '" + sub + "': unknown field");
      check_schema(value, schema.at(key), sub);
    }
    return;
  }
  if (schema.is_array()) {
    if (!node.is_array()) throw ConfigError(where + ": expected an array");
    if (!schema.empty()) {
      for (std::size_t i = 0; i < node.size(); ++i) {
        if (!matches(node[i], schema[0].type())) {
          throw ConfigError(where + "[" + std::to_string(i) + "]: expected " + type_name(schema[0].type()));
        }
      }
    }
    return;
  }
  if (!matches(node, schema.type())) throw ConfigError(where + ": expected " + type_name(schema.type()));
}

bool is_train_field(const std::string& key) {
  static const json train = default_config().at("train");
  return train.contains(key);
}

fs::path resolve_path(const std::string& p, const fs::path& base) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

// Tuned presets: (mu0, gamma) per dataset and student, student-only and with
// teacher.
struct TunedCell {
  const char* dataset;
  const char* student;
  double mu0_student, gamma_student, mu0_kd, gamma_kd;
};

constexpr TunedCell kTunedCells[] = {
    {"pascalvoc", "effnet", 1e-2, 5e-4, 1e-2, 5e-6},  {"pascalvoc", "resnet", 5e-3, 5e-4, 5e-3, 5e-5},
    {"cityscapes", "effnet", 1e-1, 5e-6, 5e-2, 5e-6}, {"cityscapes", "resnet", 1e-2, 5e-4, 1e-2, 5e-4},
    {"ade20k", "effnet", 5e-3, 5e-5, 1e-2, 5e-5},     {"ade20k", "resnet", 1e-2, 5e-5, 1e-2, 5e-5},
};

json dataset_patch(const std::string& dataset) {
  const std::string remap_dir = (data_dir() / "remap").string();
  if (dataset == "cityscapes") {
    return {{"class_count", 19}, {"layout", "cityscapes"}, {"crop_size", 512},
            {"remap_table", remap_dir + "/cityscapes_labelids.txt"}};
  }
  if (dataset == "ade20k") {
    return {{"class_count", 150}, {"layout", "standard"}, {"crop_size", 473}, {"remap_table", remap_dir + "/ade20k.txt"}};
  }
  return {{"class_count", 21}, {"layout", "standard"}, {"crop_size", 473}};
}

std::vector<Preset> build_presets() {
  std::vector<Preset> out;
  for (const auto& c : kTunedCells) {
    const std::string ds = c.dataset, st = c.student;
    const std::string model = st == "effnet" ? "pspnet_effnet_b0" : "pspnet_resnet18";
    const json seeds = ds == "ade20k" ? json::array({0}) : json::array({0, 1, 2});
    const json common_train{{"batch_size", 8}, {"init", {{"mode", "pretrained"}}}};
    json student{{"model", {{"student", model}}}, {"data", dataset_patch(ds)}, {"train", common_train}, {"seeds", seeds}};
    student["train"]["mu0"] = c.mu0_student;
    student["train"]["gamma"] = c.gamma_student;
    out.push_back({ds + "-" + st + "-student", "student only, tuned (mu0, gamma)", student});

    json kd = student;
    kd["model"]["teacher"] = "pspnet_resnet101";
    kd["train"]["mu0"] = c.mu0_kd;
    kd["train"]["gamma"] = c.gamma_kd;
    kd["train"]["temperature"] = 1.0;
    kd["train"]["weights"] = {{"pi", 1e-1}};
    out.push_back({ds + "-" + st + "-kd", "student + teacher with pixel-wise distillation, tuned (mu0, gamma)", kd});
  }

  const json synthetic = synthetic_defaults();
  const json toy_train{{"batch_size", 8}, {"eval_interval", 250}, {"scale_min", 0.75}, {"scale_max", 1.5}};
  json teacher{{"model", {{"student", "toy_teacher"}}},
               {"data", {{"synthetic", synthetic}}},
               {"train", toy_train},
               {"seeds", {0}}};
  teacher["train"]["mu0"] = 5e-2;
  teacher["train"]["gamma"] = 5e-4;
  teacher["train"]["eta"] = 600;
  out.push_back({"toy-teacher", "toy teacher on the synthetic shapes dataset", teacher});

  json student{{"model", {{"student", "toy_student"}}},
               {"data", {{"synthetic", synthetic}}},
               {"train", toy_train},
               {"seeds", {0, 1, 2, 3, 4}}};
  student["train"]["mu0"] = 5e-2;
  student["train"]["gamma"] = 5e-4;
  student["train"]["eta"] = 500;
  out.push_back({"toy-student-only", "toy student, cross-entropy only", student});

  json kd = student;
  kd["model"]["teacher"] = "toy_teacher";
  kd["model"]["teacher_weights"] = (data_dir() / "fixtures" / "toy_teacher.ckpt").string();
  kd["train"]["temperature"] = 1.0;
  kd["train"]["weights"] = {{"pi", 1e-1}};
  out.push_back({"toy-kd", "toy student with pixel-wise distillation from the shipped toy teacher", kd});
  return out;
}

void merge_patch(json& target, const json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && target.contains(key) && target[key].is_object()) {
      merge_patch(target[key], value);
    } else {
      target[key] = value;
    }
  }
}

}  // namespace

fs::path data_dir() {
  if (const char* env = std::getenv("KDSEG_DATA_DIR"); env && *env) return env;
  return KDSEG_SOURCE_DATA_DIR;
}

const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = build_presets();
  return all;
}

const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return p;
  std::string known;
  for (const auto& p : presets()) known += (known.empty() ? "" : ", ") + p.name;
  throw ConfigError("unknown preset '" + name + "'; available presets: " + known);
}

json default_config() {
  const DatasetSpec d;
  TrainConfig t;
  json train = to_json(t);
  train["eta"] = nullptr;
  train["init"]["weights"] = nullptr;
  return {{"model", {{"student", "toy_student"}, {"teacher", nullptr}, {"teacher_weights", nullptr}}},
          {"data",
           {{"root", nullptr},
            {"class_count", nullptr},
            {"ignore_id", d.ignore_id},
            {"layout", "standard"},
            {"remap_table", nullptr},
            {"crop_size", d.crop_size},
            {"mean", d.mean},
            {"std", d.stddev},
            {"synthetic", nullptr}}},
          {"train", train},
          {"seeds", {0}}};
}

Override parse_override(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(text) + "' is not of the form path=value");
  }
  std::string path(text.substr(0, eq));
  const std::string raw(text.substr(eq + 1));
  if (path.find('.') == std::string::npos && is_train_field(path)) path = "train." + path;
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  return {path, value};
}

void set_path(json& tree, const std::string& dotted, const json& value) {
  json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("malformed path '" + dotted + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

const json* get_path(const json& tree, const std::string& dotted) {
  const json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) return nullptr;
    node = &node->at(key);
    if (dot == std::string::npos) return node;
    start = dot + 1;
  }
}

json resolve_config(const std::optional<std::string>& preset, const json& file, const std::vector<std::string>& overrides) {
  json tree = default_config();
  if (preset) merge_patch(tree, find_preset(*preset).patch);
  if (!file.is_null()) {
    if (!file.is_object()) throw ConfigError("config file must hold an object");
    check_schema(file, default_config(), "");
    merge_patch(tree, file);
  }
  std::map<std::string, json> seen;
  for (const auto& text : overrides) {
    Override o = parse_override(text);
    if (auto it = seen.find(o.path); it != seen.end() && it->second != o.value) {
      throw ConfigError("conflicting overrides for '" + o.path + "': " + it->second.dump() + " vs " + o.value.dump());
    }
    seen[o.path] = o.value;
  }
  for (const auto& [path, value] : seen) {
    if (path == "data.synthetic" && value.is_object()) {
      json merged = tree["data"]["synthetic"].is_object() ? tree["data"]["synthetic"] : synthetic_defaults();
      merge_patch(merged, value);
      set_path(tree, path, merged);
    } else {
      set_path(tree, path, value);
    }
  }
  if (tree["data"]["synthetic"].is_object()) {
    json merged = synthetic_defaults();
    merge_patch(merged, tree["data"]["synthetic"]);
    tree["data"]["synthetic"] = merged;
  }
  check_schema(tree, default_config(), "");
  return tree;
}

RunConfig materialize(const json& resolved, const fs::path& base_dir) {
  check_schema(resolved, default_config(), "");
  RunConfig rc;
  rc.resolved = resolved;
  const json& m = resolved.at("model");
  rc.student = m.at("student").get<std::string>();
  if (!m.at("teacher").is_null()) rc.teacher = m.at("teacher").get<std::string>();
  if (!m.at("teacher_weights").is_null()) rc.teacher_weights = resolve_path(m.at("teacher_weights"), base_dir).string();
  if (rc.teacher_weights && !rc.teacher) throw ConfigError("field 'model.teacher_weights': set without model.teacher");

  const json& d = resolved.at("data");
  DatasetSpec& spec = rc.data;
  spec.ignore_id = d.at("ignore_id").get<std::int32_t>();
  const std::string layout = d.at("layout").get<std::string>();
  if (layout == "standard") spec.layout = DatasetLayout::standard;
  else if (layout == "cityscapes") spec.layout = DatasetLayout::cityscapes;
  else throw ConfigError("field 'data.layout': must be 'standard' or 'cityscapes'");
  if (!d.at("remap_table").is_null()) spec.remap_table = resolve_path(d.at("remap_table"), base_dir);
  spec.crop_size = d.at("crop_size").get<std::size_t>();
  if (d.at("mean").size() != 3) throw ConfigError("field 'data.mean': expected 3 values");
  if (d.at("std").size() != 3) throw ConfigError("field 'data.std': expected 3 values");
  for (std::size_t c = 0; c < 3; ++c) {
    spec.mean[c] = d.at("mean")[c].get<float>();
    spec.stddev[c] = d.at("std")[c].get<float>();
  }
  if (d.at("synthetic").is_object()) {
    const json& s = d.at("synthetic");
    SyntheticSceneConfig sc;
    sc.image_size = s.at("image_size").get<std::size_t>();
    sc.class_count = s.at("class_count").get<std::size_t>();
    sc.min_shapes = s.at("min_shapes").get<std::size_t>();
    sc.max_shapes = s.at("max_shapes").get<std::size_t>();
    sc.train_count = s.at("train_count").get<std::size_t>();
    sc.val_count = s.at("val_count").get<std::size_t>();
    sc.random_color_prob = s.at("random_color_prob").get<double>();
    sc.seed = s.at("seed").get<std::uint64_t>();
    if (sc.class_count < 2) throw ConfigError("field 'data.synthetic.class_count': must be >= 2");
    if (sc.min_shapes > sc.max_shapes) throw ConfigError("field 'data.synthetic.min_shapes': exceeds max_shapes");
    rc.synthetic = sc;
    spec.class_count = sc.class_count;
    if (d.at("root").is_null()) {
      const char* env = std::getenv("KDSEG_DATA_ROOT");
      const fs::path root = env && *env ? fs::path(env) : base_dir / "kdseg-data";
      spec.root = root / ("synthetic-" + config_hash(s));
    }
    if (!d.at("class_count").is_null() && d.at("class_count").get<std::size_t>() != sc.class_count) {
      throw ConfigError("field 'data.class_count': disagrees with data.synthetic.class_count");
    }
  } else if (!d.at("class_count").is_null()) {
    spec.class_count = d.at("class_count").get<std::size_t>();
  }
  if (!d.at("root").is_null()) spec.root = resolve_path(d.at("root"), base_dir);
  if (spec.class_count != 0 && spec.class_count < 2) throw ConfigError("field 'data.class_count': must be >= 2");
  if (spec.crop_size == 0) throw ConfigError("field 'data.crop_size': must be positive");

  json train = resolved.at("train");
  const bool eta_missing = train.at("eta").is_null();
  if (eta_missing) train["eta"] = 1;
  if (train.at("init").at("weights").is_null()) train["init"].erase("weights");
  if (train.at("init").value("mode", "random") == "pretrained" && !train.at("init").contains("weights")) {
    train["init"]["mode"] = "random";
    rc.train = train_config_from_json(train);
    rc.train.init = InitPolicy{InitPolicy::Mode::pretrained, std::nullopt, 0};
  } else {
    rc.train = train_config_from_json(train);
  }
  if (rc.train.init.weight_source) rc.train.init.weight_source = resolve_path(*rc.train.init.weight_source, base_dir).string();
  rc.train.validate();
  if (eta_missing) rc.train.eta = 0;
  if (rc.train.loss_weights.any_distillation() && !rc.teacher) {
    throw ConfigError("field 'model.teacher': distillation weights are set but no teacher is configured");
  }
  for (const auto& s : resolved.at("seeds")) rc.seeds.push_back(s.get<std::uint64_t>());
  if (rc.seeds.empty()) throw ConfigError("field 'seeds': must not be empty");
  return rc;
}

std::vector<std::string> missing_requirements(const RunConfig& rc) {
  std::vector<std::string> out;
  if (rc.train.eta == 0) out.push_back("train.eta (total training steps) is required");
  if (rc.data.root.empty()) out.push_back("data.root is required");
  if (rc.data.class_count == 0) out.push_back("data.class_count is required");
  if (rc.train.init.mode == InitPolicy::Mode::pretrained && !rc.train.init.weight_source) {
    out.push_back("train.init.weights is required for pretrained initialization");
  }
  if (rc.teacher && !rc.teacher_weights) out.push_back("model.teacher_weights is required when a teacher is set");
  return out;
}

std::string config_hash(const json& resolved) { return hex64(fnv1a(resolved.dump())).substr(0, 10); }

}  // namespace kdseg
