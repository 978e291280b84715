#include <doctest.h>

#include <fstream>

#include "kdseg/config.hpp"
#include "kdseg/error.hpp"
#include "support.hpp"

using namespace kdseg;
using nlohmann::json;

namespace {

struct Expected {
  const char* preset;
  double mu0;
  double gamma;
};

// Tuned (mu0, gamma) per dataset and student, without and with teacher.
constexpr Expected kExpected[] = {
    {"pascalvoc-effnet-student", 1e-2, 5e-4},  {"pascalvoc-resnet-student", 5e-3, 5e-4},
    {"cityscapes-effnet-student", 1e-1, 5e-6}, {"cityscapes-resnet-student", 1e-2, 5e-4},
    {"ade20k-effnet-student", 5e-3, 5e-5},     {"ade20k-resnet-student", 1e-2, 5e-5},
    {"pascalvoc-effnet-kd", 1e-2, 5e-6},       {"pascalvoc-resnet-kd", 5e-3, 5e-5},
    {"cityscapes-effnet-kd", 5e-2, 5e-6},      {"cityscapes-resnet-kd", 1e-2, 5e-4},
    {"ade20k-effnet-kd", 1e-2, 5e-5},          {"ade20k-resnet-kd", 1e-2, 5e-5},
};

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("tuned presets hold the published values exactly") {
  for (const auto& e : kExpected) {
    CAPTURE(e.preset);
    const json r = resolve_config(std::string(e.preset), json(), {});
    CHECK(r["train"]["mu0"].get<double>() == e.mu0);
    CHECK(r["train"]["gamma"].get<double>() == e.gamma);
    const bool kd = std::string(e.preset).ends_with("-kd");
    if (kd) {
      CHECK(r["train"]["weights"]["pi"].get<double>() == 1e-1);
      CHECK(r["train"]["temperature"].get<double>() == 1.0);
      CHECK(r["model"]["teacher"] == "pspnet_resnet101");
    } else {
      CHECK(r["model"]["teacher"].is_null());
      CHECK(r["train"]["weights"]["pi"].get<double>() == 0.0);
    }
  }
  std::size_t tuned_presets = 0;
  for (const auto& p : presets())
    if (!p.name.starts_with("toy-")) ++tuned_presets;
  CHECK(tuned_presets == std::size(kExpected));
}

TEST_CASE("preset dataset fields") {
  const json cs = resolve_config(std::string("cityscapes-effnet-kd"), json(), {});
  CHECK(cs["data"]["class_count"] == 19);
  CHECK(cs["data"]["layout"] == "cityscapes");
  CHECK(cs["model"]["student"] == "pspnet_effnet_b0");
  CHECK(cs["seeds"].size() == 3);
  const json ade = resolve_config(std::string("ade20k-resnet-student"), json(), {});
  CHECK(ade["data"]["class_count"] == 150);
  CHECK(ade["model"]["student"] == "pspnet_resnet18");
  CHECK(ade["seeds"].size() == 1);
  CHECK(resolve_config(std::string("pascalvoc-resnet-kd"), json(), {})["data"]["class_count"] == 21);
}

TEST_CASE("override example: preset plus a bare temperature key") {
  const json r = resolve_config(std::string("cityscapes-resnet-kd"), json(), {"temperature=3"});
  CHECK(r["train"]["temperature"].get<double>() == 3.0);
  CHECK(r["train"]["mu0"].get<double>() == 1e-2);
  CHECK(r["train"]["gamma"].get<double>() == 5e-4);
  CHECK(r["train"]["weights"]["pi"].get<double>() == 1e-1);
}

TEST_CASE("layer order: defaults < preset < file < overrides") {
  const json defaults = resolve_config(std::nullopt, json(), {});
  CHECK(defaults == default_config());

  const json file{{"train", {{"mu0", 0.25}, {"gamma", 1e-3}}}};
  const json with_file = resolve_config(std::string("pascalvoc-effnet-student"), file, {});
  CHECK(with_file["train"]["mu0"].get<double>() == 0.25);
  CHECK(with_file["train"]["gamma"].get<double>() == 1e-3);
  CHECK(with_file["data"]["class_count"] == 21);

  const json with_set = resolve_config(std::string("pascalvoc-effnet-student"), file, {"train.mu0=0.5"});
  CHECK(with_set["train"]["mu0"].get<double>() == 0.5);
  CHECK(with_set["train"]["gamma"].get<double>() == 1e-3);
}

TEST_CASE("parse_override") {
  const Override a = parse_override("mu0=1e-3");
  CHECK(a.path == "train.mu0");
  CHECK(a.value.get<double>() == 1e-3);
  const Override b = parse_override("model.student=toy_teacher");
  CHECK(b.path == "model.student");
  CHECK(b.value == "toy_teacher");
  const Override c = parse_override("seeds=[1,2]");
  CHECK(c.value == json::array({1, 2}));
  CHECK(parse_override("weights.pi=0.1").path == "weights.pi");
  CHECK_THROWS_AS(parse_override("mu0"), ConfigError);
  CHECK_THROWS_AS(parse_override("=3"), ConfigError);
}

TEST_CASE("conflicting and repeated overrides") {
  const std::string msg = error_of([] { resolve_config(std::nullopt, json(), {"mu0=0.1", "train.mu0=0.2"}); });
  CHECK(msg.find("conflicting") != std::string::npos);
  CHECK(msg.find("train.mu0") != std::string::npos);
  const json same = resolve_config(std::nullopt, json(), {"mu0=0.1", "train.mu0=0.1"});
  CHECK(same["train"]["mu0"].get<double>() == 0.1);
}

TEST_CASE("schema errors name the field") {
  std::string msg = error_of([] { resolve_config(std::nullopt, json{{"train", {{"mu_0", 1}}}}, {}); });
  CHECK(msg.find("train.mu_0") != std::string::npos);
  CHECK(msg.find("unknown field") != std::string::npos);

  msg = error_of([] { resolve_config(std::nullopt, json(), {"train.mu0=\"fast\""}); });
  CHECK(msg.find("train.mu0") != std::string::npos);

  msg = error_of([] { resolve_config(std::nullopt, json(), {"train.batch_size=-2"}); });
  CHECK(msg.find("train.batch_size") != std::string::npos);

  msg = error_of([] { resolve_config(std::nullopt, json(), {"data.synthetic={\"bogus\":1}"}); });
  CHECK(msg.find("data.synthetic.bogus") != std::string::npos);

  msg = error_of([] { resolve_config(std::nullopt, json(), {"seeds=[1,\"x\"]"}); });
  CHECK(msg.find("seeds") != std::string::npos);

  CHECK_THROWS_AS(resolve_config(std::nullopt, json::array(), {}), ConfigError);
}

TEST_CASE("unknown preset lists the available ones") {
  const std::string msg = error_of([] { resolve_config(std::string("cityscapes-vit-kd"), json(), {}); });
  CHECK(msg.find("unknown preset 'cityscapes-vit-kd'") != std::string::npos);
  for (const auto& p : presets()) CHECK(msg.find(p.name) != std::string::npos);
}

TEST_CASE("toy presets") {
  const RunConfig teacher = materialize(resolve_config(std::string("toy-teacher"), json(), {}));
  CHECK(teacher.student == "toy_teacher");
  CHECK(teacher.train.eta == 600);
  CHECK(teacher.synthetic.has_value());
  CHECK(teacher.data.class_count == 4);
  CHECK(missing_requirements(teacher).empty());

  const RunConfig kd = materialize(resolve_config(std::string("toy-kd"), json(), {}));
  CHECK(kd.teacher == std::optional<std::string>("toy_teacher"));
  CHECK(kd.train.loss_weights.pi == 0.1);
  CHECK(kd.train.temperature.tau() == 1.0);
  CHECK(kd.seeds.size() == 5);
  CHECK(std::filesystem::exists(*kd.teacher_weights));

  const RunConfig solo = materialize(resolve_config(std::string("toy-student-only"), json(), {}));
  CHECK_FALSE(solo.teacher.has_value());
  CHECK(solo.train.eta == kd.train.eta);
  CHECK(solo.train.mu0 == kd.train.mu0);
  CHECK(solo.seeds == kd.seeds);
}

TEST_CASE("materialize and missing requirements") {
  const RunConfig tuned = materialize(resolve_config(std::string("cityscapes-resnet-kd"), json(), {}));
  const auto missing = missing_requirements(tuned);
  auto has = [&](const std::string& s) {
    for (const auto& m : missing)
      if (m.find(s) != std::string::npos) return true;
    return false;
  };
  CHECK(has("train.eta"));
  CHECK(has("data.root"));
  CHECK(has("model.teacher_weights"));
  CHECK(has("train.init.weights"));

  CHECK_THROWS_AS(materialize(resolve_config(std::nullopt, json(), {"train.weights.pi=0.1", "eta=10"})), ConfigError);
  CHECK_THROWS_AS(materialize(resolve_config(std::nullopt, json(), {"data.layout=\"coco\""})), ConfigError);
  CHECK_THROWS_AS(materialize(resolve_config(std::nullopt, json(), {"seeds=[]"})), ConfigError);
  CHECK_THROWS_AS(materialize(resolve_config(std::nullopt, json(), {"model.teacher_weights=\"t.ckpt\""})), ConfigError);

  const RunConfig rel = materialize(resolve_config(std::nullopt, json(), {"data.root=\"scenes\"", "data.class_count=5"}),
                                    "/base");
  CHECK(rel.data.root == std::filesystem::path("/base/scenes"));
  CHECK(rel.data.class_count == 5);
}

TEST_CASE("config hash is stable and content-sensitive") {
  const json a = resolve_config(std::string("toy-kd"), json(), {});
  const json b = resolve_config(std::string("toy-kd"), json(), {});
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 10);
  CHECK(config_hash(a) != config_hash(resolve_config(std::string("toy-kd"), json(), {"temperature=2"})));
}

TEST_CASE("set_path and get_path") {
  json t = json::object();
  set_path(t, "a.b.c", 3);
  CHECK(*get_path(t, "a.b.c") == 3);
  CHECK(get_path(t, "a.x") == nullptr);
  CHECK_THROWS_AS(set_path(t, "a..c", 1), ConfigError);
}
