#include "kdseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "kdseg/error.hpp"

namespace kdseg {
namespace {

constexpr char kMagic[8] = {'K', 'D', 'S', 'E', 'G', 'C', 'K', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header{{"format_version", kCheckpointFormatVersion},
                        {"model", ckpt.model},
                        {"class_count", ckpt.class_count},
                        {"meta", ckpt.meta},
                        {"tensors", nlohmann::json::array()}};
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    const auto& s = t.value.shape();
    header["tensors"].push_back({{"name", t.name},
                                 {"group", t.group},
                                 {"shape", {s[0], s[1], s[2], s[3]}},
                                 {"offset", offset},
                                 {"count", t.value.size()}});
    offset += t.value.size();
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : ckpt.tensors) {
    out.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(t.value.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw IoError(path.string() + " is not a kdseg checkpoint");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header in " + path.string());

  Checkpoint ckpt;
  std::vector<float> payload;
  try {
    const auto header = nlohmann::json::parse(text);
    if (header.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw IoError("unsupported checkpoint format version in " + path.string());
    }
    ckpt.model = header.at("model").get<std::string>();
    ckpt.class_count = header.at("class_count").get<std::size_t>();
    ckpt.meta = header.value("meta", nlohmann::json::object());
    const std::streampos data_start = in.tellg();
    for (const auto& t : header.at("tensors")) {
      const auto shape = t.at("shape").get<std::array<std::size_t, 4>>();
      const auto count = t.at("count").get<std::size_t>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      Tensorf value(shape);
      if (value.size() != count) throw IoError("checkpoint tensor '" + t.at("name").get<std::string>() + "' has inconsistent size");
      in.seekg(data_start + static_cast<std::streamoff>(offset * sizeof(float)));
      in.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(count * sizeof(float)));
      if (!in) throw IoError("truncated checkpoint payload in " + path.string());
      ckpt.tensors.push_back({t.at("name").get<std::string>(), t.value("group", "model"), std::move(value)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  return ckpt;
}

void append_parameters(Checkpoint& ckpt, const nn::ParamRefs<float>& params, const std::string& group) {
  for (const auto* p : params) ckpt.tensors.push_back({p->name, group, p->value});
}

void restore_parameters(const Checkpoint& ckpt, const nn::ParamRefs<float>& params, const std::string& group) {
  for (auto* p : params) {
    const NamedArray* src = nullptr;
    for (const auto& t : ckpt.tensors)
      if (t.group == group && t.name == p->name) src = &t;
    if (!src) throw IoError("checkpoint is missing parameter '" + p->name + "'");
    if (src->value.shape() != p->value.shape()) {
      throw IoError("checkpoint parameter '" + p->name + "' has shape " + shape_string(src->value.shape()) +
                    ", model expects " + shape_string(p->value.shape()));
    }
    p->value = src->value;
  }
}

}  // namespace kdseg
