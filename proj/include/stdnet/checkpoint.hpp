#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stdnet/model.hpp"

namespace stdnet {

// Archive layout (little-endian):
//   8 bytes   magic "STDNETCK"
//   u32       format version
//   u64       manifest length L
//   L bytes   JSON manifest
//   float32   array payloads, concatenated in manifest order
inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'D', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline nlohmann::ordered_json model_config_to_json(const ModelConfig& m) {
  nlohmann::ordered_json j;
  j["variant"] = to_string(m.variant);
  j["image_channels"] = m.image_channels;
  j["classes"] = m.classes;
  j["extractor_width"] = m.extractor_width;
  j["extractor_layers"] = m.extractor_layers;
  j["block_width"] = m.block_width;
  j["slope"] = m.slope;
  j["backbone_channels"] = m.backbone_channels;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig m;
  m.variant = parse_variant(j.at("variant").get<std::string>());
  m.image_channels = j.at("image_channels");
  m.classes = j.at("classes");
  m.extractor_width = j.at("extractor_width");
  m.extractor_layers = j.at("extractor_layers");
  m.block_width = j.at("block_width");
  m.slope = j.at("slope");
  m.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
  return m;
}

struct CheckpointInfo {
  ModelConfig model;
  std::string task;
  std::uint64_t seed = 0;
  long step = 0;
  /// Flat key/value training configuration the run used.
  std::map<std::string, std::string> train_config;
};

inline void save_checkpoint(const std::filesystem::path& path, StdNet<float>& net, const CheckpointInfo& info) {
  nlohmann::ordered_json manifest;
  manifest["format"] = "stdnet-checkpoint";
  manifest["model"] = model_config_to_json(net.config());
  manifest["task"] = info.task;
  manifest["seed"] = info.seed;
  manifest["step"] = info.step;
  manifest["train_config"] = info.train_config;
  auto arrays = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  auto params = net.parameters();
  for (const auto& p : params) {
    const Shape s = p.value->shape();
    arrays.push_back({{"name", p.name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}, {"count", p.value->size()}});
    offset += p.value->size();
  }
  manifest["arrays"] = arrays;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, 8);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : params)
      out.write(reinterpret_cast<const char*>(p.value->values().data()),
                static_cast<std::streamsize>(p.value->size() * sizeof(float)));
    if (!out) throw Error("short write to checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
  CheckpointInfo info;
  StdNet<float> net;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error("not a checkpoint archive: " + path.string());
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || version != kCheckpointVersion) throw Error("unsupported checkpoint version in " + path.string());
  if (len > (std::uint64_t{1} << 30)) throw Error("corrupt checkpoint manifest in " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("truncated checkpoint " + path.string());
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(text);
  } catch (const std::exception& e) {
    throw Error("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  CheckpointInfo info;
  info.model = model_config_from_json(manifest.at("model"));
  info.task = manifest.at("task");
  info.seed = manifest.at("seed");
  info.step = manifest.at("step");
  info.train_config = manifest.at("train_config").get<std::map<std::string, std::string>>();

  LoadedCheckpoint out{info, StdNet<float>(info.model)};
  auto params = out.net.parameters();
  const auto& arrays = manifest.at("arrays");
  if (arrays.size() != params.size())
    throw Error("checkpoint holds " + std::to_string(arrays.size()) + " arrays, model expects " +
                std::to_string(params.size()));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& a = arrays[k];
    if (a.at("name") != params[k].name) throw Error("checkpoint array '" + a.at("name").get<std::string>() +
                                                     "' does not match parameter '" + params[k].name + "'");
    if (a.at("count").get<std::size_t>() != params[k].value->size())
      throw Error("checkpoint array '" + params[k].name + "' has the wrong size");
    in.read(reinterpret_cast<char*>(params[k].value->values().data()),
            static_cast<std::streamsize>(params[k].value->size() * sizeof(float)));
    if (!in) throw Error("truncated checkpoint " + path.string());
  }
  return out;
}

}  // namespace stdnet
