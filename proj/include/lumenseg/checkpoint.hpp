#pragma once

// Checkpoint container:
//   bytes 0..7   magic "LSEGCKPT"
//   u32 LE       format version (1)
//   u64 LE       header length L
//   L bytes      JSON header {"spec":{...},"seed":n,"tensors":[{"name":s,"shape":[n,c,h,w]},...]}
//   payload      float32 LE arrays in header order

#include <json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "models.hpp"

namespace lumenseg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

inline constexpr std::array<char, 8> kCheckpointMagic = {'L', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const NetworkSpec& s) {
  return {{"kind", to_string(s.kind)},         {"depth", s.depth},
          {"base_filters", s.base_filters},    {"in_channels", s.in_channels},
          {"out_channels", s.out_channels},    {"input_size", s.input_size}};
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.kind = architecture_from_string(j.value("kind", to_string(s.kind)));
  s.depth = j.value("depth", s.depth);
  s.base_filters = j.value("base_filters", s.base_filters);
  s.in_channels = j.value("in_channels", s.in_channels);
  s.out_channels = j.value("out_channels", s.out_channels);
  s.input_size = j.value("input_size", s.input_size);
  s.validate();
  return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const Network& net) {
  nlohmann::json header;
  header["spec"] = to_json(net.spec());
  header["seed"] = net.seed();
  const auto names = net.state_names();
  const auto tensors = net.state();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& s = tensors[i]->shape();
    header["tensors"].push_back({{"name", names[i]}, {"shape", {s.n, s.c, s.h, s.w}}});
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* t : tensors) {
      out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
    }
    if (!out) throw IoError("short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw IoError(path.string() + " is not a checkpoint");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  if (!in || len > (1u << 26)) throw IoError("corrupt checkpoint header in " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(text);
  Network net(network_spec_from_json(header.at("spec")), header.value("seed", std::uint64_t{0}));
  auto tensors = net.state();
  const auto& listed = header.at("tensors");
  if (listed.size() != tensors.size()) throw IoError("checkpoint layout does not match its spec");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto shape = listed[i].at("shape").get<std::array<int, 4>>();
    const auto& s = tensors[i]->shape();
    if (shape != std::array<int, 4>{s.n, s.c, s.h, s.w}) {
      throw IoError("checkpoint tensor " + listed[i].value("name", "?") + " has unexpected shape");
    }
    in.read(reinterpret_cast<char*>(tensors[i]->data()), static_cast<std::streamsize>(tensors[i]->size() * sizeof(float)));
  }
  if (!in) throw IoError("truncated checkpoint " + path.string());
  return net;
}

}  // namespace lumenseg
