#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grdd/encoders.hpp"
#include "grdd/errors.hpp"
#include "grdd/nn.hpp"

// Checkpoint file layout (all integers little-endian):
//   8 bytes  magic "GRDDCKPT"
//   u32      format version (1)
//   u64      header length in bytes
//   header   UTF-8 JSON: architecture, input shape, seed, stage, pooling,
//            optional tags, and a "tensors" list of {name, shape, offset}
//            where offset counts float64 values into the payload
//   payload  float64 values of every tensor, back to back
//   u64      FNV-1a checksum of the payload bytes
// Tensor names follow <module>.<layer>.<param>, e.g. encoder.block0.conv.weight.

namespace grdd {

struct CheckpointHeader {
  Architecture architecture = Architecture::tiny;
  InputShape input;
  std::uint64_t seed = 0;
  int stage = 1;
  Pooling pooling = Pooling::global_average;
  nlohmann::json tags = nlohmann::json::object();  // e.g. ablation mode, class count
};

struct Checkpoint {
  CheckpointHeader header;
  std::map<std::string, Tensor> tensors;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'G', 'R', 'D', 'D', 'C', 'K', 'P', 'T'};

inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError("checkpoint is truncated");
    v |= static_cast<std::uint64_t>(c & 0xff) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                            const std::vector<const ParameterSet*>& sets) {
  nlohmann::json h;
  h["architecture"] = to_string(header.architecture);
  h["input_shape"] = {header.input.height, header.input.width, header.input.channels};
  h["seed"] = header.seed;
  h["stage"] = header.stage;
  h["pooling"] = to_string(header.pooling);
  h["tags"] = header.tags;
  nlohmann::json list = nlohmann::json::array();
  std::size_t offset = 0;
  std::vector<const Tensor*> order;
  for (const ParameterSet* set : sets) {
    for (const auto& p : *set) {
      list.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
      offset += p.value.size();
      order.push_back(&p.value);
    }
  }
  h["tensors"] = list;
  const std::string text = h.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open checkpoint '" + path.string() + "' for writing");
  os.write(detail::kCheckpointMagic, 8);
  detail::put_u32(os, 1);
  detail::put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  for (const Tensor* t : order) {
    for (double v : t->values()) {
      const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        const auto byte = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        os.put(static_cast<char>(byte));
        checksum = (checksum ^ byte) * 0x100000001b3ULL;
      }
    }
  }
  detail::put_u64(os, checksum);
  if (!os) throw CheckpointError("write to checkpoint '" + path.string() + "' failed");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  const std::string where = "checkpoint '" + path.string() + "'";
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, detail::kCheckpointMagic)) {
    throw CheckpointError(where + " is not a checkpoint file (bad magic)");
  }
  try {
    const std::uint32_t version = detail::get_u32(is, where);
    if (version != 1) throw CheckpointError(where + " has unsupported version " + std::to_string(version));
    const std::uint64_t header_len = detail::get_u64(is);
    if (header_len > std::filesystem::file_size(path)) throw CheckpointError(where + " has a corrupt header length");
    std::string text(header_len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) throw CheckpointError(where + " is truncated");
    const nlohmann::json h = nlohmann::json::parse(text);

    Checkpoint ck;
    ck.header.architecture = parse_architecture(h.at("architecture").get<std::string>());
    const auto shape = h.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw CheckpointError(where + " has a malformed input shape");
    ck.header.input = {shape[0], shape[1], shape[2]};
    ck.header.seed = h.at("seed").get<std::uint64_t>();
    ck.header.stage = h.at("stage").get<int>();
    ck.header.pooling = parse_pooling(h.at("pooling").get<std::string>());
    ck.header.tags = h.value("tags", nlohmann::json::object());

    std::uint64_t checksum = 0xcbf29ce484222325ULL;
    for (const auto& entry : h.at("tensors")) {
      const auto dims = entry.at("shape").get<std::vector<std::size_t>>();
      Tensor t(dims);
      for (double& v : t.values()) {
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) {
          const int c = is.get();
          if (c == EOF) throw CheckpointError(where + " is truncated");
          const auto byte = static_cast<unsigned char>(c);
          checksum = (checksum ^ byte) * 0x100000001b3ULL;
          bits |= static_cast<std::uint64_t>(byte) << (8 * i);
        }
        v = std::bit_cast<double>(bits);
      }
      ck.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    if (detail::get_u64(is) != checksum) throw CheckpointError(where + " failed its checksum (corrupt payload)");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + " has a malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(where + ": " + e.what());
  }
}

// Copies every entry of `params` from the checkpoint; names and shapes must
// match exactly.
inline void restore_parameters(const Checkpoint& ck, ParameterSet& params, const std::string& what) {
  for (auto& p : params) {
    const auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end()) throw CheckpointError(what + ": checkpoint lacks tensor '" + p.name + "'");
    if (it->second.shape() != p.value.shape()) {
      throw CheckpointError(what + ": tensor '" + p.name + "' has shape " + Tensor::shape_string(it->second.shape()) +
                            ", model expects " + Tensor::shape_string(p.value.shape()));
    }
    p.value = it->second;
  }
}

inline Encoder encoder_from_checkpoint(const Checkpoint& ck) {
  Encoder e = Encoder::build({ck.header.architecture, ck.header.input, ck.header.seed, ck.header.pooling});
  restore_parameters(ck, e.parameters(), "encoder");
  return e;
}

}  // namespace grdd
