#pragma once

// Checkpoint file: 8-byte magic, u64 little-endian header length, JSON
// header, then every tensor as little-endian doubles in header order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmmr/error.hpp"
#include "gmmr/numerics.hpp"

namespace gmmr {

inline constexpr std::array<char, 8> kCheckpointMagic = {'G', 'M', 'M', 'R', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  const Tensor* tensor;
};

struct Checkpoint {
  nlohmann::json meta;                 // free-form metadata (config, vocab sizes)
  std::map<std::string, Tensor> tensors;
  std::vector<std::string> order;      // names in file order

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw InputError("checkpoint has no tensor named " + name);
    return it->second;
  }
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw InputError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                             const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointVersion;
  header["meta"] = meta;
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  for (const auto& t : tensors) {
    nlohmann::ordered_json e;
    e["name"] = t.name;
    e["shape"] = t.tensor->shape();
    list.push_back(e);
  }
  header["tensors"] = list;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    for (double v : t.tensor->values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("checkpoint not found: " + path.string());
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw InputError("not a checkpoint file: " + path.string());
  }
  const std::uint64_t len = detail::get_u64(in);
  if (len > (1ULL << 30)) throw InputError("implausible checkpoint header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw InputError("truncated checkpoint");
  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(text);
    if (header.at("format_version").get<int>() != kCheckpointVersion) {
      throw InputError("unsupported checkpoint version " + header.at("format_version").dump());
    }
    ck.meta = header.at("meta");
    for (const auto& e : header.at("tensors")) {
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw InputError("checkpoint tensor must have rank 2");
      Tensor t(shape[0], shape[1]);
      for (double& v : t.values()) v = std::bit_cast<double>(detail::get_u64(in));
      const auto name = e.at("name").get<std::string>();
      ck.order.push_back(name);
      ck.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed checkpoint header: " + std::string(e.what()));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw InputError("trailing bytes in checkpoint");
  return ck;
}

}  // namespace gmmr
