#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>

#include "appt/config_json.hpp"
#include "appt/network.hpp"
#include "appt/pointcloud.hpp"
#include "appt/random.hpp"

namespace appt {

inline constexpr std::string_view kCheckpointMagic = "APPT1";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  NetworkConfig config;
  ParamStore params;
  int format_version = kCheckpointVersion;
};

// Layout:
//   "APPT1"
//   u64 LE  metadata length
//   metadata JSON: {"format_version", "config", "tensors": [{"name", "shape"}...],
//                   "payload_fnv1a"}
//   f64 LE  tensor values, tensors in declaration order, row-major

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xF];
  return s;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string payload;
  payload.reserve(ck.params.scalar_count() * 8);
  Json tensors = Json::array();
  for (const auto& e : ck.params.entries()) {
    tensors.push_back({{"name", e.name}, {"shape", e.value.shape()}});
    for (double v : e.value.data()) detail::put_u64(payload, std::bit_cast<std::uint64_t>(v));
  }
  Json meta{{"format_version", ck.format_version},
            {"config", to_json(ck.config)},
            {"tensors", std::move(tensors)},
            {"payload_fnv1a", detail::hex64(fnv1a(payload))}};
  const std::string meta_text = meta.dump();
  std::string out(kCheckpointMagic);
  detail::put_u64(out, meta_text.size());
  out += meta_text;
  out += payload;
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  const std::size_t head = kCheckpointMagic.size();
  if (bytes.size() < head + 8 || bytes.substr(0, head) != kCheckpointMagic)
    throw FormatError("not a checkpoint (missing APPT1 magic)");
  const std::uint64_t meta_len = detail::get_u64(bytes, head);
  if (meta_len > bytes.size() - head - 8) throw FormatError("checkpoint metadata length exceeds file size");
  Json meta;
  try {
    meta = Json::parse(bytes.substr(head + 8, meta_len));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.format_version = meta.at("format_version").get<int>();
    if (ck.format_version != kCheckpointVersion)
      throw FormatError("unsupported checkpoint version " + std::to_string(ck.format_version));
    ck.config = network_from_json(meta.at("config"), "config");
    std::string_view payload = bytes.substr(head + 8 + meta_len);
    if (meta.at("payload_fnv1a").get<std::string>() != detail::hex64(fnv1a(payload)))
      throw FormatError("checkpoint payload checksum mismatch");
    std::size_t at = 0;
    for (const auto& t : meta.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      const std::size_t n = shape_size(shape);
      if (payload.size() - at < n * 8) throw FormatError("checkpoint payload truncated");
      std::vector<double> data(n);
      for (std::size_t i = 0; i < n; ++i, at += 8) data[i] = std::bit_cast<double>(detail::get_u64(payload, at));
      ck.params.add(t.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }
    if (at != payload.size()) throw FormatError("checkpoint payload has trailing bytes");
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint configuration invalid: ") + e.what());
  }
  try {
    check_network_params(ck.config, ck.params);
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace appt
