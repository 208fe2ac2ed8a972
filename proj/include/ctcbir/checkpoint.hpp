// Copyright (c) 2026, The ctcbir Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Checkpoint container, all integers little-endian:
//
//   magic    8 bytes  "CTCBIRCK"
//   version  u32      1
//   hlen     u64      header length
//   header   hlen     UTF-8 JSON: dtype, encoder, head, layers, meta
//   params   n * sizeof(dtype), little-endian
//   checksum u64      FNV-1a 64 of every preceding byte
//
// The fingerprint identifies the model: FNV-1a 64 of the canonical
// {"dtype","encoder","head"} JSON followed by the stored parameter bytes. It
// ignores `meta`, so retagging a checkpoint does not invalidate embedding stores.

#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "ctcbir/core/bytes.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/core/hash.hpp"
#include "ctcbir/model.hpp"

namespace ctcbir {

inline constexpr char kCheckpointMagic[8] = {'C', 'T', 'C', 'B', 'I', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  Model<T> model;
  nlohmann::json meta;
  std::string fingerprint;
};

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "float32" : "float64";
}

inline std::string fingerprint_of(const EncoderSpec& enc, const HeadSpec& head, const std::string& dtype,
                                  std::span<const std::uint8_t> param_bytes) {
  Fnv1a64 h;
  const nlohmann::json spec = {{"encoder", enc}, {"head", head}, {"dtype", dtype}};
  h.update(spec.dump());
  h.update(param_bytes);
  return to_hex(h.digest());
}

template <typename T>
std::string model_fingerprint(const Model<T>& m) {
  return fingerprint_of(m.encoder_spec(), m.head_spec(), dtype_name<T>(),
                        {reinterpret_cast<const std::uint8_t*>(m.params().data()), m.params().size() * sizeof(T)});
}

template <typename T>
Bytes encode_checkpoint(const Model<T>& m, const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json layers = nlohmann::json::array();
  auto describe = [&](const char* part, const nn::Sequential<T>& net) {
    for (std::size_t i = 0; i < net.size(); ++i)
      layers.push_back({{"part", part}, {"layer", net.layer(i).name()}, {"params", net.layer(i).param_count()}});
  };
  describe("encoder", m.encoder());
  describe("projector", m.projector());
  describe("predictor", m.predictor());
  const nlohmann::json header = {{"format", "ctcbir-checkpoint"},
                                 {"dtype", dtype_name<T>()},
                                 {"encoder", m.encoder_spec()},
                                 {"head", m.head_spec()},
                                 {"param_count", m.param_count()},
                                 {"layers", layers},
                                 {"meta", meta}};
  const std::string text = header.dump();
  Bytes out;
  put_bytes(out, std::string_view(kCheckpointMagic, 8));
  put_le(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  put_bytes(out, text);
  for (T v : m.params()) put_le(out, v);
  Fnv1a64 h;
  h.update(out);
  put_le(out, h.digest());
  return out;
}

template <typename T>
Checkpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.take(8, "checkpoint magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0) throw FormatError("not a ctcbir checkpoint", 0);
  const auto version = r.get<std::uint32_t>("checkpoint version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 8);
  const auto hlen = r.get<std::uint64_t>("checkpoint header length");
  if (hlen > r.remaining()) throw FormatError("truncated checkpoint header", r.pos());
  const auto header_pos = r.pos();
  const auto header_bytes = r.take(hlen, "checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what(), header_pos + e.byte);
  }
  const auto dtype = header.at("dtype").get<std::string>();
  const std::size_t width = dtype == "float32" ? 4 : dtype == "float64" ? 8 : 0;
  if (width == 0) throw FormatError("unknown checkpoint dtype " + dtype, header_pos);

  Model<T> model(header.at("encoder").get<EncoderSpec>(), header.at("head").get<HeadSpec>());
  const auto n = header.at("param_count").get<std::size_t>();
  if (n != model.param_count())
    throw FormatError("checkpoint param_count does not match its architecture", header_pos);
  const auto blob = r.take(n * width, "checkpoint parameters");
  const auto body_end = r.pos();
  const auto stored = r.get<std::uint64_t>("checkpoint checksum");
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint", r.pos());
  Fnv1a64 h;
  h.update(bytes.first(body_end));
  if (h.digest() != stored) throw ChecksumError("checkpoint checksum mismatch", body_end);

  for (std::size_t i = 0; i < n; ++i) {
    if (width == 4) {
      float v;
      std::memcpy(&v, blob.data() + 4 * i, 4);
      model.params()[i] = static_cast<T>(v);
    } else {
      double v;
      std::memcpy(&v, blob.data() + 8 * i, 8);
      model.params()[i] = static_cast<T>(v);
    }
  }
  auto fp = fingerprint_of(model.encoder_spec(), model.head_spec(), dtype, blob);
  return {std::move(model), header.value("meta", nlohmann::json::object()), std::move(fp)};
}

template <typename T>
void save_checkpoint(const Model<T>& m, const std::filesystem::path& path,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  write_file_atomic(path, encode_checkpoint(m, meta));
}

template <typename T = float>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file(path));
}

}  // namespace ctcbir
