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

// Volume containers.
//
// Raw format: `<stem>.json` holds {"shape":[D,H,W],"dtype":"int16","byte_order":"little"}
// plus optional "volume_id", "spacing", "data_file", "mask_file". Voxels live in
// `<stem>.raw` (D*H*W little-endian int16), the liver mask in `<stem>.mask.raw`
// (D*H*W uint8). NIfTI-1 files (.nii / .nii.gz) are read with x fastest and z
// (the axial axis) slowest, so each z plane becomes one slice.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctcbir/core/bytes.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/imaging.hpp"

namespace ctcbir {

namespace fs = std::filesystem;

enum class VolumeFormat { kAuto, kRaw, kNifti };

// ---------------------------------------------------------------------------
// gzip

inline bool is_gzip(std::span<const std::uint8_t> data) {
  return data.size() >= 2 && data[0] == 0x1f && data[1] == 0x8b;
}

inline Bytes gunzip(std::span<const std::uint8_t> data) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw Error("inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(data.data());
  zs.avail_in = static_cast<uInt>(data.size());
  Bytes out;
  std::array<std::uint8_t, 1 << 16> buf;
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf.data();
    zs.avail_out = buf.size();
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      const auto at = zs.total_in;
      inflateEnd(&zs);
      throw FormatError("corrupt gzip stream", at);
    }
    out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      const auto at = zs.total_in;
      inflateEnd(&zs);
      throw FormatError("truncated gzip stream", at);
    }
  }
  inflateEnd(&zs);
  return out;
}

inline Bytes gzip(std::span<const std::uint8_t> data) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw Error("deflateInit2 failed");
  Bytes out(deflateBound(&zs, static_cast<uLong>(data.size())) + 32);
  zs.next_in = const_cast<Bytef*>(data.data());
  zs.avail_in = static_cast<uInt>(data.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw Error("gzip compression failed");
  out.resize(zs.total_out);
  return out;
}

// ---------------------------------------------------------------------------
// Raw format

struct RawPaths {
  fs::path header, data, mask;
};

inline RawPaths raw_paths(const fs::path& header) {
  auto stem = header;
  stem.replace_extension();
  RawPaths p{header, stem, stem};
  p.data += ".raw";
  p.mask += ".mask.raw";
  return p;
}

inline nlohmann::json parse_json_bytes(std::span<const std::uint8_t> bytes, const std::string& what) {
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(what + ": " + e.what(), e.byte);
  }
}

/// Builds a volume from an already-read raw header and blobs.
inline CTVolume decode_raw_volume(const nlohmann::json& header, std::span<const std::uint8_t> voxels,
                                  std::optional<std::span<const std::uint8_t>> mask, std::string volume_id) {
  std::array<int, 3> shape{};
  try {
    const auto& s = header.at("shape");
    if (!s.is_array() || s.size() != 3) throw InvalidArgument("raw header: shape must be [D,H,W]");
    for (int i = 0; i < 3; ++i) shape[i] = s.at(i).get<int>();
    if (header.value("dtype", std::string("int16")) != "int16")
      throw InvalidArgument("raw header: only dtype int16 is supported");
    if (header.value("byte_order", std::string("little")) != "little")
      throw InvalidArgument("raw header: only little byte_order is supported");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("raw header: ") + e.what(), 0);
  }
  for (int d : shape)
    if (d <= 0) throw FormatError("raw header: non-positive dimension", 0);

  CTVolume v;
  v.volume_id = header.contains("volume_id") ? header["volume_id"].get<std::string>() : std::move(volume_id);
  v.depth = shape[0];
  v.height = shape[1];
  v.width = shape[2];
  if (header.contains("spacing")) v.spacing = header["spacing"].get<std::array<double, 3>>();
  const std::size_t n = static_cast<std::size_t>(v.depth) * v.plane();
  if (voxels.size() != n * 2)
    throw FormatError("raw voxels: expected " + std::to_string(n * 2) + " bytes, got " +
                          std::to_string(voxels.size()),
                      std::min(voxels.size(), n * 2));
  v.voxels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::int16_t x;
    std::memcpy(&x, voxels.data() + 2 * i, 2);
    v.voxels[i] = saturate_hu(x);
  }
  if (mask) {
    if (mask->size() != n)
      throw AlignmentError("mask has " + std::to_string(mask->size()) + " voxels, image has " + std::to_string(n));
    v.liver_mask.emplace(n);
    for (std::size_t i = 0; i < n; ++i) (*v.liver_mask)[i] = (*mask)[i] != 0 ? 1 : 0;
  }
  v.validate();
  return v;
}

inline nlohmann::json raw_header(const CTVolume& v) {
  return {{"shape", {v.depth, v.height, v.width}},
          {"dtype", "int16"},
          {"byte_order", "little"},
          {"volume_id", v.volume_id},
          {"spacing", v.spacing}};
}

inline Bytes encode_raw_voxels(const CTVolume& v) {
  Bytes out;
  out.reserve(v.voxels.size() * 2);
  for (auto x : v.voxels) put_le(out, x);
  return out;
}

/// Writes `<dir>/<volume_id>.json`, `.raw`, and `.mask.raw` when a mask exists. Returns the header path.
inline fs::path save_raw_volume(const CTVolume& v, const fs::path& dir) {
  v.validate();
  fs::create_directories(dir);
  const auto paths = raw_paths(dir / (v.volume_id + ".json"));
  write_file_atomic(paths.data, encode_raw_voxels(v));
  if (v.liver_mask) write_file_atomic(paths.mask, *v.liver_mask);
  write_file_atomic(paths.header, raw_header(v).dump(2) + "\n");
  return paths.header;
}

inline CTVolume load_raw_volume(const fs::path& header_path) {
  const auto header_bytes = read_file(header_path);
  const auto header = parse_json_bytes(header_bytes, header_path.string());
  auto paths = raw_paths(header_path);
  if (header.contains("data_file")) paths.data = header_path.parent_path() / header["data_file"].get<std::string>();
  if (header.contains("mask_file")) paths.mask = header_path.parent_path() / header["mask_file"].get<std::string>();
  const auto voxels = read_file(paths.data);
  std::optional<Bytes> mask;
  if (fs::exists(paths.mask)) mask = read_file(paths.mask);
  std::optional<std::span<const std::uint8_t>> mask_span;
  if (mask) mask_span = *mask;
  return decode_raw_volume(header, voxels, mask_span, header_path.stem().string());
}

// ---------------------------------------------------------------------------
// NIfTI-1

struct NiftiArray {
  std::array<int, 3> dims{};  // x, y, z
  std::array<double, 3> spacing{1, 1, 1};
  std::vector<double> values;  // x fastest
};

inline NiftiArray decode_nifti(std::span<const std::uint8_t> file) {
  Bytes inflated;
  std::span<const std::uint8_t> data = file;
  if (is_gzip(file)) {
    inflated = gunzip(file);
    data = inflated;
  }
  ByteReader r(data);
  if (r.get<std::int32_t>("nifti header") != 348) throw FormatError("not a NIfTI-1 file (sizeof_hdr != 348)", 0);
  r.take(36, "nifti header");
  std::array<std::int16_t, 8> dim{};
  for (auto& d : dim) d = r.get<std::int16_t>("nifti dim");
  r.take(70 - 56, "nifti header");
  const auto datatype = r.get<std::int16_t>("nifti datatype");
  r.get<std::int16_t>("nifti bitpix");
  r.get<std::int16_t>("nifti slice_start");
  std::array<float, 8> pixdim{};
  for (auto& p : pixdim) p = r.get<float>("nifti pixdim");
  const float vox_offset = r.get<float>("nifti vox_offset");
  float slope = r.get<float>("nifti scl_slope");
  const float inter = r.get<float>("nifti scl_inter");
  r.take(344 - 120, "nifti header");
  const auto magic = r.take(4, "nifti magic");
  if (std::memcmp(magic.data(), "n+1", 4) != 0 && std::memcmp(magic.data(), "ni1", 4) != 0)
    throw FormatError("bad NIfTI magic", 344);
  if (dim[0] < 3 || dim[0] > 7) throw FormatError("NIfTI volume must have 3 dimensions", 40);
  for (int i = 4; i <= dim[0]; ++i)
    if (dim[i] > 1) throw FormatError("NIfTI time/vector dimensions are not supported", 40 + 2 * i);

  NiftiArray out;
  for (int i = 0; i < 3; ++i) {
    if (dim[i + 1] <= 0) throw FormatError("non-positive NIfTI dimension", 42 + 2 * i);
    out.dims[i] = dim[i + 1];
    out.spacing[i] = pixdim[i + 1] > 0 ? pixdim[i + 1] : 1.0;
  }
  const std::size_t n = static_cast<std::size_t>(out.dims[0]) * out.dims[1] * out.dims[2];
  const std::size_t offset = static_cast<std::size_t>(vox_offset);
  if (offset < 348 || offset > data.size()) throw FormatError("bad vox_offset", 108);
  if (slope == 0.0f) slope = 1.0f;

  std::size_t width = 0;
  switch (datatype) {
    case 2: case 256: width = 1; break;
    case 4: case 512: width = 2; break;
    case 8: case 16: width = 4; break;
    case 64: width = 8; break;
    default: throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype), 70);
  }
  if (data.size() - offset < n * width)
    throw FormatError("truncated NIfTI voxel data", data.size());
  const std::uint8_t* p = data.data() + offset;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i, p += width) {
    double v = 0;
    switch (datatype) {
      case 2: v = *p; break;
      case 256: v = static_cast<std::int8_t>(*p); break;
      case 4: { std::int16_t x; std::memcpy(&x, p, 2); v = x; break; }
      case 512: { std::uint16_t x; std::memcpy(&x, p, 2); v = x; break; }
      case 8: { std::int32_t x; std::memcpy(&x, p, 4); v = x; break; }
      case 16: { float x; std::memcpy(&x, p, 4); v = x; break; }
      case 64: { double x; std::memcpy(&x, p, 8); v = x; break; }
    }
    out.values[i] = v * slope + inter;
  }
  return out;
}

/// Encodes int16 voxels (or a uint8 mask) as NIfTI-1, gzip-compressed when `compress`.
inline Bytes encode_nifti(std::span<const std::int16_t> voxels, std::array<int, 3> xyz,
                          std::array<double, 3> spacing, bool compress) {
  Bytes out;
  put_le<std::int32_t>(out, 348);
  out.resize(40, 0);
  const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(xyz[0]), static_cast<std::int16_t>(xyz[1]),
                                        static_cast<std::int16_t>(xyz[2]), 1, 1, 1, 1};
  for (auto d : dim) put_le(out, d);
  out.resize(70, 0);
  put_le<std::int16_t>(out, 4);   // datatype int16
  put_le<std::int16_t>(out, 16);  // bitpix
  put_le<std::int16_t>(out, 0);
  const std::array<float, 8> pixdim{1, static_cast<float>(spacing[0]), static_cast<float>(spacing[1]),
                                    static_cast<float>(spacing[2]), 1, 1, 1, 1};
  for (auto p : pixdim) put_le(out, p);
  put_le<float>(out, 352.0f);  // vox_offset
  put_le<float>(out, 1.0f);    // scl_slope
  put_le<float>(out, 0.0f);    // scl_inter
  out.resize(344, 0);
  put_bytes(out, std::string_view("n+1\0", 4));
  out.resize(352, 0);
  for (auto v : voxels) put_le(out, v);
  return compress ? gzip(out) : out;
}

inline CTVolume volume_from_nifti(const NiftiArray& img, const std::optional<NiftiArray>& mask, std::string id) {
  CTVolume v;
  v.volume_id = std::move(id);
  v.width = img.dims[0];
  v.height = img.dims[1];
  v.depth = img.dims[2];
  v.spacing = {img.spacing[2], img.spacing[1], img.spacing[0]};
  v.voxels.resize(img.values.size());
  std::transform(img.values.begin(), img.values.end(), v.voxels.begin(), saturate_hu);
  if (mask) {
    if (mask->dims != img.dims) throw AlignmentError("mask shape differs from image shape for " + v.volume_id);
    v.liver_mask.emplace(mask->values.size());
    std::transform(mask->values.begin(), mask->values.end(), v.liver_mask->begin(),
                   [](double x) -> std::uint8_t { return x != 0.0 ? 1 : 0; });
  }
  v.validate();
  return v;
}

inline std::string nifti_stem(const fs::path& p) {
  auto name = p.filename().string();
  for (const char* ext : {".nii.gz", ".nii"})
    if (name.size() > std::strlen(ext) && name.ends_with(ext)) return name.substr(0, name.size() - std::strlen(ext));
  return p.stem().string();
}

/// Companion mask: Decathlon layout (imagesTr/X -> labelsTr/X), else `<stem>_mask.nii[.gz]`.
inline std::optional<fs::path> find_nifti_mask(const fs::path& image) {
  const auto dir = image.parent_path();
  if (dir.filename() == "imagesTr" || dir.filename() == "imagesTs") {
    auto candidate = dir.parent_path() / (dir.filename() == "imagesTr" ? "labelsTr" : "labelsTs") / image.filename();
    if (fs::exists(candidate)) return candidate;
  }
  const auto stem = nifti_stem(image);
  for (const char* ext : {".nii.gz", ".nii"}) {
    auto candidate = dir / (stem + "_mask" + ext);
    if (fs::exists(candidate)) return candidate;
  }
  return std::nullopt;
}

inline VolumeFormat detect_format(const fs::path& path) {
  const auto name = path.filename().string();
  if (name.ends_with(".json")) return VolumeFormat::kRaw;
  if (name.ends_with(".nii") || name.ends_with(".nii.gz")) return VolumeFormat::kNifti;
  throw InvalidArgument("cannot infer volume format from " + name);
}

/// Loads a volume and its companion mask when one exists. HU are saturated to [-1024, 3071].
inline CTVolume load_volume(const fs::path& path, VolumeFormat format = VolumeFormat::kAuto,
                            std::optional<fs::path> mask_path = std::nullopt) {
  if (format == VolumeFormat::kAuto) format = detect_format(path);
  if (format == VolumeFormat::kRaw) {
    if (!mask_path) return load_raw_volume(path);
    auto v = load_raw_volume(path);
    const auto mask = read_file(*mask_path);
    if (mask.size() != v.voxels.size()) throw AlignmentError("mask size mismatch for " + v.volume_id);
    v.liver_mask.emplace(mask.size());
    std::transform(mask.begin(), mask.end(), v.liver_mask->begin(),
                   [](std::uint8_t x) -> std::uint8_t { return x != 0; });
    return v;
  }
  const auto img = decode_nifti(read_file(path));
  if (!mask_path) mask_path = find_nifti_mask(path);
  std::optional<NiftiArray> mask;
  if (mask_path) mask = decode_nifti(read_file(*mask_path));
  return volume_from_nifti(img, mask, nifti_stem(path));
}

/// Volume files under `dir`: raw headers (`*.json`) and NIfTI images, skipping
/// mask companions and label directories. Keyed by volume id, so ordered by it.
inline std::map<std::string, fs::path> scan_volume_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw NotFound("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  auto add = [&](const fs::path& p) {
    const auto name = p.filename().string();
    if (name.starts_with(".")) return;
    std::string id;
    if (name.ends_with(".json")) {
      id = p.stem().string();
    } else if (name.ends_with(".nii") || name.ends_with(".nii.gz")) {
      id = nifti_stem(p);
      if (id.ends_with("_mask")) return;
    } else {
      return;
    }
    if (!out.emplace(id, p).second) throw DuplicateId("duplicate volume id " + id + " in " + dir.string());
  };
  const auto images = dir / "imagesTr";
  const auto& root = fs::is_directory(images) ? images : dir;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_regular_file()) add(e.path());
  return out;
}

}  // namespace ctcbir
