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

/**
 * @file imaging.hpp
 * @brief CT volumes, Hounsfield windowing, and the balanced slice manifest.
 *
 * Volumes are stored depth-major: slice k (the axial index) is a contiguous
 * H x W plane. Windowing clamps HU to [low, high] and maps that interval
 * linearly onto [0, 1]. The manifest samples a fixed number of liver and
 * liver-free slices from every volume; volumes are split by position after
 * sorting by volume_id, so no volume contributes to both splits.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctcbir/core/array.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/core/log.hpp"
#include "ctcbir/core/rng.hpp"

namespace ctcbir {

inline constexpr int kHuMin = -1024;
inline constexpr int kHuMax = 3071;

inline std::int16_t saturate_hu(double v) {
  if (std::isnan(v)) return 0;
  return static_cast<std::int16_t>(std::clamp(std::lround(std::clamp(v, -1e9, 1e9)), long{kHuMin}, long{kHuMax}));
}

struct ClipWindow {
  int low = 0;
  int high = 0;

  void validate() const {
    if (low >= high)
      throw InvalidArgument("clip window needs low < high, got (" + std::to_string(low) + ", " +
                            std::to_string(high) + ")");
  }
  bool operator==(const ClipWindow&) const = default;
};

/// Liver-focused window; drops most of the non-liver soft tissue.
inline constexpr ClipWindow kNarrowWindow{50, 150};
/// Keeps nearly all liver HU; also used at test time.
inline constexpr ClipWindow kWideWindow{-200, 300};

inline void to_json(nlohmann::json& j, const ClipWindow& w) { j = nlohmann::json::array({w.low, w.high}); }
inline void from_json(const nlohmann::json& j, ClipWindow& w) {
  w.low = j.at(0).get<int>();
  w.high = j.at(1).get<int>();
  w.validate();
}

struct CTVolume {
  std::string volume_id;
  int depth = 0;
  int height = 0;
  int width = 0;
  std::vector<std::int16_t> voxels;  // depth-major
  std::optional<std::vector<std::uint8_t>> liver_mask;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }

  void validate() const {
    if (depth <= 0 || height <= 0 || width <= 0) throw InvalidArgument("volume " + volume_id + ": empty shape");
    if (voxels.size() != plane() * depth) throw AlignmentError("volume " + volume_id + ": voxel count mismatch");
    if (liver_mask && liver_mask->size() != voxels.size())
      throw AlignmentError("volume " + volume_id + ": mask shape differs from image shape");
    for (double s : spacing)
      if (!(s > 0)) throw InvalidArgument("volume " + volume_id + ": spacing must be positive");
  }

  HuSlice slice(int k) const {
    check_index(k);
    HuSlice s(height, width);
    std::copy_n(voxels.begin() + static_cast<std::ptrdiff_t>(plane() * k), plane(), s.data.begin());
    return s;
  }

  std::optional<BinaryMask> mask_slice(int k) const {
    check_index(k);
    if (!liver_mask) return std::nullopt;
    BinaryMask m(height, width);
    std::copy_n(liver_mask->begin() + static_cast<std::ptrdiff_t>(plane() * k), plane(), m.data.begin());
    return m;
  }

  std::size_t mask_count(int k) const {
    if (!liver_mask) return 0;
    auto first = liver_mask->begin() + static_cast<std::ptrdiff_t>(plane() * k);
    return static_cast<std::size_t>(std::count_if(first, first + static_cast<std::ptrdiff_t>(plane()),
                                                  [](std::uint8_t v) { return v != 0; }));
  }

 private:
  void check_index(int k) const {
    if (k < 0 || k >= depth) throw InvalidArgument("slice index out of range: " + std::to_string(k));
  }
};

/// (clamp(hu, low, high) - low) / (high - low), pixelwise.
template <typename Out = float, typename In>
  requires std::is_arithmetic_v<In>
Array2D<Out> clip_and_scale(const Array2D<In>& hu, const ClipWindow& window) {
  window.validate();
  const double low = window.low, span = static_cast<double>(window.high) - window.low;
  Array2D<Out> out(hu.rows, hu.cols);
  for (std::size_t i = 0; i < hu.data.size(); ++i) {
    const double v = std::clamp(static_cast<double>(hu.data[i]), low, static_cast<double>(window.high));
    out.data[i] = static_cast<Out>((v - low) / span);
  }
  return out;
}

/// Stacks a single-channel image three times along the channel axis.
template <typename T>
Image<T> pseudo_rgb(const Array2D<T>& img) {
  Image<T> out(3, img.rows, img.cols);
  for (int c = 0; c < 3; ++c) std::copy(img.data.begin(), img.data.end(), out.data.begin() + c * out.plane());
  return out;
}

enum class Split { kTrain, kTest };

inline const char* to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw InvalidArgument("unknown split: " + s);
}

inline std::string make_slice_id(const std::string& volume_id, int slice_index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "_s%04d", slice_index);
  return volume_id + buf;
}

struct SliceRecord {
  std::string slice_id;
  std::string volume_id;
  int slice_index = 0;
  HuSlice hu;
  bool liver_label = false;
  std::optional<BinaryMask> liver_mask;
  Split split = Split::kTrain;
};

struct SamplingOptions {
  int n_liver = 5;
  int n_nonliver = 5;
  /// A slice counts as liver when its mask has at least this many nonzero pixels.
  std::size_t min_liver_pixels = 1;
};

/**
 * Draws `n_liver` slices whose mask meets the liver threshold and
 * `n_nonliver` slices with an empty mask, uniformly without replacement
 * within each stratum. Records come back in ascending slice order.
 *
 * Throws VolumeSkipped when either stratum is too small; the volume should
 * then be excluded whole rather than partially sampled.
 */
inline std::vector<SliceRecord> sample_slices(const CTVolume& volume, const SamplingOptions& opt,
                                              std::uint64_t rng_seed, Split split = Split::kTrain) {
  volume.validate();
  if (!volume.liver_mask) throw VolumeSkipped("volume " + volume.volume_id + " has no liver mask");
  if (opt.n_liver < 0 || opt.n_nonliver < 0) throw InvalidArgument("negative stratum size");
  std::vector<int> liver, nonliver;
  for (int k = 0; k < volume.depth; ++k) {
    const auto n = volume.mask_count(k);
    if (n == 0)
      nonliver.push_back(k);
    else if (n >= opt.min_liver_pixels)
      liver.push_back(k);
  }
  if (liver.size() < static_cast<std::size_t>(opt.n_liver) ||
      nonliver.size() < static_cast<std::size_t>(opt.n_nonliver)) {
    throw VolumeSkipped("volume " + volume.volume_id + ": " + std::to_string(liver.size()) + " liver / " +
                        std::to_string(nonliver.size()) + " non-liver slices, need " +
                        std::to_string(opt.n_liver) + " / " + std::to_string(opt.n_nonliver));
  }

  Rng rng(rng_seed);
  auto draw = [&rng](std::vector<int>& pool, int n) {
    // Partial Fisher-Yates: the first n entries become the sample.
    for (int i = 0; i < n; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.index(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(n);
  };
  draw(liver, opt.n_liver);
  draw(nonliver, opt.n_nonliver);

  std::vector<int> chosen(liver);
  chosen.insert(chosen.end(), nonliver.begin(), nonliver.end());
  std::sort(chosen.begin(), chosen.end());

  std::vector<SliceRecord> out;
  out.reserve(chosen.size());
  for (int k : chosen) {
    SliceRecord r;
    r.slice_id = make_slice_id(volume.volume_id, k);
    r.volume_id = volume.volume_id;
    r.slice_index = k;
    r.hu = volume.slice(k);
    r.liver_mask = volume.mask_slice(k);
    r.liver_label = volume.mask_count(k) > 0;
    r.split = split;
    out.push_back(std::move(r));
  }
  return out;
}

struct StratumCounts {
  int liver = 0;
  int nonliver = 0;
  int total() const noexcept { return liver + nonliver; }
  bool operator==(const StratumCounts&) const = default;
};

struct DatasetManifest {
  std::vector<SliceRecord> records;
  std::uint64_t seed = 0;
  int n_train_volumes = 0;
  SamplingOptions sampling;
  std::map<std::string, StratumCounts> counts;  // keyed by split name
  std::vector<std::string> skipped_volumes;
  std::vector<std::string> warnings;
  /// volume_id -> file the volume was loaded from; empty when built in memory.
  std::map<std::string, std::string> volume_sources;

  std::vector<const SliceRecord*> split(Split s) const {
    std::vector<const SliceRecord*> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }
};

/// Orders ids with digit runs compared by value, so "liver_2" precedes "liver_10".
inline bool natural_less(const std::string& a, const std::string& b) {
  auto digit = [](char c) { return c >= '0' && c <= '9'; };
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (digit(a[i]) && digit(b[j])) {
      const std::size_t i0 = i, j0 = j;
      while (i < a.size() && digit(a[i])) ++i;
      while (j < b.size() && digit(b[j])) ++j;
      auto x = a.substr(i0, i - i0), y = b.substr(j0, j - j0);
      x.erase(0, std::min(x.find_first_not_of('0'), x.size()));
      y.erase(0, std::min(y.find_first_not_of('0'), y.size()));
      if (x.size() != y.size()) return x.size() < y.size();
      if (x != y) return x < y;
    } else {
      if (a[i] != b[j]) return a[i] < b[j];
      ++i;
      ++j;
    }
  }
  if ((i < a.size()) != (j < b.size())) return j < b.size();
  return a < b;
}

/// Loads one volume by id. Lets manifest building stream volumes from disk.
using VolumeLoader = std::function<CTVolume(const std::string& volume_id)>;

/**
 * Samples every volume and assigns the first `n_train_volumes` (in natural
 * volume_id order) to train and the remainder to test. Skipped volumes keep their slot
 * in the ordering.
 */
inline DatasetManifest build_manifest(std::vector<std::string> volume_ids, const VolumeLoader& load,
                                      int n_train_volumes, std::uint64_t seed,
                                      const SamplingOptions& sampling = {}) {
  if (volume_ids.empty()) throw InvalidArgument("build_manifest: empty volume list");
  if (n_train_volumes < 0) throw InvalidArgument("build_manifest: negative n_train_volumes");
  std::sort(volume_ids.begin(), volume_ids.end(), natural_less);
  if (std::adjacent_find(volume_ids.begin(), volume_ids.end()) != volume_ids.end())
    throw DuplicateId("build_manifest: duplicate volume_id");

  DatasetManifest m;
  m.seed = seed;
  m.n_train_volumes = n_train_volumes;
  m.sampling = sampling;
  m.counts["train"] = {};
  m.counts["test"] = {};
  for (std::size_t i = 0; i < volume_ids.size(); ++i) {
    const Split split = i < static_cast<std::size_t>(n_train_volumes) ? Split::kTrain : Split::kTest;
    const CTVolume vol = load(volume_ids[i]);
    if (vol.volume_id != volume_ids[i]) throw InvalidArgument("loader returned volume " + vol.volume_id);
    std::vector<SliceRecord> recs;
    try {
      recs = sample_slices(vol, sampling, derive_seed(seed, vol.volume_id), split);
    } catch (const VolumeSkipped& e) {
      log_warning(std::string("skipping: ") + e.what());
      m.skipped_volumes.push_back(vol.volume_id);
      continue;
    }
    auto& c = m.counts[to_string(split)];
    for (auto& r : recs) {
      (r.liver_label ? c.liver : c.nonliver)++;
      m.records.push_back(std::move(r));
    }
  }
  for (const char* s : {"train", "test"}) {
    if (m.counts[s].total() == 0) {
      m.warnings.push_back(std::string(s) + " split is empty");
      log_warning(m.warnings.back());
    }
  }
  return m;
}

inline DatasetManifest build_manifest(std::span<const CTVolume> volumes, int n_train_volumes, std::uint64_t seed,
                                      const SamplingOptions& sampling = {}) {
  std::map<std::string, const CTVolume*> by_id;
  std::vector<std::string> ids;
  for (const auto& v : volumes) {
    by_id[v.volume_id] = &v;
    ids.push_back(v.volume_id);
  }
  return build_manifest(
      std::move(ids), [&](const std::string& id) { return *by_id.at(id); }, n_train_volumes, seed, sampling);
}

/// Serializes provenance only; pixel data stays in the volume files.
inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["seed"] = m.seed;
  j["n_train_volumes"] = m.n_train_volumes;
  j["sampling"] = {{"n_liver", m.sampling.n_liver},
                   {"n_nonliver", m.sampling.n_nonliver},
                   {"min_liver_pixels", m.sampling.min_liver_pixels}};
  auto& counts = j["counts"];
  for (const auto& [split, c] : m.counts) counts[split] = {{"liver", c.liver}, {"nonliver", c.nonliver}};
  j["skipped_volumes"] = m.skipped_volumes;
  j["warnings"] = m.warnings;
  j["volumes"] = m.volume_sources;
  auto& recs = j["records"] = nlohmann::json::array();
  for (const auto& r : m.records) {
    recs.push_back({{"slice_id", r.slice_id},
                    {"volume_id", r.volume_id},
                    {"slice_index", r.slice_index},
                    {"liver_label", r.liver_label},
                    {"split", to_string(r.split)}});
  }
  return j;
}

inline std::string manifest_dump(const DatasetManifest& m) { return manifest_to_json(m).dump(2) + "\n"; }

/// Rebuilds a manifest from JSON, reloading pixel data through `load`.
inline DatasetManifest manifest_from_json(const nlohmann::json& j, const VolumeLoader& load) {
  DatasetManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.n_train_volumes = j.at("n_train_volumes").get<int>();
  const auto& s = j.at("sampling");
  m.sampling = {s.at("n_liver").get<int>(), s.at("n_nonliver").get<int>(),
                s.at("min_liver_pixels").get<std::size_t>()};
  for (const auto& [split, c] : j.at("counts").items())
    m.counts[split] = {c.at("liver").get<int>(), c.at("nonliver").get<int>()};
  m.skipped_volumes = j.at("skipped_volumes").get<std::vector<std::string>>();
  m.warnings = j.value("warnings", std::vector<std::string>{});
  m.volume_sources = j.at("volumes").get<std::map<std::string, std::string>>();

  std::optional<CTVolume> current;
  for (const auto& jr : j.at("records")) {
    SliceRecord r;
    r.slice_id = jr.at("slice_id").get<std::string>();
    r.volume_id = jr.at("volume_id").get<std::string>();
    r.slice_index = jr.at("slice_index").get<int>();
    r.liver_label = jr.at("liver_label").get<bool>();
    r.split = parse_split(jr.at("split").get<std::string>());
    if (!current || current->volume_id != r.volume_id) current = load(r.volume_id);
    r.hu = current->slice(r.slice_index);
    r.liver_mask = current->mask_slice(r.slice_index);
    if (r.liver_mask) {
      const bool any = std::any_of(r.liver_mask->data.begin(), r.liver_mask->data.end(),
                                   [](std::uint8_t v) { return v != 0; });
      if (any != r.liver_label) throw AlignmentError("manifest label disagrees with mask for " + r.slice_id);
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

}  // namespace ctcbir
