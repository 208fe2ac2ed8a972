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

// Synthetic abdominal phantoms with known liver geometry.
//
// Every slice is soft tissue (HU ~ U[-100, 40]) with 1-3 bone ellipses
// (HU ~ U[400, 1000]) fixed per volume. A contiguous run of slices also holds
// a liver ellipse (HU ~ N(55, 5) truncated to [50, 150]) whose radii shrink
// toward the ends of the run. Bone is drawn over liver; the mask marks the
// liver pixels that remain.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <filesystem>
#include <string>
#include <vector>

#include "ctcbir/augment.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/core/rng.hpp"
#include "ctcbir/imaging.hpp"
#include "ctcbir/volume_io.hpp"

namespace ctcbir {

struct PhantomOptions {
  int depth = 30;
  int height = 64;
  int width = 64;
  /// Fraction of slices in the liver run, drawn per volume.
  Interval liver_fraction{0.4, 0.6};
  /// Liver semi-axes as fractions of the image size, drawn per volume.
  Interval liver_radius{0.22, 0.35};
  /// Radius multiplier at the ends of the liver run.
  double liver_edge_scale = 0.5;
  Interval bone_radius{0.04, 0.10};
  int min_bones = 1;
  int max_bones = 3;
  /// Draw new bone ellipses for every slice instead of once per volume.
  bool bones_per_slice = false;
  double liver_mean = 55.0;
  double liver_std = 5.0;
  Interval liver_clip{50.0, 150.0};
  Interval background_hu{-100.0, 40.0};
  /// Draw one background level per volume from `background_hu`, plus uniform pixel noise of this width.
  bool background_per_volume = false;
  double background_noise_hu = 20.0;
  Interval bone_hu{400.0, 1000.0};

  void validate() const {
    if (depth < 2 || height < 8 || width < 8) throw InvalidArgument("phantom too small");
    if (min_bones < 0 || max_bones < min_bones) throw InvalidArgument("bad phantom bone count");
    if (!(liver_fraction.lo > 0 && liver_fraction.hi <= 1 && liver_fraction.lo <= liver_fraction.hi))
      throw InvalidArgument("bad phantom liver fraction");
    if (!(background_noise_hu >= 0)) throw InvalidArgument("bad phantom background noise");
    if (!(liver_std > 0) || !(liver_clip.lo < liver_clip.hi)) throw InvalidArgument("bad phantom liver intensity");
  }
};

struct Ellipse {
  double cy = 0, cx = 0, ry = 1, rx = 1;
  bool contains(int y, int x) const {
    const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
  }
};

inline std::string phantom_volume_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom_%03d", index);
  return buf;
}

inline CTVolume generate_phantom_volume(const std::string& volume_id, std::uint64_t seed,
                                        const PhantomOptions& opt = {}) {
  opt.validate();
  Rng rng(derive_seed(seed, "phantom", volume_id));
  const int H = opt.height, W = opt.width, D = opt.depth;

  const int run = std::clamp(static_cast<int>(std::lround(D * rng.uniform(opt.liver_fraction.lo, opt.liver_fraction.hi))),
                             1, D - 1);
  const int first = static_cast<int>(rng.index(static_cast<std::uint64_t>(D - run + 1)));
  const double ry = H * rng.uniform(opt.liver_radius.lo, opt.liver_radius.hi);
  const double rx = W * rng.uniform(opt.liver_radius.lo, opt.liver_radius.hi);
  const double cy = rng.uniform(ry, H - ry), cx = rng.uniform(rx, W - rx);

  auto draw_bones = [&] {
    std::vector<Ellipse> bones(static_cast<std::size_t>(
        opt.min_bones + static_cast<int>(rng.index(static_cast<std::uint64_t>(opt.max_bones - opt.min_bones + 1)))));
    for (auto& b : bones) {
      b.ry = H * rng.uniform(opt.bone_radius.lo, opt.bone_radius.hi);
      b.rx = W * rng.uniform(opt.bone_radius.lo, opt.bone_radius.hi);
      b.cy = rng.uniform(b.ry, H - b.ry);
      b.cx = rng.uniform(b.rx, W - b.rx);
    }
    return bones;
  };
  auto bones = draw_bones();
  const double background_level = rng.uniform(opt.background_hu.lo, opt.background_hu.hi);

  CTVolume v;
  v.volume_id = volume_id;
  v.depth = D;
  v.height = H;
  v.width = W;
  v.voxels.resize(static_cast<std::size_t>(D) * H * W);
  v.liver_mask.emplace(v.voxels.size(), 0);
  auto liver_hu = [&] {
    for (;;) {
      const double x = rng.normal(opt.liver_mean, opt.liver_std);
      if (x >= opt.liver_clip.lo && x <= opt.liver_clip.hi) return x;
    }
  };

  for (int k = 0; k < D; ++k) {
    if (opt.bones_per_slice && k > 0) bones = draw_bones();
    std::optional<Ellipse> liver;
    if (k >= first && k < first + run) {
      const double mid = first + (run - 1) / 2.0, half = std::max(1.0, run / 2.0);
      const double t = std::min(1.0, std::abs(k - mid) / half);
      const double scale = 1.0 - (1.0 - opt.liver_edge_scale) * t * t;
      liver = Ellipse{cy, cx, ry * scale, rx * scale};
    }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t at = static_cast<std::size_t>(k) * v.plane() + static_cast<std::size_t>(y) * W + x;
        double hu = opt.background_per_volume
                        ? background_level + opt.background_noise_hu * (rng.uniform(0.0, 1.0) - 0.5)
                        : rng.uniform(opt.background_hu.lo, opt.background_hu.hi);
        bool in_liver = false;
        if (liver && liver->contains(y, x)) {
          hu = liver_hu();
          in_liver = true;
        }
        for (const auto& b : bones)
          if (b.contains(y, x)) {
            hu = rng.uniform(opt.bone_hu.lo, opt.bone_hu.hi);
            in_liver = false;
          }
        v.voxels[at] = static_cast<std::int16_t>(std::lround(saturate_hu(hu)));
        (*v.liver_mask)[at] = in_liver ? 1 : 0;
      }
  }
  v.validate();
  return v;
}

/// Writes `n` phantom volumes in the raw format under `dir`; returns the header paths.
inline std::vector<std::filesystem::path> write_phantom_dataset(const std::filesystem::path& dir, int n,
                                                                std::uint64_t seed, const PhantomOptions& opt = {}) {
  if (n < 1) throw InvalidArgument("phantom: n_volumes must be >= 1");
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out;
  for (int i = 0; i < n; ++i) out.push_back(save_raw_volume(generate_phantom_volume(phantom_volume_id(i), seed, opt), dir));
  return out;
}

inline std::vector<CTVolume> generate_phantom_volumes(int n, std::uint64_t seed, const PhantomOptions& opt = {}) {
  std::vector<CTVolume> out;
  for (int i = 0; i < n; ++i) out.push_back(generate_phantom_volume(phantom_volume_id(i), seed, opt));
  return out;
}

}  // namespace ctcbir
