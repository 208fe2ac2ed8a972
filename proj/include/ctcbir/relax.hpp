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
 * @file relax.hpp
 * @brief Occlusion saliency for representations.
 *
 * For masks M_1..M_N and an image x with representation h = f(x),
 *
 *     R_ij = 1/N * sum_n s(h, f(x * M_n)) * M_n(i, j),
 *
 * with s the cosine similarity and the mask multiplied into every channel.
 * An optional second output is the mask-weighted spread
 * U_ij = 1/N * sum_n (s_n - R_ij)^2 * M_n(i, j).
 */

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctcbir/augment.hpp"
#include "ctcbir/core/array.hpp"
#include "ctcbir/core/bytes.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/core/image_io.hpp"
#include "ctcbir/core/log.hpp"
#include "ctcbir/core/rng.hpp"
#include "ctcbir/model.hpp"

namespace ctcbir {

inline constexpr int kDefaultMaskGrid = 7;
inline constexpr double kDefaultMaskProb = 0.5;
inline constexpr int kDefaultMaskCount = 3000;

/// Masks at image resolution. Generated batches keep only their coarse
/// Bernoulli grids and upsample on access.
class MaskBatch {
 public:
  MaskBatch() = default;

  static MaskBatch from_grids(int height, int width, int grid_h, int grid_w, double p, std::uint64_t seed,
                              std::vector<std::uint8_t> cells) {
    MaskBatch b;
    b.height_ = height;
    b.width_ = width;
    b.grid_h_ = grid_h;
    b.grid_w_ = grid_w;
    b.p_ = p;
    b.seed_ = seed;
    b.cells_ = std::move(cells);
    b.n_ = b.cells_.size() / (static_cast<std::size_t>(grid_h) * grid_w);
    return b;
  }

  /// Arbitrary masks, values in [0, 1], all of one shape.
  static MaskBatch from_masks(std::vector<Array2D<double>> masks) {
    if (masks.empty()) throw InvalidArgument("mask batch must not be empty");
    MaskBatch b;
    b.height_ = masks.front().rows;
    b.width_ = masks.front().cols;
    for (const auto& m : masks) {
      if (!m.same_shape(masks.front())) throw InvalidArgument("masks differ in shape");
      for (double v : m.data)
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("mask values must lie in [0, 1]");
    }
    b.n_ = masks.size();
    b.explicit_ = std::move(masks);
    return b;
  }

  /// Masks of `a` followed by masks of `b`.
  static MaskBatch concat(const MaskBatch& a, const MaskBatch& b) {
    if (a.height_ != b.height_ || a.width_ != b.width_) throw InvalidArgument("mask batches differ in shape");
    if (a.explicit_.empty() && b.explicit_.empty() && a.grid_h_ == b.grid_h_ && a.grid_w_ == b.grid_w_) {
      auto cells = a.cells_;
      cells.insert(cells.end(), b.cells_.begin(), b.cells_.end());
      return from_grids(a.height_, a.width_, a.grid_h_, a.grid_w_, a.p_, a.seed_, std::move(cells));
    }
    std::vector<Array2D<double>> all;
    for (std::size_t i = 0; i < a.size(); ++i) all.push_back(a.mask(i));
    for (std::size_t i = 0; i < b.size(); ++i) all.push_back(b.mask(i));
    return from_masks(std::move(all));
  }

  std::size_t size() const noexcept { return n_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int grid_h() const noexcept { return grid_h_; }
  int grid_w() const noexcept { return grid_w_; }
  double p() const noexcept { return p_; }
  std::uint64_t seed() const noexcept { return seed_; }

  Array2D<double> mask(std::size_t i) const {
    if (i >= n_) throw InvalidArgument("mask index out of range");
    if (!explicit_.empty()) return explicit_[i];
    Image<double> grid(1, grid_h_, grid_w_);
    const std::size_t cell = static_cast<std::size_t>(grid_h_) * grid_w_;
    for (std::size_t k = 0; k < cell; ++k) grid.data[k] = cells_[i * cell + k];
    auto up = resize(grid, height_, width_);
    Array2D<double> out(height_, width_);
    out.data = std::move(up.data);
    return out;
  }

 private:
  int height_ = 0, width_ = 0, grid_h_ = 0, grid_w_ = 0;
  double p_ = 0;
  std::uint64_t seed_ = 0;
  std::size_t n_ = 0;
  std::vector<std::uint8_t> cells_;
  std::vector<Array2D<double>> explicit_;
};

/// N coarse Bernoulli(p) grids of grid_h x grid_w cells, bilinearly
/// upsampled to height x width. `test_mode` admits p = 0 and p = 1.
inline MaskBatch generate_masks(int n, int grid_h, int grid_w, double p, int height, int width, std::uint64_t seed,
                                bool test_mode = false) {
  if (n < 1) throw InvalidArgument("n_masks must be >= 1");
  if (grid_h < 1 || grid_w < 1 || grid_h >= height || grid_w >= width)
    throw InvalidArgument("mask grid must be at least 1x1 and smaller than the image");
  const bool p_ok = test_mode ? (p >= 0.0 && p <= 1.0) : (p > 0.0 && p < 1.0);
  if (!p_ok) throw InvalidArgument("mask probability must lie in (0, 1)");
  Rng rng(derive_seed(seed, "relax-masks"));
  std::vector<std::uint8_t> cells(static_cast<std::size_t>(n) * grid_h * grid_w);
  for (auto& c : cells) c = rng.bernoulli(p) ? 1 : 0;
  return MaskBatch::from_grids(height, width, grid_h, grid_w, p, seed, std::move(cells));
}

struct SaliencyMap {
  Array2D<double> importance;
  std::optional<Array2D<double>> variance;
  int n_masks_used = 0;
  int n_masks_skipped = 0;
  std::string similarity_kind = "cosine";
};

struct RelaxOptions {
  /// Worker threads for the masked forward passes. The reduction runs in mask order regardless.
  int threads = 1;
  bool compute_variance = false;
};

/// Above this fraction of skipped masks a degeneracy warning is logged.
inline constexpr double kMaxSkippedFraction = 0.10;

template <typename T>
SaliencyMap relax_importance(const Model<T>& model, const Image<T>& image, const MaskBatch& masks,
                             const RelaxOptions& opt = {}) {
  if (masks.size() == 0) throw InvalidArgument("relax: empty mask batch");
  if (masks.height() != image.height || masks.width() != image.width)
    throw InvalidArgument("relax: masks must match the image size");
  const auto h = model.extract_h(image);
  if (!(h.norm() > 0)) throw NumericDegeneracy("relax: unmasked representation has zero norm");

  const std::size_t n = masks.size();
  std::vector<double> sims(n, 0.0);
  std::vector<char> valid(n, 0);
  auto work = [&](std::size_t i) {
    const auto m = masks.mask(i);
    Image<T> x = image;
    const std::size_t plane = x.plane();
    for (int c = 0; c < x.channels; ++c)
      for (std::size_t k = 0; k < plane; ++k) x.data[c * plane + k] *= static_cast<T>(m.data[k]);
    const auto hm = model.extract_h(x);
    const double nm = static_cast<double>(hm.norm());
    if (!(nm > 0)) return;
    sims[i] = std::clamp(static_cast<double>(h.dot(hm)) / (static_cast<double>(h.norm()) * nm), -1.0, 1.0);
    valid[i] = 1;
  };
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(1, opt.threads)), 1, n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  SaliencyMap out;
  const int rows = image.height, cols = image.width;
  Array2D<double> sum_sm(rows, cols, 0.0), sum_s2m(rows, cols, 0.0), sum_m(rows, cols, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid[i]) {
      ++out.n_masks_skipped;
      continue;
    }
    ++out.n_masks_used;
    const auto m = masks.mask(i);
    const double s = sims[i];
    for (std::size_t k = 0; k < m.size(); ++k) {
      sum_sm.data[k] += s * m.data[k];
      if (opt.compute_variance) {
        sum_s2m.data[k] += s * s * m.data[k];
        sum_m.data[k] += m.data[k];
      }
    }
  }
  if (out.n_masks_skipped > kMaxSkippedFraction * static_cast<double>(n))
    log_warning("relax: " + std::to_string(out.n_masks_skipped) + " of " + std::to_string(n) +
                " masked images gave a zero-norm representation");

  out.importance = Array2D<double>(rows, cols, 0.0);
  if (out.n_masks_used == 0) {
    if (opt.compute_variance) out.variance = out.importance;
    return out;
  }
  const double inv = 1.0 / out.n_masks_used;
  for (std::size_t k = 0; k < sum_sm.size(); ++k) out.importance.data[k] = sum_sm.data[k] * inv;
  if (opt.compute_variance) {
    Array2D<double> var(rows, cols, 0.0);
    for (std::size_t k = 0; k < var.size(); ++k) {
      const double r = out.importance.data[k];
      var.data[k] = std::max(0.0, (sum_s2m.data[k] - 2 * r * sum_sm.data[k] + r * r * sum_m.data[k]) * inv);
    }
    out.variance = std::move(var);
  }
  return out;
}

/// Min-max scaling to [0, 1]; a constant map becomes 0.5 everywhere.
template <typename T>
Array2D<double> normalize_for_display(const Array2D<T>& r) {
  Array2D<double> out(r.rows, r.cols, 0.5);
  if (r.data.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(r.data.begin(), r.data.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw InvalidArgument("normalize_for_display: non-finite input");
  if (!(hi > lo)) return out;
  for (std::size_t k = 0; k < r.size(); ++k) out.data[k] = (static_cast<double>(r.data[k]) - lo) / (hi - lo);
  return out;
}

/// Bilinear resample of a 2-D map.
template <typename T>
Array2D<double> resize_map(const Array2D<T>& m, int rows, int cols) {
  Image<double> img(1, m.rows, m.cols);
  for (std::size_t k = 0; k < m.size(); ++k) img.data[k] = static_cast<double>(m.data[k]);
  auto up = resize(img, rows, cols);
  Array2D<double> out(rows, cols);
  out.data = std::move(up.data);
  return out;
}

// ---------------------------------------------------------------------------
// Export

struct SaliencyMeta {
  std::string slice_id;
  int n_masks = 0;
  int grid_h = kDefaultMaskGrid, grid_w = kDefaultMaskGrid;
  double p = kDefaultMaskProb;
  std::uint64_t seed = 0;
  std::string model_fingerprint;
};

inline nlohmann::json sidecar_json(const SaliencyMeta& m, const SaliencyMap& s) {
  return {{"slice_id", m.slice_id},
          {"n_masks", m.n_masks},
          {"n_masks_used", s.n_masks_used},
          {"n_masks_skipped", s.n_masks_skipped},
          {"grid", {m.grid_h, m.grid_w}},
          {"p", m.p},
          {"seed", m.seed},
          {"model_fingerprint", m.model_fingerprint},
          {"similarity", s.similarity_kind}};
}

/// Writes `<stem>.pfm` (raw importance, float32) and `<stem>.json`.
inline void save_saliency(const std::filesystem::path& stem, const SaliencyMap& s, const SaliencyMeta& meta) {
  auto pfm = stem;
  pfm += ".pfm";
  auto json = stem;
  json += ".json";
  write_file_atomic(pfm, encode_pfm(s.importance));
  write_file_atomic(json, sidecar_json(meta, s).dump(2) + "\n");
}

}  // namespace ctcbir
