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

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>

#include <nlohmann/json.hpp>

#include "ctcbir/core/array.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/core/rng.hpp"
#include "ctcbir/imaging.hpp"

namespace ctcbir {

struct Interval {
  double lo = 0;
  double hi = 0;
  bool operator==(const Interval&) const = default;
};

struct AugmentConfig {
  Interval crop_scale{0.2, 1.0};
  Interval crop_aspect{3.0 / 4.0, 4.0 / 3.0};
  int out_height = 224;
  int out_width = 224;
  double hflip_prob = 0.5;
  /// Brightness, contrast, saturation, hue.
  std::array<double, 4> jitter_strength{0.4, 0.4, 0.4, 0.1};
  double jitter_prob = 1.0;
  double grayscale_prob = 0.2;
  ClipWindow narrow = kNarrowWindow;
  ClipWindow wide = kWideWindow;

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument(std::string(name) + " must be in [0, 1]");
    };
    prob(hflip_prob, "hflip_prob");
    prob(jitter_prob, "jitter_prob");
    prob(grayscale_prob, "grayscale_prob");
    if (!(crop_scale.lo > 0.0 && crop_scale.lo <= crop_scale.hi && crop_scale.hi <= 1.0))
      throw InvalidArgument("crop_scale must satisfy 0 < lo <= hi <= 1");
    if (!(crop_aspect.lo > 0.0 && crop_aspect.lo <= crop_aspect.hi))
      throw InvalidArgument("crop_aspect must satisfy 0 < lo <= hi");
    if (out_height <= 0 || out_width <= 0) throw InvalidArgument("out size must be positive");
    for (double s : jitter_strength)
      if (!(s >= 0.0)) throw InvalidArgument("jitter strengths must be non-negative");
    if (jitter_strength[3] > 0.5) throw InvalidArgument("hue jitter must be <= 0.5");
    narrow.validate();
    wide.validate();
  }

  /// Every stochastic transform switched off; only the resize remains.
  static AugmentConfig deterministic(int h, int w) {
    AugmentConfig c;
    c.crop_scale = {1.0, 1.0};
    c.crop_aspect = {1.0, 1.0};
    c.out_height = h;
    c.out_width = w;
    c.hflip_prob = 0.0;
    c.jitter_strength = {0, 0, 0, 0};
    c.grayscale_prob = 0.0;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = {{"crop_scale", {c.crop_scale.lo, c.crop_scale.hi}},
       {"crop_aspect", {c.crop_aspect.lo, c.crop_aspect.hi}},
       {"out_size", {c.out_height, c.out_width}},
       {"hflip_prob", c.hflip_prob},
       {"jitter_strength", c.jitter_strength},
       {"jitter_prob", c.jitter_prob},
       {"grayscale_prob", c.grayscale_prob},
       {"narrow", c.narrow},
       {"wide", c.wide}};
}

/// Missing keys keep their defaults, so a partial run config is valid.
inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  auto interval = [&](const char* key, Interval& iv) {
    if (j.contains(key)) iv = {j[key].at(0).get<double>(), j[key].at(1).get<double>()};
  };
  interval("crop_scale", c.crop_scale);
  interval("crop_aspect", c.crop_aspect);
  if (j.contains("out_size")) {
    c.out_height = j["out_size"].at(0).get<int>();
    c.out_width = j["out_size"].at(1).get<int>();
  }
  c.hflip_prob = j.value("hflip_prob", c.hflip_prob);
  if (j.contains("jitter_strength")) c.jitter_strength = j["jitter_strength"].get<std::array<double, 4>>();
  c.jitter_prob = j.value("jitter_prob", c.jitter_prob);
  c.grayscale_prob = j.value("grayscale_prob", c.grayscale_prob);
  if (j.contains("narrow")) c.narrow = j["narrow"].get<ClipWindow>();
  if (j.contains("wide")) c.wide = j["wide"].get<ClipWindow>();
  c.validate();
}

/// Bilinear resample of the window [y0, y0+h) x [x0, x0+w) to out_h x out_w (pixel-center aligned).
template <typename T>
Image<T> resize_region(const Image<T>& img, int y0, int x0, int h, int w, int out_h, int out_w) {
  Image<T> out(img.channels, out_h, out_w);
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int ya = static_cast<int>(fy), yb = std::min(ya + 1, h - 1);
    const double ty = fy - ya;
    for (int ox = 0; ox < out_w; ++ox) {
      const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int xa = static_cast<int>(fx), xb = std::min(xa + 1, w - 1);
      const double tx = fx - xa;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1 - tx) * img(c, y0 + ya, x0 + xa) + tx * img(c, y0 + ya, x0 + xb);
        const double bot = (1 - tx) * img(c, y0 + yb, x0 + xa) + tx * img(c, y0 + yb, x0 + xb);
        out(c, oy, ox) = static_cast<T>((1 - ty) * top + ty * bot);
      }
    }
  }
  return out;
}

template <typename T>
Image<T> resize(const Image<T>& img, int out_h, int out_w) {
  if (img.height == out_h && img.width == out_w) return img;
  return resize_region(img, 0, 0, img.height, img.width, out_h, out_w);
}

namespace detail {

template <typename T>
T clamp01(double v) {
  return static_cast<T>(std::clamp(v, 0.0, 1.0));
}

inline double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

template <typename T>
void adjust_brightness(Image<T>& img, double f) {
  for (auto& v : img.data) v = clamp01<T>(v * f);
}

template <typename T>
void adjust_contrast(Image<T>& img, double f) {
  double mean = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) mean += luminance(img(0, y, x), img(1, y, x), img(2, y, x));
  mean /= static_cast<double>(img.plane());
  for (auto& v : img.data) v = clamp01<T>((v - mean) * f + mean);
}

template <typename T>
void adjust_saturation(Image<T>& img, double f) {
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double g = luminance(img(0, y, x), img(1, y, x), img(2, y, x));
      for (int c = 0; c < 3; ++c) img(c, y, x) = clamp01<T>((img(c, y, x) - g) * f + g);
    }
}

template <typename T>
void adjust_hue(Image<T>& img, double shift) {
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double r = img(0, y, x), g = img(1, y, x), b = img(2, y, x);
      const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
      if (d <= 0) continue;  // gray pixels have no hue
      double h;
      if (mx == r)
        h = std::fmod((g - b) / d, 6.0);
      else if (mx == g)
        h = (b - r) / d + 2.0;
      else
        h = (r - g) / d + 4.0;
      h = std::fmod(h / 6.0 + shift + 2.0, 1.0);
      const double s = d / mx, v = mx;
      const double hh = h * 6.0;
      const int sector = static_cast<int>(hh) % 6;
      const double f = hh - std::floor(hh);
      const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
      double rgb[3];
      switch (sector) {
        case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
        default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
      }
      for (int c = 0; c < 3; ++c) img(c, y, x) = clamp01<T>(rgb[c]);
    }
}

}  // namespace detail

/// Number of engine draws one `augment` call consumes, independent of outcomes.
inline constexpr std::uint64_t kAugmentDraws = 14;

/**
 * Random resized crop, horizontal flip, color jitter (random op order),
 * random grayscale, clamp to [0, 1]. Takes a fixed number of draws per call.
 *
 * The crop samples an area fraction from `crop_scale` and a log-uniform
 * aspect ratio. When the resulting box overflows the image along one axis it
 * is clamped to that axis and the other side is recomputed to keep the area.
 */
template <typename T>
Image<T> augment(const Image<T>& img, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  if (img.channels != 3 || img.height <= 0 || img.width <= 0) throw InvalidArgument("augment expects a 3-channel image");
  for (auto v : img.data)
    if (!std::isfinite(static_cast<double>(v))) throw InvalidArgument("augment: non-finite pixel");

  // All draws up front: crop(4) flip(1) jitter(1 + 4 + 3) grayscale(1).
  const double u_area = rng.uniform(), u_ratio = rng.uniform(), u_y = rng.uniform(), u_x = rng.uniform();
  const double u_flip = rng.uniform();
  const double u_jitter = rng.uniform();
  std::array<double, 4> u_factor;
  for (auto& u : u_factor) u = rng.uniform();
  std::array<int, 4> order{0, 1, 2, 3};
  for (int i = 3; i > 0; --i) std::swap(order[i], order[static_cast<int>(rng.index(i + 1))]);
  const double u_gray = rng.uniform();

  const int H = img.height, W = img.width;
  const double area = H * W * (cfg.crop_scale.lo + (cfg.crop_scale.hi - cfg.crop_scale.lo) * u_area);
  const double log_lo = std::log(cfg.crop_aspect.lo), log_hi = std::log(cfg.crop_aspect.hi);
  const double ratio = std::exp(log_lo + (log_hi - log_lo) * u_ratio);
  int w = static_cast<int>(std::lround(std::sqrt(area * ratio)));
  int h = static_cast<int>(std::lround(std::sqrt(area / ratio)));
  if (w > W) {
    w = W;
    h = static_cast<int>(std::lround(area / W));
  }
  if (h > H) {
    h = H;
    w = std::min(W, static_cast<int>(std::lround(area / H)));
  }
  h = std::clamp(h, 1, H);
  w = std::clamp(w, 1, W);
  const int y0 = std::min(H - h, static_cast<int>(u_y * (H - h + 1)));
  const int x0 = std::min(W - w, static_cast<int>(u_x * (W - w + 1)));
  Image<T> out = resize_region(img, y0, x0, h, w, cfg.out_height, cfg.out_width);

  if (u_flip < cfg.hflip_prob) {
    for (int c = 0; c < out.channels; ++c)
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width / 2; ++x) std::swap(out(c, y, x), out(c, y, out.width - 1 - x));
  }

  if (u_jitter < cfg.jitter_prob) {
    const auto& s = cfg.jitter_strength;
    // Factor ~ U[max(0, 1 - s), 1 + s].
    auto factor = [](double strength, double u) {
      const double lo = std::max(0.0, 1 - strength);
      return lo + (1 + strength - lo) * u;
    };
    const double brightness = factor(s[0], u_factor[0]);
    const double contrast = factor(s[1], u_factor[1]);
    const double saturation = factor(s[2], u_factor[2]);
    const double hue = -s[3] + 2 * s[3] * u_factor[3];
    for (int op : order) {
      switch (op) {
        case 0: if (brightness != 1.0) detail::adjust_brightness(out, brightness); break;
        case 1: if (contrast != 1.0) detail::adjust_contrast(out, contrast); break;
        case 2: if (saturation != 1.0) detail::adjust_saturation(out, saturation); break;
        case 3: if (hue != 0.0) detail::adjust_hue(out, hue); break;
      }
    }
  }

  if (u_gray < cfg.grayscale_prob) {
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) {
        const T g = detail::clamp01<T>(detail::luminance(out(0, y, x), out(1, y, x), out(2, y, x)));
        for (int c = 0; c < 3; ++c) out(c, y, x) = g;
      }
  }

  for (auto& v : out.data) v = detail::clamp01<T>(v);
  return out;
}

/// kBaseline windows both views with the wide window (single-clip SimSiam).
enum class ViewMode { kDualClip, kBaseline };

inline const char* to_string(ViewMode m) { return m == ViewMode::kDualClip ? "dual_clip" : "baseline"; }

/// Narrow-window view and wide-window view, each augmented with its own stream.
template <typename T = float>
std::pair<Image<T>, Image<T>> make_views(const HuSlice& hu, const AugmentConfig& cfg, Rng& rng1, Rng& rng2,
                                         ViewMode mode = ViewMode::kDualClip) {
  const ClipWindow first = mode == ViewMode::kDualClip ? cfg.narrow : cfg.wide;
  auto v1 = augment(pseudo_rgb(clip_and_scale<T>(hu, first)), cfg, rng1);
  auto v2 = augment(pseudo_rgb(clip_and_scale<T>(hu, cfg.wide)), cfg, rng2);
  return {std::move(v1), std::move(v2)};
}

template <typename T = float>
std::pair<Image<T>, Image<T>> make_views(const HuSlice& hu, const AugmentConfig& cfg, Rng& rng,
                                         ViewMode mode = ViewMode::kDualClip) {
  Rng r1 = rng.split();
  Rng r2 = rng.split();
  return make_views<T>(hu, cfg, r1, r2, mode);
}

/// Test-time input: wide window, pseudo-RGB, resized to the model input.
template <typename T = float>
Image<T> inference_input(const HuSlice& hu, int height, int width, const ClipWindow& window = kWideWindow) {
  return resize(pseudo_rgb(clip_and_scale<T>(hu, window)), height, width);
}

}  // namespace ctcbir
