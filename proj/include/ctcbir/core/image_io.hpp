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

// 8-bit PNG encoding (grayscale or RGB, no interlace) and float32 PFM.

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <span>
#include <string>

#include "ctcbir/core/array.hpp"
#include "ctcbir/core/bytes.hpp"
#include "ctcbir/core/error.hpp"

namespace ctcbir {

namespace detail {

inline void put_be32(Bytes& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void png_chunk(Bytes& out, const char type[4], std::span<const std::uint8_t> data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const auto start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

/// PNG of `pixels` laid out row-major with interleaved channels (1 = gray, 3 = RGB).
inline Bytes encode_png(int width, int height, int channels, std::span<const std::uint8_t> pixels) {
  if (width <= 0 || height <= 0 || (channels != 1 && channels != 3))
    throw InvalidArgument("encode_png: unsupported image geometry");
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  if (pixels.size() != stride * height) throw InvalidArgument("encode_png: pixel buffer size mismatch");

  Bytes raw;
  raw.reserve((stride + 1) * height);
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), pixels.begin() + y * stride, pixels.begin() + (y + 1) * stride);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  Bytes z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw Error("encode_png: deflate failed");
  z.resize(zlen);

  Bytes out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  Bytes ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);                         // bit depth
  ihdr.push_back(channels == 1 ? 0 : 2);     // colour type
  ihdr.insert(ihdr.end(), {0, 0, 0});        // compression, filter, interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", {});
  return out;
}

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Grayscale PNG of values in [0, 1].
template <typename T>
Bytes render_gray_png(const Array2D<T>& img) {
  Bytes px(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) px[i] = to_u8(static_cast<double>(img.data[i]));
  return encode_png(img.cols, img.rows, 1, px);
}

/// Saliency in [0, 1] over a grayscale base in [0, 1]: blue (low) to red (high), blended at `alpha`.
template <typename A, typename B>
Bytes render_overlay_png(const Array2D<A>& base, const Array2D<B>& saliency, double alpha = 0.5) {
  if (!base.same_shape(saliency)) throw InvalidArgument("render_overlay_png: shape mismatch");
  Bytes px(base.size() * 3);
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double g = std::clamp(static_cast<double>(base.data[i]), 0.0, 1.0);
    const double s = std::clamp(static_cast<double>(saliency.data[i]), 0.0, 1.0);
    px[3 * i + 0] = to_u8((1 - alpha) * g + alpha * s);
    px[3 * i + 1] = to_u8((1 - alpha) * g);
    px[3 * i + 2] = to_u8((1 - alpha) * g + alpha * (1 - s));
  }
  return encode_png(base.cols, base.rows, 3, px);
}

/// Width and height from a PNG header.
inline std::pair<int, int> png_size(std::span<const std::uint8_t> png) {
  static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (png.size() < 24 || std::memcmp(png.data(), sig, 8) != 0) throw FormatError("not a PNG", 0);
  auto be = [&](std::size_t at) {
    return static_cast<int>((png[at] << 24) | (png[at + 1] << 16) | (png[at + 2] << 8) | png[at + 3]);
  };
  return {be(16), be(20)};
}

// ---------------------------------------------------------------------------
// PFM: "Pf\n<w> <h>\n-1.0\n" then float32 little-endian rows, bottom row first.

template <typename T>
Bytes encode_pfm(const Array2D<T>& img) {
  const std::string head = "Pf\n" + std::to_string(img.cols) + " " + std::to_string(img.rows) + "\n-1.0\n";
  Bytes out(head.begin(), head.end());
  for (int y = img.rows - 1; y >= 0; --y)
    for (int x = 0; x < img.cols; ++x) put_le(out, static_cast<float>(img(y, x)));
  return out;
}

inline Array2D<float> decode_pfm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    const auto start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
    if (start == pos) throw FormatError("truncated PFM header", pos);
    return std::string(bytes.begin() + start, bytes.begin() + pos);
  };
  if (token() != "Pf") throw FormatError("not a grayscale PFM", 0);
  const int w = std::stoi(token()), h = std::stoi(token());
  const double scale = std::stod(token());
  ++pos;  // single whitespace after the scale
  if (w <= 0 || h <= 0) throw FormatError("bad PFM size", pos);
  if (scale >= 0) throw FormatError("big-endian PFM is not supported", pos);
  ByteReader r(bytes.subspan(std::min(pos, bytes.size())));
  Array2D<float> img(h, w);
  for (int y = h - 1; y >= 0; --y)
    for (int x = 0; x < w; ++x) img(y, x) = r.get<float>("PFM pixels");
  return img;
}

}  // namespace ctcbir
