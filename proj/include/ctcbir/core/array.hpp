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

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ctcbir/core/error.hpp"

namespace ctcbir {

/// Row-major 2-D array.
template <typename T>
struct Array2D {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Array2D() = default;
  Array2D(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw InvalidArgument("Array2D: negative shape");
  }

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const noexcept { return data.size(); }
  bool same_shape(const Array2D& o) const noexcept { return rows == o.rows && cols == o.cols; }
  template <typename U>
  bool same_shape(const Array2D<U>& o) const noexcept {
    return rows == o.rows && cols == o.cols;
  }
  bool operator==(const Array2D&) const = default;
};

using HuSlice = Array2D<std::int16_t>;
using BinaryMask = Array2D<std::uint8_t>;

/// Channel-major (C x H x W) image.
template <typename T>
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Image() = default;
  Image(int c, int h, int w, T fill = T{})
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {
    if (c < 0 || h < 0 || w < 0) throw InvalidArgument("Image: negative shape");
  }

  std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }
  T& operator()(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  const T& operator()(int c, int y, int x) const {
    return data[c * plane() + static_cast<std::size_t>(y) * width + x];
  }
  bool operator==(const Image&) const = default;

  template <typename U>
  Image<U> cast() const {
    Image<U> out(channels, height, width);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

}  // namespace ctcbir
