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
 * @file
 * @brief Saliency for one HU slice at model resolution, shared by the CLI, the
 * evaluation harness, and the service.
 */

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctcbir/augment.hpp"
#include "ctcbir/checkpoint.hpp"
#include "ctcbir/core/image_io.hpp"
#include "ctcbir/metrics.hpp"
#include "ctcbir/relax.hpp"

namespace ctcbir {

/// Mask grid side for an input side; coarser than the input so cells stay at least one pixel.
inline int default_mask_grid(int input_size) { return std::max(1, std::min(kDefaultMaskGrid, input_size - 1)); }

template <typename T>
SaliencyMeta explain_meta(const Checkpoint<T>& ck, const std::string& slice_id, int n_masks, std::uint64_t seed) {
  const auto& enc = ck.model.encoder_spec();
  return {slice_id, n_masks, default_mask_grid(enc.input_height), default_mask_grid(enc.input_width),
          kDefaultMaskProb, seed, ck.fingerprint};
}

/// RELAX importance of `hu` under the wide-window inference transform.
template <typename T>
SaliencyMap explain_slice(const Model<T>& model, const HuSlice& hu, int n_masks, std::uint64_t seed, int threads = 1) {
  if (n_masks < 1) throw InvalidArgument("n_masks must be >= 1");
  const auto& enc = model.encoder_spec();
  const auto img = inference_input<T>(hu, enc.input_height, enc.input_width);
  const auto masks = generate_masks(n_masks, default_mask_grid(enc.input_height), default_mask_grid(enc.input_width),
                                    kDefaultMaskProb, enc.input_height, enc.input_width, seed);
  RelaxOptions opt;
  opt.threads = threads;
  return relax_importance(model, img, masks, opt);
}

/// Normalized saliency over the wide-window slice, at model resolution.
template <typename T>
Bytes explain_overlay_png(const Model<T>& model, const HuSlice& hu, const SaliencyMap& s) {
  const auto& enc = model.encoder_spec();
  const auto base = inference_input<double>(hu, enc.input_height, enc.input_width);
  Array2D<double> gray(base.height, base.width);
  std::copy(base.data.begin(), base.data.begin() + static_cast<std::ptrdiff_t>(gray.size()), gray.data.begin());
  return render_overlay_png(gray, normalize_for_display(s.importance));
}

/// Relevance rank of a saliency map against a mask at slice resolution.
inline std::optional<double> relevance_rank_at_mask(const SaliencyMap& s, const BinaryMask& mask) {
  if (s.importance.rows == mask.rows && s.importance.cols == mask.cols) return relevance_rank(s.importance, mask);
  return relevance_rank(resize_map(s.importance, mask.rows, mask.cols), mask);
}

/// Relevance rank per record; nullopt for records without a mask or with an empty one.
template <typename T>
std::vector<std::optional<double>> relevance_ranks(const Model<T>& model,
                                                   const std::vector<const SliceRecord*>& records, int n_masks,
                                                   std::uint64_t seed, int threads = 1) {
  std::vector<std::optional<double>> out;
  out.reserve(records.size());
  for (const auto* r : records) {
    if (!r->liver_mask || !r->liver_label) {
      out.emplace_back();
      continue;
    }
    out.push_back(relevance_rank_at_mask(explain_slice(model, r->hu, n_masks, seed, threads), *r->liver_mask));
  }
  return out;
}

}  // namespace ctcbir
