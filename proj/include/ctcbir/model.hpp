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

#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctcbir/core/array.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/core/rng.hpp"
#include "ctcbir/nn.hpp"

namespace ctcbir {

enum class EncoderKind { kResNet50, kTinyConv };
enum class EncoderInit { kImageNetPretrained, kRandom };
enum class HeadNorm { kBatch, kLayer };

NLOHMANN_JSON_SERIALIZE_ENUM(EncoderKind, {{EncoderKind::kResNet50, "resnet50"}, {EncoderKind::kTinyConv, "tiny_conv"}})
NLOHMANN_JSON_SERIALIZE_ENUM(EncoderInit, {{EncoderInit::kImageNetPretrained, "imagenet_pretrained"},
                                           {EncoderInit::kRandom, "random"}})
NLOHMANN_JSON_SERIALIZE_ENUM(HeadNorm, {{HeadNorm::kBatch, "batch"}, {HeadNorm::kLayer, "layer"}})

/// Encoder f. The representation h is the global-average-pooled output.
struct EncoderSpec {
  EncoderKind kind = EncoderKind::kTinyConv;
  int out_dim = 128;
  EncoderInit init = EncoderInit::kRandom;
  int input_height = 64;
  int input_width = 64;
  /// Widths of the stride-2 conv stages; a stride-1 conv to out_dim follows.
  std::vector<int> channels{16, 32, 64};

  void validate() const {
    if (kind == EncoderKind::kResNet50)
      throw InvalidArgument("encoder kind resnet50 is not built into this toolkit; use tiny_conv");
    if (out_dim <= 0 || input_height <= 0 || input_width <= 0) throw InvalidArgument("encoder sizes must be positive");
    for (int c : channels)
      if (c <= 0) throw InvalidArgument("encoder channel widths must be positive");
  }
  bool operator==(const EncoderSpec&) const = default;
};

/// Projector g (MLP, layers of linear + norm + relu, no relu on the last)
/// and predictor q (2-layer bottleneck). `literal_loss` drops the predictor and
/// compares g(h) of one view against h of the other, so the projector then
/// outputs encoder-sized vectors. Batch norm needs batches of 2 or more.
struct HeadSpec {
  int proj_dim = 128;
  int pred_hidden = 0;  // 0 -> proj_dim / 4
  int projector_layers = 3;
  bool literal_loss = false;
  HeadNorm norm = HeadNorm::kBatch;

  int hidden() const { return pred_hidden > 0 ? pred_hidden : std::max(1, proj_dim / 4); }
  void validate() const {
    if (proj_dim <= 0 || pred_hidden < 0 || projector_layers < 1) throw InvalidArgument("bad head spec");
  }
  bool operator==(const HeadSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const EncoderSpec& s) {
  j = {{"kind", s.kind},
       {"out_dim", s.out_dim},
       {"init", s.init},
       {"input_size", {s.input_height, s.input_width}},
       {"channels", s.channels}};
}
inline void from_json(const nlohmann::json& j, EncoderSpec& s) {
  s.kind = j.value("kind", s.kind);
  s.out_dim = j.value("out_dim", s.out_dim);
  s.init = j.value("init", s.init);
  if (j.contains("input_size")) {
    s.input_height = j["input_size"].at(0).get<int>();
    s.input_width = j["input_size"].at(1).get<int>();
  }
  s.channels = j.value("channels", s.channels);
}
inline void to_json(nlohmann::json& j, const HeadSpec& s) {
  j = {{"proj_dim", s.proj_dim},
       {"pred_hidden", s.hidden()},
       {"projector_layers", s.projector_layers},
       {"literal_loss", s.literal_loss},
       {"norm", s.norm}};
}
inline void from_json(const nlohmann::json& j, HeadSpec& s) {
  s.proj_dim = j.value("proj_dim", s.proj_dim);
  s.pred_hidden = j.value("pred_hidden", s.pred_hidden);
  s.projector_layers = j.value("projector_layers", s.projector_layers);
  s.literal_loss = j.value("literal_loss", s.literal_loss);
  s.norm = j.value("norm", s.norm);
}

/// Outputs of one batched forward pass, one sample per column:
/// representations h, projections z, predictions p.
template <typename T>
struct BatchRepresentation {
  nn::Matrix<T> h, z, p;
};

template <typename T>
class Model {
 public:
  using Vec = nn::Vector<T>;

  Model(EncoderSpec enc, HeadSpec head) : enc_(std::move(enc)), head_(std::move(head)) {
    enc_.validate();
    head_.validate();
    int in = 3;
    for (int c : enc_.channels) {
      encoder_.template emplace<nn::Conv2d<T>>(in, c, 3, 2, 1).template emplace<nn::ReLU<T>>();
      in = c;
    }
    encoder_.template emplace<nn::Conv2d<T>>(in, enc_.out_dim, 3, 1, 1)
        .template emplace<nn::ReLU<T>>()
        .template emplace<nn::GlobalAvgPool<T>>();
    encoder_.output_shape({3, enc_.input_height, enc_.input_width});  // throws if the input is too small

    const int z_dim = head_.literal_loss ? enc_.out_dim : head_.proj_dim;
    int width = enc_.out_dim;
    for (int i = 0; i < head_.projector_layers; ++i) {
      const bool last = i + 1 == head_.projector_layers;
      const int out = last ? z_dim : head_.proj_dim;
      projector_.template emplace<nn::Linear<T>>(width, out);
      add_norm(projector_, out);
      if (!last) projector_.template emplace<nn::ReLU<T>>();
      width = out;
    }
    if (!head_.literal_loss) {
      predictor_.template emplace<nn::Linear<T>>(z_dim, head_.hidden());
      add_norm(predictor_, head_.hidden());
      predictor_.template emplace<nn::ReLU<T>>().template emplace<nn::Linear<T>>(head_.hidden(), z_dim);
    }
    params_.assign(encoder_.param_count() + projector_.param_count() + predictor_.param_count(), T(0));
  }

  Model(const Model& o) : Model(o.enc_, o.head_) { params_ = o.params_; }
  Model& operator=(const Model& o) {
    if (this != &o) *this = Model(o);
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  /// Randomly initialized model, deterministic in `seed`.
  static Model random(EncoderSpec enc, HeadSpec head, std::uint64_t seed) {
    Model m(std::move(enc), std::move(head));
    Rng rng(derive_seed(seed, "model-init"));
    m.encoder_.init(m.encoder_params(), rng);
    m.projector_.init(m.projector_params(), rng);
    m.predictor_.init(m.predictor_params(), rng);
    return m;
  }

  const EncoderSpec& encoder_spec() const noexcept { return enc_; }
  const HeadSpec& head_spec() const noexcept { return head_; }
  int representation_dim() const noexcept { return enc_.out_dim; }
  int projection_dim() const noexcept { return head_.literal_loss ? enc_.out_dim : head_.proj_dim; }

  std::vector<T>& params() noexcept { return params_; }
  const std::vector<T>& params() const noexcept { return params_; }
  std::size_t param_count() const noexcept { return params_.size(); }

  std::span<T> encoder_params() { return std::span(params_).first(encoder_.param_count()); }
  std::span<T> projector_params() { return std::span(params_).subspan(encoder_.param_count(), projector_.param_count()); }
  std::span<T> predictor_params() {
    return std::span(params_).subspan(encoder_.param_count() + projector_.param_count(), predictor_.param_count());
  }
  std::size_t encoder_param_count() const noexcept { return encoder_.param_count(); }

  const nn::Sequential<T>& encoder() const noexcept { return encoder_; }
  const nn::Sequential<T>& projector() const noexcept { return projector_; }
  const nn::Sequential<T>& predictor() const noexcept { return predictor_; }

  void check_input(const Image<T>& img) const {
    if (img.channels != 3 || img.height != enc_.input_height || img.width != enc_.input_width)
      throw InvalidArgument("model expects 3x" + std::to_string(enc_.input_height) + "x" +
                            std::to_string(enc_.input_width) + " input, got " + std::to_string(img.channels) + "x" +
                            std::to_string(img.height) + "x" + std::to_string(img.width));
  }

  /// Encoder output h, used for retrieval and explanation.
  Vec extract_h(const Image<T>& img) const {
    check_input(img);
    return encoder_.forward(enc_ptr(), nn::Tensor<T>::from_image(img)).as_vector();
  }

  struct Traces {
    std::vector<nn::Trace<T>> encoder;
    nn::Trace<T> projector, predictor;
  };

  /// Forward pass over a batch; records traces for backward when `traces` is given.
  BatchRepresentation<T> forward(std::span<const Image<T>> images, Traces* traces = nullptr) const {
    if (images.empty()) throw InvalidArgument("forward: empty batch");
    const auto b = static_cast<Eigen::Index>(images.size());
    BatchRepresentation<T> r;
    r.h.resize(enc_.out_dim, b);
    if (traces) traces->encoder.assign(images.size(), {});
    for (Eigen::Index i = 0; i < b; ++i) {
      check_input(images[i]);
      r.h.col(i) = encoder_
                       .forward(enc_ptr(), nn::Tensor<T>::from_image(images[i]),
                                traces ? &traces->encoder[static_cast<std::size_t>(i)] : nullptr)
                       .as_vector();
    }
    r.z = projector_.forward(proj_ptr(), nn::Tensor<T>::from_columns(r.h), traces ? &traces->projector : nullptr).data;
    if (head_.literal_loss)
      r.p = r.z;
    else
      r.p = predictor_.forward(pred_ptr(), nn::Tensor<T>::from_columns(r.z), traces ? &traces->predictor : nullptr).data;
    return r;
  }

  /// Backpropagates dL/dp (dL/dz in literal mode), one column per sample,
  /// through predictor, projector, and encoder. Gradients accumulate into `grad`.
  void backward(const Traces& traces, const nn::Matrix<T>& dp, std::span<T> grad) const {
    if (grad.size() != params_.size()) throw InvalidArgument("gradient buffer size mismatch");
    T* g = grad.data();
    auto d = nn::Tensor<T>::from_columns(dp);
    if (!head_.literal_loss)
      d = predictor_.backward(pred_ptr(), traces.predictor, std::move(d), g + encoder_.param_count() + projector_.param_count());
    d = projector_.backward(proj_ptr(), traces.projector, std::move(d), g + encoder_.param_count());
    for (std::size_t i = 0; i < traces.encoder.size(); ++i)
      encoder_.backward(enc_ptr(), traces.encoder[i], nn::Tensor<T>::from_vector(d.data.col(static_cast<Eigen::Index>(i))), g);
  }

 private:
  void add_norm(nn::Sequential<T>& net, int n) {
    if (head_.norm == HeadNorm::kBatch)
      net.template emplace<nn::BatchNorm<T>>(n);
    else
      net.template emplace<nn::LayerNorm<T>>(n);
  }

  const T* enc_ptr() const { return params_.data(); }
  const T* proj_ptr() const { return params_.data() + encoder_.param_count(); }
  const T* pred_ptr() const { return params_.data() + encoder_.param_count() + projector_.param_count(); }

  EncoderSpec enc_;
  HeadSpec head_;
  nn::Sequential<T> encoder_, projector_, predictor_;
  std::vector<T> params_;
};

/// Same architecture and parameters in another scalar type.
template <typename To, typename From>
Model<To> model_cast(const Model<From>& m) {
  Model<To> out(m.encoder_spec(), m.head_spec());
  for (std::size_t i = 0; i < m.param_count(); ++i) out.params()[i] = static_cast<To>(m.params()[i]);
  return out;
}

}  // namespace ctcbir
