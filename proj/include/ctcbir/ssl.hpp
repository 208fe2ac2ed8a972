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
 * @file ssl.hpp
 * @brief Siamese self-supervised training with a stop-gradient target branch.
 *
 * Per image, two views x1 (narrow window) and x2 (wide window) give
 * predictions p1, p2 and projections z1, z2. The loss is
 *
 *     L = 1/2 D(p1, sg(z2)) + 1/2 D(p2, sg(z1)),   D(a, b) = -<a/|a|, b/|b|>
 *
 * where sg() marks a constant: gradients reach the parameters only through
 * the prediction side of each term. Optimization is SGD with momentum and
 * coupled weight decay at a constant learning rate.
 */

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctcbir/augment.hpp"
#include "ctcbir/checkpoint.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/core/log.hpp"
#include "ctcbir/core/rng.hpp"
#include "ctcbir/imaging.hpp"
#include "ctcbir/model.hpp"

namespace ctcbir {

// ---------------------------------------------------------------------------
// Loss

/// -(a/|a|) . (b/|b|). Throws NumericDegeneracy when either norm is zero.
template <typename T>
double neg_cosine(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw InvalidArgument("neg_cosine: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (!(na > 0) || !(nb > 0)) throw NumericDegeneracy("neg_cosine: zero-norm input");
  return std::clamp(-dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

template <typename T>
double neg_cosine(const nn::Vector<T>& a, const nn::Vector<T>& b) {
  return neg_cosine<T>(std::span<const T>(a.data(), a.size()), std::span<const T>(b.data(), b.size()));
}

/// Gradient of neg_cosine(a, b) with respect to a, b held constant.
template <typename T>
nn::Vector<T> neg_cosine_grad(const nn::Vector<T>& a, const nn::Vector<T>& b) {
  const T na = a.norm(), nb = b.norm();
  if (!(na > 0) || !(nb > 0)) throw NumericDegeneracy("neg_cosine: zero-norm input");
  const nn::Vector<T> ah = a / na, bh = b / nb;
  return -(bh - ah.dot(bh) * ah) / na;
}

/// Symmetric loss; z1 and z2 are targets (constants for differentiation).
template <typename T>
double simsiam_loss(const nn::Vector<T>& p1, const nn::Vector<T>& p2, const nn::Vector<T>& z1,
                    const nn::Vector<T>& z2) {
  return 0.5 * neg_cosine(p1, z2) + 0.5 * neg_cosine(p2, z1);
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  int batch_size = 32;
  int epochs = 250;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Unset: 0.05 * batch_size / 256.
  std::optional<double> lr;
  std::uint64_t seed = 0;
  /// Write an intermediate checkpoint every N epochs; 0 disables.
  int checkpoint_every = 0;
  /// Worker threads for view generation. Results do not depend on it.
  int threads = 1;
  ViewMode view_mode = ViewMode::kDualClip;
  /// Skip an epoch's trailing partial batch when the epoch has at least one full batch.
  bool drop_last = false;

  double base_lr() const { return lr ? *lr : 0.05 * batch_size / 256.0; }

  void validate() const {
    if (batch_size < 2) throw InvalidArgument("batch_size must be >= 2");
    if (epochs < 0) throw InvalidArgument("epochs must be >= 0");
    // lr == 0 is accepted as an explicit no-op update.
    if (!(base_lr() >= 0) || !std::isfinite(base_lr())) throw InvalidArgument("learning rate must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw InvalidArgument("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw InvalidArgument("weight_decay must be >= 0");
    if (checkpoint_every < 0 || threads < 1) throw InvalidArgument("bad checkpoint_every/threads");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},   {"epochs", c.epochs},
       {"momentum", c.momentum},       {"weight_decay", c.weight_decay},
       {"lr", c.base_lr()},            {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every}, {"threads", c.threads},
       {"view_mode", to_string(c.view_mode)}, {"drop_last", c.drop_last}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("lr") && !j["lr"].is_null()) c.lr = j["lr"].get<double>();
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.threads = j.value("threads", c.threads);
  c.drop_last = j.value("drop_last", c.drop_last);
  if (j.contains("view_mode")) {
    const auto m = j["view_mode"].get<std::string>();
    if (m == "dual_clip")
      c.view_mode = ViewMode::kDualClip;
    else if (m == "baseline")
      c.view_mode = ViewMode::kBaseline;
    else
      throw InvalidArgument("unknown view_mode " + m);
  }
}

// ---------------------------------------------------------------------------
// Batch gradient

template <typename T>
struct BatchLoss {
  /// Mean loss over the batch.
  double loss = 0;
  /// Projections of the first views, one column per sample.
  nn::Matrix<T> z1;
  /// Loss terms with a zero-norm prediction or target; they count as 0 with no gradient.
  int degenerate_terms = 0;
};

/**
 * Mean loss over view pairs (views1[i], views2[i]) and its parameter
 * gradient, added into `grad`. Each view batch passes through the model
 * separately. Targets (z, or h in literal mode) are read from the forward
 * pass and never differentiated. A term whose prediction or target has zero
 * norm contributes 0 and no gradient.
 */
template <typename T>
BatchLoss<T> batch_loss_and_grad(const Model<T>& model, std::span<const Image<T>> views1,
                                 std::span<const Image<T>> views2, std::span<T> grad) {
  if (views1.size() != views2.size() || views1.empty()) throw InvalidArgument("view batches must match and be nonempty");
  typename Model<T>::Traces t1, t2;
  const auto r1 = model.forward(views1, &t1);
  const auto r2 = model.forward(views2, &t2);
  const bool literal = model.head_spec().literal_loss;
  const nn::Matrix<T>& target1 = literal ? r1.h : r1.z;
  const nn::Matrix<T>& target2 = literal ? r2.h : r2.z;

  const auto b = static_cast<Eigen::Index>(views1.size());
  const T w = T(0.5) / static_cast<T>(b);
  nn::Matrix<T> dp1(r1.p.rows(), b), dp2(r2.p.rows(), b);
  BatchLoss<T> out;
  auto term = [&](const nn::Vector<T>& p, const nn::Vector<T>& y, auto dst) {
    if (!(p.norm() > 0) || !(y.norm() > 0)) {
      dst.setZero();
      ++out.degenerate_terms;
      return;
    }
    out.loss += 0.5 * neg_cosine(p, y);
    dst = w * neg_cosine_grad(p, y);
  };
  for (Eigen::Index i = 0; i < b; ++i) {
    term(r1.p.col(i), target2.col(i), dp1.col(i));
    term(r2.p.col(i), target1.col(i), dp2.col(i));
  }
  out.loss /= static_cast<double>(b);
  out.z1 = r1.z;
  model.backward(t1, dp1, grad);
  model.backward(t2, dp2, grad);
  return out;
}

// ---------------------------------------------------------------------------
// Optimization

template <typename T>
struct TrainState {
  Model<T> model;
  std::vector<T> velocity;
  std::int64_t step = 0;

  explicit TrainState(Model<T> m) : model(std::move(m)), velocity(model.param_count(), T(0)) {}
};

/// v = momentum * v + (g + wd * w);  w -= lr * v.
template <typename T>
void sgd_update(std::vector<T>& params, std::vector<T>& velocity, std::span<const T> grad, double lr,
                double momentum, double weight_decay) {
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = m * velocity[i] + (grad[i] + wd * params[i]);
    params[i] -= step * velocity[i];
  }
}

struct BatchItem {
  const HuSlice* hu = nullptr;
  std::uint64_t view_seed = 0;
};

struct StepResult {
  double loss = 0;
  /// Normalized z of the first view per sample, for the collapse monitor.
  std::vector<std::vector<double>> z_normalized;
  int degenerate_terms = 0;
};

/// Mean over dimensions of the per-dimension std of L2-normalized vectors.
inline double embedding_std(const std::vector<std::vector<double>>& zs) {
  if (zs.size() < 2) return 0.0;
  const std::size_t d = zs.front().size();
  double total = 0;
  for (std::size_t k = 0; k < d; ++k) {
    double mean = 0;
    for (const auto& z : zs) mean += z[k];
    mean /= static_cast<double>(zs.size());
    double var = 0;
    for (const auto& z : zs) var += (z[k] - mean) * (z[k] - mean);
    total += std::sqrt(var / static_cast<double>(zs.size()));
  }
  return total / static_cast<double>(d);
}

/**
 * One SGD step on the mean loss over `batch`. Each item's two views come
 * from its own seed, so view generation may run on `cfg.threads` workers
 * without changing the result.
 */
template <typename T>
StepResult train_step(TrainState<T>& state, std::span<const BatchItem> batch, const TrainConfig& cfg,
                      const AugmentConfig& aug) {
  if (batch.empty()) throw InvalidArgument("train_step: empty batch");
  const auto& enc = state.model.encoder_spec();
  if (aug.out_height != enc.input_height || aug.out_width != enc.input_width)
    throw InvalidArgument("augment out_size must equal the encoder input size");

  const std::size_t n = batch.size();
  std::vector<Image<T>> v1(n), v2(n);
  auto work = [&](std::size_t i) {
    Rng r1(derive_seed(batch[i].view_seed, "view1")), r2(derive_seed(batch[i].view_seed, "view2"));
    std::tie(v1[i], v2[i]) = make_views<T>(*batch[i].hu, aug, r1, r2, cfg.view_mode);
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), n);
  if (workers <= 1) {
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

  std::vector<T> grad(state.model.param_count(), T(0));
  StepResult out;
  const auto bl = batch_loss_and_grad(state.model, std::span<const Image<T>>(v1), std::span<const Image<T>>(v2),
                                      std::span<T>(grad));
  out.loss = bl.loss;
  out.degenerate_terms = bl.degenerate_terms;
  for (Eigen::Index i = 0; i < bl.z1.cols(); ++i) {
    const double norm = static_cast<double>(bl.z1.col(i).norm());
    std::vector<double> zn(static_cast<std::size_t>(bl.z1.rows()));
    for (Eigen::Index k = 0; k < bl.z1.rows(); ++k) zn[k] = norm > 0 ? bl.z1(k, i) / norm : 0.0;
    out.z_normalized.push_back(std::move(zn));
  }
  bool finite = std::isfinite(out.loss);
  for (T g : grad) finite = finite && std::isfinite(static_cast<double>(g));
  if (!finite)
    throw TrainingDiverged("non-finite training loss or gradient at step " + std::to_string(state.step),
                           embedding_std(out.z_normalized), cfg.base_lr());

  sgd_update(state.model.params(), state.velocity, std::span<const T>(grad), cfg.base_lr(), cfg.momentum,
             cfg.weight_decay);
  ++state.step;
  return out;
}

/// Convenience overload: item seeds are drawn from `rng`.
template <typename T>
StepResult train_step(TrainState<T>& state, std::span<const HuSlice> batch, const TrainConfig& cfg,
                      const AugmentConfig& aug, Rng& rng) {
  std::vector<BatchItem> items;
  for (const auto& hu : batch) items.push_back({&hu, rng.next_u64()});
  return train_step(state, std::span<const BatchItem>(items), cfg, aug);
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  int epoch = 0;
  double loss = 0;
  double embedding_std = 0;
  double lr = 0;
  double wall_time = 0;
  int degenerate_terms = 0;
};

inline void to_json(nlohmann::json& j, const EpochLog& e) {
  j = {{"epoch", e.epoch}, {"loss", e.loss}, {"embedding_std", e.embedding_std}, {"lr", e.lr},
       {"wall_time", e.wall_time}, {"degenerate_terms", e.degenerate_terms}};
}

template <typename T>
struct TrainResult {
  TrainState<T> state;
  std::vector<EpochLog> curve;
  std::vector<std::string> warnings;
};

/// Mean per-dimension std of normalized z below this for kCollapseEpochs epochs flags collapse.
inline constexpr double kCollapseStd = 1e-4;
inline constexpr int kCollapseEpochs = 3;

inline nlohmann::json training_meta(const TrainConfig& cfg, const AugmentConfig& aug, int epoch) {
  return {{"train_config", cfg}, {"augment", aug}, {"epoch", epoch}};
}

/**
 * Trains on the manifest's train split. With `out_dir`, writes
 * `metrics.jsonl` (one line per epoch), periodic `checkpoint_epochN.ckpt`,
 * and the final `checkpoint.ckpt`.
 *
 * `initial` supplies pretrained weights; it is required when `enc.init` is
 * EncoderInit::kImageNetPretrained.
 */
template <typename T = float>
TrainResult<T> train(const DatasetManifest& manifest, const EncoderSpec& enc, const HeadSpec& head,
                     const TrainConfig& cfg, const AugmentConfig& aug,
                     const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                     std::optional<Model<T>> initial = std::nullopt) {
  cfg.validate();
  aug.validate();
  const auto train_split = manifest.split(Split::kTrain);
  if (train_split.empty()) throw InvalidArgument("train: manifest has an empty train split");
  if (enc.init == EncoderInit::kImageNetPretrained && !initial)
    throw InvalidArgument("encoder init is pretrained but no pretrained weights were supplied");
  if (initial && (initial->encoder_spec().out_dim != enc.out_dim || !(initial->head_spec() == head)))
    throw InvalidArgument("pretrained weights do not match the requested architecture");

  TrainResult<T> result{TrainState<T>(initial ? std::move(*initial) : Model<T>::random(enc, head, cfg.seed)), {}, {}};
  auto& state = result.state;

  std::ofstream metrics;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    metrics.open(*out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw Error("cannot write metrics log in " + out_dir->string());
  }

  const auto t0 = std::chrono::steady_clock::now();
  int low_std_epochs = 0;
  bool collapse_reported = false;
  std::vector<std::size_t> order(train_split.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);

    double loss_sum = 0;
    std::size_t seen = 0;
    int degenerate = 0;
    std::vector<std::vector<double>> zs;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (cfg.drop_last && start > 0 && stop - start < static_cast<std::size_t>(cfg.batch_size)) break;
      std::vector<BatchItem> items;
      for (std::size_t i = start; i < stop; ++i) {
        const auto* rec = train_split[order[i]];
        items.push_back({&rec->hu, derive_seed(cfg.seed, "views", static_cast<std::uint64_t>(epoch), rec->slice_id)});
      }
      auto step = train_step(state, std::span<const BatchItem>(items), cfg, aug);
      loss_sum += step.loss * static_cast<double>(items.size());
      seen += items.size();
      degenerate += step.degenerate_terms;
      for (auto& z : step.z_normalized) zs.push_back(std::move(z));
    }

    EpochLog log_line{epoch, loss_sum / static_cast<double>(seen), embedding_std(zs), cfg.base_lr(),
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), degenerate};
    result.curve.push_back(log_line);
    low_std_epochs = log_line.embedding_std < kCollapseStd ? low_std_epochs + 1 : 0;
    if (low_std_epochs >= kCollapseEpochs && !collapse_reported) {
      result.warnings.push_back("representation collapse suspected at epoch " + std::to_string(epoch) +
                                " (embedding_std=" + std::to_string(log_line.embedding_std) + ")");
      log_warning(result.warnings.back());
      collapse_reported = true;
    }
    if (out_dir) {
      metrics << nlohmann::json(log_line).dump() << '\n' << std::flush;
      if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs)
        save_checkpoint(state.model, *out_dir / ("checkpoint_epoch" + std::to_string(epoch) + ".ckpt"),
                        training_meta(cfg, aug, epoch));
    }
  }
  if (out_dir) save_checkpoint(state.model, *out_dir / "checkpoint.ckpt", training_meta(cfg, aug, cfg.epochs));
  return result;
}

}  // namespace ctcbir
