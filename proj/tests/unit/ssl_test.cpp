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

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <vector>

#include "ctcbir/checkpoint.hpp"
#include "ctcbir/ssl.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace ctcbir {
namespace {

using testing::TempDir;

EncoderSpec tiny_encoder() {
  EncoderSpec e;
  e.out_dim = 8;
  e.input_height = 8;
  e.input_width = 8;
  e.channels = {4};
  return e;
}

HeadSpec tiny_head() {
  HeadSpec h;
  h.proj_dim = 16;
  return h;
}

Image<double> random_image(std::uint64_t seed, int hw = 8) {
  Rng rng(seed);
  Image<double> img(3, hw, hw);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

HuSlice random_hu(std::uint64_t seed, int hw = 16) {
  Rng rng(seed);
  HuSlice s(hw, hw);
  for (auto& v : s.data) v = static_cast<std::int16_t>(rng.uniform(-300, 400));
  return s;
}

TEST(NegCosine, MatchesReferenceAndBounds) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(7), b(7);
    for (auto& v : a) v = rng.normal(0, 1);
    for (auto& v : b) v = rng.normal(0, 1);
    const double d = neg_cosine<double>(a, b);
    EXPECT_NEAR(d, static_cast<double>(oracle::neg_cos(a, b)), 1e-12);
    EXPECT_GE(d, -1.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(NegCosine, IdentitiesAndScaleInvariance) {
  const std::vector<double> a{1, 2, 3}, neg{-1, -2, -3}, scaled{5, 10, 15}, ortho{3, 0, -1};
  EXPECT_NEAR(neg_cosine<double>(a, a), -1.0, 1e-12);
  EXPECT_NEAR(neg_cosine<double>(a, neg), 1.0, 1e-12);
  EXPECT_NEAR(neg_cosine<double>(a, scaled), -1.0, 1e-12);
  EXPECT_NEAR(neg_cosine<double>(a, ortho), 0.0, 1e-12);
}

TEST(NegCosine, ZeroNormRaises) {
  const std::vector<double> a{1, 2}, z{0, 0};
  EXPECT_THROW(neg_cosine<double>(a, z), NumericDegeneracy);
  EXPECT_THROW(neg_cosine<double>(z, a), NumericDegeneracy);
}

TEST(NegCosine, GradientMatchesFiniteDifference) {
  Rng rng(11);
  nn::Vector<double> a(6), b(6);
  for (Eigen::Index i = 0; i < 6; ++i) a[i] = rng.normal(0, 1), b[i] = rng.normal(0, 1);
  const auto g = neg_cosine_grad(a, b);
  for (Eigen::Index i = 0; i < 6; ++i) {
    nn::Vector<double> ap = a, am = a;
    ap[i] += 1e-6;
    am[i] -= 1e-6;
    const double fd = (neg_cosine(ap, b) - neg_cosine(am, b)) / 2e-6;
    EXPECT_NEAR(g[i], fd, 1e-7);
  }
}

TEST(SimsiamLoss, SymmetricUnderViewSwap) {
  Rng rng(5);
  nn::Vector<double> p1(4), p2(4), z1(4), z2(4);
  for (Eigen::Index i = 0; i < 4; ++i) p1[i] = rng.normal(0, 1), p2[i] = rng.normal(0, 1), z1[i] = rng.normal(0, 1), z2[i] = rng.normal(0, 1);
  EXPECT_DOUBLE_EQ(simsiam_loss(p1, p2, z1, z2), simsiam_loss(p2, p1, z2, z1));
  EXPECT_NEAR(simsiam_loss(z2, z1, z1, z2), -1.0, 1e-12);
}

std::vector<Image<double>> random_images(std::uint64_t seed, int n) {
  std::vector<Image<double>> out;
  for (int i = 0; i < n; ++i) out.push_back(random_image(seed * 100 + static_cast<std::uint64_t>(i)));
  return out;
}

double max_relative_gradient_error(const HeadSpec& head, int batch) {
  const auto m = Model<double>::random(tiny_encoder(), head, 21);
  EXPECT_LE(m.param_count(), 5000u);
  return oracle::max_relative_gradient_error(m, random_images(1, batch), random_images(2, batch));
}

TEST(BatchGradient, MatchesFiniteDifferencesWithBatchNormHeads) {
  EXPECT_LT(max_relative_gradient_error(tiny_head(), 3), 1e-4);
}

TEST(BatchGradient, MatchesFiniteDifferencesWithLayerNormHeadsSingleImage) {
  auto head = tiny_head();
  head.norm = HeadNorm::kLayer;
  EXPECT_LT(max_relative_gradient_error(head, 1), 1e-4);
}

TEST(BatchGradient, LiteralModeMatchesFiniteDifferences) {
  auto head = tiny_head();
  head.literal_loss = true;
  EXPECT_LT(max_relative_gradient_error(head, 3), 1e-4);
}

TEST(BatchGradient, DiffersFromFullyDifferentiatedLoss) {
  // Differentiating through the targets as well gives a different gradient.
  const auto m = Model<double>::random(tiny_encoder(), tiny_head(), 4);
  const auto v1 = random_images(9, 3), v2 = random_images(10, 3);
  std::vector<double> grad(m.param_count(), 0.0);
  batch_loss_and_grad(m, std::span<const Image<double>>(v1), std::span<const Image<double>>(v2),
                      std::span<double>(grad));
  auto full = [&](const Model<double>& mm) {
    const auto r1 = mm.forward(std::span<const Image<double>>(v1)), r2 = mm.forward(std::span<const Image<double>>(v2));
    double total = 0;
    for (Eigen::Index j = 0; j < r1.p.cols(); ++j)
      total += simsiam_loss<double>(r1.p.col(j), r2.p.col(j), r1.z.col(j), r2.z.col(j));
    return total / static_cast<double>(r1.p.cols());
  };
  double diff = 0;
  for (std::size_t i = 0; i < m.param_count(); ++i) {
    Model<double> plus = m, minus = m;
    plus.params()[i] += 1e-6;
    minus.params()[i] -= 1e-6;
    diff = std::max(diff, std::abs((full(plus) - full(minus)) / 2e-6 - grad[i]));
  }
  EXPECT_GT(diff, 1e-3);
}

TEST(BatchGradient, BatchNormRejectsSingleSample) {
  const auto m = Model<double>::random(tiny_encoder(), tiny_head(), 4);
  const auto v = random_images(1, 1);
  EXPECT_THROW(m.forward(std::span<const Image<double>>(v)), InvalidArgument);
}

TEST(Sgd, UpdateRuleOracle) {
  std::vector<double> w{1.0, -2.0}, v{0.5, 0.0};
  const std::vector<double> g{0.1, 0.2};
  sgd_update(w, v, std::span<const double>(g), 0.1, 0.9, 0.01);
  // v = 0.9*0.5 + 0.1 + 0.01*1 = 0.56 ; w = 1 - 0.056
  EXPECT_NEAR(v[0], 0.56, 1e-15);
  EXPECT_NEAR(w[0], 0.944, 1e-15);
  // v = 0 + 0.2 - 0.02 = 0.18 ; w = -2 - 0.018
  EXPECT_NEAR(v[1], 0.18, 1e-15);
  EXPECT_NEAR(w[1], -2.018, 1e-15);
}

TEST(TrainConfig, DefaultLrScalesWithBatch) {
  TrainConfig c;
  c.batch_size = 256;
  EXPECT_DOUBLE_EQ(c.base_lr(), 0.05);
  c.batch_size = 32;
  EXPECT_DOUBLE_EQ(c.base_lr(), 0.00625);
  c.lr = 0.1;
  EXPECT_DOUBLE_EQ(c.base_lr(), 0.1);
  c.lr = -1;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c.lr.reset();
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c;
  c.epochs = 7;
  c.seed = 99;
  c.view_mode = ViewMode::kBaseline;
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(back.epochs, 7);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.view_mode, ViewMode::kBaseline);
  EXPECT_DOUBLE_EQ(back.base_lr(), c.base_lr());
}

AugmentConfig small_aug() {
  AugmentConfig a;
  a.out_height = 8;
  a.out_width = 8;
  return a;
}

TEST(TrainStep, ZeroLrLeavesParamsUnchanged) {
  TrainState<double> st(Model<double>::random(tiny_encoder(), tiny_head(), 1));
  const auto before = st.model.params();
  std::vector<HuSlice> batch{random_hu(1), random_hu(2), random_hu(3)};
  TrainConfig cfg;
  cfg.lr = 0.0;
  Rng rng(0);
  const auto r = train_step(st, std::span<const HuSlice>(batch), cfg, small_aug(), rng);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_EQ(st.model.params(), before);
  EXPECT_EQ(st.step, 1);
}

TEST(TrainStep, ThreadCountDoesNotChangeResult) {
  std::vector<HuSlice> hus{random_hu(1), random_hu(2), random_hu(3), random_hu(4)};
  std::vector<BatchItem> items;
  for (std::size_t i = 0; i < hus.size(); ++i) items.push_back({&hus[i], 100 + i});
  TrainConfig cfg;
  TrainState<float> a(Model<float>::random(tiny_encoder(), tiny_head(), 2)), b = a;
  cfg.threads = 1;
  const auto ra = train_step(a, std::span<const BatchItem>(items), cfg, small_aug());
  cfg.threads = 3;
  const auto rb = train_step(b, std::span<const BatchItem>(items), cfg, small_aug());
  EXPECT_EQ(ra.loss, rb.loss);
  EXPECT_EQ(a.model.params(), b.model.params());
}

TEST(TrainStep, RejectsMismatchedAugmentSize) {
  TrainState<float> st(Model<float>::random(tiny_encoder(), tiny_head(), 2));
  std::vector<HuSlice> batch{random_hu(1), random_hu(2)};
  Rng rng(0);
  EXPECT_THROW(train_step(st, std::span<const HuSlice>(batch), TrainConfig{}, AugmentConfig{}, rng), InvalidArgument);
}

TEST(TrainStep, RepeatedStepsReduceLoss) {
  // Fixed views, deterministic augmentation: plain optimization on a tiny batch.
  TrainState<double> st(Model<double>::random(tiny_encoder(), tiny_head(), 8));
  std::vector<HuSlice> hus{random_hu(1), random_hu(2), random_hu(3), random_hu(4)};
  std::vector<BatchItem> items;
  for (std::size_t i = 0; i < hus.size(); ++i) items.push_back({&hus[i], i});
  TrainConfig cfg;
  cfg.lr = 0.05;
  const auto aug = AugmentConfig::deterministic(8, 8);
  const double first = train_step(st, std::span<const BatchItem>(items), cfg, aug).loss;
  double last = first;
  for (int i = 0; i < 30; ++i) last = train_step(st, std::span<const BatchItem>(items), cfg, aug).loss;
  EXPECT_LT(last, first);
}

TEST(EmbeddingStd, Oracle) {
  EXPECT_DOUBLE_EQ(embedding_std({{1, 0}, {1, 0}}), 0.0);
  // dim0: {1,-1} std 1 ; dim1: {0,0} std 0
  EXPECT_DOUBLE_EQ(embedding_std({{1, 0}, {-1, 0}}), 0.5);
}

DatasetManifest tiny_manifest() {
  std::vector<CTVolume> vols;
  for (int i = 0; i < 2; ++i) vols.push_back(testing::striped_volume("v" + std::to_string(i), 8, 4, 16, i + 1));
  SamplingOptions so;
  so.n_liver = 2;
  so.n_nonliver = 2;
  return build_manifest(std::span<const CTVolume>(vols), 2, 5, so);
}

TEST(Train, DeterministicAndWritesArtifacts) {
  const auto manifest = tiny_manifest();
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 3;
  cfg.checkpoint_every = 2;
  cfg.seed = 17;
  TempDir dir("train");
  const auto a = train<float>(manifest, tiny_encoder(), tiny_head(), cfg, small_aug(), dir.path());
  const auto b = train<float>(manifest, tiny_encoder(), tiny_head(), cfg, small_aug());
  EXPECT_EQ(a.state.model.params(), b.state.model.params());
  ASSERT_EQ(a.curve.size(), 3u);
  for (const auto& e : a.curve) {
    EXPECT_TRUE(std::isfinite(e.loss));
    EXPECT_GE(e.loss, -1.0);
    EXPECT_LE(e.loss, 1.0);
  }

  std::ifstream metrics(dir.path() / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(metrics, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("embedding_std"));
    EXPECT_TRUE(j.contains("wall_time"));
    ++lines;
  }
  EXPECT_EQ(lines, 3);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "checkpoint_epoch2.ckpt"));
  const auto ck = load_checkpoint<float>(dir.path() / "checkpoint.ckpt");
  EXPECT_EQ(ck.model.params(), a.state.model.params());
  EXPECT_EQ(ck.meta.at("train_config").at("epochs"), 3);
}

TEST(Train, PretrainedInitRequiresWeights) {
  auto enc = tiny_encoder();
  enc.init = EncoderInit::kImageNetPretrained;
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 0;
  EXPECT_THROW(train<float>(tiny_manifest(), enc, tiny_head(), cfg, small_aug()), InvalidArgument);
  const auto init = Model<float>::random(tiny_encoder(), tiny_head(), 3);
  const auto r = train<float>(tiny_manifest(), enc, tiny_head(), cfg, small_aug(), std::nullopt, init);
  EXPECT_EQ(r.state.model.params(), init.params());
}

TEST(Model, ResNetIsRejected) {
  auto enc = tiny_encoder();
  enc.kind = EncoderKind::kResNet50;
  EXPECT_THROW(Model<float>(enc, tiny_head()), InvalidArgument);
}

TEST(Model, WrongInputShapeRejected) {
  const auto m = Model<double>::random(tiny_encoder(), tiny_head(), 1);
  EXPECT_THROW(m.extract_h(random_image(1, 16)), InvalidArgument);
}

TEST(Checkpoint, RoundTripAndFingerprint) {
  const auto m = Model<float>::random(tiny_encoder(), tiny_head(), 7);
  const auto bytes = encode_checkpoint(m, {{"note", "x"}});
  const auto ck = decode_checkpoint<float>(bytes);
  EXPECT_EQ(ck.model.params(), m.params());
  EXPECT_EQ(ck.fingerprint, model_fingerprint(m));
  EXPECT_EQ(ck.meta.at("note"), "x");
  // Loading as double keeps the fingerprint of the stored bytes.
  EXPECT_EQ(decode_checkpoint<double>(bytes).fingerprint, ck.fingerprint);
  // Meta does not affect the fingerprint; parameters do.
  EXPECT_EQ(decode_checkpoint<float>(encode_checkpoint(m, {{"note", "y"}})).fingerprint, ck.fingerprint);
  auto m2 = m;
  m2.params()[0] += 1.0f;
  EXPECT_NE(model_fingerprint(m2), ck.fingerprint);
}

TEST(Checkpoint, CorruptionDetected) {
  const auto m = Model<float>::random(tiny_encoder(), tiny_head(), 7);
  auto bytes = encode_checkpoint(m);
  auto flipped = bytes;
  flipped[flipped.size() - 20] ^= 0x01;
  EXPECT_THROW(decode_checkpoint<float>(flipped), ChecksumError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint<float>(truncated), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint<float>(bad_magic), FormatError);
}

TEST(Checkpoint, ModelCastPreservesOutputs) {
  const auto m = Model<double>::random(tiny_encoder(), tiny_head(), 7);
  const auto f = model_cast<float>(m);
  const auto img = random_image(4);
  const auto hd = m.extract_h(img);
  const auto hf = f.extract_h(img.cast<float>());
  for (Eigen::Index i = 0; i < hd.size(); ++i) EXPECT_NEAR(hd[i], hf[i], 1e-4);
}

}  // namespace
}  // namespace ctcbir
