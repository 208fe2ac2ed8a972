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

// Acceptance suite: one PASS/FAIL line per criterion. Exit code 0 only when all selected criteria pass.
//
//   acceptance [--only 1,2,7] [--json report.json]

#include <Eigen/Dense>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ctcbir/cli.hpp"
#include "oracles.hpp"

namespace {

using namespace ctcbir;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
  nlohmann::json measured = nlohmann::json::object();
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Loss identities

nn::Vector<double> random_vector(Rng& rng, int dim) {
  nn::Vector<double> v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal(0, 1);
  return v;
}

/// Component of `v` orthogonal to `u`.
nn::Vector<double> orthogonal_to(const nn::Vector<double>& v, const nn::Vector<double>& u) {
  return v - (v.dot(u) / u.dot(u)) * u;
}

Outcome loss_identities() {
  Rng rng(101);
  double worst = 0;
  bool symmetric = true;
  for (int t = 0; t < 100; ++t) {
    const int dim = 2 + static_cast<int>(rng.index(31));
    const auto p1 = random_vector(rng, dim), p2 = random_vector(rng, dim);
    const double a = rng.uniform(0.1, 10), b = rng.uniform(0.1, 10);
    const nn::Vector<double> z2 = a * p1, z1 = b * p2;
    worst = std::max(worst, std::abs(simsiam_loss(p1, p2, z1, z2) + 1.0));
    worst = std::max(worst, std::abs(simsiam_loss(p1, p2, nn::Vector<double>(-z1), nn::Vector<double>(-z2)) - 1.0));
    const auto o2 = orthogonal_to(random_vector(rng, dim), p1), o1 = orthogonal_to(random_vector(rng, dim), p2);
    worst = std::max(worst, std::abs(simsiam_loss(p1, p2, o1, o2)));

    const auto q1 = random_vector(rng, dim), q2 = random_vector(rng, dim);
    const auto w1 = random_vector(rng, dim), w2 = random_vector(rng, dim);
    symmetric = symmetric && simsiam_loss(q1, q2, w1, w2) == simsiam_loss(q2, q1, w2, w1);
  }
  Outcome o;
  o.pass = worst <= 1e-6 && symmetric;
  o.detail = "max identity error " + fmt("%.2e", worst) + ", view swap " + (symmetric ? "exact" : "NOT exact");
  o.measured = {{"max_error", worst}, {"symmetric", symmetric}};
  return o;
}

// ---------------------------------------------------------------------------
// 2. Stop-gradient

Outcome stop_gradient() {
  EncoderSpec enc;
  enc.out_dim = 8;
  enc.input_height = 8;
  enc.input_width = 8;
  enc.channels = {4};
  HeadSpec head;
  head.proj_dim = 16;
  const auto model = Model<double>::random(enc, head, 21);
  auto images = [](std::uint64_t seed) {
    std::vector<Image<double>> out;
    for (int i = 0; i < 3; ++i) {
      Rng rng(seed * 100 + static_cast<std::uint64_t>(i));
      Image<double> img(3, 8, 8);
      for (auto& v : img.data) v = rng.uniform();
      out.push_back(std::move(img));
    }
    return out;
  };
  const double err = oracle::max_relative_gradient_error(model, images(1), images(2));
  Outcome o;
  o.pass = model.param_count() <= 5000 && err < 1e-4;
  o.detail = std::to_string(model.param_count()) + " params, max relative error " + fmt("%.2e", err);
  o.measured = {{"params", model.param_count()}, {"max_relative_error", err}};
  return o;
}

// ---------------------------------------------------------------------------
// 3. RELAX oracle

Outcome relax_oracle() {
  EncoderSpec enc;
  enc.out_dim = 8;
  enc.input_height = 4;
  enc.input_width = 4;
  enc.channels = {4};
  HeadSpec head;
  head.proj_dim = 8;
  const auto model = Model<double>::random(enc, head, 1);
  Rng rng(3);
  Image<double> img(3, 4, 4);
  for (auto& v : img.data) v = rng.uniform(0.1, 1.0);

  const auto masks = oracle::single_cell_off_masks();
  const auto got = relax_importance(model, img, masks);
  const auto want = oracle::relax(model, img, masks);
  double err = 0;
  for (std::size_t k = 0; k < want.size(); ++k) err = std::max(err, std::abs(got.importance.data[k] - want.data[k]));

  double ones_err = 0, zeros_max = 0;
  for (double v : relax_importance(model, img, generate_masks(10, 3, 3, 1.0, 4, 4, 1, true)).importance.data)
    ones_err = std::max(ones_err, std::abs(v - 1.0));
  for (double v : relax_importance(model, img, generate_masks(10, 3, 3, 0.0, 4, 4, 1, true)).importance.data)
    zeros_max = std::max(zeros_max, std::abs(v));

  Outcome o;
  o.pass = err <= 1e-6 && ones_err <= 1e-12 && zeros_max == 0.0;
  o.detail = "oracle gap " + fmt("%.2e", err) + ", ones-mask gap " + fmt("%.2e", ones_err) + ", zeros-mask max " +
             fmt("%.2e", zeros_max);
  o.measured = {{"oracle_gap", err}, {"ones_gap", ones_err}, {"zeros_max", zeros_max}};
  return o;
}

// ---------------------------------------------------------------------------
// 4. Metric oracles

EmbeddingStore random_store(Rng& rng, int n, int dim, const std::string& prefix) {
  EmbeddingStore s{"fp", dim, {}};
  for (int i = 0; i < n; ++i) {
    std::vector<float> v(static_cast<std::size_t>(dim));
    for (auto& x : v) x = static_cast<float>(rng.normal(0, 1));
    char id[16];
    std::snprintf(id, sizeof id, "%s%04d", prefix.c_str(), i);
    s.append({id, rng.bernoulli(0.5), "v" + std::to_string(i % 3), v});
  }
  return s;
}

Outcome metric_oracles() {
  Rng rng(5);
  int mismatches = 0;
  for (int t = 0; t < 200; ++t) {
    const int n = 6 + static_cast<int>(rng.index(45));
    const int dim = 1 + static_cast<int>(rng.index(16));
    const int k = 1 + static_cast<int>(rng.index(5));
    std::vector<bool> rel(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < rel.size(); ++i) rel[i] = rng.bernoulli(0.5);
    const int kk = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(n)));
    mismatches += precision_at_k(rel, kk) != oracle::precision(rel, kk);
    mismatches += average_precision(rel, kk) != oracle::average_precision(rel, kk);

    const auto test = random_store(rng, n, dim, "t");
    const auto train = random_store(rng, n, dim, "r");
    mismatches += mean_average_precision(test, k).map != oracle::map(test, nullptr, k);
    mismatches += mean_average_precision(test, k, &train).map != oracle::map(test, &train, k);
    mismatches += knn_accuracy(train, test, k).accuracy != oracle::knn(train, test, k);

    const int rows = 1 + static_cast<int>(rng.index(7)), cols = 1 + static_cast<int>(rng.index(7));
    Array2D<double> r(rows, cols);
    for (auto& v : r.data) v = static_cast<double>(rng.index(4));
    BinaryMask s(rows, cols, 0);
    for (auto& v : s.data) v = rng.bernoulli(0.4) ? 1 : 0;
    s.data[0] = 1;
    const auto got = relevance_rank(r, s);
    mismatches += !got || *got != oracle::relevance_rank(r, s);
  }

  int rr_violations = 0;
  for (int t = 0; t < 200; ++t) {
    Array2D<double> r(8, 8);
    for (auto& v : r.data) v = rng.normal(0, 1);
    BinaryMask s(8, 8, 0);
    for (auto& v : s.data) v = rng.bernoulli(0.3) ? 1 : 0;
    s.data[0] = 1;
    Array2D<double> e = r, cube = r;
    for (auto& v : e.data) v = std::exp(v);
    for (auto& v : cube.data) v = 3 * v * v * v + 2;
    rr_violations += relevance_rank(r, s) != relevance_rank(e, s);
    rr_violations += relevance_rank(r, s) != relevance_rank(cube, s);
  }

  double rotation_gap = 0;
  for (int t = 0; t < 20; ++t) {
    const int dim = 2 + static_cast<int>(rng.index(10));
    const auto test = random_store(rng, 30, dim, "t");
    const auto train = random_store(rng, 30, dim, "r");
    Eigen::MatrixXd g(dim, dim);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) g(i, j) = rng.normal(0, 1);
    const Eigen::MatrixXd rot = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    auto rotate = [&](EmbeddingStore s) {
      for (auto& e : s.entries) {
        Eigen::VectorXd v(dim);
        for (int i = 0; i < dim; ++i) v[i] = e.vector[static_cast<std::size_t>(i)];
        const Eigen::VectorXd w = rot * v;
        for (int i = 0; i < dim; ++i) e.vector[static_cast<std::size_t>(i)] = static_cast<float>(w[i]);
      }
      return s;
    };
    const auto rtest = rotate(test), rtrain = rotate(train);
    rotation_gap = std::max(rotation_gap, std::abs(mean_average_precision(test, 5).map -
                                                   mean_average_precision(rtest, 5).map));
    rotation_gap = std::max(rotation_gap, std::abs(knn_accuracy(train, test).accuracy -
                                                   knn_accuracy(rtrain, rtest).accuracy));
  }

  Outcome o;
  o.pass = mismatches == 0 && rr_violations == 0 && rotation_gap <= 1e-9;
  o.detail = std::to_string(mismatches) + " oracle mismatches over 200 instances, " + std::to_string(rr_violations) +
             " RR transform violations, rotation gap " + fmt("%.2e", rotation_gap);
  o.measured = {{"mismatches", mismatches}, {"rr_violations", rr_violations}, {"rotation_gap", rotation_gap}};
  return o;
}

// ---------------------------------------------------------------------------
// 5. Retrieval exactness

Outcome retrieval_exactness() {
  Rng rng(2024);
  int id_mismatches = 0;
  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + static_cast<int>(rng.index(512));
    const int dim = 1 + static_cast<int>(rng.index(64));
    const auto store = random_store(rng, n, dim, "s");
    std::vector<float> q(static_cast<std::size_t>(dim));
    for (auto& x : q) x = static_cast<float>(rng.normal(0, 1));
    const int k = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(n)));
    const auto got = query(store, q, k);
    const auto want = oracle::topk(store, q, k);
    if (got.hits.size() != want.size()) {
      ++id_mismatches;
      continue;
    }
    for (std::size_t i = 0; i < want.size(); ++i) {
      id_mismatches += got.hits[i].slice_id != want[i].id;
      worst = std::max(worst, static_cast<double>(std::abs(static_cast<long double>(got.hits[i].similarity) -
                                                          want[i].sim)));
    }
  }
  Outcome o;
  o.pass = id_mismatches == 0 && worst <= 1e-6;
  o.detail = std::to_string(id_mismatches) + " id mismatches over 200 stores, max score gap " + fmt("%.2e", worst);
  o.measured = {{"id_mismatches", id_mismatches}, {"max_score_gap", worst}};
  return o;
}

// ---------------------------------------------------------------------------
// 6. Dataset protocol

Outcome dataset_protocol() {
  const auto vols = generate_phantom_volumes(13, 1);
  const auto m = build_manifest(std::span<const CTVolume>(vols), 10, 7);
  const auto n_train = m.split(Split::kTrain).size(), n_test = m.split(Split::kTest).size();
  std::map<std::string, std::set<Split>> splits;
  for (const auto& r : m.records) splits[r.volume_id].insert(r.split);
  bool disjoint = true;
  for (const auto& [id, s] : splits) disjoint = disjoint && s.size() == 1;
  bool balanced = true;
  for (const auto split : {Split::kTrain, Split::kTest}) {
    int liver = 0, other = 0;
    for (const auto* r : m.split(split)) (r->liver_label ? liver : other)++;
    balanced = balanced && liver == other;
  }
  Outcome o;
  o.pass = n_train == 100 && n_test == 30 && balanced && disjoint;
  o.detail = std::to_string(n_train) + " train / " + std::to_string(n_test) + " test, " +
             (balanced ? "balanced" : "UNBALANCED") + ", " + (disjoint ? "no volume spans splits" : "SPLIT LEAK");
  o.measured = {{"train", n_train}, {"test", n_test}, {"balanced", balanced}, {"disjoint", disjoint}};
  return o;
}

// ---------------------------------------------------------------------------
// 7-8. Phantom experiment

// Calibrated settings; see README "Phantom experiment".
constexpr int kPhantomVolumes = 20;
constexpr std::uint64_t kPhantomSeed = 7;
constexpr std::uint64_t kManifestSeed = 3;
constexpr int kTrainVolumes = 10;
constexpr int kEpochs = 50;
constexpr std::uint64_t kSeeds[] = {1, 2, 3};
constexpr int kLocalizationSlices = 20;
constexpr int kLocalizationMasks = 500;
/// Required lead of the trained model's mean relevance rank over the random encoder's.
constexpr double kRelevanceRankMargin = 0.0;

struct SeedRun {
  std::uint64_t seed = 0;
  double random_map = 0, dual_map = 0, baseline_map = 0;
  double random_rr = 0, dual_rr = 0;
  double final_loss = 0;
};

struct PhantomExperiment {
  std::vector<SeedRun> runs;
  double train_seconds = 0, localization_seconds = 0;
};

double test_map(const Model<float>& m, const DatasetManifest& manifest) {
  const auto fp = model_fingerprint(m);
  return evaluate_stores(embed_dataset(m, fp, manifest, Split::kTrain), embed_dataset(m, fp, manifest, Split::kTest), 5)
      .map;
}

double mean_rr(const Model<float>& m, const std::vector<const SliceRecord*>& slices) {
  return summarize_relevance_rank(relevance_ranks(m, slices, kLocalizationMasks, 0)).mean;
}

PhantomExperiment run_phantom_experiment(bool with_localization) {
  const auto vols = generate_phantom_volumes(kPhantomVolumes, kPhantomSeed);
  const auto manifest = build_manifest(std::span<const CTVolume>(vols), kTrainVolumes, kManifestSeed);
  EncoderSpec enc;
  enc.input_height = vols.front().height;
  enc.input_width = vols.front().width;
  const HeadSpec head;
  AugmentConfig aug;
  aug.out_height = enc.input_height;
  aug.out_width = enc.input_width;

  std::vector<const SliceRecord*> liver_test;
  for (const auto* r : manifest.split(Split::kTest))
    if (r->liver_label && liver_test.size() < static_cast<std::size_t>(kLocalizationSlices)) liver_test.push_back(r);

  PhantomExperiment ex;
  for (const auto seed : kSeeds) {
    SeedRun run;
    run.seed = seed;
    const auto random = Model<float>::random(enc, head, seed);
    run.random_map = test_map(random, manifest);
    TrainConfig cfg;
    cfg.epochs = kEpochs;
    cfg.batch_size = 32;
    cfg.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    cfg.view_mode = ViewMode::kDualClip;
    const auto dual = train<float>(manifest, enc, head, cfg, aug);
    cfg.view_mode = ViewMode::kBaseline;
    const auto baseline = train<float>(manifest, enc, head, cfg, aug);
    ex.train_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.dual_map = test_map(dual.state.model, manifest);
    run.baseline_map = test_map(baseline.state.model, manifest);
    run.final_loss = dual.curve.back().loss;
    if (with_localization) {
      const auto t1 = std::chrono::steady_clock::now();
      run.random_rr = mean_rr(random, liver_test);
      run.dual_rr = mean_rr(dual.state.model, liver_test);
      ex.localization_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
    }
    std::printf("  seed %llu: MAP dual %.4f, baseline %.4f, random %.4f; final loss %.4f",
                static_cast<unsigned long long>(seed), run.dual_map, run.baseline_map, run.random_map,
                run.final_loss);
    if (with_localization) std::printf("; RR dual %.4f, random %.4f", run.dual_rr, run.random_rr);
    std::printf("\n");
    std::fflush(stdout);
    ex.runs.push_back(run);
  }
  return ex;
}

double mean_of(const std::vector<SeedRun>& runs, double SeedRun::*field) {
  double s = 0;
  for (const auto& r : runs) s += r.*field;
  return s / static_cast<double>(runs.size());
}

Outcome phantom_end_to_end(const PhantomExperiment& ex) {
  const double dual = mean_of(ex.runs, &SeedRun::dual_map);
  const double baseline = mean_of(ex.runs, &SeedRun::baseline_map);
  const double random = mean_of(ex.runs, &SeedRun::random_map);
  const bool a = dual >= 0.85, b = dual >= baseline - 0.02, c = dual - random >= 0.10;
  Outcome o;
  o.pass = a && b && c;
  o.detail = "mean MAP@5 dual " + fmt("%.4f", dual) + (a ? " >= " : " < ") + "0.85; baseline " +
             fmt("%.4f", baseline) + (b ? " (ok)" : " (dual trails by > 0.02)") + "; random " + fmt("%.4f", random) +
             ", lead " + fmt("%.4f", dual - random) + (c ? " >= " : " < ") + "0.10; train " +
             fmt("%.0f", ex.train_seconds) + " s";
  o.measured = {{"dual_map", dual}, {"baseline_map", baseline}, {"random_map", random}, {"a", a}, {"b", b}, {"c", c}};
  return o;
}

Outcome phantom_localization(const PhantomExperiment& ex) {
  const double dual = mean_of(ex.runs, &SeedRun::dual_rr);
  const double random = mean_of(ex.runs, &SeedRun::random_rr);
  Outcome o;
  o.pass = dual - random > kRelevanceRankMargin;
  o.detail = "mean RR over " + std::to_string(kLocalizationSlices) + " slices at " +
             std::to_string(kLocalizationMasks) + " masks: trained " + fmt("%.4f", dual) + ", random " +
             fmt("%.4f", random) + ", lead " + fmt("%.4f", dual - random) + " (need > " +
             fmt("%.2f", kRelevanceRankMargin) + "); saliency " + fmt("%.0f", ex.localization_seconds) + " s";
  o.measured = {{"trained_rr", dual}, {"random_rr", random}};
  return o;
}

// ---------------------------------------------------------------------------
// 9. Format round trips

Outcome format_round_trips() {
  const auto dir = fs::temp_directory_path() / ("ctcbir_acceptance_" + std::to_string(std::random_device{}()));
  fs::create_directories(dir);
  Rng rng(9);
  const auto store = random_store(rng, 300, 24, "s");
  save_store(store, dir / "a.store");
  const auto store_back = load_store(dir / "a.store");
  const bool store_exact = store_back == store && encode_store(store_back) == read_file(dir / "a.store");

  EncoderSpec enc;
  enc.input_height = 16;
  enc.input_width = 16;
  const auto model = Model<float>::random(enc, HeadSpec{}, 4);
  save_checkpoint(model, dir / "a.ckpt", {{"note", "round trip"}});
  const auto ck = load_checkpoint<float>(dir / "a.ckpt");
  const bool ckpt_exact = ck.model.params() == model.params() &&
                          encode_checkpoint(ck.model, ck.meta) == read_file(dir / "a.ckpt") &&
                          ck.fingerprint == model_fingerprint(model);

  auto corrupted = [](Bytes bytes, const std::function<void(std::span<const std::uint8_t>)>& decode) {
    bytes[bytes.size() - 9] ^= 0x01;
    try {
      decode(bytes);
    } catch (const ChecksumError&) {
      return true;
    } catch (const FormatError&) {
      return true;
    }
    return false;
  };
  const bool store_detected =
      corrupted(read_file(dir / "a.store"), [](std::span<const std::uint8_t> b) { (void)decode_store(b); });
  const bool ckpt_detected =
      corrupted(read_file(dir / "a.ckpt"), [](std::span<const std::uint8_t> b) { (void)decode_checkpoint<float>(b); });
  std::error_code ec;
  fs::remove_all(dir, ec);

  Outcome o;
  o.pass = store_exact && ckpt_exact && store_detected && ckpt_detected;
  o.detail = std::string("store ") + (store_exact ? "bit-exact" : "DIFFERS") + ", checkpoint " +
             (ckpt_exact ? "bit-exact" : "DIFFERS") + ", corruption " +
             (store_detected && ckpt_detected ? "detected in both" : "MISSED");
  o.measured = {{"store_exact", store_exact},
                {"checkpoint_exact", ckpt_exact},
                {"store_corruption_detected", store_detected},
                {"checkpoint_corruption_detected", ckpt_detected}};
  return o;
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
};

constexpr Criterion kCriteria[] = {
    {1, "loss identities", 1},           {2, "stop-gradient check", 30},
    {3, "RELAX oracle", 10},             {4, "metric oracles", 60},
    {5, "retrieval exactness", 30},      {6, "dataset protocol", 10},
    {7, "phantom end-to-end", 20 * 60},  {8, "phantom RELAX localization", 10 * 60},
    {9, "format round trips", 5},
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  std::optional<std::string> json_path;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else if (arg == "--json" && i + 1 < argc) {
      json_path = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--json report.json]\n";
      return 2;
    }
  }
  auto selected = [&](int id) { return only.empty() || only.count(id) > 0; };

  std::optional<PhantomExperiment> experiment;
  double experiment_seconds = 0;
  auto phantom = [&]() -> const PhantomExperiment& {
    if (!experiment) {
      const auto t0 = std::chrono::steady_clock::now();
      experiment = run_phantom_experiment(selected(8));
      experiment_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return *experiment;
  };

  nlohmann::json report = nlohmann::json::array();
  int failed = 0;
  for (const auto& c : kCriteria) {
    if (!selected(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      switch (c.id) {
        case 1: o = loss_identities(); break;
        case 2: o = stop_gradient(); break;
        case 3: o = relax_oracle(); break;
        case 4: o = metric_oracles(); break;
        case 5: o = retrieval_exactness(); break;
        case 6: o = dataset_protocol(); break;
        case 7: o = phantom_end_to_end(phantom()); break;
        case 8: o = phantom_localization(phantom()); break;
        case 9: o = format_round_trips(); break;
      }
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    // Criteria 7 and 8 share one experiment; each is charged its own part.
    if (c.id == 7 && experiment) seconds = experiment_seconds - experiment->localization_seconds;
    if (c.id == 8 && experiment) seconds = experiment->localization_seconds;
    const bool in_budget = seconds <= c.budget_seconds;
    const bool pass = o.pass && in_budget;
    failed += pass ? 0 : 1;
    std::printf("[%s] criterion %d %s: %s; %.2f s (budget %.0f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), seconds, c.budget_seconds, in_budget ? "" : ", EXCEEDED");
    std::fflush(stdout);
    report.push_back({{"criterion", c.id},
                      {"name", c.name},
                      {"pass", pass},
                      {"seconds", seconds},
                      {"budget_seconds", c.budget_seconds},
                      {"detail", o.detail},
                      {"measured", o.measured}});
  }
  if (json_path) write_file_atomic(*json_path, report.dump(2) + "\n");
  std::printf("%d of %zu selected criteria passed\n", static_cast<int>(report.size()) - failed, report.size());
  return failed == 0 ? 0 : 1;
}
