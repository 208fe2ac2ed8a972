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
 * @brief Command implementations behind the `ctcbir` tool. Each command is a
 * thin wrapper over library calls so its results equal the library's.
 *
 * Run configuration precedence: defaults < config file < `CTCBIR_<SECTION>_<KEY>`
 * environment variables < command-line flags.
 */

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctcbir/augment.hpp"
#include "ctcbir/checkpoint.hpp"
#include "ctcbir/core/bytes.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/core/log.hpp"
#include "ctcbir/embed_index.hpp"
#include "ctcbir/explain.hpp"
#include "ctcbir/imaging.hpp"
#include "ctcbir/metrics.hpp"
#include "ctcbir/model.hpp"
#include "ctcbir/phantom.hpp"
#include "ctcbir/ssl.hpp"
#include "ctcbir/volume_io.hpp"

namespace ctcbir::cli {

namespace fs = std::filesystem;

/// Exit code for an error escaping a command: 2 for invalid input, 1 otherwise.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const InvalidArgument*>(&e) || dynamic_cast<const NotFound*>(&e) ||
      dynamic_cast<const DuplicateId*>(&e) || dynamic_cast<const nlohmann::json::exception*>(&e))
    return 2;
  return 1;
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  TrainConfig train;
  AugmentConfig augment;
  EncoderSpec encoder;
  HeadSpec head;
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"train", c.train}, {"augment", c.augment}, {"encoder", c.encoder}, {"head", c.head}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw InvalidArgument("run config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "train" && key != "augment" && key != "encoder" && key != "head")
      throw InvalidArgument("unknown run config section " + key);
    if (!value.is_object()) throw InvalidArgument("run config section " + key + " must be an object");
  }
  if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
  if (j.contains("augment")) c.augment = j["augment"].get<AugmentConfig>();
  if (j.contains("encoder")) c.encoder = j["encoder"].get<EncoderSpec>();
  if (j.contains("head")) c.head = j["head"].get<HeadSpec>();
}

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

inline EnvLookup process_env() {
  return [](const std::string& name) -> std::optional<std::string> {
    const char* v = std::getenv(name.c_str());
    return v ? std::optional<std::string>(v) : std::nullopt;
  };
}

inline std::string env_name(const std::string& section, const std::string& key) {
  std::string out = "CTCBIR_" + section + "_" + key;
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::toupper(c); });
  return out;
}

/// Replaces `section.key` with `CTCBIR_SECTION_KEY` when set. Values parse as JSON, else as strings.
inline nlohmann::json apply_env_overrides(nlohmann::json config, const EnvLookup& env) {
  for (auto& [section, body] : config.items()) {
    if (!body.is_object()) continue;
    for (auto& [key, value] : body.items()) {
      const auto v = env(env_name(section, key));
      if (!v) continue;
      auto parsed = nlohmann::json::parse(*v, nullptr, false);
      value = parsed.is_discarded() ? nlohmann::json(*v) : std::move(parsed);
    }
  }
  return config;
}

/// Defaults, then `file`, then environment overrides. View size defaults to the encoder input size.
inline RunConfig load_run_config(const std::optional<fs::path>& file, const EnvLookup& env) {
  nlohmann::json j = RunConfig{};
  // Derived values stay derived unless set explicitly.
  j["train"]["lr"] = nullptr;
  j["head"]["pred_hidden"] = 0;
  bool explicit_out_size = env(env_name("augment", "out_size")).has_value();
  if (file) {
    if (!fs::exists(*file)) throw NotFound("config file not found: " + file->string());
    const auto text = read_file(*file);
    auto user = nlohmann::json::parse(text.begin(), text.end(), nullptr, false);
    if (user.is_discarded()) throw InvalidArgument("config file is not valid JSON: " + file->string());
    (void)user.get<RunConfig>();
    explicit_out_size = explicit_out_size || (user.contains("augment") && user["augment"].contains("out_size"));
    j.merge_patch(user);
  }
  auto out = apply_env_overrides(std::move(j), env).get<RunConfig>();
  // Views follow the encoder input size unless configured.
  if (!explicit_out_size) {
    out.augment.out_height = out.encoder.input_height;
    out.augment.out_width = out.encoder.input_width;
  }
  out.train.validate();
  out.augment.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Manifests on disk

/// Loads volumes by id from `sources`; relative paths resolve against `base`.
inline VolumeLoader source_loader(std::map<std::string, std::string> sources, fs::path base) {
  return [sources = std::move(sources), base = std::move(base)](const std::string& id) {
    const auto it = sources.find(id);
    if (it == sources.end()) throw NotFound("no source path for volume " + id);
    fs::path p(it->second);
    if (p.is_relative()) p = base / p;
    if (!fs::exists(p)) throw NotFound("volume file not found: " + p.string());
    auto v = load_volume(p);
    v.volume_id = id;
    return v;
  };
}

/// Scans `data_dir` and samples slices; source paths are recorded absolute.
inline DatasetManifest build_manifest_from_dir(const fs::path& data_dir, int n_train_volumes, std::uint64_t seed,
                                               const SamplingOptions& sampling = {}) {
  const auto found = scan_volume_dir(data_dir);
  if (found.empty()) throw InvalidArgument("no volumes found in " + data_dir.string());
  std::map<std::string, std::string> sources;
  std::vector<std::string> ids;
  for (const auto& [id, path] : found) {
    ids.push_back(id);
    sources[id] = fs::absolute(path).lexically_normal().string();
  }
  auto m = build_manifest(ids, source_loader(sources, {}), n_train_volumes, seed, sampling);
  m.volume_sources = std::move(sources);
  return m;
}

inline nlohmann::json read_json_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw NotFound(what + " not found: " + path.string());
  const auto text = read_file(path);
  auto j = nlohmann::json::parse(text.begin(), text.end(), nullptr, false);
  if (j.is_discarded()) throw FormatError(what + " is not valid JSON: " + path.string(), 0);
  return j;
}

inline DatasetManifest load_manifest(const fs::path& path) {
  const auto j = read_json_file(path, "manifest");
  return manifest_from_json(j, source_loader(j.at("volumes").get<std::map<std::string, std::string>>(),
                                             path.parent_path()));
}

/// One record of a saved manifest, loading only its volume.
inline SliceRecord load_manifest_slice(const fs::path& path, const std::string& slice_id) {
  const auto j = read_json_file(path, "manifest");
  for (const auto& jr : j.at("records")) {
    if (jr.at("slice_id").get<std::string>() != slice_id) continue;
    SliceRecord r;
    r.slice_id = slice_id;
    r.volume_id = jr.at("volume_id").get<std::string>();
    r.slice_index = jr.at("slice_index").get<int>();
    r.liver_label = jr.at("liver_label").get<bool>();
    r.split = parse_split(jr.at("split").get<std::string>());
    const auto v = source_loader(j.at("volumes").get<std::map<std::string, std::string>>(), path.parent_path())(
        r.volume_id);
    if (r.slice_index < 0 || r.slice_index >= v.depth) throw AlignmentError("slice index out of range: " + slice_id);
    r.hu = v.slice(r.slice_index);
    r.liver_mask = v.mask_slice(r.slice_index);
    return r;
  }
  throw NotFound("slice not in manifest: " + slice_id);
}

// ---------------------------------------------------------------------------
// phantom

struct PhantomArgs {
  fs::path out_dir;
  int n_volumes = 13;
  std::uint64_t seed = 0;
  PhantomOptions options;
};

inline std::vector<fs::path> cmd_phantom(const PhantomArgs& a) {
  return write_phantom_dataset(a.out_dir, a.n_volumes, a.seed, a.options);
}

// ---------------------------------------------------------------------------
// build-dataset

struct BuildDatasetArgs {
  fs::path data_dir;
  fs::path out_manifest;
  int n_train_volumes = 0;
  std::uint64_t seed = 0;
  SamplingOptions sampling;
};

inline DatasetManifest cmd_build_dataset(const BuildDatasetArgs& a) {
  auto m = build_manifest_from_dir(a.data_dir, a.n_train_volumes, a.seed, a.sampling);
  for (const auto& w : m.warnings) log_warning(w);
  if (a.out_manifest.has_parent_path()) fs::create_directories(a.out_manifest.parent_path());
  write_file_atomic(a.out_manifest, manifest_dump(m));
  return m;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  fs::path manifest;
  fs::path out_dir;
  std::optional<fs::path> config_file;
  bool baseline_single_clip = false;
  bool no_pretrain = false;
  std::optional<fs::path> init_checkpoint;
  std::optional<double> lr;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<int> checkpoint_every;
};

/// Effective configuration after file, environment, and flags.
inline RunConfig resolve_train_config(const TrainArgs& a, const EnvLookup& env) {
  auto c = load_run_config(a.config_file, env);
  if (a.lr) c.train.lr = *a.lr;
  if (a.epochs) c.train.epochs = *a.epochs;
  if (a.batch_size) c.train.batch_size = *a.batch_size;
  if (a.seed) c.train.seed = *a.seed;
  if (a.threads) c.train.threads = *a.threads;
  if (a.checkpoint_every) c.train.checkpoint_every = *a.checkpoint_every;
  if (a.baseline_single_clip) c.train.view_mode = ViewMode::kBaseline;
  if (a.no_pretrain) {
    if (a.init_checkpoint) throw InvalidArgument("--no-pretrain conflicts with --init-checkpoint");
    c.encoder.init = EncoderInit::kRandom;
  }
  if (a.init_checkpoint) c.encoder.init = EncoderInit::kImageNetPretrained;
  c.train.validate();
  c.encoder.validate();
  c.head.validate();
  return c;
}

struct TrainOutcome {
  RunConfig config;
  TrainResult<float> result;
  fs::path checkpoint;
};

/// Writes `config.json`, `metrics.jsonl`, and `checkpoint.ckpt` under `out_dir`.
inline TrainOutcome cmd_train(const TrainArgs& a, const EnvLookup& env = process_env()) {
  const auto cfg = resolve_train_config(a, env);
  std::optional<Model<float>> initial;
  if (a.init_checkpoint) initial = load_checkpoint<float>(*a.init_checkpoint).model;
  const auto manifest = load_manifest(a.manifest);
  fs::create_directories(a.out_dir);
  write_file_atomic(a.out_dir / "config.json", nlohmann::json(cfg).dump(2) + "\n");
  auto result = train<float>(manifest, cfg.encoder, cfg.head, cfg.train, cfg.augment, a.out_dir, std::move(initial));
  return {cfg, std::move(result), a.out_dir / "checkpoint.ckpt"};
}

// ---------------------------------------------------------------------------
// embed

struct EmbedArgs {
  fs::path checkpoint;
  fs::path manifest;
  fs::path out_store;
  /// train, test, or all.
  std::string split = "all";
  std::optional<fs::path> append_to;
};

inline EmbeddingStore cmd_embed(const EmbedArgs& a) {
  if (a.split != "train" && a.split != "test" && a.split != "all")
    throw InvalidArgument("split must be train, test, or all");
  const auto ck = load_checkpoint<float>(a.checkpoint);
  const auto manifest = load_manifest(a.manifest);
  std::vector<const SliceRecord*> records;
  if (a.split == "all") {
    for (const auto& r : manifest.records) records.push_back(&r);
  } else {
    records = manifest.split(parse_split(a.split));
  }
  if (records.empty()) throw InvalidArgument("no records in split " + a.split);
  EmbeddingStore existing;
  if (a.append_to) existing = load_store(*a.append_to);
  auto store = embed_append(ck, existing, std::span<const SliceRecord* const>(records));
  if (a.out_store.has_parent_path()) fs::create_directories(a.out_store.parent_path());
  save_store(store, a.out_store);
  return store;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  int k = 5;
  MapDatabase database = MapDatabase::kTestLeaveOneOut;
  /// Masks per slice for relevance rank; 0 skips it.
  int rr_masks = kDefaultMaskCount;
  std::uint64_t mask_seed = 0;
  int threads = 1;
};

/// MAP, kNN accuracy, and relevance rank of one model on a manifest's test split.
template <typename T>
EvalReport evaluate_checkpoint(const Checkpoint<T>& ck, const DatasetManifest& manifest, const EvalOptions& opt,
                               std::uint64_t seed = 0) {
  if (opt.rr_masks < 0) throw InvalidArgument("rr_masks must be >= 0");
  const auto train_store = embed_dataset(ck, manifest, Split::kTrain);
  const auto test_store = embed_dataset(ck, manifest, Split::kTest);
  auto report = evaluate_stores(train_store, test_store, opt.k, opt.database, seed);
  if (opt.rr_masks > 0) {
    const auto test = manifest.split(Split::kTest);
    const auto scores = relevance_ranks(ck.model, test, opt.rr_masks, opt.mask_seed, opt.threads);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (report.per_query[i].slice_id != test[i]->slice_id) throw Error("eval: query order mismatch");
      report.per_query[i].relevance_rank = scores[i];
    }
    const auto rr = summarize_relevance_rank(scores);
    if (rr.n_used > 0) report.relevance_rank = rr.mean;
    report.rr_excluded = rr.n_excluded;
  }
  return report;
}

struct EvalArgs {
  /// Checkpoint path; `{seed}` is replaced by each entry of `seeds`.
  std::string checkpoint;
  fs::path manifest;
  std::optional<fs::path> report;
  std::optional<fs::path> csv;
  std::vector<std::uint64_t> seeds;
  EvalOptions options;
};

inline std::string substitute_seed(std::string pattern, std::uint64_t seed) {
  const std::string tag = "{seed}";
  for (auto at = pattern.find(tag); at != std::string::npos; at = pattern.find(tag, at))
    pattern.replace(at, tag.size(), std::to_string(seed));
  return pattern;
}

/// Mean and sample standard deviation; std is 0 for a single value.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0};
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

/// Seed a checkpoint was trained with, when recorded.
template <typename T>
std::uint64_t checkpoint_seed(const Checkpoint<T>& ck, std::uint64_t fallback) {
  if (ck.meta.contains("train_config") && ck.meta["train_config"].contains("seed"))
    return ck.meta["train_config"]["seed"].template get<std::uint64_t>();
  return fallback;
}

/// Without seeds, the report is a single EvalReport. With seeds, it holds one
/// report per run plus mean and std of each metric.
inline nlohmann::json cmd_eval(const EvalArgs& a) {
  const bool multi = !a.seeds.empty();
  if (multi && a.seeds.size() > 1 && a.checkpoint.find("{seed}") == std::string::npos)
    throw InvalidArgument("--seeds with several values needs a {seed} placeholder in the checkpoint path");
  const auto manifest = load_manifest(a.manifest);
  const std::vector<std::uint64_t> seeds = multi ? a.seeds : std::vector<std::uint64_t>{0};
  std::vector<EvalReport> reports;
  std::vector<std::string> paths;
  for (const auto s : seeds) {
    const auto path = multi ? substitute_seed(a.checkpoint, s) : a.checkpoint;
    const auto ck = load_checkpoint<float>(path);
    reports.push_back(evaluate_checkpoint(ck, manifest, a.options, multi ? s : checkpoint_seed(ck, 0)));
    paths.push_back(path);
  }

  nlohmann::json out;
  if (!multi) {
    out = reports.front();
  } else {
    std::vector<double> map, knn, rr;
    out["runs"] = nlohmann::json::array();
    for (std::size_t i = 0; i < reports.size(); ++i) {
      map.push_back(reports[i].map);
      knn.push_back(reports[i].knn_accuracy);
      if (reports[i].relevance_rank) rr.push_back(*reports[i].relevance_rank);
      out["runs"].push_back({{"checkpoint", paths[i]}, {"report", reports[i]}});
    }
    const auto [map_mean, map_std] = mean_std(map);
    const auto [knn_mean, knn_std] = mean_std(knn);
    out["seeds"] = seeds;
    out["k"] = a.options.k;
    out["database"] = to_string(a.options.database);
    out["map"] = map_mean;
    out["map_std"] = map_std;
    out["knn_accuracy"] = knn_mean;
    out["knn_accuracy_std"] = knn_std;
    if (rr.empty()) {
      out["relevance_rank"] = nullptr;
      out["relevance_rank_std"] = nullptr;
    } else {
      const auto [rr_mean, rr_std] = mean_std(rr);
      out["relevance_rank"] = rr_mean;
      out["relevance_rank_std"] = rr_std;
    }
  }

  if (a.report) {
    if (a.report->has_parent_path()) fs::create_directories(a.report->parent_path());
    write_file_atomic(*a.report, out.dump(2) + "\n");
  }
  if (a.csv) {
    for (std::size_t i = 0; i < reports.size(); ++i) {
      fs::path p = *a.csv;
      if (multi) {
        const auto s = a.csv->string();
        p = s.find("{seed}") != std::string::npos
                ? fs::path(substitute_seed(s, seeds[i]))
                : a.csv->parent_path() / (a.csv->stem().string() + "_seed" + std::to_string(seeds[i]) +
                                          a.csv->extension().string());
      }
      write_file_atomic(p, per_query_csv(reports[i]));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// explain

struct ExplainArgs {
  fs::path checkpoint;
  fs::path manifest;
  std::string slice_id;
  int n_masks = kDefaultMaskCount;
  std::uint64_t seed = 0;
  fs::path out_png;
  int threads = 1;
};

struct ExplainOutcome {
  SaliencyMap map;
  SaliencyMeta meta;
  fs::path sidecar;
};

/// Writes the overlay PNG plus `<stem>.json` and `<stem>.pfm` next to it.
inline ExplainOutcome cmd_explain(const ExplainArgs& a) {
  if (a.n_masks < 1) throw InvalidArgument("n_masks must be >= 1");
  if (a.out_png.empty()) throw InvalidArgument("output PNG path is required");
  const auto ck = load_checkpoint<float>(a.checkpoint);
  const auto record = load_manifest_slice(a.manifest, a.slice_id);
  auto map = explain_slice(ck.model, record.hu, a.n_masks, a.seed, a.threads);
  const auto meta = explain_meta(ck, a.slice_id, a.n_masks, a.seed);
  if (a.out_png.has_parent_path()) fs::create_directories(a.out_png.parent_path());
  write_file_atomic(a.out_png, explain_overlay_png(ck.model, record.hu, map));
  auto stem = a.out_png;
  stem.replace_extension();
  save_saliency(stem, map, meta);
  return {std::move(map), meta, stem.string() + ".json"};
}

}  // namespace ctcbir::cli
