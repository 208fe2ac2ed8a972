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
 * @file service.hpp
 * @brief Retrieval service core, independent of the HTTP transport.
 *
 * Routes:
 *   GET  /health
 *   GET  /stores/active
 *   GET  /slices/{id}?window=wide|narrow|<low>,<high>      PNG render
 *   POST /volumes?volume_id=<id>[&shape=D,H,W]               NIfTI, or raw int16 voxels with shape
 *   POST /query  {"slice_id"|"image", "k", "restrict_to_volume"}
 *   GET  /explain/{id}?n_masks=&seed=&format=json|png
 *
 * Readers take a snapshot of the active store; ingestion builds a new store
 * and swaps it in under a single writer lock.
 */

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctcbir/checkpoint.hpp"
#include "ctcbir/core/image_io.hpp"
#include "ctcbir/embed_index.hpp"
#include "ctcbir/explain.hpp"
#include "ctcbir/relax.hpp"
#include "ctcbir/volume_io.hpp"

namespace ctcbir {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path checkpoint;
  std::filesystem::path store;
  std::filesystem::path data_root;
  int n_masks = kDefaultMaskCount;
  std::uint64_t mask_seed = 0;
  int max_concurrent_explanations = 1;
  /// Worker threads per explanation.
  int explain_threads = 1;
  std::optional<std::string> auth_token;

  void validate() const {
    if (n_masks < 1) throw InvalidArgument("n_masks must be >= 1");
    if (max_concurrent_explanations < 1) throw InvalidArgument("max_concurrent_explanations must be >= 1");
    if (port < 0 || port > 65535) throw InvalidArgument("port out of range");
    for (const auto& [p, what] : {std::pair{checkpoint, "checkpoint"}, std::pair{store, "store"}})
      if (!std::filesystem::is_regular_file(p)) throw NotFound(std::string(what) + " not found: " + p.string());
    if (!std::filesystem::is_directory(data_root)) throw NotFound("data root not found: " + data_root.string());
  }
};

inline void to_json(nlohmann::json& j, const ServiceConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"checkpoint", c.checkpoint.string()},
       {"store", c.store.string()},
       {"data_root", c.data_root.string()},
       {"n_masks", c.n_masks},
       {"mask_seed", c.mask_seed},
       {"max_concurrent_explanations", c.max_concurrent_explanations},
       {"explain_threads", c.explain_threads},
       {"auth", c.auth_token.has_value()}};
}

struct HttpRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> params;
  std::map<std::string, std::string> headers;
  std::string body;
};

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::map<std::string, std::string> headers;

  static HttpResponse json(const nlohmann::json& j, int status = 200) {
    return {status, "application/json", j.dump(), {}};
  }
  static HttpResponse error(int status, const std::string& kind, const std::string& message) {
    return json({{"error", kind}, {"message", message}}, status);
  }
  nlohmann::json json_body() const { return nlohmann::json::parse(body); }
};

/// Thrown by handlers to produce a specific status.
class HttpError : public Error {
 public:
  HttpError(int status, std::string kind, const std::string& what)
      : Error(what), status_(status), kind_(std::move(kind)) {}
  int status() const noexcept { return status_; }
  const std::string& kind() const noexcept { return kind_; }
  std::map<std::string, std::string> headers;

 private:
  int status_;
  std::string kind_;
};

/// Maps library errors to HTTP status codes.
inline HttpResponse error_response(const std::exception& e) {
  if (const auto* h = dynamic_cast<const HttpError*>(&e)) {
    auto r = HttpResponse::error(h->status(), h->kind(), h->what());
    r.headers = h->headers;
    return r;
  }
  if (dynamic_cast<const NotFound*>(&e)) return HttpResponse::error(404, "not_found", e.what());
  if (dynamic_cast<const DuplicateId*>(&e)) return HttpResponse::error(409, "duplicate_id", e.what());
  if (dynamic_cast<const StoreConsistency*>(&e)) return HttpResponse::error(409, "store_consistency", e.what());
  if (dynamic_cast<const EmptyCandidates*>(&e)) return HttpResponse::error(409, "empty_candidates", e.what());
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const AlignmentError*>(&e))
    return HttpResponse::error(422, "unprocessable", e.what());
  if (dynamic_cast<const InvalidArgument*>(&e)) return HttpResponse::error(422, "invalid_argument", e.what());
  if (dynamic_cast<const nlohmann::json::exception*>(&e)) return HttpResponse::error(422, "invalid_json", e.what());
  return HttpResponse::error(500, "internal", e.what());
}

namespace detail {

inline int parse_int_param(const std::string& s, const char* name) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw InvalidArgument(std::string(name) + " must be an integer");
  return v;
}

inline ClipWindow parse_window(const std::string& s) {
  if (s.empty() || s == "wide") return kWideWindow;
  if (s == "narrow") return kNarrowWindow;
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw InvalidArgument("window must be wide, narrow, or <low>,<high>");
  ClipWindow w{parse_int_param(s.substr(0, comma), "window low"), parse_int_param(s.substr(comma + 1), "window high")};
  w.validate();
  return w;
}

/// Slice index from an id of the form `<volume>_sNNNN`.
inline int slice_index_of(const std::string& slice_id, const std::string& volume_id) {
  const std::string prefix = volume_id + "_s";
  if (!slice_id.starts_with(prefix)) throw NotFound("slice id " + slice_id + " does not name a volume slice");
  return parse_int_param(slice_id.substr(prefix.size()), "slice index");
}

/// Decrements a counter on scope exit.
class SlotGuard {
 public:
  explicit SlotGuard(std::atomic<int>& n) : n_(n) {}
  ~SlotGuard() { --n_; }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

 private:
  std::atomic<int>& n_;
};

}  // namespace detail

/// Parses an uploaded volume: NIfTI (optionally gzipped), or raw little-endian
/// int16 voxels when `shape` ("D,H,W") is given.
inline CTVolume parse_volume_upload(std::span<const std::uint8_t> body, const std::string& volume_id,
                                    const std::optional<std::string>& shape) {
  if (volume_id.empty()) throw InvalidArgument("volume_id is required");
  if (volume_id.find_first_of("/\\") != std::string::npos || volume_id.starts_with("."))
    throw InvalidArgument("volume_id must be a plain name");
  CTVolume v;
  if (shape) {
    std::vector<int> dims;
    std::size_t pos = 0;
    while (pos <= shape->size()) {
      const auto comma = std::min(shape->find(',', pos), shape->size());
      dims.push_back(detail::parse_int_param(shape->substr(pos, comma - pos), "shape"));
      pos = comma + 1;
    }
    if (dims.size() != 3) throw InvalidArgument("shape must be D,H,W");
    v = decode_raw_volume({{"shape", dims}, {"volume_id", volume_id}}, body, std::nullopt, volume_id);
  } else {
    v = volume_from_nifti(decode_nifti(body), std::nullopt, volume_id);
  }
  v.volume_id = volume_id;
  return v;
}

class Service {
 public:
  using ExplainKey = std::tuple<std::string, std::string, int, std::uint64_t>;

  explicit Service(ServiceConfig cfg)
      : cfg_(std::move(cfg)), ck_((cfg_.validate(), load_checkpoint<float>(cfg_.checkpoint))) {
    auto store = load_store(cfg_.store);
    if (!store.fingerprint.empty() && store.fingerprint != ck_.fingerprint)
      throw StoreConsistency("store was built with model " + store.fingerprint + ", checkpoint is " + ck_.fingerprint);
    if (store.empty() && store.dim != ck_.model.representation_dim())
      store = EmbeddingStore{ck_.fingerprint, ck_.model.representation_dim(), {}};
    store_ = std::make_shared<const EmbeddingStore>(std::move(store));
    volume_paths_ = scan_volume_dir(cfg_.data_root);
  }

  const ServiceConfig& config() const noexcept { return cfg_; }
  const Checkpoint<float>& checkpoint() const noexcept { return ck_; }
  int active_explanations() const noexcept { return active_explanations_.load(); }

  /// Current store snapshot.
  std::shared_ptr<const EmbeddingStore> store() const {
    std::lock_guard lock(store_mu_);
    return store_;
  }

  HttpResponse handle(const HttpRequest& req) {
    try {
      if (cfg_.auth_token && req.path != "/health") {
        const auto it = req.headers.find("Authorization");
        if (it == req.headers.end() || it->second != "Bearer " + *cfg_.auth_token)
          return HttpResponse::error(401, "unauthorized", "missing or invalid bearer token");
      }
      return route(req);
    } catch (const std::exception& e) {
      return error_response(e);
    }
  }

  // -------------------------------------------------------------------------
  // Typed handlers

  nlohmann::json health() const { return {{"status", "ok"}}; }

  nlohmann::json active_store() const {
    const auto s = store();
    return {{"fingerprint", s->fingerprint}, {"count", s->size()}, {"dim", s->dim}};
  }

  /// Retrieval by stored id (excluding itself) or by an uploaded HU slice.
  nlohmann::json query(const nlohmann::json& body) const {
    if (!body.is_object()) throw InvalidArgument("query body must be a JSON object");
    const int k = body.value("k", 5);
    if (k < 1) throw InvalidArgument("k must be >= 1");
    std::optional<std::string> restrict;
    if (body.contains("restrict_to_volume") && !body["restrict_to_volume"].is_null())
      restrict = body["restrict_to_volume"].get<std::string>();
    const auto s = store();
    RetrievalResult r;
    if (body.contains("slice_id")) {
      r = query_by_id(*s, body["slice_id"].get<std::string>(), k, restrict);
    } else if (body.contains("image")) {
      const auto hu = parse_slice(body["image"]);
      QueryOptions opt;
      opt.query_id = "upload";
      opt.restrict_to_volume = restrict;
      r = ctcbir::query(*s, embed_slice(ck_.model, hu), k, opt);
    } else {
      throw InvalidArgument("query needs slice_id or image");
    }
    nlohmann::json j = r;
    for (auto& h : j["hits"]) {
      const auto& e = s->at(h["slice_id"].get<std::string>());
      h["volume_id"] = e.volume_id;
      h["liver_label"] = e.liver_label;
      h["image_url"] = "/slices/" + e.slice_id;
      h["explain_url"] = "/explain/" + e.slice_id;
    }
    if (restrict) j["restrict_to_volume"] = *restrict;
    return j;
  }

  /// PNG of a stored slice under `window`.
  std::string render_slice(const std::string& slice_id, const ClipWindow& window) const {
    const auto hu = slice_hu(slice_id);
    const auto png = render_gray_png(clip_and_scale<double>(hu, window));
    return std::string(png.begin(), png.end());
  }

  /// Saliency of a stored slice; cached by (slice, model, n_masks, seed).
  std::shared_ptr<const SaliencyMap> explain(const std::string& slice_id, int n_masks, std::uint64_t seed,
                                             bool* cached = nullptr) {
    if (n_masks < 1) throw InvalidArgument("n_masks must be >= 1");
    const ExplainKey key{slice_id, ck_.fingerprint, n_masks, seed};
    {
      std::lock_guard lock(cache_mu_);
      if (auto it = cache_.find(key); it != cache_.end()) {
        if (cached) *cached = true;
        return it->second;
      }
    }
    const auto hu = slice_hu(slice_id);
    if (++active_explanations_ > cfg_.max_concurrent_explanations) {
      --active_explanations_;
      HttpError busy(429, "busy", "explanation capacity exhausted; retry later");
      busy.headers["Retry-After"] = "1";
      throw busy;
    }
    detail::SlotGuard slot(active_explanations_);
    auto map = std::make_shared<const SaliencyMap>(explain_slice(ck_.model, hu, n_masks, seed, cfg_.explain_threads));
    if (cached) *cached = false;
    std::lock_guard lock(cache_mu_);
    return cache_.emplace(key, std::move(map)).first->second;
  }

  nlohmann::json explain_json(const std::string& slice_id, int n_masks, std::uint64_t seed) {
    bool cached = false;
    const auto s = explain(slice_id, n_masks, seed, &cached);
    auto j = sidecar_json(explain_meta(ck_, slice_id, n_masks, seed), *s);
    j["height"] = s->importance.rows;
    j["width"] = s->importance.cols;
    j["importance"] = s->importance.data;
    j["overlay_url"] = "/explain/" + slice_id + "?format=png&n_masks=" + std::to_string(n_masks) +
                       "&seed=" + std::to_string(seed);
    return j;
  }

  /// Overlay of the normalized saliency on the wide-window slice at model resolution.
  std::string explain_png(const std::string& slice_id, int n_masks, std::uint64_t seed) {
    const auto s = explain(slice_id, n_masks, seed);
    const auto png = explain_overlay_png(ck_.model, slice_hu(slice_id), *s);
    return std::string(png.begin(), png.end());
  }

  /// Parses, embeds every axial slice, persists the volume and the grown store,
  /// then makes the new store active.
  nlohmann::json ingest(std::span<const std::uint8_t> body, const std::string& volume_id,
                        const std::optional<std::string>& shape) {
    const auto volume = parse_volume_upload(body, volume_id, shape);
    std::lock_guard writer(writer_mu_);
    const auto current = store();
    {
      std::lock_guard lock(volumes_mu_);
      if (volume_paths_.count(volume.volume_id)) throw DuplicateId("volume " + volume.volume_id + " already exists");
    }
    for (const auto& e : current->entries)
      if (e.volume_id == volume.volume_id) throw DuplicateId("volume " + volume.volume_id + " is already indexed");

    std::vector<SliceRecord> records;
    records.reserve(static_cast<std::size_t>(volume.depth));
    for (int k = 0; k < volume.depth; ++k) {
      SliceRecord r;
      r.volume_id = volume.volume_id;
      r.slice_index = k;
      r.slice_id = make_slice_id(volume.volume_id, k);
      r.hu = volume.slice(k);
      r.liver_label = volume.mask_count(k) > 0;
      records.push_back(std::move(r));
    }
    std::vector<const SliceRecord*> ptrs;
    for (const auto& r : records) ptrs.push_back(&r);
    auto staged = std::make_shared<const EmbeddingStore>(
        embed_append(ck_, *current, std::span<const SliceRecord* const>(ptrs)));

    const auto header = save_raw_volume(volume, cfg_.data_root);
    try {
      save_store(*staged, cfg_.store);
    } catch (...) {
      const auto paths = raw_paths(header);
      std::error_code ec;
      for (const auto& p : {paths.header, paths.data, paths.mask}) std::filesystem::remove(p, ec);
      throw;
    }
    {
      std::lock_guard lock(volumes_mu_);
      volume_paths_[volume.volume_id] = header;
    }
    {
      std::lock_guard lock(store_mu_);
      store_ = staged;
    }
    return {{"volume_id", volume.volume_id}, {"n_slices", volume.depth}, {"store_count", staged->size()}};
  }

  /// HU slice behind a stored id.
  HuSlice slice_hu(const std::string& slice_id) const {
    const auto s = store();
    const auto& e = s->at(slice_id);
    const int index = detail::slice_index_of(slice_id, e.volume_id);
    const auto v = volume(e.volume_id);
    if (index < 0 || index >= v->depth) throw NotFound("slice index out of range for " + slice_id);
    return v->slice(index);
  }

 private:
  HttpResponse route(const HttpRequest& req) {
    const auto& p = req.path;
    auto param = [&](const char* name) -> std::optional<std::string> {
      const auto it = req.params.find(name);
      if (it == req.params.end()) return std::nullopt;
      return it->second;
    };
    if (req.method == "GET") {
      if (p == "/health") return HttpResponse::json(health());
      if (p == "/stores/active") return HttpResponse::json(active_store());
      if (p.starts_with("/slices/")) {
        const auto window = detail::parse_window(param("window").value_or("wide"));
        return {200, "image/png", render_slice(p.substr(8), window), {}};
      }
      if (p.starts_with("/explain/")) {
        const auto id = p.substr(9);
        const auto n = param("n_masks");
        const int n_masks = n ? detail::parse_int_param(*n, "n_masks") : cfg_.n_masks;
        const auto sd = param("seed");
        const std::uint64_t seed = sd ? static_cast<std::uint64_t>(detail::parse_int_param(*sd, "seed")) : cfg_.mask_seed;
        const auto format = param("format").value_or("json");
        if (format == "png") return {200, "image/png", explain_png(id, n_masks, seed), {}};
        if (format != "json") throw InvalidArgument("format must be json or png");
        return HttpResponse::json(explain_json(id, n_masks, seed));
      }
    } else if (req.method == "POST") {
      if (p == "/query") return HttpResponse::json(query(nlohmann::json::parse(req.body)));
      if (p == "/volumes") {
        const auto* data = reinterpret_cast<const std::uint8_t*>(req.body.data());
        return HttpResponse::json(ingest({data, req.body.size()}, param("volume_id").value_or(""), param("shape")), 201);
      }
    }
    return HttpResponse::error(404, "not_found", "no route for " + req.method + " " + p);
  }

  static HuSlice parse_slice(const nlohmann::json& j) {
    const auto shape = j.at("shape").get<std::vector<int>>();
    if (shape.size() != 2 || shape[0] < 1 || shape[1] < 1) throw InvalidArgument("image shape must be [H, W]");
    const auto hu = j.at("hu").get<std::vector<int>>();
    if (hu.size() != static_cast<std::size_t>(shape[0]) * shape[1])
      throw InvalidArgument("image hu has " + std::to_string(hu.size()) + " values, shape needs " +
                            std::to_string(shape[0] * shape[1]));
    HuSlice s(shape[0], shape[1]);
    for (std::size_t i = 0; i < hu.size(); ++i) s.data[i] = saturate_hu(hu[i]);
    return s;
  }

  std::shared_ptr<const CTVolume> volume(const std::string& id) const {
    std::lock_guard lock(volumes_mu_);
    if (auto it = volumes_.find(id); it != volumes_.end()) return it->second;
    const auto path = volume_paths_.find(id);
    if (path == volume_paths_.end()) throw NotFound("volume " + id + " is not under the data root");
    auto v = std::make_shared<const CTVolume>(load_volume(path->second));
    volumes_.emplace(id, v);
    return v;
  }

  ServiceConfig cfg_;
  Checkpoint<float> ck_;

  mutable std::mutex store_mu_;
  std::shared_ptr<const EmbeddingStore> store_;
  std::mutex writer_mu_;

  mutable std::mutex volumes_mu_;
  std::map<std::string, std::filesystem::path> volume_paths_;
  mutable std::map<std::string, std::shared_ptr<const CTVolume>> volumes_;

  std::mutex cache_mu_;
  std::map<ExplainKey, std::shared_ptr<const SaliencyMap>> cache_;
  std::atomic<int> active_explanations_{0};
};

}  // namespace ctcbir
