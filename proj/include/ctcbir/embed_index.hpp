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

// Embedding store and exact cosine top-k retrieval.
//
// Store file, all integers little-endian:
//
//   magic    8 bytes  "CTCBIRST"
//   version  u32      1
//   hlen     u64      header length
//   header   hlen     UTF-8 JSON {fingerprint, dim, count, ids, labels, volume_ids}
//   vectors  count * dim float32
//   checksum u64      FNV-1a 64 of header and vectors

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctcbir/augment.hpp"
#include "ctcbir/checkpoint.hpp"
#include "ctcbir/core/bytes.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/core/hash.hpp"
#include "ctcbir/imaging.hpp"
#include "ctcbir/model.hpp"

namespace ctcbir {

struct StoreEntry {
  std::string slice_id;
  bool liver_label = false;
  std::string volume_id;
  std::vector<float> vector;

  bool operator==(const StoreEntry&) const = default;
};

struct EmbeddingStore {
  std::string fingerprint;
  int dim = 0;
  std::vector<StoreEntry> entries;

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }
  bool operator==(const EmbeddingStore&) const = default;

  /// Index of `slice_id`, or nullopt.
  std::optional<std::size_t> find(std::string_view slice_id) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].slice_id == slice_id) return i;
    return std::nullopt;
  }

  const StoreEntry& at(std::string_view slice_id) const {
    const auto i = find(slice_id);
    if (!i) throw NotFound("slice " + std::string(slice_id) + " is not in the store");
    return entries[*i];
  }

  void append(StoreEntry e) {
    if (static_cast<int>(e.vector.size()) != dim)
      throw InvalidArgument("vector of length " + std::to_string(e.vector.size()) + " in a store of dim " +
                            std::to_string(dim));
    if (find(e.slice_id)) throw DuplicateId("slice " + e.slice_id + " is already in the store");
    entries.push_back(std::move(e));
  }

  void validate() const {
    if (dim <= 0 && !entries.empty()) throw StoreConsistency("store dim must be positive");
    std::unordered_set<std::string> seen;
    for (const auto& e : entries) {
      if (static_cast<int>(e.vector.size()) != dim) throw StoreConsistency("vector length differs from store dim");
      if (!seen.insert(e.slice_id).second) throw DuplicateId("slice " + e.slice_id + " appears twice");
    }
  }
};

/// Appends `extra` to `base`. Both must come from the same model.
inline EmbeddingStore merge_stores(EmbeddingStore base, const EmbeddingStore& extra) {
  if (base.fingerprint != extra.fingerprint)
    throw StoreConsistency("cannot merge stores from different models (" + base.fingerprint + " vs " +
                           extra.fingerprint + ")");
  if (base.dim != extra.dim) throw StoreConsistency("cannot merge stores of different dim");
  for (const auto& e : extra.entries) base.append(e);
  return base;
}

// ---------------------------------------------------------------------------
// Similarity

/// Cosine similarity in double precision. Zero-norm inputs give 0.
template <typename A, typename B>
double cosine_similarity(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) throw InvalidArgument("cosine_similarity: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (!(na > 0) || !(nb > 0)) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
  return cosine_similarity<float, float>(a, b);
}

// ---------------------------------------------------------------------------
// Query

struct Hit {
  std::string slice_id;
  double similarity = 0;
  bool operator==(const Hit&) const = default;
};

struct RetrievalResult {
  std::string query_id;
  std::vector<Hit> hits;
  int k = 0;
  /// Set when fewer than the requested k candidates were available.
  bool k_clamped = false;
};

inline void to_json(nlohmann::json& j, const RetrievalResult& r) {
  nlohmann::json hits = nlohmann::json::array();
  for (const auto& h : r.hits) hits.push_back({{"slice_id", h.slice_id}, {"similarity", h.similarity}});
  j = {{"query_id", r.query_id}, {"hits", hits}, {"k", r.k}, {"k_clamped", r.k_clamped}};
}

struct QueryOptions {
  std::optional<std::string> exclude_id;
  std::optional<std::string> restrict_to_volume;
  std::string query_id;
};

/// Strict ranking order: similarity descending, then slice_id ascending.
inline bool ranks_before(const Hit& a, const Hit& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a.slice_id < b.slice_id;
}

/// Exact top-k by cosine similarity over the filtered entries.
template <typename V>
RetrievalResult query(const EmbeddingStore& store, std::span<const V> q, int k, const QueryOptions& opt = {}) {
  if (k < 1) throw InvalidArgument("k must be >= 1");
  if (static_cast<int>(q.size()) != store.dim)
    throw InvalidArgument("query dim " + std::to_string(q.size()) + " does not match store dim " +
                          std::to_string(store.dim));
  std::vector<Hit> candidates;
  candidates.reserve(store.size());
  for (const auto& e : store.entries) {
    if (opt.exclude_id && e.slice_id == *opt.exclude_id) continue;
    if (opt.restrict_to_volume && e.volume_id != *opt.restrict_to_volume) continue;
    candidates.push_back({e.slice_id, cosine_similarity<V, float>(q, e.vector)});
  }
  if (candidates.empty()) throw EmptyCandidates("no candidates left after filtering");

  RetrievalResult r;
  r.query_id = opt.query_id;
  r.k = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(k), candidates.size()));
  r.k_clamped = r.k < k;
  std::partial_sort(candidates.begin(), candidates.begin() + r.k, candidates.end(), ranks_before);
  candidates.resize(static_cast<std::size_t>(r.k));
  r.hits = std::move(candidates);
  return r;
}

inline RetrievalResult query(const EmbeddingStore& store, const std::vector<float>& q, int k,
                             const QueryOptions& opt = {}) {
  return query<float>(store, std::span<const float>(q), k, opt);
}

/// Query with a stored entry's own vector, excluding that entry.
inline RetrievalResult query_by_id(const EmbeddingStore& store, const std::string& slice_id, int k,
                                   std::optional<std::string> restrict_to_volume = std::nullopt,
                                   bool exclude_self = true) {
  const auto& e = store.at(slice_id);
  QueryOptions opt;
  opt.query_id = slice_id;
  if (exclude_self) opt.exclude_id = slice_id;
  opt.restrict_to_volume = std::move(restrict_to_volume);
  return query(store, e.vector, k, opt);
}

// ---------------------------------------------------------------------------
// Embedding

/// Representation of a HU slice: wide window, pseudo-RGB, resized to the model input, no augmentation.
template <typename T>
std::vector<float> embed_slice(const Model<T>& model, const HuSlice& hu) {
  const auto& enc = model.encoder_spec();
  const auto h = model.extract_h(inference_input<T>(hu, enc.input_height, enc.input_width));
  std::vector<float> out(static_cast<std::size_t>(h.size()));
  for (Eigen::Index i = 0; i < h.size(); ++i) out[i] = static_cast<float>(h[i]);
  return out;
}

template <typename T>
EmbeddingStore embed_records(const Model<T>& model, const std::string& fingerprint,
                             std::span<const SliceRecord* const> records) {
  EmbeddingStore store{fingerprint, model.representation_dim(), {}};
  store.entries.reserve(records.size());
  for (const auto* r : records) store.append({r->slice_id, r->liver_label, r->volume_id, embed_slice(model, r->hu)});
  return store;
}

template <typename T>
EmbeddingStore embed_dataset(const Model<T>& model, const std::string& fingerprint, const DatasetManifest& manifest,
                             Split split) {
  const auto records = manifest.split(split);
  if (records.empty()) throw InvalidArgument("split " + std::string(to_string(split)) + " is empty");
  return embed_records(model, fingerprint, std::span<const SliceRecord* const>(records));
}

template <typename T>
EmbeddingStore embed_dataset(const Checkpoint<T>& ck, const DatasetManifest& manifest, Split split) {
  return embed_dataset(ck.model, ck.fingerprint, manifest, split);
}

/// Embeds `records` with `ck` and appends them to `existing`, which must come from the same model.
template <typename T>
EmbeddingStore embed_append(const Checkpoint<T>& ck, const EmbeddingStore& existing,
                            std::span<const SliceRecord* const> records) {
  if (!existing.fingerprint.empty() && existing.fingerprint != ck.fingerprint)
    throw StoreConsistency("store was built with model " + existing.fingerprint + ", checkpoint is " +
                           ck.fingerprint);
  auto fresh = embed_records(ck.model, ck.fingerprint, records);
  if (existing.empty() && existing.fingerprint.empty()) return fresh;
  return merge_stores(existing, fresh);
}

// ---------------------------------------------------------------------------
// Persistence

inline constexpr char kStoreMagic[8] = {'C', 'T', 'C', 'B', 'I', 'R', 'S', 'T'};
inline constexpr std::uint32_t kStoreVersion = 1;

inline Bytes encode_store(const EmbeddingStore& s) {
  s.validate();
  nlohmann::json ids = nlohmann::json::array(), labels = nlohmann::json::array(), vols = nlohmann::json::array();
  for (const auto& e : s.entries) {
    ids.push_back(e.slice_id);
    labels.push_back(e.liver_label);
    vols.push_back(e.volume_id);
  }
  const std::string header = nlohmann::json{{"fingerprint", s.fingerprint},
                                            {"dim", s.dim},
                                            {"count", s.size()},
                                            {"ids", ids},
                                            {"labels", labels},
                                            {"volume_ids", vols}}
                                 .dump();
  Bytes out;
  put_bytes(out, std::string_view(kStoreMagic, 8));
  put_le(out, kStoreVersion);
  put_le<std::uint64_t>(out, header.size());
  const auto header_pos = out.size();
  put_bytes(out, header);
  for (const auto& e : s.entries)
    for (float v : e.vector) put_le(out, v);
  Fnv1a64 h;
  h.update(std::span<const std::uint8_t>(out).subspan(header_pos));
  put_le(out, h.digest());
  return out;
}

inline EmbeddingStore decode_store(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.take(8, "store magic");
  if (std::memcmp(magic.data(), kStoreMagic, 8) != 0) throw FormatError("not a ctcbir embedding store", 0);
  const auto version = r.get<std::uint32_t>("store version");
  if (version != kStoreVersion) throw FormatError("unsupported store version " + std::to_string(version), 8);
  const auto hlen = r.get<std::uint64_t>("store header length");
  const auto header_pos = r.pos();
  if (hlen > r.remaining()) throw FormatError("truncated store header", header_pos);
  const auto header_bytes = r.take(hlen, "store header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("store header: ") + e.what(), header_pos + e.byte);
  }

  EmbeddingStore s;
  std::size_t count = 0;
  nlohmann::json ids, labels, vols;
  try {
    s.fingerprint = header.at("fingerprint").get<std::string>();
    s.dim = header.at("dim").get<int>();
    count = header.at("count").get<std::size_t>();
    ids = header.at("ids");
    labels = header.at("labels");
    vols = header.at("volume_ids");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("store header: ") + e.what(), header_pos);
  }
  if (s.dim < 0 || ids.size() != count || labels.size() != count || vols.size() != count)
    throw FormatError("store header counts are inconsistent", header_pos);
  const std::size_t blob_pos = r.pos();
  const auto blob = r.take(count * static_cast<std::size_t>(s.dim) * sizeof(float), "store vectors");
  const auto stored = r.get<std::uint64_t>("store checksum");
  if (r.remaining() != 0) throw FormatError("trailing bytes after store", r.pos());
  Fnv1a64 h;
  h.update(bytes.subspan(header_pos, blob_pos + blob.size() - header_pos));
  if (h.digest() != stored) throw ChecksumError("store checksum mismatch", blob_pos + blob.size());

  s.entries.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto& e = s.entries[i];
    e.slice_id = ids[i].get<std::string>();
    e.liver_label = labels[i].get<bool>();
    e.volume_id = vols[i].get<std::string>();
    e.vector.resize(static_cast<std::size_t>(s.dim));
    std::memcpy(e.vector.data(), blob.data() + i * s.dim * sizeof(float), s.dim * sizeof(float));
  }
  s.validate();
  return s;
}

inline void save_store(const EmbeddingStore& s, const std::filesystem::path& path) {
  write_file_atomic(path, encode_store(s));
}

inline EmbeddingStore load_store(const std::filesystem::path& path) { return decode_store(read_file(path)); }

}  // namespace ctcbir
