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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctcbir/core/array.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/embed_index.hpp"

namespace ctcbir {

/// Fraction of relevant items among the first k.
inline double precision_at_k(const std::vector<bool>& relevant, int k) {
  if (k < 1) throw InvalidArgument("precision_at_k: k must be >= 1");
  if (static_cast<std::size_t>(k) > relevant.size())
    throw InvalidArgument("precision_at_k: k=" + std::to_string(k) + " exceeds " + std::to_string(relevant.size()) +
                          " hits");
  const auto n = std::count(relevant.begin(), relevant.begin() + k, true);
  return static_cast<double>(n) / k;
}

/// Mean of precision(k') for k' = 1..K.
inline double average_precision(const std::vector<bool>& relevant, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > relevant.size())
    throw InvalidArgument("average_precision: need at least k=" + std::to_string(k) + " hits");
  double sum = 0;
  int found = 0;
  for (int i = 0; i < k; ++i) {
    found += relevant[static_cast<std::size_t>(i)] ? 1 : 0;
    sum += static_cast<double>(found) / (i + 1);
  }
  return sum / k;
}

// ---------------------------------------------------------------------------
// Retrieval metrics

enum class MapDatabase { kTestLeaveOneOut, kTrain };

inline std::string to_string(MapDatabase d) { return d == MapDatabase::kTrain ? "train" : "test_loo"; }

inline MapDatabase parse_map_database(const std::string& s) {
  if (s == "test_loo") return MapDatabase::kTestLeaveOneOut;
  if (s == "train") return MapDatabase::kTrain;
  throw InvalidArgument("unknown MAP database '" + s + "' (expected test_loo or train)");
}

struct QueryScore {
  std::string slice_id;
  bool label = false;
  double average_precision = 0;
  std::optional<bool> knn_correct;
  std::optional<double> relevance_rank;
};

struct MapResult {
  double map = 0;
  std::vector<QueryScore> per_query;
};

namespace detail {

inline void require_same_model(const EmbeddingStore& a, const EmbeddingStore& b) {
  if (a.fingerprint != b.fingerprint)
    throw StoreConsistency("stores come from different models (" + a.fingerprint + " vs " + b.fingerprint + ")");
  if (a.dim != b.dim) throw StoreConsistency("stores have different dims");
}

inline std::vector<bool> hit_relevance(const RetrievalResult& r, const EmbeddingStore& db, bool label) {
  std::vector<bool> rel;
  rel.reserve(r.hits.size());
  for (const auto& h : r.hits) rel.push_back(db.at(h.slice_id).liver_label == label);
  return rel;
}

inline RetrievalResult exact_k(const EmbeddingStore& db, const std::vector<float>& q, int k, const QueryOptions& opt) {
  auto r = query(db, q, k, opt);
  if (r.k_clamped)
    throw InvalidArgument("query " + opt.query_id + " has only " + std::to_string(r.k) + " candidates, need k=" +
                          std::to_string(k));
  return r;
}

}  // namespace detail

/// MAP@k with relevance = matching liver label. Without `database`, each
/// query searches all other entries of `queries` (leave-one-out).
inline MapResult mean_average_precision(const EmbeddingStore& queries, int k = 5,
                                        const EmbeddingStore* database = nullptr) {
  if (queries.empty()) throw InvalidArgument("mean_average_precision: empty query store");
  if (database) detail::require_same_model(queries, *database);
  const EmbeddingStore& db = database ? *database : queries;
  MapResult out;
  for (const auto& e : queries.entries) {
    QueryOptions opt;
    opt.query_id = e.slice_id;
    if (!database) opt.exclude_id = e.slice_id;
    const auto r = detail::exact_k(db, e.vector, k, opt);
    QueryScore s{e.slice_id, e.liver_label, average_precision(detail::hit_relevance(r, db, e.liver_label), k), {}, {}};
    out.map += s.average_precision;
    out.per_query.push_back(std::move(s));
  }
  out.map /= static_cast<double>(queries.size());
  return out;
}

inline MapResult mean_average_precision(const EmbeddingStore& test, const EmbeddingStore& train, int k,
                                        MapDatabase database) {
  return mean_average_precision(test, k, database == MapDatabase::kTrain ? &train : nullptr);
}

struct KnnResult {
  double accuracy = 0;
  std::vector<bool> correct;
};

/// Majority label of the k nearest train vectors; ties go to the nearest neighbour's label.
inline bool knn_predict(const EmbeddingStore& train, const std::vector<float>& q, int k) {
  const auto r = detail::exact_k(train, q, k, {});
  int liver = 0;
  for (const auto& h : r.hits) liver += train.at(h.slice_id).liver_label ? 1 : 0;
  const int other = r.k - liver;
  if (liver != other) return liver > other;
  return train.at(r.hits.front().slice_id).liver_label;
}

inline KnnResult knn_accuracy(const EmbeddingStore& train, const EmbeddingStore& test, int k = 5) {
  detail::require_same_model(train, test);
  if (test.empty()) throw InvalidArgument("knn_accuracy: empty test store");
  if (train.size() < static_cast<std::size_t>(k))
    throw InvalidArgument("knn_accuracy: train store has fewer than k entries");
  KnnResult out;
  int ok = 0;
  for (const auto& e : test.entries) {
    const bool c = knn_predict(train, e.vector, k) == e.liver_label;
    out.correct.push_back(c);
    ok += c ? 1 : 0;
  }
  out.accuracy = static_cast<double>(ok) / static_cast<double>(test.size());
  return out;
}

// ---------------------------------------------------------------------------
// Saliency localization

/// |top-|S| pixels of R  ∩  S| / |S|. Ties in R go to the earlier pixel in
/// row-major order. Returns nullopt when S is empty.
template <typename T>
std::optional<double> relevance_rank(const Array2D<T>& importance, const BinaryMask& mask) {
  if (!importance.same_shape(mask)) throw InvalidArgument("relevance_rank: saliency and mask shapes differ");
  const std::size_t m = static_cast<std::size_t>(std::count_if(mask.data.begin(), mask.data.end(), [](auto v) { return v != 0; }));
  if (m == 0) return std::nullopt;
  for (const auto& v : importance.data)
    if (!std::isfinite(static_cast<double>(v))) throw InvalidArgument("relevance_rank: non-finite importance");
  std::vector<std::size_t> order(importance.data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (importance.data[a] != importance.data[b]) return importance.data[a] > importance.data[b];
                      return a < b;
                    });
  std::size_t inside = 0;
  for (std::size_t i = 0; i < m; ++i) inside += mask.data[order[i]] != 0 ? 1 : 0;
  return static_cast<double>(inside) / static_cast<double>(m);
}

struct RelevanceRankSummary {
  double mean = 0;
  int n_used = 0;
  int n_excluded = 0;
};

inline RelevanceRankSummary summarize_relevance_rank(const std::vector<std::optional<double>>& scores) {
  RelevanceRankSummary s;
  for (const auto& v : scores) {
    if (v) {
      s.mean += *v;
      ++s.n_used;
    } else {
      ++s.n_excluded;
    }
  }
  if (s.n_used > 0) s.mean /= s.n_used;
  return s;
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  double map = 0;
  double knn_accuracy = 0;
  std::optional<double> relevance_rank;
  int k = 5;
  int n_queries = 0;
  std::uint64_t seed = 0;
  MapDatabase database = MapDatabase::kTestLeaveOneOut;
  int rr_excluded = 0;
  std::vector<QueryScore> per_query;
};

inline void to_json(nlohmann::json& j, const QueryScore& q) {
  j = {{"slice_id", q.slice_id}, {"label", q.label}, {"average_precision", q.average_precision}};
  j["knn_correct"] = q.knn_correct ? nlohmann::json(*q.knn_correct) : nlohmann::json(nullptr);
  j["relevance_rank"] = q.relevance_rank ? nlohmann::json(*q.relevance_rank) : nlohmann::json(nullptr);
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"map", r.map},
       {"knn_accuracy", r.knn_accuracy},
       {"relevance_rank", r.relevance_rank ? nlohmann::json(*r.relevance_rank) : nlohmann::json(nullptr)},
       {"k", r.k},
       {"n_queries", r.n_queries},
       {"seed", r.seed},
       {"database", to_string(r.database)},
       {"relevance_rank_excluded", r.rr_excluded},
       {"per_query", r.per_query}};
}

/// Per-query breakdown as CSV.
inline std::string per_query_csv(const EvalReport& r) {
  std::string out = "slice_id,label,average_precision,knn_correct,relevance_rank\n";
  for (const auto& q : r.per_query) {
    out += q.slice_id + "," + (q.label ? "1" : "0") + "," + std::to_string(q.average_precision) + ",";
    out += q.knn_correct ? (*q.knn_correct ? "1" : "0") : "";
    out += ",";
    if (q.relevance_rank) out += std::to_string(*q.relevance_rank);
    out += "\n";
  }
  return out;
}

/// MAP and kNN accuracy over stores built from one model. Relevance rank is filled in separately.
inline EvalReport evaluate_stores(const EmbeddingStore& train, const EmbeddingStore& test, int k = 5,
                                  MapDatabase database = MapDatabase::kTestLeaveOneOut, std::uint64_t seed = 0) {
  EvalReport r;
  r.k = k;
  r.seed = seed;
  r.database = database;
  auto map = mean_average_precision(test, train, k, database);
  const auto knn = knn_accuracy(train, test, k);
  r.map = map.map;
  r.knn_accuracy = knn.accuracy;
  r.n_queries = static_cast<int>(test.size());
  r.per_query = std::move(map.per_query);
  for (std::size_t i = 0; i < r.per_query.size(); ++i) r.per_query[i].knn_correct = knn.correct[i];
  return r;
}

}  // namespace ctcbir
