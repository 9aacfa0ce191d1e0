// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Okapi BM25 over an inverted index, plus the evaluation metrics used by the
// downstream tasks: Macro/Micro-F1, R@k, NDCG@k, PREC@1 and MRR.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "netpretrain/autodiff/tensor.hpp"

namespace netpretrain {

// ---------------------------------------------------------------------------
// BM25
// ---------------------------------------------------------------------------

struct Bm25Params {
  double k1 = 1.5;
  double b = 0.75;
};

struct Scored {
  std::size_t id = 0;
  double score = 0.0;
};

class Bm25Index {
 public:
  Bm25Index() = default;

  /// Documents are pre-tokenized; ids are their positions.
  explicit Bm25Index(const std::vector<std::vector<std::string>>& docs, Bm25Params params = {}) : params_(params) {
    if (docs.empty()) throw Error("bm25: empty corpus");
    lengths_.reserve(docs.size());
    double total = 0.0;
    for (std::size_t d = 0; d < docs.size(); ++d) {
      if (docs[d].empty()) throw Error("bm25: document " + std::to_string(d) + " is empty");
      std::unordered_map<std::string, std::uint32_t> tf;
      for (const auto& t : docs[d]) ++tf[t];
      for (const auto& [term, count] : tf) postings_[term].push_back({static_cast<std::uint32_t>(d), count});
      lengths_.push_back(static_cast<double>(docs[d].size()));
      total += static_cast<double>(docs[d].size());
    }
    avgdl_ = total / static_cast<double>(docs.size());
  }

  std::size_t size() const { return lengths_.size(); }
  double avgdl() const { return avgdl_; }
  const Bm25Params& params() const { return params_; }

  std::size_t df(const std::string& term) const {
    auto it = postings_.find(term);
    return it == postings_.end() ? 0 : it->second.size();
  }

  double idf(const std::string& term) const {
    const double n = static_cast<double>(size());
    const double d = static_cast<double>(df(term));
    return std::log((n - d + 0.5) / (d + 0.5) + 1.0);
  }

  /// Score of every document; each query token contributes once per
  /// occurrence in the query.
  std::vector<double> scores(const std::vector<std::string>& query) const {
    std::vector<double> s(size(), 0.0);
    for (const auto& term : query) {
      auto it = postings_.find(term);
      if (it == postings_.end()) continue;
      const double w = idf(term);
      for (const auto& p : it->second) {
        const double tf = p.tf;
        const double norm = params_.k1 * (1.0 - params_.b + params_.b * lengths_[p.doc] / avgdl_);
        s[p.doc] += w * tf * (params_.k1 + 1.0) / (tf + norm);
      }
    }
    return s;
  }

  /// Documents sharing at least one term with the query, best first, ties to
  /// the lower id, truncated to top_n. Empty query gives an empty result.
  std::vector<Scored> rank(const std::vector<std::string>& query, std::size_t top_n) const {
    std::vector<Scored> hits;
    if (query.empty() || top_n == 0) return hits;
    std::vector<char> matched(size(), 0);
    for (const auto& term : query) {
      auto it = postings_.find(term);
      if (it == postings_.end()) continue;
      for (const auto& p : it->second) matched[p.doc] = 1;
    }
    auto s = scores(query);
    for (std::size_t d = 0; d < size(); ++d) {
      if (matched[d]) hits.push_back({d, s[d]});
    }
    auto better = [](const Scored& a, const Scored& b) { return a.score > b.score || (a.score == b.score && a.id < b.id); };
    if (hits.size() > top_n) {
      std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(top_n), hits.end(), better);
      hits.resize(top_n);
    } else {
      std::sort(hits.begin(), hits.end(), better);
    }
    return hits;
  }

 private:
  struct Posting {
    std::uint32_t doc;
    std::uint32_t tf;
  };
  Bm25Params params_;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
  std::vector<double> lengths_;
  double avgdl_ = 0.0;
};

inline std::vector<Scored> bm25_rank(const Bm25Index& index, const std::vector<std::string>& query, std::size_t top_n) {
  return index.rank(query, top_n);
}

/// Indices ordered by descending score; equal scores keep the lower index
/// first.
template <class T>
std::vector<std::size_t> rank_by_scores(std::span<const T> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

struct F1Scores {
  double macro = 0.0;
  double micro = 0.0;
};

/// Single-label F1. Macro averages over every class in [0, num_classes);
/// a class absent from both gold and predictions scores 0.
inline F1Scores macro_micro_f1(std::span<const int> predictions, std::span<const int> gold, std::size_t num_classes) {
  if (predictions.size() != gold.size()) throw Error("macro_micro_f1: predictions and gold differ in length");
  if (num_classes == 0) throw Error("macro_micro_f1: no classes");
  std::vector<double> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  auto check = [&](int c) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) throw Error("macro_micro_f1: label out of range");
  };
  for (std::size_t i = 0; i < gold.size(); ++i) {
    check(gold[i]);
    check(predictions[i]);
    if (predictions[i] == gold[i]) {
      tp[gold[i]] += 1;
    } else {
      fp[predictions[i]] += 1;
      fn[gold[i]] += 1;
    }
  }
  F1Scores out;
  double stp = 0, sfp = 0, sfn = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    out.macro += denom > 0 ? 2 * tp[c] / denom : 0.0;
    stp += tp[c];
    sfp += fp[c];
    sfn += fn[c];
  }
  out.macro /= static_cast<double>(num_classes);
  const double denom = 2 * stp + sfp + sfn;
  out.micro = denom > 0 ? 2 * stp / denom : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Ranking runs
// ---------------------------------------------------------------------------

using ItemId = std::int64_t;

struct RankedQuery {
  std::string query_id;
  std::vector<ItemId> ranked;  // best first
  std::vector<ItemId> relevant;
};

using RankingRun = std::vector<RankedQuery>;

struct MetricResult {
  double value = 0.0;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;  // queries without relevant items
};

namespace detail {

template <class PerQuery>
MetricResult mean_over_queries(const RankingRun& run, PerQuery f) {
  MetricResult r;
  for (const auto& q : run) {
    if (q.relevant.empty()) {
      ++r.excluded;
      continue;
    }
    std::unordered_set<ItemId> rel(q.relevant.begin(), q.relevant.end());
    r.value += f(q, rel);
    ++r.evaluated;
  }
  if (r.evaluated > 0) r.value /= static_cast<double>(r.evaluated);
  return r;
}

inline void check_k(std::size_t k) {
  if (k == 0) throw Error("metric cutoff k must be at least 1");
}

}  // namespace detail

/// Mean of |relevant in top k| / |relevant|.
inline MetricResult recall_at_k(const RankingRun& run, std::size_t k) {
  detail::check_k(k);
  return detail::mean_over_queries(run, [&](const RankedQuery& q, const std::unordered_set<ItemId>& rel) {
    std::size_t hits = 0;
    const std::size_t n = std::min(k, q.ranked.size());
    for (std::size_t i = 0; i < n; ++i) hits += rel.count(q.ranked[i]);
    return static_cast<double>(hits) / static_cast<double>(rel.size());
  });
}

/// Binary-gain NDCG@k; the ideal ranking places all relevant items first.
inline MetricResult ndcg_at_k(const RankingRun& run, std::size_t k) {
  detail::check_k(k);
  return detail::mean_over_queries(run, [&](const RankedQuery& q, const std::unordered_set<ItemId>& rel) {
    double dcg = 0.0, ideal = 0.0;
    const std::size_t n = std::min(k, q.ranked.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (rel.count(q.ranked[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    }
    for (std::size_t i = 0; i < std::min(k, rel.size()); ++i) ideal += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    return dcg / ideal;
  });
}

struct Prec1Mrr {
  double prec1 = 0.0;
  double mrr = 0.0;
  std::size_t evaluated = 0;
};

/// One relevant target per query; it must appear among the candidates.
inline Prec1Mrr prec1_mrr(const RankingRun& run) {
  Prec1Mrr out;
  for (const auto& q : run) {
    if (q.relevant.size() != 1) throw Error("prec1_mrr: query " + q.query_id + " must have exactly one relevant item");
    auto it = std::find(q.ranked.begin(), q.ranked.end(), q.relevant.front());
    if (it == q.ranked.end()) throw Error("prec1_mrr: relevant item of query " + q.query_id + " is not ranked");
    const auto rank = static_cast<double>(it - q.ranked.begin()) + 1.0;
    out.prec1 += rank == 1.0 ? 1.0 : 0.0;
    out.mrr += 1.0 / rank;
    ++out.evaluated;
  }
  if (out.evaluated > 0) {
    out.prec1 /= static_cast<double>(out.evaluated);
    out.mrr /= static_cast<double>(out.evaluated);
  }
  return out;
}

/// Evaluates "recall@K", "ndcg@K", "prec@1" or "mrr".
inline MetricResult evaluate_metric(const RankingRun& run, const std::string& name) {
  auto at = name.find('@');
  const std::string base = name.substr(0, at);
  std::size_t k = 0;
  if (at != std::string::npos) {
    const std::string digits = name.substr(at + 1);
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw Error("bad metric cutoff in '" + name + "'");
    }
    k = std::stoul(digits);
  }
  if (base == "recall" || base == "r") return recall_at_k(run, k);
  if (base == "ndcg") return ndcg_at_k(run, k);
  if ((base == "prec" && k == 1) || base == "mrr") {
    auto p = prec1_mrr(run);
    return {base == "mrr" ? p.mrr : p.prec1, p.evaluated, 0};
  }
  throw Error("unknown metric '" + name + "'");
}

inline void validate(const RankedQuery& q) {
  std::unordered_set<ItemId> seen;
  for (auto id : q.ranked) {
    if (!seen.insert(id).second) throw Error("query " + q.query_id + " ranks item " + std::to_string(id) + " twice");
  }
}

inline void write_run(const std::string& path, const RankingRun& run) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (const auto& q : run) {
    out << nlohmann::json{{"query_id", q.query_id}, {"ranked", q.ranked}, {"relevant", q.relevant}}.dump() << '\n';
  }
  if (!out) throw Error("write failed: " + path);
}

inline RankingRun read_run(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  RankingRun run;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      RankedQuery q;
      const auto& id = j.at("query_id");
      q.query_id = id.is_string() ? id.get<std::string>() : id.dump();
      q.ranked = j.at("ranked").get<std::vector<ItemId>>();
      q.relevant = j.at("relevant").get<std::vector<ItemId>>();
      validate(q);
      run.push_back(std::move(q));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return run;
}

}  // namespace netpretrain
