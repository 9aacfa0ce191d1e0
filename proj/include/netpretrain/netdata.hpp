// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "netpretrain/masking.hpp"
#include "netpretrain/random.hpp"
#include "netpretrain/tokenizer.hpp"

namespace netpretrain {

/// Dense internal node index; external ids from the nodes file are kept in
/// TextRichNetwork::ids.
using NodeIndex = std::size_t;
using Edge = std::pair<NodeIndex, NodeIndex>;

inline constexpr std::size_t kDefaultNeighbors = 5;
inline constexpr std::size_t kDefaultMaxLen = 32;

/// Nodes with texts and an undirected, symmetric, loop-free adjacency.
struct TextRichNetwork {
  std::vector<std::uint64_t> ids;
  std::unordered_map<std::uint64_t, NodeIndex> index;
  std::vector<std::string> texts;
  std::vector<TokenSequence> tokens;
  std::vector<std::vector<NodeIndex>> adjacency;  // sorted, deduplicated
  std::size_t self_loops_dropped = 0;

  std::size_t size() const { return ids.size(); }
  std::size_t degree(NodeIndex v) const { return adjacency[v].size(); }

  NodeIndex node(std::uint64_t external_id) const {
    auto it = index.find(external_id);
    if (it == index.end()) throw Error("unknown node id " + std::to_string(external_id));
    return it->second;
  }

  bool has_edge(NodeIndex u, NodeIndex v) const {
    const auto& a = adjacency[u];
    return std::binary_search(a.begin(), a.end(), v);
  }

  std::size_t edge_count() const {
    std::size_t total = 0;
    for (const auto& a : adjacency) total += a.size();
    return total / 2;
  }

  /// Each undirected edge once, as (min, max), in ascending order.
  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (NodeIndex u = 0; u < size(); ++u) {
      for (NodeIndex v : adjacency[u]) {
        if (u < v) out.emplace_back(u, v);
      }
    }
    return out;
  }

  /// Replaces the adjacency with the given undirected edge list.
  void set_edges(const std::vector<Edge>& edge_list) {
    adjacency.assign(size(), {});
    for (auto [u, v] : edge_list) {
      if (u == v) continue;
      adjacency[u].push_back(v);
      adjacency[v].push_back(u);
    }
    for (auto& a : adjacency) {
      std::sort(a.begin(), a.end());
      a.erase(std::unique(a.begin(), a.end()), a.end());
    }
  }
};

namespace detail {

inline std::uint64_t parse_id(const std::string& field, const std::string& where) {
  if (field.empty() || !std::all_of(field.begin(), field.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw Error(where + ": malformed node id '" + field + "'");
  }
  try {
    return std::stoull(field);
  } catch (const std::exception&) {
    throw Error(where + ": node id out of range '" + field + "'");
  }
}

/// Splits "<a>\t<b>" lines; blank lines are skipped.
inline std::vector<std::pair<std::string, std::string>> read_tab_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw Error(path + ":" + std::to_string(line_no) + ": expected two tab-separated fields");
    }
    out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return out;
}

}  // namespace detail

/// Reads the JSON Lines node file only (no edges).
inline TextRichNetwork load_nodes(const std::string& nodes_path, const Vocab& vocab, std::size_t max_len) {
  std::ifstream in(nodes_path);
  if (!in) throw Error("cannot open nodes file " + nodes_path);
  TextRichNetwork net;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::string where = nodes_path + ":" + std::to_string(line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(where + ": malformed record (" + e.what() + ")");
    }
    if (!rec.is_object() || !rec.contains("id") || !rec.contains("text") || !rec["id"].is_number_unsigned() ||
        !rec["text"].is_string()) {
      throw Error(where + ": malformed record, expected {\"id\": <non-negative integer>, \"text\": <string>}");
    }
    auto id = rec["id"].get<std::uint64_t>();
    if (net.index.count(id)) throw Error(where + ": duplicate node id " + std::to_string(id));
    net.index.emplace(id, net.ids.size());
    net.ids.push_back(id);
    net.texts.push_back(rec["text"].get<std::string>());
    net.tokens.push_back(encode(net.texts.back(), vocab, max_len));
  }
  net.adjacency.assign(net.size(), {});
  return net;
}

/// Reads "<src>\t<dst>" pairs resolved against the network's node ids.
/// Self-loops are returned too; callers decide what to do with them.
inline std::vector<Edge> load_edge_list(const TextRichNetwork& net, const std::string& edges_path) {
  std::ifstream in(edges_path);
  if (!in) throw Error("cannot open edges file " + edges_path);
  std::vector<Edge> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = edges_path + ":" + std::to_string(line_no);
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(where + ": malformed edge, expected \"<src>\\t<dst>\"");
    auto src = detail::parse_id(line.substr(0, tab), where);
    auto dst = detail::parse_id(line.substr(tab + 1), where);
    auto s = net.index.find(src);
    auto d = net.index.find(dst);
    if (s == net.index.end() || d == net.index.end()) {
      throw Error(where + ": edge references unknown node id " +
                  std::to_string(s == net.index.end() ? src : dst));
    }
    out.emplace_back(s->second, d->second);
  }
  return out;
}

inline TextRichNetwork load_network(const std::string& nodes_path, const std::string& edges_path, const Vocab& vocab,
                                    std::size_t max_len = kDefaultMaxLen) {
  auto net = load_nodes(nodes_path, vocab, max_len);
  auto edge_list = load_edge_list(net, edges_path);
  std::vector<Edge> kept;
  kept.reserve(edge_list.size());
  for (auto e : edge_list) {
    if (e.first == e.second) {
      ++net.self_loops_dropped;
    } else {
      kept.push_back(e);
    }
  }
  net.set_edges(kept);
  return net;
}

/// Per-node label ids (a node may carry several) plus label names.
struct LabelSet {
  std::vector<std::vector<int>> of_node;
  std::vector<std::string> names;

  std::size_t num_labels() const { return names.size(); }
  bool has_label(NodeIndex v) const { return !of_node[v].empty(); }
};

/// Labels file "<node_id>\t<label_id>"; names file "<label_id>\t<name>".
/// Label ids must be dense from 0 and every name non-empty.
inline LabelSet load_labels(const TextRichNetwork& net, const std::string& labels_path,
                            const std::string& names_path) {
  LabelSet set;
  std::map<int, std::string> names;
  for (auto& [id_field, name] : detail::read_tab_pairs(names_path)) {
    int id = static_cast<int>(detail::parse_id(id_field, names_path));
    if (name.empty()) throw Error(names_path + ": label " + id_field + " has an empty name");
    names[id] = name;
  }
  int expect = 0;
  for (auto& [id, name] : names) {
    if (id != expect++) throw Error(names_path + ": label ids must be dense from 0");
    set.names.push_back(name);
  }
  set.of_node.assign(net.size(), {});
  for (auto& [node_field, label_field] : detail::read_tab_pairs(labels_path)) {
    auto v = net.node(detail::parse_id(node_field, labels_path));
    int label = static_cast<int>(detail::parse_id(label_field, labels_path));
    if (label >= static_cast<int>(set.names.size())) {
      throw Error(labels_path + ": label " + label_field + " has no name");
    }
    set.of_node[v].push_back(label);
  }
  return set;
}

/// Uniform sample of min(k, deg(v)) neighbors without replacement, in
/// shuffled order. `exclude` nodes are never returned.
inline std::vector<NodeIndex> sample_neighbors(const TextRichNetwork& net, NodeIndex v, std::size_t k,
                                               std::uint64_t seed, std::span<const NodeIndex> exclude = {}) {
  if (v >= net.size()) throw Error("sample_neighbors: unknown node index " + std::to_string(v));
  std::vector<NodeIndex> pool;
  pool.reserve(net.adjacency[v].size());
  for (auto u : net.adjacency[v]) {
    if (std::find(exclude.begin(), exclude.end(), u) == exclude.end()) pool.push_back(u);
  }
  Rng rng(seed);
  const std::size_t take = std::min(k, pool.size());
  for (std::size_t i = 0; i < take; ++i) {
    std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
  }
  pool.resize(take);
  return pool;
}

/// Centers with their sampled neighbor texts, padded to K slots.
struct EgoBatch {
  std::size_t batch = 0;
  std::size_t neighbors = 0;  // K
  std::size_t seq_len = 0;    // T
  std::vector<NodeIndex> centers;
  std::vector<TokenId> center_ids;              // B*T
  std::vector<std::uint8_t> center_attention;   // B*T
  std::vector<TokenId> neighbor_ids;            // B*K*T
  std::vector<std::uint8_t> neighbor_attention; // B*K*T
  std::vector<std::uint8_t> neighbor_valid;     // B*K
  std::vector<NodeIndex> neighbor_nodes;        // B*K, meaningful where valid
  std::vector<TokenId> mlm_labels;              // B*T
  std::vector<std::pair<std::size_t, std::size_t>> positive_pairs;

  std::size_t valid_neighbors(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < neighbors; ++k) n += neighbor_valid[b * neighbors + k];
    return n;
  }
};

struct EgoBatchOptions {
  std::size_t neighbors = kDefaultNeighbors;
  bool mlm = false;
  double mask_ratio = kDefaultMaskRatio;
  std::size_t vocab_size = 0;  // required when mlm is set
  std::uint64_t seed = 0;
  /// Key neighbor sampling on the node index instead of the batch position,
  /// so a node encodes the same way wherever it sits in a batch.
  bool seed_by_node = false;
};

/// Assembles center and neighbor sequences. `exclusions[b]`, when given,
/// lists nodes that center b must not sample as neighbors.
inline EgoBatch make_ego_batch(const TextRichNetwork& net, std::span<const NodeIndex> centers,
                               const EgoBatchOptions& opts,
                               std::span<const std::vector<NodeIndex>> exclusions = {}) {
  if (centers.empty()) throw Error("make_ego_batch: no centers");
  if (net.size() == 0) throw Error("make_ego_batch: empty network");
  if (opts.mlm && opts.vocab_size == 0) throw Error("make_ego_batch: vocab_size required for masking");
  const std::size_t B = centers.size();
  const std::size_t K = opts.neighbors;
  const std::size_t T = net.tokens.front().ids.size();
  EgoBatch batch;
  batch.batch = B;
  batch.neighbors = K;
  batch.seq_len = T;
  batch.centers.assign(centers.begin(), centers.end());
  batch.center_ids.resize(B * T);
  batch.center_attention.resize(B * T);
  batch.neighbor_ids.assign(B * K * T, special::kPad);
  batch.neighbor_attention.assign(B * K * T, 0);
  batch.neighbor_valid.assign(B * K, 0);
  batch.neighbor_nodes.assign(B * K, 0);
  batch.mlm_labels.assign(B * T, kLabelSentinel);
  for (std::size_t b = 0; b < B; ++b) {
    const NodeIndex v = centers[b];
    if (v >= net.size()) throw Error("make_ego_batch: unknown center index " + std::to_string(v));
    const auto& seq = net.tokens[v];
    if (opts.mlm) {
      auto masked = mask_tokens(seq, opts.mask_ratio, opts.vocab_size, derive_seed(opts.seed, {0x6d6c6dULL, b}));
      std::copy(masked.sequence.ids.begin(), masked.sequence.ids.end(), batch.center_ids.begin() + b * T);
      std::copy(masked.labels.begin(), masked.labels.end(), batch.mlm_labels.begin() + b * T);
    } else {
      std::copy(seq.ids.begin(), seq.ids.end(), batch.center_ids.begin() + b * T);
    }
    std::copy(seq.attention.begin(), seq.attention.end(), batch.center_attention.begin() + b * T);
    std::span<const NodeIndex> excl;
    if (!exclusions.empty()) excl = exclusions[b];
    const std::uint64_t slot = opts.seed_by_node ? static_cast<std::uint64_t>(v) : b;
    auto nbrs = sample_neighbors(net, v, K, derive_seed(opts.seed, {0x6e6272ULL, slot}), excl);
    for (std::size_t k = 0; k < nbrs.size(); ++k) {
      const auto& ns = net.tokens[nbrs[k]];
      std::copy(ns.ids.begin(), ns.ids.end(), batch.neighbor_ids.begin() + (b * K + k) * T);
      std::copy(ns.attention.begin(), ns.attention.end(), batch.neighbor_attention.begin() + (b * K + k) * T);
      batch.neighbor_valid[b * K + k] = 1;
      batch.neighbor_nodes[b * K + k] = nbrs[k];
    }
  }
  return batch;
}

/// Removes round(fraction * |E|) uniformly chosen edges from the training
/// adjacency and returns them as held-out positive pairs.
struct EdgeSplit {
  TextRichNetwork train;
  std::vector<Edge> held_out;
};

inline EdgeSplit split_edges(const TextRichNetwork& net, double holdout_fraction, std::uint64_t seed) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 0.5)) {
    throw Error("split_edges: holdout_fraction must lie in (0, 0.5)");
  }
  auto all = net.edges();
  Rng rng(seed);
  shuffle(all, rng);
  const auto n_hold = static_cast<std::size_t>(holdout_fraction * static_cast<double>(all.size()) + 0.5);
  EdgeSplit split{net, {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_hold)}};
  split.train.set_edges({all.begin() + static_cast<std::ptrdiff_t>(n_hold), all.end()});
  std::sort(split.held_out.begin(), split.held_out.end());
  return split;
}

}  // namespace netpretrain
