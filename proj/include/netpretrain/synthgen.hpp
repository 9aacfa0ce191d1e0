// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Planted-partition text-rich networks. Each cluster owns a private
// vocabulary split into subtopics; a pool of ambiguous tokens is shared by
// overlapping windows of clusters, so the same word occurs in different
// communities and only the surrounding graph tells them apart.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "netpretrain/autodiff/tensor.hpp"
#include "netpretrain/netdata.hpp"
#include "netpretrain/random.hpp"

namespace netpretrain {

struct SynthConfig {
  std::size_t num_clusters = 4;
  std::size_t nodes_per_cluster = 250;
  double p_in = 0.05;
  double p_out = 0.002;
  std::size_t tokens_per_node = 12;
  std::size_t cluster_vocab = 200;  // per cluster, split evenly over subtopics
  std::size_t ambiguous_tokens = 20;
  std::size_t ambiguous_window = 10;  // ambiguous tokens used by one cluster
  std::size_t fine_per_cluster = 5;
  double own_subtopic_fraction = 0.6;
  double sibling_subtopic_fraction = 0.2;  // remainder is ambiguous
  double p_fine_edge = 0.04;               // second edge type, within a subtopic
  std::size_t label_space = 200;           // fine labels incl. distractors
  std::size_t name_tokens = 3;
  std::uint64_t seed = 7;

  std::size_t num_nodes() const { return num_clusters * nodes_per_cluster; }
  std::size_t num_fine() const { return num_clusters * fine_per_cluster; }
  std::size_t subtopic_vocab() const { return cluster_vocab / fine_per_cluster; }

  void validate() const {
    if (num_clusters == 0 || nodes_per_cluster == 0 || tokens_per_node == 0 || cluster_vocab == 0 ||
        ambiguous_tokens == 0 || fine_per_cluster == 0 || name_tokens == 0) {
      throw Error("synth: all counts must be positive");
    }
    if (!(0.0 <= p_out && p_out < p_in && p_in <= 1.0)) throw Error("synth: need 0 <= p_out < p_in <= 1");
    if (p_fine_edge < 0.0 || p_fine_edge > 1.0) throw Error("synth: p_fine_edge must lie in [0, 1]");
    if (cluster_vocab % fine_per_cluster != 0) throw Error("synth: cluster_vocab must divide into subtopics");
    if (subtopic_vocab() < name_tokens) throw Error("synth: subtopic vocabulary smaller than a label name");
    if (ambiguous_window == 0 || ambiguous_window > ambiguous_tokens) {
      throw Error("synth: ambiguous_window must lie in [1, ambiguous_tokens]");
    }
    if (own_subtopic_fraction < 0 || sibling_subtopic_fraction < 0 ||
        own_subtopic_fraction + sibling_subtopic_fraction > 1.0) {
      throw Error("synth: token mixture fractions must be non-negative and sum to at most 1");
    }
    if (label_space < num_fine()) throw Error("synth: label_space smaller than the number of subtopics");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"num_clusters", c.num_clusters},
       {"nodes_per_cluster", c.nodes_per_cluster},
       {"p_in", c.p_in},
       {"p_out", c.p_out},
       {"tokens_per_node", c.tokens_per_node},
       {"cluster_vocab", c.cluster_vocab},
       {"ambiguous_tokens", c.ambiguous_tokens},
       {"ambiguous_window", c.ambiguous_window},
       {"fine_per_cluster", c.fine_per_cluster},
       {"own_subtopic_fraction", c.own_subtopic_fraction},
       {"sibling_subtopic_fraction", c.sibling_subtopic_fraction},
       {"p_fine_edge", c.p_fine_edge},
       {"label_space", c.label_space},
       {"name_tokens", c.name_tokens},
       {"seed", c.seed}};
}

/// Reads generator settings; absent keys keep their defaults, unknown keys
/// are rejected.
inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("synthetic config must be a JSON object");
  SynthConfig c;
  nlohmann::json defaults = c;
  for (const auto& [k, v] : j.items()) {
    if (!defaults.contains(k)) throw Error("unknown synthetic config key '" + k + "'");
    if (v.type() != defaults[k].type() && !(v.is_number() && defaults[k].is_number_float())) {
      throw Error("synthetic config key '" + k + "' has the wrong type");
    }
    defaults[k] = v;
  }
  auto get = [&](const char* k, auto& field) { field = defaults.at(k).get<std::decay_t<decltype(field)>>(); };
  get("num_clusters", c.num_clusters);
  get("nodes_per_cluster", c.nodes_per_cluster);
  get("p_in", c.p_in);
  get("p_out", c.p_out);
  get("tokens_per_node", c.tokens_per_node);
  get("cluster_vocab", c.cluster_vocab);
  get("ambiguous_tokens", c.ambiguous_tokens);
  get("ambiguous_window", c.ambiguous_window);
  get("fine_per_cluster", c.fine_per_cluster);
  get("own_subtopic_fraction", c.own_subtopic_fraction);
  get("sibling_subtopic_fraction", c.sibling_subtopic_fraction);
  get("p_fine_edge", c.p_fine_edge);
  get("label_space", c.label_space);
  get("name_tokens", c.name_tokens);
  get("seed", c.seed);
  return c;
}

struct SynthDataset {
  SynthConfig config;
  std::vector<std::string> texts;
  std::vector<std::size_t> cluster;   // per node
  std::vector<std::size_t> subtopic;  // per node, global subtopic index
  std::vector<Edge> edges;            // planted partition
  std::vector<Edge> fine_edges;       // within-subtopic second edge type
  std::vector<std::string> coarse_names;
  std::vector<std::string> fine_names;     // label_space entries
  std::vector<int> fine_label_of_subtopic; // subtopic -> fine label id
};

inline std::string cluster_token(std::size_t c, std::size_t s, std::size_t w) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "c%zus%zuw%02zu", c, s, w);
  return buf;
}

inline std::string ambiguous_token(std::size_t a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "amb%02zu", a);
  return buf;
}

/// Ambiguous token indices available to cluster c: a window of
/// ambiguous_window starting at c * ambiguous_window / 2, wrapping around.
inline std::vector<std::size_t> ambiguous_pool(const SynthConfig& cfg, std::size_t c) {
  std::vector<std::size_t> pool;
  const std::size_t start = c * cfg.ambiguous_window / 2;
  for (std::size_t i = 0; i < cfg.ambiguous_window; ++i) pool.push_back((start + i) % cfg.ambiguous_tokens);
  return pool;
}

namespace detail {

inline bool bernoulli(Rng& rng, double p) { return uniform_real(rng) < p; }

}  // namespace detail

inline SynthDataset generate_network(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset ds;
  ds.config = cfg;
  const std::size_t n = cfg.num_nodes();
  const std::size_t sv = cfg.subtopic_vocab();

  // Cluster and subtopic assignment: equal-sized blocks, then shuffled over ids.
  Rng assign_rng(derive_seed(cfg.seed, {1}));
  std::vector<std::size_t> slots(n);
  for (std::size_t i = 0; i < n; ++i) slots[i] = i;
  shuffle(slots, assign_rng);
  ds.cluster.resize(n);
  ds.subtopic.resize(n);
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t c = slots[v] / cfg.nodes_per_cluster;
    const std::size_t within = slots[v] % cfg.nodes_per_cluster;
    ds.cluster[v] = c;
    ds.subtopic[v] = c * cfg.fine_per_cluster + within * cfg.fine_per_cluster / cfg.nodes_per_cluster;
  }

  Rng text_rng(derive_seed(cfg.seed, {2}));
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t c = ds.cluster[v];
    const std::size_t s = ds.subtopic[v] % cfg.fine_per_cluster;
    const auto pool = ambiguous_pool(cfg, c);
    std::string text;
    for (std::size_t t = 0; t < cfg.tokens_per_node; ++t) {
      const double u = uniform_real(text_rng);
      std::string tok;
      if (u < cfg.own_subtopic_fraction) {
        tok = cluster_token(c, s, uniform_index(text_rng, sv));
      } else if (u < cfg.own_subtopic_fraction + cfg.sibling_subtopic_fraction && cfg.fine_per_cluster > 1) {
        std::size_t other = uniform_index(text_rng, cfg.fine_per_cluster - 1);
        if (other >= s) ++other;
        tok = cluster_token(c, other, uniform_index(text_rng, sv));
      } else {
        tok = ambiguous_token(pool[uniform_index(text_rng, pool.size())]);
      }
      if (!text.empty()) text.push_back(' ');
      text += tok;
    }
    ds.texts.push_back(std::move(text));
  }

  Rng edge_rng(derive_seed(cfg.seed, {3}));
  for (NodeIndex u = 0; u < n; ++u) {
    for (NodeIndex v = u + 1; v < n; ++v) {
      const double p = ds.cluster[u] == ds.cluster[v] ? cfg.p_in : cfg.p_out;
      if (detail::bernoulli(edge_rng, p)) ds.edges.emplace_back(u, v);
    }
  }
  Rng fine_rng(derive_seed(cfg.seed, {4}));
  for (NodeIndex u = 0; u < n; ++u) {
    for (NodeIndex v = u + 1; v < n; ++v) {
      if (ds.subtopic[u] == ds.subtopic[v] && detail::bernoulli(fine_rng, cfg.p_fine_edge)) {
        ds.fine_edges.emplace_back(u, v);
      }
    }
  }

  for (std::size_t c = 0; c < cfg.num_clusters; ++c) ds.coarse_names.push_back("topic " + std::to_string(c));

  // Fine label names: true subtopics draw all name tokens from their own
  // vocabulary; distractors mix tokens of distinct random subtopics.
  Rng name_rng(derive_seed(cfg.seed, {5}));
  auto name_from = [&](const std::vector<std::size_t>& subtopics) {
    std::vector<std::string> words;
    for (auto g : subtopics) {
      std::string w;
      do {
        w = cluster_token(g / cfg.fine_per_cluster, g % cfg.fine_per_cluster, uniform_index(name_rng, sv));
      } while (std::find(words.begin(), words.end(), w) != words.end());
      words.push_back(std::move(w));
    }
    std::string name;
    for (const auto& w : words) name += (name.empty() ? "" : " ") + w;
    return name;
  };
  std::vector<std::string> names;
  for (std::size_t g = 0; g < cfg.num_fine(); ++g) names.push_back(name_from(std::vector<std::size_t>(cfg.name_tokens, g)));
  while (names.size() < cfg.label_space) {
    std::vector<std::size_t> picks;
    for (std::size_t t = 0; t < cfg.name_tokens; ++t) picks.push_back(uniform_index(name_rng, cfg.num_fine()));
    names.push_back(name_from(picks));
  }
  std::vector<std::size_t> order(names.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, name_rng);
  ds.fine_names.resize(names.size());
  ds.fine_label_of_subtopic.resize(cfg.num_fine());
  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    ds.fine_names[slot] = names[order[slot]];
    if (order[slot] < cfg.num_fine()) ds.fine_label_of_subtopic[order[slot]] = static_cast<int>(slot);
  }
  return ds;
}

struct SynthFiles {
  static constexpr const char* kNodes = "nodes.jsonl";
  static constexpr const char* kEdges = "edges.tsv";
  static constexpr const char* kLinkEdges = "edges_linkpred.tsv";
  static constexpr const char* kCoarseLabels = "labels_coarse.tsv";
  static constexpr const char* kCoarseNames = "label_names_coarse.tsv";
  static constexpr const char* kFineLabels = "labels_fine.tsv";
  static constexpr const char* kFineNames = "label_names_fine.tsv";
  static constexpr const char* kSynthConfig = "synth.json";
};

/// Writes the dataset under `dir` (created if needed). Node ids are the
/// node indices.
inline void write_dataset(const SynthDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error("cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open(SynthFiles::kNodes);
    for (std::size_t v = 0; v < ds.texts.size(); ++v) out << nlohmann::json{{"id", v}, {"text", ds.texts[v]}}.dump() << '\n';
  }
  auto write_edges = [&](const char* name, const std::vector<Edge>& edges) {
    auto out = open(name);
    for (auto [u, v] : edges) out << u << '\t' << v << '\n';
  };
  write_edges(SynthFiles::kEdges, ds.edges);
  write_edges(SynthFiles::kLinkEdges, ds.fine_edges);
  auto write_names = [&](const char* name, const std::vector<std::string>& names) {
    auto out = open(name);
    for (std::size_t i = 0; i < names.size(); ++i) out << i << '\t' << names[i] << '\n';
  };
  write_names(SynthFiles::kCoarseNames, ds.coarse_names);
  write_names(SynthFiles::kFineNames, ds.fine_names);
  {
    auto out = open(SynthFiles::kCoarseLabels);
    for (std::size_t v = 0; v < ds.cluster.size(); ++v) out << v << '\t' << ds.cluster[v] << '\n';
  }
  {
    auto out = open(SynthFiles::kFineLabels);
    for (std::size_t v = 0; v < ds.subtopic.size(); ++v) {
      out << v << '\t' << ds.fine_label_of_subtopic[ds.subtopic[v]] << '\n';
    }
  }
  open(SynthFiles::kSynthConfig) << nlohmann::json(ds.config).dump(2) << '\n';
}

}  // namespace netpretrain
