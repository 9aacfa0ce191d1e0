// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "netpretrain/synthgen.hpp"
#include "netpretrain/tokenizer.hpp"
#include "support/fixtures.hpp"

namespace np = netpretrain;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t find_root(std::vector<std::size_t>& parent, std::size_t x) {
  while (parent[x] != x) x = parent[x] = parent[parent[x]];
  return x;
}

TEST(Synth, NoCrossEdgesGivesComponentsEqualToClusters) {
  np::SynthConfig cfg;
  cfg.p_out = 0.0;
  auto ds = np::generate_network(cfg);
  std::vector<std::size_t> parent(cfg.num_nodes());
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  for (auto [u, v] : ds.edges) {
    EXPECT_EQ(ds.cluster[u], ds.cluster[v]);
    parent[find_root(parent, u)] = find_root(parent, v);
  }
  std::map<std::size_t, std::set<std::size_t>> clusters_of_component;
  std::map<std::size_t, std::set<std::size_t>> components_of_cluster;
  for (std::size_t v = 0; v < cfg.num_nodes(); ++v) {
    clusters_of_component[find_root(parent, v)].insert(ds.cluster[v]);
    components_of_cluster[ds.cluster[v]].insert(find_root(parent, v));
  }
  EXPECT_EQ(clusters_of_component.size(), cfg.num_clusters);
  for (const auto& [root, cs] : clusters_of_component) EXPECT_EQ(cs.size(), 1u);
  for (const auto& [c, roots] : components_of_cluster) EXPECT_EQ(roots.size(), 1u);
}

TEST(Synth, IntraDegreeWithinThreeSigmaOfBinomialMean) {
  np::SynthConfig cfg;
  auto ds = np::generate_network(cfg);
  std::size_t intra = 0, inter = 0;
  for (auto [u, v] : ds.edges) (ds.cluster[u] == ds.cluster[v] ? intra : inter) += 1;
  const double nc = static_cast<double>(cfg.nodes_per_cluster);
  const double pairs = static_cast<double>(cfg.num_clusters) * nc * (nc - 1) / 2;
  const double n = static_cast<double>(cfg.num_nodes());
  const double mean_degree = 2.0 * static_cast<double>(intra) / n;
  const double expected = cfg.p_in * (nc - 1);
  const double sigma = 2.0 * std::sqrt(pairs * cfg.p_in * (1 - cfg.p_in)) / n;
  EXPECT_NEAR(mean_degree, expected, 3 * sigma);
  const double cross_pairs = n * n / 2 - pairs - n / 2;
  EXPECT_NEAR(static_cast<double>(inter), cross_pairs * cfg.p_out, 3 * std::sqrt(cross_pairs * cfg.p_out));
}

TEST(Synth, SameSeedByteIdenticalFiles) {
  np::testing::ScratchDir a("synth_a"), b("synth_b"), c("synth_c");
  np::SynthConfig cfg;
  cfg.nodes_per_cluster = 50;
  np::write_dataset(np::generate_network(cfg), a.path());
  np::write_dataset(np::generate_network(cfg), b.path());
  cfg.seed = 8;
  np::write_dataset(np::generate_network(cfg), c.path());
  for (const char* f : {np::SynthFiles::kNodes, np::SynthFiles::kEdges, np::SynthFiles::kLinkEdges,
                        np::SynthFiles::kCoarseLabels, np::SynthFiles::kCoarseNames, np::SynthFiles::kFineLabels,
                        np::SynthFiles::kFineNames, np::SynthFiles::kSynthConfig}) {
    const auto first = slurp(a.path() / f);
    EXPECT_FALSE(first.empty()) << f;
    EXPECT_EQ(first, slurp(b.path() / f)) << f;
  }
  EXPECT_NE(slurp(a.path() / np::SynthFiles::kNodes), slurp(c.path() / np::SynthFiles::kNodes));
}

TEST(Synth, TokenOwnership) {
  np::SynthConfig cfg;
  auto ds = np::generate_network(cfg);
  std::map<std::string, std::set<std::size_t>> clusters_of;
  for (std::size_t v = 0; v < ds.texts.size(); ++v) {
    for (const auto& tok : np::normalize_tokens(ds.texts[v])) clusters_of[tok].insert(ds.cluster[v]);
  }
  std::size_t ambiguous_seen = 0;
  for (const auto& [tok, cs] : clusters_of) {
    if (tok.rfind("amb", 0) == 0) {
      ++ambiguous_seen;
      EXPECT_GE(cs.size(), 2u) << tok;
    } else {
      ASSERT_EQ(cs.size(), 1u) << tok;
      EXPECT_EQ(tok[0], 'c');
      EXPECT_EQ(static_cast<std::size_t>(tok[1] - '0'), *cs.begin()) << tok;
    }
  }
  EXPECT_EQ(ambiguous_seen, cfg.ambiguous_tokens);
  for (const auto& text : ds.texts) EXPECT_EQ(np::normalize_tokens(text).size(), cfg.tokens_per_node);
}

TEST(Synth, LabelsAndSecondEdgeType) {
  np::SynthConfig cfg;
  auto ds = np::generate_network(cfg);
  EXPECT_EQ(ds.fine_names.size(), cfg.label_space);
  std::set<int> true_labels(ds.fine_label_of_subtopic.begin(), ds.fine_label_of_subtopic.end());
  EXPECT_EQ(true_labels.size(), cfg.num_fine());
  for (std::size_t g = 0; g < cfg.num_fine(); ++g) {
    const auto words = np::normalize_tokens(ds.fine_names[ds.fine_label_of_subtopic[g]]);
    ASSERT_EQ(words.size(), cfg.name_tokens);
    const std::string prefix = "c" + std::to_string(g / cfg.fine_per_cluster) + "s" + std::to_string(g % cfg.fine_per_cluster) + "w";
    for (const auto& w : words) EXPECT_EQ(w.rfind(prefix, 0), 0u) << w;
  }
  for (auto [u, v] : ds.fine_edges) EXPECT_EQ(ds.subtopic[u], ds.subtopic[v]);
  EXPECT_GT(ds.fine_edges.size(), 600u);
  std::map<std::size_t, std::size_t> per_subtopic;
  for (auto s : ds.subtopic) ++per_subtopic[s];
  for (const auto& [s, count] : per_subtopic) EXPECT_EQ(count, cfg.nodes_per_cluster / cfg.fine_per_cluster);
}

TEST(Synth, FilesLoadThroughNetdata) {
  np::testing::ScratchDir dir("synth_load");
  np::SynthConfig cfg;
  auto ds = np::generate_network(cfg);
  np::write_dataset(ds, dir.path());
  std::vector<std::string> texts;
  auto vocab = np::build_vocab(ds.texts, 1, 100000);
  auto net = np::load_network(dir.file(np::SynthFiles::kNodes), dir.file(np::SynthFiles::kEdges), vocab, 32);
  EXPECT_EQ(net.size(), cfg.num_nodes());
  EXPECT_EQ(net.edge_count(), ds.edges.size());
  EXPECT_EQ(net.self_loops_dropped, 0u);
  auto coarse = np::load_labels(net, dir.file(np::SynthFiles::kCoarseLabels), dir.file(np::SynthFiles::kCoarseNames));
  auto fine = np::load_labels(net, dir.file(np::SynthFiles::kFineLabels), dir.file(np::SynthFiles::kFineNames));
  EXPECT_EQ(coarse.num_labels(), cfg.num_clusters);
  EXPECT_EQ(fine.num_labels(), cfg.label_space);
  for (std::size_t v = 0; v < net.size(); ++v) {
    ASSERT_EQ(coarse.of_node[v].size(), 1u);
    EXPECT_EQ(static_cast<std::size_t>(coarse.of_node[v][0]), ds.cluster[v]);
  }
  auto link = np::load_edge_list(net, dir.file(np::SynthFiles::kLinkEdges));
  EXPECT_EQ(link.size(), ds.fine_edges.size());
}

TEST(Synth, InvalidConfigRejected) {
  np::SynthConfig cfg;
  cfg.p_out = cfg.p_in;
  EXPECT_THROW(np::generate_network(cfg), np::Error);
  cfg = {};
  cfg.num_clusters = 0;
  EXPECT_THROW(np::generate_network(cfg), np::Error);
  cfg = {};
  cfg.label_space = 3;
  EXPECT_THROW(np::generate_network(cfg), np::Error);
}

}  // namespace
