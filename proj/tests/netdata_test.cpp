// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <set>
#include <string>

#include <gtest/gtest.h>

#include "netpretrain/netdata.hpp"
#include "support/fixtures.hpp"

namespace np = netpretrain;
using np::testing::ScratchDir;

namespace {

np::Vocab small_vocab() { return np::build_vocab(std::vector<std::string>{"alpha beta gamma delta"}, 1, 100); }

struct Files {
  ScratchDir dir{"netdata"};
  std::string nodes;
  std::string edges;
};

void write_nodes(Files& f, int n) {
  std::string s;
  for (int i = 0; i < n; ++i) s += "{\"id\": " + std::to_string(i) + ", \"text\": \"alpha beta\"}\n";
  f.nodes = f.dir.write("nodes.jsonl", s);
}

TEST(LoadNetwork, SingleEdgeIsSymmetric) {
  Files f;
  write_nodes(f, 2);
  f.edges = f.dir.write("edges.tsv", "0\t1\n");
  auto net = np::load_network(f.nodes, f.edges, small_vocab(), 8);
  EXPECT_EQ(net.adjacency[0], (std::vector<np::NodeIndex>{1}));
  EXPECT_EQ(net.adjacency[1], (std::vector<np::NodeIndex>{0}));
  EXPECT_EQ(net.tokens[0].ids[1], 5);
}

TEST(LoadNetwork, DuplicatesCollapseAndSelfLoopsCounted) {
  Files f;
  write_nodes(f, 3);
  f.edges = f.dir.write("edges.tsv", "0\t1\n1\t0\n0\t0\n2\t1\n");
  auto net = np::load_network(f.nodes, f.edges, small_vocab(), 8);
  EXPECT_EQ(net.edge_count(), 2u);
  EXPECT_EQ(net.self_loops_dropped, 1u);
  EXPECT_EQ(net.adjacency[0], (std::vector<np::NodeIndex>{1}));
  EXPECT_EQ(net.adjacency[1], (std::vector<np::NodeIndex>{0, 2}));
}

TEST(LoadNetwork, UnknownIdNamesTheLine) {
  Files f;
  write_nodes(f, 2);
  f.edges = f.dir.write("edges.tsv", "0\t1\n1\t7\n");
  try {
    np::load_network(f.nodes, f.edges, small_vocab(), 8);
    FAIL();
  } catch (const np::Error& e) {
    EXPECT_NE(std::string(e.what()).find("edges.tsv:2"), std::string::npos) << e.what();
  }
}

TEST(LoadNetwork, MalformedRecordNamesTheLine) {
  Files f;
  f.nodes = f.dir.write("nodes.jsonl", "{\"id\": 0, \"text\": \"a\"}\n{\"id\": \"x\"}\n");
  f.edges = f.dir.write("edges.tsv", "");
  try {
    np::load_network(f.nodes, f.edges, small_vocab(), 8);
    FAIL();
  } catch (const np::Error& e) {
    EXPECT_NE(std::string(e.what()).find("nodes.jsonl:2"), std::string::npos) << e.what();
  }
  f.nodes = f.dir.write("nodes2.jsonl", "not json\n");
  EXPECT_THROW(np::load_network(f.nodes, f.edges, small_vocab(), 8), np::Error);
  EXPECT_THROW(np::load_network(f.dir.file("missing.jsonl"), f.edges, small_vocab(), 8), np::Error);
}

TEST(LoadLabels, DenseIdsAndNames) {
  Files f;
  write_nodes(f, 3);
  f.edges = f.dir.write("edges.tsv", "");
  auto net = np::load_network(f.nodes, f.edges, small_vocab(), 8);
  auto names = f.dir.write("names.tsv", "0\tfirst\n1\tsecond\n");
  auto labels = f.dir.write("labels.tsv", "0\t1\n2\t0\n2\t1\n");
  auto ls = np::load_labels(net, labels, names);
  EXPECT_EQ(ls.names, (std::vector<std::string>{"first", "second"}));
  EXPECT_EQ(ls.of_node[0], (std::vector<int>{1}));
  EXPECT_TRUE(ls.of_node[1].empty());
  EXPECT_EQ(ls.of_node[2], (std::vector<int>{0, 1}));
  auto gap = f.dir.write("gap.tsv", "0\tfirst\n2\tthird\n");
  EXPECT_THROW(np::load_labels(net, labels, gap), np::Error);
  auto empty = f.dir.write("empty.tsv", "0\t\n");
  EXPECT_THROW(np::load_labels(net, labels, empty), np::Error);
}

TEST(SampleNeighbors, AllWhenDegreeBelowK) {
  auto net = np::testing::random_network(10, 50, 8, 0.0, 1);
  net.set_edges({{0, 1}, {0, 2}, {0, 3}});
  auto s = np::sample_neighbors(net, 0, 5, 9);
  std::sort(s.begin(), s.end());
  EXPECT_EQ(s, (std::vector<np::NodeIndex>{1, 2, 3}));
  EXPECT_TRUE(np::sample_neighbors(net, 5, 5, 9).empty());
  EXPECT_THROW(np::sample_neighbors(net, 10, 5, 9), np::Error);
}

TEST(SampleNeighbors, HighDegreeIsSeededAndWithoutReplacement) {
  auto net = np::testing::random_network(101, 50, 8, 0.0, 1);
  std::vector<np::Edge> star;
  for (np::NodeIndex v = 1; v <= 100; ++v) star.emplace_back(0, v);
  net.set_edges(star);
  auto a = np::sample_neighbors(net, 0, 5, 123);
  auto b = np::sample_neighbors(net, 0, 5, 123);
  EXPECT_EQ(a, b);
  EXPECT_EQ(std::set<np::NodeIndex>(a.begin(), a.end()).size(), 5u);
  // Roughly uniform coverage over many seeds.
  std::vector<int> hits(101, 0);
  for (std::uint64_t seed = 0; seed < 4000; ++seed) {
    for (auto u : np::sample_neighbors(net, 0, 5, seed)) ++hits[u];
  }
  for (np::NodeIndex v = 1; v <= 100; ++v) EXPECT_NEAR(hits[v], 200, 60) << v;
  std::vector<np::NodeIndex> excl{1, 2, 3};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (auto u : np::sample_neighbors(net, 0, 5, seed, excl)) EXPECT_GT(u, 3u);
  }
}

TEST(EgoBatch, IsolatedNodeHasBlankNeighbors) {
  auto net = np::testing::random_network(4, 50, 8, 0.0, 2);
  std::vector<np::NodeIndex> centers{3};
  auto b = np::make_ego_batch(net, centers, {});
  EXPECT_EQ(b.neighbor_valid, std::vector<std::uint8_t>(5, 0));
  EXPECT_TRUE(std::all_of(b.neighbor_ids.begin(), b.neighbor_ids.end(), [](auto id) { return id == np::special::kPad; }));
  EXPECT_TRUE(std::all_of(b.mlm_labels.begin(), b.mlm_labels.end(), [](auto l) { return l == np::kLabelSentinel; }));
}

TEST(EgoBatch, ShapesAndValidityInvariant) {
  auto net = np::testing::random_network(30, 50, 32, 0.15, 3);
  std::vector<np::NodeIndex> centers{0, 7};
  np::EgoBatchOptions opts;
  opts.mlm = true;
  opts.vocab_size = 50;
  opts.seed = 5;
  const auto before = net.adjacency;
  auto b = np::make_ego_batch(net, centers, opts);
  EXPECT_EQ(net.adjacency, before);
  EXPECT_EQ(b.center_ids.size(), 2u * 32u);
  EXPECT_EQ(b.neighbor_ids.size(), 2u * 5u * 32u);
  EXPECT_EQ(b.neighbor_valid.size(), 10u);
  for (std::size_t s = 0; s < 10; ++s) {
    bool all_pad = true;
    for (std::size_t t = 0; t < 32; ++t) all_pad = all_pad && b.neighbor_ids[s * 32 + t] == np::special::kPad;
    EXPECT_EQ(b.neighbor_valid[s] == 0, all_pad);
  }
  // Neighbors never masked: their ids equal the network's.
  for (std::size_t s = 0; s < 10; ++s) {
    if (!b.neighbor_valid[s]) continue;
    const auto& ref = net.tokens[b.neighbor_nodes[s]].ids;
    EXPECT_TRUE(std::equal(ref.begin(), ref.end(), b.neighbor_ids.begin() + static_cast<std::ptrdiff_t>(s * 32)));
  }
  auto again = np::make_ego_batch(net, centers, opts);
  EXPECT_EQ(again.center_ids, b.center_ids);
  EXPECT_EQ(again.neighbor_ids, b.neighbor_ids);
  std::vector<np::NodeIndex> bad{99};
  EXPECT_THROW(np::make_ego_batch(net, bad, opts), np::Error);
  EXPECT_THROW(np::make_ego_batch(net, std::vector<np::NodeIndex>{}, opts), np::Error);
}

TEST(SplitEdges, CountsAndDisjointness) {
  auto net = np::testing::random_network(40, 50, 8, 0.0, 4);
  std::vector<np::Edge> edges;
  for (np::NodeIndex i = 0; edges.size() < 100; ++i) edges.emplace_back(i % 40, (i * 7 + 1 + i / 40) % 40);
  net.set_edges(edges);
  const std::size_t total = net.edge_count();
  auto split = np::split_edges(net, 0.1, 8);
  const auto expected = static_cast<std::size_t>(0.1 * static_cast<double>(total) + 0.5);
  EXPECT_EQ(split.held_out.size(), expected);
  EXPECT_EQ(split.train.edge_count(), total - expected);
  for (auto [u, v] : split.held_out) {
    EXPECT_FALSE(split.train.has_edge(u, v));
    EXPECT_FALSE(split.train.has_edge(v, u));
  }
  for (np::NodeIndex u = 0; u < split.train.size(); ++u) {
    for (auto v : split.train.adjacency[u]) EXPECT_TRUE(split.train.has_edge(v, u));
  }
  EXPECT_THROW(np::split_edges(net, 0.0, 1), np::Error);
  EXPECT_THROW(np::split_edges(net, 0.5, 1), np::Error);
}

TEST(SplitEdges, HundredEdgeGraph) {
  auto net = np::testing::random_network(101, 50, 8, 0.0, 4);
  std::vector<np::Edge> star;
  for (np::NodeIndex v = 1; v <= 100; ++v) star.emplace_back(0, v);
  net.set_edges(star);
  auto split = np::split_edges(net, 0.1, 3);
  EXPECT_EQ(split.held_out.size(), 10u);
  EXPECT_EQ(split.train.edge_count(), 90u);
}

}  // namespace
