// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "netpretrain/netdata.hpp"

namespace netpretrain::testing {

/// In-memory network with random token ids and random lengths. Node i has
/// external id i.
inline TextRichNetwork random_network(std::size_t nodes, std::size_t vocab_size, std::size_t max_len,
                                      double edge_p, unsigned seed) {
  std::mt19937 rng(seed);
  TextRichNetwork net;
  std::uniform_int_distribution<TokenId> tok(special::kCount, static_cast<TokenId>(vocab_size - 1));
  std::uniform_int_distribution<std::size_t> len(0, max_len - 1);
  for (std::size_t i = 0; i < nodes; ++i) {
    net.ids.push_back(i);
    net.index.emplace(i, i);
    net.texts.emplace_back();
    TokenSequence seq;
    seq.ids.assign(max_len, special::kPad);
    seq.attention.assign(max_len, 0);
    seq.ids[0] = special::kCls;
    seq.attention[0] = 1;
    const std::size_t n = len(rng);
    for (std::size_t t = 1; t <= n; ++t) {
      seq.ids[t] = tok(rng);
      seq.attention[t] = 1;
    }
    net.tokens.push_back(std::move(seq));
  }
  std::bernoulli_distribution coin(edge_p);
  std::vector<Edge> edges;
  for (std::size_t u = 0; u < nodes; ++u) {
    for (std::size_t v = u + 1; v < nodes; ++v) {
      if (coin(rng)) edges.emplace_back(u, v);
    }
  }
  net.set_edges(edges);
  return net;
}

/// Network over the given texts (node i has external id i) tokenized with
/// `vocab`.
inline TextRichNetwork text_network(const std::vector<std::string>& texts, const std::vector<Edge>& edges,
                                    const Vocab& vocab, std::size_t max_len) {
  TextRichNetwork net;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    net.ids.push_back(i);
    net.index.emplace(i, i);
    net.texts.push_back(texts[i]);
    net.tokens.push_back(encode(texts[i], vocab, max_len));
  }
  net.set_edges(edges);
  return net;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() / ("netpretrain_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  std::string write(const std::string& name, const std::string& content) const {
    auto p = file(name);
    std::ofstream(p) << content;
    return p;
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace netpretrain::testing
