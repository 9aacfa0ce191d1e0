// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "netpretrain/masking.hpp"
#include "netpretrain/tokenizer.hpp"
#include "support/fixtures.hpp"

namespace np = netpretrain;
using np::special::kCls;
using np::special::kPad;
using np::special::kUnk;

namespace {

TEST(BuildVocab, FrequencyThenLexicalOrder) {
  auto v = np::build_vocab(std::vector<std::string>{"a b a"}, 1, 100);
  EXPECT_EQ(v.size(), 7u);
  EXPECT_EQ(v.id("a"), 5);
  EXPECT_EQ(v.id("b"), 6);
}

TEST(BuildVocab, MinCountDropsRareTokens) {
  auto v = np::build_vocab(std::vector<std::string>{"a b a"}, 2, 100);
  EXPECT_EQ(v.id("a"), 5);
  EXPECT_EQ(v.id("b"), kUnk);
}

TEST(BuildVocab, TiesBrokenLexically) {
  auto v = np::build_vocab(std::vector<std::string>{"y x"}, 1, 100);
  EXPECT_EQ(v.id("x"), 5);
  EXPECT_EQ(v.id("y"), 6);
}

TEST(BuildVocab, MaxSizeAndEmptyCorpus) {
  auto v = np::build_vocab(std::vector<std::string>{"c c c b b a"}, 1, 2);
  EXPECT_EQ(v.size(), 7u);
  EXPECT_EQ(v.id("c"), 5);
  EXPECT_EQ(v.id("b"), 6);
  EXPECT_EQ(v.id("a"), kUnk);
  EXPECT_THROW(np::build_vocab(std::vector<std::string>{}, 1, 10), np::Error);
}

TEST(BuildVocab, ReservedIdsFixed) {
  auto v = np::build_vocab(std::vector<std::string>{"[mask] [pad] hello"}, 1, 10);
  EXPECT_EQ(v.token(0), "[PAD]");
  EXPECT_EQ(v.token(1), "[CLS]");
  EXPECT_EQ(v.token(2), "[SEP]");
  EXPECT_EQ(v.token(3), "[MASK]");
  EXPECT_EQ(v.token(4), "[UNK]");
  for (std::size_t i = 5; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(static_cast<np::TokenId>(i))), i);
}

TEST(Normalize, LowercaseAndPunctuationSplit) {
  EXPECT_EQ(np::normalize_tokens("Hello, World!"), (std::vector<std::string>{"hello", ",", "world", "!"}));
  EXPECT_EQ(np::normalize("  Graph-Based\tModels "), "graph - based models");
}

TEST(Encode, EmptyTextIsClsPlusPadding) {
  np::Vocab v;
  auto s = np::encode("", v, 6);
  EXPECT_EQ(s.ids, (std::vector<np::TokenId>{kCls, kPad, kPad, kPad, kPad, kPad}));
  EXPECT_EQ(s.attention, (std::vector<std::uint8_t>{1, 0, 0, 0, 0, 0}));
}

TEST(Encode, KnownAndUnknownTokens) {
  auto v = np::build_vocab(std::vector<std::string>{"a b"}, 1, 10);
  auto s = np::encode("a b", v, 4);
  EXPECT_EQ(s.ids, (std::vector<np::TokenId>{kCls, 5, 6, kPad}));
  EXPECT_EQ(np::encode("zzz", v, 3).ids[1], kUnk);
  EXPECT_THROW(np::encode("a", v, 1), np::Error);
}

TEST(Encode, TruncatesToMaxLen) {
  std::string text;
  for (int i = 0; i < 40; ++i) text += "w" + std::to_string(i) + " ";
  auto v = np::build_vocab(std::vector<std::string>{text}, 1, 100);
  auto s = np::encode(text, v, 32);
  EXPECT_EQ(s.ids.size(), 32u);
  EXPECT_EQ(s.length(), 32u);
  EXPECT_EQ(v.token(s.ids[31]), "w30");
}

TEST(Decode, SkipsSpecialsAndRejectsOutOfRange) {
  auto v = np::build_vocab(std::vector<std::string>{"a b"}, 1, 10);
  np::TokenSequence s{{kCls, 5, 6, kPad}, {1, 1, 1, 0}};
  EXPECT_EQ(np::decode(s, v), "a b");
  np::TokenSequence specials{{kCls, kPad, np::special::kMask}, {1, 0, 0}};
  EXPECT_EQ(np::decode(specials, v), "");
  np::TokenSequence bad{{kCls, 99}, {1, 1}};
  EXPECT_THROW(np::decode(bad, v), np::Error);
}

TEST(Property, RoundTripAndIdRange) {
  std::mt19937 rng(3);
  const std::vector<std::string> words{"graph", "Node", "text,", "rich", "MODEL", "train!", "x"};
  std::vector<std::string> corpus;
  for (int d = 0; d < 50; ++d) {
    std::string t;
    for (int w = 0; w < 8; ++w) t += words[rng() % words.size()] + (rng() % 2 ? " " : "  ");
    corpus.push_back(t);
  }
  auto v = np::build_vocab(corpus, 1, 1000);
  for (const auto& t : corpus) {
    auto s = np::encode(t, v, 64);
    EXPECT_EQ(s.ids[0], kCls);
    for (std::size_t i = 0; i < s.ids.size(); ++i) {
      EXPECT_LT(static_cast<std::size_t>(s.ids[i]), v.size());
      if (!s.attention[i]) EXPECT_EQ(s.ids[i], kPad);
    }
    EXPECT_EQ(np::decode(s, v), np::normalize(t));
  }
  // Non-ASCII input is accepted and encodes deterministically.
  auto a = np::encode("caf\xc3\xa9 \xe2\x9c\x93 ok", v, 8);
  auto b = np::encode("caf\xc3\xa9 \xe2\x9c\x93 ok", v, 8);
  EXPECT_EQ(a.ids, b.ids);
}

TEST(VocabFile, SaveLoadRoundTrip) {
  np::testing::ScratchDir dir("vocab");
  auto v = np::build_vocab(std::vector<std::string>{"b a c a"}, 1, 10);
  v.save(dir.file("vocab.txt"));
  auto w = np::Vocab::load(dir.file("vocab.txt"));
  ASSERT_EQ(w.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(w.token(static_cast<np::TokenId>(i)), v.token(static_cast<np::TokenId>(i)));
  dir.write("bad.txt", "[PAD]\n[SEP]\n");
  EXPECT_THROW(np::Vocab::load(dir.file("bad.txt")), np::Error);
}

// Masking

np::TokenSequence full_sequence(std::size_t len) {
  np::TokenSequence s;
  s.ids.assign(len, kPad);
  s.attention.assign(len, 0);
  s.ids[0] = kCls;
  s.attention[0] = 1;
  for (std::size_t i = 1; i < len; ++i) {
    s.ids[i] = static_cast<np::TokenId>(5 + i);
    s.attention[i] = 1;
  }
  return s;
}

TEST(MaskTokens, NeverTouchesClsOrPadAndIsSeeded) {
  auto s = full_sequence(10);
  s.ids[8] = kPad;
  s.ids[9] = kPad;
  s.attention[8] = 0;
  s.attention[9] = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto m = np::mask_tokens(s, 0.5, 100, seed);
    EXPECT_EQ(m.sequence.ids[0], kCls);
    EXPECT_EQ(m.labels[0], np::kLabelSentinel);
    EXPECT_EQ(m.labels[8], np::kLabelSentinel);
    EXPECT_EQ(m.labels[9], np::kLabelSentinel);
    EXPECT_EQ(m.sequence.ids[9], kPad);
    for (auto p : m.plan.positions) {
      EXPECT_GE(p, 1u);
      EXPECT_LT(p, 8u);
      EXPECT_EQ(m.labels[p], s.ids[p]);
    }
  }
  auto a = np::mask_tokens(s, 0.15, 100, 42);
  auto b = np::mask_tokens(s, 0.15, 100, 42);
  EXPECT_EQ(a.sequence.ids, b.sequence.ids);
  EXPECT_EQ(a.labels, b.labels);
}

TEST(MaskTokens, RatioBoundsAndNoMaskablePositions) {
  auto s = full_sequence(10);
  EXPECT_THROW(np::mask_tokens(s, 0.0, 100, 1), np::Error);
  EXPECT_THROW(np::mask_tokens(s, 1.0, 100, 1), np::Error);
  auto m = np::mask_tokens(s, 1e-12, 100, 1);
  EXPECT_EQ(m.sequence.ids, s.ids);
  for (auto l : m.labels) EXPECT_EQ(l, np::kLabelSentinel);
  auto empty = np::encode("", np::Vocab{}, 6);
  auto e = np::mask_tokens(empty, 0.5, 100, 1);
  EXPECT_EQ(e.sequence.ids, empty.ids);
  for (auto l : e.labels) EXPECT_EQ(l, np::kLabelSentinel);
}

TEST(MaskTokens, MonteCarloPolicy) {
  auto s = full_sequence(33);
  np::Rng rng(11);
  std::size_t maskable = 0, selected = 0, to_mask = 0, to_random = 0, kept = 0;
  while (maskable < 200000) {
    auto m = np::mask_tokens(s, 0.15, 1000, rng);
    maskable += 32;
    for (std::size_t i = 0; i < m.plan.positions.size(); ++i) {
      ++selected;
      auto p = m.plan.positions[i];
      switch (m.plan.kinds[i]) {
        case np::MaskKind::kMask:
          ++to_mask;
          EXPECT_EQ(m.sequence.ids[p], np::special::kMask);
          break;
        case np::MaskKind::kRandom:
          ++to_random;
          EXPECT_GE(m.sequence.ids[p], np::special::kCount);
          EXPECT_LT(m.sequence.ids[p], 1000);
          break;
        case np::MaskKind::kKeep:
          ++kept;
          EXPECT_EQ(m.sequence.ids[p], s.ids[p]);
          break;
      }
    }
  }
  const double frac = static_cast<double>(selected) / static_cast<double>(maskable);
  EXPECT_NEAR(frac, 0.15, 0.02);
  const double n = static_cast<double>(selected);
  EXPECT_NEAR(to_mask / n, 0.8, 0.02);
  EXPECT_NEAR(to_random / n, 0.1, 0.02);
  EXPECT_NEAR(kept / n, 0.1, 0.02);
}

}  // namespace
