// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "netpretrain/autodiff/ops.hpp"
#include "netpretrain/random.hpp"
#include "netpretrain/tokenizer.hpp"

namespace netpretrain {

inline constexpr TokenId kLabelSentinel = ag::kIgnoreIndex;
inline constexpr double kDefaultMaskRatio = 0.15;

enum class MaskKind : std::uint8_t { kMask, kRandom, kKeep };

struct MaskingPlan {
  std::vector<std::size_t> positions;
  std::vector<MaskKind> kinds;
};

struct MaskedSequence {
  TokenSequence sequence;
  std::vector<TokenId> labels;  // original id at selected positions, sentinel elsewhere
  MaskingPlan plan;
};

/// BERT-style corruption: every real non-[CLS] position is selected with
/// probability `ratio`; a selected position becomes [MASK] (80%), a uniform
/// random non-reserved token (10%) or stays unchanged (10%).
inline MaskedSequence mask_tokens(const TokenSequence& seq, double ratio, std::size_t vocab_size, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error("mask_tokens: ratio must lie in (0, 1)");
  MaskedSequence out{seq, std::vector<TokenId>(seq.ids.size(), kLabelSentinel), {}};
  const bool can_randomize = vocab_size > static_cast<std::size_t>(special::kCount);
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (!seq.attention[i] || seq.ids[i] == special::kCls || seq.ids[i] == special::kPad) continue;
    if (uniform_real(rng) >= ratio) continue;
    out.labels[i] = seq.ids[i];
    out.plan.positions.push_back(i);
    double r = uniform_real(rng);
    if (r < 0.8) {
      out.sequence.ids[i] = special::kMask;
      out.plan.kinds.push_back(MaskKind::kMask);
    } else if (r < 0.9 && can_randomize) {
      out.sequence.ids[i] = static_cast<TokenId>(special::kCount +
                                                 uniform_index(rng, vocab_size - special::kCount));
      out.plan.kinds.push_back(MaskKind::kRandom);
    } else {
      out.plan.kinds.push_back(MaskKind::kKeep);
    }
  }
  return out;
}

inline MaskedSequence mask_tokens(const TokenSequence& seq, double ratio, std::size_t vocab_size,
                                  std::uint64_t seed) {
  Rng rng(seed);
  return mask_tokens(seq, ratio, vocab_size, rng);
}

}  // namespace netpretrain
