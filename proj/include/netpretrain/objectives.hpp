// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "netpretrain/autodiff/ops.hpp"
#include "netpretrain/graphformer.hpp"
#include "netpretrain/masking.hpp"
#include "netpretrain/netdata.hpp"
#include "netpretrain/optim.hpp"

namespace netpretrain {

enum class Objective { kJoint, kNmlmOnly, kMnpOnly };

inline Objective parse_objective(const std::string& s) {
  if (s == "joint") return Objective::kJoint;
  if (s == "nmlm-only") return Objective::kNmlmOnly;
  if (s == "mnp-only") return Objective::kMnpOnly;
  throw Error("unknown objective '" + s + "' (expected joint | nmlm-only | mnp-only)");
}

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::kJoint: return "joint";
    case Objective::kNmlmOnly: return "nmlm-only";
    case Objective::kMnpOnly: return "mnp-only";
  }
  return "joint";
}

template <class T>
struct LossWithStats {
  ag::Tensor<T> loss;
  std::size_t count = 0;    // masked positions / positive pairs
  std::size_t correct = 0;  // argmax hits

  double accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0; }
};

/// Mean cross-entropy of the tied MLM head, logits = h E^T + b, over masked
/// positions only. token_states is [B x seq_len x d]; labels is [B x
/// label_stride] with the sentinel at unmasked positions.
template <class T>
LossWithStats<T> nmlm_loss(ag::Tape<T>& tape, const ag::Tensor<T>& token_states, std::size_t seq_len,
                           std::span<const TokenId> labels, std::size_t label_stride, const ModelParams<T>& params) {
  const std::size_t B = token_states.size() / (seq_len * token_states.cols());
  if (labels.size() != B * label_stride || seq_len > label_stride) {
    throw DimensionError("nmlm_loss: labels do not align with token states " + ag::to_string(token_states.shape()));
  }
  std::vector<std::size_t> rows;
  std::vector<std::int32_t> targets;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < label_stride; ++t) {
      auto y = labels[b * label_stride + t];
      if (y == kLabelSentinel) continue;
      if (t >= seq_len) throw Error("nmlm_loss: masked position beyond the encoded length");
      rows.push_back(b * seq_len + t);
      targets.push_back(y);
    }
  }
  LossWithStats<T> out;
  out.count = rows.size();
  if (rows.empty()) {
    out.loss = ag::Tensor<T>::scalar(T(0));
    return out;
  }
  auto h = ag::gather_rows(tape, token_states, rows);
  auto logits = ag::add_bias(tape, ag::matmul_nt(tape, h, params.token_embedding), params.mlm_bias);
  const std::size_t V = logits.cols();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const T* row = logits.ptr() + r * V;
    auto best = static_cast<std::int32_t>(std::max_element(row, row + V) - row);
    out.correct += best == targets[r];
  }
  out.loss = ag::cross_entropy_logits(tape, logits, targets);
  return out;
}

using PairList = std::vector<std::pair<std::size_t, std::size_t>>;

/// In-batch contrastive link loss. For each positive pair (j, k) the score
/// row is [h_j.h_k ; h_j.h_u for every other batch member u not in {j, k}]
/// with the positive at index 0; the loss is the mean cross-entropy over
/// pairs. Scores are raw dot products. `is_false_negative(j, u)`, when set,
/// drops u from j's negatives.
template <class T>
LossWithStats<T> mnp_loss(ag::Tape<T>& tape, const ag::Tensor<T>& reps, const PairList& pairs,
                          const std::function<bool(std::size_t, std::size_t)>& is_false_negative = {}) {
  const std::size_t N = reps.rows();
  if (N < 2) throw Error("mnp_loss: batch must hold at least 2 representations");
  if (pairs.empty()) throw Error("mnp_loss: no positive pairs");
  for (auto [j, k] : pairs) {
    if (j >= N || k >= N || j == k) throw Error("mnp_loss: invalid positive pair");
  }
  auto scores = ag::matmul_nt(tape, reps, reps);
  LossWithStats<T> out;
  out.count = pairs.size();
  ag::Tensor<T> total;
  std::vector<std::int32_t> target0{0};
  for (auto [j, k] : pairs) {
    std::vector<std::size_t> idx{j * N + k};
    for (std::size_t u = 0; u < N; ++u) {
      if (u == j || u == k) continue;
      if (is_false_negative && is_false_negative(j, u)) continue;
      idx.push_back(j * N + u);
    }
    auto row = ag::gather_elements(tape, scores, idx, {1, idx.size()});
    bool hit = true;
    for (std::size_t c = 1; c < idx.size(); ++c) hit = hit && row[0] >= row[c];
    out.correct += hit;
    auto l = ag::cross_entropy_logits(tape, row, target0);
    total = total.defined() ? ag::add(tape, total, l) : l;
  }
  out.loss = ag::scale(tape, total, T(1) / static_cast<T>(pairs.size()));
  return out;
}

/// Exact masked-node posterior under a uniform node prior and conditionally
/// independent neighbors: p(v = c | N) is proportional to the product over
/// neighbors k of exp(h_c . h_k), normalized over `candidates`. Evaluated
/// literally as a product (each factor shifted by its per-neighbor max, which
/// cancels in the normalization). Empty neighbor set gives a uniform vector.
inline std::vector<double> mnp_posterior_bruteforce(const std::vector<std::vector<double>>& reps,
                                                    std::span<const std::size_t> neighbors,
                                                    std::span<const std::size_t> candidates) {
  std::vector<double> post(candidates.size(), 1.0);
  if (candidates.empty()) return post;
  auto dot = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t i = 0; i < reps[a].size(); ++i) s += reps[a][i] * reps[b][i];
    return s;
  };
  for (auto k : neighbors) {
    double mx = -std::numeric_limits<double>::infinity();
    for (auto c : candidates) mx = std::max(mx, dot(c, k));
    for (std::size_t i = 0; i < candidates.size(); ++i) post[i] *= std::exp(dot(candidates[i], k) - mx);
  }
  double z = 0.0;
  for (auto p : post) z += p;
  for (auto& p : post) p /= z;
  return post;
}

/// One pretraining example per (center, partner) edge: the batch holds all
/// centers followed by all partners, positives are (i, B + i), and neither
/// endpoint may see the other among its sampled neighbors.
inline EgoBatch make_pretrain_batch(const TextRichNetwork& net, std::span<const Edge> pairs,
                                    const EgoBatchOptions& opts) {
  const std::size_t B = pairs.size();
  std::vector<NodeIndex> centers(2 * B);
  std::vector<std::vector<NodeIndex>> exclusions(2 * B);
  for (std::size_t i = 0; i < B; ++i) {
    centers[i] = pairs[i].first;
    centers[B + i] = pairs[i].second;
    exclusions[i] = {pairs[i].second};
    exclusions[B + i] = {pairs[i].first};
  }
  auto batch = make_ego_batch(net, centers, opts, exclusions);
  for (std::size_t i = 0; i < B; ++i) batch.positive_pairs.emplace_back(i, B + i);
  return batch;
}

struct PretrainStepOutput {
  double nmlm_loss = 0.0;
  double mnp_loss = 0.0;
  double total = 0.0;
  double masked_acc = 0.0;
  double inbatch_prec1 = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

template <class T>
struct PretrainLosses {
  LossWithStats<T> nmlm;
  LossWithStats<T> mnp;
  ag::Tensor<T> total;
};

/// Forward pass of both objectives; total = L_NMLM + L_MNP with disabled
/// objectives contributing nothing.
template <class T>
PretrainLosses<T> pretrain_losses(ag::Tape<T>& tape, const EgoBatch& batch, const ModelParams<T>& params,
                                  Objective objective, const EncodeOptions& enc = {}) {
  auto encoded = encode_batch(tape, batch, params, enc);
  PretrainLosses<T> out;
  if (objective != Objective::kMnpOnly) {
    out.nmlm = nmlm_loss(tape, encoded.token_states, encoded.seq_len, batch.mlm_labels, batch.seq_len, params);
  } else {
    out.nmlm.loss = ag::Tensor<T>::scalar(T(0));
  }
  if (objective != Objective::kNmlmOnly) {
    out.mnp = mnp_loss(tape, encoded.node_reps, batch.positive_pairs);
  } else {
    out.mnp.loss = ag::Tensor<T>::scalar(T(0));
  }
  out.total = ag::add(tape, out.nmlm.loss, out.mnp.loss);
  return out;
}

/// Forward, backward on the summed loss, and one AdamW update.
template <class T>
PretrainStepOutput joint_step(const EgoBatch& batch, ModelParams<T>& params, AdamState<T>& optimizer,
                              const AdamWConfig& adam, double lr, Objective objective,
                              std::uint64_t dropout_seed) {
  ag::Tape<T> tape;
  auto losses = pretrain_losses(tape, batch, params, objective, EncodeOptions{true, dropout_seed, false});
  PretrainStepOutput out;
  out.nmlm_loss = static_cast<double>(losses.nmlm.loss.item());
  out.mnp_loss = static_cast<double>(losses.mnp.loss.item());
  out.total = static_cast<double>(losses.total.item());
  out.masked_acc = losses.nmlm.accuracy();
  out.inbatch_prec1 = losses.mnp.accuracy();
  out.lr = lr;
  if (!std::isfinite(out.total)) throw NonFiniteError("non-finite pretraining loss");
  tape.backward(losses.total);
  auto named = params.named();
  out.grad_norm = adamw_update(named, optimizer, lr, adam);
  return out;
}

}  // namespace netpretrain
