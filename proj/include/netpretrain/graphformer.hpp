// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// GNN-nested transformer encoder. Every layer first aggregates the [CLS]
// states of a node's ego subgraph into a virtual token z, prepends z to the
// token states as an extra key/value, and then runs attention (queries from
// real tokens only), residual + layer norm, MLP, residual + layer norm.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "netpretrain/autodiff/ops.hpp"
#include "netpretrain/netdata.hpp"
#include "netpretrain/random.hpp"
#include "netpretrain/tokenizer.hpp"

namespace netpretrain {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t max_len = kDefaultMaxLen;
  std::size_t hidden = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  double dropout = 0.1;
  double ln_eps = 1e-12;
  double init_std = 0.02;
  /// Whether a node's own [CLS] is among the aggregator's keys. When false
  /// only neighbors are attended and an isolated node aggregates to zero.
  bool aggregate_self = true;

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(special::kCount)) throw Error("model.vocab_size must exceed the reserved ids");
    if (max_len < 2) throw Error("model.max_len must be at least 2");
    if (layers < 1) throw Error("model.layers must be at least 1");
    if (heads == 0 || hidden % heads != 0) throw Error("model.hidden must be divisible by model.heads");
    if (mlp_ratio == 0) throw Error("model.mlp_ratio must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw Error("model.dropout must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"max_len", c.max_len},   {"hidden", c.hidden},
       {"layers", c.layers},         {"heads", c.heads},       {"mlp_ratio", c.mlp_ratio},
       {"dropout", c.dropout},       {"ln_eps", c.ln_eps},     {"init_std", c.init_std},
       {"aggregate_self", c.aggregate_self}};
}

template <class T>
struct LayerParams {
  ag::Tensor<T> graph_w, graph_b;
  ag::Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  ag::Tensor<T> ln1_g, ln1_b;
  ag::Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  ag::Tensor<T> ln2_g, ln2_b;
};

template <class T>
using NamedTensors = std::vector<std::pair<std::string, ag::Tensor<T>>>;

/// All encoder weights plus the MLM output bias. The MLM head reuses the
/// token embedding table.
template <class T>
struct ModelParams {
  ModelConfig config;
  ag::Tensor<T> token_embedding;     // [V x d]
  ag::Tensor<T> position_embedding;  // [T x d]
  ag::Tensor<T> embed_ln_g, embed_ln_b;
  std::vector<LayerParams<T>> layers;
  ag::Tensor<T> mlm_bias;  // [V]

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, {0x696e6974ULL}));
    const std::size_t d = cfg.hidden;
    auto normal_t = [&](ag::Shape shape) {
      std::vector<T> v(ag::numel(shape));
      for (auto& x : v) x = static_cast<T>(normal(rng, 0.0, cfg.init_std));
      return ag::Tensor<T>(std::move(shape), std::move(v), true);
    };
    auto constant = [](ag::Shape shape, T value) {
      return ag::Tensor<T>(shape, std::vector<T>(ag::numel(shape), value), true);
    };
    ModelParams p;
    p.config = cfg;
    p.token_embedding = normal_t({cfg.vocab_size, d});
    p.position_embedding = normal_t({cfg.max_len, d});
    p.embed_ln_g = constant({d}, T(1));
    p.embed_ln_b = constant({d}, T(0));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      LayerParams<T> lp;
      lp.graph_w = normal_t({d, d});
      lp.graph_b = constant({d}, T(0));
      lp.wq = normal_t({d, d});
      lp.bq = constant({d}, T(0));
      lp.wk = normal_t({d, d});
      lp.bk = constant({d}, T(0));
      lp.wv = normal_t({d, d});
      lp.bv = constant({d}, T(0));
      lp.wo = normal_t({d, d});
      lp.bo = constant({d}, T(0));
      lp.ln1_g = constant({d}, T(1));
      lp.ln1_b = constant({d}, T(0));
      lp.mlp_w1 = normal_t({d, cfg.mlp_ratio * d});
      lp.mlp_b1 = constant({cfg.mlp_ratio * d}, T(0));
      lp.mlp_w2 = normal_t({cfg.mlp_ratio * d, d});
      lp.mlp_b2 = constant({d}, T(0));
      lp.ln2_g = constant({d}, T(1));
      lp.ln2_b = constant({d}, T(0));
      p.layers.push_back(std::move(lp));
    }
    p.mlm_bias = constant({cfg.vocab_size}, T(0));
    return p;
  }

  /// Stable, ordered parameter list. Handles share storage with `*this`.
  NamedTensors<T> named() const {
    NamedTensors<T> out{{"embeddings.token", token_embedding},
                        {"embeddings.position", position_embedding},
                        {"embeddings.ln.gain", embed_ln_g},
                        {"embeddings.ln.bias", embed_ln_b}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& lp = layers[l];
      const std::string pre = "layer." + std::to_string(l) + ".";
      out.insert(out.end(), {{pre + "graph.weight", lp.graph_w},
                             {pre + "graph.bias", lp.graph_b},
                             {pre + "attn.query.weight", lp.wq},
                             {pre + "attn.query.bias", lp.bq},
                             {pre + "attn.key.weight", lp.wk},
                             {pre + "attn.key.bias", lp.bk},
                             {pre + "attn.value.weight", lp.wv},
                             {pre + "attn.value.bias", lp.bv},
                             {pre + "attn.output.weight", lp.wo},
                             {pre + "attn.output.bias", lp.bo},
                             {pre + "ln1.gain", lp.ln1_g},
                             {pre + "ln1.bias", lp.ln1_b},
                             {pre + "mlp.in.weight", lp.mlp_w1},
                             {pre + "mlp.in.bias", lp.mlp_b1},
                             {pre + "mlp.out.weight", lp.mlp_w2},
                             {pre + "mlp.out.bias", lp.mlp_b2},
                             {pre + "ln2.gain", lp.ln2_g},
                             {pre + "ln2.bias", lp.ln2_b}});
    }
    out.emplace_back("mlm.bias", mlm_bias);
    return out;
  }

  /// Deep copy, optionally converting the scalar type.
  template <class U = T>
  ModelParams<U> clone_as() const {
    auto fresh = ModelParams<U>::skeleton(config);
    auto src = named();
    auto dst = fresh.named();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto& d = dst[i].second;
      const auto& s = src[i].second;
      for (std::size_t j = 0; j < s.size(); ++j) d[j] = static_cast<U>(s[j]);
    }
    return fresh;
  }

  ModelParams clone() const { return clone_as<T>(); }

  /// Zero-filled parameters with the configured shapes.
  static ModelParams skeleton(const ModelConfig& cfg) {
    ModelConfig zero_init = cfg;
    zero_init.init_std = 0.0;
    return init(zero_init, 0);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : named()) {
      auto tt = t;
      tt.zero_grad();
    }
  }
};

// ---------------------------------------------------------------------------
// Layer building blocks
// ---------------------------------------------------------------------------

/// Virtual token for each center: single-head scaled dot-product attention
/// with the center [CLS] as query and {center} U {valid neighbors} [CLS]
/// states as keys/values, followed by the layer's linear projection.
/// center_cls [B x d], neighbor_cls [B x K x d], validity [B x K].
template <class T>
ag::Tensor<T> graph_aggregate(ag::Tape<T>& tape, const ag::Tensor<T>& center_cls, const ag::Tensor<T>& neighbor_cls,
                              std::span<const std::uint8_t> validity, const LayerParams<T>& layer,
                              bool aggregate_self = true) {
  const std::size_t B = center_cls.rows();
  const std::size_t d = center_cls.cols();
  if (B == 0 || neighbor_cls.cols() != d || neighbor_cls.rows() % B != 0 ||
      validity.size() != neighbor_cls.rows()) {
    throw DimensionError("graph_aggregate: center " + ag::to_string(center_cls.shape()) + " neighbors " +
                         ag::to_string(neighbor_cls.shape()) + " validity " + std::to_string(validity.size()));
  }
  const std::size_t K = neighbor_cls.rows() / B;
  // Rows of `stacked`: all centers, then all neighbor slots.
  auto stacked = ag::concat_rows(tape, center_cls, ag::reshape(tape, neighbor_cls, {B * K, d}));
  std::vector<std::size_t> order;
  std::vector<ag::AttentionGroup> groups;
  for (std::size_t b = 0; b < B; ++b) {
    ag::AttentionGroup g;
    g.q_begin = order.size();
    g.k_begin = order.size();
    g.q_count = 1;
    order.push_back(b);
    for (std::size_t k = 0; k < K; ++k) {
      if (validity[b * K + k]) order.push_back(B + b * K + k);
    }
    g.k_count = order.size() - g.k_begin;
    groups.push_back(g);
  }
  auto nodes = ag::gather_rows(tape, stacked, order);
  auto mixed = ag::grouped_attention(tape, nodes, nodes, nodes, groups, {}, {1, !aggregate_self});
  std::vector<std::size_t> center_rows;
  for (const auto& g : groups) center_rows.push_back(g.q_begin);
  return ag::linear(tape, ag::gather_rows(tape, mixed, center_rows), layer.graph_w, layer.graph_b);
}

/// Multi-head attention whose keys/values are Concate(z, H) per sequence and
/// whose queries come from H only, so the output has exactly T rows per
/// sequence. H is [S*T x d] (or [S x T x d]), z is [S x d], flags mark real
/// tokens. Includes the output projection.
template <class T>
ag::Tensor<T> asymmetric_attention(ag::Tape<T>& tape, const ag::Tensor<T>& H, const ag::Tensor<T>& z,
                                   std::span<const std::uint8_t> flags, std::size_t seq_len,
                                   const LayerParams<T>& layer, std::size_t heads,
                                   std::vector<T>* probs = nullptr) {
  const std::size_t S = z.rows();
  if (H.rows() != S * seq_len || flags.size() != S * seq_len) {
    throw DimensionError("asymmetric_attention: H " + ag::to_string(H.shape()) + " z " + ag::to_string(z.shape()) +
                         " seq_len " + std::to_string(seq_len));
  }
  auto extended = ag::interleave_prefix(tape, z, H, seq_len);
  auto q = ag::linear(tape, H, layer.wq, layer.bq);
  auto k = ag::linear(tape, extended, layer.wk, layer.bk);
  auto v = ag::linear(tape, extended, layer.wv, layer.bv);
  std::vector<ag::AttentionGroup> groups(S);
  std::vector<std::uint8_t> key_valid(S * (seq_len + 1));
  for (std::size_t s = 0; s < S; ++s) {
    groups[s] = {s * seq_len, seq_len, s * (seq_len + 1), seq_len + 1};
    key_valid[s * (seq_len + 1)] = 1;
    for (std::size_t t = 0; t < seq_len; ++t) key_valid[s * (seq_len + 1) + 1 + t] = flags[s * seq_len + t];
  }
  auto attended = ag::grouped_attention(tape, q, k, v, groups, key_valid, {heads, false}, probs);
  return ag::linear(tape, attended, layer.wo, layer.bo);
}

struct DropoutSite {
  double rate = 0.0;
  std::uint64_t seed = 0;
};

/// H' = LN(H + MHA_asy(Concate(z, H))); H_out = LN(H' + MLP(H')).
template <class T>
ag::Tensor<T> transformer_block(ag::Tape<T>& tape, const ag::Tensor<T>& H, const ag::Tensor<T>& z,
                                std::span<const std::uint8_t> flags, std::size_t seq_len,
                                const LayerParams<T>& layer, const ModelConfig& cfg, DropoutSite drop = {},
                                std::vector<T>* probs = nullptr) {
  const T eps = static_cast<T>(cfg.ln_eps);
  auto attn = asymmetric_attention(tape, H, z, flags, seq_len, layer, cfg.heads, probs);
  attn = ag::dropout(tape, attn, drop.rate, derive_seed(drop.seed, {1}));
  auto h1 = ag::layer_norm(tape, ag::add(tape, H, attn), layer.ln1_g, layer.ln1_b, eps);
  auto mlp = ag::linear(tape, ag::gelu(tape, ag::linear(tape, h1, layer.mlp_w1, layer.mlp_b1)), layer.mlp_w2,
                        layer.mlp_b2);
  mlp = ag::dropout(tape, mlp, drop.rate, derive_seed(drop.seed, {2}));
  return ag::layer_norm(tape, ag::add(tape, h1, mlp), layer.ln2_g, layer.ln2_b, eps);
}

/// One full layer for a batch of centers whose neighbor [CLS] states for this
/// layer are supplied: z = GNN(...), then the transformer block.
template <class T>
ag::Tensor<T> layer_forward(ag::Tape<T>& tape, const ag::Tensor<T>& H, std::span<const std::uint8_t> flags,
                            std::size_t seq_len, const ag::Tensor<T>& neighbor_cls,
                            std::span<const std::uint8_t> validity, const LayerParams<T>& layer,
                            const ModelConfig& cfg) {
  const std::size_t S = H.rows() / seq_len;
  std::vector<std::size_t> cls_rows(S);
  for (std::size_t s = 0; s < S; ++s) cls_rows[s] = s * seq_len;
  auto center_cls = ag::gather_rows(tape, H, cls_rows);
  auto z = graph_aggregate(tape, center_cls, neighbor_cls, validity, layer, cfg.aggregate_self);
  auto out = transformer_block(tape, H, z, flags, seq_len, layer, cfg);
  return ag::reshape(tape, out, H.shape());
}

// ---------------------------------------------------------------------------
// Batch encoding
// ---------------------------------------------------------------------------

/// Captured per-layer state for the centers of a batch.
template <class T>
struct LayerActivations {
  std::size_t seq_len = 0;
  std::size_t heads = 0;
  std::vector<ag::Tensor<T>> hidden;          // per layer input H^(l), [B x T x d]
  std::vector<ag::Tensor<T>> virtual_token;   // per layer z^(l), [B x d]
  std::vector<std::vector<T>> attention;      // per layer [B x heads x T x (T+1)]
  std::vector<std::uint8_t> attention_flags;  // [B x T]
};

template <class T>
struct EncodeOutput {
  /// Center token states of the last layer, [B x seq_len x d]. seq_len is
  /// the longest non-padded sequence in the batch; trailing positions that
  /// are padding in every sequence are not computed.
  ag::Tensor<T> token_states;
  ag::Tensor<T> node_reps;  // final [CLS] states, [B x d]
  std::size_t seq_len = 0;
  std::optional<LayerActivations<T>> activations;
};

struct EncodeOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  bool dump_attention = false;
};

/// Encodes centers with their valid neighbors. Each example forms an ego
/// subgraph {center, valid neighbors}; every member's virtual token at layer l
/// aggregates the layer-l [CLS] states of the subgraph, so neighbor [CLS]
/// states at layer l feed the center's aggregation at layer l. Invalid
/// neighbor slots are skipped entirely.
template <class Scalar>
EncodeOutput<Scalar> encode_batch(ag::Tape<Scalar>& tape, const EgoBatch& batch, const ModelParams<Scalar>& params,
                             const EncodeOptions& opts = {}) {
  const auto& cfg = params.config;
  const std::size_t B = batch.batch;
  const std::size_t K = batch.neighbors;
  const std::size_t T_full = batch.seq_len;
  const std::size_t d = cfg.hidden;
  if (T_full > cfg.max_len) {
    throw DimensionError("encode_batch: sequence length " + std::to_string(T_full) + " exceeds model max_len " +
                         std::to_string(cfg.max_len));
  }

  // Packed sequence list: per example the center, then its valid neighbors.
  struct SeqRef {
    const TokenId* ids;
    const std::uint8_t* attn;
  };
  std::vector<SeqRef> seqs;
  std::vector<std::size_t> center_seq(B);
  std::vector<ag::AttentionGroup> subgraphs(B);
  std::size_t T = 1;
  auto note_len = [&](const std::uint8_t* attn) {
    for (std::size_t t = T_full; t > 0; --t) {
      if (attn[t - 1]) {
        T = std::max(T, t);
        break;
      }
    }
  };
  for (std::size_t b = 0; b < B; ++b) {
    center_seq[b] = seqs.size();
    seqs.push_back({batch.center_ids.data() + b * T_full, batch.center_attention.data() + b * T_full});
    note_len(seqs.back().attn);
    for (std::size_t k = 0; k < K; ++k) {
      if (!batch.neighbor_valid[b * K + k]) continue;
      const std::size_t off = (b * K + k) * T_full;
      seqs.push_back({batch.neighbor_ids.data() + off, batch.neighbor_attention.data() + off});
      note_len(seqs.back().attn);
    }
    subgraphs[b] = {center_seq[b], seqs.size() - center_seq[b], center_seq[b], seqs.size() - center_seq[b]};
  }
  const std::size_t S = seqs.size();

  std::vector<std::size_t> token_rows(S * T);
  std::vector<std::size_t> pos_rows(S * T);
  std::vector<std::uint8_t> flags(S * T);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t t = 0; t < T; ++t) {
      token_rows[s * T + t] = static_cast<std::size_t>(seqs[s].ids[t]);
      pos_rows[s * T + t] = t;
      flags[s * T + t] = seqs[s].attn[t];
    }
  }
  std::vector<std::size_t> cls_rows(S);
  for (std::size_t s = 0; s < S; ++s) cls_rows[s] = s * T;

  const double drop = opts.training ? cfg.dropout : 0.0;
  const Scalar eps = static_cast<Scalar>(cfg.ln_eps);
  auto H = ag::add(tape, ag::gather_rows(tape, params.token_embedding, token_rows),
                   ag::gather_rows(tape, params.position_embedding, pos_rows));
  H = ag::layer_norm(tape, H, params.embed_ln_g, params.embed_ln_b, eps);
  H = ag::dropout(tape, H, drop, derive_seed(opts.dropout_seed, {0x656d62ULL}));

  std::optional<LayerActivations<Scalar>> acts;
  if (opts.dump_attention) {
    acts.emplace();
    acts->seq_len = T;
    acts->heads = cfg.heads;
    acts->attention_flags.resize(B * T);
    for (std::size_t b = 0; b < B; ++b) {
      std::copy_n(seqs[center_seq[b]].attn, T, acts->attention_flags.begin() + b * T);
    }
  }
  std::vector<std::size_t> center_token_rows(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) center_token_rows[b * T + t] = center_seq[b] * T + t;
  }

  std::vector<Scalar> probs;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& layer = params.layers[l];
    auto cls = ag::gather_rows(tape, H, cls_rows);
    auto mixed = ag::grouped_attention(tape, cls, cls, cls, subgraphs, {}, {1, !cfg.aggregate_self});
    auto z = ag::linear(tape, mixed, layer.graph_w, layer.graph_b);
    if (acts) {
      ag::Tape<Scalar> scratch(false);
      acts->hidden.push_back(ag::reshape(scratch, ag::gather_rows(scratch, H, center_token_rows), {B, T, d}));
      acts->virtual_token.push_back(ag::gather_rows(scratch, z, center_seq));
    }
    H = transformer_block(tape, H, z, flags, T, layer, cfg,
                          DropoutSite{drop, derive_seed(opts.dropout_seed, {0x6c6179ULL, l})},
                          acts ? &probs : nullptr);
    if (acts) {
      const std::size_t per_seq = cfg.heads * T * (T + 1);
      std::vector<Scalar> centers(B * per_seq);
      for (std::size_t b = 0; b < B; ++b) {
        std::copy_n(probs.begin() + static_cast<std::ptrdiff_t>(center_seq[b] * per_seq), per_seq,
                    centers.begin() + static_cast<std::ptrdiff_t>(b * per_seq));
      }
      acts->attention.push_back(std::move(centers));
    }
  }

  EncodeOutput<Scalar> out;
  out.seq_len = T;
  out.token_states = ag::reshape(tape, ag::gather_rows(tape, H, center_token_rows), {B, T, d});
  std::vector<std::size_t> center_cls(B);
  for (std::size_t b = 0; b < B; ++b) center_cls[b] = center_seq[b] * T;
  out.node_reps = ag::gather_rows(tape, H, center_cls);
  out.activations = std::move(acts);
  return out;
}

// ---------------------------------------------------------------------------
// Attention maps
// ---------------------------------------------------------------------------

/// One row of an attention map: probability mass a query token assigns to the
/// virtual token and to the first `window` text positions, head-averaged.
struct AttentionMapRow {
  std::size_t example = 0;
  std::size_t layer = 0;
  std::size_t query_token = 0;
  std::vector<std::string> columns;  // "n_CLS", "tk_0", ...
  std::vector<double> weights;
};

template <class Scalar>
std::vector<AttentionMapRow> dump_attention(const std::optional<LayerActivations<Scalar>>& acts,
                                            std::size_t token_window,
                                            std::span<const std::size_t> query_tokens = {}) {
  if (!acts || acts->attention.empty()) {
    throw Error("dump_attention: attention was not captured during the forward pass");
  }
  const std::size_t T = acts->seq_len;
  const std::size_t H = acts->heads;
  const std::size_t B = acts->attention_flags.size() / T;
  std::vector<std::string> columns{"n_CLS"};
  for (std::size_t t = 0; t < token_window; ++t) columns.push_back("tk_" + std::to_string(t));
  std::vector<AttentionMapRow> rows;
  for (std::size_t l = 0; l < acts->attention.size(); ++l) {
    const auto& probs = acts->attention[l];
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<std::size_t> queries(query_tokens.begin(), query_tokens.end());
      if (queries.empty()) {
        for (std::size_t t = 0; t < T; ++t) {
          if (acts->attention_flags[b * T + t]) queries.push_back(t);
        }
      }
      for (auto qt : queries) {
        if (qt >= T) continue;
        AttentionMapRow row{b, l, qt, columns, std::vector<double>(1 + token_window, 0.0)};
        for (std::size_t h = 0; h < H; ++h) {
          const Scalar* p = probs.data() + ((b * H + h) * T + qt) * (T + 1);
          row.weights[0] += static_cast<double>(p[0]) / static_cast<double>(H);
          for (std::size_t t = 0; t < token_window && t < T; ++t) {
            row.weights[1 + t] += static_cast<double>(p[1 + t]) / static_cast<double>(H);
          }
        }
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

inline nlohmann::ordered_json to_json(const AttentionMapRow& row, std::uint64_t node_id) {
  return {{"node", node_id},          {"layer", row.layer},   {"query_token", row.query_token},
          {"columns", row.columns},   {"weights", row.weights}};
}

}  // namespace netpretrain
