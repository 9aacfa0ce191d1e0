// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "netpretrain/graphformer.hpp"
#include "netpretrain/objectives.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/random.hpp"
#include "support/reference_encoder.hpp"

namespace np = netpretrain;
namespace ag = netpretrain::ag;
namespace ref = netpretrain::testing::ref;
using np::testing::random_tensor;

namespace {

np::ModelConfig tiny_config(std::size_t vocab, std::size_t max_len, std::size_t hidden, std::size_t layers,
                            std::size_t heads, double init_std = 0.3) {
  np::ModelConfig c;
  c.vocab_size = vocab;
  c.max_len = max_len;
  c.hidden = hidden;
  c.layers = layers;
  c.heads = heads;
  c.init_std = init_std;
  return c;
}

/// Fills every parameter (including biases and norms) with random values so
/// the tests exercise non-trivial paths.
template <class T>
void randomize(np::ModelParams<T>& p, unsigned seed, double scale = 0.3) {
  unsigned s = seed;
  for (auto& [name, t] : p.named()) {
    auto r = random_tensor<T>(t.shape(), s++, scale);
    auto tt = t;
    for (std::size_t i = 0; i < tt.size(); ++i) tt[i] = r[i] + (name.find("gain") != std::string::npos ? T(1) : T(0));
  }
}

ref::Mat rows_of(const ag::Tensor<float>& t, std::size_t begin, std::size_t count) {
  const std::size_t d = t.cols();
  ref::Mat out;
  for (std::size_t r = begin; r < begin + count; ++r) out.emplace_back(t.ptr() + r * d, t.ptr() + (r + 1) * d);
  return out;
}

TEST(GraphAggregate, MatchesReference) {
  auto cfg = tiny_config(20, 4, 4, 1, 1);
  auto p = np::ModelParams<float>::init(cfg, 1);
  randomize(p, 10);
  auto center = random_tensor<float>({1, 4}, 1);
  auto nbrs = random_tensor<float>({1, 2, 4}, 2);
  std::vector<std::uint8_t> valid{1, 1};
  ag::Tape<float> tape(false);
  auto z = np::graph_aggregate(tape, center, nbrs, valid, p.layers[0]);
  auto L = ref::Layer::from(p.layers[0]);
  ref::Vec c(center.data().begin(), center.data().end());
  ref::Mat keys{c, ref::Vec(nbrs.ptr(), nbrs.ptr() + 4), ref::Vec(nbrs.ptr() + 4, nbrs.ptr() + 8)};
  auto expect = ref::aggregate(c, keys, L);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(z[i], expect[i], 1e-5);

  // One invalid slot is dropped from the keys.
  valid = {0, 1};
  z = np::graph_aggregate(tape, center, nbrs, valid, p.layers[0]);
  expect = ref::aggregate(c, {keys[0], keys[2]}, L);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(z[i], expect[i], 1e-5);
}

TEST(GraphAggregate, DegenerateCases) {
  auto cfg = tiny_config(20, 4, 4, 1, 1);
  auto p = np::ModelParams<float>::init(cfg, 1);
  randomize(p, 20);
  auto center = random_tensor<float>({2, 4}, 3);
  auto nbrs = random_tensor<float>({2, 3, 4}, 4);
  std::vector<std::uint8_t> none(6, 0);
  ag::Tape<float> tape(false);
  auto z = np::graph_aggregate(tape, center, nbrs, none, p.layers[0]);
  auto proj = ag::linear(tape, center, p.layers[0].graph_w, p.layers[0].graph_b);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_FLOAT_EQ(z[i], proj[i]);

  // Identical center and neighbors: convex combination of equal vectors.
  ag::Tensor<float> same_n({1, 2, 4}, {0.5f, -1, 2, 0.25f, 0.5f, -1, 2, 0.25f});
  ag::Tensor<float> same_c({1, 4}, {0.5f, -1, 2, 0.25f});
  std::vector<std::uint8_t> both{1, 1};
  z = np::graph_aggregate(tape, same_c, same_n, both, p.layers[0]);
  proj = ag::linear(tape, same_c, p.layers[0].graph_w, p.layers[0].graph_b);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(z[i], proj[i], 1e-6);

  // Neighbors-only variant: isolated node aggregates to the bias alone.
  z = np::graph_aggregate(tape, center, nbrs, none, p.layers[0], false);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(z[r * 4 + i], p.layers[0].graph_b[i]);
  }
}

TEST(AsymmetricAttention, MatchesReferenceAndShape) {
  auto cfg = tiny_config(20, 3, 4, 1, 1);
  auto p = np::ModelParams<float>::init(cfg, 1);
  randomize(p, 30);
  auto H = random_tensor<float>({3, 4}, 5);
  auto z = random_tensor<float>({1, 4}, 6);
  std::vector<std::uint8_t> flags{1, 1, 0};
  ag::Tape<float> tape(false);
  auto out = np::asymmetric_attention(tape, H, z, flags, 3, p.layers[0], 1);
  EXPECT_EQ(out.rows(), 3u);
  auto expect = ref::asymmetric_attention(rows_of(H, 0, 3), ref::Vec(z.ptr(), z.ptr() + 4), flags,
                                          ref::Layer::from(p.layers[0]), 1);
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[t * 4 + i], expect[t][i], 1e-5);
  }
}

TEST(AsymmetricAttention, EqualKeysGiveUniformWeightsOverValidPositions) {
  auto cfg = tiny_config(20, 4, 4, 1, 2);
  auto p = np::ModelParams<float>::init(cfg, 1);
  randomize(p, 40);
  std::vector<float> row{0.3f, -0.7f, 1.1f, 0.2f};
  std::vector<float> hv;
  for (int t = 0; t < 4; ++t) hv.insert(hv.end(), row.begin(), row.end());
  ag::Tensor<float> H({4, 4}, hv);
  ag::Tensor<float> z({1, 4}, row);
  std::vector<std::uint8_t> flags{1, 1, 1, 0};
  std::vector<float> probs;
  ag::Tape<float> tape(false);
  np::asymmetric_attention(tape, H, z, flags, 4, p.layers[0], 2, &probs);
  ASSERT_EQ(probs.size(), 2u * 4u * 5u);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t t = 0; t < 4; ++t) {
      const float* pr = probs.data() + (h * 4 + t) * 5;
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(pr[j], 0.25f, 1e-6);
      EXPECT_EQ(pr[4], 0.0f);
    }
  }
}

TEST(LayerForward, ZeroGraphProjectionIsStandardLayerWithZeroExtraKey) {
  auto cfg = tiny_config(20, 5, 8, 1, 2);
  auto p = np::ModelParams<float>::init(cfg, 1);
  randomize(p, 50);
  auto& l = p.layers[0];
  for (std::size_t i = 0; i < l.graph_w.size(); ++i) l.graph_w[i] = 0;
  for (std::size_t i = 0; i < l.graph_b.size(); ++i) l.graph_b[i] = 0;
  auto H = random_tensor<float>({2, 5, 8}, 7);
  auto nbrs = random_tensor<float>({2, 2, 8}, 8);
  std::vector<std::uint8_t> flags{1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
  std::vector<std::uint8_t> valid{1, 0, 1, 1};
  ag::Tape<float> tape(false);
  auto out = np::layer_forward(tape, H, flags, 5, nbrs, valid, l, cfg);
  EXPECT_EQ(out.shape(), H.shape());
  auto flat = ag::reshape(tape, H, {10, 8});
  auto expect = np::transformer_block(tape, flat, ag::Tensor<float>::zeros({2, 8}), flags, 5, l, cfg);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], expect[i]);
}

TEST(LayerForward, MatchesReferenceBlock) {
  auto cfg = tiny_config(20, 4, 8, 1, 2);
  auto p = np::ModelParams<float>::init(cfg, 1);
  randomize(p, 60);
  auto H = random_tensor<float>({1, 4, 8}, 9);
  auto nbrs = random_tensor<float>({1, 2, 8}, 10);
  std::vector<std::uint8_t> flags{1, 1, 1, 0};
  std::vector<std::uint8_t> valid{1, 1};
  ag::Tape<float> tape(false);
  auto out = np::layer_forward(tape, H, flags, 4, nbrs, valid, p.layers[0], cfg);
  auto L = ref::Layer::from(p.layers[0]);
  auto Hm = rows_of(ag::reshape(tape, H, {4, 8}), 0, 4);
  ref::Mat keys{Hm[0], ref::Vec(nbrs.ptr(), nbrs.ptr() + 8), ref::Vec(nbrs.ptr() + 8, nbrs.ptr() + 16)};
  auto z = ref::aggregate(Hm[0], keys, L);
  auto expect = ref::block(Hm, z, flags, L, 2, cfg.ln_eps);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out[t * 8 + i], expect[t][i], 1e-4);
  }
}

struct EncodeFixture {
  np::TextRichNetwork net = np::testing::random_network(12, 30, 8, 0.3, 21);
  np::ModelConfig cfg = tiny_config(30, 8, 8, 2, 2);
  np::ModelParams<float> params = np::ModelParams<float>::init(cfg, 3);

  np::EgoBatch batch(std::vector<np::NodeIndex> centers, std::uint64_t seed = 1, std::size_t k = 3) {
    np::EgoBatchOptions o;
    o.neighbors = k;
    o.seed = seed;
    return np::make_ego_batch(net, centers, o);
  }
};

TEST(EncodeBatch, MatchesReferenceEncoder) {
  EncodeFixture f;
  randomize(f.params, 70);
  for (bool self : {true, false}) {
    f.params.config.aggregate_self = self;
    auto b = f.batch({0, 3, 5, 11});
    ag::Tape<float> tape(false);
    auto out = np::encode_batch(tape, b, f.params);
    auto expect = ref::encode(b, f.params);
    const std::size_t T = out.seq_len;
    for (std::size_t e = 0; e < 4; ++e) {
      for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out.node_reps[e * 8 + i], expect.centers[e][0][i], 1e-4);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < 8; ++i) {
          EXPECT_NEAR(out.token_states[(e * T + t) * 8 + i], expect.centers[e][t][i], 1e-4);
        }
      }
    }
  }
}

TEST(EncodeBatch, PermutationEquivariantAndDeterministic) {
  EncodeFixture f;
  randomize(f.params, 80);
  auto b1 = f.batch({1, 2, 4});
  // Same examples in reverse order: rebuild with per-example neighbor lists
  // copied from b1 so only the ordering differs.
  np::EgoBatch b2 = b1;
  const std::size_t T = b1.seq_len, K = b1.neighbors;
  for (std::size_t e = 0; e < 3; ++e) {
    const std::size_t s = 2 - e;
    std::copy_n(b1.center_ids.begin() + s * T, T, b2.center_ids.begin() + e * T);
    std::copy_n(b1.center_attention.begin() + s * T, T, b2.center_attention.begin() + e * T);
    std::copy_n(b1.neighbor_ids.begin() + s * K * T, K * T, b2.neighbor_ids.begin() + e * K * T);
    std::copy_n(b1.neighbor_attention.begin() + s * K * T, K * T, b2.neighbor_attention.begin() + e * K * T);
    std::copy_n(b1.neighbor_valid.begin() + s * K, K, b2.neighbor_valid.begin() + e * K);
  }
  ag::Tape<float> tape(false);
  auto o1 = np::encode_batch(tape, b1, f.params);
  auto o2 = np::encode_batch(tape, b2, f.params);
  auto o3 = np::encode_batch(tape, b1, f.params);
  for (std::size_t e = 0; e < 3; ++e) {
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(o1.node_reps[e * 8 + i], o2.node_reps[(2 - e) * 8 + i], 1e-5);
  }
  for (std::size_t i = 0; i < o1.token_states.size(); ++i) EXPECT_EQ(o1.token_states[i], o3.token_states[i]);
}

TEST(EncodeBatch, ZeroGraphProjectionIgnoresNeighbors) {
  EncodeFixture f;
  randomize(f.params, 90);
  for (auto& l : f.params.layers) {
    for (std::size_t i = 0; i < l.graph_w.size(); ++i) l.graph_w[i] = 0;
    for (std::size_t i = 0; i < l.graph_b.size(); ++i) l.graph_b[i] = 0;
  }
  auto a = f.batch({0, 1}, 1);
  auto b = f.batch({0, 1}, 2);
  // Replace neighbor texts wholesale with other nodes' texts.
  for (std::size_t i = 0; i < b.neighbor_ids.size(); ++i) {
    if (b.neighbor_attention[i]) b.neighbor_ids[i] = static_cast<np::TokenId>(5 + (i % 25));
  }
  ag::Tape<float> tape(false);
  auto oa = np::encode_batch(tape, a, f.params);
  auto ob = np::encode_batch(tape, b, f.params);
  ASSERT_EQ(oa.token_states.size(), ob.token_states.size());
  for (std::size_t i = 0; i < oa.token_states.size(); ++i) EXPECT_EQ(oa.token_states[i], ob.token_states[i]);
}

TEST(EncodeBatch, AttentionCaptureRowsSumToOne) {
  EncodeFixture f;
  randomize(f.params, 100);
  auto b = f.batch({0, 6});
  ag::Tape<float> tape(false);
  auto out = np::encode_batch(tape, b, f.params, {false, 0, true});
  ASSERT_TRUE(out.activations.has_value());
  const auto& acts = *out.activations;
  const std::size_t T = acts.seq_len;
  ASSERT_EQ(acts.attention.size(), 2u);
  for (const auto& layer : acts.attention) {
    ASSERT_EQ(layer.size(), 2u * 2u * T * (T + 1));
    for (std::size_t e = 0; e < 2; ++e) {
      for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t t = 0; t < T; ++t) {
          const float* p = layer.data() + ((e * 2 + h) * T + t) * (T + 1);
          double s = 0.0;
          for (std::size_t j = 0; j <= T; ++j) s += p[j];
          EXPECT_NEAR(s, 1.0, 1e-6);
          for (std::size_t j = 0; j < T; ++j) {
            if (!acts.attention_flags[e * T + j]) EXPECT_EQ(p[1 + j], 0.0f);
          }
        }
      }
    }
  }
  EXPECT_EQ(acts.virtual_token.size(), 2u);
  EXPECT_EQ(acts.hidden[0].shape(), (ag::Shape{2, T, 8}));
}

TEST(DumpAttention, LayoutAndErrors) {
  EncodeFixture f;
  auto b = f.batch({0});
  ag::Tape<float> tape(false);
  auto out = np::encode_batch(tape, b, f.params, {false, 0, true});
  auto rows = np::dump_attention(out.activations, 8);
  ASSERT_FALSE(rows.empty());
  for (const auto& r : rows) {
    ASSERT_EQ(r.columns.size(), 9u);
    EXPECT_EQ(r.columns[0], "n_CLS");
    EXPECT_EQ(r.columns[8], "tk_7");
    double s = std::accumulate(r.weights.begin(), r.weights.end(), 0.0);
    EXPECT_LE(s, 1.0 + 1e-6);
  }
  auto plain = np::encode_batch(tape, b, f.params);
  EXPECT_THROW(np::dump_attention(plain.activations, 8), np::Error);
}

TEST(DumpAttention, UniformWeightsGiveNearUniformMap) {
  EncodeFixture f;
  for (auto& [name, t] : f.params.named()) {
    if (name.find("attn.query") != std::string::npos || name.find("attn.key") != std::string::npos) {
      auto tt = t;
      for (std::size_t i = 0; i < tt.size(); ++i) tt[i] = 0;
    }
  }
  auto b = f.batch({0});
  std::fill(b.center_attention.begin(), b.center_attention.end(), 1);
  ag::Tape<float> tape(false);
  auto out = np::encode_batch(tape, b, f.params, {false, 0, true});
  const double T = static_cast<double>(out.seq_len);
  for (const auto& r : np::dump_attention(out.activations, 4)) {
    for (double w : r.weights) EXPECT_NEAR(w, 1.0 / (T + 1.0), 1e-6);
  }
}

TEST(WholeModel, GradientsMatchFiniteDifferences) {
  auto net = np::testing::random_network(8, 20, 6, 0.0, 5);
  net.set_edges({{0, 1}, {0, 2}, {1, 3}, {2, 3}, {4, 5}, {4, 6}, {5, 7}, {1, 4}});
  for (auto& seq : net.tokens) {
    for (std::size_t t = 1; t < 5; ++t) {
      if (!seq.attention[t]) {
        seq.attention[t] = 1;
        seq.ids[t] = static_cast<np::TokenId>(5 + t);
      }
    }
  }
  auto cfg = tiny_config(20, 6, 8, 2, 2);
  auto params = np::ModelParams<double>::init(cfg, 7);
  randomize(params, 200, 0.4);
  np::EgoBatchOptions o;
  o.neighbors = 2;
  o.mlm = true;
  o.mask_ratio = 0.5;
  o.vocab_size = 20;
  o.seed = 3;
  std::vector<np::Edge> pairs{{0, 1}, {4, 5}};
  auto batch = np::make_pretrain_batch(net, pairs, o);
  ASSERT_EQ(batch.batch, 4u);
  ASSERT_GT(std::count_if(batch.mlm_labels.begin(), batch.mlm_labels.end(),
                          [](auto l) { return l != np::kLabelSentinel; }),
            0);
  std::vector<ag::Tensor<double>> tensors;
  for (auto& [name, t] : params.named()) tensors.push_back(t);
  auto r = np::testing::check_gradients(tensors, [&](ag::Tape<double>& tape) {
    return np::pretrain_losses(tape, batch, params, np::Objective::kJoint).total;
  });
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
  EXPECT_GT(r.checked, 2000u);
}

}  // namespace
