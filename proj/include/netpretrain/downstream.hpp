// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Finetuning pipelines on top of the encoder's [CLS] representation:
// k-shot node classification, dense label retrieval with BM25 hard
// negatives, candidate reranking, and link prediction on a second edge type
// with in-batch evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "netpretrain/autodiff/ops.hpp"
#include "netpretrain/graphformer.hpp"
#include "netpretrain/netdata.hpp"
#include "netpretrain/objectives.hpp"
#include "netpretrain/optim.hpp"
#include "netpretrain/random.hpp"
#include "netpretrain/ranking.hpp"
#include "netpretrain/tokenizer.hpp"

namespace netpretrain {

enum class TaskKind { kClassify, kRetrieve, kRerank, kLinkpred };

inline TaskKind parse_task(const std::string& s) {
  if (s == "classify") return TaskKind::kClassify;
  if (s == "retrieve") return TaskKind::kRetrieve;
  if (s == "rerank") return TaskKind::kRerank;
  if (s == "linkpred") return TaskKind::kLinkpred;
  throw Error("unknown task '" + s + "' (expected classify | retrieve | rerank | linkpred)");
}

inline std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::kClassify: return "classify";
    case TaskKind::kRetrieve: return "retrieve";
    case TaskKind::kRerank: return "rerank";
    case TaskKind::kLinkpred: return "linkpred";
  }
  return "classify";
}

struct FinetuneConfig {
  std::size_t shots = 8;
  std::size_t epochs = 500;
  std::size_t max_steps = 0;  // overrides epochs when set
  double lr = 1e-5;
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t batch_size = 256;
  std::size_t eval_every = 25;
  std::size_t neighbors = kDefaultNeighbors;
  std::size_t hard_negatives = 4;
  std::size_t candidates = 100;   // rerank: BM25 depth
  std::size_t test_batch = 256;   // linkpred: in-batch evaluation size
  std::size_t valid_batch = 256;  // linkpred: in-batch validation size
  std::size_t max_test = 0;       // cap on test queries / pairs, 0 = all
  std::size_t encode_chunk = 64;
  std::uint64_t seed = 0;

  static FinetuneConfig defaults(TaskKind task) {
    FinetuneConfig c;
    switch (task) {
      case TaskKind::kClassify:
        c.shots = 8, c.epochs = 500, c.batch_size = 256, c.eval_every = 25;
        break;
      case TaskKind::kRetrieve:
        c.shots = 16, c.epochs = 1000, c.batch_size = 128, c.eval_every = 100;
        break;
      case TaskKind::kRerank:
        c.shots = 32, c.epochs = 1000, c.batch_size = 128, c.eval_every = 1000;
        break;
      case TaskKind::kLinkpred:
        c.shots = 32, c.epochs = 200, c.batch_size = 128, c.eval_every = 20;
        break;
    }
    return c;
  }

  void validate() const {
    if (shots == 0) throw Error("task.shots must be positive");
    if (epochs == 0 && max_steps == 0) throw Error("task.epochs must be positive");
    if (batch_size == 0) throw Error("task.batch_size must be positive");
    if (eval_every == 0) throw Error("task.eval_every must be positive");
    if (encode_chunk == 0) throw Error("task.encode_chunk must be positive");
    if (test_batch < 2) throw Error("task.test_batch must be at least 2");
    if (valid_batch < 2) throw Error("task.valid_batch must be at least 2");
    if (!(lr > 0)) throw Error("task.lr must be positive");
  }
};

// ---------------------------------------------------------------------------
// Encoding helpers
// ---------------------------------------------------------------------------

/// Batch of standalone texts: every neighbor slot is blank.
inline EgoBatch make_text_batch(std::span<const TokenSequence> seqs, std::size_t neighbors) {
  if (seqs.empty()) throw Error("make_text_batch: no sequences");
  const std::size_t B = seqs.size();
  const std::size_t T = seqs.front().ids.size();
  EgoBatch batch;
  batch.batch = B;
  batch.neighbors = neighbors;
  batch.seq_len = T;
  batch.centers.assign(B, 0);
  batch.center_ids.reserve(B * T);
  batch.center_attention.reserve(B * T);
  for (const auto& s : seqs) {
    if (s.ids.size() != T) throw Error("make_text_batch: sequences differ in length");
    batch.center_ids.insert(batch.center_ids.end(), s.ids.begin(), s.ids.end());
    batch.center_attention.insert(batch.center_attention.end(), s.attention.begin(), s.attention.end());
  }
  batch.neighbor_ids.assign(B * neighbors * T, special::kPad);
  batch.neighbor_attention.assign(B * neighbors * T, 0);
  batch.neighbor_valid.assign(B * neighbors, 0);
  batch.neighbor_nodes.assign(B * neighbors, 0);
  batch.mlm_labels.assign(B * T, kLabelSentinel);
  return batch;
}

/// Final-layer [CLS] of a text with no network context.
template <class T>
std::vector<T> encode_out_of_network(const ModelParams<T>& params, const Vocab& vocab, const std::string& text,
                                     std::size_t neighbors = kDefaultNeighbors) {
  const auto seq = encode(text, vocab, params.config.max_len);
  ag::Tape<T> tape(false);
  auto out = encode_batch(tape, make_text_batch(std::span<const TokenSequence>(&seq, 1), neighbors), params);
  auto reps = out.node_reps.data();
  return {reps.begin(), reps.end()};
}

/// Row-major [n x d] representations of standalone texts, evaluation mode.
template <class T>
std::vector<T> encode_texts(const ModelParams<T>& params, std::span<const TokenSequence> seqs, std::size_t neighbors,
                            std::size_t chunk = 64) {
  std::vector<T> out;
  out.reserve(seqs.size() * params.config.hidden);
  for (std::size_t start = 0; start < seqs.size(); start += chunk) {
    const std::size_t n = std::min(chunk, seqs.size() - start);
    ag::Tape<T> tape(false);
    auto enc = encode_batch(tape, make_text_batch(seqs.subspan(start, n), neighbors), params);
    out.insert(out.end(), enc.node_reps.data().begin(), enc.node_reps.data().end());
  }
  return out;
}

/// Row-major [n x d] representations of network nodes with their sampled
/// neighbors, evaluation mode. Sampling is keyed on the node so a node's
/// representation does not depend on which other nodes are encoded with it.
template <class T>
std::vector<T> encode_nodes(const ModelParams<T>& params, const TextRichNetwork& net,
                            std::span<const NodeIndex> nodes, std::size_t neighbors, std::uint64_t seed,
                            std::size_t chunk = 64) {
  std::vector<T> out;
  out.reserve(nodes.size() * params.config.hidden);
  EgoBatchOptions opts;
  opts.neighbors = neighbors;
  opts.seed = seed;
  opts.seed_by_node = true;
  for (std::size_t start = 0; start < nodes.size(); start += chunk) {
    const std::size_t n = std::min(chunk, nodes.size() - start);
    ag::Tape<T> tape(false);
    auto enc = encode_batch(tape, make_ego_batch(net, nodes.subspan(start, n), opts), params);
    out.insert(out.end(), enc.node_reps.data().begin(), enc.node_reps.data().end());
  }
  return out;
}

template <class T>
double dot_rows(const std::vector<T>& a, std::size_t i, const std::vector<T>& b, std::size_t j, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += static_cast<double>(a[i * d + k]) * static_cast<double>(b[j * d + k]);
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoint selection and the shared training loop
// ---------------------------------------------------------------------------

/// Keeps the snapshot with the best validation value; a later step must be
/// strictly better to replace it, so ties stay with the earlier step.
template <class Snapshot>
class BestSelector {
 public:
  bool offer(std::size_t step, double value, const std::function<Snapshot()>& take) {
    if (has_ && !(value > value_)) return false;
    has_ = true;
    step_ = step;
    value_ = value;
    snapshot_ = take();
    return true;
  }
  bool has_value() const { return has_; }
  std::size_t step() const { return step_; }
  double value() const { return value_; }
  const Snapshot& snapshot() const { return snapshot_; }

 private:
  bool has_ = false;
  std::size_t step_ = 0;
  double value_ = 0.0;
  Snapshot snapshot_{};
};

struct FinetuneTrace {
  std::size_t total_steps = 0;
  std::size_t selected_step = 0;
  double best_valid = 0.0;
  std::vector<std::pair<std::size_t, double>> validations;
  std::vector<double> losses;
};

inline void to_json(nlohmann::ordered_json& j, const FinetuneTrace& t) {
  nlohmann::ordered_json v = nlohmann::ordered_json::array();
  for (auto [s, m] : t.validations) v.push_back({{"step", s}, {"value", m}});
  j = {{"total_steps", t.total_steps}, {"selected_step", t.selected_step}, {"best_valid", t.best_valid},
       {"validations", v}};
}

/// Minibatch AdamW over `trainable` with linear warm-up/decay. `loss_fn`
/// receives the tape, the training-set indices of the batch and the 1-based
/// step. Validation runs every eval_every steps and after the last step; the
/// best snapshot is restored at the end.
template <class T, class LossFn, class ValidFn>
FinetuneTrace finetune_loop(NamedTensors<T> trainable, const FinetuneConfig& cfg, std::size_t n_train,
                            LossFn&& loss_fn, ValidFn&& valid_fn) {
  if (n_train == 0) throw Error("finetune: empty training set");
  const std::size_t per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  FinetuneTrace trace;
  trace.total_steps = cfg.max_steps ? cfg.max_steps : cfg.epochs * per_epoch;
  AdamWConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  adam.clip_norm = cfg.clip_norm;
  adam.warmup_fraction = cfg.warmup_fraction;
  auto state = AdamState<T>::zeros_like(trainable);
  using Snapshot = std::vector<std::vector<T>>;
  BestSelector<Snapshot> best;
  auto take = [&] {
    Snapshot s;
    for (const auto& [name, t] : trainable) s.emplace_back(t.data().begin(), t.data().end());
    return s;
  };
  std::vector<std::size_t> order(n_train);
  std::size_t epoch = static_cast<std::size_t>(-1);
  for (std::size_t step = 1; step <= trace.total_steps; ++step) {
    const std::size_t e = (step - 1) / per_epoch;
    if (e != epoch) {
      epoch = e;
      for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
      Rng rng(derive_seed(cfg.seed, {0x65706fULL, epoch}));
      shuffle(order, rng);
    }
    const std::size_t begin = ((step - 1) % per_epoch) * cfg.batch_size;
    const std::size_t end = std::min(n_train, begin + cfg.batch_size);
    std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
    ag::Tape<T> tape;
    ag::Tensor<T> loss = loss_fn(tape, batch, step);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) throw NonFiniteError("non-finite finetuning loss at step " + std::to_string(step));
    trace.losses.push_back(value);
    tape.backward(loss);
    adamw_update(trainable, state, scheduled_lr(adam, step, trace.total_steps), adam);
    if (step % cfg.eval_every == 0 || step == trace.total_steps) {
      const double v = valid_fn();
      trace.validations.emplace_back(step, v);
      best.offer(step, v, take);
    }
  }
  const auto& snap = best.snapshot();
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    auto& t = trainable[i].second;
    std::copy(snap[i].begin(), snap[i].end(), t.data().begin());
  }
  trace.selected_step = best.step();
  trace.best_valid = best.value();
  return trace;
}

/// Mean listwise cross-entropy: row i of `scores` is restricted to the
/// columns in rows[i] (positive first).
template <class T>
LossWithStats<T> listwise_loss(ag::Tape<T>& tape, const ag::Tensor<T>& scores,
                               const std::vector<std::vector<std::size_t>>& rows) {
  const std::size_t M = scores.cols();
  LossWithStats<T> out;
  ag::Tensor<T> total;
  std::vector<std::int32_t> target0{0};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<std::size_t> idx;
    for (auto c : rows[i]) idx.push_back(i * M + c);
    auto row = ag::gather_elements(tape, scores, idx, {1, idx.size()});
    bool hit = true;
    for (std::size_t c = 1; c < idx.size(); ++c) hit = hit && row[0] >= row[c];
    out.correct += hit;
    ++out.count;
    auto l = ag::cross_entropy_logits(tape, row, target0);
    total = total.defined() ? ag::add(tape, total, l) : l;
  }
  out.loss = ag::scale(tape, total, T(1) / static_cast<T>(rows.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Splits and reports
// ---------------------------------------------------------------------------

struct NodeSplit {
  std::vector<NodeIndex> train, valid, test;
};

inline void write_node_split(const std::string& path, const TextRichNetwork& net, const NodeSplit& split) {
  std::vector<std::pair<std::uint64_t, const char*>> rows;
  for (auto v : split.train) rows.emplace_back(net.ids[v], "train");
  for (auto v : split.valid) rows.emplace_back(net.ids[v], "valid");
  for (auto v : split.test) rows.emplace_back(net.ids[v], "test");
  std::sort(rows.begin(), rows.end());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (auto [id, s] : rows) out << id << '\t' << s << '\n';
}

struct EvalReport {
  std::string task;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  std::string config_digest;
  std::size_t checkpoint_step = 0;
  std::uint64_t seed = 0;
  nlohmann::ordered_json details = nlohmann::ordered_json::object();
};

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  return {{"task", r.task},
          {"metrics", r.metrics},
          {"config_digest", r.config_digest},
          {"checkpoint_step", r.checkpoint_step},
          {"seed", r.seed},
          {"details", r.details}};
}

namespace detail {

inline int primary_label(const LabelSet& labels, NodeIndex v) { return labels.of_node[v].front(); }

/// Shuffles `pool` with `seed` and takes shots / shots / rest; each part
/// is returned sorted.
inline NodeSplit take_shots(std::vector<NodeIndex> pool, std::size_t shots, std::uint64_t seed,
                            std::size_t max_test) {
  std::sort(pool.begin(), pool.end());
  Rng rng(seed);
  shuffle(pool, rng);
  NodeSplit s;
  const auto at = [&](std::size_t i) { return pool.begin() + static_cast<std::ptrdiff_t>(std::min(i, pool.size())); };
  s.train.assign(at(0), at(shots));
  s.valid.assign(at(shots), at(2 * shots));
  s.test.assign(at(2 * shots), pool.end());
  if (max_test && s.test.size() > max_test) s.test.resize(max_test);
  for (auto* part : {&s.train, &s.valid, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

inline std::uint64_t eval_seed(std::uint64_t seed) { return derive_seed(seed, {0x6576616cULL}); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

template <class T>
struct ClassifierHead {
  ag::Tensor<T> weight;  // [d x C]
  ag::Tensor<T> bias;    // [C]

  static ClassifierHead init(std::size_t d, std::size_t classes, std::uint64_t seed, double stddev = 0.02) {
    Rng rng(derive_seed(seed, {0x68656164ULL}));
    std::vector<T> w(d * classes);
    for (auto& x : w) x = static_cast<T>(normal(rng, 0.0, stddev));
    return {ag::Tensor<T>({d, classes}, std::move(w), true), ag::Tensor<T>::zeros({classes}, true)};
  }
};

/// Per class: `shots` training and `shots` validation nodes, the rest test.
/// Single-label; a node's first label counts.
inline NodeSplit split_classification(const LabelSet& labels, std::size_t shots, std::uint64_t seed,
                                      std::size_t max_test = 0) {
  if (labels.num_labels() == 0) throw Error("classification: empty label space");
  std::vector<std::vector<NodeIndex>> members(labels.num_labels());
  for (NodeIndex v = 0; v < labels.of_node.size(); ++v) {
    if (labels.has_label(v)) members[detail::primary_label(labels, v)].push_back(v);
  }
  NodeSplit split;
  std::vector<NodeIndex> test;
  for (std::size_t c = 0; c < members.size(); ++c) {
    if (members[c].size() < 2 * shots) {
      throw Error("classification: class " + std::to_string(c) + " '" + labels.names[c] + "' has " +
                  std::to_string(members[c].size()) + " labeled nodes, needs " + std::to_string(2 * shots) +
                  " for " + std::to_string(shots) + "-shot training and validation");
    }
    auto part = detail::take_shots(members[c], shots, derive_seed(seed, {0x73706c74ULL, c}), 0);
    split.train.insert(split.train.end(), part.train.begin(), part.train.end());
    split.valid.insert(split.valid.end(), part.valid.begin(), part.valid.end());
    test.insert(test.end(), part.test.begin(), part.test.end());
  }
  std::sort(test.begin(), test.end());
  if (max_test && test.size() > max_test) {
    Rng rng(derive_seed(seed, {0x63617021ULL}));
    shuffle(test, rng);
    test.resize(max_test);
    std::sort(test.begin(), test.end());
  }
  split.test = std::move(test);
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.valid.begin(), split.valid.end());
  return split;
}

/// Argmax class per node (ties to the lower class id).
template <class T>
std::vector<int> predict_classes(const ModelParams<T>& params, const ClassifierHead<T>& head,
                                 const TextRichNetwork& net, std::span<const NodeIndex> nodes,
                                 const FinetuneConfig& cfg) {
  const std::size_t d = params.config.hidden;
  const std::size_t C = head.bias.size();
  auto reps = encode_nodes(params, net, nodes, cfg.neighbors, detail::eval_seed(cfg.seed), cfg.encode_chunk);
  std::vector<int> pred(nodes.size());
  const auto& w = head.weight.data();
  const auto& b = head.bias.data();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    int best = 0;
    double best_score = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      double s = static_cast<double>(b[c]);
      for (std::size_t k = 0; k < d; ++k) s += static_cast<double>(reps[i * d + k]) * static_cast<double>(w[k * C + c]);
      if (c == 0 || s > best_score) {
        best = static_cast<int>(c);
        best_score = s;
      }
    }
    pred[i] = best;
  }
  return pred;
}

template <class T>
struct ClassificationResult {
  ClassifierHead<T> head;
  NodeSplit split;
  FinetuneTrace trace;
  F1Scores test;
  std::vector<int> test_predictions;
  std::vector<int> test_gold;
};

/// Encoder plus a linear head trained with cross-entropy on the split's
/// training nodes; the checkpoint with the best validation Micro-F1 is kept.
template <class T>
ClassificationResult<T> finetune_classification(ModelParams<T>& params, const TextRichNetwork& net,
                                                const LabelSet& labels, const FinetuneConfig& cfg) {
  cfg.validate();
  if (labels.of_node.size() != net.size()) throw Error("classification: labels do not match the network");
  ClassificationResult<T> res;
  res.split = split_classification(labels, cfg.shots, cfg.seed, cfg.max_test);
  const std::size_t C = labels.num_labels();
  res.head = ClassifierHead<T>::init(params.config.hidden, C, cfg.seed);
  auto gold_of = [&](std::span<const NodeIndex> nodes) {
    std::vector<int> g;
    for (auto v : nodes) g.push_back(detail::primary_label(labels, v));
    return g;
  };
  const auto valid_gold = gold_of(res.split.valid);

  auto trainable = params.named();
  trainable.emplace_back("head.weight", res.head.weight);
  trainable.emplace_back("head.bias", res.head.bias);

  auto loss_fn = [&](ag::Tape<T>& tape, const std::vector<std::size_t>& idx, std::size_t step) {
    std::vector<NodeIndex> centers;
    std::vector<std::int32_t> targets;
    for (auto i : idx) {
      centers.push_back(res.split.train[i]);
      targets.push_back(detail::primary_label(labels, res.split.train[i]));
    }
    EgoBatchOptions opts;
    opts.neighbors = cfg.neighbors;
    opts.seed = derive_seed(cfg.seed, {0x6e62ULL, step});
    auto batch = make_ego_batch(net, centers, opts);
    auto enc = encode_batch(tape, batch, params, EncodeOptions{true, derive_seed(cfg.seed, {0x64726fULL, step}), false});
    auto logits = ag::linear(tape, enc.node_reps, res.head.weight, res.head.bias);
    return ag::cross_entropy_logits(tape, logits, targets);
  };
  auto valid_fn = [&] {
    auto pred = predict_classes(params, res.head, net, res.split.valid, cfg);
    return macro_micro_f1(pred, valid_gold, C).micro;
  };
  res.trace = finetune_loop(trainable, cfg, res.split.train.size(), loss_fn, valid_fn);
  res.test_gold = gold_of(res.split.test);
  res.test_predictions = predict_classes(params, res.head, net, res.split.test, cfg);
  res.test = macro_micro_f1(res.test_predictions, res.test_gold, C);
  return res;
}

// ---------------------------------------------------------------------------
// Label spaces, retrieval and reranking
// ---------------------------------------------------------------------------

struct LabelSpace {
  std::vector<TokenSequence> sequences;
  std::vector<std::vector<std::string>> words;  // normalized name tokens
  Bm25Index bm25;

  std::size_t size() const { return sequences.size(); }
};

inline LabelSpace make_label_space(const LabelSet& labels, const Vocab& vocab, std::size_t max_len) {
  if (labels.num_labels() == 0) throw Error("label space is empty");
  LabelSpace space;
  for (std::size_t i = 0; i < labels.names.size(); ++i) {
    auto words = normalize_tokens(labels.names[i]);
    if (words.empty()) throw Error("label " + std::to_string(i) + " has empty text");
    space.sequences.push_back(encode(labels.names[i], vocab, max_len));
    space.words.push_back(std::move(words));
  }
  space.bm25 = Bm25Index(space.words);
  return space;
}

/// Labels whose name occurs as a contiguous token run in the text.
inline std::vector<std::size_t> exact_matches(const LabelSpace& space, const std::vector<std::string>& text) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < space.size(); ++l) {
    const auto& name = space.words[l];
    if (name.size() > text.size()) continue;
    if (std::search(text.begin(), text.end(), name.begin(), name.end()) != text.end()) out.push_back(l);
  }
  return out;
}

/// BM25 top-n followed by exact-name matches not already present.
inline std::vector<std::size_t> rerank_candidates(const LabelSpace& space, const std::vector<std::string>& text,
                                                  std::size_t n) {
  std::vector<std::size_t> out;
  for (const auto& s : space.bm25.rank(text, n)) out.push_back(s.id);
  for (auto l : exact_matches(space, text)) {
    if (std::find(out.begin(), out.end(), l) == out.end()) out.push_back(l);
  }
  return out;
}

/// Query nodes: every labeled node, split shots / shots / rest.
inline NodeSplit split_queries(const LabelSet& labels, std::size_t shots, std::uint64_t seed, std::size_t max_test) {
  std::vector<NodeIndex> pool;
  for (NodeIndex v = 0; v < labels.of_node.size(); ++v) {
    if (labels.has_label(v)) pool.push_back(v);
  }
  if (pool.size() < 2 * shots + 1) {
    throw Error("need at least " + std::to_string(2 * shots + 1) + " labeled query nodes, found " +
                std::to_string(pool.size()));
  }
  return detail::take_shots(std::move(pool), shots, derive_seed(seed, {0x71727973ULL}), max_test);
}

/// Exhaustive dot-product ranking of every label for each query.
template <class T>
RankingRun retrieval_run(const ModelParams<T>& params, const TextRichNetwork& net, const LabelSpace& space,
                         const LabelSet& labels, std::span<const NodeIndex> queries, const FinetuneConfig& cfg) {
  const std::size_t d = params.config.hidden;
  auto L = encode_texts(params, std::span<const TokenSequence>(space.sequences), cfg.neighbors, cfg.encode_chunk);
  auto Q = encode_nodes(params, net, queries, cfg.neighbors, detail::eval_seed(cfg.seed), cfg.encode_chunk);
  RankingRun run;
  std::vector<double> scores(space.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    for (std::size_t l = 0; l < space.size(); ++l) scores[l] = dot_rows(Q, i, L, l, d);
    RankedQuery q;
    q.query_id = std::to_string(net.ids[queries[i]]);
    for (auto l : rank_by_scores(std::span<const double>(scores))) q.ranked.push_back(static_cast<ItemId>(l));
    for (int l : labels.of_node[queries[i]]) q.relevant.push_back(l);
    run.push_back(std::move(q));
  }
  return run;
}

struct RerankRun {
  RankingRun run;
  std::size_t empty_candidates = 0;
};

/// Reorders each query's candidate list by dot product; ties keep the lower
/// candidate index. Queries with no candidates are dropped and counted.
template <class T>
RerankRun rerank_run(const ModelParams<T>& params, const TextRichNetwork& net, const LabelSpace& space,
                     const LabelSet& labels, std::span<const NodeIndex> queries, const FinetuneConfig& cfg) {
  const std::size_t d = params.config.hidden;
  auto L = encode_texts(params, std::span<const TokenSequence>(space.sequences), cfg.neighbors, cfg.encode_chunk);
  auto Q = encode_nodes(params, net, queries, cfg.neighbors, detail::eval_seed(cfg.seed), cfg.encode_chunk);
  RerankRun out;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    auto cands = rerank_candidates(space, normalize_tokens(net.texts[queries[i]]), cfg.candidates);
    if (cands.empty()) {
      ++out.empty_candidates;
      continue;
    }
    std::vector<double> scores;
    for (auto l : cands) scores.push_back(dot_rows(Q, i, L, l, d));
    RankedQuery q;
    q.query_id = std::to_string(net.ids[queries[i]]);
    for (auto c : rank_by_scores(std::span<const double>(scores))) q.ranked.push_back(static_cast<ItemId>(cands[c]));
    for (int l : labels.of_node[queries[i]]) q.relevant.push_back(l);
    out.run.push_back(std::move(q));
  }
  return out;
}

/// Dual-encoder training: node [CLS] against label [CLS] with one positive,
/// BM25 hard negatives and every other label in the batch as negatives.
template <class T, class ValidFn>
FinetuneTrace train_dual_encoder(ModelParams<T>& params, const TextRichNetwork& net, const LabelSpace& space,
                                 const LabelSet& labels, std::span<const NodeIndex> train, const FinetuneConfig& cfg,
                                 ValidFn&& valid_fn) {
  std::vector<std::vector<std::size_t>> hard(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& rel = labels.of_node[train[i]];
    for (const auto& s : space.bm25.rank(normalize_tokens(net.texts[train[i]]), cfg.hard_negatives + rel.size())) {
      if (std::find(rel.begin(), rel.end(), static_cast<int>(s.id)) != rel.end()) continue;
      if (hard[i].size() < cfg.hard_negatives) hard[i].push_back(s.id);
    }
  }
  auto loss_fn = [&](ag::Tape<T>& tape, const std::vector<std::size_t>& idx, std::size_t step) {
    Rng rng(derive_seed(cfg.seed, {0x706f73ULL, step}));
    std::vector<NodeIndex> centers;
    std::vector<std::size_t> cols;  // label ids in the batch
    std::unordered_map<std::size_t, std::size_t> col_of;
    auto col = [&](std::size_t label) {
      auto [it, fresh] = col_of.emplace(label, cols.size());
      if (fresh) cols.push_back(label);
      return it->second;
    };
    std::vector<std::size_t> positive;
    for (auto i : idx) {
      centers.push_back(train[i]);
      const auto& rel = labels.of_node[train[i]];
      positive.push_back(col(static_cast<std::size_t>(rel[uniform_index(rng, rel.size())])));
    }
    for (auto i : idx) {
      for (auto h : hard[i]) col(h);
    }
    std::vector<std::vector<std::size_t>> rows;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& rel = labels.of_node[train[idx[b]]];
      std::vector<std::size_t> r{positive[b]};
      for (std::size_t c = 0; c < cols.size(); ++c) {
        if (c == positive[b]) continue;
        if (std::find(rel.begin(), rel.end(), static_cast<int>(cols[c])) != rel.end()) continue;
        r.push_back(c);
      }
      rows.push_back(std::move(r));
    }
    EgoBatchOptions opts;
    opts.neighbors = cfg.neighbors;
    opts.seed = derive_seed(cfg.seed, {0x6e62ULL, step});
    auto q = encode_batch(tape, make_ego_batch(net, centers, opts), params,
                          EncodeOptions{true, derive_seed(cfg.seed, {0x64726fULL, step}), false});
    std::vector<TokenSequence> seqs;
    for (auto l : cols) seqs.push_back(space.sequences[l]);
    auto lab = encode_batch(tape, make_text_batch(seqs, cfg.neighbors), params,
                            EncodeOptions{true, derive_seed(cfg.seed, {0x6c6162ULL, step}), false});
    auto scores = ag::matmul_nt(tape, q.node_reps, lab.node_reps);
    return listwise_loss(tape, scores, rows).loss;
  };
  return finetune_loop(params.named(), cfg, train.size(), loss_fn, valid_fn);
}

struct RetrievalResult {
  NodeSplit split;
  FinetuneTrace trace;
  RankingRun test_run;
  MetricResult recall50, recall100;
};

template <class T>
RetrievalResult finetune_retrieval(ModelParams<T>& params, const TextRichNetwork& net, const LabelSet& labels,
                                   const LabelSpace& space, const FinetuneConfig& cfg) {
  cfg.validate();
  if (labels.num_labels() != space.size()) throw Error("retrieval: label space does not match the labels");
  RetrievalResult res;
  res.split = split_queries(labels, cfg.shots, cfg.seed, cfg.max_test);
  auto valid_fn = [&] {
    return recall_at_k(retrieval_run(params, net, space, labels, res.split.valid, cfg), 100).value;
  };
  res.trace = train_dual_encoder(params, net, space, labels, res.split.train, cfg, valid_fn);
  res.test_run = retrieval_run(params, net, space, labels, res.split.test, cfg);
  res.recall50 = recall_at_k(res.test_run, 50);
  res.recall100 = recall_at_k(res.test_run, 100);
  return res;
}

struct RerankResult {
  NodeSplit split;
  FinetuneTrace trace;
  RerankRun test_run;
  MetricResult ndcg5, ndcg10;
};

template <class T>
RerankResult finetune_rerank(ModelParams<T>& params, const TextRichNetwork& net, const LabelSet& labels,
                             const LabelSpace& space, const FinetuneConfig& cfg) {
  cfg.validate();
  if (labels.num_labels() != space.size()) throw Error("rerank: label space does not match the labels");
  RerankResult res;
  res.split = split_queries(labels, cfg.shots, cfg.seed, cfg.max_test);
  auto valid_fn = [&] { return ndcg_at_k(rerank_run(params, net, space, labels, res.split.valid, cfg).run, 10).value; };
  res.trace = train_dual_encoder(params, net, space, labels, res.split.train, cfg, valid_fn);
  res.test_run = rerank_run(params, net, space, labels, res.split.test, cfg);
  res.ndcg5 = ndcg_at_k(res.test_run.run, 5);
  res.ndcg10 = ndcg_at_k(res.test_run.run, 10);
  return res;
}

// ---------------------------------------------------------------------------
// Link prediction
// ---------------------------------------------------------------------------

struct PairSplit {
  std::vector<Edge> train, valid, test;
};

/// Canonical (min, max) pairs without loops or duplicates, split
/// shots / shots / rest after a seeded shuffle.
inline PairSplit split_pairs(std::vector<Edge> edges, std::size_t shots, std::uint64_t seed, std::size_t max_test = 0) {
  for (auto& e : edges) {
    if (e.first > e.second) std::swap(e.first, e.second);
  }
  edges.erase(std::remove_if(edges.begin(), edges.end(), [](const Edge& e) { return e.first == e.second; }),
              edges.end());
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  if (edges.size() < 2 * shots + 2) {
    throw Error("link prediction: " + std::to_string(edges.size()) + " pairs, need at least " +
                std::to_string(2 * shots + 2));
  }
  Rng rng(derive_seed(seed, {0x70616972ULL}));
  shuffle(edges, rng);
  PairSplit s;
  s.train.assign(edges.begin(), edges.begin() + static_cast<std::ptrdiff_t>(shots));
  s.valid.assign(edges.begin() + static_cast<std::ptrdiff_t>(shots), edges.begin() + static_cast<std::ptrdiff_t>(2 * shots));
  s.test.assign(edges.begin() + static_cast<std::ptrdiff_t>(2 * shots), edges.end());
  if (max_test && s.test.size() > max_test) s.test.resize(max_test);
  for (auto* part : {&s.train, &s.valid, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

/// "<source_id>\t<target_id>\t<split>" per pair, sorted.
inline void write_pair_split(const std::string& path, const TextRichNetwork& net, const PairSplit& split) {
  std::vector<std::tuple<std::uint64_t, std::uint64_t, const char*>> rows;
  for (auto [u, v] : split.train) rows.emplace_back(net.ids[u], net.ids[v], "train");
  for (auto [u, v] : split.valid) rows.emplace_back(net.ids[u], net.ids[v], "valid");
  for (auto [u, v] : split.test) rows.emplace_back(net.ids[u], net.ids[v], "test");
  std::sort(rows.begin(), rows.end());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (const auto& [u, v, s] : rows) out << u << '\t' << v << '\t' << s << '\n';
}

/// Queries of one in-batch block: row i of the [n x n] score matrix ranks
/// the n targets, the true target of source i is target i. Item ids are
/// offset + target index; ties go to the lower index.
inline std::vector<RankedQuery> inbatch_queries(std::span<const double> scores, std::size_t n, std::size_t offset = 0) {
  if (n < 2) throw Error("link prediction: evaluation batch must hold at least 2 pairs");
  if (scores.size() != n * n) throw Error("inbatch_queries: score matrix is not n x n");
  std::vector<RankedQuery> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].query_id = std::to_string(offset + i);
    for (auto j : rank_by_scores(scores.subspan(i * n, n))) out[i].ranked.push_back(static_cast<ItemId>(offset + j));
    out[i].relevant.push_back(static_cast<ItemId>(offset + i));
  }
  return out;
}

struct InBatchRun {
  RankingRun run;
  std::size_t dropped = 0;  // trailing pair that could not form a batch of 2
};

/// In-batch evaluation: pairs are put in canonical order, shuffled with the
/// seed and cut into batches of `batch`; each source ranks its true target
/// against every target in its batch (ties to the lower index).
template <class T>
InBatchRun inbatch_run(const ModelParams<T>& params, const TextRichNetwork& net, std::vector<Edge> pairs,
                       std::size_t batch, const FinetuneConfig& cfg) {
  if (batch < 2) throw Error("link prediction: evaluation batch must hold at least 2 pairs");
  std::sort(pairs.begin(), pairs.end());
  Rng rng(derive_seed(cfg.seed, {0x62617463ULL}));
  shuffle(pairs, rng);
  std::vector<NodeIndex> nodes;
  for (auto [u, v] : pairs) {
    nodes.push_back(u);
    nodes.push_back(v);
  }
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  std::unordered_map<NodeIndex, std::size_t> row;
  for (std::size_t i = 0; i < nodes.size(); ++i) row[nodes[i]] = i;
  const std::size_t d = params.config.hidden;
  auto reps = encode_nodes(params, net, nodes, cfg.neighbors, detail::eval_seed(cfg.seed), cfg.encode_chunk);
  InBatchRun out;
  for (std::size_t start = 0; start < pairs.size(); start += batch) {
    const std::size_t n = std::min(batch, pairs.size() - start);
    if (n < 2) {
      out.dropped += n;
      continue;
    }
    std::vector<double> scores(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        scores[i * n + j] = dot_rows(reps, row[pairs[start + i].first], reps, row[pairs[start + j].second], d);
      }
    }
    auto queries = inbatch_queries(scores, n, start);
    for (std::size_t i = 0; i < n; ++i) {
      const auto [u, v] = pairs[start + i];
      queries[i].query_id = std::to_string(net.ids[u]) + "-" + std::to_string(net.ids[v]);
      out.run.push_back(std::move(queries[i]));
    }
  }
  return out;
}

struct LinkPredResult {
  PairSplit split;
  FinetuneTrace trace;
  InBatchRun test_run;
  Prec1Mrr test;
};

/// Finetunes with the in-batch contrastive link loss on the new edge type.
template <class T>
LinkPredResult finetune_linkpred(ModelParams<T>& params, const TextRichNetwork& net, const std::vector<Edge>& edges,
                                 const FinetuneConfig& cfg) {
  cfg.validate();
  LinkPredResult res;
  res.split = split_pairs(edges, cfg.shots, cfg.seed, cfg.max_test);
  auto loss_fn = [&](ag::Tape<T>& tape, const std::vector<std::size_t>& idx, std::size_t step) {
    std::vector<Edge> pairs;
    for (auto i : idx) pairs.push_back(res.split.train[i]);
    EgoBatchOptions opts;
    opts.neighbors = cfg.neighbors;
    opts.seed = derive_seed(cfg.seed, {0x6e62ULL, step});
    auto batch = make_pretrain_batch(net, pairs, opts);
    auto enc = encode_batch(tape, batch, params, EncodeOptions{true, derive_seed(cfg.seed, {0x64726fULL, step}), false});
    return mnp_loss(tape, enc.node_reps, batch.positive_pairs).loss;
  };
  auto valid_fn = [&] { return prec1_mrr(inbatch_run(params, net, res.split.valid, cfg.valid_batch, cfg).run).mrr; };
  res.trace = finetune_loop(params.named(), cfg, res.split.train.size(), loss_fn, valid_fn);
  res.test_run = inbatch_run(params, net, res.split.test, cfg.test_batch, cfg);
  res.test = prec1_mrr(res.test_run.run);
  return res;
}

// ---------------------------------------------------------------------------
// Attention inspection
// ---------------------------------------------------------------------------

/// Attention rows of one node encoded with its sampled neighbors in
/// evaluation mode, every layer, every non-padding query token.
template <class T>
std::vector<AttentionMapRow> attention_map(const ModelParams<T>& params, const TextRichNetwork& net, NodeIndex v,
                                           std::size_t window, std::size_t neighbors, std::uint64_t seed) {
  EgoBatchOptions opts;
  opts.neighbors = neighbors;
  opts.seed = detail::eval_seed(seed);
  opts.seed_by_node = true;
  const NodeIndex centers[] = {v};
  ag::Tape<T> tape(false);
  auto enc = encode_batch(tape, make_ego_batch(net, centers, opts), params, EncodeOptions{false, 0, true});
  return dump_attention(enc.activations, window);
}

/// Mean probability on the virtual token over layers, query tokens and
/// nodes.
template <class T>
double mean_virtual_attention(const ModelParams<T>& params, const TextRichNetwork& net,
                              std::span<const NodeIndex> nodes, std::size_t neighbors, std::uint64_t seed) {
  double sum = 0.0;
  std::size_t count = 0;
  for (auto v : nodes) {
    for (const auto& row : attention_map(params, net, v, 0, neighbors, seed)) {
      sum += row.weights[0];
      ++count;
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace netpretrain
