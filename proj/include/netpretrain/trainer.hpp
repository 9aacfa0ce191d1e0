// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pretraining driver: epochs over the undirected edge list, one MNP pair per
// edge per epoch with a random direction, NMLM masks drawn per step. Every
// random choice is keyed on (seed, epoch) or (seed, step), so a run resumed
// from a checkpoint replays the remaining steps exactly.

#include <cmath>
#include <filesystem>
#include <functional>
#include <future>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "netpretrain/checkpoint.hpp"
#include "netpretrain/objectives.hpp"
#include "netpretrain/random.hpp"

namespace netpretrain {

struct PretrainConfig {
  Objective objective = Objective::kJoint;
  std::size_t epochs = 10;
  std::size_t max_steps = 0;  // overrides epochs when set
  std::size_t batch_size = 512;  // edges per step; the batch holds 2x nodes
  double lr = 1e-5;
  double warmup_epochs = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double mask_ratio = kDefaultMaskRatio;
  std::size_t neighbors = kDefaultNeighbors;
  std::size_t checkpoint_every = 0;  // 0 = only at the end
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0 && max_steps == 0) throw Error("pretrain.epochs must be positive");
    if (batch_size == 0) throw Error("pretrain.batch_size must be positive");
    if (!(lr > 0)) throw Error("pretrain.lr must be positive");
    if (warmup_epochs < 0) throw Error("pretrain.warmup_epochs must be non-negative");
    if (!(mask_ratio > 0 && mask_ratio < 1)) throw Error("pretrain.mask_ratio must lie in (0, 1)");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw Error("pretrain betas must lie in [0, 1)");
  }
};

struct StepLog {
  std::size_t step = 0;
  PretrainStepOutput out;
};

inline nlohmann::ordered_json to_json(const StepLog& s) {
  return {{"step", s.step},          {"nmlm", s.out.nmlm_loss}, {"mnp", s.out.mnp_loss},
          {"total", s.out.total},    {"lr", s.out.lr},          {"masked_acc", s.out.masked_acc},
          {"inbatch_prec1", s.out.inbatch_prec1}};
}

/// Every undirected edge once, as (min, max).
inline std::vector<Edge> undirected_edges(const TextRichNetwork& net) {
  std::vector<Edge> out;
  for (NodeIndex u = 0; u < net.size(); ++u) {
    for (auto v : net.adjacency[u]) {
      if (u < v) out.emplace_back(u, v);
    }
  }
  return out;
}

/// Step arithmetic and batch construction, independent of model state.
class PretrainSchedule {
 public:
  PretrainSchedule(const TextRichNetwork& net, const PretrainConfig& cfg, std::size_t vocab_size)
      : net_(&net), cfg_(cfg), vocab_size_(vocab_size), edges_(undirected_edges(net)) {
    cfg_.validate();
    if (edges_.empty()) throw Error("pretraining needs at least one edge");
    steps_per_epoch_ = (edges_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    total_steps_ = cfg_.max_steps ? cfg_.max_steps : cfg_.epochs * steps_per_epoch_;
  }

  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::size_t total_steps() const { return total_steps_; }
  std::size_t edge_count() const { return edges_.size(); }

  AdamWConfig adam() const {
    AdamWConfig a;
    a.lr = cfg_.lr;
    a.beta1 = cfg_.beta1;
    a.beta2 = cfg_.beta2;
    a.eps = cfg_.eps;
    a.weight_decay = cfg_.weight_decay;
    a.clip_norm = cfg_.clip_norm;
    const double epochs = static_cast<double>(total_steps_) / static_cast<double>(steps_per_epoch_);
    a.warmup_fraction = std::min(1.0, cfg_.warmup_epochs / epochs);
    return a;
  }

  /// Edge pairs of a 1-based step: the epoch's shuffled edge list, cut into
  /// consecutive batches, each edge oriented by a per-epoch coin flip.
  std::vector<Edge> pairs(std::size_t step) const {
    const std::size_t epoch = (step - 1) / steps_per_epoch_;
    const std::size_t pos = (step - 1) % steps_per_epoch_;
    std::vector<std::size_t> order(edges_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg_.seed, {0x65646765ULL, epoch}));
    shuffle(order, rng);
    const std::size_t begin = pos * cfg_.batch_size;
    const std::size_t end = std::min(order.size(), begin + cfg_.batch_size);
    std::vector<Edge> out;
    for (std::size_t i = begin; i < end; ++i) {
      auto e = edges_[order[i]];
      Rng flip(derive_seed(cfg_.seed, {0x666c6970ULL, epoch, order[i]}));
      if (flip() & 1) std::swap(e.first, e.second);
      out.push_back(e);
    }
    return out;
  }

  EgoBatch batch(std::size_t step) const {
    EgoBatchOptions opts;
    opts.neighbors = cfg_.neighbors;
    opts.mlm = cfg_.objective != Objective::kMnpOnly;
    opts.mask_ratio = cfg_.mask_ratio;
    opts.vocab_size = vocab_size_;
    opts.seed = derive_seed(cfg_.seed, {0x62617463ULL, step});
    return make_pretrain_batch(*net_, pairs(step), opts);
  }

  std::uint64_t dropout_seed(std::size_t step) const { return derive_seed(cfg_.seed, {0x64726f70ULL, step}); }

 private:
  const TextRichNetwork* net_;
  PretrainConfig cfg_;
  std::size_t vocab_size_;
  std::vector<Edge> edges_;
  std::size_t steps_per_epoch_ = 0;
  std::size_t total_steps_ = 0;
};

struct TrainerHooks {
  std::function<void(const StepLog&)> on_step;
  /// Called with the step whenever a checkpoint is due.
  std::function<void(std::size_t)> on_checkpoint;
  /// Build the next step's batch on a second thread while this one trains.
  bool prefetch = false;
};

/// Runs steps first_step..last_step (1-based, inclusive) on `params` and
/// `optimizer`. Checkpoints are due every checkpoint_every steps and at the
/// schedule's final step.
template <class T>
void run_pretraining(const PretrainSchedule& schedule, const PretrainConfig& cfg, ModelParams<T>& params,
                     AdamState<T>& optimizer, std::size_t first_step, std::size_t last_step,
                     const TrainerHooks& hooks = {}) {
  const auto adam = schedule.adam();
  const std::size_t total = schedule.total_steps();
  last_step = std::min(last_step, total);
  std::future<EgoBatch> next;
  if (hooks.prefetch && first_step <= last_step) {
    next = std::async(std::launch::async, [&schedule, first_step] { return schedule.batch(first_step); });
  }
  for (std::size_t step = first_step; step <= last_step; ++step) {
    EgoBatch batch = next.valid() ? next.get() : schedule.batch(step);
    if (hooks.prefetch && step < last_step) {
      next = std::async(std::launch::async, [&schedule, step] { return schedule.batch(step + 1); });
    }
    const double lr = scheduled_lr(adam, step, total);
    StepLog log{step, joint_step(batch, params, optimizer, adam, lr, cfg.objective, schedule.dropout_seed(step))};
    if (hooks.on_step) hooks.on_step(log);
    const bool due = (cfg.checkpoint_every && step % cfg.checkpoint_every == 0) || step == total;
    if (due && hooks.on_checkpoint) hooks.on_checkpoint(step);
  }
}

}  // namespace netpretrain
