// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: a JSON document with sections model / pretrain / task /
// data / output plus a top-level seed. Unknown keys are errors. Relative data
// paths resolve against the config file's directory.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "netpretrain/downstream.hpp"
#include "netpretrain/graphformer.hpp"
#include "netpretrain/trainer.hpp"

namespace netpretrain {

/// Bad or inconsistent configuration (command line exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

struct DataConfig {
  std::string nodes;
  std::string edges;
  std::string vocab;
  std::string class_labels;      // classification labels, "<node_id>\t<label_id>"
  std::string class_names;       // "<label_id>\t<name>"
  std::string retrieval_labels;  // retrieval / rerank relevance
  std::string retrieval_names;
  std::string linkpred_edges;    // second edge type
  std::size_t min_count = 1;
  std::size_t max_vocab = 100000;
};

struct RunConfig {
  ModelConfig model;  // vocab_size 0 = taken from the vocabulary file
  PretrainConfig pretrain;
  nlohmann::json task_overrides = nlohmann::json::object();
  DataConfig data;
  std::string output_dir = "out";
  std::uint64_t seed = 0;

  /// Finetuning settings: the task's defaults, then the config's task keys.
  FinetuneConfig finetune(TaskKind kind) const;
};

namespace detail {

template <class T>
T json_as(const nlohmann::json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
        throw ConfigError(key + " must be a non-negative integer");
      }
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(key + " must be a number");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key + " must be true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(key + " must be a string");
    }
    return v.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

/// Binds JSON keys of one section to fields; anything unbound is rejected.
class Section {
 public:
  Section(std::string name, const nlohmann::json& j) : name_(std::move(name)), j_(j) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <class T>
  Section& bind(const std::string& key, T& field) {
    known_.push_back(key);
    if (j_.contains(key)) field = json_as<T>(j_.at(key), name_ + "." + key);
    return *this;
  }

  Section& bind_fn(const std::string& key, const std::function<void(const nlohmann::json&)>& fn) {
    known_.push_back(key);
    if (j_.contains(key)) fn(j_.at(key));
    return *this;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (std::find(known_.begin(), known_.end(), k) == known_.end()) {
        throw ConfigError("unknown config key '" + name_ + "." + k + "'");
      }
    }
  }

 private:
  std::string name_;
  const nlohmann::json& j_;
  std::vector<std::string> known_;
};

inline void bind_model(Section& s, ModelConfig& m) {
  s.bind("vocab_size", m.vocab_size)
      .bind("max_len", m.max_len)
      .bind("hidden", m.hidden)
      .bind("layers", m.layers)
      .bind("heads", m.heads)
      .bind("mlp_ratio", m.mlp_ratio)
      .bind("dropout", m.dropout)
      .bind("ln_eps", m.ln_eps)
      .bind("init_std", m.init_std)
      .bind("aggregate_self", m.aggregate_self);
}

inline void bind_pretrain(Section& s, PretrainConfig& p) {
  s.bind_fn("objective", [&](const nlohmann::json& v) {
       try {
         p.objective = parse_objective(json_as<std::string>(v, "pretrain.objective"));
       } catch (const ConfigError&) {
         throw;
       } catch (const Error& e) {
         throw ConfigError(std::string("pretrain.objective: ") + e.what());
       }
     })
      .bind("epochs", p.epochs)
      .bind("max_steps", p.max_steps)
      .bind("batch_size", p.batch_size)
      .bind("lr", p.lr)
      .bind("warmup_epochs", p.warmup_epochs)
      .bind("beta1", p.beta1)
      .bind("beta2", p.beta2)
      .bind("eps", p.eps)
      .bind("weight_decay", p.weight_decay)
      .bind("clip_norm", p.clip_norm)
      .bind("mask_ratio", p.mask_ratio)
      .bind("neighbors", p.neighbors)
      .bind("checkpoint_every", p.checkpoint_every);
}

inline void bind_task(Section& s, FinetuneConfig& t) {
  s.bind("shots", t.shots)
      .bind("epochs", t.epochs)
      .bind("max_steps", t.max_steps)
      .bind("lr", t.lr)
      .bind("warmup_fraction", t.warmup_fraction)
      .bind("weight_decay", t.weight_decay)
      .bind("clip_norm", t.clip_norm)
      .bind("batch_size", t.batch_size)
      .bind("eval_every", t.eval_every)
      .bind("neighbors", t.neighbors)
      .bind("hard_negatives", t.hard_negatives)
      .bind("candidates", t.candidates)
      .bind("test_batch", t.test_batch)
      .bind("valid_batch", t.valid_batch)
      .bind("max_test", t.max_test)
      .bind("encode_chunk", t.encode_chunk);
}

inline void bind_data(Section& s, DataConfig& d) {
  s.bind("nodes", d.nodes)
      .bind("edges", d.edges)
      .bind("vocab", d.vocab)
      .bind("class_labels", d.class_labels)
      .bind("class_names", d.class_names)
      .bind("retrieval_labels", d.retrieval_labels)
      .bind("retrieval_names", d.retrieval_names)
      .bind("linkpred_edges", d.linkpred_edges)
      .bind("min_count", d.min_count)
      .bind("max_vocab", d.max_vocab);
}

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base) {
  if (p.empty()) return p;
  const std::filesystem::path path(p);
  return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

}  // namespace detail

inline FinetuneConfig RunConfig::finetune(TaskKind kind) const {
  FinetuneConfig t = FinetuneConfig::defaults(kind);
  detail::Section s("task", task_overrides);
  detail::bind_task(s, t);
  s.finish();
  t.seed = seed;
  return t;
}

/// Published large-scale defaults where they exist, desk-scale model size.
inline RunConfig default_run_config() {
  RunConfig c;
  c.model.max_len = kDefaultMaxLen;
  return c;
}

/// Applies a JSON document on top of `c`. `base` resolves relative data
/// paths.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j, const std::filesystem::path& base) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (k != "model" && k != "pretrain" && k != "task" && k != "data" && k != "output" && k != "seed") {
      throw ConfigError("unknown config key '" + k + "'");
    }
  }
  if (j.contains("seed")) c.seed = detail::json_as<std::uint64_t>(j.at("seed"), "seed");
  if (j.contains("model")) {
    detail::Section s("model", j.at("model"));
    detail::bind_model(s, c.model);
    s.finish();
  }
  if (j.contains("pretrain")) {
    detail::Section s("pretrain", j.at("pretrain"));
    detail::bind_pretrain(s, c.pretrain);
    s.finish();
  }
  if (j.contains("task")) {
    FinetuneConfig probe;
    detail::Section s("task", j.at("task"));
    detail::bind_task(s, probe);
    s.finish();
    for (const auto& [k, v] : j.at("task").items()) c.task_overrides[k] = v;
  }
  if (j.contains("data")) {
    DataConfig d = c.data;
    detail::Section s("data", j.at("data"));
    detail::bind_data(s, d);
    s.finish();
    for (auto* p : {&d.nodes, &d.edges, &d.vocab, &d.class_labels, &d.class_names, &d.retrieval_labels,
                    &d.retrieval_names, &d.linkpred_edges}) {
      *p = detail::resolve_path(*p, base);
    }
    c.data = d;
  }
  if (j.contains("output")) {
    std::string dir = c.output_dir;
    detail::Section s("output", j.at("output"));
    s.bind("dir", dir);
    s.finish();
    c.output_dir = detail::resolve_path(dir, base);
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig c = default_run_config();
  apply_config_json(c, j, path.parent_path());
  return c;
}

/// "section.key=value" override from the command line. The value is parsed
/// as JSON when possible, otherwise taken as a string.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects section.key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json doc = nlohmann::json::object();
  const auto dot = key.find('.');
  if (dot == std::string::npos) {
    doc[key] = value;
  } else {
    doc[key.substr(0, dot)][key.substr(dot + 1)] = value;
  }
  apply_config_json(c, doc, std::filesystem::current_path());
}

inline nlohmann::ordered_json to_json(const RunConfig& c, std::optional<TaskKind> task = std::nullopt) {
  const auto& m = c.model;
  const auto& p = c.pretrain;
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["model"] = {{"vocab_size", m.vocab_size}, {"max_len", m.max_len},   {"hidden", m.hidden},
                {"layers", m.layers},         {"heads", m.heads},       {"mlp_ratio", m.mlp_ratio},
                {"dropout", m.dropout},       {"ln_eps", m.ln_eps},     {"init_std", m.init_std},
                {"aggregate_self", m.aggregate_self}};
  j["pretrain"] = {{"objective", to_string(p.objective)},
                   {"epochs", p.epochs},
                   {"max_steps", p.max_steps},
                   {"batch_size", p.batch_size},
                   {"lr", p.lr},
                   {"warmup_epochs", p.warmup_epochs},
                   {"beta1", p.beta1},
                   {"beta2", p.beta2},
                   {"eps", p.eps},
                   {"weight_decay", p.weight_decay},
                   {"clip_norm", p.clip_norm},
                   {"mask_ratio", p.mask_ratio},
                   {"neighbors", p.neighbors},
                   {"checkpoint_every", p.checkpoint_every}};
  if (task) {
    const auto t = c.finetune(*task);
    j["task"] = {{"shots", t.shots},
                 {"epochs", t.epochs},
                 {"max_steps", t.max_steps},
                 {"lr", t.lr},
                 {"warmup_fraction", t.warmup_fraction},
                 {"weight_decay", t.weight_decay},
                 {"clip_norm", t.clip_norm},
                 {"batch_size", t.batch_size},
                 {"eval_every", t.eval_every},
                 {"neighbors", t.neighbors},
                 {"hard_negatives", t.hard_negatives},
                 {"candidates", t.candidates},
                 {"test_batch", t.test_batch},
                 {"valid_batch", t.valid_batch},
                 {"max_test", t.max_test},
                 {"encode_chunk", t.encode_chunk}};
  } else {
    j["task"] = c.task_overrides;
  }
  const auto& d = c.data;
  j["data"] = {{"nodes", d.nodes},
               {"edges", d.edges},
               {"vocab", d.vocab},
               {"class_labels", d.class_labels},
               {"class_names", d.class_names},
               {"retrieval_labels", d.retrieval_labels},
               {"retrieval_names", d.retrieval_names},
               {"linkpred_edges", d.linkpred_edges},
               {"min_count", d.min_count},
               {"max_vocab", d.max_vocab}};
  j["output"] = {{"dir", c.output_dir}};
  return j;
}

/// FNV-1a 64 of the resolved config with the output directory removed, as
/// 16 hex digits.
inline std::string config_digest(nlohmann::ordered_json resolved) {
  resolved.erase("output");
  const std::string s = resolved.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace netpretrain
