// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// netpretrain: gen | build-vocab | pretrain | finetune <task> | eval-run |
// dump-attention. Exit codes: 0 success, 2 bad configuration or inputs, 3
// non-finite loss, 1 anything else.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "netpretrain/netpretrain.hpp"

namespace fs = std::filesystem;
namespace np = netpretrain;
using nlohmann::ordered_json;

namespace {

struct InputError : np::Error {
  using np::Error::Error;
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw InputError(what + " is not configured");
  if (!fs::exists(path)) throw InputError(what + " not found: " + path);
}

/// Writes through a temporary file so a partial artifact never appears.
void write_atomic(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw np::Error("cannot write " + tmp.string());
    out << content;
    if (!out) throw np::Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::size_t worker_threads() {
  if (const char* v = std::getenv("NETPRETRAIN_THREADS")) {
    try {
      const long n = std::stol(v);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
    throw np::ConfigError(std::string("NETPRETRAIN_THREADS must be a positive integer, got '") + v + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Options shared by the config-driven subcommands.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "Run configuration (JSON)")->required();
    app->add_option("--set", sets, "Override a config key, section.key=value");
    app->add_option("--seed", seed, "Override the seed");
    app->add_option("--out", out, "Output directory (overrides output.dir)");
  }

  np::RunConfig resolve() const {
    auto c = np::load_run_config(config);
    for (const auto& s : sets) np::apply_override(c, s);
    if (seed) c.seed = *seed;
    if (!out.empty()) c.output_dir = fs::absolute(out).string();
    c.pretrain.seed = c.seed;
    return c;
  }
};

np::Vocab load_vocab(const np::RunConfig& c) {
  require_file(c.data.vocab, "data.vocab");
  return np::Vocab::load(c.data.vocab);
}

np::TextRichNetwork load_net(const np::RunConfig& c, const np::Vocab& vocab) {
  require_file(c.data.nodes, "data.nodes");
  require_file(c.data.edges, "data.edges");
  return np::load_network(c.data.nodes, c.data.edges, vocab, c.model.max_len);
}

np::ModelConfig model_config(const np::RunConfig& c, const np::Vocab& vocab) {
  auto m = c.model;
  if (m.vocab_size != 0 && m.vocab_size != vocab.size()) {
    throw np::ConfigError("model.vocab_size is " + std::to_string(m.vocab_size) + " but the vocabulary has " +
                          std::to_string(vocab.size()) + " entries");
  }
  m.vocab_size = vocab.size();
  try {
    m.validate();
  } catch (const np::Error& e) {
    throw np::ConfigError(e.what());
  }
  return m;
}

void write_resolved(const fs::path& dir, ordered_json resolved) {
  write_atomic(dir / "config.resolved.json", resolved.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::uint64_t seed = 7;
  std::string out = "data";
  std::string synth_config;
};

/// Desk-scale run configuration for a generated dataset.
ordered_json desk_config(std::uint64_t seed) {
  return {{"seed", seed},
          {"model", {{"max_len", 16}, {"hidden", 32}, {"layers", 2}, {"heads", 2}, {"dropout", 0.1}}},
          {"pretrain",
           {{"objective", "joint"},
            {"max_steps", 1000},
            {"batch_size", 32},
            {"lr", 3e-3},
            {"warmup_epochs", 0.5},
            {"checkpoint_every", 500}}},
          {"task", {{"epochs", 50}, {"lr", 1e-3}, {"eval_every", 10}}},
          {"data",
           {{"nodes", np::SynthFiles::kNodes},
            {"edges", np::SynthFiles::kEdges},
            {"vocab", "vocab.txt"},
            {"class_labels", np::SynthFiles::kCoarseLabels},
            {"class_names", np::SynthFiles::kCoarseNames},
            {"retrieval_labels", np::SynthFiles::kFineLabels},
            {"retrieval_names", np::SynthFiles::kFineNames},
            {"linkpred_edges", np::SynthFiles::kLinkEdges}}},
          {"output", {{"dir", "run"}}}};
}

int cmd_gen(const GenArgs& a) {
  np::SynthConfig cfg;
  if (!a.synth_config.empty()) {
    require_file(a.synth_config, "synthetic config");
    std::ifstream in(a.synth_config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw np::ConfigError(a.synth_config + ": " + e.what());
    }
    cfg = np::synth_config_from_json(j);
  }
  cfg.seed = a.seed;
  try {
    cfg.validate();
  } catch (const np::Error& e) {
    throw np::ConfigError(e.what());
  }
  const auto ds = np::generate_network(cfg);
  np::write_dataset(ds, a.out);
  write_atomic(fs::path(a.out) / "config.json", desk_config(a.seed).dump(2) + "\n");
  std::cout << "wrote " << ds.texts.size() << " nodes, " << ds.edges.size() << " edges, " << ds.fine_edges.size()
            << " link-prediction pairs to " << a.out << "\n";
  return 0;
}

int cmd_build_vocab(const Common& common) {
  auto c = common.resolve();
  require_file(c.data.nodes, "data.nodes");
  if (c.data.vocab.empty()) throw np::ConfigError("data.vocab is not configured");
  const auto texts = np::load_nodes(c.data.nodes, np::Vocab{}, 2).texts;
  const auto vocab = np::build_vocab(texts, c.data.min_count, c.data.max_vocab);
  const fs::path tmp = c.data.vocab + ".tmp";
  vocab.save(tmp.string());
  fs::rename(tmp, c.data.vocab);
  std::cout << "vocabulary of " << vocab.size() << " entries written to " << c.data.vocab << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct PretrainArgs {
  Common common;
  std::string objective;
  bool resume = false;
  std::optional<std::size_t> stop_after;
};

int cmd_pretrain(const PretrainArgs& a) {
  auto c = a.common.resolve();
  if (!a.objective.empty()) {
    try {
      c.pretrain.objective = np::parse_objective(a.objective);
    } catch (const np::Error& e) {
      throw np::ConfigError(e.what());
    }
  }
  try {
    c.pretrain.validate();
  } catch (const np::Error& e) {
    throw np::ConfigError(e.what());
  }
  const auto vocab = load_vocab(c);
  const auto net = load_net(c, vocab);
  c.model = model_config(c, vocab);
  const fs::path dir = c.output_dir;
  fs::create_directories(dir);
  const auto resolved = np::to_json(c);
  write_resolved(dir, resolved);

  np::PretrainSchedule schedule(net, c.pretrain, vocab.size());
  auto params = np::ModelParams<float>::init(c.model, c.seed);
  auto optimizer = np::AdamState<float>::zeros_like(params.named());
  std::size_t first = 1;
  const fs::path log_path = dir / "train.log.jsonl";
  std::vector<std::string> kept_log;
  if (a.resume) {
    if (auto last = np::latest_checkpoint(dir)) {
      const auto info = np::load_checkpoint(np::checkpoint_paths(dir, *last).manifest, params, &optimizer);
      if (info.extra.value("config_digest", std::string()) != np::config_digest(resolved)) {
        throw np::ConfigError("cannot resume: " + np::checkpoint_stem(*last) + " was written with a different config");
      }
      first = info.step + 1;
      std::ifstream in(log_path);
      for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        if (nlohmann::json::parse(line).at("step").get<std::size_t>() <= info.step) kept_log.push_back(line);
      }
      std::cout << "resuming after step " << info.step << "\n";
    }
  }
  {
    std::ofstream log(log_path, std::ios::trunc);
    for (const auto& l : kept_log) log << l << '\n';
  }
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw np::Error("cannot write " + log_path.string());

  const std::size_t total = schedule.total_steps();
  const std::size_t last = a.stop_after ? std::min(total, *a.stop_after) : total;
  np::TrainerHooks hooks;
  hooks.prefetch = worker_threads() > 1;
  hooks.on_step = [&](const np::StepLog& s) {
    log << np::to_json(s).dump() << '\n';
    log.flush();
  };
  auto save = [&](std::size_t step) {
    np::CheckpointInfo info;
    info.step = step;
    nlohmann::json model = resolved["model"];
    model["vocab_size"] = c.model.vocab_size;
    info.model = model;
    info.extra = {{"objective", np::to_string(c.pretrain.objective)},
                  {"config_digest", np::config_digest(resolved)},
                  {"seed", c.seed}};
    np::save_checkpoint(dir, params, info, &optimizer);
  };
  hooks.on_checkpoint = save;
  np::run_pretraining(schedule, c.pretrain, params, optimizer, first, last, hooks);
  if (last < total && (c.pretrain.checkpoint_every == 0 || last % c.pretrain.checkpoint_every != 0) && last >= first) {
    save(last);
  }
  std::cout << "pretrained " << np::to_string(c.pretrain.objective) << " for " << last << "/" << total << " steps, "
            << "checkpoints in " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct FinetuneArgs {
  Common common;
  std::string task;
  std::string checkpoint;
  std::optional<std::size_t> shots;
};

np::ModelParams<float> load_encoder(const np::RunConfig& c, const std::string& checkpoint, std::size_t& step) {
  auto params = np::ModelParams<float>::init(c.model, c.seed);
  step = 0;
  if (checkpoint == "none") return params;
  const auto paths = np::resolve_checkpoint(checkpoint);
  require_file(paths.manifest.string(), "checkpoint manifest");
  require_file(paths.blob.string(), "checkpoint blob");
  step = np::load_checkpoint(checkpoint, params).step;
  return params;
}

int cmd_finetune(const FinetuneArgs& a) {
  auto c = a.common.resolve();
  np::TaskKind kind;
  try {
    kind = np::parse_task(a.task);
  } catch (const np::Error& e) {
    throw np::ConfigError(e.what());
  }
  if (a.shots) c.task_overrides["shots"] = *a.shots;
  np::FinetuneConfig ft;
  try {
    ft = c.finetune(kind);
    ft.validate();
  } catch (const np::ConfigError&) {
    throw;
  } catch (const np::Error& e) {
    throw np::ConfigError(e.what());
  }
  const auto vocab = load_vocab(c);
  const auto net = load_net(c, vocab);
  c.model = model_config(c, vocab);
  const fs::path dir = c.output_dir;
  fs::create_directories(dir);
  auto resolved = np::to_json(c, kind);
  resolved["checkpoint"] = a.checkpoint;
  write_resolved(dir, resolved);

  std::size_t pre_step = 0;
  auto params = load_encoder(c, a.checkpoint, pre_step);
  np::EvalReport report;
  report.task = np::to_string(kind);
  report.config_digest = np::config_digest(resolved);
  report.seed = c.seed;
  report.details["checkpoint"] = a.checkpoint;
  report.details["pretrained_step"] = pre_step;
  report.details["shots"] = ft.shots;

  switch (kind) {
    case np::TaskKind::kClassify: {
      require_file(c.data.class_labels, "data.class_labels");
      require_file(c.data.class_names, "data.class_names");
      const auto labels = np::load_labels(net, c.data.class_labels, c.data.class_names);
      const auto res = np::finetune_classification(params, net, labels, ft);
      report.metrics = {{"macro_f1", res.test.macro}, {"micro_f1", res.test.micro}};
      report.checkpoint_step = res.trace.selected_step;
      report.details["test_nodes"] = res.split.test.size();
      report.details["trace"] = res.trace;
      np::write_node_split((dir / "split.tsv").string(), net, res.split);
      break;
    }
    case np::TaskKind::kRetrieve:
    case np::TaskKind::kRerank: {
      require_file(c.data.retrieval_labels, "data.retrieval_labels");
      require_file(c.data.retrieval_names, "data.retrieval_names");
      const auto labels = np::load_labels(net, c.data.retrieval_labels, c.data.retrieval_names);
      const auto space = np::make_label_space(labels, vocab, c.model.max_len);
      if (kind == np::TaskKind::kRetrieve) {
        const auto res = np::finetune_retrieval(params, net, labels, space, ft);
        report.metrics = {{"recall@50", res.recall50.value}, {"recall@100", res.recall100.value}};
        report.checkpoint_step = res.trace.selected_step;
        report.details["evaluated"] = res.recall50.evaluated;
        report.details["excluded_empty_relevance"] = res.recall50.excluded;
        report.details["trace"] = res.trace;
        np::write_run((dir / "run.jsonl").string(), res.test_run);
        np::write_node_split((dir / "split.tsv").string(), net, res.split);
      } else {
        const auto res = np::finetune_rerank(params, net, labels, space, ft);
        report.metrics = {{"ndcg@5", res.ndcg5.value}, {"ndcg@10", res.ndcg10.value}};
        report.checkpoint_step = res.trace.selected_step;
        report.details["evaluated"] = res.ndcg10.evaluated;
        report.details["excluded_empty_relevance"] = res.ndcg10.excluded;
        report.details["excluded_no_candidates"] = res.test_run.empty_candidates;
        report.details["trace"] = res.trace;
        np::write_run((dir / "run.jsonl").string(), res.test_run.run);
        np::write_node_split((dir / "split.tsv").string(), net, res.split);
      }
      break;
    }
    case np::TaskKind::kLinkpred: {
      require_file(c.data.linkpred_edges, "data.linkpred_edges");
      const auto edges = np::load_edge_list(net, c.data.linkpred_edges);
      const auto res = np::finetune_linkpred(params, net, edges, ft);
      report.metrics = {{"prec@1", res.test.prec1}, {"mrr", res.test.mrr}};
      report.checkpoint_step = res.trace.selected_step;
      report.details["evaluated"] = res.test.evaluated;
      report.details["dropped_trailing_pairs"] = res.test_run.dropped;
      report.details["trace"] = res.trace;
      np::write_run((dir / "run.jsonl").string(), res.test_run.run);
      np::write_pair_split((dir / "split.tsv").string(), net, res.split);
      break;
    }
  }
  write_atomic(dir / "report.json", np::to_json(report).dump(2) + "\n");
  std::cout << np::to_json(report)["metrics"].dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string run;
  std::vector<std::string> metrics;
  std::string out;
};

int cmd_eval_run(const EvalArgs& a) {
  require_file(a.run, "ranking run");
  const auto run = np::read_run(a.run);
  ordered_json results = ordered_json::object();
  for (const auto& m : a.metrics) {
    try {
      const auto r = np::evaluate_metric(run, m);
      results[m] = {{"value", r.value}, {"evaluated", r.evaluated}, {"excluded", r.excluded}};
    } catch (const np::Error& e) {
      throw InputError(e.what());
    }
  }
  const ordered_json doc = {{"run", a.run}, {"queries", run.size()}, {"metrics", results}};
  if (!a.out.empty()) write_atomic(fs::path(a.out) / "report.json", doc.dump(2) + "\n");
  std::cout << doc.dump() << "\n";
  return 0;
}

struct DumpArgs {
  Common common;
  std::string checkpoint;
  std::uint64_t node = 0;
  std::string layer = "all";
  std::size_t window = 8;
};

int cmd_dump_attention(const DumpArgs& a) {
  auto c = a.common.resolve();
  const auto vocab = load_vocab(c);
  const auto net = load_net(c, vocab);
  c.model = model_config(c, vocab);
  const auto v = net.index.find(a.node);
  if (v == net.index.end()) throw InputError("node " + std::to_string(a.node) + " is not in the network");
  std::optional<std::size_t> layer;
  if (a.layer != "all") {
    try {
      layer = std::stoul(a.layer);
    } catch (const std::exception&) {
      throw np::ConfigError("--layer expects 'all' or a layer index, got '" + a.layer + "'");
    }
    if (*layer >= c.model.layers) throw np::ConfigError("--layer " + a.layer + " is out of range");
  }
  std::size_t step = 0;
  const auto params = load_encoder(c, a.checkpoint, step);
  const fs::path dir = c.output_dir;
  write_resolved(dir, np::to_json(c));
  const auto rows = np::attention_map(params, net, v->second, a.window, c.pretrain.neighbors, c.seed);
  std::string body;
  for (const auto& r : rows) {
    if (layer && r.layer != *layer) continue;
    body += np::to_json(r, a.node).dump() + "\n";
  }
  write_atomic(dir / "attention.jsonl", body);
  std::cout << "attention map for node " << a.node << " written to " << (dir / "attention.jsonl").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pretraining language models on text-rich networks"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic text-rich network");
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--out", gen.out, "Output directory");
  g->add_option("--synth-config", gen.synth_config, "Generator settings (JSON)");

  Common vocab;
  auto* bv = app.add_subcommand("build-vocab", "Build the word vocabulary from node texts");
  vocab.add_to(bv);

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Pretrain the encoder");
  pre.common.add_to(p);
  p->add_option("--objective", pre.objective, "joint | nmlm-only | mnp-only");
  p->add_flag("--resume", pre.resume, "Continue from the latest checkpoint in the output directory");
  p->add_option("--stop-after", pre.stop_after, "Stop after this step (the schedule is unchanged)");

  FinetuneArgs fin;
  auto* f = app.add_subcommand("finetune", "Finetune and evaluate on a downstream task");
  f->add_option("task", fin.task, "classify | retrieve | rerank | linkpred")->required();
  fin.common.add_to(f);
  f->add_option("--checkpoint", fin.checkpoint, "Checkpoint path, or 'none' for random init")->required();
  f->add_option("--shots", fin.shots, "Labeled examples per class / queries / pairs");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval-run", "Compute metrics from a ranking run file");
  e->add_option("run", ev.run, "RankingRun JSONL")->required();
  e->add_option("--metric", ev.metrics, "recall@K | ndcg@K | prec@1 | mrr")->required();
  e->add_option("--out", ev.out, "Also write report.json here");

  DumpArgs dump;
  auto* d = app.add_subcommand("dump-attention", "Write per-layer attention maps for one node");
  dump.common.add_to(d);
  d->add_option("--checkpoint", dump.checkpoint, "Checkpoint path, or 'none'")->required();
  d->add_option("--node", dump.node, "External node id")->required();
  d->add_option("--layer", dump.layer, "Layer index or 'all'");
  d->add_option("--window", dump.window, "Text positions per row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (g->parsed()) return cmd_gen(gen);
    if (bv->parsed()) return cmd_build_vocab(vocab);
    if (p->parsed()) return cmd_pretrain(pre);
    if (f->parsed()) return cmd_finetune(fin);
    if (e->parsed()) return cmd_eval_run(ev);
    if (d->parsed()) return cmd_dump_attention(dump);
  } catch (const np::NonFiniteError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  } catch (const np::ArchitectureMismatch& err) {
    std::cerr << "error: architecture mismatch: " << err.what() << "\n";
    return 2;
  } catch (const np::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 1;
}
