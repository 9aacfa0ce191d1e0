// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint files: checkpoint-<step>.json holds the manifest
// {name -> {shape, offset}} and checkpoint-<step>.bin the little-endian f32
// blob, row-major, in manifest order. Optimizer moments are stored as extra
// tensors under "optim.m." / "optim.v." so a run can resume.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "netpretrain/graphformer.hpp"
#include "netpretrain/optim.hpp"

namespace netpretrain {

/// Raised when a checkpoint does not fit the configured architecture.
struct ArchitectureMismatch : Error {
  using Error::Error;
};

inline constexpr const char* kCheckpointFormat = "netpretrain-checkpoint-v1";

inline std::string checkpoint_stem(std::size_t step) { return "checkpoint-" + std::to_string(step); }

struct CheckpointPaths {
  std::filesystem::path manifest, blob;
};

inline CheckpointPaths checkpoint_paths(const std::filesystem::path& dir, std::size_t step) {
  return {dir / (checkpoint_stem(step) + ".json"), dir / (checkpoint_stem(step) + ".bin")};
}

/// Accepts either stem, the .json or the .bin path.
inline CheckpointPaths resolve_checkpoint(const std::filesystem::path& p) {
  auto stem = p;
  if (p.extension() == ".json" || p.extension() == ".bin") stem.replace_extension();
  CheckpointPaths out{stem, stem};
  out.manifest += ".json";
  out.blob += ".bin";
  return out;
}

namespace detail {

inline void put_f32(std::ofstream& out, float x) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(x);
  unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                        static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline float get_f32(const unsigned char* b) {
  const std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                          (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return std::bit_cast<float>(u);
}

}  // namespace detail

/// Everything a checkpoint carries besides the weights.
struct CheckpointInfo {
  std::size_t step = 0;
  std::size_t optimizer_step = 0;
  nlohmann::json model = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
};

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const ModelParams<T>& params, const CheckpointInfo& info,
                     const AdamState<T>* optimizer = nullptr) {
  std::filesystem::create_directories(dir);
  const auto paths = checkpoint_paths(dir, info.step);
  struct Entry {
    std::string name;
    ag::Shape shape;
    const T* data;
    std::size_t size;
  };
  std::vector<Entry> entries;
  const auto named = params.named();
  for (const auto& [name, t] : named) entries.push_back({name, t.shape(), t.ptr(), t.size()});
  if (optimizer) {
    for (std::size_t i = 0; i < named.size(); ++i) {
      entries.push_back({"optim.m." + named[i].first, named[i].second.shape(), optimizer->m[i].data(), optimizer->m[i].size()});
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      entries.push_back({"optim.v." + named[i].first, named[i].second.shape(), optimizer->v[i].data(), optimizer->v[i].size()});
    }
  }
  nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
  std::size_t offset = 0;
  {
    const auto tmp = paths.blob.string() + ".tmp";
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp);
    for (const auto& e : entries) {
      tensors[e.name] = {{"shape", e.shape}, {"offset", offset}};
      for (std::size_t k = 0; k < e.size; ++k) detail::put_f32(out, static_cast<float>(e.data[k]));
      offset += e.size * 4;
    }
    out.close();
    if (!out) throw Error("failed writing " + tmp);
    std::filesystem::rename(tmp, paths.blob);
  }
  nlohmann::ordered_json manifest = {{"format", kCheckpointFormat},
                                     {"step", info.step},
                                     {"optimizer_step", optimizer ? optimizer->step : 0},
                                     {"dtype", "f32-le"},
                                     {"blob", paths.blob.filename().string()},
                                     {"blob_bytes", offset},
                                     {"model", info.model},
                                     {"extra", info.extra},
                                     {"tensors", tensors}};
  const auto tmp = paths.manifest.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write " + tmp);
    out << manifest.dump(2) << '\n';
    if (!out) throw Error("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, paths.manifest);
}

inline nlohmann::json read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat) throw Error(path.string() + ": not a netpretrain checkpoint");
  return j;
}

/// Loads the weights (and, when `optimizer` is given, the moments) into
/// already-initialized `params`. Every expected tensor must be present with
/// the configured shape; model tensors the architecture does not have are
/// rejected as well.
template <class T>
CheckpointInfo load_checkpoint(const std::filesystem::path& path, ModelParams<T>& params,
                               AdamState<T>* optimizer = nullptr) {
  const auto paths = resolve_checkpoint(path);
  const auto manifest = read_manifest(paths.manifest);
  const auto& tensors = manifest.at("tensors");
  std::ifstream in(paths.blob, std::ios::binary | std::ios::ate);
  if (!in) throw Error("cannot open checkpoint blob " + paths.blob.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != manifest.at("blob_bytes").get<std::size_t>()) {
    throw Error(paths.blob.string() + ": size " + std::to_string(bytes) + " does not match the manifest");
  }
  in.seekg(0);
  std::vector<unsigned char> blob(bytes);
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));

  auto named = params.named();
  std::set<std::string> expected;
  for (const auto& [name, t] : named) expected.insert(name);
  for (const auto& [name, entry] : tensors.items()) {
    if (name.rfind("optim.", 0) == 0) continue;
    if (!expected.count(name)) throw ArchitectureMismatch("checkpoint tensor '" + name + "' is not part of the configured architecture");
  }
  auto fill = [&](const std::string& name, const ag::Shape& shape, T* dst) {
    if (!tensors.contains(name)) throw ArchitectureMismatch("checkpoint is missing tensor '" + name + "'");
    const auto& e = tensors.at(name);
    const auto stored = e.at("shape").get<ag::Shape>();
    if (stored != shape) {
      throw ArchitectureMismatch("tensor '" + name + "' has shape " + ag::to_string(stored) +
                                 " in the checkpoint but " + ag::to_string(shape) + " in the configured architecture");
    }
    const auto offset = e.at("offset").get<std::size_t>();
    const std::size_t n = ag::numel(shape);
    if (offset + 4 * n > blob.size()) throw Error("tensor '" + name + "' runs past the end of the blob");
    for (std::size_t k = 0; k < n; ++k) dst[k] = static_cast<T>(detail::get_f32(blob.data() + offset + 4 * k));
  };
  for (auto& [name, t] : named) fill(name, t.shape(), t.ptr());
  if (optimizer) {
    *optimizer = AdamState<T>::zeros_like(named);
    optimizer->step = manifest.value("optimizer_step", std::size_t{0});
    for (std::size_t i = 0; i < named.size(); ++i) {
      fill("optim.m." + named[i].first, named[i].second.shape(), optimizer->m[i].data());
      fill("optim.v." + named[i].first, named[i].second.shape(), optimizer->v[i].data());
    }
  }
  CheckpointInfo info;
  info.step = manifest.at("step").get<std::size_t>();
  info.optimizer_step = manifest.value("optimizer_step", std::size_t{0});
  info.model = manifest.value("model", nlohmann::json::object());
  info.extra = manifest.value("extra", nlohmann::json::object());
  return info;
}

/// Highest-step checkpoint in `dir` whose manifest and blob both exist.
inline std::optional<std::size_t> latest_checkpoint(const std::filesystem::path& dir) {
  std::optional<std::size_t> best;
  if (!std::filesystem::is_directory(dir)) return best;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("checkpoint-", 0) != 0 || entry.path().extension() != ".json") continue;
    const auto digits = name.substr(11, name.size() - 11 - 5);
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) continue;
    const std::size_t step = std::stoull(digits);
    if (!std::filesystem::exists(checkpoint_paths(dir, step).blob)) continue;
    if (!best || step > *best) best = step;
  }
  return best;
}

}  // namespace netpretrain
