// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "netpretrain/autodiff/tensor.hpp"

namespace netpretrain::ag {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
ConstMatMap<T> mat(const Tensor<T>& t) {
  return ConstMatMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}
template <class T>
MatMap<T> mat(Tensor<T>& t) {
  return MatMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}
template <class T>
MatMap<T> grad_mat(Tensor<T>& t) {
  return MatMap<T>(t.grad_ptr(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

template <class T>
Tensor<T> make_output(Shape shape, bool tracked) {
  return Tensor<T>::zeros(std::move(shape), tracked);
}

inline void require_same_size(const Shape& a, const Shape& b, const char* op) {
  if (numel(a) != numel(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

}  // namespace detail

/// [m x k] * [k x n]. Leading extents of `a` are folded into m.
template <class T>
Tensor<T> matmul(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
  if (b.dim() != 2 || a.cols() != b.extent(0)) {
    throw DimensionError("matmul: inner dimensions disagree " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  Shape out_shape = a.shape();
  out_shape.back() = b.extent(1);
  bool tracked = tape.tracks(a, b);
  auto out = detail::make_output<T>(std::move(out_shape), tracked);
  detail::mat(out).noalias() = detail::mat(std::as_const(a)) * detail::mat(std::as_const(b));
  if (tracked) {
    tape.record([a, b, out]() mutable {
      auto g = detail::grad_mat(out);
      if (a.requires_grad()) detail::grad_mat(a).noalias() += g * detail::mat(std::as_const(b)).transpose();
      if (b.requires_grad()) detail::grad_mat(b).noalias() += detail::mat(std::as_const(a)).transpose() * g;
    });
  }
  return out;
}

/// [m x k] * [n x k]^T.
template <class T>
Tensor<T> matmul_nt(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions disagree " + to_string(a.shape()) + " x " +
                         to_string(b.shape()) + "^T");
  }
  bool tracked = tape.tracks(a, b);
  auto out = detail::make_output<T>({a.rows(), b.rows()}, tracked);
  detail::mat(out).noalias() = detail::mat(std::as_const(a)) * detail::mat(std::as_const(b)).transpose();
  if (tracked) {
    tape.record([a, b, out]() mutable {
      auto g = detail::grad_mat(out);
      if (a.requires_grad()) detail::grad_mat(a).noalias() += g * detail::mat(std::as_const(b));
      if (b.requires_grad()) detail::grad_mat(b).noalias() += g.transpose() * detail::mat(std::as_const(a));
    });
  }
  return out;
}

/// x * w + bias, bias broadcast over rows.
template <class T>
Tensor<T> linear(Tape<T>& tape, Tensor<T> x, Tensor<T> w, Tensor<T> bias) {
  if (w.dim() != 2 || x.cols() != w.extent(0) || bias.size() != w.extent(1)) {
    throw DimensionError("linear: " + to_string(x.shape()) + " x " + to_string(w.shape()) + " + " +
                         to_string(bias.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = w.extent(1);
  bool tracked = tape.tracks(x, w, bias);
  auto out = detail::make_output<T>(std::move(out_shape), tracked);
  auto o = detail::mat(out);
  o.noalias() = detail::mat(std::as_const(x)) * detail::mat(std::as_const(w));
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.ptr(), static_cast<Eigen::Index>(bias.size()));
  o.rowwise() += bv;
  if (tracked) {
    tape.record([x, w, bias, out]() mutable {
      auto g = detail::grad_mat(out);
      if (x.requires_grad()) detail::grad_mat(x).noalias() += g * detail::mat(std::as_const(w)).transpose();
      if (w.requires_grad()) detail::grad_mat(w).noalias() += detail::mat(std::as_const(x)).transpose() * g;
      if (bias.requires_grad()) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(bias.grad_ptr(), static_cast<Eigen::Index>(bias.size()));
        gb += g.colwise().sum();
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
  detail::require_same_size(a.shape(), b.shape(), "add");
  bool tracked = tape.tracks(a, b);
  auto out = detail::make_output<T>(a.shape(), tracked);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  if (tracked) {
    tape.record([a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

/// Row-broadcast bias: x[r, c] + bias[c].
template <class T>
Tensor<T> add_bias(Tape<T>& tape, Tensor<T> x, Tensor<T> bias) {
  if (bias.size() != x.cols()) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " vs " + to_string(x.shape()));
  }
  const std::size_t cols = x.cols();
  bool tracked = tape.tracks(x, bias);
  auto out = detail::make_output<T>(x.shape(), tracked);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % cols];
  if (tracked) {
    tape.record([x, bias, out, cols]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
      }
    });
  }
  return out;
}

/// Stacks the rows of `a` above the rows of `b`.
template <class T>
Tensor<T> concat_rows(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  bool tracked = tape.tracks(a, b);
  auto out = detail::make_output<T>({a.rows() + b.rows(), a.cols()}, tracked);
  std::copy(a.data().begin(), a.data().end(), out.ptr());
  std::copy(b.data().begin(), b.data().end(), out.ptr() + a.size());
  if (tracked) {
    tape.record([a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[a.size() + i];
      }
    });
  }
  return out;
}

/// Elementwise product.
template <class T>
Tensor<T> mul(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
  detail::require_same_size(a.shape(), b.shape(), "mul");
  bool tracked = tape.tracks(a, b);
  auto out = detail::make_output<T>(a.shape(), tracked);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  if (tracked) {
    tape.record([a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, Tensor<T> a, T factor) {
  bool tracked = tape.tracks(a);
  auto out = detail::make_output<T>(a.shape(), tracked);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  if (tracked) {
    tape.record([a, out, factor]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, Tensor<T> a) {
  bool tracked = tape.tracks(a);
  double acc = 0.0;
  for (auto v : a.data()) acc += static_cast<double>(v);
  auto out = Tensor<T>::scalar(static_cast<T>(acc), tracked);
  if (tracked) {
    tape.record([a, out]() mutable {
      T g = out.grad()[0];
      for (auto& ga : a.grad()) ga += g;
    });
  }
  return out;
}

/// Copy with a new shape of equal element count.
template <class T>
Tensor<T> reshape(Tape<T>& tape, Tensor<T> a, Shape shape) {
  detail::require_same_size(a.shape(), shape, "reshape");
  bool tracked = tape.tracks(a);
  Tensor<T> out(std::move(shape), Buffer<T>(a.data().begin(), a.data().end()), tracked);
  if (tracked) {
    tape.record([a, out]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

/// tanh-approximated GELU.
template <class T>
Tensor<T> gelu(Tape<T>& tape, Tensor<T> x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  bool tracked = tape.tracks(x);
  auto out = detail::make_output<T>(x.shape(), tracked);
  const std::size_t n = out.size();
  Buffer<T> th(n);
  const T* px = x.ptr();
  T* po = out.ptr();
  {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<const Arr> xv(px, static_cast<Eigen::Index>(n));
    Eigen::Map<Arr> tv(th.data(), static_cast<Eigen::Index>(n));
    tv = (kC * (xv + kA * xv.cube())).tanh();
    Eigen::Map<Arr>(po, static_cast<Eigen::Index>(n)) = T(0.5) * xv * (T(1) + tv);
  }
  if (tracked) {
    tape.record([x, out, th = std::move(th)]() mutable {
      const T* g = out.grad_ptr();
      T* gx = x.grad_ptr();
      const T* px = x.ptr();
      for (std::size_t i = 0; i < th.size(); ++i) {
        const T v = px[i];
        const T dinner = kC * (T(1) + T(3) * kA * v * v);
        gx[i] += g[i] * (T(0.5) * (T(1) + th[i]) + T(0.5) * v * (T(1) - th[i] * th[i]) * dinner);
      }
    });
  }
  return out;
}

/// Normalizes over the last dimension; eps sits inside the square root.
template <class T>
Tensor<T> layer_norm(Tape<T>& tape, Tensor<T> x, Tensor<T> gain, Tensor<T> bias, T eps) {
  const std::size_t n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + " do not match " +
                         to_string(x.shape()));
  }
  const std::size_t rows = x.rows();
  bool tracked = tape.tracks(x, gain, bias);
  auto out = detail::make_output<T>(x.shape(), tracked);
  Buffer<T> xhat(x.size());
  Buffer<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * n;
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(n);
    T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      T h = (xr[c] - mean) * is;
      xhat[r * n + c] = h;
      out[r * n + c] = h * gain[c] + bias[c];
    }
  }
  if (tracked) {
    tape.record([x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), n, rows]() mutable {
      auto g = out.grad();
      if (gain.requires_grad() || bias.requires_grad()) {
        auto gg = gain.grad();
        auto gb = bias.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < n; ++c) {
            gg[c] += g[r * n + c] * xhat[r * n + c];
            gb[c] += g[r * n + c];
          }
        }
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          T sum_dh = 0, sum_dh_h = 0;
          for (std::size_t c = 0; c < n; ++c) {
            T dh = g[r * n + c] * gain[c];
            sum_dh += dh;
            sum_dh_h += dh * xhat[r * n + c];
          }
          for (std::size_t c = 0; c < n; ++c) {
            T dh = g[r * n + c] * gain[c];
            gx[r * n + c] += inv_std[r] / T(n) *
                             (T(n) * dh - sum_dh - xhat[r * n + c] * sum_dh_h);
          }
        }
      }
    });
  }
  return out;
}

/// Softmax along `axis`, stabilized by subtracting the running max.
template <class T>
Tensor<T> softmax(Tape<T>& tape, Tensor<T> x, std::size_t axis) {
  if (axis >= x.dim()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
  for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.extent(i);
  const std::size_t len = x.extent(axis);
  bool tracked = tape.tracks(x);
  auto out = detail::make_output<T>(x.shape(), tracked);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        T e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  if (tracked) {
    tape.record([x, out, outer, inner, len]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * out[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            gx[base + j * inner] += out[base + j * inner] * (g[base + j * inner] - dot);
          }
        }
      }
    });
  }
  return out;
}

inline constexpr std::int32_t kIgnoreIndex = -1;

/// Mean of -log softmax(logits)[target] over rows whose target is not
/// `ignore`. All rows ignored yields a constant 0.
template <class T>
Tensor<T> cross_entropy_logits(Tape<T>& tape, Tensor<T> logits, std::span<const std::int32_t> targets,
                               std::int32_t ignore = kIgnoreIndex) {
  const std::size_t rows = logits.rows();
  const std::size_t classes = logits.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for logits " +
                         to_string(logits.shape()));
  }
  std::size_t active = 0;
  for (auto t : targets) {
    if (t == ignore) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw DimensionError("cross_entropy_logits: target " + std::to_string(t) + " outside [0," +
                           std::to_string(classes) + ")");
    }
    ++active;
  }
  if (active == 0) return Tensor<T>::scalar(T(0));
  bool tracked = tape.tracks(logits);
  Buffer<T> probs(tracked ? logits.size() : 0);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore) continue;
    const T* lr = logits.ptr() + r * classes;
    T mx = *std::max_element(lr, lr + classes);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(static_cast<double>(lr[c] - mx));
    double log_z = std::log(total) + static_cast<double>(mx);
    loss += log_z - static_cast<double>(lr[targets[r]]);
    if (tracked) {
      for (std::size_t c = 0; c < classes; ++c) {
        probs[r * classes + c] = static_cast<T>(std::exp(static_cast<double>(lr[c]) - log_z));
      }
    }
  }
  auto out = Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(active)), tracked);
  if (tracked) {
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    tape.record([logits, out, probs = std::move(probs), tgt = std::move(tgt), rows, classes, active,
                 ignore]() mutable {
      T g = out.grad()[0] / T(active);
      auto gl = logits.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (tgt[r] == ignore) continue;
        for (std::size_t c = 0; c < classes; ++c) gl[r * classes + c] += g * probs[r * classes + c];
        gl[r * classes + tgt[r]] -= g;
      }
    });
  }
  return out;
}

/// Rows of `x` selected by `index`, in order. Backward scatter-adds.
template <class T>
Tensor<T> gather_rows(Tape<T>& tape, Tensor<T> x, std::span<const std::size_t> index) {
  const std::size_t cols = x.cols();
  const std::size_t rows = x.rows();
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  for (auto i : index) {
    if (i >= rows) throw DimensionError("gather_rows: row " + std::to_string(i) + " outside " + to_string(x.shape()));
  }
  bool tracked = tape.tracks(x);
  auto out = detail::make_output<T>({index.size(), cols}, tracked);
  for (std::size_t r = 0; r < index.size(); ++r) {
    std::copy_n(x.ptr() + index[r] * cols, cols, out.ptr() + r * cols);
  }
  if (tracked) {
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape.record([x, out, idx = std::move(idx), cols]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) gx[idx[r] * cols + c] += g[r * cols + c];
      }
    });
  }
  return out;
}

/// Flat element gather into a tensor of `shape`.
template <class T>
Tensor<T> gather_elements(Tape<T>& tape, Tensor<T> x, std::span<const std::size_t> index, Shape shape) {
  if (numel(shape) != index.size()) {
    throw DimensionError("gather_elements: " + std::to_string(index.size()) + " indices for shape " + to_string(shape));
  }
  for (auto i : index) {
    if (i >= x.size()) throw DimensionError("gather_elements: index outside " + to_string(x.shape()));
  }
  bool tracked = tape.tracks(x);
  auto out = detail::make_output<T>(std::move(shape), tracked);
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = x[index[i]];
  if (tracked) {
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape.record([x, out, idx = std::move(idx)]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
    });
  }
  return out;
}

/// Builds per-sequence blocks [prefix_s ; body_s] where body holds `seq_len`
/// rows per sequence. Result has `seq_len + 1` rows per sequence.
template <class T>
Tensor<T> interleave_prefix(Tape<T>& tape, Tensor<T> prefix, Tensor<T> body, std::size_t seq_len) {
  const std::size_t d = body.cols();
  const std::size_t seqs = prefix.rows();
  if (prefix.cols() != d || body.rows() != seqs * seq_len) {
    throw DimensionError("interleave_prefix: prefix " + to_string(prefix.shape()) + " vs body " +
                         to_string(body.shape()) + " with seq_len " + std::to_string(seq_len));
  }
  bool tracked = tape.tracks(prefix, body);
  auto out = detail::make_output<T>({seqs * (seq_len + 1), d}, tracked);
  for (std::size_t s = 0; s < seqs; ++s) {
    T* dst = out.ptr() + s * (seq_len + 1) * d;
    std::copy_n(prefix.ptr() + s * d, d, dst);
    std::copy_n(body.ptr() + s * seq_len * d, seq_len * d, dst + d);
  }
  if (tracked) {
    tape.record([prefix, body, out, seqs, seq_len, d]() mutable {
      auto g = out.grad();
      for (std::size_t s = 0; s < seqs; ++s) {
        const T* src = g.data() + s * (seq_len + 1) * d;
        if (prefix.requires_grad()) {
          T* gp = prefix.grad_ptr() + s * d;
          for (std::size_t c = 0; c < d; ++c) gp[c] += src[c];
        }
        if (body.requires_grad()) {
          T* gb = body.grad_ptr() + s * seq_len * d;
          for (std::size_t c = 0; c < seq_len * d; ++c) gb[c] += src[d + c];
        }
      }
    });
  }
  return out;
}

/// One block of grouped attention: query rows [q_begin, q_begin+q_count)
/// attend to key/value rows [k_begin, k_begin+k_count).
struct AttentionGroup {
  std::size_t q_begin = 0;
  std::size_t q_count = 0;
  std::size_t k_begin = 0;
  std::size_t k_count = 0;
};

struct AttentionOptions {
  std::size_t heads = 1;
  /// Query i of a group may not attend key i of the same group.
  bool mask_self = false;
};

/// Multi-head scaled dot-product attention over independent groups.
/// `key_valid` (one flag per key row, empty = all valid) masks keys with -inf
/// before the softmax. A query whose keys are all masked yields a zero row.
/// When `probs` is non-null it receives, per group then per head, the
/// q_count x k_count probability matrix.
template <class T>
Tensor<T> grouped_attention(Tape<T>& tape, Tensor<T> q, Tensor<T> k, Tensor<T> v,
                            std::span<const AttentionGroup> groups, std::span<const std::uint8_t> key_valid,
                            AttentionOptions opts = {}, std::vector<T>* probs = nullptr) {
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("grouped_attention: q " + to_string(q.shape()) + " k " + to_string(k.shape()) + " v " +
                         to_string(v.shape()));
  }
  if (opts.heads == 0 || d % opts.heads != 0) {
    throw DimensionError("grouped_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(opts.heads) + " heads");
  }
  if (!key_valid.empty() && key_valid.size() != k.rows()) {
    throw DimensionError("grouped_attention: key_valid has " + std::to_string(key_valid.size()) + " flags for " +
                         std::to_string(k.rows()) + " keys");
  }
  for (const auto& grp : groups) {
    if (grp.q_begin + grp.q_count > q.rows() || grp.k_begin + grp.k_count > k.rows()) {
      throw DimensionError("grouped_attention: group exceeds input rows");
    }
  }
  const std::size_t heads = opts.heads;
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
  using detail::ConstStridedMap;
  using detail::RowMat;
  using detail::StridedMap;

  bool tracked = tape.tracks(q, k, v);
  auto out = detail::make_output<T>(q.shape(), tracked);

  std::size_t prob_total = 0;
  std::vector<std::size_t> prob_offset(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    prob_offset[gi] = prob_total;
    prob_total += heads * groups[gi].q_count * groups[gi].k_count;
  }
  Buffer<T> saved(prob_total, T(0));

  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& grp = groups[gi];
    if (grp.q_count == 0 || grp.k_count == 0) continue;
    const auto nq = static_cast<Eigen::Index>(grp.q_count);
    const auto nk = static_cast<Eigen::Index>(grp.k_count);
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap<T> qh(q.ptr() + grp.q_begin * d + h * dh, nq, static_cast<Eigen::Index>(dh), stride);
      ConstStridedMap<T> kh(k.ptr() + grp.k_begin * d + h * dh, nk, static_cast<Eigen::Index>(dh), stride);
      ConstStridedMap<T> vh(v.ptr() + grp.k_begin * d + h * dh, nk, static_cast<Eigen::Index>(dh), stride);
      Eigen::Map<RowMat<T>> p(saved.data() + prob_offset[gi] + h * grp.q_count * grp.k_count, nq, nk);
      p.noalias() = qh.lazyProduct(kh.transpose()) * scale;
      for (Eigen::Index i = 0; i < nq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < nk; ++j) {
          bool valid = key_valid.empty() || key_valid[grp.k_begin + static_cast<std::size_t>(j)];
          if (opts.mask_self && i == j) valid = false;
          if (!valid) {
            p(i, j) = -std::numeric_limits<T>::infinity();
          } else {
            mx = std::max(mx, p(i, j));
          }
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
          p.row(i).setZero();
          continue;
        }
        T total = 0;
        for (Eigen::Index j = 0; j < nk; ++j) {
          T e = p(i, j) == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(p(i, j) - mx);
          p(i, j) = e;
          total += e;
        }
        p.row(i) /= total;
      }
      StridedMap<T> oh(out.ptr() + grp.q_begin * d + h * dh, nq, static_cast<Eigen::Index>(dh), stride);
      oh.noalias() = p.lazyProduct(vh);
    }
  }
  if (probs) probs->assign(saved.begin(), saved.end());

  if (tracked) {
    std::vector<AttentionGroup> grps(groups.begin(), groups.end());
    tape.record([q, k, v, out, grps = std::move(grps), saved = std::move(saved),
                 prob_offset = std::move(prob_offset), heads, dh, d, scale]() mutable {
      const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
      T* gq = q.requires_grad() ? q.grad_ptr() : nullptr;
      T* gk = k.requires_grad() ? k.grad_ptr() : nullptr;
      T* gv = v.requires_grad() ? v.grad_ptr() : nullptr;
      const T* go = out.grad_ptr();
      RowMat<T> dp, ds;
      for (std::size_t gi = 0; gi < grps.size(); ++gi) {
        const auto& grp = grps[gi];
        if (grp.q_count == 0 || grp.k_count == 0) continue;
        const auto nq = static_cast<Eigen::Index>(grp.q_count);
        const auto nk = static_cast<Eigen::Index>(grp.k_count);
        for (std::size_t h = 0; h < heads; ++h) {
          Eigen::Map<const RowMat<T>> p(saved.data() + prob_offset[gi] + h * grp.q_count * grp.k_count, nq, nk);
          ConstStridedMap<T> doh(go + grp.q_begin * d + h * dh, nq, static_cast<Eigen::Index>(dh), stride);
          ConstStridedMap<T> qh(q.ptr() + grp.q_begin * d + h * dh, nq, static_cast<Eigen::Index>(dh), stride);
          ConstStridedMap<T> kh(k.ptr() + grp.k_begin * d + h * dh, nk, static_cast<Eigen::Index>(dh), stride);
          ConstStridedMap<T> vh(v.ptr() + grp.k_begin * d + h * dh, nk, static_cast<Eigen::Index>(dh), stride);
          if (gv) {
            StridedMap<T> gvh(gv + grp.k_begin * d + h * dh, nk, static_cast<Eigen::Index>(dh), stride);
            gvh.noalias() += p.transpose().lazyProduct(doh);
          }
          if (!gq && !gk) continue;
          dp.noalias() = doh.lazyProduct(vh.transpose());
          ds = p.cwiseProduct(dp);
          for (Eigen::Index i = 0; i < nq; ++i) {
            T dot = ds.row(i).sum();
            ds.row(i) -= dot * p.row(i);
          }
          ds *= scale;
          if (gq) {
            StridedMap<T> gqh(gq + grp.q_begin * d + h * dh, nq, static_cast<Eigen::Index>(dh), stride);
            gqh.noalias() += ds.lazyProduct(kh);
          }
          if (gk) {
            StridedMap<T> gkh(gk + grp.k_begin * d + h * dh, nk, static_cast<Eigen::Index>(dh), stride);
            gkh.noalias() += ds.transpose().lazyProduct(qh);
          }
        }
      }
    });
  }
  return out;
}

/// Inverted dropout with a seeded mask; identity when rate is 0.
template <class T>
Tensor<T> dropout(Tape<T>& tape, Tensor<T> x, double rate, std::uint64_t seed) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw Error("dropout: rate must be below 1");
  std::mt19937_64 rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  // Four 16-bit uniforms per draw.
  const auto threshold = static_cast<std::uint64_t>(std::llround(rate * 65536.0));
  Buffer<T> mask(x.size());
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (i % 4 == 0) bits = rng();
    mask[i] = (bits & 0xffffU) < threshold ? T(0) : keep_scale;
    bits >>= 16;
  }
  bool tracked = tape.tracks(x);
  auto out = detail::make_output<T>(x.shape(), tracked);
  {
    const T* px = x.ptr();
    T* po = out.ptr();
    for (std::size_t i = 0; i < mask.size(); ++i) po[i] = px[i] * mask[i];
  }
  if (tracked) {
    tape.record([x, out, mask = std::move(mask)]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

}  // namespace netpretrain::ag
