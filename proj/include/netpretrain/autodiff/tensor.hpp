// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace netpretrain {

/// Base class for every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when tensor extents do not line up for an operation.
struct DimensionError : Error {
  using Error::Error;
};

/// Raised when a loss or gradient stops being finite.
struct NonFiniteError : Error {
  using Error::Error;
};

}  // namespace netpretrain

namespace netpretrain::ag {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Allocator with a fixed 64-byte alignment, so vectorized kernels see the
/// same alignment on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t n) { ::operator delete(p, n * sizeof(T), kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
struct TensorStorage {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  template <class A>
  Tensor(Shape shape, const std::vector<T, A>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad) {}

  Tensor(Shape shape, Buffer<T> values, bool requires_grad = false)
      : impl_(std::make_shared<TensorStorage<T>>()) {
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive: " + to_string(shape));
    }
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor " + to_string(shape) + " expects " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor({1}, Buffer<T>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->value.size(); }

  /// Leading extents folded into rows; last extent is columns.
  std::size_t rows() const { return size() / cols(); }
  std::size_t cols() const { return impl_->shape.back(); }

  std::span<T> data() { return impl_->value; }
  std::span<const T> data() const { return impl_->value; }
  T* ptr() { return impl_->value.data(); }
  const T* ptr() const { return impl_->value.data(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  bool has_grad() const { return impl_->grad.size() == impl_->value.size(); }
  std::span<T> grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  std::span<const T> grad() const {
    impl_->ensure_grad();
    return impl_->grad;
  }
  T* grad_ptr() {
    impl_->ensure_grad();
    return impl_->grad.data();
  }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

  T item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar tensor " + to_string(shape()));
    return impl_->value[0];
  }

  T& operator[](std::size_t i) { return impl_->value[i]; }
  const T& operator[](std::size_t i) const { return impl_->value[i]; }

  Tensor clone() const {
    Tensor copy(shape(), impl_->value, impl_->requires_grad);
    return copy;
  }

  bool same_storage(const Tensor& other) const { return impl_.get() == other.impl_.get(); }

 private:
  std::shared_ptr<TensorStorage<T>> impl_;
};

/// Ordered record of differentiable operations. Each op pushes a closure that
/// propagates its output gradient into its inputs; backward() replays them in
/// reverse. A non-recording tape evaluates forward only.
template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return ops_.size(); }

  /// True when an op over these inputs must be recorded.
  template <class... Ts>
  bool tracks(const Ts&... inputs) const {
    return recording_ && (inputs.requires_grad() || ...);
  }

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  void backward(Tensor<T> loss) {
    if (loss.size() != 1) {
      throw DimensionError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    }
    if (consumed_) throw Error("tape already consumed by a previous backward()");
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

 private:
  bool recording_;
  bool consumed_ = false;
  std::vector<std::function<void()>> ops_;
};

}  // namespace netpretrain::ag
