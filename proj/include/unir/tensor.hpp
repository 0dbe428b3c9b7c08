// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "unir/error.hpp"

namespace unir {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tape;

namespace detail {

template <class T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first touched by backward
  bool requires_grad = false;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad;
  }
};

}  // namespace detail

// Dense tensor with shared storage. Copies alias the same buffer; use
// clone() for a deep copy. 4-D tensors are laid out NCHW, row-major.
template <class T>
class BasicTensor {
public:
  using value_type = T;

  BasicTensor() : d_(std::make_shared<detail::TensorData<T>>()) {}

  explicit BasicTensor(Shape shape, T fill = T{0}, bool requires_grad = false)
    : d_(std::make_shared<detail::TensorData<T>>()) {
    d_->value.assign(shape_numel(shape), fill);
    d_->shape = std::move(shape);
    d_->requires_grad = requires_grad;
  }

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
    : d_(std::make_shared<detail::TensorData<T>>()) {
    if (shape_numel(shape) != values.size())
      throw Error("ShapeMismatch", "shape " + shape_str(shape) + " does not match " +
                                       std::to_string(values.size()) + " values");
    d_->shape = std::move(shape);
    d_->value = std::move(values);
    d_->requires_grad = requires_grad;
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return d_->shape; }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
  std::size_t rank() const noexcept { return d_->shape.size(); }
  std::size_t numel() const noexcept { return d_->value.size(); }

  std::span<const T> data() const noexcept { return d_->value; }
  // Writable view for initializers and optimizers; ops never mutate inputs.
  std::span<T> mutable_data() noexcept { return d_->value; }

  bool requires_grad() const noexcept { return d_->requires_grad; }
  void set_requires_grad(bool on) noexcept { d_->requires_grad = on; }

  bool has_grad() const noexcept { return !d_->grad.empty(); }
  std::span<const T> grad() const noexcept { return d_->grad; }
  std::span<T> mutable_grad() { return d_->ensure_grad(); }
  void zero_grad() { d_->grad.assign(d_->value.size(), T{0}); }

  T item() const {
    if (numel() != 1) throw Error("NotScalar", "item() on tensor of shape " + shape_str(shape()));
    return d_->value[0];
  }

  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const auto& s = d_->shape;
    return d_->value[((n * s[1] + c) * s[2] + h) * s[3] + w];
  }

  BasicTensor clone() const { return BasicTensor(shape(), std::vector<T>(data().begin(), data().end()), requires_grad()); }

  bool same_storage(const BasicTensor& other) const noexcept { return d_ == other.d_; }

  // Internal handle used by ops to capture operands in backward closures.
  const std::shared_ptr<detail::TensorData<T>>& impl() const noexcept { return d_; }

private:
  std::shared_ptr<detail::TensorData<T>> d_;
};

using Tensor = BasicTensor<float>;

// Named trainable tensor. The name is the serialization identity.
template <class T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> tensor;
};
using Parameter = BasicParameter<float>;

namespace detail {

inline Tape*& recording_tape() noexcept {
  thread_local Tape* slot = nullptr;
  return slot;
}

}  // namespace detail

// Per-forward record of executed ops. Constructing a Tape makes it the
// recording tape of the current thread until it is destroyed; ops executed
// with no recording tape (or with no grad-requiring inputs) are not taped.
class Tape {
public:
  Tape() : previous_(detail::recording_tape()) { detail::recording_tape() = this; }
  ~Tape() { detail::recording_tape() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() noexcept { return detail::recording_tape(); }

  std::size_t size() const noexcept { return entries_.size(); }
  bool consumed() const noexcept { return consumed_; }

  void record(std::string op, std::function<void()> backward_fn) {
    if (consumed_) throw Error("TapeConsumed", "recording on a tape after backward");
    entries_.push_back({std::move(op), std::move(backward_fn)});
  }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. The tape is
  // released afterwards; a second call is an error.
  template <class T>
  void backward(const BasicTensor<T>& loss) {
    if (consumed_) throw Error("TapeConsumed", "backward called twice on the same tape");
    if (loss.numel() != 1) throw Error("NotScalar", "backward on tensor of shape " + shape_str(loss.shape()));
    if (entries_.empty()) throw Error("EmptyTape", "backward with no recorded ops");
    auto& g = loss.impl()->ensure_grad();
    g[0] += T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    entries_.clear();
    entries_.shrink_to_fit();
    consumed_ = true;
  }

  // Op names in execution order.
  std::vector<std::string> op_names() const {
    std::vector<std::string> names;
    names.reserve(entries_.size());
    for (const auto& e : entries_) names.push_back(e.op);
    return names;
  }

private:
  struct Entry {
    std::string op;
    std::function<void()> backward;
  };

  Tape* previous_;
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

// Suspends recording for the current thread within its scope.
class NoGradScope {
public:
  NoGradScope() : saved_(detail::recording_tape()) { detail::recording_tape() = nullptr; }
  ~NoGradScope() { detail::recording_tape() = saved_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

private:
  Tape* saved_;
};

}  // namespace unir
