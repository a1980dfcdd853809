#pragma once

// Dense double-precision tensors with a tape for reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// lets a Tape hold on to operands until backward() runs. Use clone() for a
// value copy.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nlxct/error.hpp"

namespace nlxct {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

/// 64-byte aligned allocation. Vectorized reductions peel an unaligned head,
/// so without a fixed alignment the summation order, and hence the rounding,
/// would depend on where the heap placed each buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

}  // namespace detail

using Buffer = std::vector<double, detail::AlignedAllocator<double>>;

namespace detail {

struct Storage {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // tape that produced this value, 0 for leaves

  double* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : d_(std::make_shared<detail::Storage>()) {
    d_->value.assign(shape_numel(shape), fill);
    d_->shape = std::move(shape);
    d_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, Buffer values, bool requires_grad = false) : d_(std::make_shared<detail::Storage>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    d_->shape = std::move(shape);
    d_->value = std::move(values);
    d_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}

  Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor(Shape{}, v, requires_grad); }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
  std::size_t numel() const { return d_->value.size(); }

  std::span<double> data() { return d_->value; }
  std::span<const double> data() const { return d_->value; }
  double& operator[](std::size_t i) { return d_->value[i]; }
  double operator[](std::size_t i) const { return d_->value[i]; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return d_->value[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool on) { d_->requires_grad = on; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::span<double> grad() { return d_->grad; }
  std::span<const double> grad() const { return d_->grad; }
  void zero_grad() { d_->grad.clear(); }

  /// Value copy detached from any tape.
  Tensor clone() const {
    Tensor t(d_->shape, d_->value, false);
    return t;
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  std::uint64_t tape_id() const { return d_->tape_id; }

  // Used by op implementations.
  detail::Storage& storage() const { return *d_; }
  const std::shared_ptr<detail::Storage>& handle() const { return d_; }

 private:
  std::shared_ptr<detail::Storage> d_;
};

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

/// Ordered record of differentiable operations.
///
/// backward() consumes the tape: calling it a second time throws, so
/// gradients are never silently double-counted.
class Tape {
 public:
  explicit Tape(bool recording = true) : id_(next_id()), recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  bool recording() const { return recording_; }
  std::size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  void record(std::function<void()> backward_rule) {
    if (consumed_) throw ContractError("cannot record on a tape after backward()");
    ops_.push_back(std::move(backward_rule));
  }

  void backward(const Tensor& loss) {
    if (consumed_) throw ContractError("backward() already ran on this tape");
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (loss.tape_id() != id_) throw ContractError("loss was not produced on this tape");
    if (!all_finite(loss.data())) throw TrainingDiverged("non-finite loss");
    consumed_ = true;
    loss.storage().grad_buffer()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
    ops_.shrink_to_fit();
  }

 private:
  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  std::vector<std::function<void()>> ops_;
  std::uint64_t id_;
  bool recording_;
  bool consumed_ = false;
};

namespace detail {

inline bool tracks(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

inline Tensor make_output(const Tape& tape, Shape shape, bool tracked) {
  Tensor out(std::move(shape));
  if (tracked) {
    out.set_requires_grad(true);
    out.storage().tape_id = tape.id();
  }
  return out;
}

using StoragePtr = std::shared_ptr<Storage>;

/// Grad buffer of an input if it participates in differentiation, else null.
inline double* grad_target(const StoragePtr& s) { return s && s->requires_grad ? s->grad_buffer() : nullptr; }

}  // namespace detail

}  // namespace nlxct
