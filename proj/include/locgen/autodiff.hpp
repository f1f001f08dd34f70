// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace locgen::ad {

using Shape = std::vector<int>;

/// 64-byte aligned allocation so vectorized kernels always see the same
/// alignment and therefore produce bit-identical results run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major tensor. Owns its storage.
template <typename T>
struct Tensor {
  Shape shape;
  Buffer<T> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, Buffer<T> d, bool grad = false);
  Tensor(Shape s, const std::vector<T>& d, bool grad = false)
      : Tensor(std::move(s), Buffer<T>(d.begin(), d.end()), grad) {}
  static Tensor zeros(Shape s, bool grad = false);

  std::size_t size() const { return data.size(); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Shape& shape() const;
  std::span<const T> value() const;
  int dim(int i) const;
};

/// Records primitive operations in execution order; `backward` replays them
/// in reverse. Single-threaded; use one tape per thread.
template <typename T>
class Tape {
 public:
  /// Leaf that never receives gradients.
  Var<T> constant(Shape shape, Buffer<T> data);
  Var<T> constant(Shape shape, const std::vector<T>& data) {
    return constant(std::move(shape), Buffer<T>(data.begin(), data.end()));
  }
  /// Leaf copied from `t`; receives gradients when t.requires_grad.
  Var<T> leaf(const Tensor<T>& t);

  /// Reverse sweep from a scalar loss. Throws UsageError when loss is not scalar.
  void backward(Var<T> loss);

  /// Gradient accumulated for `v` (zeros if nothing flowed into it).
  Tensor<T> grad(Var<T> v) const;
  std::span<const T> grad_span(Var<T> v) const;

  std::size_t size() const { return nodes_.size(); }

  // Internal interface used by the primitive implementations.
  struct Node {
    Shape shape;
    Buffer<T> value;
    Buffer<T> grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
  };
  Var<T> push(Shape shape, Buffer<T> value, bool requires_grad,
              std::function<void(Tape&)> backward = nullptr);
  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }
  /// Gradient buffer of `id`, zero-initialized on first access.
  Buffer<T>& grad_buffer(int id);

 private:
  std::vector<Node> nodes_;
};

// Primitive operations. Every primitive validates shapes and throws
// UsageError naming itself and the offending shapes.

/// a[..., m, k] x b[k, n] -> [..., m, n]; or batched a[B.., m, k] x b[B.., k, n].
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// Elementwise sum; b's shape may be a suffix of a's shape (broadcast over leading dims).
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
/// Elementwise product of equal shapes.
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
/// Rows of table[V, d] selected by ids -> [ids.size(), d].
template <typename T> Var<T> embedding_lookup(Var<T> table, std::span<const int> ids);
/// Normalizes over the last axis, then applies gain and bias of shape [d].
template <typename T> Var<T> layernorm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));
/// Softmax over the last axis. -inf entries get probability 0.
template <typename T> Var<T> softmax(Var<T> x);
/// tanh approximation used by GPT-2.
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);
/// Swaps two axes (materialized copy).
template <typename T> Var<T> transpose(Var<T> x, int axis0, int axis1);
/// Per-row -log softmax(logits)[target] for logits[N, V] -> [N].
template <typename T> Var<T> cross_entropy_with_logits(Var<T> logits, std::span<const int> targets);
/// Adds a constant mask (typically 0 / -inf) broadcast over leading dims.
template <typename T> Var<T> mask_add(Var<T> x, const Tensor<T>& mask);
template <typename T> Var<T> concat(std::span<const Var<T>> parts, int axis);
template <typename T> Var<T> slice(Var<T> x, int axis, int start, int length);
/// Sum of all elements -> scalar (shape {}).
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);
/// Sum over the last axis.
template <typename T> Var<T> sum_last(Var<T> x);
/// log(sigmoid(x)), computed stably.
template <typename T> Var<T> log_sigmoid(Var<T> x);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct LossAndGrad {
  double loss = 0.0;
  std::vector<Tensor<double>> grads;
};

using DifferentiableFn = std::function<LossAndGrad(const std::vector<Tensor<double>>& params, bool want_grad)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients against central differences with step
/// `eps` on a uniformly drawn subset of `coordinates` parameter coordinates
/// (all of them when fewer exist). Relative error per coordinate is
/// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|). Throws NumericError on
/// non-finite values.
GradCheckResult grad_check(const DifferentiableFn& f, std::vector<Tensor<double>> params, double eps,
                           std::size_t coordinates, std::uint64_t seed);

}  // namespace locgen::ad
