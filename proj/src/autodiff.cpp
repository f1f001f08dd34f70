// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "locgen/error.hpp"
#include "locgen/rng.hpp"

namespace locgen::ad {

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b = {}) {
  throw UsageError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;
template <typename T>
using MMap = Eigen::Map<MatR<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64>;
template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64>;

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

int norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw UsageError(std::string(op) + ": axis out of range");
  return axis;
}

// View of a shape as [outer, axis, inner] around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor / Var / Tape

template <typename T>
Tensor<T>::Tensor(Shape s, Buffer<T> d, bool grad) : shape(std::move(s)), data(std::move(d)), requires_grad(grad) {
  if (data.size() != numel(shape)) {
    throw UsageError("Tensor: data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape s, bool grad) {
  const auto n = numel(s);
  return Tensor(std::move(s), Buffer<T>(n, T(0)), grad);
}

template <typename T>
const Shape& Var<T>::shape() const {
  return tape->node(id).shape;
}

template <typename T>
std::span<const T> Var<T>::value() const {
  return tape->node(id).value;
}

template <typename T>
int Var<T>::dim(int i) const {
  const auto& s = shape();
  return s[norm_axis(i, s.size(), "dim")];
}

template <typename T>
Var<T> Tape<T>::push(Shape shape, Buffer<T> value, bool requires_grad, std::function<void(Tape&)> backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Shape shape, Buffer<T> data) {
  if (data.size() != numel(shape)) shape_error("constant", shape);
  return push(std::move(shape), std::move(data), false);
}

template <typename T>
Var<T> Tape<T>::leaf(const Tensor<T>& t) {
  if (t.data.size() != numel(t.shape)) shape_error("leaf", t.shape);
  // Leaves have no backward rule; requires_grad only marks them as sinks.
  Node n;
  n.shape = t.shape;
  n.value = t.data;
  n.requires_grad = t.requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Buffer<T>& Tape<T>::grad_buffer(int id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw UsageError("backward: loss belongs to another tape");
  if (numel(node(loss.id).shape) != 1) {
    throw UsageError("backward: loss must be scalar, got shape " + shape_str(node(loss.id).shape));
  }
  for (auto& n : nodes_) n.grad.clear();
  grad_buffer(loss.id)[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[i];
    if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(*this);
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const auto& n = nodes_[v.id];
  Tensor<T> out = Tensor<T>::zeros(n.shape);
  if (!n.grad.empty()) out.data = n.grad;
  return out;
}

template <typename T>
std::span<const T> Tape<T>::grad_span(Var<T> v) const {
  return nodes_[v.id].grad;
}

// ---------------------------------------------------------------------------
// Primitives

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) shape_error("matmul", sa, sb);
  const int k = sa.back();
  const int m = sa[sa.size() - 2];
  const int n = sb.back();
  const bool batched = sb.size() > 2;
  if (sb[sb.size() - 2] != k) shape_error("matmul", sa, sb);
  if (batched && (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))) {
    shape_error("matmul", sa, sb);
  }
  Shape so(sa.begin(), sa.end() - 1);
  so.push_back(n);
  const std::size_t batch = batched ? numel(Shape(sa.begin(), sa.end() - 2)) : 1;
  const std::size_t rows = batched ? static_cast<std::size_t>(m) : numel(sa) / k;

  Buffer<T> out(numel(so));
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < batch; ++i) {
    CMap<T> A(pa + i * rows * k, rows, k);
    CMap<T> B(pb + (batched ? i * k * n : 0), k, n);
    MMap<T> C(out.data() + i * rows * n, rows, n);
    C.noalias() = A * B;
  }
  const bool rg = tape.node(a.id).requires_grad || tape.node(b.id).requires_grad;
  const int ia = a.id, ib = b.id;
  Var<T> result = tape.push(so, std::move(out), rg);
  const int io = result.id;
  if (rg) {
    tape.node(io).backward = [ia, ib, io, batch, rows, k, n, batched](Tape<T>& t) {
      const T* g = t.node(io).grad.data();
      const bool ga = t.node(ia).requires_grad;
      const bool gb = t.node(ib).requires_grad;
      T* da = ga ? t.grad_buffer(ia).data() : nullptr;
      T* db = gb ? t.grad_buffer(ib).data() : nullptr;
      const T* pa = t.node(ia).value.data();
      const T* pb = t.node(ib).value.data();
      for (std::size_t i = 0; i < batch; ++i) {
        CMap<T> G(g + i * rows * n, rows, n);
        if (ga) {
          CMap<T> B(pb + (batched ? i * k * n : 0), k, n);
          MMap<T> dA(da + i * rows * k, rows, k);
          dA.noalias() += G * B.transpose();
        }
        if (gb) {
          CMap<T> A(pa + i * rows * k, rows, k);
          MMap<T> dB(db + (batched ? i * k * n : 0), k, n);
          dB.noalias() += A.transpose() * G;
        }
      }
    };
  }
  return result;
}

namespace {

template <typename T>
Var<T> add_impl(Var<T> a, Var<T> b, T sign, const char* op) {
  Tape<T>& tape = *a.tape;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (!is_suffix(sa, sb)) shape_error(op, sa, sb);
  const std::size_t nb = numel(sb);
  const std::size_t reps = numel(sa) / std::max<std::size_t>(nb, 1);
  auto va = a.value();
  auto vb = b.value();
  Buffer<T> out(va.begin(), va.end());
  for (std::size_t r = 0; r < reps; ++r) {
    T* o = out.data() + r * nb;
    for (std::size_t j = 0; j < nb; ++j) o[j] += sign * vb[j];
  }
  const int ia = a.id, ib = b.id;
  const bool rg = tape.node(ia).requires_grad || tape.node(ib).requires_grad;
  Var<T> res = tape.push(sa, std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ia, ib, io, nb, reps, sign](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      if (t.node(ia).requires_grad) {
        auto& da = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (t.node(ib).requires_grad) {
        auto& db = t.grad_buffer(ib);
        for (std::size_t r = 0; r < reps; ++r) {
          const T* gr = g.data() + r * nb;
          for (std::size_t j = 0; j < nb; ++j) db[j] += sign * gr[j];
        }
      }
    };
  }
  return res;
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return add_impl(a, b, T(1), "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add_impl(a, b, T(-1), "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  auto va = a.value();
  auto vb = b.value();
  Buffer<T> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  const int ia = a.id, ib = b.id;
  const bool rg = tape.node(ia).requires_grad || tape.node(ib).requires_grad;
  Var<T> res = tape.push(a.shape(), std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ia, ib, io](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      if (t.node(ia).requires_grad) {
        auto& da = t.grad_buffer(ia);
        const auto& vb = t.node(ib).value;
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * vb[i];
      }
      if (t.node(ib).requires_grad) {
        auto& db = t.grad_buffer(ib);
        const auto& va = t.node(ia).value;
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * va[i];
      }
    };
  }
  return res;
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tape<T>& tape = *a.tape;
  auto va = a.value();
  Buffer<T> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * factor;
  const int ia = a.id;
  const bool rg = tape.node(ia).requires_grad;
  Var<T> res = tape.push(a.shape(), std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ia, io, factor](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      auto& da = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
    };
  }
  return res;
}

template <typename T>
Var<T> embedding_lookup(Var<T> table, std::span<const int> ids) {
  Tape<T>& tape = *table.tape;
  const Shape& st = table.shape();
  if (st.size() != 2) shape_error("embedding_lookup", st);
  const int rows = st[0], d = st[1];
  auto vt = table.value();
  Buffer<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= rows) {
      throw UsageError("embedding_lookup: id " + std::to_string(ids[i]) + " outside table " + shape_str(st));
    }
    std::copy_n(vt.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const int it = table.id;
  const bool rg = tape.node(it).requires_grad;
  Var<T> res = tape.push({static_cast<int>(ids.size()), d}, std::move(out), rg);
  const int io = res.id;
  if (rg) {
    std::vector<int> idv(ids.begin(), ids.end());
    tape.node(io).backward = [it, io, d, idv = std::move(idv)](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      auto& dt = t.grad_buffer(it);
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* row = dt.data() + static_cast<std::size_t>(idv[i]) * d;
        const T* gr = g.data() + i * d;
        for (int j = 0; j < d; ++j) row[j] += gr[j];
      }
    };
  }
  return res;
}

template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  Tape<T>& tape = *x.tape;
  const Shape& sx = x.shape();
  if (sx.empty()) shape_error("layernorm", sx);
  const int d = sx.back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) shape_error("layernorm", sx, gain.shape());
  const std::size_t rows = numel(sx) / d;
  auto vx = x.value();
  auto vg = gain.value();
  auto vb = bias.value();
  Buffer<T> out(vx.size());
  Buffer<T> xhat(vx.size());
  Buffer<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = vx.data() + r * d;
    T mu = 0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    T var = 0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (int j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * vg[j] + vb[j];
    }
  }
  const int ix = x.id, ig = gain.id, ib = bias.id;
  const bool rg = tape.node(ix).requires_grad || tape.node(ig).requires_grad || tape.node(ib).requires_grad;
  Var<T> res = tape.push(sx, std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ix, ig, ib, io, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      const auto& vg = t.node(ig).value;
      if (t.node(ig).requires_grad || t.node(ib).requires_grad) {
        auto& dg = t.grad_buffer(ig);
        auto& db = t.grad_buffer(ib);
        for (std::size_t r = 0; r < rows; ++r) {
          for (int j = 0; j < d; ++j) {
            dg[j] += g[r * d + j] * xhat[r * d + j];
            db[j] += g[r * d + j];
          }
        }
      }
      if (t.node(ix).requires_grad) {
        auto& dx = t.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          T m1 = 0, m2 = 0;
          for (int j = 0; j < d; ++j) {
            const T dh = g[r * d + j] * vg[j];
            m1 += dh;
            m2 += dh * xhat[r * d + j];
          }
          m1 /= d;
          m2 /= d;
          for (int j = 0; j < d; ++j) {
            const T dh = g[r * d + j] * vg[j];
            dx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
          }
        }
      }
    };
  }
  return res;
}

template <typename T>
Var<T> softmax(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Shape& sx = x.shape();
  if (sx.empty()) shape_error("softmax", sx);
  const int v = sx.back();
  const std::size_t rows = numel(sx) / v;
  const T ninf = -std::numeric_limits<T>::infinity();
  auto vx = x.value();
  Buffer<T> out(vx.size());
  std::vector<char> dead(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = vx.data() + r * v;
    T* o = out.data() + r * v;
    const T mx = *std::max_element(xr, xr + v);
    dead[r] = mx == ninf;
    const T shift = dead[r] ? T(0) : mx;
    for (int j = 0; j < v; ++j) o[j] = xr[j] - shift;
  }
  ArrMap<T> all(out.data(), static_cast<Eigen::Index>(out.size()));
  all = all.exp();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = vx.data() + r * v;
    T* o = out.data() + r * v;
    if (dead[r]) {
      std::fill(o, o + v, T(0));
      continue;
    }
    T s = 0;
    for (int j = 0; j < v; ++j) {
      if (xr[j] == ninf) o[j] = T(0);
      s += o[j];
    }
    const T inv = T(1) / s;
    for (int j = 0; j < v; ++j) o[j] *= inv;
  }
  const int ix = x.id;
  const bool rg = tape.node(ix).requires_grad;
  Var<T> res = tape.push(sx, std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ix, io, v, rows](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      const auto& y = t.node(io).value;
      auto& dx = t.grad_buffer(ix);
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (int j = 0; j < v; ++j) dot += g[r * v + j] * y[r * v + j];
        for (int j = 0; j < v; ++j) dx[r * v + j] += y[r * v + j] * (g[r * v + j] - dot);
      }
    };
  }
  return res;
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T a = static_cast<T>(0.044715);
  auto vx = x.value();
  const auto n = static_cast<Eigen::Index>(vx.size());
  CArrMap<T> u(vx.data(), n);
  Buffer<T> th(vx.size());
  ArrMap<T> tv(th.data(), n);
  tv = (c * (u + a * u.cube())).tanh();
  Buffer<T> out(vx.size());
  ArrMap<T>(out.data(), n) = T(0.5) * u * (T(1) + tv);
  const int ix = x.id;
  const bool rg = tape.node(ix).requires_grad;
  Var<T> res = tape.push(x.shape(), std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ix, io, c, a, th = std::move(th)](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      const auto& vx = t.node(ix).value;
      auto& dx = t.grad_buffer(ix);
      const auto n = static_cast<Eigen::Index>(g.size());
      CArrMap<T> gu(g.data(), n);
      CArrMap<T> u(vx.data(), n);
      CArrMap<T> tv(th.data(), n);
      ArrMap<T> d(dx.data(), n);
      d += gu * (T(0.5) * (T(1) + tv) + T(0.5) * u * (T(1) - tv.square()) * c * (T(1) + T(3) * a * u.square()));
    };
  }
  return res;
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tape<T>& tape = *x.tape;
  if (numel(shape) != numel(x.shape())) shape_error("reshape", x.shape(), shape);
  auto vx = x.value();
  const int ix = x.id;
  const bool rg = tape.node(ix).requires_grad;
  Var<T> res = tape.push(std::move(shape), Buffer<T>(vx.begin(), vx.end()), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ix, io](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      auto& dx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    };
  }
  return res;
}

namespace {

// Copies src viewed as [A, n0, Bm, n1, C] into dst viewed as [A, n1, Bm, n0, C].
// With accumulate, adds instead of assigning.
template <typename T>
void swap_axes_copy(const T* src, T* dst, std::size_t A, std::size_t n0, std::size_t Bm, std::size_t n1,
                    std::size_t C, bool accumulate) {
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t i = 0; i < n0; ++i) {
      for (std::size_t b = 0; b < Bm; ++b) {
        for (std::size_t j = 0; j < n1; ++j) {
          const T* s = src + (((a * n0 + i) * Bm + b) * n1 + j) * C;
          T* d = dst + (((a * n1 + j) * Bm + b) * n0 + i) * C;
          if (accumulate) {
            for (std::size_t c = 0; c < C; ++c) d[c] += s[c];
          } else {
            std::copy_n(s, C, d);
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> transpose(Var<T> x, int axis0, int axis1) {
  Tape<T>& tape = *x.tape;
  const Shape sx = x.shape();
  axis0 = norm_axis(axis0, sx.size(), "transpose");
  axis1 = norm_axis(axis1, sx.size(), "transpose");
  if (axis0 > axis1) std::swap(axis0, axis1);
  std::size_t A = 1, Bm = 1, C = 1;
  for (int i = 0; i < axis0; ++i) A *= sx[i];
  for (int i = axis0 + 1; i < axis1; ++i) Bm *= sx[i];
  for (std::size_t i = axis1 + 1; i < sx.size(); ++i) C *= sx[i];
  const std::size_t n0 = sx[axis0], n1 = sx[axis1];
  Shape so = sx;
  std::swap(so[axis0], so[axis1]);
  Buffer<T> out(numel(sx));
  swap_axes_copy(x.value().data(), out.data(), A, n0, Bm, n1, C, false);
  const int ix = x.id;
  const bool rg = tape.node(ix).requires_grad;
  Var<T> res = tape.push(so, std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ix, io, A, n0, Bm, n1, C](Tape<T>& t) {
      swap_axes_copy(t.node(io).grad.data(), t.grad_buffer(ix).data(), A, n1, Bm, n0, C, true);
    };
  }
  return res;
}

template <typename T>
Var<T> cross_entropy_with_logits(Var<T> logits, std::span<const int> targets) {
  Tape<T>& tape = *logits.tape;
  const Shape& sl = logits.shape();
  if (sl.size() != 2 || static_cast<std::size_t>(sl[0]) != targets.size()) {
    shape_error("cross_entropy_with_logits", sl, {static_cast<int>(targets.size())});
  }
  const int n = sl[0], v = sl[1];
  auto vl = logits.value();
  Buffer<T> out(n);
  Buffer<T> probs(vl.size());
  for (int r = 0; r < n; ++r) {
    if (targets[r] < 0 || targets[r] >= v) {
      throw UsageError("cross_entropy_with_logits: target " + std::to_string(targets[r]) + " outside vocab " +
                       std::to_string(v));
    }
    const T* lr = vl.data() + static_cast<std::size_t>(r) * v;
    const T mx = *std::max_element(lr, lr + v);
    T s = 0;
    for (int j = 0; j < v; ++j) s += std::exp(lr[j] - mx);
    const T lse = mx + std::log(s);
    out[r] = lse - lr[targets[r]];
    for (int j = 0; j < v; ++j) probs[static_cast<std::size_t>(r) * v + j] = std::exp(lr[j] - lse);
  }
  const int il = logits.id;
  const bool rg = tape.node(il).requires_grad;
  Var<T> res = tape.push({n}, std::move(out), rg);
  const int io = res.id;
  if (rg) {
    std::vector<int> tv(targets.begin(), targets.end());
    tape.node(io).backward = [il, io, n, v, tv = std::move(tv), probs = std::move(probs)](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      auto& dl = t.grad_buffer(il);
      for (int r = 0; r < n; ++r) {
        T* d = dl.data() + static_cast<std::size_t>(r) * v;
        const T* p = probs.data() + static_cast<std::size_t>(r) * v;
        for (int j = 0; j < v; ++j) d[j] += g[r] * p[j];
        d[tv[r]] -= g[r];
      }
    };
  }
  return res;
}

template <typename T>
Var<T> mask_add(Var<T> x, const Tensor<T>& mask) {
  if (!is_suffix(x.shape(), mask.shape)) shape_error("mask_add", x.shape(), mask.shape);
  Var<T> m = x.tape->constant(mask.shape, mask.data);
  return add_impl(x, m, T(1), "mask_add");
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  Tape<T>& tape = *parts[0].tape;
  const Shape base = parts[0].shape();
  axis = norm_axis(axis, base.size(), "concat");
  Shape so = base;
  so[axis] = 0;
  bool rg = false;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != base.size()) shape_error("concat", base, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != base[i]) shape_error("concat", base, s);
    }
    so[axis] += s[axis];
    rg = rg || tape.node(p.id).requires_grad;
  }
  const AxisSplit out_split = split_at(so, axis);
  Buffer<T> out(numel(so));
  std::vector<int> ids;
  std::vector<std::size_t> lens, offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    auto v = p.value();
    for (std::size_t o = 0; o < out_split.outer; ++o) {
      std::copy_n(v.data() + o * len * out_split.inner, len * out_split.inner,
                  out.data() + (o * out_split.len + offset) * out_split.inner);
    }
    ids.push_back(p.id);
    lens.push_back(len);
    offsets.push_back(offset);
    offset += len;
  }
  Var<T> res = tape.push(so, std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [io, ids, lens, offsets, out_split](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (!t.node(ids[k]).requires_grad) continue;
        auto& d = t.grad_buffer(ids[k]);
        const std::size_t chunk = lens[k] * out_split.inner;
        for (std::size_t o = 0; o < out_split.outer; ++o) {
          const T* src = g.data() + (o * out_split.len + offsets[k]) * out_split.inner;
          T* dst = d.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return res;
}

template <typename T>
Var<T> slice(Var<T> x, int axis, int start, int length) {
  Tape<T>& tape = *x.tape;
  const Shape sx = x.shape();
  axis = norm_axis(axis, sx.size(), "slice");
  if (start < 0 || length < 0 || start + length > sx[axis]) {
    throw UsageError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") outside axis of shape " + shape_str(sx));
  }
  const AxisSplit in = split_at(sx, axis);
  Shape so = sx;
  so[axis] = length;
  Buffer<T> out(numel(so));
  auto vx = x.value();
  const std::size_t chunk = static_cast<std::size_t>(length) * in.inner;
  for (std::size_t o = 0; o < in.outer; ++o) {
    std::copy_n(vx.data() + (o * in.len + start) * in.inner, chunk, out.data() + o * chunk);
  }
  const int ix = x.id;
  const bool rg = tape.node(ix).requires_grad;
  Var<T> res = tape.push(so, std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ix, io, in, start, chunk](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      auto& d = t.grad_buffer(ix);
      for (std::size_t o = 0; o < in.outer; ++o) {
        T* dst = d.data() + (o * in.len + start) * in.inner;
        const T* src = g.data() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    };
  }
  return res;
}

template <typename T>
Var<T> sum(Var<T> x) {
  Tape<T>& tape = *x.tape;
  auto vx = x.value();
  T s = 0;
  for (T v : vx) s += v;
  const int ix = x.id;
  const bool rg = tape.node(ix).requires_grad;
  Var<T> res = tape.push({}, {s}, rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ix, io](Tape<T>& t) {
      const T g = t.node(io).grad[0];
      auto& d = t.grad_buffer(ix);
      for (auto& v : d) v += g;
    };
  }
  return res;
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = numel(x.shape());
  if (n == 0) throw UsageError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> sum_last(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Shape sx = x.shape();
  if (sx.empty()) shape_error("sum_last", sx);
  const int v = sx.back();
  const std::size_t rows = numel(sx) / v;
  auto vx = x.value();
  Buffer<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (int j = 0; j < v; ++j) out[r] += vx[r * v + j];
  }
  const int ix = x.id;
  const bool rg = tape.node(ix).requires_grad;
  Var<T> res = tape.push(Shape(sx.begin(), sx.end() - 1), std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ix, io, v, rows](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      auto& d = t.grad_buffer(ix);
      for (std::size_t r = 0; r < rows; ++r) {
        for (int j = 0; j < v; ++j) d[r * v + j] += g[r];
      }
    };
  }
  return res;
}

template <typename T>
Var<T> log_sigmoid(Var<T> x) {
  Tape<T>& tape = *x.tape;
  auto vx = x.value();
  Buffer<T> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T u = vx[i];
    out[i] = std::min(u, T(0)) - std::log1p(std::exp(-std::abs(u)));
  }
  const int ix = x.id;
  const bool rg = tape.node(ix).requires_grad;
  Var<T> res = tape.push(x.shape(), std::move(out), rg);
  const int io = res.id;
  if (rg) {
    tape.node(io).backward = [ix, io](Tape<T>& t) {
      const auto& g = t.node(io).grad;
      const auto& vx = t.node(ix).value;
      auto& d = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) {
        // d/du log sigmoid(u) = sigmoid(-u)
        const T u = vx[i];
        const T s = u >= 0 ? std::exp(-u) / (T(1) + std::exp(-u)) : T(1) / (T(1) + std::exp(u));
        d[i] += g[i] * s;
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckResult grad_check(const DifferentiableFn& f, std::vector<Tensor<double>> params, double eps,
                           std::size_t coordinates, std::uint64_t seed) {
  if (!(eps > 0.0)) throw UsageError("grad_check: eps must be positive");
  const LossAndGrad base = f(params, true);
  if (!std::isfinite(base.loss)) throw NumericError("grad_check: non-finite loss");
  if (base.grads.size() != params.size()) throw UsageError("grad_check: gradient count mismatch");

  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (base.grads[t].data.size() != params[t].data.size()) throw UsageError("grad_check: gradient shape mismatch");
    for (std::size_t i = 0; i < params[t].data.size(); ++i) all.emplace_back(t, i);
  }
  std::size_t count = std::min(coordinates, all.size());
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                            static_cast<std::int64_t>(all.size()) - 1));
    std::swap(all[i], all[j]);
  }

  GradCheckResult result;
  result.coordinates = count;
  for (std::size_t c = 0; c < count; ++c) {
    const auto [t, i] = all[c];
    double& p = params[t].data[i];
    const double saved = p;
    p = saved + eps;
    const double up = f(params, false).loss;
    p = saved - eps;
    const double down = f(params, false).loss;
    p = saved;
    const double g_fd = (up - down) / (2.0 * eps);
    const double g_ad = base.grads[t].data[i];
    if (!std::isfinite(g_fd) || !std::isfinite(g_ad)) throw NumericError("grad_check: non-finite gradient");
    const double err = std::abs(g_ad - g_fd) / std::max(1e-8, std::abs(g_ad) + std::abs(g_fd));
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_tensor = t;
      result.worst_index = i;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define LOCGEN_AD_INSTANTIATE(T)                                                     \
  template struct Tensor<T>;                                                         \
  template struct Var<T>;                                                            \
  template class Tape<T>;                                                            \
  template Var<T> matmul(Var<T>, Var<T>);                                            \
  template Var<T> add(Var<T>, Var<T>);                                               \
  template Var<T> sub(Var<T>, Var<T>);                                               \
  template Var<T> mul(Var<T>, Var<T>);                                               \
  template Var<T> scale(Var<T>, T);                                                  \
  template Var<T> embedding_lookup(Var<T>, std::span<const int>);                    \
  template Var<T> layernorm(Var<T>, Var<T>, Var<T>, T);                              \
  template Var<T> softmax(Var<T>);                                                   \
  template Var<T> gelu(Var<T>);                                                      \
  template Var<T> reshape(Var<T>, Shape);                                            \
  template Var<T> transpose(Var<T>, int, int);                                       \
  template Var<T> cross_entropy_with_logits(Var<T>, std::span<const int>);           \
  template Var<T> mask_add(Var<T>, const Tensor<T>&);                                \
  template Var<T> concat(std::span<const Var<T>>, int);                              \
  template Var<T> slice(Var<T>, int, int, int);                                      \
  template Var<T> sum(Var<T>);                                                       \
  template Var<T> mean(Var<T>);                                                      \
  template Var<T> sum_last(Var<T>);                                                  \
  template Var<T> log_sigmoid(Var<T>);

LOCGEN_AD_INSTANTIATE(float)
LOCGEN_AD_INSTANTIATE(double)

#undef LOCGEN_AD_INSTANTIATE

}  // namespace locgen::ad
