// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/infer.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "locgen/error.hpp"

namespace locgen {

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowV = Eigen::Matrix<float, 1, Eigen::Dynamic>;
using CMap = Eigen::Map<const MatR>;
using CRow = Eigen::Map<const RowV>;

constexpr float kLnEps = 1e-5f;

void layernorm_row(const float* x, const float* g, const float* b, int d, float* out) {
  float mu = 0;
  for (int j = 0; j < d; ++j) mu += x[j];
  mu /= d;
  float var = 0;
  for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= d;
  const float rs = 1.0f / std::sqrt(var + kLnEps);
  for (int j = 0; j < d; ++j) out[j] = (x[j] - mu) * rs * g[j] + b[j];
}

// Tanh-approximated GELU over a contiguous buffer, vectorized.
void gelu_inplace(float* data, Eigen::Index n) {
  Eigen::Map<Eigen::ArrayXf> a(data, n);
  const Eigen::ArrayXf t = (0.7978845608028654f * (a + 0.044715f * a.cube())).tanh();
  a = 0.5f * a * (1.0f + t);
}

std::uint64_t memo_key(std::span<const int> coords) {
  std::uint64_t k = coords.size();
  for (std::size_t i = 0; i < coords.size(); ++i) k |= static_cast<std::uint64_t>(coords[i]) << (4 + 14 * i);
  return k;
}

}  // namespace

SceneDecoder::SceneDecoder(const ModelParams<float>& params, const Scene& scene, int class_id) : params_(params) {
  const ModelConfig& cfg = params.config;
  if (class_id < 0 || class_id >= cfg.num_classes) throw UsageError("unknown class " + std::to_string(class_id));
  d_ = cfg.d_model;
  const int d = d_;
  const int P = cfg.num_patches();
  prefix_rows_ = cfg.prefix_length() + 1;
  const int R = prefix_rows_;
  auto ptr = [&](const std::string& n) { return params.get(n).data.data(); };
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string b = "blk" + std::to_string(l) + ".";
    layers_.push_back({ptr(b + "ln1.g"), ptr(b + "ln1.b"), ptr(b + "attn.wqkv"), ptr(b + "attn.bq"), ptr(b + "attn.bv"),
                       ptr(b + "attn.wo"), ptr(b + "attn.bo"), ptr(b + "ln2.g"), ptr(b + "ln2.b"),
                       ptr(b + "mlp.w1"), ptr(b + "mlp.b1"), ptr(b + "mlp.w2"), ptr(b + "mlp.b2")});
  }
  tok_emb_ = ptr("tok.emb");
  tok_pos_ = ptr("tok.pos");
  lnf_g_ = ptr("lnf.g");
  lnf_b_ = ptr("lnf.b");
  head_w_ = ptr("head.w");
  head_b_ = ptr("head.b");

  // Rows: patches, class token, SOS.
  const auto feats = patchify<float>(scene, cfg);
  MatR x(R, d);
  x.topRows(P) = CMap(feats.data(), P, cfg.patch_dim()) * CMap(ptr("patch.w"), cfg.patch_dim(), d);
  x.topRows(P).rowwise() += CRow(ptr("patch.b"), d);
  x.topRows(P) += CMap(ptr("patch.pos"), P, d);
  x.row(P) = CRow(ptr("class.emb") + static_cast<std::size_t>(class_id) * d, d);
  x.row(P + 1) = CRow(tok_emb_ + static_cast<std::size_t>(cfg.sos_token()) * d, d) + CRow(tok_pos_, d);

  const int H = cfg.n_heads;
  const int dh = d / H;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  prefix_kv_.assign(static_cast<std::size_t>(cfg.n_layers) * 2 * R * d, 0.0f);
  MatR h(R, d), qkv(R, 3 * d), att(R, d), m, s(R, R);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Layer& L = layers_[l];
    for (int r = 0; r < R; ++r) layernorm_row(x.row(r).data(), L.ln1g, L.ln1b, d, h.row(r).data());
    qkv.noalias() = h * CMap(L.wqkv, d, 3 * d);
    qkv.leftCols(d).rowwise() += CRow(L.bq, d);
    qkv.rightCols(d).rowwise() += CRow(L.bv, d);
    float* kc = prefix_kv_.data() + static_cast<std::size_t>(l) * 2 * R * d;
    float* vc = kc + static_cast<std::size_t>(R) * d;
    for (int r = 0; r < R; ++r) {
      std::copy_n(qkv.row(r).data() + d, d, kc + static_cast<std::size_t>(r) * d);
      std::copy_n(qkv.row(r).data() + 2 * d, d, vc + static_cast<std::size_t>(r) * d);
    }
    for (int hd = 0; hd < H; ++hd) {
      s.noalias() = qkv.middleCols(hd * dh, dh) * qkv.middleCols(d + hd * dh, dh).transpose();
      s *= inv_sqrt;
      for (int r = 0; r < R; ++r) {
        auto row = s.row(r).head(r + 1).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
        s.row(r).tail(R - r - 1).setZero();
      }
      att.middleCols(hd * dh, dh).noalias() = s * qkv.middleCols(2 * d + hd * dh, dh);
    }
    x.noalias() += att * CMap(L.wo, d, d);
    x.rowwise() += CRow(L.bo, d);
    for (int r = 0; r < R; ++r) layernorm_row(x.row(r).data(), L.ln2g, L.ln2b, d, h.row(r).data());
    m.noalias() = h * CMap(L.w1, d, 4 * d);
    m.rowwise() += CRow(L.b1, 4 * d);
    gelu_inplace(m.data(), m.size());
    x.noalias() += m * CMap(L.w2, 4 * d, d);
    x.rowwise() += CRow(L.b2, d);
  }
  std::vector<float> hf(d);
  layernorm_row(x.row(R - 1).data(), lnf_g_, lnf_b_, d, hf.data());
  RowV lg = CRow(hf.data(), d) * CMap(head_w_, d, cfg.vocab_size()) + CRow(head_b_, cfg.vocab_size());
  sos_logits_.assign(lg.data(), lg.data() + lg.size());
}

void SceneDecoder::run_position(const float* x_in, std::span<const Entry* const> path, Entry& out) const {
  const ModelConfig& cfg = params_.config;
  const int d = d_;
  const int R = prefix_rows_;
  const int H = cfg.n_heads;
  const int dh = d / H;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  const int n = R + static_cast<int>(path.size()) + 1;
  RowV x = CRow(x_in, d);
  RowV h(d), qkv(3 * d), att(d), m(4 * d);
  out.kv.assign(static_cast<std::size_t>(cfg.n_layers) * 2 * d, 0.0f);
  Eigen::VectorXf sc(n);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Layer& L = layers_[l];
    layernorm_row(x.data(), L.ln1g, L.ln1b, d, h.data());
    qkv.noalias() = h * CMap(L.wqkv, d, 3 * d);
    qkv.head(d) += CRow(L.bq, d);
    qkv.tail(d) += CRow(L.bv, d);
    float* own = out.kv.data() + static_cast<std::size_t>(l) * 2 * d;
    std::copy_n(qkv.data() + d, 2 * d, own);
    const float* kc = prefix_kv_.data() + static_cast<std::size_t>(l) * 2 * R * d;
    const float* vc = kc + static_cast<std::size_t>(R) * d;
    auto key_row = [&](int j) -> const float* {
      if (j < R) return kc + static_cast<std::size_t>(j) * d;
      if (j - R < static_cast<int>(path.size())) return path[j - R]->kv.data() + static_cast<std::size_t>(l) * 2 * d;
      return own;
    };
    auto value_row = [&](int j) -> const float* {
      if (j < R) return vc + static_cast<std::size_t>(j) * d;
      return key_row(j) + d;
    };
    const CMap kp(kc, R, d), vp(vc, R, d);
    for (int hd = 0; hd < H; ++hd) {
      const float* q = qkv.data() + hd * dh;
      sc.head(R).noalias() = kp.middleCols(hd * dh, dh) * CRow(q, dh).transpose();
      for (int j = R; j < n; ++j) {
        const float* k = key_row(j) + hd * dh;
        float s = 0;
        for (int e = 0; e < dh; ++e) s += q[e] * k[e];
        sc[j] = s;
      }
      sc *= inv_sqrt;
      sc = (sc.array() - sc.maxCoeff()).exp();
      sc /= sc.sum();
      auto o = att.segment(hd * dh, dh);
      o.noalias() = sc.head(R).transpose() * vp.middleCols(hd * dh, dh);
      for (int j = R; j < n; ++j) o += sc[j] * CRow(value_row(j) + hd * dh, dh);
    }
    x.noalias() += att * CMap(L.wo, d, d);
    x += CRow(L.bo, d);
    layernorm_row(x.data(), L.ln2g, L.ln2b, d, h.data());
    m.noalias() = h * CMap(L.w1, d, 4 * d);
    m += CRow(L.b1, 4 * d);
    gelu_inplace(m.data(), m.size());
    x.noalias() += m * CMap(L.w2, 4 * d, d);
    x += CRow(L.b2, d);
  }
  layernorm_row(x.data(), lnf_g_, lnf_b_, d, h.data());
  const int V = cfg.vocab_size();
  RowV lg = h * CMap(head_w_, d, V) + CRow(head_b_, V);
  out.logits.assign(lg.data(), lg.data() + V);
}

const SceneDecoder::Entry& SceneDecoder::entry(std::span<const int> coords) {
  const std::uint64_t key = memo_key(coords);
  if (auto it = memo_.find(key); it != memo_.end()) return it->second;
  const int L = static_cast<int>(coords.size());
  std::vector<const Entry*> path;
  for (int i = 1; i < L; ++i) path.push_back(&entry(coords.first(i)));
  const int t = coords[L - 1];
  std::vector<float> x(d_);
  for (int j = 0; j < d_; ++j) {
    x[j] = tok_emb_[static_cast<std::size_t>(t) * d_ + j] + tok_pos_[static_cast<std::size_t>(L) * d_ + j];
  }
  Entry e;
  run_position(x.data(), path, e);
  return memo_.emplace(key, std::move(e)).first->second;
}

std::span<const float> SceneDecoder::logits(std::span<const int> coords) {
  const ModelConfig& cfg = params_.config;
  if (coords.size() > 3) throw UsageError("logits: prefix must hold fewer than 4 tokens");
  for (int t : coords) {
    if (t < 0 || t >= cfg.num_bins) throw UsageError("logits: coordinate token out of range");
  }
  if (coords.empty()) return sos_logits_;
  return entry(coords).logits;
}

}  // namespace locgen
