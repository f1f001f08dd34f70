// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "locgen/error.hpp"
#include "locgen/rng.hpp"

namespace locgen {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw UsageError("model config: " + msg); };
  if (image_size <= 0 || patch_size <= 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (num_bins != image_size) fail("num_bins must equal image_size (one bin per pixel)");
  if (num_classes < 1) fail("num_classes must be >= 1");
}

template <typename T>
std::size_t ModelParams<T>::index(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw UsageError("unknown parameter " + name);
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

template <typename T>
bool ModelParams<T>::all_finite() const {
  for (const auto& t : tensors) {
    for (T v : t.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

ModelParams<float> init_params(const ModelConfig& config) {
  config.validate();
  ModelParams<float> p;
  p.config = config;
  const int d = config.d_model;
  const int v = config.vocab_size();
  const Rng root(config.seed);

  auto add = [&](const std::string& name, Shape shape, char kind) {
    Tensor<float> t = Tensor<float>::zeros(shape, true);
    if (kind == 'n') {
      Rng rng = root.split(p.names.size());
      for (auto& x : t.data) x = static_cast<float>(0.02 * rng.normal());
    } else if (kind == '1') {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    }
    p.names.push_back(name);
    p.tensors.push_back(std::move(t));
  };

  add("patch.w", {config.patch_dim(), d}, 'n');
  add("patch.b", {d}, '0');
  add("patch.pos", {config.num_patches(), d}, 'n');
  add("class.emb", {config.num_classes, d}, 'n');
  add("tok.emb", {v, d}, 'n');
  add("tok.pos", {4, d}, 'n');
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string b = "blk" + std::to_string(l) + ".";
    add(b + "ln1.g", {d}, '1');
    add(b + "ln1.b", {d}, '0');
    add(b + "attn.wqkv", {d, 3 * d}, 'n');
    // No key bias: it shifts every score in a row equally and cancels in softmax.
    add(b + "attn.bq", {d}, '0');
    add(b + "attn.bv", {d}, '0');
    add(b + "attn.wo", {d, d}, 'n');
    add(b + "attn.bo", {d}, '0');
    add(b + "ln2.g", {d}, '1');
    add(b + "ln2.b", {d}, '0');
    add(b + "mlp.w1", {d, 4 * d}, 'n');
    add(b + "mlp.b1", {4 * d}, '0');
    add(b + "mlp.w2", {4 * d, d}, 'n');
    add(b + "mlp.b2", {d}, '0');
  }
  add("lnf.g", {d}, '1');
  add("lnf.b", {d}, '0');
  add("head.w", {d, v}, '0');
  add("head.b", {v}, '0');
  return p;
}

template <typename T>
std::vector<T> patchify(const Scene& scene, const ModelConfig& config) {
  if (scene.image_size() != config.image_size) {
    throw UsageError("scene image_size " + std::to_string(scene.image_size()) + " does not match model " +
                     std::to_string(config.image_size));
  }
  if (scene.num_channels() != config.channels()) {
    throw UsageError("scene has " + std::to_string(scene.num_channels()) + " channels, model expects " +
                     std::to_string(config.channels()));
  }
  const int ps = config.patch_size;
  const int side = config.patches_per_side();
  const int pd = config.patch_dim();
  std::vector<T> out(static_cast<std::size_t>(config.num_patches()) * pd);
  for (int py = 0; py < side; ++py) {
    for (int px = 0; px < side; ++px) {
      T* row = out.data() + static_cast<std::size_t>(py * side + px) * pd;
      int f = 0;
      for (int c = 0; c < config.channels(); ++c) {
        for (int dy = 0; dy < ps; ++dy) {
          for (int dx = 0; dx < ps; ++dx) row[f++] = static_cast<T>(scene.at(c, py * ps + dy, px * ps + dx));
        }
      }
    }
  }
  return out;
}

template <typename T>
BoundParams<T> bind(Tape<T>& tape, const ModelParams<T>& params, bool requires_grad) {
  BoundParams<T> b;
  b.params = &params;
  b.vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) {
    Tensor<T> leaf = t;
    leaf.requires_grad = requires_grad;
    b.vars.push_back(tape.leaf(leaf));
  }
  return b;
}

void check_tokens(const ModelConfig& config, const TokenSequence& t) {
  if (t.num_bins != config.num_bins || !t.in_range()) {
    throw UsageError("token sequence out of range for model with " + std::to_string(config.num_bins) + " bins");
  }
}

template <typename T>
Var<T> prefix_embeddings(const BoundParams<T>& p, std::span<const ModelInput> batch) {
  const ModelConfig& cfg = p.params->config;
  Tape<T>& tape = *p.vars.front().tape;
  const int B = static_cast<int>(batch.size());
  if (B == 0) throw UsageError("prefix_embeddings: empty batch");
  const int P = cfg.num_patches();
  std::vector<T> feats;
  feats.reserve(static_cast<std::size_t>(B) * P * cfg.patch_dim());
  std::vector<int> classes;
  for (const auto& item : batch) {
    if (item.class_id < 0 || item.class_id >= cfg.num_classes) {
      throw UsageError("unknown class " + std::to_string(item.class_id));
    }
    auto f = patchify<T>(*item.scene, cfg);
    feats.insert(feats.end(), f.begin(), f.end());
    classes.push_back(item.class_id);
  }
  const int d = cfg.d_model;
  Var<T> patches = tape.constant({B, P, cfg.patch_dim()}, std::move(feats));
  Var<T> x = ad::add(ad::add(ad::matmul(patches, p["patch.w"]), p["patch.b"]), p["patch.pos"]);
  Var<T> cls = ad::reshape(ad::embedding_lookup(p["class.emb"], std::span<const int>(classes)), {B, 1, d});
  const std::array<Var<T>, 2> parts{x, cls};
  return ad::concat(std::span<const Var<T>>(parts), 1);
}

namespace {

template <typename T>
Tensor<T> causal_mask(int n) {
  Tensor<T> m = Tensor<T>::zeros({n, n});
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) m.data[static_cast<std::size_t>(i) * n + j] = -std::numeric_limits<T>::infinity();
  }
  return m;
}

template <typename T>
Var<T> split_heads(Var<T> z, int B, int L, int H, int dh) {
  return ad::reshape(ad::transpose(ad::reshape(z, {B, L, H, dh}), 1, 2), {B * H, L, dh});
}

template <typename T>
Var<T> merge_heads(Var<T> z, int B, int L, int H, int dh) {
  return ad::reshape(ad::transpose(ad::reshape(z, {B, H, L, dh}), 1, 2), {B, L, H * dh});
}

}  // namespace

template <typename T>
Var<T> decoder_logits(const BoundParams<T>& p, std::span<const ModelInput> batch,
                      std::span<const std::vector<int>> coords) {
  const ModelConfig& cfg = p.params->config;
  const int B = static_cast<int>(batch.size());
  if (coords.size() != batch.size()) throw UsageError("decoder_logits: coords/batch size mismatch");
  const int L = coords.empty() ? 0 : static_cast<int>(coords[0].size());
  if (L > 3) throw UsageError("decoder_logits: at most 3 coordinate tokens may be fed");
  std::vector<int> tokens;
  tokens.reserve(static_cast<std::size_t>(B) * (L + 1));
  for (const auto& c : coords) {
    if (static_cast<int>(c.size()) != L) throw UsageError("decoder_logits: ragged coordinate prefixes");
    tokens.push_back(cfg.sos_token());
    for (int t : c) {
      if (t < 0 || t >= cfg.num_bins) throw UsageError("decoder_logits: coordinate token out of range");
      tokens.push_back(t);
    }
  }
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = d / H;

  Var<T> prefix = prefix_embeddings(p, batch);
  Var<T> tok = ad::reshape(ad::embedding_lookup(p["tok.emb"], std::span<const int>(tokens)), {B, L + 1, d});
  tok = ad::add(tok, ad::slice(p["tok.pos"], 0, 0, L + 1));
  const std::array<Var<T>, 2> parts{prefix, tok};
  Var<T> x = ad::concat(std::span<const Var<T>>(parts), 1);
  const int S = cfg.prefix_length() + L + 1;
  const Tensor<T> mask = causal_mask<T>(S);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string b = "blk" + std::to_string(l) + ".";
    Var<T> h = ad::layernorm(x, p[b + "ln1.g"], p[b + "ln1.b"]);
    Var<T> qkv = ad::matmul(h, p[b + "attn.wqkv"]);
    Var<T> q = split_heads(ad::add(ad::slice(qkv, 2, 0, d), p[b + "attn.bq"]), B, S, H, dh);
    Var<T> k = split_heads(ad::slice(qkv, 2, d, d), B, S, H, dh);
    Var<T> v = split_heads(ad::add(ad::slice(qkv, 2, 2 * d, d), p[b + "attn.bv"]), B, S, H, dh);
    Var<T> scores = ad::mask_add(ad::scale(ad::matmul(q, ad::transpose(k, 1, 2)), inv_sqrt), mask);
    Var<T> att = merge_heads(ad::matmul(ad::softmax(scores), v), B, S, H, dh);
    x = ad::add(x, ad::add(ad::matmul(att, p[b + "attn.wo"]), p[b + "attn.bo"]));
    Var<T> h2 = ad::layernorm(x, p[b + "ln2.g"], p[b + "ln2.b"]);
    Var<T> m = ad::gelu(ad::add(ad::matmul(h2, p[b + "mlp.w1"]), p[b + "mlp.b1"]));
    x = ad::add(x, ad::add(ad::matmul(m, p[b + "mlp.w2"]), p[b + "mlp.b2"]));
  }
  Var<T> tail = ad::slice(x, 1, S - (L + 1), L + 1);
  Var<T> hf = ad::layernorm(tail, p["lnf.g"], p["lnf.b"]);
  return ad::add(ad::matmul(hf, p["head.w"]), p["head.b"]);
}

template <typename T>
Var<T> sequence_logprobs(const BoundParams<T>& p, std::span<const ModelInput> batch,
                         std::span<const TokenSequence> targets) {
  const ModelConfig& cfg = p.params->config;
  if (targets.size() != batch.size()) throw UsageError("sequence_logprobs: targets/batch size mismatch");
  const int B = static_cast<int>(batch.size());
  std::vector<std::vector<int>> coords;
  std::vector<int> flat;
  for (const auto& t : targets) {
    check_tokens(cfg, t);
    coords.push_back({t.tokens[0], t.tokens[1], t.tokens[2]});
    flat.insert(flat.end(), t.tokens.begin(), t.tokens.end());
  }
  Var<T> logits = decoder_logits(p, batch, std::span<const std::vector<int>>(coords));
  Var<T> flat_logits = ad::reshape(logits, {B * 4, cfg.vocab_size()});
  Var<T> nll = ad::reshape(ad::cross_entropy_with_logits(flat_logits, std::span<const int>(flat)), {B, 4});
  return ad::scale(ad::sum_last(nll), T(-1));
}

template <typename T>
Tensor<T> encode_prefix(const ModelParams<T>& params, const Scene& scene, int class_id) {
  Tape<T> tape;
  const auto p = bind(tape, params, false);
  const ModelInput in{&scene, class_id};
  Var<T> v = prefix_embeddings(p, std::span<const ModelInput>(&in, 1));
  const auto val = v.value();
  return Tensor<T>({params.config.prefix_length(), params.config.d_model}, std::vector<T>(val.begin(), val.end()));
}

template <typename T>
std::vector<T> forward_logits(const ModelParams<T>& params, const Scene& scene, int class_id,
                              std::span<const int> prefix_coords) {
  if (prefix_coords.size() > 3) throw UsageError("forward_logits: prefix must hold fewer than 4 tokens");
  Tape<T> tape;
  const auto p = bind(tape, params, false);
  const ModelInput in{&scene, class_id};
  const std::vector<int> c(prefix_coords.begin(), prefix_coords.end());
  Var<T> logits = decoder_logits(p, std::span<const ModelInput>(&in, 1), std::span<const std::vector<int>>(&c, 1));
  const auto val = logits.value();
  const int v = params.config.vocab_size();
  return std::vector<T>(val.end() - v, val.end());
}

template <typename T>
std::vector<T> sequence_logprob_batch(const ModelParams<T>& params, std::span<const ModelInput> batch,
                                      std::span<const TokenSequence> targets, std::size_t chunk) {
  std::vector<T> out;
  out.reserve(batch.size());
  for (std::size_t start = 0; start < batch.size(); start += chunk) {
    const std::size_t n = std::min(chunk, batch.size() - start);
    Tape<T> tape;
    const auto p = bind(tape, params, false);
    Var<T> lp = sequence_logprobs(p, batch.subspan(start, n), targets.subspan(start, n));
    const auto v = lp.value();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

template <typename T>
T sequence_logprob(const ModelParams<T>& params, const Scene& scene, int class_id, const TokenSequence& t) {
  const ModelInput in{&scene, class_id};
  return sequence_logprob_batch(params, std::span<const ModelInput>(&in, 1), std::span<const TokenSequence>(&t, 1))[0];
}

template <typename T>
std::uint64_t params_hash(const ModelParams<T>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : params.tensors) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data.data());
    for (std::size_t i = 0; i < t.data.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

#define LOCGEN_MODEL_INSTANTIATE(T)                                                                         \
  template struct ModelParams<T>;                                                                           \
  template std::vector<T> patchify<T>(const Scene&, const ModelConfig&);                                   \
  template BoundParams<T> bind<T>(Tape<T>&, const ModelParams<T>&, bool);                                  \
  template Var<T> prefix_embeddings<T>(const BoundParams<T>&, std::span<const ModelInput>);                \
  template Var<T> decoder_logits<T>(const BoundParams<T>&, std::span<const ModelInput>,                    \
                                    std::span<const std::vector<int>>);                                    \
  template Var<T> sequence_logprobs<T>(const BoundParams<T>&, std::span<const ModelInput>,                 \
                                       std::span<const TokenSequence>);                                    \
  template Tensor<T> encode_prefix<T>(const ModelParams<T>&, const Scene&, int);                           \
  template std::vector<T> forward_logits<T>(const ModelParams<T>&, const Scene&, int, std::span<const int>); \
  template T sequence_logprob<T>(const ModelParams<T>&, const Scene&, int, const TokenSequence&);          \
  template std::vector<T> sequence_logprob_batch<T>(const ModelParams<T>&, std::span<const ModelInput>,    \
                                                    std::span<const TokenSequence>, std::size_t);          \
  template std::uint64_t params_hash<T>(const ModelParams<T>&);

LOCGEN_MODEL_INSTANTIATE(float)
LOCGEN_MODEL_INSTANTIATE(double)

#undef LOCGEN_MODEL_INSTANTIATE

}  // namespace locgen
