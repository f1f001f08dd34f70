// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "locgen/error.hpp"
#include "locgen/parallel.hpp"
#include "locgen/rng.hpp"
#include "locgen/train.hpp"

namespace locgen {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw UsageError("train config: " + m); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (total_steps < 1) fail("total_steps must be >= 1");
  if (!(learning_rate > 0)) fail("learning_rate must be > 0");
  if (warmup_steps < 0 || warmup_steps > total_steps) fail("warmup_steps must be in [0, total_steps]");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("Adam betas must be in [0, 1)");
  if (!(eps > 0)) fail("eps must be > 0");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (heldout_size < 0) fail("heldout_size must be >= 0");
  if (shards < 1) fail("shards must be >= 1");
}

TrainState make_train_state(ModelParams<float> params) {
  TrainState s;
  for (const auto& t : params.tensors) {
    s.opt.m.emplace_back(t.size(), 0.0f);
    s.opt.v.emplace_back(t.size(), 0.0f);
  }
  s.params = std::move(params);
  return s;
}

double learning_rate_at(std::int64_t step, const TrainConfig& c) {
  if (c.warmup_steps == 0) return c.learning_rate;
  return c.learning_rate * std::min(1.0, static_cast<double>(step) / c.warmup_steps);
}

namespace {

void split_items(const std::vector<TrainItem>& items, std::vector<ModelInput>& in, std::vector<TokenSequence>& tg) {
  for (const auto& it : items) {
    if (it.scene == nullptr) throw UsageError("training item without a scene");
    in.push_back({it.scene, it.class_id});
    tg.push_back(it.target);
  }
}

}  // namespace

double nll_loss(const ModelParams<float>& params, const std::vector<TrainItem>& items) {
  if (items.empty()) throw UsageError("nll_loss: empty batch");
  std::vector<ModelInput> in;
  std::vector<TokenSequence> tg;
  split_items(items, in, tg);
  const auto lp = sequence_logprob_batch(params, std::span<const ModelInput>(in), std::span<const TokenSequence>(tg));
  double s = 0.0;
  for (float v : lp) s -= v;
  return s / static_cast<double>(items.size());
}

template <typename T>
ad::Var<T> nll_objective(const BoundParams<T>& p, const std::vector<TrainItem>& items, ad::Var<T>* logprobs) {
  std::vector<ModelInput> in;
  std::vector<TokenSequence> tg;
  split_items(items, in, tg);
  auto lp = sequence_logprobs(p, std::span<const ModelInput>(in), std::span<const TokenSequence>(tg));
  if (logprobs != nullptr) *logprobs = lp;
  return ad::scale(ad::sum(lp), T(-1));
}

template ad::Var<float> nll_objective(const BoundParams<float>&, const std::vector<TrainItem>&, ad::Var<float>*);
template ad::Var<double> nll_objective(const BoundParams<double>&, const std::vector<TrainItem>&, ad::Var<double>*);

ad::LossAndGrad nll_loss_and_grad_f64(const ModelParams<double>& params, const std::vector<TrainItem>& items,
                                      bool want_grad) {
  if (items.empty()) throw UsageError("nll_loss_and_grad: empty batch");
  ad::Tape<double> tape;
  const auto p = bind(tape, params, want_grad);
  auto loss = ad::scale(nll_objective(p, items), 1.0 / static_cast<double>(items.size()));
  ad::LossAndGrad r;
  r.loss = loss.value()[0];
  if (!want_grad) return r;
  tape.backward(loss);
  for (const auto& v : p.vars) r.grads.push_back(tape.grad(v));
  return r;
}

LossAndGrads nll_loss_and_grad(const ModelParams<float>& params, const std::vector<TrainItem>& items, int shards) {
  const std::size_t n = items.size();
  if (n == 0) throw UsageError("nll_loss_and_grad: empty batch");
  const std::size_t S = std::min<std::size_t>(std::max(shards, 1), n);
  struct Part {
    double loss = 0.0;
    std::vector<ad::Buffer<float>> grads;
    std::vector<double> lps;
  };
  std::vector<Part> parts(S);
  parallel_for(S, [&](std::size_t s) {
    const std::size_t lo = s * n / S, hi = (s + 1) * n / S;
    ad::Tape<float> tape;
    const auto p = bind(tape, params, true);
    const std::vector<TrainItem> shard(items.begin() + lo, items.begin() + hi);
    ad::Var<float> lp;
    auto loss = nll_objective(p, shard, &lp);
    tape.backward(loss);
    Part& out = parts[s];
    out.loss = loss.value()[0];
    for (float v : lp.value()) out.lps.push_back(v);
    for (const auto& v : p.vars) {
      const auto g = tape.grad_span(v);
      out.grads.emplace_back(g.begin(), g.end());
      if (out.grads.back().empty()) out.grads.back().assign(ad::numel(v.shape()), 0.0f);
    }
  });
  LossAndGrads r;
  r.grads = std::move(parts[0].grads);
  r.loss = parts[0].loss;
  r.logprobs = parts[0].lps;
  for (std::size_t s = 1; s < S; ++s) {
    r.loss += parts[s].loss;
    r.logprobs.insert(r.logprobs.end(), parts[s].lps.begin(), parts[s].lps.end());
    for (std::size_t t = 0; t < r.grads.size(); ++t) {
      for (std::size_t i = 0; i < r.grads[t].size(); ++i) r.grads[t][i] += parts[s].grads[t][i];
    }
  }
  const float inv = 1.0f / static_cast<float>(n);
  for (auto& g : r.grads) {
    for (auto& x : g) x *= inv;
  }
  r.loss /= static_cast<double>(n);
  return r;
}

namespace {

double grad_norm(const std::vector<ad::Buffer<float>>& grads) {
  double s = 0.0;
  for (const auto& g : grads) {
    for (float x : g) s += static_cast<double>(x) * x;
  }
  return std::sqrt(s);
}

}  // namespace

double train_step(TrainState& st, const std::vector<TrainItem>& batch, const TrainConfig& c) {
  const double lr = learning_rate_at(st.step, c);
  LossAndGrads lg = nll_loss_and_grad(st.params, batch, c.shards);
  const double gn = grad_norm(lg.grads);
  if (!std::isfinite(lg.loss) || !std::isfinite(gn)) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "non-finite training state at step %lld: loss=%g lr=%g grad_norm=%g",
                  static_cast<long long>(st.step), lg.loss, lr, gn);
    throw NumericError(buf);
  }
  const double t = static_cast<double>(st.step + 1);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const float b1 = static_cast<float>(c.beta1), b2 = static_cast<float>(c.beta2);
  for (std::size_t k = 0; k < st.params.tensors.size(); ++k) {
    auto& p = st.params.tensors[k].data;
    auto& m = st.opt.m[k];
    auto& v = st.opt.v[k];
    const auto& g = lg.grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      p[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + c.eps));
    }
  }
  ++st.step;
  st.loss_history.push_back(lg.loss);
  return lg.loss;
}

std::vector<TrainItem> heldout_items(const Dataset& data, int limit) {
  std::vector<TrainItem> out;
  for (const auto& s : data.samples) {
    if (static_cast<int>(out.size()) >= limit) break;
    const auto pos = s.positives();
    if (pos.empty()) continue;
    out.push_back({&data.scene_of(s), s.class_id, quantize(pos.front())});
  }
  return out;
}

TrainState pretrain(const Dataset& train, const Dataset* heldout, const ModelConfig& model_config,
                    const TrainConfig& config, const TrainHooks& hooks) {
  return pretrain_from(init_params(model_config), train, heldout, config, hooks);
}

TrainState pretrain_from(ModelParams<float> init, const Dataset& train, const Dataset* heldout,
                         const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  tune_allocator();
  std::vector<std::size_t> sets;
  for (std::size_t i = 0; i < train.samples.size(); ++i) {
    if (train.samples[i].num_positives() > 0) sets.push_back(i);
  }
  if (sets.empty()) throw UsageError("pretrain: no AnnotationSet with a positive location");
  const std::size_t n = sets.size();
  const std::size_t b = std::min<std::size_t>(config.batch_size, n);
  const std::size_t per_epoch = n / b;
  const Rng root(config.seed);
  const auto held = heldout ? heldout_items(*heldout, config.heldout_size) : std::vector<TrainItem>{};

  TrainState st = make_train_state(std::move(init));
  std::int64_t epoch = -1;
  std::vector<std::size_t> order(n);
  std::vector<TokenSequence> targets(n);
  double window = 0.0;
  int window_n = 0;
  for (std::int64_t s = 0; s < config.total_steps; ++s) {
    const std::int64_t e = s / static_cast<std::int64_t>(per_epoch);
    if (e != epoch) {
      epoch = e;
      Rng er = root.split(static_cast<std::uint64_t>(e));
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(er.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const auto pos = train.samples[sets[order[i]]].positives();
        targets[i] = quantize(pos[er.uniform_int(0, static_cast<std::int64_t>(pos.size()) - 1)]);
      }
    }
    const std::size_t off = static_cast<std::size_t>(s % static_cast<std::int64_t>(per_epoch)) * b;
    std::vector<TrainItem> batch;
    batch.reserve(b);
    for (std::size_t i = off; i < off + b; ++i) {
      const AnnotationSet& a = train.samples[sets[order[i]]];
      batch.push_back({&train.scene_of(a), a.class_id, targets[i]});
    }
    const double lr = learning_rate_at(st.step, config);
    window += train_step(st, batch, config);
    ++window_n;
    if (st.step % config.eval_every == 0 || st.step == config.total_steps) {
      TrainLogRow row;
      row.step = st.step;
      row.lr = lr;
      row.train_loss = window / window_n;
      row.heldout_loss = held.empty() ? std::numeric_limits<double>::quiet_NaN() : nll_loss(st.params, held);
      window = 0.0;
      window_n = 0;
      st.log.push_back(row);
      if (hooks.log) hooks.log(row);
      if (hooks.checkpoint) hooks.checkpoint(st.step, st.params);
    }
  }
  return st;
}

std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
  std::string s = "step,lr,train_loss,heldout_loss\n";
  char buf[160];
  for (const auto& r : rows) {
    if (std::isnan(r.heldout_loss)) {
      std::snprintf(buf, sizeof buf, "%lld,%.8g,%.6f,\n", static_cast<long long>(r.step), r.lr, r.train_loss);
    } else {
      std::snprintf(buf, sizeof buf, "%lld,%.8g,%.6f,%.6f\n", static_cast<long long>(r.step), r.lr, r.train_loss,
                    r.heldout_loss);
    }
    s += buf;
  }
  return s;
}

}  // namespace locgen
