// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "locgen/error.hpp"
#include "locgen/parallel.hpp"
#include "locgen/rng.hpp"
#include "locgen/train.hpp"

namespace locgen {

void DpoConfig::validate() const {
  auto fail = [](const std::string& m) { throw UsageError("dpo config: " + m); };
  if (!(beta > 0) || !std::isfinite(beta)) fail("beta must be > 0");
  if (!(learning_rate > 0)) fail("learning_rate must be > 0");
  if (total_steps < 1) fail("total_steps must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (log_every < 1) fail("log_every must be >= 1");
  if (shards < 1) fail("shards must be >= 1");
}

std::vector<PairItem> pair_items(const Dataset& data, const std::vector<PreferencePair>& pairs) {
  std::vector<PairItem> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const Scene& scene = data.scenes[data.scene_index(p.scene_id)];
    out.push_back({&scene, p.class_id, quantize(p.preferred), quantize(p.rejected)});
  }
  return out;
}

namespace {

double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

/// Inputs laid out as preferred items then rejected items.
void pair_inputs(std::span<const PairItem> items, std::vector<ModelInput>& in, std::vector<TokenSequence>& tg) {
  for (const auto& it : items) {
    if (it.scene == nullptr) throw UsageError("preference item without a scene");
    in.push_back({it.scene, it.class_id});
    tg.push_back(it.preferred);
  }
  for (const auto& it : items) {
    in.push_back({it.scene, it.class_id});
    tg.push_back(it.rejected);
  }
}

/// Returns interleaved (preferred, rejected) log-probabilities per item.
std::vector<double> pair_logprobs(const ModelParams<float>& params, std::span<const PairItem> items) {
  std::vector<ModelInput> in;
  std::vector<TokenSequence> tg;
  pair_inputs(items, in, tg);
  const auto lp = sequence_logprob_batch(params, std::span<const ModelInput>(in), std::span<const TokenSequence>(tg));
  const std::size_t n = items.size();
  std::vector<double> out(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    out[2 * i] = lp[i];
    out[2 * i + 1] = lp[n + i];
  }
  for (double v : out) {
    if (!std::isfinite(v)) throw NumericError("non-finite sequence log-probability");
  }
  return out;
}

}  // namespace

double preference_prob_from(double tp, double tn, double rp, double rn, double beta) {
  const double z = beta * ((tp - rp) - (tn - rn));
  if (!std::isfinite(z)) throw NumericError("preference_prob: non-finite log-ratio");
  return std::exp(log_sigmoid(z));
}

double preference_prob(const ModelParams<float>& target, const ModelParams<float>& ref, const PairItem& pair,
                       double beta) {
  const auto t = pair_logprobs(target, std::span<const PairItem>(&pair, 1));
  const auto r = pair_logprobs(ref, std::span<const PairItem>(&pair, 1));
  return preference_prob_from(t[0], t[1], r[0], r[1], beta);
}

double dpo_loss(const ModelParams<float>& target, const ModelParams<float>& ref, const std::vector<PairItem>& batch,
                double beta) {
  if (batch.empty()) throw UsageError("dpo_loss: empty batch");
  const auto t = pair_logprobs(target, batch);
  const auto r = pair_logprobs(ref, batch);
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    s -= log_sigmoid(beta * ((t[2 * i] - r[2 * i]) - (t[2 * i + 1] - r[2 * i + 1])));
  }
  return s / static_cast<double>(batch.size());
}

template <typename T>
ad::Var<T> dpo_objective(const BoundParams<T>& p, std::span<const PairItem> items, std::span<const double> ref_lp,
                         double beta, ad::Var<T>* logprobs) {
  const int m = static_cast<int>(items.size());
  if (ref_lp.size() != 2 * items.size()) throw UsageError("dpo_objective: need two reference log-probs per pair");
  std::vector<ModelInput> in;
  std::vector<TokenSequence> tg;
  pair_inputs(items, in, tg);
  auto lp = sequence_logprobs(p, std::span<const ModelInput>(in), std::span<const TokenSequence>(tg));
  if (logprobs != nullptr) *logprobs = lp;
  std::vector<T> ref_margin(m);
  for (int i = 0; i < m; ++i) ref_margin[i] = static_cast<T>(-(ref_lp[2 * i] - ref_lp[2 * i + 1]));
  auto margin = ad::sub(ad::slice(lp, 0, 0, m), ad::slice(lp, 0, m, m));
  margin = ad::add(margin, lp.tape->constant({m}, ref_margin));
  return ad::scale(ad::sum(ad::log_sigmoid(ad::scale(margin, static_cast<T>(beta)))), T(-1));
}

template ad::Var<float> dpo_objective(const BoundParams<float>&, std::span<const PairItem>, std::span<const double>,
                                      double, ad::Var<float>*);
template ad::Var<double> dpo_objective(const BoundParams<double>&, std::span<const PairItem>, std::span<const double>,
                                       double, ad::Var<double>*);

ad::LossAndGrad dpo_loss_and_grad_f64(const ModelParams<double>& target, const std::vector<PairItem>& batch,
                                      const std::vector<double>& ref_lp, double beta, bool want_grad) {
  if (batch.empty()) throw UsageError("dpo_loss_and_grad: empty batch");
  ad::Tape<double> tape;
  const auto p = bind(tape, target, want_grad);
  auto loss = ad::scale(dpo_objective(p, std::span<const PairItem>(batch), std::span<const double>(ref_lp), beta),
                        1.0 / static_cast<double>(batch.size()));
  ad::LossAndGrad r;
  r.loss = loss.value()[0];
  if (!want_grad) return r;
  tape.backward(loss);
  for (const auto& v : p.vars) r.grads.push_back(tape.grad(v));
  return r;
}

LossAndGrads dpo_loss_and_grad(const ModelParams<float>& target, const std::vector<PairItem>& batch,
                               const std::vector<double>& ref_lp, double beta, int shards) {
  const std::size_t n = batch.size();
  if (n == 0) throw UsageError("dpo_loss_and_grad: empty batch");
  if (ref_lp.size() != 2 * n) throw UsageError("dpo_loss_and_grad: need two reference log-probs per pair");
  const std::size_t S = std::min<std::size_t>(std::max(shards, 1), n);
  struct Part {
    double loss = 0.0;
    std::vector<ad::Buffer<float>> grads;
    std::vector<double> lps;
  };
  std::vector<Part> parts(S);
  parallel_for(S, [&](std::size_t s) {
    const std::size_t lo = s * n / S, hi = (s + 1) * n / S;
    const int m = static_cast<int>(hi - lo);
    ad::Tape<float> tape;
    const auto p = bind(tape, target, true);
    ad::Var<float> lp;
    auto loss = dpo_objective(p, std::span<const PairItem>(batch).subspan(lo, hi - lo),
                              std::span<const double>(ref_lp).subspan(2 * lo, 2 * (hi - lo)), beta, &lp);
    tape.backward(loss);
    Part& out = parts[s];
    out.loss = loss.value()[0];
    const auto v = lp.value();
    for (int i = 0; i < m; ++i) {
      out.lps.push_back(v[i]);
      out.lps.push_back(v[m + i]);
    }
    for (const auto& var : p.vars) {
      const auto g = tape.grad_span(var);
      out.grads.emplace_back(g.begin(), g.end());
      if (out.grads.back().empty()) out.grads.back().assign(ad::numel(var.shape()), 0.0f);
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

DpoResult run_dpo(const ModelParams<float>& pretrained, const std::function<std::vector<PairItem>(std::int64_t)>& epoch_pairs,
                  const DpoConfig& config, const DpoHooks& hooks) {
  config.validate();
  tune_allocator();
  DpoResult res{pretrained, pretrained, {}};
  const std::uint64_t ref_hash = params_hash(res.reference);
  const Rng root(config.seed);
  std::int64_t epoch = -1;
  std::vector<PairItem> pairs;
  std::vector<std::size_t> order;
  std::size_t b = 0, per_epoch = 0;
  std::int64_t epoch_start = 0;
  double win_loss = 0.0, win_prob = 0.0;
  int win_n = 0;
  for (std::int64_t s = 0; s < config.total_steps; ++s) {
    if (epoch < 0 || s - epoch_start >= static_cast<std::int64_t>(per_epoch)) {
      ++epoch;
      epoch_start = s;
      pairs = epoch_pairs(epoch);
      if (pairs.empty()) throw UsageError("dpo: no preference pairs");
      b = std::min<std::size_t>(config.batch_size, pairs.size());
      per_epoch = pairs.size() / b;
      order.resize(pairs.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng er = root.split(static_cast<std::uint64_t>(epoch)).split(1);
      for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(er.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
      }
    }
    const std::size_t off = static_cast<std::size_t>(s - epoch_start) * b;
    std::vector<PairItem> batch;
    for (std::size_t i = off; i < off + b; ++i) batch.push_back(pairs[order[i]]);
    const auto ref_lp = pair_logprobs(res.reference, batch);
    LossAndGrads lg = dpo_loss_and_grad(res.target, batch, ref_lp, config.beta, config.shards);
    double gn = 0.0;
    for (const auto& g : lg.grads) {
      for (float x : g) gn += static_cast<double>(x) * x;
    }
    if (!std::isfinite(lg.loss) || !std::isfinite(gn)) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "non-finite DPO state at step %lld: loss=%g lr=%g grad_norm=%g",
                    static_cast<long long>(s), lg.loss, config.learning_rate, std::sqrt(gn));
      throw NumericError(buf);
    }
    double prob = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      prob += preference_prob_from(lg.logprobs[2 * i], lg.logprobs[2 * i + 1], ref_lp[2 * i], ref_lp[2 * i + 1],
                                   config.beta);
    }
    const float lr = static_cast<float>(config.learning_rate);
    for (std::size_t k = 0; k < res.target.tensors.size(); ++k) {
      auto& p = res.target.tensors[k].data;
      const auto& g = lg.grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
    }
    win_loss += lg.loss;
    win_prob += prob / static_cast<double>(batch.size());
    ++win_n;
    if ((s + 1) % config.log_every == 0 || s + 1 == config.total_steps) {
      const std::uint64_t h = params_hash(res.reference);
      if (h != ref_hash) throw InvariantError("dpo: reference parameters changed during training");
      DpoLogRow row{s + 1, win_loss / win_n, win_prob / win_n, h};
      win_loss = win_prob = 0.0;
      win_n = 0;
      res.log.push_back(row);
      if (hooks.log) hooks.log(row);
    }
  }
  return res;
}

}  // namespace

DpoResult dpo_finetune(const ModelParams<float>& pretrained, const Dataset& train, const DpoConfig& config,
                       const DpoHooks& hooks) {
  const Rng root(config.seed);
  auto source = [&](std::int64_t epoch) {
    const std::uint64_t pair_seed = root.split(static_cast<std::uint64_t>(epoch)).split(0).key();
    return pair_items(train, build_preference_dataset(train, pair_seed));
  };
  return run_dpo(pretrained, source, config, hooks);
}

DpoResult dpo_finetune_pairs(const ModelParams<float>& pretrained, const std::vector<PairItem>& pairs,
                             const DpoConfig& config, const DpoHooks& hooks) {
  if (pairs.empty()) throw UsageError("dpo: empty preference pair list");
  return run_dpo(pretrained, [&](std::int64_t) { return pairs; }, config, hooks);
}

std::string dpo_log_csv(const std::vector<DpoLogRow>& rows) {
  std::string s = "step,dpo_loss,mean_preference_prob,ref_hash\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.6f,%.6f,%016llx\n", static_cast<long long>(r.step), r.dpo_loss,
                  r.mean_preference_prob, static_cast<unsigned long long>(r.ref_hash));
    s += buf;
  }
  return s;
}

}  // namespace locgen
