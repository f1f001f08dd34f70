// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "locgen/model.hpp"
#include "locgen/scene.hpp"

namespace locgen {

// ---------------------------------------------------------------------------
// NLL pretraining

struct TrainConfig {
  int batch_size = 32;
  int total_steps = 5000;
  double learning_rate = 1e-3;
  int warmup_steps = 200;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  int eval_every = 500;
  /// Held-out items scored at every log point.
  int heldout_size = 64;
  /// Each batch is split into this many fixed shards whose gradients are
  /// summed in order, so results do not depend on the thread count.
  int shards = 4;

  void validate() const;
};

/// One target location for one (scene, class) pair.
struct TrainItem {
  const Scene* scene = nullptr;
  int class_id = 0;
  TokenSequence target;
};

struct AdamState {
  std::vector<ad::Buffer<float>> m, v;
};

struct TrainLogRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  /// NaN when no held-out data was supplied.
  double heldout_loss = 0.0;
};

struct TrainState {
  ModelParams<float> params;
  AdamState opt;
  std::int64_t step = 0;
  std::vector<double> loss_history;
  std::vector<TrainLogRow> log;
};

TrainState make_train_state(ModelParams<float> params);

/// lr * min(1, step / warmup); `step` counts completed updates.
double learning_rate_at(std::int64_t step, const TrainConfig& config);

/// Mean over items of -log pi(target | scene, class). Value only.
double nll_loss(const ModelParams<float>& params, const std::vector<TrainItem>& items);

struct LossAndGrads {
  double loss = 0.0;
  std::vector<ad::Buffer<float>> grads;
  /// Target log-probabilities seen in the forward pass, in item order
  /// (for preference batches: preferred then rejected per item).
  std::vector<double> logprobs;
};

/// Batch-mean NLL and its gradient, computed over `shards` fixed shards.
LossAndGrads nll_loss_and_grad(const ModelParams<float>& params, const std::vector<TrainItem>& items, int shards);

/// Summed negative log-likelihood of `items` on an existing tape. The
/// per-item log-probabilities are returned through `logprobs` when given.
template <typename T>
ad::Var<T> nll_objective(const BoundParams<T>& p, const std::vector<TrainItem>& items,
                         ad::Var<T>* logprobs = nullptr);

/// Mean NLL and its gradient in 64-bit arithmetic, for gradient checks.
ad::LossAndGrad nll_loss_and_grad_f64(const ModelParams<double>& params, const std::vector<TrainItem>& items,
                                      bool want_grad);

/// One forward/backward/Adam update. Throws NumericError on a non-finite
/// loss or gradient, naming the step, learning rate and gradient norm.
double train_step(TrainState& state, const std::vector<TrainItem>& batch, const TrainConfig& config);

struct TrainHooks {
  /// Called with the step count after every eval_every updates and at the end.
  std::function<void(std::int64_t step, const ModelParams<float>&)> checkpoint;
  std::function<void(const TrainLogRow&)> log;
};

/// Items for a held-out score: the first positive of each of the first
/// `limit` samples.
std::vector<TrainItem> heldout_items(const Dataset& data, int limit);

/// Each epoch shuffles the AnnotationSets and draws one positive per set;
/// batches never hold two items from the same set.
TrainState pretrain(const Dataset& train, const Dataset* heldout, const ModelConfig& model_config,
                    const TrainConfig& config, const TrainHooks& hooks = {});

/// Continues from existing parameters (used by tests and the CLI alike).
TrainState pretrain_from(ModelParams<float> init, const Dataset& train, const Dataset* heldout,
                         const TrainConfig& config, const TrainHooks& hooks = {});

std::string train_log_csv(const std::vector<TrainLogRow>& rows);

// ---------------------------------------------------------------------------
// Direct preference optimization

struct DpoConfig {
  double beta = 0.1;
  double learning_rate = 1e-3;
  int total_steps = 200;
  int batch_size = 32;
  std::uint64_t seed = 0;
  int log_every = 50;
  int shards = 4;

  void validate() const;
};

struct PairItem {
  const Scene* scene = nullptr;
  int class_id = 0;
  TokenSequence preferred;
  TokenSequence rejected;
};

std::vector<PairItem> pair_items(const Dataset& data, const std::vector<PreferencePair>& pairs);

/// sigma(beta * (r(Y+) - r(Y-))) with r = log pi_theta - log pi_ref.
double preference_prob(const ModelParams<float>& target, const ModelParams<float>& ref, const PairItem& pair,
                       double beta);
/// Same quantity from precomputed log-probabilities.
double preference_prob_from(double target_pos, double target_neg, double ref_pos, double ref_neg, double beta);

/// Mean of -log sigma(beta * (r(Y+) - r(Y-))). Value only.
double dpo_loss(const ModelParams<float>& target, const ModelParams<float>& ref, const std::vector<PairItem>& batch,
                double beta);

/// Loss and gradient with respect to the target; reference log-probabilities
/// are supplied as constants (two per item: preferred, rejected).
LossAndGrads dpo_loss_and_grad(const ModelParams<float>& target, const std::vector<PairItem>& batch,
                               const std::vector<double>& ref_logprobs, double beta, int shards);

/// Summed DPO loss of `items` on an existing tape. `ref_logprobs` holds the
/// frozen reference log-probabilities interleaved as (preferred, rejected).
/// Target log-probabilities come back through `logprobs` as all preferred
/// items followed by all rejected items.
template <typename T>
ad::Var<T> dpo_objective(const BoundParams<T>& p, std::span<const PairItem> items,
                         std::span<const double> ref_logprobs, double beta, ad::Var<T>* logprobs = nullptr);

/// Mean DPO loss and its gradient in 64-bit arithmetic, for gradient checks.
ad::LossAndGrad dpo_loss_and_grad_f64(const ModelParams<double>& target, const std::vector<PairItem>& batch,
                                      const std::vector<double>& ref_logprobs, double beta, bool want_grad);

struct DpoLogRow {
  std::int64_t step = 0;
  double dpo_loss = 0.0;
  double mean_preference_prob = 0.0;
  std::uint64_t ref_hash = 0;
};

struct DpoHooks {
  std::function<void(const DpoLogRow&)> log;
};

struct DpoResult {
  ModelParams<float> target;
  ModelParams<float> reference;
  std::vector<DpoLogRow> log;
};

/// Plain SGD on the target; the reference is a frozen copy of `pretrained`.
/// Pairs are redrawn every epoch with build_preference_dataset.
DpoResult dpo_finetune(const ModelParams<float>& pretrained, const Dataset& train, const DpoConfig& config,
                       const DpoHooks& hooks = {});

/// Fixed pair list (no re-pairing). Throws UsageError when empty.
DpoResult dpo_finetune_pairs(const ModelParams<float>& pretrained, const std::vector<PairItem>& pairs,
                             const DpoConfig& config, const DpoHooks& hooks = {});

std::string dpo_log_csv(const std::vector<DpoLogRow>& rows);

/// Returns glibc's freed memory to the heap instead of the OS, which keeps
/// large tape buffers from page-faulting on every step. No-op elsewhere.
void tune_allocator();

}  // namespace locgen
