// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "locgen/geometry.hpp"
#include "locgen/model.hpp"
#include "locgen/sampler.hpp"
#include "locgen/scene.hpp"

namespace locgen {

/// Minimal-cost one-to-one assignment for a rectangular N x M cost matrix.
/// Returns, for each row, the assigned column or -1 (rows beyond min(N, M)
/// stay unassigned). Equal-cost alternatives resolve toward lower indices.
std::vector<int> hungarian(const std::vector<std::vector<double>>& cost);

struct Assignment {
  int prediction = 0;
  int annotation = 0;
  double iou = 0.0;
};

struct MatchResult {
  std::vector<Assignment> assignments;
  std::vector<int> unmatched_predictions;
  std::vector<int> unmatched_annotations;
};

struct Counts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0, ignored = 0;

  Counts& operator+=(const Counts& o);
  friend bool operator==(const Counts&, const Counts&) = default;
};

struct RatesReport {
  int K = 0;
  int top_k = 0;
  double tpr = 0.0;
  double fpr = 0.0;
  Counts counts;
  std::int64_t positives = 0;
  std::int64_t negatives = 0;
  std::int64_t predictions = 0;
};

/// Matches predictions against all annotations (positives and negatives
/// together) with cost 1 - IoU.
MatchResult match_predictions(const std::vector<BBox>& preds, const AnnotationSet& anns);

inline constexpr double kIouThreshold = 0.7;

/// Assignments with IoU >= threshold count as TP (positive) or FP
/// (negative); weaker assignments are dissolved.
Counts classify(const MatchResult& match, const AnnotationSet& anns, double iou_threshold = kIouThreshold);

/// Throws InvariantError unless tp+fn = positives, fp+tn = negatives and
/// tp+fp+ignored = predictions.
void check_counts(const Counts& c, std::int64_t positives, std::int64_t negatives, std::int64_t predictions);

RatesReport make_report(const Counts& c, int K, int top_k, std::int64_t positives, std::int64_t negatives,
                        std::int64_t predictions);

/// Produces K boxes for sample `index` of a dataset.
using Predictor = std::function<std::vector<BBox>(std::size_t index, const Scene& scene, int class_id, int K)>;

/// Model draws for set i come from Rng(config.seed).split(i), so the first
/// K boxes of a larger draw equal a standalone draw of K.
Predictor model_predictor(const ModelParams<float>& params, const SamplerConfig& config);
Predictor random_predictor(int num_bins, const SamplerConfig& config);

/// Boxes for every AnnotationSet of `data`, computed in parallel.
std::vector<std::vector<BBox>> draw_predictions(const Predictor& predictor, const Dataset& data, int K);

/// Scores the first K boxes of each entry in `draws`.
RatesReport score_predictions(const std::vector<std::vector<BBox>>& draws, const Dataset& data, int K, int top_k,
                              double iou_threshold = kIouThreshold);

RatesReport evaluate(const Predictor& predictor, const Dataset& data, int K, int top_k,
                     double iou_threshold = kIouThreshold);

std::vector<RatesReport> curve_sweep(const Predictor& predictor, const Dataset& data, const std::vector<int>& Ks,
                                     int top_k, double iou_threshold = kIouThreshold);

/// Evaluates at fixed K for each top-k; `make` builds the predictor for one top-k.
std::vector<RatesReport> topk_sweep(const std::function<Predictor(int top_k)>& make, const Dataset& data,
                                    const std::vector<int>& top_ks, int K, double iou_threshold = kIouThreshold);

/// Columns K,tp,fp,fn,tn,ignored,tpr,fpr, optionally preceded by top_k.
std::string reports_csv(const std::vector<RatesReport>& reports, bool lead_top_k = false);

struct PlotSeries {
  std::string name;
  std::vector<RatesReport> points;
};

/// FPR on x, TPR on y, one polyline per series. Axis ranges fit the data.
std::string reports_svg(const std::vector<PlotSeries>& series, const std::string& title);

}  // namespace locgen
