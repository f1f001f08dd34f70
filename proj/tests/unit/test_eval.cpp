// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <limits>
#include <numeric>

#include "locgen/error.hpp"
#include "locgen/eval.hpp"
#include "support.hpp"

using namespace locgen;

namespace {

BBox box(double x1, double y1, double x2, double y2) { return {x1, y1, x2, y2, 64}; }

// Minimum total cost over all injective row->column maps (or column->row
// when there are more rows), by exhaustive enumeration.
double brute_force(const std::vector<std::vector<double>>& c) {
  const int n = static_cast<int>(c.size()), m = static_cast<int>(c[0].size());
  const bool flip = n > m;
  const int a = flip ? m : n, b = flip ? n : m;
  std::vector<int> cols(b);
  std::iota(cols.begin(), cols.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (int i = 0; i < a; ++i) s += flip ? c[cols[i]][i] : c[i][cols[i]];
    best = std::min(best, s);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

double assigned_cost(const std::vector<std::vector<double>>& c, const std::vector<int>& a) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] >= 0) s += c[i][a[i]];
  }
  return s;
}

void check_assignment_shape(const std::vector<int>& a, int n, int m) {
  REQUIRE(static_cast<int>(a.size()) == n);
  std::vector<char> used(m, 0);
  int assigned = 0;
  for (int j : a) {
    if (j < 0) continue;
    REQUIRE(j < m);
    REQUIRE(!used[j]);
    used[j] = 1;
    ++assigned;
  }
  CHECK(assigned == std::min(n, m));
}

AnnotationSet annotations(std::vector<std::pair<BBox, Label>> items) {
  AnnotationSet s;
  s.scene_id = "x";
  for (auto& [b, l] : items) s.annotations.push_back({b, l});
  return s;
}

}  // namespace

TEST_CASE("hungarian: hand-worked matrices") {
  CHECK(hungarian({{4, 1, 3}, {2, 0, 5}, {3, 2, 2}}) == std::vector<int>{1, 0, 2});
  CHECK(hungarian({{1, 2}, {2, 4}}) == std::vector<int>{1, 0});
  CHECK(hungarian({{0.9, 0.1}}) == std::vector<int>{1});
  CHECK(hungarian({{0.9}, {0.1}, {0.5}}) == std::vector<int>{-1, 0, -1});
  CHECK(hungarian({}).empty());
  CHECK(hungarian({{}, {}}) == std::vector<int>{-1, -1});
  CHECK_THROWS_AS(hungarian({{1, 2}, {3}}), UsageError);
  CHECK_THROWS_AS(hungarian({{1, std::numeric_limits<double>::infinity()}}), UsageError);
}

TEST_CASE("hungarian: ties resolve toward lower indices") {
  CHECK(hungarian({{0, 0}, {0, 0}}) == std::vector<int>{0, 1});
  CHECK(hungarian({{1, 1, 1}}) == std::vector<int>{0});
  CHECK(hungarian({{1}, {1}, {1}}) == std::vector<int>{0, -1, -1});
  const std::vector<int> a = hungarian({{0.5, 0.5, 0.5, 0.5, 0.5}, {0.5, 0.5, 0.5, 0.5, 0.5}, {0.5, 0.5, 0.5, 0.5, 0.5}});
  CHECK(a == std::vector<int>{0, 1, 2});
}

TEST_CASE("hungarian agrees with brute force on random matrices up to 7 x 7") {
  Rng rng(2024);
  for (int trial = 0; trial < 600; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 7)), m = static_cast<int>(rng.uniform_int(1, 7));
    std::vector<std::vector<double>> c(n, std::vector<double>(m));
    const bool coarse = trial % 3 == 0;  // many ties
    for (auto& r : c) {
      for (auto& v : r) v = coarse ? static_cast<double>(rng.uniform_int(0, 3)) / 3.0 : rng.uniform();
    }
    const auto a = hungarian(c);
    check_assignment_shape(a, n, m);
    CHECK(assigned_cost(c, a) == doctest::Approx(brute_force(c)).epsilon(1e-12));
  }
}

TEST_CASE("classify: hand trace with every outcome") {
  const AnnotationSet anns = annotations({{box(0, 0, 10, 10), Label::kPositive},
                                          {box(30, 30, 40, 40), Label::kPositive},
                                          {box(0, 30, 10, 40), Label::kNegative},
                                          {box(50, 50, 60, 60), Label::kNegative},
                                          {box(20, 0, 30, 10), Label::kNegative}});
  const std::vector<BBox> preds{box(0, 0, 10, 10), box(0, 30, 10, 40), box(50, 0, 60, 8)};
  const MatchResult m = match_predictions(preds, anns);
  CHECK(m.assignments.size() == 3);
  CHECK(m.unmatched_annotations.size() == 2);
  const Counts c = classify(m, anns);
  CHECK(c.tp == 1);
  CHECK(c.fp == 1);
  CHECK(c.fn == 1);
  CHECK(c.tn == 2);
  CHECK(c.ignored == 1);
  const RatesReport r = make_report(c, 3, 8, 2, 3, 3);
  CHECK(r.tpr == 0.5);
  CHECK(r.fpr == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("classify: threshold edge and empty cases") {
  const AnnotationSet one = annotations({{box(0, 0, 10, 10), Label::kPositive}});
  SUBCASE("iou 0.69 is dissolved, 0.7 counts") {
    Counts c = classify(match_predictions({box(0, 0, 10, 6.9)}, one), one);
    CHECK(c == Counts{0, 0, 1, 0, 1});
    c = classify(match_predictions({box(0, 0, 10, 7)}, one), one);
    CHECK(c == Counts{1, 0, 0, 0, 0});
  }
  SUBCASE("no predictions") {
    const Counts c = classify(match_predictions({}, one), one);
    CHECK(c == Counts{0, 0, 1, 0, 0});
  }
  SUBCASE("more predictions than annotations") {
    const Counts c = classify(match_predictions({box(0, 0, 10, 10), box(0, 0, 10, 10), box(1, 1, 9, 9)}, one), one);
    CHECK(c == Counts{1, 0, 0, 0, 2});
  }
  SUBCASE("no annotations") {
    const AnnotationSet none = annotations({});
    const Counts c = classify(match_predictions({box(0, 0, 1, 1)}, none), none);
    CHECK(c == Counts{0, 0, 0, 0, 1});
    const RatesReport r = make_report(c, 1, 1, 0, 0, 1);
    CHECK(r.tpr == 0.0);
    CHECK(r.fpr == 0.0);
  }
}

TEST_CASE("counting identities hold and violations throw") {
  Rng rng(6);
  const AnnotationSet anns = annotations({{box(0, 0, 10, 10), Label::kPositive},
                                          {box(12, 0, 20, 10), Label::kPositive},
                                          {box(0, 30, 10, 40), Label::kNegative},
                                          {box(40, 40, 50, 52), Label::kNegative}});
  for (int t = 0; t < 300; ++t) {
    std::vector<BBox> preds;
    const int K = static_cast<int>(rng.uniform_int(0, 8));
    for (int i = 0; i < K; ++i) {
      const auto& a = anns.annotations[rng.uniform_int(0, 3)].bbox;
      const double jitter = rng.uniform() * 3;
      preds.push_back(box(a.x1, a.y1, std::min(64.0, a.x2 + jitter), a.y2));
    }
    const MatchResult m = match_predictions(preds, anns);
    Counts prev{};
    for (double thr : {0.0, 0.3, 0.5, 0.7, 0.9, 1.0}) {
      const Counts c = classify(m, anns, thr);
      CHECK_NOTHROW(check_counts(c, 2, 2, K));
      if (thr > 0.0) CHECK(c.tp + c.fp <= prev.tp + prev.fp);
      prev = c;
    }
  }
  CHECK_THROWS_AS(check_counts(Counts{1, 0, 0, 0, 0}, 2, 0, 1), InvariantError);
  CHECK_THROWS_AS(check_counts(Counts{0, 1, 0, 0, 0}, 0, 2, 1), InvariantError);
  CHECK_THROWS_AS(check_counts(Counts{0, 0, 0, 0, 0}, 0, 0, 1), InvariantError);
  CHECK_THROWS_AS(make_report(Counts{2, 0, 0, 0, 0}, 1, 1, 1, 0, 2), InvariantError);
}

TEST_CASE("dataset evaluation: sweeps agree with standalone runs") {
  const DatasetPair d = testing::small_dataset(4, 12, 9);
  SamplerConfig sc;
  sc.seed = 3;
  const ModelParams<float> p = testing::randomized(init_params(ModelConfig{}), 0.05, 1);
  for (const Predictor& pred : {random_predictor(64, sc), model_predictor(p, sc)}) {
    const auto sweep = curve_sweep(pred, d.test, {1, 10, 30}, sc.top_k);
    REQUIRE(sweep.size() == 3);
    const RatesReport alone = evaluate(pred, d.test, 10, sc.top_k);
    CHECK(sweep[1].counts == alone.counts);
    CHECK(sweep[1].tpr == alone.tpr);
    CHECK(evaluate(pred, d.test, 10, sc.top_k).counts == alone.counts);
    for (const auto& r : sweep) {
      CHECK(r.predictions == static_cast<std::int64_t>(r.K * d.test.samples.size()));
      CHECK(r.counts.tp + r.counts.fn == r.positives);
    }
    // More draws never lose a match on the positives.
    CHECK(sweep[0].counts.tp <= sweep[2].counts.tp);
  }
}

TEST_CASE("topk_sweep evaluates each top-k with its own predictor") {
  const DatasetPair d = testing::small_dataset(4, 6, 2);
  const ModelParams<float> p = testing::randomized(init_params(ModelConfig{}), 0.05, 2);
  const auto reps = topk_sweep(
      [&](int k) {
        SamplerConfig sc;
        sc.top_k = k;
        return model_predictor(p, sc);
      },
      d.test, {1, 4}, 5);
  REQUIRE(reps.size() == 2);
  CHECK(reps[0].top_k == 1);
  CHECK(reps[1].top_k == 4);
  CHECK(reps[1].K == 5);
}

TEST_CASE("report serialization") {
  RatesReport a;
  a.K = 10;
  a.top_k = 8;
  a.counts = Counts{3, 1, 2, 9, 6};
  a.tpr = 0.6;
  a.fpr = 0.1;
  RatesReport b = a;
  b.K = 20;
  const std::string csv = reports_csv({a, b});
  CHECK(csv == "K,tp,fp,fn,tn,ignored,tpr,fpr\n10,3,1,2,9,6,0.600000,0.100000\n20,3,1,2,9,6,0.600000,0.100000\n");
  CHECK(reports_csv({a}, true) == "top_k,K,tp,fp,fn,tn,ignored,tpr,fpr\n8,10,3,1,2,9,6,0.600000,0.100000\n");
  const std::string svg = reports_svg({{"model", {a, b}}, {"random", {a}}}, "TPR vs FPR");
  CHECK(svg.starts_with("<svg"));
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(std::count(svg.begin(), svg.end(), '\n') > 5);
  std::size_t lines = 0;
  for (std::size_t pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) ++lines;
  CHECK(lines == 2);
  CHECK(svg.find("model") != std::string::npos);
}
