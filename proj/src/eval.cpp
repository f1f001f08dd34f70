// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "locgen/error.hpp"
#include "locgen/parallel.hpp"

namespace locgen {

std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const int rows = static_cast<int>(cost.size());
  if (rows == 0) return {};
  const int cols = static_cast<int>(cost[0].size());
  for (const auto& r : cost) {
    if (static_cast<int>(r.size()) != cols) throw UsageError("hungarian: ragged cost matrix");
    for (double c : r) {
      if (!std::isfinite(c)) throw UsageError("hungarian: non-finite cost");
    }
  }
  if (cols == 0) return std::vector<int>(rows, -1);
  const bool flip = rows > cols;
  const int n = flip ? cols : rows;
  const int m = flip ? rows : cols;
  auto a = [&](int i, int j) { return flip ? cost[j - 1][i - 1] : cost[i - 1][j - 1]; };

  // Shortest augmenting paths with potentials; O(n^2 m).
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(rows, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    if (flip) {
      out[j - 1] = p[j] - 1;
    } else {
      out[p[j] - 1] = j - 1;
    }
  }
  return out;
}

Counts& Counts::operator+=(const Counts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  ignored += o.ignored;
  return *this;
}

MatchResult match_predictions(const std::vector<BBox>& preds, const AnnotationSet& anns) {
  MatchResult r;
  const int n = static_cast<int>(preds.size());
  const int m = static_cast<int>(anns.annotations.size());
  std::vector<std::vector<double>> iou_m(n, std::vector<double>(m));
  std::vector<std::vector<double>> cost(n, std::vector<double>(m));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      iou_m[i][j] = iou(preds[i], anns.annotations[j].bbox);
      cost[i][j] = 1.0 - iou_m[i][j];
    }
  }
  const auto assign = n > 0 && m > 0 ? hungarian(cost) : std::vector<int>(n, -1);
  std::vector<char> ann_used(m, 0);
  for (int i = 0; i < n; ++i) {
    if (assign[i] < 0) {
      r.unmatched_predictions.push_back(i);
    } else {
      r.assignments.push_back({i, assign[i], iou_m[i][assign[i]]});
      ann_used[assign[i]] = 1;
    }
  }
  for (int j = 0; j < m; ++j) {
    if (!ann_used[j]) r.unmatched_annotations.push_back(j);
  }
  return r;
}

Counts classify(const MatchResult& match, const AnnotationSet& anns, double thr) {
  Counts c;
  const int m = static_cast<int>(anns.annotations.size());
  std::vector<char> hit(m, 0);
  for (const auto& a : match.assignments) {
    if (a.iou >= thr) {
      hit[a.annotation] = 1;
      if (anns.annotations[a.annotation].label == Label::kPositive) {
        ++c.tp;
      } else {
        ++c.fp;
      }
    } else {
      ++c.ignored;
    }
  }
  c.ignored += static_cast<std::int64_t>(match.unmatched_predictions.size());
  for (int j = 0; j < m; ++j) {
    if (hit[j]) continue;
    if (anns.annotations[j].label == Label::kPositive) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

void check_counts(const Counts& c, std::int64_t positives, std::int64_t negatives, std::int64_t predictions) {
  auto fail = [&](const std::string& what) {
    throw InvariantError("counting identity violated: " + what + " (tp=" + std::to_string(c.tp) +
                         " fp=" + std::to_string(c.fp) + " fn=" + std::to_string(c.fn) + " tn=" + std::to_string(c.tn) +
                         " ignored=" + std::to_string(c.ignored) + ")");
  };
  if (c.tp < 0 || c.fp < 0 || c.fn < 0 || c.tn < 0 || c.ignored < 0) fail("negative count");
  if (c.tp + c.fn != positives) fail("tp + fn != #positives (" + std::to_string(positives) + ")");
  if (c.fp + c.tn != negatives) fail("fp + tn != #negatives (" + std::to_string(negatives) + ")");
  if (c.tp + c.fp + c.ignored != predictions) fail("tp + fp + ignored != #predictions (" + std::to_string(predictions) + ")");
}

RatesReport make_report(const Counts& c, int K, int top_k, std::int64_t positives, std::int64_t negatives,
                        std::int64_t predictions) {
  check_counts(c, positives, negatives, predictions);
  RatesReport r;
  r.K = K;
  r.top_k = top_k;
  r.counts = c;
  r.positives = positives;
  r.negatives = negatives;
  r.predictions = predictions;
  r.tpr = c.tp + c.fn > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  r.fpr = c.fp + c.tn > 0 ? static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn) : 0.0;
  return r;
}

Predictor model_predictor(const ModelParams<float>& params, const SamplerConfig& config) {
  config.validate(params.config.vocab_size());
  return [&params, config](std::size_t index, const Scene& scene, int class_id, int K) {
    const Rng root = Rng(config.seed).split(index);
    const auto draws = sample_k_locations(params, scene, class_id, config, K, root);
    std::vector<BBox> out;
    out.reserve(draws.size());
    for (const auto& d : draws) out.push_back(d.bbox);
    return out;
  };
}

Predictor random_predictor(int num_bins, const SamplerConfig& config) {
  return [num_bins, config](std::size_t index, const Scene&, int, int K) {
    const Rng root = Rng(config.seed).split(index);
    std::vector<BBox> out;
    out.reserve(K);
    for (int i = 0; i < K; ++i) {
      Rng r = root.split(static_cast<std::uint64_t>(i));
      out.push_back(random_valid_box(num_bins, config.min_box_bins, r));
    }
    return out;
  };
}

std::vector<std::vector<BBox>> draw_predictions(const Predictor& predictor, const Dataset& data, int K) {
  if (K < 1) throw UsageError("K must be >= 1");
  std::vector<std::vector<BBox>> out(data.samples.size());
  parallel_for(data.samples.size(), [&](std::size_t i) {
    const AnnotationSet& s = data.samples[i];
    out[i] = predictor(i, data.scene_of(s), s.class_id, K);
  });
  return out;
}

RatesReport score_predictions(const std::vector<std::vector<BBox>>& draws, const Dataset& data, int K, int top_k,
                              double thr) {
  if (draws.size() != data.samples.size()) throw UsageError("score_predictions: one draw list per sample required");
  std::vector<Counts> per(data.samples.size());
  std::int64_t pos = 0, neg = 0, preds = 0;
  for (std::size_t i = 0; i < draws.size(); ++i) {
    if (static_cast<int>(draws[i].size()) < K) throw UsageError("score_predictions: fewer than K draws");
    pos += static_cast<std::int64_t>(data.samples[i].num_positives());
    neg += static_cast<std::int64_t>(data.samples[i].num_negatives());
    preds += K;
  }
  parallel_for(draws.size(), [&](std::size_t i) {
    const std::vector<BBox> first(draws[i].begin(), draws[i].begin() + K);
    const AnnotationSet& s = data.samples[i];
    per[i] = classify(match_predictions(first, s), s, thr);
    check_counts(per[i], static_cast<std::int64_t>(s.num_positives()), static_cast<std::int64_t>(s.num_negatives()), K);
  });
  Counts total;
  for (const auto& c : per) total += c;
  return make_report(total, K, top_k, pos, neg, preds);
}

RatesReport evaluate(const Predictor& predictor, const Dataset& data, int K, int top_k, double thr) {
  return score_predictions(draw_predictions(predictor, data, K), data, K, top_k, thr);
}

std::vector<RatesReport> curve_sweep(const Predictor& predictor, const Dataset& data, const std::vector<int>& Ks,
                                     int top_k, double thr) {
  if (Ks.empty()) return {};
  const int kmax = *std::max_element(Ks.begin(), Ks.end());
  const auto draws = draw_predictions(predictor, data, kmax);
  std::vector<RatesReport> out;
  for (int K : Ks) out.push_back(score_predictions(draws, data, K, top_k, thr));
  return out;
}

std::vector<RatesReport> topk_sweep(const std::function<Predictor(int)>& make, const Dataset& data,
                                    const std::vector<int>& top_ks, int K, double thr) {
  std::vector<RatesReport> out;
  for (int k : top_ks) out.push_back(evaluate(make(k), data, K, k, thr));
  return out;
}

std::string reports_csv(const std::vector<RatesReport>& reports, bool lead_top_k) {
  std::string s = lead_top_k ? "top_k," : "";
  s += "K,tp,fp,fn,tn,ignored,tpr,fpr\n";
  char buf[256];
  for (const auto& r : reports) {
    if (lead_top_k) s += std::to_string(r.top_k) + ",";
    std::snprintf(buf, sizeof buf, "%d,%lld,%lld,%lld,%lld,%lld,%.6f,%.6f\n", r.K, static_cast<long long>(r.counts.tp),
                  static_cast<long long>(r.counts.fp), static_cast<long long>(r.counts.fn),
                  static_cast<long long>(r.counts.tn), static_cast<long long>(r.counts.ignored), r.tpr, r.fpr);
    s += buf;
  }
  return s;
}

std::string reports_svg(const std::vector<PlotSeries>& series, const std::string& title) {
  const double W = 520, H = 400, left = 70, right = 150, top = 40, bottom = 60;
  double xmax = 0, ymax = 0;
  for (const auto& s : series) {
    for (const auto& r : s.points) {
      xmax = std::max(xmax, r.fpr);
      ymax = std::max(ymax, r.tpr);
    }
  }
  auto nice = [](double v) {
    if (v <= 0) return 0.01;
    const double e = std::pow(10.0, std::floor(std::log10(v)));
    for (double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
      if (m * e >= v * 1.05) return m * e;
    }
    return 10 * e;
  };
  xmax = nice(xmax);
  ymax = nice(ymax);
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double x) { return left + pw * x / xmax; };
  auto py = [&](double y) { return top + ph * (1.0 - y / ymax); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  char buf[512];
  std::string out;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                W, H, W, H);
  out += buf;
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"24\" font-size=\"14\" text-anchor=\"middle\">%s</text>\n",
                left + pw / 2, title.c_str());
  out += buf;
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n"
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                left, top + ph, left + pw, top + ph, left, top, left, top + ph);
  out += buf;
  for (int t = 0; t <= 5; ++t) {
    const double fx = xmax * t / 5, fy = ymax * t / 5;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"10\" text-anchor=\"middle\">%.4g</text>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"10\" text-anchor=\"end\">%.4g</text>\n",
                  px(fx), top + ph + 14, fx, left - 4, py(fy) + 3, fy);
    out += buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\">FPR</text>\n"
                "<text x=\"16\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 %.1f)\">TPR</text>\n",
                left + pw / 2, H - 20, top + ph / 2, top + ph / 2);
  out += buf;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* c = colors[s % 6];
    std::string pts;
    for (const auto& r : series[s].points) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(r.fpr), py(r.tpr));
      pts += buf;
    }
    if (!pts.empty()) pts.pop_back();
    out += "<polyline fill=\"none\" stroke=\"" + std::string(c) + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    for (const auto& r : series[s].points) {
      std::snprintf(buf, sizeof buf,
                    "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"2.5\" fill=\"%s\" data-fpr=\"%.6f\" data-tpr=\"%.6f\"/>\n",
                    px(r.fpr), py(r.tpr), c, r.fpr, r.tpr);
      out += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"12\" height=\"3\" fill=\"%s\"/>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\">%s</text>\n",
                  left + pw + 12, top + 10 + 18.0 * s, c, left + pw + 28, top + 14 + 18.0 * s,
                  series[s].name.c_str());
    out += buf;
  }
  out += "</svg>\n";
  return out;
}

}  // namespace locgen
