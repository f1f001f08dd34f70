// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>

namespace locgen {

/// Axis-aligned box in pixel coordinates on a square image of side
/// `image_size`. The box covers [x1, x2) x [y1, y2).
struct BBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
  int image_size = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool degenerate() const { return !(x2 > x1 && y2 > y1); }
  bool is_canonical() const { return x1 <= x2 && y1 <= y2; }
  /// Canonical and inside [0, image_size] on both axes.
  bool valid() const;

  friend bool operator==(const BBox&, const BBox&) = default;
};

std::string to_string(const BBox& b);

/// Quantized box: four coordinate tokens [x1, y1, x2, y2], one bin per pixel.
struct TokenSequence {
  std::array<int, 4> tokens{};
  int num_bins = 0;

  bool in_range() const;
  bool is_canonical() const { return tokens[0] <= tokens[2] && tokens[1] <= tokens[3]; }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Intersection over union. Throws UsageError on mismatched image sizes or
/// invalid boxes.
double iou(const BBox& a, const BBox& b);

/// Matching cost shared by the evaluation harness: 1 - IoU.
inline double iou_cost(const BBox& a, const BBox& b) { return 1.0 - iou(a, b); }

/// Sorts corners so x1 <= x2 and y1 <= y2. Throws UsageError when a
/// coordinate falls outside [0, image_size].
BBox canonicalize(const BBox& b);

/// tokens[k] = clamp(floor(coord_k), 0, num_bins - 1) with num_bins = image_size.
TokenSequence quantize(const BBox& b);

/// Inverse map: bin index k is pixel coordinate k (left edge of the bin).
BBox dequantize(const TokenSequence& t);

}  // namespace locgen
