// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "locgen/error.hpp"

namespace locgen {

bool BBox::valid() const {
  if (image_size <= 0) return false;
  const double s = image_size;
  return is_canonical() && x1 >= 0.0 && y1 >= 0.0 && x2 <= s && y2 <= s;
}

std::string to_string(const BBox& b) {
  std::ostringstream os;
  os << "[" << b.x1 << "," << b.y1 << "," << b.x2 << "," << b.y2 << "]@" << b.image_size;
  return os.str();
}

bool TokenSequence::in_range() const {
  return num_bins > 0 &&
         std::all_of(tokens.begin(), tokens.end(), [&](int t) { return t >= 0 && t < num_bins; });
}

double iou(const BBox& a, const BBox& b) {
  if (a.image_size != b.image_size) {
    throw UsageError("iou: image_size mismatch (" + std::to_string(a.image_size) + " vs " +
                     std::to_string(b.image_size) + ")");
  }
  if (!a.valid() || !b.valid()) {
    throw UsageError("iou: invalid box " + to_string(a.valid() ? b : a));
  }
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  // Sum the areas in a fixed order so iou(a, b) == iou(b, a) bit for bit even
  // when the compiler contracts multiply-adds.
  const double area_a = a.area(), area_b = b.area();
  const double uni = (std::min(area_a, area_b) + std::max(area_a, area_b)) - inter;
  if (uni <= 0.0) {
    // Both boxes have zero area.
    return a == b ? 1.0 : 0.0;
  }
  return std::clamp(inter / uni, 0.0, 1.0);
}

BBox canonicalize(const BBox& b) {
  const double s = b.image_size;
  for (double c : {b.x1, b.y1, b.x2, b.y2}) {
    if (!(c >= 0.0 && c <= s)) {
      throw UsageError("canonicalize: coordinate out of image bounds in " + to_string(b));
    }
  }
  BBox out = b;
  if (out.x1 > out.x2) std::swap(out.x1, out.x2);
  if (out.y1 > out.y2) std::swap(out.y1, out.y2);
  return out;
}

TokenSequence quantize(const BBox& b) {
  if (!b.valid()) throw UsageError("quantize: box must be canonical and in bounds: " + to_string(b));
  TokenSequence t;
  t.num_bins = b.image_size;
  const std::array<double, 4> coords{b.x1, b.y1, b.x2, b.y2};
  for (int k = 0; k < 4; ++k) {
    const auto bin = static_cast<int>(std::floor(coords[k]));
    t.tokens[k] = std::clamp(bin, 0, t.num_bins - 1);
  }
  return t;
}

BBox dequantize(const TokenSequence& t) {
  if (!t.in_range()) throw UsageError("dequantize: token out of range");
  BBox b{static_cast<double>(t.tokens[0]), static_cast<double>(t.tokens[1]),
         static_cast<double>(t.tokens[2]), static_cast<double>(t.tokens[3]), t.num_bins};
  return canonicalize(b);
}

}  // namespace locgen
