// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "locgen/error.hpp"
#include "locgen/parallel.hpp"
#include "locgen/rng.hpp"

namespace locgen {

std::vector<ClassSpec> default_classes() {
  return {
      {"person", 0.015, 0.05, 0.30, 0.60},
      {"car", 0.02, 0.06, 1.60, 3.00},
      {"chair", 0.01, 0.04, 0.75, 1.34},
      {"plant", 0.04, 0.10, 0.30, 0.55},
  };
}

std::vector<std::pair<int, int>> admissible_sizes(const ClassSpec& spec, int image_size) {
  std::vector<std::pair<int, int>> sizes;
  const double image_area = static_cast<double>(image_size) * image_size;
  for (int h = 1; h <= image_size; ++h) {
    for (int w = 1; w <= image_size; ++w) {
      const double frac = w * h / image_area;
      const double aspect = static_cast<double>(w) / h;
      if (frac >= spec.min_area_frac && frac <= spec.max_area_frac && aspect >= spec.min_aspect &&
          aspect <= spec.max_aspect) {
        sizes.emplace_back(w, h);
      }
    }
  }
  return sizes;
}

// ---------------------------------------------------------------------------
// Scene

Scene::Scene(std::string scene_id, int image_size, int num_classes, std::uint64_t seed)
    : scene_id_(std::move(scene_id)),
      image_size_(image_size),
      num_classes_(num_classes),
      seed_(seed),
      grid_(static_cast<std::size_t>(num_classes + 2) * image_size * image_size, 0) {}

bool Scene::occupied(int y, int x) const {
  for (int c = 0; c < num_classes_; ++c) {
    if (at(c, y, x)) return true;
  }
  return false;
}

void Scene::refresh_free_channel() {
  for (int y = 0; y < image_size_; ++y) {
    for (int x = 0; x < image_size_; ++x) {
      const bool blocked = occupied(y, x) || at(support_channel(), y, x);
      set(free_channel(), y, x, blocked ? 0 : 1);
    }
  }
}

std::string Scene::check_invariants() const {
  if (image_size_ <= 0) return "non-positive image_size";
  if (grid_.size() != static_cast<std::size_t>(num_channels()) * image_size_ * image_size_) {
    return "grid size does not match channels x H x W";
  }
  for (auto v : grid_) {
    if (v > 1) return "grid value outside {0,1}";
  }
  for (int y = 0; y < image_size_; ++y) {
    for (int x = 0; x < image_size_; ++x) {
      const bool blocked = occupied(y, x) || at(support_channel(), y, x);
      if (at(free_channel(), y, x) != (blocked ? 0 : 1)) {
        return "free channel is not the complement of occupancy and support at (" +
               std::to_string(y) + "," + std::to_string(x) + ")";
      }
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// AnnotationSet / Dataset

std::vector<BBox> AnnotationSet::positives() const {
  std::vector<BBox> out;
  for (const auto& a : annotations) {
    if (a.label == Label::kPositive) out.push_back(a.bbox);
  }
  return out;
}

std::vector<BBox> AnnotationSet::negatives() const {
  std::vector<BBox> out;
  for (const auto& a : annotations) {
    if (a.label == Label::kNegative) out.push_back(a.bbox);
  }
  return out;
}

std::size_t AnnotationSet::num_positives() const {
  return std::count_if(annotations.begin(), annotations.end(),
                       [](const Annotation& a) { return a.label == Label::kPositive; });
}

std::size_t AnnotationSet::num_negatives() const { return annotations.size() - num_positives(); }

void Dataset::reindex() {
  index_.clear();
  index_.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) index_.emplace_back(scenes[i].scene_id(), i);
  std::sort(index_.begin(), index_.end());
  for (std::size_t i = 1; i < index_.size(); ++i) {
    if (index_[i].first == index_[i - 1].first) {
      throw InvariantError("duplicate scene_id " + index_[i].first);
    }
  }
}

std::size_t Dataset::scene_index(const std::string& scene_id) const {
  if (index_.size() == scenes.size()) {
    auto it = std::lower_bound(index_.begin(), index_.end(), std::make_pair(scene_id, std::size_t{0}));
    if (it != index_.end() && it->first == scene_id) return it->second;
  } else {
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      if (scenes[i].scene_id() == scene_id) return i;
    }
  }
  throw InvariantError("unknown scene_id " + scene_id);
}

// ---------------------------------------------------------------------------
// Generation

namespace {

struct Surface {
  int row = 0;
  int x_begin = 0;
  int x_end = 0;  // exclusive
};

void validate(const SceneConfig& c) {
  if (c.image_size < 16) throw UsageError("scene config: image_size must be >= 16");
  if (c.classes.empty()) throw UsageError("scene config: at least one class required");
  if (c.min_surfaces < 1 || c.max_surfaces < c.min_surfaces) {
    throw UsageError("scene config: need 1 <= min_surfaces <= max_surfaces");
  }
  if (c.min_objects < 0 || c.max_objects < c.min_objects) {
    throw UsageError("scene config: need 0 <= min_objects <= max_objects");
  }
  if (c.surface_thickness < 1) throw UsageError("scene config: surface_thickness must be >= 1");
  if (c.max_retries < 1) throw UsageError("scene config: max_retries must be >= 1");
}

bool region_occupied(const Scene& s, int x1, int y1, int x2, int y2) {
  for (int y = y1; y < y2; ++y) {
    for (int x = x1; x < x2; ++x) {
      if (s.occupied(y, x)) return true;
    }
  }
  return false;
}

bool is_integral(double v) { return std::floor(v) == v; }

}  // namespace

Scene generate_scene(const SceneConfig& config, std::uint64_t seed, std::string scene_id) {
  validate(config);
  const int size = config.image_size;
  const int thick = config.surface_thickness;
  std::vector<std::vector<std::pair<int, int>>> sizes;
  for (const auto& spec : config.classes) sizes.push_back(admissible_sizes(spec, size));

  const Rng root(seed);
  for (int attempt = 0; attempt < config.max_retries; ++attempt) {
    Rng rng = root.split(static_cast<std::uint64_t>(attempt));
    Scene scene(scene_id, size, config.num_classes(), seed);

    // Floor first, then shelves spaced vertically above it.
    std::vector<Surface> surfaces;
    const int floor_row = size - thick - static_cast<int>(rng.uniform_int(0, size / 10));
    surfaces.push_back({floor_row, static_cast<int>(rng.uniform_int(1, 4)),
                        size - 1 - static_cast<int>(rng.uniform_int(0, 3))});
    const int n_surfaces = static_cast<int>(rng.uniform_int(config.min_surfaces, config.max_surfaces));
    const int shelf_lo = size / 4;
    const int shelf_hi = floor_row - 14;
    for (int tries = 0; static_cast<int>(surfaces.size()) < n_surfaces && tries < 64; ++tries) {
      if (shelf_hi < shelf_lo) break;
      const int row = static_cast<int>(rng.uniform_int(shelf_lo, shelf_hi));
      const int len = static_cast<int>(rng.uniform_int(size / 3, 2 * size / 3));
      const int xb = static_cast<int>(rng.uniform_int(1, size - 1 - len));
      const bool clear = std::all_of(surfaces.begin(), surfaces.end(),
                                     [&](const Surface& s) { return std::abs(s.row - row) >= 12; });
      if (clear) surfaces.push_back({row, xb, xb + len});
    }
    if (static_cast<int>(surfaces.size()) < n_surfaces) continue;
    for (const auto& s : surfaces) {
      for (int y = s.row; y < std::min(size, s.row + thick); ++y) {
        for (int x = s.x_begin; x < s.x_end; ++x) scene.set(scene.support_channel(), y, x, 1);
      }
    }

    // Existing objects resting on surfaces, pairwise disjoint.
    const int n_objects = static_cast<int>(rng.uniform_int(config.min_objects, config.max_objects));
    bool placed_all = true;
    for (int o = 0; o < n_objects && placed_all; ++o) {
      const int cls = static_cast<int>(rng.uniform_int(0, config.num_classes() - 1));
      bool placed = false;
      for (int tries = 0; tries < config.max_retries && !placed; ++tries) {
        if (sizes[cls].empty()) break;
        const auto& surf = surfaces[rng.uniform_int(0, static_cast<std::int64_t>(surfaces.size()) - 1)];
        const auto [w, h] = sizes[cls][rng.uniform_int(0, static_cast<std::int64_t>(sizes[cls].size()) - 1)];
        if (w > surf.x_end - surf.x_begin || h > surf.row) continue;
        const int x1 = static_cast<int>(rng.uniform_int(surf.x_begin, surf.x_end - w));
        const int y1 = surf.row - h;
        if (region_occupied(scene, x1, y1, x1 + w, surf.row)) continue;
        for (int y = y1; y < surf.row; ++y) {
          for (int x = x1; x < x1 + w; ++x) scene.set(cls, y, x, 1);
        }
        placed = true;
      }
      placed_all = placed;
    }
    if (!placed_all) continue;
    scene.refresh_free_channel();
    return scene;
  }
  throw UsageError("generate_scene: infeasible config, no valid scene after " +
                   std::to_string(config.max_retries) + " attempts");
}

bool plausibility(const Scene& scene, const SceneConfig& config, int class_id, const BBox& b) {
  if (class_id < 0 || class_id >= config.num_classes() || class_id >= scene.num_classes()) {
    throw UsageError("plausibility: unknown class " + std::to_string(class_id));
  }
  if (b.image_size != scene.image_size() || !b.valid()) {
    throw UsageError("plausibility: box not canonical on the scene: " + to_string(b));
  }
  if (!is_integral(b.x1) || !is_integral(b.y1) || !is_integral(b.x2) || !is_integral(b.y2)) return false;
  if (b.degenerate()) return false;
  const int x1 = static_cast<int>(b.x1), y1 = static_cast<int>(b.y1);
  const int x2 = static_cast<int>(b.x2), y2 = static_cast<int>(b.y2);
  const int size = scene.image_size();
  const int sup = scene.support_channel();

  // R1: the row just below the box is the top row of a support surface.
  if (y2 >= size) return false;
  for (int x = x1; x < x2; ++x) {
    if (!scene.at(sup, y2, x)) return false;
    if (y2 > 0 && scene.at(sup, y2 - 1, x)) return false;
  }
  // R2
  if (region_occupied(scene, x1, y1, x2, y2)) return false;
  // R3, R4
  const ClassSpec& spec = config.classes[class_id];
  const double frac = b.area() / (static_cast<double>(size) * size);
  if (frac < spec.min_area_frac || frac > spec.max_area_frac) return false;
  const double aspect = b.width() / b.height();
  return aspect >= spec.min_aspect && aspect <= spec.max_aspect;
}

AnnotationSet sample_annotations(const Scene& scene, const SceneConfig& config, int class_id,
                                 const AnnotationConfig& ann, std::uint64_t seed) {
  if (class_id < 0 || class_id >= config.num_classes()) {
    throw UsageError("sample_annotations: unknown class " + std::to_string(class_id));
  }
  const int size = scene.image_size();
  const int sup = scene.support_channel();
  const auto sizes = admissible_sizes(config.classes[class_id], size);

  // Support top rows and their horizontal extents, recovered from the grid.
  struct Span {
    int row, x_begin, x_end;
  };
  std::vector<Span> spans;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size;) {
      const bool top = scene.at(sup, y, x) && (y == 0 || !scene.at(sup, y - 1, x));
      if (!top) {
        ++x;
        continue;
      }
      int end = x;
      while (end < size && scene.at(sup, y, end) && (y == 0 || !scene.at(sup, y - 1, end))) ++end;
      spans.push_back({y, x, end});
      x = end;
    }
  }

  AnnotationSet out;
  out.scene_id = scene.scene_id();
  out.class_id = class_id;
  Rng rng(seed);
  int n_pos = 0, n_neg = 0;
  for (int c = 0; c < ann.candidate_budget; ++c) {
    int w, h;
    if (sizes.empty() || rng.uniform() < ann.size_jitter) {
      const auto [bw, bh] = sizes.empty() ? std::pair{size / 8, size / 8}
                                          : sizes[rng.uniform_int(0, static_cast<std::int64_t>(sizes.size()) - 1)];
      w = std::max(1, bw + static_cast<int>(rng.uniform_int(-4, 4)));
      h = std::max(1, bh + static_cast<int>(rng.uniform_int(-4, 4)));
    } else {
      std::tie(w, h) = sizes[rng.uniform_int(0, static_cast<std::int64_t>(sizes.size()) - 1)];
    }
    // Coordinates stay <= size - 1 so every box survives quantization exactly.
    if (w > size - 2 || h > size - 2) continue;
    int x1, y1;
    if (!spans.empty() && rng.uniform() < ann.surface_fraction) {
      const Span& s = spans[rng.uniform_int(0, static_cast<std::int64_t>(spans.size()) - 1)];
      const int lo = std::max(0, s.x_begin - w / 2);
      const int hi = std::min(size - 1 - w, s.x_end - w / 2);
      if (hi < lo || s.row - h < 0) continue;
      x1 = static_cast<int>(rng.uniform_int(lo, hi));
      y1 = s.row - h;
    } else {
      x1 = static_cast<int>(rng.uniform_int(0, size - 1 - w));
      y1 = static_cast<int>(rng.uniform_int(0, size - 1 - h));
    }
    const BBox box{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x1 + w),
                   static_cast<double>(y1 + h), size};
    const bool dup = std::any_of(out.annotations.begin(), out.annotations.end(),
                                 [&](const Annotation& a) { return a.bbox == box; });
    if (dup) continue;
    if (plausibility(scene, config, class_id, box)) {
      if (n_pos < ann.max_pos) {
        out.annotations.push_back({box, Label::kPositive});
        ++n_pos;
      }
    } else if (n_neg < ann.max_neg) {
      out.annotations.push_back({box, Label::kNegative});
      ++n_neg;
    }
  }
  out.no_positives = n_pos == 0;
  return out;
}

std::int64_t anchor_lattice_size(int image_size, int stride) {
  if (stride <= 0) throw UsageError("anchor stride must be positive");
  const std::int64_t n = image_size / stride + 1;
  return n * n * n * n;
}

namespace {

std::string make_scene_id(Split split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05d", split == Split::kTrain ? "tr" : "te", index);
  return buf;
}

Dataset build_split(const DatasetConfig& config, std::uint64_t seed, Split split, int count, int offset) {
  Dataset d;
  d.split = split;
  d.scenes.resize(count);
  std::vector<std::vector<AnnotationSet>> per_scene(count);
  parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
    const auto global = static_cast<std::uint64_t>(offset) + i;
    const std::uint64_t scene_seed = mix64(mix64(seed) + global);
    d.scenes[i] = generate_scene(config.scene, scene_seed, make_scene_id(split, static_cast<int>(i)));
    for (int c = 0; c < config.scene.num_classes(); ++c) {
      AnnotationSet s = sample_annotations(d.scenes[i], config.scene, c, config.annotation,
                                           mix64(scene_seed ^ mix64(0xA000 + c)));
      if (!s.no_positives) per_scene[i].push_back(std::move(s));
    }
  });
  for (auto& v : per_scene) {
    for (auto& s : v) d.samples.push_back(std::move(s));
  }
  d.reindex();
  return d;
}

}  // namespace

DatasetPair build_dataset(const DatasetConfig& config, std::uint64_t seed) {
  if (config.num_train < 0 || config.num_test < 0) throw UsageError("dataset sizes must be >= 0");
  DatasetPair out;
  out.train = build_split(config, seed, Split::kTrain, config.num_train, 0);
  out.test = build_split(config, seed, Split::kTest, config.num_test, config.num_train);
  return out;
}

std::vector<PreferencePair> build_preference_dataset(const Dataset& d, std::uint64_t seed) {
  std::vector<PreferencePair> pairs;
  const Rng root(seed);
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const AnnotationSet& s = d.samples[i];
    const auto negs = s.negatives();
    if (negs.empty()) continue;
    Rng rng = root.split(i);
    for (const auto& pos : s.positives()) {
      const auto j = rng.uniform_int(0, static_cast<std::int64_t>(negs.size()) - 1);
      pairs.push_back({s.scene_id, s.class_id, pos, negs[j], i});
    }
  }
  return pairs;
}

}  // namespace locgen
