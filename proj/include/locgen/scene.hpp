// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "locgen/geometry.hpp"

namespace locgen {

/// Size rules for one insertable object class. Area is a fraction of the
/// image area; aspect is width / height.
struct ClassSpec {
  std::string name;
  double min_area_frac = 0.0;
  double max_area_frac = 1.0;
  double min_aspect = 0.0;
  double max_aspect = 1e9;
};

/// The four default classes used by the synthetic benchmark.
std::vector<ClassSpec> default_classes();

struct SceneConfig {
  int image_size = 64;
  std::vector<ClassSpec> classes = default_classes();
  int min_surfaces = 2;
  int max_surfaces = 3;
  int min_objects = 1;
  int max_objects = 4;
  int surface_thickness = 2;
  int max_retries = 200;

  int num_classes() const { return static_cast<int>(classes.size()); }
  /// Channel layout: one occupancy channel per class, then support, then free space.
  int num_channels() const { return num_classes() + 2; }
};

struct ClassId {
  int id = 0;
  std::string name;
};

/// Multi-channel binary occupancy grid standing in for a background image.
class Scene {
 public:
  Scene() = default;
  Scene(std::string scene_id, int image_size, int num_classes, std::uint64_t seed);

  const std::string& scene_id() const { return scene_id_; }
  int image_size() const { return image_size_; }
  int num_classes() const { return num_classes_; }
  int num_channels() const { return num_classes_ + 2; }
  int support_channel() const { return num_classes_; }
  int free_channel() const { return num_classes_ + 1; }
  std::uint64_t seed() const { return seed_; }

  std::uint8_t at(int channel, int y, int x) const {
    return grid_[(static_cast<std::size_t>(channel) * image_size_ + y) * image_size_ + x];
  }
  void set(int channel, int y, int x, std::uint8_t v) {
    grid_[(static_cast<std::size_t>(channel) * image_size_ + y) * image_size_ + x] = v;
  }
  const std::vector<std::uint8_t>& grid() const { return grid_; }
  std::vector<std::uint8_t>& mutable_grid() { return grid_; }

  /// True when any occupancy channel is set at (y, x).
  bool occupied(int y, int x) const;
  /// Recomputes the free-space channel from occupancy and support.
  void refresh_free_channel();
  /// Checks structural invariants; returns an empty string when they hold.
  std::string check_invariants() const;

  friend bool operator==(const Scene&, const Scene&) = default;

 private:
  std::string scene_id_;
  int image_size_ = 0;
  int num_classes_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<std::uint8_t> grid_;
};

enum class Label { kPositive, kNegative };

struct Annotation {
  BBox bbox;
  Label label = Label::kNegative;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct AnnotationSet {
  std::string scene_id;
  int class_id = 0;
  std::vector<Annotation> annotations;
  /// Set when sampling found no positive within the candidate budget.
  bool no_positives = false;

  std::vector<BBox> positives() const;
  std::vector<BBox> negatives() const;
  std::size_t num_positives() const;
  std::size_t num_negatives() const;

  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

struct AnnotationConfig {
  int max_pos = 20;
  int max_neg = 40;
  /// Number of candidate placements drawn per (scene, class).
  int candidate_budget = 42;
  /// Fraction of candidates whose bottom edge is snapped to a support surface.
  double surface_fraction = 0.7;
  /// Fraction of candidates whose size is perturbed away from the class rules.
  double size_jitter = 0.2;
  /// Stride of the anchor lattice used for the sparsity statistic.
  int anchor_stride = 8;
};

enum class Split { kTrain, kTest };

struct Dataset {
  Split split = Split::kTrain;
  std::vector<Scene> scenes;
  std::vector<AnnotationSet> samples;

  /// Index of the scene with the given id; throws when absent.
  std::size_t scene_index(const std::string& scene_id) const;
  const Scene& scene_of(const AnnotationSet& s) const { return scenes[scene_index(s.scene_id)]; }
  /// Rebuilds the id lookup after scenes were appended.
  void reindex();

 private:
  std::vector<std::pair<std::string, std::size_t>> index_;
};

struct DatasetConfig {
  SceneConfig scene;
  AnnotationConfig annotation;
  int num_train = 2000;
  int num_test = 200;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

struct PreferencePair {
  std::string scene_id;
  int class_id = 0;
  BBox preferred;
  BBox rejected;
  /// Index of the source AnnotationSet in its dataset.
  std::size_t sample_index = 0;
};

Scene generate_scene(const SceneConfig& config, std::uint64_t seed, std::string scene_id = "");

/// Ground-truth plausibility oracle. All four rules must hold:
///  R1 bottom edge rests on the top row of a support surface along its full width,
///  R2 interior free of every occupancy channel,
///  R3 area fraction within the class range,
///  R4 aspect ratio within the class range.
/// Non-integer coordinates are never plausible.
bool plausibility(const Scene& scene, const SceneConfig& config, int class_id, const BBox& b);

AnnotationSet sample_annotations(const Scene& scene, const SceneConfig& config, int class_id,
                                 const AnnotationConfig& ann, std::uint64_t seed);

/// Anchor boxes on the stride lattice: (image_size / stride + 1)^4 corner pairs.
std::int64_t anchor_lattice_size(int image_size, int stride);

DatasetPair build_dataset(const DatasetConfig& config, std::uint64_t seed);

/// One pair per positive, each with a uniformly drawn negative of the same
/// AnnotationSet. Sets without negatives contribute nothing.
std::vector<PreferencePair> build_preference_dataset(const Dataset& d, std::uint64_t seed);

/// Integer box sizes (w, h) satisfying the class area and aspect rules.
std::vector<std::pair<int, int>> admissible_sizes(const ClassSpec& spec, int image_size);

}  // namespace locgen
