// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "locgen/error.hpp"
#include "locgen/io.hpp"
#include "locgen/rng.hpp"

namespace locgen {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Stream ids for deriving per-stage seeds from the single run seed.
enum : std::uint64_t { kDataStream = 0, kTrainStream = 1, kDpoStream = 2, kSampleStream = 3, kInitStream = 4 };

std::uint64_t derived(std::uint64_t seed, std::uint64_t stream) { return Rng(seed).split(stream).key(); }

}  // namespace

RunConfig::RunConfig() {
  const DatasetConfig dc;
  const ModelConfig mc;
  const TrainConfig tc;
  const DpoConfig pc;
  const SamplerConfig sc;
  auto num = [](double v) {
    std::ostringstream o;
    o << v;
    return o.str();
  };
  values_ = {
      {"seed", "0"},
      {"data.num_train", std::to_string(dc.num_train)},
      {"data.num_test", std::to_string(dc.num_test)},
      {"data.image_size", std::to_string(dc.scene.image_size)},
      {"data.min_surfaces", std::to_string(dc.scene.min_surfaces)},
      {"data.max_surfaces", std::to_string(dc.scene.max_surfaces)},
      {"data.min_objects", std::to_string(dc.scene.min_objects)},
      {"data.max_objects", std::to_string(dc.scene.max_objects)},
      {"data.max_pos", std::to_string(dc.annotation.max_pos)},
      {"data.max_neg", std::to_string(dc.annotation.max_neg)},
      {"data.candidate_budget", std::to_string(dc.annotation.candidate_budget)},
      {"data.surface_fraction", num(dc.annotation.surface_fraction)},
      {"data.size_jitter", num(dc.annotation.size_jitter)},
      {"model.patch_size", std::to_string(mc.patch_size)},
      {"model.d_model", std::to_string(mc.d_model)},
      {"model.n_layers", std::to_string(mc.n_layers)},
      {"model.n_heads", std::to_string(mc.n_heads)},
      {"train.batch_size", std::to_string(tc.batch_size)},
      {"train.total_steps", std::to_string(tc.total_steps)},
      {"train.learning_rate", num(tc.learning_rate)},
      {"train.warmup_steps", std::to_string(tc.warmup_steps)},
      {"train.beta1", num(tc.beta1)},
      {"train.beta2", num(tc.beta2)},
      {"train.eps", num(tc.eps)},
      {"train.eval_every", std::to_string(tc.eval_every)},
      {"train.heldout_size", std::to_string(tc.heldout_size)},
      {"dpo.beta", num(pc.beta)},
      {"dpo.learning_rate", num(pc.learning_rate)},
      {"dpo.total_steps", std::to_string(pc.total_steps)},
      {"dpo.batch_size", std::to_string(pc.batch_size)},
      {"dpo.log_every", std::to_string(pc.log_every)},
      {"sample.top_k", std::to_string(sc.top_k)},
      {"sample.temperature", num(sc.temperature)},
      {"sample.min_box_bins", std::to_string(sc.min_box_bins)},
      {"sample.max_draws", std::to_string(sc.max_draws)},
      {"eval.K", "100"},
      {"eval.Ks", "10,20,30,40,50,60,70,80,90,100"},
      {"eval.top_ks", "1,2,4,8,16"},
      {"eval.iou_threshold", "0.7"},
  };
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  it->second = value;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw UsageError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    try {
      set(key, trim(line.substr(eq + 1)));
    } catch (const UsageError& e) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) { merge_text(read_file(path), path.string()); }

void RunConfig::set_override(const std::string& a) {
  const auto eq = a.find('=');
  if (eq == std::string::npos) throw UsageError("override '" + a + "' must look like key=value");
  set(trim(a.substr(0, eq)), trim(a.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& s = get(key);
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw UsageError(key + ": expected a non-negative integer, got '" + s + "'");
  return v;
}

int RunConfig::get_int(const std::string& key) const {
  const std::string& s = get(key);
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw UsageError(key + ": expected an integer, got '" + s + "'");
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& s = get(key);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw UsageError(key + ": expected a number, got '" + s + "'");
  }
  return v;
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    int v = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
      throw UsageError(key + ": expected a comma-separated integer list");
    }
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(key + ": empty list");
  return out;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

DatasetConfig RunConfig::dataset() const {
  DatasetConfig c;
  c.num_train = get_int("data.num_train");
  c.num_test = get_int("data.num_test");
  c.scene.image_size = get_int("data.image_size");
  c.scene.min_surfaces = get_int("data.min_surfaces");
  c.scene.max_surfaces = get_int("data.max_surfaces");
  c.scene.min_objects = get_int("data.min_objects");
  c.scene.max_objects = get_int("data.max_objects");
  c.annotation.max_pos = get_int("data.max_pos");
  c.annotation.max_neg = get_int("data.max_neg");
  c.annotation.candidate_budget = get_int("data.candidate_budget");
  c.annotation.surface_fraction = get_double("data.surface_fraction");
  c.annotation.size_jitter = get_double("data.size_jitter");
  return c;
}

ModelConfig RunConfig::model() const {
  ModelConfig c;
  c.image_size = get_int("data.image_size");
  c.num_bins = c.image_size;
  c.num_classes = dataset().scene.num_classes();
  c.patch_size = get_int("model.patch_size");
  c.d_model = get_int("model.d_model");
  c.n_layers = get_int("model.n_layers");
  c.n_heads = get_int("model.n_heads");
  c.seed = derived(get_u64("seed"), kInitStream);
  c.validate();
  return c;
}

TrainConfig RunConfig::train() const {
  TrainConfig c;
  c.batch_size = get_int("train.batch_size");
  c.total_steps = get_int("train.total_steps");
  c.learning_rate = get_double("train.learning_rate");
  c.warmup_steps = get_int("train.warmup_steps");
  c.beta1 = get_double("train.beta1");
  c.beta2 = get_double("train.beta2");
  c.eps = get_double("train.eps");
  c.eval_every = get_int("train.eval_every");
  c.heldout_size = get_int("train.heldout_size");
  c.seed = derived(get_u64("seed"), kTrainStream);
  c.validate();
  return c;
}

DpoConfig RunConfig::dpo() const {
  DpoConfig c;
  c.beta = get_double("dpo.beta");
  c.learning_rate = get_double("dpo.learning_rate");
  c.total_steps = get_int("dpo.total_steps");
  c.batch_size = get_int("dpo.batch_size");
  c.log_every = get_int("dpo.log_every");
  c.seed = derived(get_u64("seed"), kDpoStream);
  c.validate();
  return c;
}

SamplerConfig RunConfig::sampler() const {
  SamplerConfig c;
  c.top_k = get_int("sample.top_k");
  c.temperature = get_double("sample.temperature");
  c.min_box_bins = get_int("sample.min_box_bins");
  c.max_draws = get_int("sample.max_draws");
  c.seed = derived(get_u64("seed"), kSampleStream);
  return c;
}

std::uint64_t RunConfig::dataset_seed() const { return derived(get_u64("seed"), kDataStream); }

Region parse_region(const std::string& text) {
  std::vector<double> v;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    char* end = nullptr;
    const double x = std::strtod(item.c_str(), &end);
    if (item.empty() || end != item.c_str() + item.size() || !std::isfinite(x)) {
      throw UsageError("region must be four numbers rx1,ry1,rx2,ry2; got '" + text + "'");
    }
    v.push_back(x);
  }
  if (v.size() != 4) throw UsageError("region must be four numbers rx1,ry1,rx2,ry2; got '" + text + "'");
  if (v[0] >= v[2] || v[1] >= v[3] || v[0] < 0 || v[1] < 0) {
    throw UsageError("region must satisfy 0 <= rx1 < rx2 and 0 <= ry1 < ry2");
  }
  return {v[0], v[1], v[2], v[3]};
}

}  // namespace locgen
