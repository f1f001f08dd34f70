// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "locgen/error.hpp"

namespace locgen {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'L', 'O', 'C', 'G', 'C', 'K', 'P', 'T'};
constexpr int kFormatVersion = 1;
}  // namespace

void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw UsageError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw UsageError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw UsageError("cannot rename onto " + path.string() + ": " + ec.message());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string jsonl_header(const json& run_config) {
  return json{{"header", {{"version", kVersion}, {"config", run_config}}}}.dump() + "\n";
}

std::vector<json> read_jsonl(const fs::path& path, json* header) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path.string());
  std::vector<json> out;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw UsageError(path.string() + ": malformed JSON line: " + e.what());
    }
    if (first && j.is_object() && j.contains("header")) {
      if (header) *header = j["header"];
    } else {
      out.push_back(std::move(j));
    }
    first = false;
  }
  return out;
}

json to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"d_model", c.d_model},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},       {"num_bins", c.num_bins},
          {"num_classes", c.num_classes}, {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.num_bins = j.at("num_bins").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

std::string encode_checkpoint(const ModelParams<float>& params, const json& run_config) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& t = params.tensors[i];
    tensors.push_back({{"name", params.names[i]}, {"shape", t.shape}, {"offset", offset}, {"count", t.size()}});
    offset += t.size();
  }
  const json header = {{"format_version", kFormatVersion}, {"version", kVersion}, {"config", to_json(params.config)},
                       {"tensors", tensors},               {"run_config", run_config}};
  const std::string h = header.dump();
  std::string out(kMagic, sizeof kMagic);
  const std::uint64_t len = h.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += h;
  for (const auto& t : params.tensors) {
    out.append(reinterpret_cast<const char*>(t.data.data()), t.size() * sizeof(float));
  }
  return out;
}

ModelParams<float> decode_checkpoint(const std::string& bytes, json* run_config) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw UsageError("not a locgen checkpoint");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  if (16 + len > bytes.size()) throw UsageError("truncated checkpoint header");
  json header;
  try {
    header = json::parse(bytes.substr(16, len));
  } catch (const json::exception& e) {
    throw UsageError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (header.at("format_version").get<int>() != kFormatVersion) throw UsageError("unsupported checkpoint format");
  ModelParams<float> p;
  p.config = model_config_from_json(header.at("config"));
  const std::size_t payload = 16 + len;
  std::size_t total = 0;
  for (const auto& t : header.at("tensors")) total += t.at("count").get<std::size_t>();
  if (bytes.size() != payload + total * sizeof(float)) throw UsageError("checkpoint payload size mismatch");
  for (const auto& t : header.at("tensors")) {
    const auto shape = t.at("shape").get<std::vector<int>>();
    const auto count = t.at("count").get<std::size_t>();
    const auto offset = t.at("offset").get<std::size_t>();
    if (ad::numel(shape) != count || offset + count > total) throw UsageError("inconsistent tensor table");
    ad::Tensor<float> tensor = ad::Tensor<float>::zeros(shape, true);
    std::memcpy(tensor.data.data(), bytes.data() + payload + offset * sizeof(float), count * sizeof(float));
    p.names.push_back(t.at("name").get<std::string>());
    p.tensors.push_back(std::move(tensor));
  }
  // The tensor table must match the layout the model code expects.
  const ModelParams<float> ref = init_params(p.config);
  if (ref.names != p.names) throw UsageError("checkpoint tensor names do not match the model layout");
  for (std::size_t i = 0; i < ref.tensors.size(); ++i) {
    if (ref.tensors[i].shape != p.tensors[i].shape) throw UsageError("checkpoint tensor shape mismatch: " + p.names[i]);
  }
  if (run_config) *run_config = header.value("run_config", json::object());
  return p;
}

void save_checkpoint(const fs::path& path, const ModelParams<float>& params, const json& run_config) {
  write_file_atomic(path, encode_checkpoint(params, run_config));
}

ModelParams<float> load_checkpoint(const fs::path& path, json* run_config) {
  return decode_checkpoint(read_file(path), run_config);
}

json grid_rle(const Scene& scene) {
  const std::size_t plane = static_cast<std::size_t>(scene.image_size()) * scene.image_size();
  json channels = json::array();
  for (int c = 0; c < scene.num_channels(); ++c) {
    const std::uint8_t* bits = scene.grid().data() + c * plane;
    json runs = json::array();
    std::uint8_t cur = 0;
    std::size_t run = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      if (bits[i] != cur) {
        runs.push_back(run);
        cur = bits[i];
        run = 0;
      }
      ++run;
    }
    runs.push_back(run);
    channels.push_back(std::move(runs));
  }
  return channels;
}

void apply_grid_rle(const json& rle, Scene& scene) {
  const std::size_t plane = static_cast<std::size_t>(scene.image_size()) * scene.image_size();
  if (!rle.is_array() || rle.size() != static_cast<std::size_t>(scene.num_channels())) {
    throw UsageError("grid_rle: expected one run list per channel");
  }
  auto& grid = scene.mutable_grid();
  for (int c = 0; c < scene.num_channels(); ++c) {
    std::size_t pos = 0;
    std::uint8_t cur = 0;
    for (const auto& r : rle[c]) {
      const auto n = r.get<std::size_t>();
      if (pos + n > plane) throw UsageError("grid_rle: runs exceed the grid size");
      std::fill_n(grid.begin() + c * plane + pos, n, cur);
      pos += n;
      cur ^= 1;
    }
    if (pos != plane) throw UsageError("grid_rle: runs do not cover the grid");
  }
}

json scene_to_json(const Scene& scene) {
  return {{"scene_id", scene.scene_id()},
          {"image_size", scene.image_size()},
          {"num_classes", scene.num_classes()},
          {"seed", scene.seed()},
          {"grid_rle", grid_rle(scene)}};
}

Scene scene_from_json(const json& j) {
  Scene s(j.at("scene_id").get<std::string>(), j.at("image_size").get<int>(), j.at("num_classes").get<int>(),
          j.at("seed").get<std::uint64_t>());
  apply_grid_rle(j.at("grid_rle"), s);
  if (const auto err = s.check_invariants(); !err.empty()) {
    throw InvariantError("scene " + s.scene_id() + ": " + err);
  }
  return s;
}

namespace {

json bbox_json(const BBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

BBox bbox_from(const json& j, int image_size) {
  if (!j.is_array() || j.size() != 4) throw UsageError("bbox must be a 4-element array");
  BBox b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>(), image_size};
  if (!b.valid()) throw UsageError("bbox outside image bounds: " + to_string(b));
  return b;
}

}  // namespace

json annotation_set_to_json(const AnnotationSet& s, const Scene& scene) {
  json anns = json::array();
  for (const auto& a : s.annotations) {
    anns.push_back({{"bbox", bbox_json(a.bbox)}, {"label", a.label == Label::kPositive ? "pos" : "neg"}});
  }
  return {{"scene_id", s.scene_id}, {"image_size", scene.image_size()}, {"class", s.class_id},
          {"grid_rle", grid_rle(scene)}, {"annotations", anns}};
}

AnnotationSet annotation_set_from_json(const json& j) {
  AnnotationSet s;
  s.scene_id = j.at("scene_id").get<std::string>();
  s.class_id = j.at("class").get<int>();
  const int size = j.at("image_size").get<int>();
  for (const auto& a : j.at("annotations")) {
    const auto label = a.at("label").get<std::string>();
    if (label != "pos" && label != "neg") throw UsageError("annotation label must be pos or neg");
    s.annotations.push_back({bbox_from(a.at("bbox"), size), label == "pos" ? Label::kPositive : Label::kNegative});
  }
  s.no_positives = s.num_positives() == 0;
  return s;
}

namespace {

std::string split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

void write_split(const fs::path& dir, const Dataset& d, const json& run_config) {
  std::string scenes = jsonl_header(run_config);
  for (const auto& s : d.scenes) scenes += scene_to_json(s).dump() + "\n";
  std::string anns = jsonl_header(run_config);
  for (const auto& s : d.samples) anns += annotation_set_to_json(s, d.scene_of(s)).dump() + "\n";
  const fs::path sub = dir / split_name(d.split);
  write_file_atomic(sub / "scenes.jsonl", scenes);
  write_file_atomic(sub / "annotations.jsonl", anns);
}

}  // namespace

void write_dataset(const fs::path& dir, const DatasetPair& data, const json& run_config) {
  write_split(dir, data.train, run_config);
  write_split(dir, data.test, run_config);
}

Dataset read_split(const fs::path& dir, Split split) {
  const fs::path sub = dir / split_name(split);
  if (!fs::exists(sub / "scenes.jsonl") || !fs::exists(sub / "annotations.jsonl")) {
    throw UsageError("dataset split missing under " + sub.string());
  }
  Dataset d;
  d.split = split;
  for (const auto& j : read_jsonl(sub / "scenes.jsonl")) d.scenes.push_back(scene_from_json(j));
  d.reindex();
  for (const auto& j : read_jsonl(sub / "annotations.jsonl")) {
    AnnotationSet s = annotation_set_from_json(j);
    d.scene_index(s.scene_id);  // throws on a dangling reference
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace locgen
