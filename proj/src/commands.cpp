// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/commands.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "locgen/config.hpp"
#include "locgen/error.hpp"
#include "locgen/eval.hpp"
#include "locgen/io.hpp"
#include "locgen/parallel.hpp"
#include "locgen/sampler.hpp"
#include "locgen/train.hpp"

namespace locgen {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "key = value settings file");
  cmd->add_option("--set", c.overrides, "override a setting, key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "run seed");
}

RunConfig resolve(const Common& c) {
  RunConfig rc;
  if (!c.config_file.empty()) rc.merge_file(c.config_file);
  for (const auto& o : c.overrides) rc.set_override(o);
  if (c.seed) rc.set("seed", std::to_string(*c.seed));
  return rc;
}

json artifact_config(const std::string& command, const json& args, const RunConfig& rc) {
  return {{"command", command}, {"args", args}, {"settings", rc.to_json()}};
}

std::string csv_artifact(const json& cfg, const std::string& csv) {
  return std::string("# ") + kVersion + " " + cfg.dump() + "\n" + csv;
}

std::string xml_escape(const std::string& s) {
  std::string o;
  for (char ch : s) {
    switch (ch) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      default: o += ch;
    }
  }
  return o;
}

std::string svg_artifact(const json& cfg, const std::string& svg) {
  const auto nl = svg.find('\n');
  return svg.substr(0, nl + 1) + "<metadata>" + xml_escape(std::string(kVersion) + " " + cfg.dump()) +
         "</metadata>\n" + svg.substr(nl + 1);
}

Dataset load_split(const std::string& dir, const std::string& split) {
  if (split != "train" && split != "test") throw UsageError("--split must be train or test");
  return read_split(dir, split == "train" ? Split::kTrain : Split::kTest);
}

void require_compatible(const ModelParams<float>& p, const Dataset& d) {
  if (d.scenes.empty()) return;
  const Scene& s = d.scenes.front();
  if (s.image_size() != p.config.image_size || s.num_classes() != p.config.num_classes) {
    throw UsageError("model and dataset disagree on image size or class count");
  }
}

void print_report(const char* name, const RatesReport& r) {
  std::printf("%s K=%d top_k=%d tp=%lld fp=%lld fn=%lld tn=%lld ignored=%lld tpr=%.6f fpr=%.6f\n", name, r.K, r.top_k,
              static_cast<long long>(r.counts.tp), static_cast<long long>(r.counts.fp),
              static_cast<long long>(r.counts.fn), static_cast<long long>(r.counts.tn),
              static_cast<long long>(r.counts.ignored), r.tpr, r.fpr);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c, const std::string& out) {
  const RunConfig rc = resolve(c);
  const json cfg = artifact_config("gen-data", {{"out", out}}, rc);
  const DatasetPair data = build_dataset(rc.dataset(), rc.dataset_seed());
  write_dataset(out, data, cfg);

  std::size_t sets = 0, anns = 0, pos = 0, max_anns = 0;
  for (const Dataset* d : {&data.train, &data.test}) {
    for (const auto& s : d->samples) {
      ++sets;
      anns += s.annotations.size();
      pos += s.num_positives();
      max_anns = std::max(max_anns, s.annotations.size());
    }
  }
  const double lattice = static_cast<double>(anchor_lattice_size(rc.dataset().scene.image_size, 8));
  const double mean_anns = sets ? static_cast<double>(anns) / sets : 0.0;
  const json summary = {{"scenes", data.train.scenes.size() + data.test.scenes.size()},
                        {"train_scenes", data.train.scenes.size()},
                        {"test_scenes", data.test.scenes.size()},
                        {"annotation_sets", sets},
                        {"mean_annotations_per_sample", mean_anns},
                        {"mean_positives_per_sample", sets ? static_cast<double>(pos) / sets : 0.0},
                        {"anchor_lattice_size", lattice},
                        {"sparsity_ratio", mean_anns / lattice},
                        {"max_sparsity_ratio", static_cast<double>(max_anns) / lattice}};
  write_file_atomic(fs::path(out) / "summary.json", json{{"header", {{"version", kVersion}, {"config", cfg}}},
                                                          {"summary", summary}}
                                                         .dump(2) +
                                                         "\n");
  std::printf("scenes=%zu sets=%zu mean_annotations_per_sample=%.3f sparsity_ratio=%.6f max_sparsity_ratio=%.6f\n",
              data.train.scenes.size() + data.test.scenes.size(), sets, mean_anns, mean_anns / lattice,
              static_cast<double>(max_anns) / lattice);
  return kExitOk;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& out) {
  const RunConfig rc = resolve(c);
  const json cfg = artifact_config("train", {{"data", data_dir}, {"out", out}}, rc);
  const Dataset train = read_split(data_dir, Split::kTrain);
  std::optional<Dataset> test;
  if (fs::exists(fs::path(data_dir) / "test" / "annotations.jsonl")) test = read_split(data_dir, Split::kTest);
  const ModelConfig mc = rc.model();
  TrainHooks hooks;
  hooks.log = [](const TrainLogRow& r) {
    std::printf("step=%lld lr=%.6g train_loss=%.6f heldout_loss=%.6f\n", static_cast<long long>(r.step), r.lr,
                r.train_loss, r.heldout_loss);
    std::fflush(stdout);
  };
  hooks.checkpoint = [&](std::int64_t step, const ModelParams<float>& p) {
    char name[64];
    std::snprintf(name, sizeof name, "step_%06lld.ckpt", static_cast<long long>(step));
    save_checkpoint(fs::path(out) / "checkpoints" / name, p, cfg);
  };
  TrainState st = pretrain(train, test ? &*test : nullptr, mc, rc.train(), hooks);
  if (!st.params.all_finite()) throw NumericError("trained parameters contain non-finite values");
  save_checkpoint(fs::path(out) / "model.ckpt", st.params, cfg);
  write_file_atomic(fs::path(out) / "train_log.csv", csv_artifact(cfg, train_log_csv(st.log)));
  return kExitOk;
}

int cmd_dpo(const Common& c, const std::string& data_dir, const std::string& base, const std::string& out) {
  if (base.empty()) throw UsageError("dpo requires --base <pretrained checkpoint>");
  const RunConfig rc = resolve(c);
  const json cfg = artifact_config("dpo", {{"data", data_dir}, {"base", base}, {"out", out}}, rc);
  const ModelParams<float> pre = load_checkpoint(base);
  const Dataset train = read_split(data_dir, Split::kTrain);
  require_compatible(pre, train);
  DpoHooks hooks;
  hooks.log = [](const DpoLogRow& r) {
    std::printf("step=%lld dpo_loss=%.6f mean_preference_prob=%.6f ref_hash=%016llx\n",
                static_cast<long long>(r.step), r.dpo_loss, r.mean_preference_prob,
                static_cast<unsigned long long>(r.ref_hash));
    std::fflush(stdout);
  };
  DpoResult res = dpo_finetune(pre, train, rc.dpo(), hooks);
  if (!res.target.all_finite()) throw NumericError("fine-tuned parameters contain non-finite values");
  save_checkpoint(fs::path(out) / "model.ckpt", res.target, cfg);
  write_file_atomic(fs::path(out) / "dpo_log.csv", csv_artifact(cfg, dpo_log_csv(res.log)));
  return kExitOk;
}

struct SampleArgs {
  std::string data, model, split = "test", out, region;
  int k = 1;
  std::optional<int> top_k;
  std::optional<double> temperature;
  int limit = 0;
};

int cmd_sample(const Common& c, const SampleArgs& a) {
  // Validate the region before touching any file.
  std::optional<Region> region;
  if (!a.region.empty()) region = parse_region(a.region);
  RunConfig rc = resolve(c);
  if (a.top_k) rc.set("sample.top_k", std::to_string(*a.top_k));
  if (a.temperature) {
    std::ostringstream o;
    o << *a.temperature;
    rc.set("sample.temperature", o.str());
  }
  if (a.k < 1) throw UsageError("--k must be >= 1");
  const json cfg = artifact_config("sample",
                                   {{"data", a.data}, {"model", a.model}, {"split", a.split}, {"out", a.out},
                                    {"k", a.k}, {"limit", a.limit}, {"region", a.region}},
                                   rc);
  const SamplerConfig sc = rc.sampler();
  const ModelParams<float> params = load_checkpoint(a.model);
  sc.validate(params.config.vocab_size());
  if (region) region_bounds(*region, params.config.num_bins, sc.min_box_bins);
  const Dataset data = load_split(a.data, a.split);
  require_compatible(params, data);
  const std::size_t n = a.limit > 0 ? std::min<std::size_t>(a.limit, data.samples.size()) : data.samples.size();
  std::vector<std::vector<SampledBox>> draws(n);
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(n, [&](std::size_t i) {
    const AnnotationSet& s = data.samples[i];
    draws[i] = sample_k_locations(params, data.scene_of(s), s.class_id, sc, a.k, Rng(sc.seed).split(i), region);
  });
  const double secs = seconds_since(t0);
  std::string body = jsonl_header(cfg);
  for (std::size_t i = 0; i < n; ++i) {
    const AnnotationSet& s = data.samples[i];
    for (const auto& d : draws[i]) {
      if (d.bbox.degenerate() || !d.bbox.valid()) throw InvariantError("sampler emitted an invalid box");
      body += json{{"scene_id", s.scene_id},
                   {"class", s.class_id},
                   {"bbox", json::array({d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2})},
                   {"logprob", d.logprob}}
                  .dump() +
              "\n";
    }
  }
  write_file_atomic(a.out, body);
  const double total = static_cast<double>(n) * a.k;
  std::printf("sampled %.0f locations for %zu samples in %.3f s (%.3f ms per location)\n", total, n, secs,
              total > 0 ? 1000.0 * secs / total : 0.0);
  return kExitOk;
}

struct EvalArgs {
  std::string data, model, baseline, split = "test", out;
  std::optional<int> K;
  std::optional<int> top_k;
};

Predictor make_predictor(const EvalArgs& a, const std::optional<ModelParams<float>>& params, const SamplerConfig& sc,
                         int num_bins) {
  if (a.baseline == "random") return random_predictor(num_bins, sc);
  return model_predictor(*params, sc);
}

std::optional<ModelParams<float>> load_model_or_baseline(const EvalArgs& a, bool allow_both) {
  if (!a.baseline.empty() && a.baseline != "random") throw UsageError("--baseline only supports 'random'");
  if (a.model.empty() && a.baseline.empty()) throw UsageError("need --model or --baseline random");
  if (!allow_both && !a.model.empty() && !a.baseline.empty()) throw UsageError("use either --model or --baseline");
  if (a.model.empty()) return std::nullopt;
  return load_checkpoint(a.model);
}

json eval_args_json(const EvalArgs& a) {
  return {{"data", a.data}, {"model", a.model}, {"baseline", a.baseline}, {"split", a.split}, {"out", a.out}};
}

int cmd_eval(const Common& c, const EvalArgs& a) {
  RunConfig rc = resolve(c);
  if (a.K) rc.set("eval.K", std::to_string(*a.K));
  if (a.top_k) rc.set("sample.top_k", std::to_string(*a.top_k));
  const json cfg = artifact_config("eval", eval_args_json(a), rc);
  const auto params = load_model_or_baseline(a, false);
  const Dataset data = load_split(a.data, a.split);
  if (params) require_compatible(*params, data);
  const SamplerConfig sc = rc.sampler();
  const int num_bins = params ? params->config.num_bins : rc.get_int("data.image_size");
  const RatesReport r = evaluate(make_predictor(a, params, sc, num_bins), data, rc.get_int("eval.K"), sc.top_k,
                                 rc.get_double("eval.iou_threshold"));
  print_report(params ? "model" : "random", r);
  write_file_atomic(fs::path(a.out) / "eval.csv", csv_artifact(cfg, reports_csv({r})));
  return kExitOk;
}

int cmd_sweep_k(const Common& c, const EvalArgs& a) {
  RunConfig rc = resolve(c);
  if (a.top_k) rc.set("sample.top_k", std::to_string(*a.top_k));
  const json cfg = artifact_config("sweep-k", eval_args_json(a), rc);
  const auto params = load_model_or_baseline(a, true);
  const Dataset data = load_split(a.data, a.split);
  if (params) require_compatible(*params, data);
  const SamplerConfig sc = rc.sampler();
  const auto Ks = rc.get_int_list("eval.Ks");
  const double thr = rc.get_double("eval.iou_threshold");
  std::vector<PlotSeries> series;
  if (params) {
    auto reps = curve_sweep(model_predictor(*params, sc), data, Ks, sc.top_k, thr);
    for (const auto& r : reps) print_report("model", r);
    write_file_atomic(fs::path(a.out) / "sweep_k.csv", csv_artifact(cfg, reports_csv(reps)));
    series.push_back({"model", std::move(reps)});
  }
  if (a.baseline == "random") {
    auto reps = curve_sweep(random_predictor(rc.get_int("data.image_size"), sc), data, Ks, sc.top_k, thr);
    for (const auto& r : reps) print_report("random", r);
    write_file_atomic(fs::path(a.out) / "sweep_k_random.csv", csv_artifact(cfg, reports_csv(reps)));
    series.push_back({"random", std::move(reps)});
  }
  write_file_atomic(fs::path(a.out) / "sweep_k.svg", svg_artifact(cfg, reports_svg(series, "TPR vs FPR, K sweep")));
  return kExitOk;
}

int cmd_sweep_topk(const Common& c, const EvalArgs& a) {
  RunConfig rc = resolve(c);
  if (a.K) rc.set("eval.K", std::to_string(*a.K));
  if (a.model.empty()) throw UsageError("sweep-topk requires --model");
  const json cfg = artifact_config("sweep-topk", eval_args_json(a), rc);
  const ModelParams<float> params = load_checkpoint(a.model);
  const Dataset data = load_split(a.data, a.split);
  require_compatible(params, data);
  const SamplerConfig base = rc.sampler();
  auto make = [&](int k) {
    SamplerConfig sc = base;
    sc.top_k = k;
    return model_predictor(params, sc);
  };
  const auto reps =
      topk_sweep(make, data, rc.get_int_list("eval.top_ks"), rc.get_int("eval.K"), rc.get_double("eval.iou_threshold"));
  for (const auto& r : reps) print_report("model", r);
  write_file_atomic(fs::path(a.out) / "sweep_topk.csv", csv_artifact(cfg, reports_csv(reps, true)));
  write_file_atomic(fs::path(a.out) / "sweep_topk.svg",
                    svg_artifact(cfg, reports_svg({{"model", reps}}, "TPR vs FPR, top-k sweep")));
  return kExitOk;
}

int cmd_bench(const Common& c, const std::string& data_dir, const std::string& model, int scenes) {
  const RunConfig rc = resolve(c);
  const ModelParams<float> params = load_checkpoint(model);
  Dataset data = read_split(data_dir, Split::kTest);
  require_compatible(params, data);
  if (scenes < 1) throw UsageError("--scenes must be >= 1");
  if (static_cast<std::size_t>(scenes) < data.samples.size()) data.samples.resize(scenes);
  const SamplerConfig sc = rc.sampler();
  sc.validate(params.config.vocab_size());
  // One location per sample, including encoding the scene.
  auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const AnnotationSet& s = data.samples[i];
    Rng r = Rng(sc.seed).split(i);
    sample_location(params, data.scene_of(s), s.class_id, sc, r);
  }
  const double sample_s = seconds_since(t0) / static_cast<double>(data.samples.size());
  t0 = std::chrono::steady_clock::now();
  const RatesReport rep = evaluate(model_predictor(params, sc), data, 100, sc.top_k);
  const double eval_s = seconds_since(t0) / static_cast<double>(data.samples.size());
  std::printf("%s\n", json{{"samples", data.samples.size()},
                           {"threads", thread_count()},
                           {"seconds_per_location", sample_s},
                           {"seconds_per_evaluate_k100", eval_s},
                           {"speedup", eval_s / sample_s},
                           {"tpr_k100", rep.tpr},
                           {"fpr_k100", rep.fpr}}
                          .dump()
                          .c_str());
  return kExitOk;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"locgen: generative object-location model on synthetic scenes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common gen_c, train_c, dpo_c, sample_c, eval_c, sk_c, st_c, bench_c;
  std::string gen_out, train_data, train_out, dpo_data, dpo_base, dpo_out, bench_data, bench_model;
  int bench_scenes = 20;
  SampleArgs sa;
  EvalArgs ea, ska, sta;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, gen_c);
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "NLL pretraining");
  add_common(train, train_c);
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory")->required();

  auto* dpo = app.add_subcommand("dpo", "preference fine-tuning from a pretrained checkpoint");
  add_common(dpo, dpo_c);
  dpo->add_option("--data", dpo_data, "dataset directory")->required();
  dpo->add_option("--base", dpo_base, "pretrained checkpoint");
  dpo->add_option("--out", dpo_out, "output directory")->required();

  auto* sample = app.add_subcommand("sample", "draw locations");
  add_common(sample, sample_c);
  sample->add_option("--data", sa.data, "dataset directory")->required();
  sample->add_option("--model", sa.model, "checkpoint")->required();
  sample->add_option("--split", sa.split, "train or test");
  sample->add_option("--k", sa.k, "draws per sample");
  sample->add_option("--top-k", sa.top_k, "top-k cut");
  sample->add_option("--temperature", sa.temperature, "softmax temperature");
  sample->add_option("--region", sa.region, "allowed region rx1,ry1,rx2,ry2");
  sample->add_option("--limit", sa.limit, "only the first N samples");
  sample->add_option("--out", sa.out, "output JSONL")->required();

  auto add_eval = [&](CLI::App* cmd, Common& c, EvalArgs& a, bool with_k, bool with_top_k) {
    add_common(cmd, c);
    cmd->add_option("--data", a.data, "dataset directory")->required();
    cmd->add_option("--model", a.model, "checkpoint");
    cmd->add_option("--baseline", a.baseline, "'random' for the uniform baseline");
    cmd->add_option("--split", a.split, "train or test");
    cmd->add_option("--out", a.out, "output directory")->required();
    if (with_k) cmd->add_option("--K", a.K, "draws per sample");
    if (with_top_k) cmd->add_option("--top-k", a.top_k, "top-k cut");
  };
  auto* eval = app.add_subcommand("eval", "TPR/FPR at one K");
  add_eval(eval, eval_c, ea, true, true);
  auto* sweep_k = app.add_subcommand("sweep-k", "TPR/FPR over eval.Ks");
  add_eval(sweep_k, sk_c, ska, false, true);
  auto* sweep_topk = app.add_subcommand("sweep-topk", "TPR/FPR over eval.top_ks at fixed K");
  add_eval(sweep_topk, st_c, sta, true, false);

  auto* bench = app.add_subcommand("bench", "sampling latency versus a full evaluation");
  add_common(bench, bench_c);
  bench->add_option("--data", bench_data, "dataset directory")->required();
  bench->add_option("--model", bench_model, "checkpoint")->required();
  bench->add_option("--scenes", bench_scenes, "number of test samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_c, gen_out);
    if (*train) return cmd_train(train_c, train_data, train_out);
    if (*dpo) return cmd_dpo(dpo_c, dpo_data, dpo_base, dpo_out);
    if (*sample) return cmd_sample(sample_c, sa);
    if (*eval) return cmd_eval(eval_c, ea);
    if (*sweep_k) return cmd_sweep_k(sk_c, ska);
    if (*sweep_topk) return cmd_sweep_topk(st_c, sta);
    if (*bench) return cmd_bench(bench_c, bench_data, bench_model, bench_scenes);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InvariantError& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed input: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace locgen
