// Command-line front door: dataset generation, model analysis, gradient
// checking, toy training, evaluation and FPS benchmarking.
//
// Exit codes: 0 success, 1 verification failure, 2 usage/environment error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pec/cost.hpp"
#include "pec/data.hpp"
#include "pec/executor.hpp"
#include "pec/gradsuite.hpp"
#include "pec/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pec;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerificationFailure = 1;
constexpr int kExitUsage = 2;

// Values from a --config JSON file fill in options the user did not pass
// on the command line; explicit flags always win.
void apply_config_file(CLI::App* cmd, const std::string& path) {
  if (path.empty()) return;
  std::ifstream is(path);
  if (!is) throw UsageError(msg("cannot open config file: ", path));
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw UsageError(msg("config file ", path, ": ", e.what()));
  }
  for (auto& [key, value] : j.items()) {
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (!opt || opt->count() > 0) continue;
    const std::string text = value.is_string() ? value.get<std::string>() : value.dump();
    opt->add_result(text);
    opt->run_callback();
  }
}

std::uint64_t effective_seed(CLI::Option* seed_opt, std::uint64_t parsed) {
  if (seed_opt->count() > 0) return parsed;
  if (const char* env = std::getenv("PEC_SEED")) {
    try {
      return std::stoull(env);
    } catch (...) {
      throw UsageError(msg("PEC_SEED is not a number: ", env));
    }
  }
  return parsed;
}

struct CheckpointMeta {
  std::string model;
  std::string scale;
  int num_classes = 0;
};

CheckpointMeta parse_meta(const std::string& meta_json) {
  CheckpointMeta m;
  json j;
  try {
    j = json::parse(meta_json);
    m.model = j.at("model").get<std::string>();
    m.scale = j.at("scale").get<std::string>();
    m.num_classes = j.at("num_classes").get<int>();
  } catch (const json::exception& e) {
    throw UsageError(msg("checkpoint metadata unreadable: ", e.what()));
  }
  return m;
}

// Reads only the metadata block of a checkpoint.
std::string peek_checkpoint_meta(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError(msg("cannot open checkpoint: ", path));
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, ckpt::kMagic, 8) != 0) {
    throw UsageError(msg("not a checkpoint file: ", path));
  }
  ckpt::read_u32(is);
  const std::uint32_t len = ckpt::read_u32(is);
  std::string meta(len, '\0');
  is.read(meta.data(), len);
  if (!is) throw UsageError(msg("checkpoint truncated: ", path));
  return meta;
}

int cmd_gen_data(const std::string& out_dir, int images, int size, std::uint64_t seed,
                 bool occlusion) {
  if (size % 32 != 0) {
    throw UsageError(msg("--size must be divisible by 32, got ", size));
  }
  if (images < 10) throw UsageError("--images must be at least 10 (7:1:2 split)");
  SyntheticConfig cfg;
  cfg.num_images = images;
  cfg.image_size = size;
  cfg.seed = seed;
  cfg.occlusion = occlusion;
  const DatasetIndex index = gen_synthetic(ClassCatalog{}, cfg, out_dir);
  json rep;
  rep["config"] = {{"out", out_dir}, {"images", images},  {"size", size},
                   {"seed", seed},   {"occlusion", occlusion}};
  rep["splits"] = {{"train", index.of(Split::Train).size()},
                   {"val", index.of(Split::Val).size()},
                   {"test", index.of(Split::Test).size()}};
  std::cout << rep.dump(2) << "\n";
  return kExitOk;
}

int cmd_analyze(const std::string& model, const std::string& scale, int input_size,
                const std::string& format, const std::string& out_path, bool dfl_head,
                bool count_running) {
  CostOptions opts;
  opts.dfl_style_head = dfl_head;
  opts.count_running_stats = count_running;
  const ModelGraph graph = build_model(model_variant_from(model), scale, 4);
  const CostReport rep = analyze_graph(graph, input_size, input_size, opts);
  const ModelGraph base = build_model(ModelVariant::Baseline, scale, 4);
  const CostReport base_rep = analyze_graph(base, input_size, input_size, opts);
  const ModelGraph pecg = build_model(ModelVariant::Pec, scale, 4);
  const CostReport pec_rep = analyze_graph(pecg, input_size, input_size, opts);

  const std::string body = format == "csv" ? cost_report_csv(rep) : cost_report_json(rep);
  if (!out_path.empty()) {
    std::ofstream os(out_path);
    if (!os) throw UsageError(msg("cannot write report: ", out_path));
    os << body;
  } else {
    std::cout << body;
  }

  const PConvCost pc = pconv_cost(40, 40, 64, 0.25, 3);
  json summary;
  summary["config"] = {{"model", model},   {"scale", scale},
                       {"input_size", input_size}, {"format", format},
                       {"dfl_style_head", dfl_head},
                       {"count_running_stats", count_running}};
  summary["total_params"] = rep.total_params;
  summary["total_macs"] = rep.total_macs;
  summary["pconv_ratios"] = {{"mac_ratio", pc.mac_ratio.str()},
                             {"mem_dominant_ratio", pc.mem_dominant_ratio.str()},
                             {"mem_full_ratio", pc.mem_full_ratio.value()}};
  summary["baseline_params"] = base_rep.total_params;
  summary["pec_params"] = pec_rep.total_params;
  summary["pec_reduction_percent"] =
      100.0 * (1.0 - static_cast<double>(pec_rep.total_params) /
                         static_cast<double>(base_rep.total_params));
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_gradcheck(double tolerance, bool corrupt_conv) {
  GradSuiteOptions opts;
  opts.tolerance = tolerance;
  opts.corrupt_conv_backward = corrupt_conv;
  const auto results = run_grad_suite(opts);
  int failures = 0;
  std::printf("%-24s %-12s %-12s %s\n", "op", "max_rel_err", "tolerance", "status");
  for (const auto& e : results) {
    std::printf("%-24s %-12.3e %-12.3e %s\n", e.name.c_str(), e.max_rel_err, e.tolerance,
                e.passed ? "pass" : "FAIL");
    if (!e.passed) ++failures;
  }
  if (failures > 0) {
    for (const auto& e : results) {
      if (!e.passed) {
        std::printf("gradient check failed: %s (max rel err %.3e > %.3e)\n",
                    e.name.c_str(), e.max_rel_err, e.tolerance);
      }
    }
    return kExitVerificationFailure;
  }
  std::printf("all %zu gradient checks passed at tolerance %.1e\n", results.size(),
              tolerance);
  return kExitOk;
}

int cmd_train(const std::string& data_dir, const std::string& model,
              const std::string& scale, int epochs, std::uint64_t seed, int batch,
              double lr, const std::string& out_ckpt, const std::string& log_path) {
  if (!fs::exists(data_dir + "/split.json")) {
    throw UsageError(msg("no dataset at ", data_dir, " (missing split.json)"));
  }
  const DatasetIndex data = load_dataset_index(data_dir);
  const ModelGraph graph = build_model(model_variant_from(model), scale, 4);
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = seed;
  cfg.batch_size = batch;
  cfg.learning_rate = lr;
  const TrainResult res = train(graph, data, cfg, out_ckpt, log_path);
  json rep;
  rep["config"] = {{"data", data_dir}, {"model", model},   {"scale", scale},
                   {"epochs", epochs}, {"seed", seed},     {"batch_size", batch},
                   {"learning_rate", lr}, {"out", out_ckpt}, {"log", log_path}};
  rep["best_map50"] = res.best_map50;
  rep["best_epoch"] = res.best_epoch;
  rep["final_total_loss"] = res.log.empty() ? 0.0 : res.log.back().total;
  std::cout << rep.dump(2) << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& data_dir, const std::string& ckpt_path,
             const std::string& split, int threads, const std::string& report_dir) {
  if (!fs::exists(ckpt_path)) throw UsageError(msg("checkpoint not found: ", ckpt_path));
  const CheckpointMeta meta = parse_meta(peek_checkpoint_meta(ckpt_path));
  const ModelGraph graph =
      build_model(model_variant_from(meta.model), meta.scale, meta.num_classes);
  WeightStore<float> store;
  Rng rng(0);
  init_model_weights(graph, store, rng);
  try {
    load_checkpoint(ckpt_path, store);
  } catch (const ConfigError& e) {
    throw UsageError(msg("checkpoint does not match the ", meta.model, "/", meta.scale,
                         " model: ", e.what()));
  }
  const DatasetIndex data = load_dataset_index(data_dir);
  Split sp = Split::Test;
  if (split == "val") sp = Split::Val;
  else if (split == "train") sp = Split::Train;
  else if (split != "test") throw UsageError(msg("unknown split '", split, "'"));

  EvalConfig ecfg;
  const EvalReport rep = evaluate_model(graph, store, data, sp, ecfg, threads);
  const CostReport params = count_params(graph);

  json summary;
  summary["config"] = {{"data", data_dir},   {"checkpoint", ckpt_path},
                       {"split", split},     {"threads", threads},
                       {"model", meta.model}, {"scale", meta.scale},
                       {"nms_iou_threshold", ecfg.nms_iou_threshold},
                       {"match_iou_threshold", ecfg.match_iou_threshold},
                       {"confidence_floor", ecfg.confidence_floor}};
  summary["Model"] = meta.model;
  summary["Precision (%)"] = 100.0 * rep.pr.precision;
  summary["Recall (%)"] = 100.0 * rep.pr.recall;
  summary["mAP@.5 (%)"] = 100.0 * rep.map.map50;
  summary["mAP@.5:.95 (%)"] = 100.0 * rep.map.map5095;
  summary["Detection Speed (FPS)"] = nullptr;  // measured by `bench`
  summary["Parameter (10^6)"] = params.total_params / 1e6;
  std::cout << summary.dump(2) << "\n";

  if (!report_dir.empty()) {
    fs::create_directories(report_dir);
    {
      std::ofstream os(report_dir + "/summary.json");
      os << summary.dump(2) << "\n";
    }
    {
      std::ofstream os(report_dir + "/per_class_ap.csv");
      os << "class_id,ap50,ap5095\n";
      for (const auto& row : rep.map.per_class) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f\n", row.class_id, row.ap50,
                      row.ap5095);
        os << buf;
      }
    }
    {
      std::ofstream os(report_dir + "/pr_curves.csv");
      os << "class_id,recall,precision\n";
      for (const auto& [cls, curve] : rep.curves) {
        for (std::size_t i = 0; i < curve.precision.size(); ++i) {
          char buf[96];
          std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f\n", cls, curve.recall[i],
                        curve.precision[i]);
          os << buf;
        }
      }
    }
  }
  return kExitOk;
}

int cmd_bench(const std::string& ckpt_path, int images, int size, double fake_timer_step,
              int warmup, int reps, std::uint64_t seed) {
  if (!fs::exists(ckpt_path)) throw UsageError(msg("checkpoint not found: ", ckpt_path));
  const CheckpointMeta meta = parse_meta(peek_checkpoint_meta(ckpt_path));
  const ModelGraph graph =
      build_model(model_variant_from(meta.model), meta.scale, meta.num_classes);
  WeightStore<float> store;
  Rng rng(0);
  init_model_weights(graph, store, rng);
  try {
    load_checkpoint(ckpt_path, store);
  } catch (const ConfigError& e) {
    throw UsageError(msg("checkpoint does not match the model: ", e.what()));
  }

  Rng img_rng(seed);
  std::vector<TensorF> pool;
  for (int i = 0; i < std::min(images, 8); ++i) {
    pool.push_back(TensorF::uniform(Shape{1, 3, size, size}, img_rng, 0.0, 1.0));
  }
  EvalConfig ecfg;
  auto pass = [&](int i) {
    Tape<float> tape;
    BlockCtx<float> ctx{tape, store, false};
    auto ho = forward_model(graph, ctx, tape.leaf(&pool[static_cast<std::size_t>(i) % pool.size()]));
    auto dets = decode_head(ho, ecfg.confidence_floor, i);
    nms(dets, ecfg);
  };

  FpsResult res;
  if (fake_timer_step > 0.0) {
    FakeClock clock(fake_timer_step);
    res = fps_benchmark(pass, images, clock, warmup, reps);
  } else {
    SteadyClock clock;
    res = fps_benchmark(pass, images, clock, warmup, reps);
  }
  std::printf("FPS: %.1f\n", res.fps_mean);
  json rep;
  rep["config"] = {{"checkpoint", ckpt_path}, {"images", images}, {"size", size},
                   {"warmup", warmup},        {"reps", reps},     {"seed", seed},
                   {"fake_timer_step", fake_timer_step}};
  rep["fps_mean"] = res.fps_mean;
  rep["fps_sd"] = res.fps_sd;
  std::cout << rep.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PEC-YOLO building blocks: analysis, verification and toy training"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shape dataset");
  std::string gen_out = "dataset";
  int gen_images = 286, gen_size = 64;
  std::uint64_t gen_seed = 7;
  bool gen_occlusion = false;
  std::string gen_config;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--images", gen_images, "number of images");
  gen->add_option("--size", gen_size, "image size (divisible by 32)");
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "rng seed");
  gen->add_flag("--occlusion", gen_occlusion, "allow overlapping shapes");
  gen->add_option("--config", gen_config, "JSON config file");

  // analyze
  auto* ana = app.add_subcommand("analyze", "parameter / MAC / memory report");
  std::string ana_model = "pec", ana_scale = "s", ana_format = "csv", ana_out, ana_config;
  int ana_input = 640;
  bool ana_dfl = true, ana_running = false;
  ana->add_option("--model", ana_model, "baseline|pec");
  ana->add_option("--scale", ana_scale, "s|toy");
  ana->add_option("--input-size", ana_input, "input resolution (divisible by 32)");
  ana->add_option("--format", ana_format, "csv|json");
  ana->add_option("--out", ana_out, "write the report to a file");
  ana->add_flag("--dfl-head,!--plain-head", ana_dfl,
                "count a DFL-style box branch (default on)");
  ana->add_flag("--count-running-stats", ana_running, "include BN running statistics");
  ana->add_option("--config", ana_config, "JSON config file");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  double gc_tol = 1e-4;
  bool gc_corrupt = false;
  std::string gc_config;
  gc->add_option("--tolerance", gc_tol, "max relative error");
  gc->add_flag("--corrupt-conv-backward", gc_corrupt,
               "test hook: corrupt conv2d gradients to prove detection");
  gc->add_option("--config", gc_config, "JSON config file");

  // train
  auto* tr = app.add_subcommand("train", "toy training run");
  std::string tr_data, tr_model = "pec", tr_scale = "toy";
  std::string tr_out = "checkpoint.ckpt", tr_log = "metrics.csv", tr_config;
  int tr_epochs = 50, tr_batch = 8;
  double tr_lr = 0.001;
  std::uint64_t tr_seed = 0;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--model", tr_model, "baseline|pec");
  tr->add_option("--scale", tr_scale, "s|toy");
  tr->add_option("--epochs", tr_epochs, "training epochs");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--lr", tr_lr, "initial learning rate");
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "rng seed");
  tr->add_option("--out", tr_out, "checkpoint path");
  tr->add_option("--log", tr_log, "metrics CSV path");
  tr->add_option("--config", tr_config, "JSON config file");

  // eval
  auto* ev = app.add_subcommand("eval", "detection metrics on a split");
  std::string ev_data, ev_ckpt, ev_split = "test", ev_report, ev_config;
  int ev_threads = 1;
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--split", ev_split, "train|val|test");
  ev->add_option("--threads", ev_threads, "parallel image fan-out");
  ev->add_option("--report", ev_report, "directory for CSV/JSON reports");
  ev->add_option("--config", ev_config, "JSON config file");

  // bench
  auto* be = app.add_subcommand("bench", "FPS measurement");
  std::string be_ckpt, be_config;
  int be_images = 100, be_size = 64, be_warmup = 1, be_reps = 3;
  double be_fake = 0.0;
  std::uint64_t be_seed = 0;
  be->add_option("--checkpoint", be_ckpt, "checkpoint path")->required();
  be->add_option("--images", be_images, "images per repetition");
  be->add_option("--size", be_size, "image size");
  be->add_option("--fake-timer-step", be_fake,
                 "test hook: injected elapsed seconds per timed repetition");
  be->add_option("--warmup", be_warmup, "untimed warm-up passes");
  be->add_option("--reps", be_reps, "timed repetitions");
  auto* be_seed_opt = be->add_option("--seed", be_seed, "rng seed");
  be->add_option("--config", be_config, "JSON config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      apply_config_file(gen, gen_config);
      return cmd_gen_data(gen_out, gen_images, gen_size,
                          effective_seed(gen_seed_opt, gen_seed), gen_occlusion);
    }
    if (ana->parsed()) {
      apply_config_file(ana, ana_config);
      if (ana_format != "csv" && ana_format != "json") {
        throw UsageError(msg("unknown format '", ana_format, "'"));
      }
      return cmd_analyze(ana_model, ana_scale, ana_input, ana_format, ana_out, ana_dfl,
                         ana_running);
    }
    if (gc->parsed()) {
      apply_config_file(gc, gc_config);
      return cmd_gradcheck(gc_tol, gc_corrupt);
    }
    if (tr->parsed()) {
      apply_config_file(tr, tr_config);
      return cmd_train(tr_data, tr_model, tr_scale, tr_epochs,
                       effective_seed(tr_seed_opt, tr_seed), tr_batch, tr_lr, tr_out,
                       tr_log);
    }
    if (ev->parsed()) {
      apply_config_file(ev, ev_config);
      return cmd_eval(ev_data, ev_ckpt, ev_split, ev_threads, ev_report);
    }
    if (be->parsed()) {
      apply_config_file(be, be_config);
      return cmd_bench(be_ckpt, be_images, be_size, be_fake, be_warmup, be_reps,
                       effective_seed(be_seed_opt, be_seed));
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitVerificationFailure;
  }
  return kExitUsage;
}
