#include "pec/train.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

#include "json.hpp"

namespace pec {

void sgd_step(WeightStore<float>& store, const SgdConfig& cfg, SgdState& state) {
  for (auto& e : store.entries()) {
    if (!e.trainable || e.tensor.grad.empty()) continue;
    auto& vel = state[e.name];
    if (vel.size() != e.tensor.data.size()) vel.assign(e.tensor.data.size(), 0.0f);
    const float lr = static_cast<float>(cfg.learning_rate);
    const float mom = static_cast<float>(cfg.momentum);
    for (std::size_t i = 0; i < vel.size(); ++i) {
      vel[i] = mom * vel[i] + e.tensor.grad[i];
      e.tensor.data[i] -= lr * vel[i];
    }
  }
}

std::string metrics_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,box_loss,cls_loss,dfl_loss,total,val_map50,val_map5095\n";
  char buf[192];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", e.epoch,
                  e.box_loss, e.cls_loss, e.dfl_loss, e.total, e.val_map50, e.val_map5095);
    out += buf;
  }
  return out;
}

namespace {

struct Sample {
  TensorF image;
  std::vector<GroundTruth> gts;  // image_id unset; pixel coordinates
};

std::vector<Sample> load_split(const DatasetIndex& data, Split split) {
  std::vector<Sample> out;
  for (const auto& item : data.of(split)) {
    Sample s;
    s.image = load_ppm_file(item.image_path);
    std::ifstream is(item.label_path);
    if (!is) throw IoError(msg("cannot open labels: ", item.label_path));
    std::string text((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
    s.gts = labels_to_ground_truth(parse_labels(text), s.image.shape.w, s.image.shape.h, 0);
    out.push_back(std::move(s));
  }
  return out;
}

TensorF stack_images(const std::vector<Sample>& samples, const std::vector<int>& idx,
                     std::size_t begin, std::size_t end) {
  const Shape one = samples[static_cast<std::size_t>(idx[begin])].image.shape;
  TensorF batch(Shape{static_cast<int>(end - begin), one.c, one.h, one.w});
  for (std::size_t i = begin; i < end; ++i) {
    const TensorF& img = samples[static_cast<std::size_t>(idx[i])].image;
    if (!(img.shape == one)) throw DimensionError("dataset images disagree on size");
    std::copy(img.data.begin(), img.data.end(),
              batch.data.begin() + static_cast<std::ptrdiff_t>(i - begin) * one.count());
  }
  return batch;
}

}  // namespace

EvalReport evaluate_model(const ModelGraph& graph, WeightStore<float>& store,
                          const DatasetIndex& data, Split split, const EvalConfig& cfg,
                          int threads) {
  const auto items = data.of(split);
  if (items.empty()) throw UsageError(msg("split '", split_name(split), "' is empty"));

  std::vector<std::vector<Detection>> dets_per_image(items.size());
  std::vector<std::vector<GroundTruth>> gts_per_image(items.size());

  auto run_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      TensorF image = load_ppm_file(items[i].image_path);
      std::ifstream is(items[i].label_path);
      std::string text((std::istreambuf_iterator<char>(is)),
                       std::istreambuf_iterator<char>());
      gts_per_image[i] = labels_to_ground_truth(parse_labels(text), image.shape.w,
                                                image.shape.h, static_cast<int>(i));
      Tape<float> tape;
      BlockCtx<float> ctx{tape, store, false};
      auto ho = forward_model(graph, ctx, tape.leaf(&image));
      auto dets = decode_head(ho, cfg.confidence_floor, static_cast<int>(i));
      dets_per_image[i] = nms(dets, cfg);
    }
  };

  if (threads <= 1) {
    run_range(0, items.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (items.size() + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const std::size_t lo = static_cast<std::size_t>(t) * chunk;
      if (lo >= items.size()) break;
      pool.emplace_back(run_range, lo, std::min(items.size(), lo + chunk));
    }
    for (auto& th : pool) th.join();
  }

  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
  for (std::size_t i = 0; i < items.size(); ++i) {
    dets.insert(dets.end(), dets_per_image[i].begin(), dets_per_image[i].end());
    gts.insert(gts.end(), gts_per_image[i].begin(), gts_per_image[i].end());
  }
  EvalReport rep;
  rep.map = mean_ap(dets, gts, cfg);
  rep.pr = precision_recall(dets, gts, cfg);
  for (const auto& row : rep.map.per_class) {
    rep.curves.emplace_back(row.class_id,
                            pr_curve(dets, gts, row.class_id, cfg.match_iou_threshold));
  }
  rep.images = static_cast<int>(items.size());
  return rep;
}

TrainResult train(const ModelGraph& graph, const DatasetIndex& data,
                  const TrainConfig& cfg, const std::string& checkpoint_path,
                  const std::string& log_path) {
  std::vector<Sample> train_set = load_split(data, Split::Train);
  if (train_set.empty()) throw UsageError("training split is empty");
  const bool have_val = !data.of(Split::Val).empty();

  WeightStore<float> store;
  Rng rng(cfg.seed);
  init_model_weights(graph, store, rng);

  SgdConfig sgd{cfg.learning_rate, cfg.momentum};
  SgdState state;
  TrainResult result;
  result.checkpoint_path = checkpoint_path;

  const auto meta = [&](int epoch, double map50) {
    nlohmann::json j;
    j["model"] = graph.model;
    j["scale"] = graph.scale;
    j["num_classes"] = graph.num_classes;
    j["seed"] = cfg.seed;
    j["epoch"] = epoch;
    j["val_map50"] = map50;
    return j.dump();
  };

  std::vector<int> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng(cfg.seed + 1000ull * static_cast<std::uint64_t>(epoch) + 1);
    shuffle(order, epoch_rng);

    double sum_box = 0.0, sum_cls = 0.0, sum_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      TensorF batch = stack_images(train_set, order, begin, end);
      std::vector<std::vector<GroundTruth>> gts;
      for (std::size_t i = begin; i < end; ++i)
        gts.push_back(train_set[static_cast<std::size_t>(order[i])].gts);

      Tape<float> tape;
      BlockCtx<float> ctx{tape, store, true};
      auto ho = forward_model(graph, ctx, tape.leaf(&batch));
      auto targets = assign_targets(gts, ho.strides, batch.shape.h, batch.shape.w);
      auto loss = compute_loss(tape, ho, targets, graph.num_classes,
                               static_cast<float>(cfg.box_weight),
                               static_cast<float>(cfg.cls_weight));
      if (!std::isfinite(loss.total_value)) {
        throw ConfigError(msg("non-finite loss at epoch ", epoch));
      }
      store.zero_grad();
      tape.backward(loss.total);
      sgd_step(store, sgd, state);

      sum_box += loss.box_loss;
      sum_cls += loss.cls_loss;
      sum_total += loss.total_value;
      ++batches;
    }

    EpochLog log;
    log.epoch = epoch;
    log.box_loss = sum_box / static_cast<double>(batches);
    log.cls_loss = sum_cls / static_cast<double>(batches);
    log.total = sum_total / static_cast<double>(batches);
    if (have_val) {
      const EvalReport rep = evaluate_model(graph, store, data, Split::Val, cfg.eval);
      log.val_map50 = rep.map.map50;
      log.val_map5095 = rep.map.map5095;
    }
    result.log.push_back(log);

    if (log.val_map50 > result.best_map50 || result.best_epoch < 0) {
      result.best_map50 = log.val_map50;
      result.best_epoch = epoch;
      if (!checkpoint_path.empty()) {
        save_checkpoint(checkpoint_path, store, meta(epoch, log.val_map50));
      }
    }
  }

  if (!log_path.empty()) {
    std::ofstream os(log_path);
    if (!os) throw IoError(msg("cannot write metrics log: ", log_path));
    os << metrics_csv(result.log);
  }
  return result;
}

}  // namespace pec
