#include "pec/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace pec {

double iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = std::max(0.0, ix2 - ix1);
  const double ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double ciou(const Box& pred, const Box& gt) {
  const double i = iou(pred, gt);
  const double dx = pred.cx() - gt.cx();
  const double dy = pred.cy() - gt.cy();
  const double rho2 = dx * dx + dy * dy;
  const double ex1 = std::min(pred.x1, gt.x1);
  const double ey1 = std::min(pred.y1, gt.y1);
  const double ex2 = std::max(pred.x2, gt.x2);
  const double ey2 = std::max(pred.y2, gt.y2);
  const double c2 = (ex2 - ex1) * (ex2 - ex1) + (ey2 - ey1) * (ey2 - ey1);
  const double center_term = c2 > 0.0 ? rho2 / c2 : 0.0;
  // atan2 keeps degenerate zero-size boxes finite.
  const double ang = std::atan2(gt.width(), gt.height()) -
                     std::atan2(pred.width(), pred.height());
  const double pi = 3.14159265358979323846;
  const double v = 4.0 / (pi * pi) * ang * ang;
  const double alpha = v > 0.0 ? v / ((1.0 - i) + v) : 0.0;
  return i - center_term - alpha * v;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, const EvalConfig& cfg) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].class_id < dets[b].class_id;  // then insertion order (stable)
  });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id != d.class_id || k.image_id != d.image_id) continue;
      if (iou(k.box, d.box) > cfg.nms_iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

namespace {

// Shared greedy matcher: detections in descending score order claim the
// unmatched same-image ground truth with highest IoU >= threshold (ties by
// lower ground-truth index). Returns a TP flag per sorted detection.
struct MatchOutcome {
  std::vector<std::size_t> order;  // detection indices, score descending
  std::vector<char> is_tp;
  int total_gt = 0;
};

MatchOutcome greedy_match(const std::vector<Detection>& dets,
                          const std::vector<GroundTruth>& gts, int class_id,
                          double match_iou) {
  MatchOutcome out;
  std::vector<std::size_t> gt_idx;
  for (std::size_t i = 0; i < gts.size(); ++i)
    if (gts[i].class_id == class_id) gt_idx.push_back(i);
  out.total_gt = static_cast<int>(gt_idx.size());

  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].class_id == class_id) out.order.push_back(i);
  std::stable_sort(out.order.begin(), out.order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<char> matched(gt_idx.size(), 0);
  out.is_tp.assign(out.order.size(), 0);
  for (std::size_t k = 0; k < out.order.size(); ++k) {
    const Detection& d = dets[out.order[k]];
    double best = match_iou;
    std::ptrdiff_t best_g = -1;
    for (std::size_t g = 0; g < gt_idx.size(); ++g) {
      if (matched[g]) continue;
      const GroundTruth& gt = gts[gt_idx[g]];
      if (gt.image_id != d.image_id) continue;
      const double ov = iou(d.box, gt.box);
      if (ov >= best && (best_g < 0 || ov > best)) {
        best = ov;
        best_g = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (best_g >= 0) {
      matched[static_cast<std::size_t>(best_g)] = 1;
      out.is_tp[k] = 1;
    }
  }
  return out;
}

}  // namespace

PrCurve pr_curve(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                 int class_id, double match_iou) {
  const MatchOutcome m = greedy_match(dets, gts, class_id, match_iou);
  PrCurve curve;
  if (m.order.empty()) return curve;  // empty curve (with or without GT)
  if (m.total_gt == 0) curve.recall_undefined = true;
  int tp = 0, fp = 0;
  for (std::size_t k = 0; k < m.order.size(); ++k) {
    m.is_tp[k] ? ++tp : ++fp;
    curve.precision.push_back(static_cast<double>(tp) / (tp + fp));
    curve.recall.push_back(m.total_gt > 0 ? static_cast<double>(tp) / m.total_gt : 0.0);
  }
  return curve;
}

ApResult average_precision(const PrCurve& curve, int grid_points) {
  ApResult res;
  if (curve.precision.empty()) {
    res.empty_curve = true;
    return res;
  }
  double acc = 0.0;
  for (int g = 0; g < grid_points; ++g) {
    const double r = static_cast<double>(g) / (grid_points - 1);
    double best = 0.0;
    for (std::size_t i = 0; i < curve.precision.size(); ++i) {
      if (curve.recall[i] >= r) best = std::max(best, curve.precision[i]);
    }
    acc += best;
  }
  res.value = acc / grid_points;
  return res;
}

MapResult mean_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                  const EvalConfig& cfg) {
  std::set<int> gt_classes;
  for (const auto& g : gts) gt_classes.insert(g.class_id);
  if (gt_classes.empty()) throw ConfigError("mean_ap needs at least one ground-truth class");

  std::set<int> det_only;
  for (const auto& d : dets)
    if (!gt_classes.count(d.class_id)) det_only.insert(d.class_id);

  MapResult res;
  res.absent_classes.assign(det_only.begin(), det_only.end());
  for (int cls : gt_classes) {
    ClassAp row;
    row.class_id = cls;
    row.ap50 =
        average_precision(pr_curve(dets, gts, cls, 0.5), cfg.ap_grid_points).value;
    double acc = 0.0;
    for (double thr : cfg.map_sweep) {
      acc += average_precision(pr_curve(dets, gts, cls, thr), cfg.ap_grid_points).value;
    }
    row.ap5095 = acc / static_cast<double>(cfg.map_sweep.size());
    res.per_class.push_back(row);
    res.map50 += row.ap50;
    res.map5095 += row.ap5095;
  }
  res.map50 /= static_cast<double>(res.per_class.size());
  res.map5095 /= static_cast<double>(res.per_class.size());
  return res;
}

PrSummary precision_recall(const std::vector<Detection>& dets,
                           const std::vector<GroundTruth>& gts, const EvalConfig& cfg) {
  std::set<int> gt_classes;
  for (const auto& g : gts) gt_classes.insert(g.class_id);
  PrSummary sum;
  if (gt_classes.empty()) return sum;
  for (int cls : gt_classes) {
    const PrCurve c = pr_curve(dets, gts, cls, cfg.match_iou_threshold);
    double best_f1 = -1.0, bp = 0.0, br = 0.0;
    for (std::size_t i = 0; i < c.precision.size(); ++i) {
      const double p = c.precision[i], r = c.recall[i];
      const double f1 = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
      if (f1 > best_f1) {
        best_f1 = f1;
        bp = p;
        br = r;
      }
    }
    sum.precision += bp;
    sum.recall += br;
  }
  sum.precision /= static_cast<double>(gt_classes.size());
  sum.recall /= static_cast<double>(gt_classes.size());
  return sum;
}

double SteadyClock::now() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

FpsResult fps_benchmark(const std::function<void(int)>& pass, int num_images, Clock& clock,
                        int warmup, int reps) {
  if (num_images < 1) throw ConfigError("fps benchmark needs at least one image");
  for (int w = 0; w < warmup; ++w) pass(std::min(w, num_images - 1));
  FpsResult res;
  for (int r = 0; r < reps; ++r) {
    const double t0 = clock.now();
    for (int i = 0; i < num_images; ++i) pass(i);
    const double elapsed = clock.now() - t0;
    if (elapsed <= 0.0) {
      throw ConfigError("timer resolution too coarse: zero elapsed time");
    }
    res.per_rep.push_back(static_cast<double>(num_images) / elapsed);
  }
  for (double f : res.per_rep) res.fps_mean += f;
  res.fps_mean /= static_cast<double>(res.per_rep.size());
  double var = 0.0;
  for (double f : res.per_rep) var += (f - res.fps_mean) * (f - res.fps_mean);
  res.fps_sd = std::sqrt(var / static_cast<double>(res.per_rep.size()));
  return res;
}

}  // namespace pec
