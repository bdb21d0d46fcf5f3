#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "pec/data.hpp"
#include "pec/executor.hpp"

namespace pec {

struct TrainConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  int batch_size = 8;
  int epochs = 50;
  std::uint64_t seed = 0;
  // Balanced so neither term dominates: the classification term is a mean
  // over every cell and class, which is an order of magnitude smaller than
  // the positives-only box term.
  double box_weight = 3.0;
  double cls_weight = 10.0;
  EvalConfig eval;
};

// ---------------------------------------------------------------------------
// Center-based target assignment. A ground truth lands on the scale whose
// stride is the largest one not exceeding max(w, h) / 2 (clamped to the
// available scales); on that scale every cell whose center lies inside the
// box is positive, with the smallest-area box winning contested cells.
// ---------------------------------------------------------------------------

struct CellTarget {
  int n = 0;  // batch index
  int y = 0;
  int x = 0;
  int class_id = 0;
  Box box;  // pixels
};

struct ScaleTargets {
  int stride = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<CellTarget> positives;
};

inline int select_scale_for(double box_w, double box_h, const std::array<int, 3>& strides) {
  const double half = std::max(box_w, box_h) / 2.0;
  int sel = 0;
  for (int i = 0; i < 3; ++i) {
    if (strides[static_cast<std::size_t>(i)] <= half) sel = i;
  }
  return sel;
}

inline std::array<ScaleTargets, 3> assign_targets(
    const std::vector<std::vector<GroundTruth>>& gts_per_image,
    const std::array<int, 3>& strides, int image_h, int image_w) {
  std::array<ScaleTargets, 3> out;
  for (int s = 0; s < 3; ++s) {
    auto& st = out[static_cast<std::size_t>(s)];
    st.stride = strides[static_cast<std::size_t>(s)];
    st.grid_h = image_h / st.stride;
    st.grid_w = image_w / st.stride;
  }
  for (std::size_t n = 0; n < gts_per_image.size(); ++n) {
    for (int s = 0; s < 3; ++s) {
      auto& st = out[static_cast<std::size_t>(s)];
      // best (smallest) area per cell of this image and scale
      std::vector<double> best(static_cast<std::size_t>(st.grid_h) * st.grid_w, -1.0);
      std::vector<CellTarget> cell(static_cast<std::size_t>(st.grid_h) * st.grid_w);
      for (const auto& gt : gts_per_image[n]) {
        if (select_scale_for(gt.box.width(), gt.box.height(), strides) != s) continue;
        for (int y = 0; y < st.grid_h; ++y)
          for (int x = 0; x < st.grid_w; ++x) {
            const double cx = (x + 0.5) * st.stride;
            const double cy = (y + 0.5) * st.stride;
            if (cx < gt.box.x1 || cx > gt.box.x2 || cy < gt.box.y1 || cy > gt.box.y2)
              continue;
            const std::size_t k = static_cast<std::size_t>(y) * st.grid_w + x;
            const double area = gt.box.area();
            if (best[k] < 0.0 || area < best[k]) {
              best[k] = area;
              cell[k] = CellTarget{static_cast<int>(n), y, x, gt.class_id, gt.box};
            }
          }
      }
      for (std::size_t k = 0; k < cell.size(); ++k) {
        if (best[k] >= 0.0) st.positives.push_back(cell[k]);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss: mean BCE over every cell/class plus mean (1 - CIoU) over positive
// cells, combined with configured weights.
// ---------------------------------------------------------------------------

template <typename T>
struct LossResult {
  Var<T> total;
  double box_loss = 0.0;
  double cls_loss = 0.0;
  double total_value = 0.0;
  bool no_positives = false;
};

template <typename T>
LossResult<T> compute_loss(Tape<T>& tape, const HeadOutputs<T>& ho,
                           const std::array<ScaleTargets, 3>& targets, int num_classes,
                           T w_box, T w_cls) {
  const T tiny = static_cast<T>(1e-9);
  Var<T> cls_sum;
  std::int64_t cls_count = 0;
  Var<T> box_sum;
  std::int64_t box_count = 0;
  bool have_cls = false, have_box = false;

  for (int s = 0; s < 3; ++s) {
    const auto& st = targets[static_cast<std::size_t>(s)];
    const auto& maps = ho.scales[static_cast<std::size_t>(s)];
    const Shape cs = maps.cls.value().shape;
    if (cs.c != num_classes || cs.h != st.grid_h || cs.w != st.grid_w) {
      throw DimensionError(msg("target grid ", st.grid_h, "x", st.grid_w,
                               " does not match head map ", cs.str()));
    }
    Tensor<T> cls_target(cs);
    for (const auto& p : st.positives) {
      cls_target.at(p.n, p.class_id, p.y, p.x) = T(1);
    }
    Var<T> bce = bce_with_logits(maps.cls, tape.constant(std::move(cls_target)));
    Var<T> scale_sum = sum_all(bce);
    cls_sum = have_cls ? add(cls_sum, scale_sum) : scale_sum;
    have_cls = true;
    cls_count += cs.count();

    if (st.positives.empty()) continue;
    const int k = static_cast<int>(st.positives.size());
    std::vector<CellRef> cells;
    Tensor<T> cxs(Shape{1, 1, 1, k}), cys(Shape{1, 1, 1, k});
    Tensor<T> tx1(Shape{1, 1, 1, k}), ty1(Shape{1, 1, 1, k});
    Tensor<T> tx2(Shape{1, 1, 1, k}), ty2(Shape{1, 1, 1, k});
    for (int i = 0; i < k; ++i) {
      const auto& p = st.positives[static_cast<std::size_t>(i)];
      cells.push_back(CellRef{p.n, p.y, p.x});
      cxs.data[i] = static_cast<T>((p.x + 0.5) * st.stride);
      cys.data[i] = static_cast<T>((p.y + 0.5) * st.stride);
      tx1.data[i] = static_cast<T>(p.box.x1);
      ty1.data[i] = static_cast<T>(p.box.y1);
      tx2.data[i] = static_cast<T>(p.box.x2);
      ty2.data[i] = static_cast<T>(p.box.y2);
    }
    Var<T> g = gather_cells(maps.box, cells);  // (1,4,1,K) distances, cell units
    auto d = split_channels(g, {1, 1, 1, 1});
    const T stride = static_cast<T>(st.stride);
    Var<T> vcx = tape.constant(std::move(cxs));
    Var<T> vcy = tape.constant(std::move(cys));
    Var<T> px1 = sub(vcx, mul_scalar(d[0], stride));
    Var<T> py1 = sub(vcy, mul_scalar(d[1], stride));
    Var<T> px2 = add(vcx, mul_scalar(d[2], stride));
    Var<T> py2 = add(vcy, mul_scalar(d[3], stride));
    Var<T> vtx1 = tape.constant(std::move(tx1));
    Var<T> vty1 = tape.constant(std::move(ty1));
    Var<T> vtx2 = tape.constant(std::move(tx2));
    Var<T> vty2 = tape.constant(std::move(ty2));

    Var<T> iw = maximum_scalar(sub(minimum(px2, vtx2), maximum(px1, vtx1)), T(0));
    Var<T> ih = maximum_scalar(sub(minimum(py2, vty2), maximum(py1, vty1)), T(0));
    Var<T> inter = mul(iw, ih);
    Var<T> area_p = mul(sub(px2, px1), sub(py2, py1));
    Var<T> area_t = mul(sub(vtx2, vtx1), sub(vty2, vty1));
    Var<T> uni = maximum_scalar(sub(add(area_p, area_t), inter), tiny);
    Var<T> iou_v = div(inter, uni);

    Var<T> pcx = mul_scalar(add(px1, px2), T(0.5));
    Var<T> pcy = mul_scalar(add(py1, py2), T(0.5));
    Var<T> tcx = mul_scalar(add(vtx1, vtx2), T(0.5));
    Var<T> tcy = mul_scalar(add(vty1, vty2), T(0.5));
    Var<T> ddx = sub(pcx, tcx);
    Var<T> ddy = sub(pcy, tcy);
    Var<T> rho2 = add(mul(ddx, ddx), mul(ddy, ddy));
    Var<T> ex = sub(maximum(px2, vtx2), minimum(px1, vtx1));
    Var<T> ey = sub(maximum(py2, vty2), minimum(py1, vty1));
    Var<T> c2 = maximum_scalar(add(mul(ex, ex), mul(ey, ey)), tiny);

    Var<T> pw = maximum_scalar(sub(px2, px1), tiny);
    Var<T> ph = maximum_scalar(sub(py2, py1), tiny);
    Var<T> tw = maximum_scalar(sub(vtx2, vtx1), tiny);
    Var<T> th = maximum_scalar(sub(vty2, vty1), tiny);
    Var<T> ang = sub(arctan(div(tw, th)), arctan(div(pw, ph)));
    const T four_over_pi2 = static_cast<T>(4.0 / (3.14159265358979323846 * 3.14159265358979323846));
    Var<T> v = mul_scalar(mul(ang, ang), four_over_pi2);
    // alpha = v / ((1 - iou) + v); the tiny guard keeps it finite at iou=1, v=0.
    Var<T> one_minus_iou = add_scalar(mul_scalar(iou_v, T(-1)), T(1));
    Var<T> alpha = div(v, add_scalar(add(one_minus_iou, v), tiny));
    Var<T> ciou_v = sub(sub(iou_v, div(rho2, c2)), mul(alpha, v));
    Var<T> per_box = add_scalar(mul_scalar(ciou_v, T(-1)), T(1));  // 1 - ciou
    Var<T> scale_box_sum = sum_all(per_box);
    box_sum = have_box ? add(box_sum, scale_box_sum) : scale_box_sum;
    have_box = true;
    box_count += k;
  }

  LossResult<T> res;
  Var<T> cls_mean = mul_scalar(cls_sum, T(1) / static_cast<T>(cls_count));
  res.cls_loss = static_cast<double>(cls_mean.value().data[0]);
  if (have_box) {
    Var<T> box_mean = mul_scalar(box_sum, T(1) / static_cast<T>(box_count));
    res.box_loss = static_cast<double>(box_mean.value().data[0]);
    res.total = add(mul_scalar(box_mean, w_box), mul_scalar(cls_mean, w_cls));
  } else {
    res.no_positives = true;
    res.total = mul_scalar(cls_mean, w_cls);
  }
  res.total_value = static_cast<double>(res.total.value().data[0]);
  return res;
}

// ---------------------------------------------------------------------------
// SGD with momentum: v = momentum * v + grad; w -= lr * v.
// ---------------------------------------------------------------------------

struct SgdConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
};

using SgdState = std::map<std::string, std::vector<float>>;

void sgd_step(WeightStore<float>& store, const SgdConfig& cfg, SgdState& state);

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double box_loss = 0.0;
  double cls_loss = 0.0;
  double dfl_loss = 0.0;  // always zero: distribution focal loss not implemented
  double total = 0.0;
  double val_map50 = 0.0;
  double val_map5095 = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  double best_map50 = 0.0;
  int best_epoch = -1;
  std::string checkpoint_path;
};

std::string metrics_csv(const std::vector<EpochLog>& log);

TrainResult train(const ModelGraph& graph, const DatasetIndex& data,
                  const TrainConfig& cfg, const std::string& checkpoint_path,
                  const std::string& log_path = "");

// Runs the detector over one split and reports detection metrics.
struct EvalReport {
  MapResult map;
  PrSummary pr;
  std::vector<std::pair<int, PrCurve>> curves;  // per class, at match IoU
  int images = 0;
};

EvalReport evaluate_model(const ModelGraph& graph, WeightStore<float>& store,
                          const DatasetIndex& data, Split split, const EvalConfig& cfg,
                          int threads = 1);

}  // namespace pec
