#pragma once

#include <array>
#include <map>

#include "pec/blocks.hpp"
#include "pec/eval.hpp"
#include "pec/graph.hpp"

namespace pec {

namespace detail {

inline CbsConfig cbs_cfg(const LayerSpec& l, int in_c) {
  return CbsConfig{in_c, l.out_channels, l.kernel, l.stride, l.groups};
}
inline C2FConfig c2f_cfg(const LayerSpec& l, int in_c) {
  C2FConfig cfg;
  cfg.in_c = in_c;
  cfg.out_c = l.out_channels;
  cfg.n = l.repeats;
  cfg.shortcut = l.shortcut;
  cfg.variant = l.kind == "c2f_faster_ema" ? C2FConfig::Variant::FasterEma
                                           : C2FConfig::Variant::Original;
  cfg.ema_groups = l.ema_groups;
  return cfg;
}
inline SppfConfig sppf_cfg(const LayerSpec& l, int in_c) {
  SppfConfig cfg;
  cfg.in_c = in_c;
  cfg.out_c = l.out_channels;
  cfg.with_cpca = l.kind == "sppf_cpca";
  cfg.cpca_reduction = l.cpca_reduction;
  return cfg;
}
inline HeadConfig head_cfg(const ModelGraph& g, const LayerSpec& l,
                           const std::map<std::string, int>& ch) {
  HeadConfig cfg;
  for (int i = 0; i < 3; ++i) cfg.in_c[static_cast<std::size_t>(i)] = ch.at(l.inputs[static_cast<std::size_t>(i)]);
  cfg.num_classes = l.num_classes > 0 ? l.num_classes : g.num_classes;
  cfg.reg_max = l.reg_max;
  return cfg;
}

}  // namespace detail

// Allocates every weight the graph needs, in layer order, deterministically.
template <typename T>
void init_model_weights(const ModelGraph& g, WeightStore<T>& store, Rng& rng) {
  const auto ch = g.resolve_channels();
  for (const auto& l : g.layers) {
    const int in_c = ch.at(l.inputs[0]);
    if (l.kind == "cbs" || l.kind == "downsample") {
      cbs_init(store, l.id, detail::cbs_cfg(l, in_c), rng);
    } else if (l.kind == "c2f" || l.kind == "c2f_faster_ema") {
      c2f_init(store, l.id, detail::c2f_cfg(l, in_c), rng);
    } else if (l.kind == "sppf" || l.kind == "sppf_cpca") {
      sppf_init(store, l.id, detail::sppf_cfg(l, in_c), rng);
    } else if (l.kind == "fuse") {
      Tensor<T> w(Shape{1, 1, 1, static_cast<int>(l.fuse_weights.size())});
      for (std::size_t i = 0; i < l.fuse_weights.size(); ++i)
        w.data[i] = static_cast<T>(l.fuse_weights[i]);
      store.add(l.id + ".w", std::move(w));
    } else if (l.kind == "head") {
      head_init(store, l.id, detail::head_cfg(g, l, ch), rng);
    }
    // upsample / concat carry no parameters
  }
}

template <typename T>
struct HeadOutputs {
  std::array<HeadMaps<T>, 3> scales;
  std::array<int, 3> strides;
  int image_h = 0;
  int image_w = 0;
};

template <typename T>
HeadOutputs<T> forward_model(const ModelGraph& g, BlockCtx<T>& ctx, Var<T> image) {
  const Shape in_shape = image.value().shape;
  if (in_shape.c != 3) {
    throw DimensionError(msg("model input must have 3 channels, got ", in_shape.c));
  }
  if (in_shape.h % 32 != 0 || in_shape.w % 32 != 0) {
    throw DimensionError(msg("model input extents must be divisible by 32, got ",
                             in_shape.str()));
  }
  const auto ch = g.resolve_channels();
  std::map<std::string, Var<T>> values;
  values.emplace("image", image);
  HeadOutputs<T> out;
  out.strides = g.strides;
  out.image_h = in_shape.h;
  out.image_w = in_shape.w;
  for (const auto& l : g.layers) {
    const Var<T> x0 = values.at(l.inputs[0]);
    const int in_c = ch.at(l.inputs[0]);
    if (l.kind == "cbs" || l.kind == "downsample") {
      values.emplace(l.id, cbs_forward(ctx, x0, l.id, detail::cbs_cfg(l, in_c)));
    } else if (l.kind == "c2f" || l.kind == "c2f_faster_ema") {
      values.emplace(l.id, c2f_forward(ctx, x0, l.id, detail::c2f_cfg(l, in_c)));
    } else if (l.kind == "sppf" || l.kind == "sppf_cpca") {
      values.emplace(l.id, sppf_forward(ctx, x0, l.id, detail::sppf_cfg(l, in_c)));
    } else if (l.kind == "upsample") {
      values.emplace(l.id, resize_nearest_up2(x0));
    } else if (l.kind == "concat") {
      std::vector<Var<T>> xs;
      for (const auto& in : l.inputs) xs.push_back(values.at(in));
      values.emplace(l.id, concat_channels(xs));
    } else if (l.kind == "fuse") {
      std::vector<Var<T>> xs;
      for (const auto& in : l.inputs) xs.push_back(values.at(in));
      values.emplace(l.id,
                     bifpn_fuse(xs, ctx.weight(l.id + ".w"), static_cast<T>(l.fuse_eps)));
    } else if (l.kind == "head") {
      const HeadConfig hc = detail::head_cfg(g, l, ch);
      for (int i = 0; i < 3; ++i) {
        out.scales[static_cast<std::size_t>(i)] =
            head_forward_scale(ctx, values.at(l.inputs[static_cast<std::size_t>(i)]), l.id, i, hc);
      }
    } else {
      throw ConfigError(msg("unknown layer kind '", l.kind, "'"));
    }
  }
  return out;
}

// Decodes per-cell predictions into detections. Box maps hold distances
// (l, t, r, b) in cell units; boxes are scaled by the stride and clipped
// to the image. Cells whose best class score falls below the threshold
// are dropped.
template <typename T>
std::vector<Detection> decode_head(const HeadOutputs<T>& ho, double conf_threshold,
                                   int image_id = 0) {
  std::vector<Detection> dets;
  for (int s = 0; s < 3; ++s) {
    const Tensor<T>& box = ho.scales[static_cast<std::size_t>(s)].box.value();
    const Tensor<T>& cls = ho.scales[static_cast<std::size_t>(s)].cls.value();
    const int stride = ho.strides[static_cast<std::size_t>(s)];
    const Shape bs = box.shape;
    for (int n = 0; n < bs.n; ++n)
      for (int y = 0; y < bs.h; ++y)
        for (int x = 0; x < bs.w; ++x) {
          int best_c = 0;
          double best_s = -1.0;
          for (int c = 0; c < cls.shape.c; ++c) {
            const double sc = sigmoid_val(static_cast<double>(cls.at(n, c, y, x)));
            if (sc > best_s) {
              best_s = sc;
              best_c = c;
            }
          }
          if (best_s < conf_threshold) continue;
          const double cx = x + 0.5, cy = y + 0.5;
          const double l = std::max(0.0, static_cast<double>(box.at(n, 0, y, x)));
          const double t = std::max(0.0, static_cast<double>(box.at(n, 1, y, x)));
          const double r = std::max(0.0, static_cast<double>(box.at(n, 2, y, x)));
          const double b = std::max(0.0, static_cast<double>(box.at(n, 3, y, x)));
          Detection d;
          d.box.x1 = std::clamp((cx - l) * stride, 0.0, static_cast<double>(ho.image_w));
          d.box.y1 = std::clamp((cy - t) * stride, 0.0, static_cast<double>(ho.image_h));
          d.box.x2 = std::clamp((cx + r) * stride, 0.0, static_cast<double>(ho.image_w));
          d.box.y2 = std::clamp((cy + b) * stride, 0.0, static_cast<double>(ho.image_h));
          d.class_id = best_c;
          d.score = best_s;
          d.image_id = image_id + n;
          dets.push_back(d);
        }
  }
  return dets;
}

}  // namespace pec
