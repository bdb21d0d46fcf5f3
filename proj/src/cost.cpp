#include "pec/cost.hpp"

#include <cmath>
#include <cstdio>
#include <map>

#include "json.hpp"

namespace pec {

ConvCost conv_cost(std::int64_t h_out, std::int64_t w_out, std::int64_t cin,
                   std::int64_t cout, std::int64_t k, std::int64_t groups, bool has_bias) {
  if (h_out < 1 || w_out < 1 || cin < 1 || cout < 1 || k < 1 || groups < 1) {
    throw ConfigError("conv cost needs positive extents");
  }
  if (cin % groups != 0 || cout % groups != 0) {
    throw ConfigError(msg("groups=", groups, " must divide cin=", cin, " and cout=", cout));
  }
  ConvCost c;
  c.params = k * k * (cin / groups) * cout + (has_bias ? cout : 0);
  c.macs = h_out * w_out * k * k * (cin / groups) * cout;
  return c;
}

PConvCost pconv_cost(std::int64_t h, std::int64_t w, std::int64_t c, double ratio,
                     std::int64_t k) {
  PConvCost out;
  out.cp = static_cast<std::int64_t>(std::llround(c * ratio));
  if (out.cp < 1 || out.cp > c) {
    throw ConfigError(msg("partial conv slice ", out.cp, " outside [1, ", c, "]"));
  }
  out.macs = h * w * k * k * out.cp * out.cp;
  out.mem_access = h * w * 2 * out.cp + k * k * out.cp * out.cp;
  out.mac_ratio = Rational(out.cp * out.cp, c * c);
  out.mem_dominant_ratio = Rational(out.cp, c);
  out.mem_full_ratio =
      Rational(out.mem_access, h * w * 2 * c + k * k * c * c);
  return out;
}

namespace {

// Accumulates the conv-shaped pieces of one layer. Memory access follows
// the partial-convolution accounting: read the touched input channels
// once, write the output once, read the weights once. Elementwise ops,
// pooling and normalization are not charged.
struct Acc {
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t mem = 0;

  void conv(std::int64_t h_in, std::int64_t w_in, std::int64_t h_out, std::int64_t w_out,
            std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t groups,
            bool bias) {
    const ConvCost c = conv_cost(h_out, w_out, cin, cout, k, groups, bias);
    params += c.params;
    macs += c.macs;
    mem += h_in * w_in * cin + h_out * w_out * cout + c.params;
  }
  // Strip depthwise: kh x kw per-channel kernel, same padding.
  void dwconv(std::int64_t h, std::int64_t w, std::int64_t c, std::int64_t kh,
              std::int64_t kw, bool bias) {
    params += kh * kw * c + (bias ? c : 0);
    macs += h * w * kh * kw * c;
    mem += h * w * c * 2 + kh * kw * c + (bias ? c : 0);
  }
  void bn(std::int64_t c, bool running) {
    params += 2 * c + (running ? 2 * c : 0);
  }
  void raw(std::int64_t p, std::int64_t m, std::int64_t mm) {
    params += p;
    macs += m;
    mem += mm;
  }
};

struct Extent {
  std::int64_t h = 0;
  std::int64_t w = 0;
};

void add_cbs(Acc& a, std::int64_t h_in, std::int64_t w_in, std::int64_t h_out,
             std::int64_t w_out, int cin, int cout, int k, int groups, bool running) {
  a.conv(h_in, w_in, h_out, w_out, cin, cout, k, groups, false);
  a.bn(cout, running);
}

void add_ema(Acc& a, std::int64_t h, std::int64_t w, int channels, int groups,
             bool running) {
  (void)running;
  const int cg = channels / groups;
  // shared 1x1 conv over the stacked (H+W) axis, per folded group
  a.conv(h + w, 1, h + w, 1, cg, cg, 1, 1, true);
  a.raw(0, (groups - 1) * (h + w) * cg * cg, 0);  // remaining folded groups
  // 3x3 path per folded group
  a.conv(h, w, h, w, cg, cg, 3, 1, true);
  a.raw(0, (groups - 1) * h * w * 9 * cg * cg, 0);
  a.raw(2 * cg, 0, 0);  // group-norm affine
}

void add_cpca(Acc& a, std::int64_t h, std::int64_t w, int channels, int reduction,
              bool running) {
  (void)running;
  const int hid = std::max(channels / reduction, 4);
  // shared MLP evaluated on the avg and max descriptors
  a.conv(1, 1, 1, 1, channels, hid, 1, 1, true);
  a.conv(1, 1, 1, 1, hid, channels, 1, 1, true);
  a.raw(0, static_cast<std::int64_t>(channels) * hid + static_cast<std::int64_t>(hid) * channels, 0);
  a.dwconv(h, w, channels, 5, 5, true);
  a.dwconv(h, w, channels, 1, 7, true);
  a.dwconv(h, w, channels, 7, 1, true);
  a.dwconv(h, w, channels, 1, 11, true);
  a.dwconv(h, w, channels, 11, 1, true);
  a.dwconv(h, w, channels, 1, 21, true);
  a.dwconv(h, w, channels, 21, 1, true);
  a.conv(h, w, h, w, channels, channels, 1, 1, true);  // channel mixing
}

void add_faster_ema_block(Acc& a, std::int64_t h, std::int64_t w, int channels,
                          int ema_groups, bool running) {
  const PConvCost pc = pconv_cost(h, w, channels, 0.25, 3);
  a.raw(9 * pc.cp * pc.cp, pc.macs, pc.mem_access);
  add_cbs(a, h, w, h, w, channels, 2 * channels, 1, 1, running);
  a.conv(h, w, h, w, 2 * channels, channels, 1, 1, true);
  add_ema(a, h, w, channels, ema_groups, running);
}

void add_c2f(Acc& a, std::int64_t h, std::int64_t w, const LayerSpec& l, int in_c,
             bool running) {
  const int hid = l.out_channels / 2;
  add_cbs(a, h, w, h, w, in_c, 2 * hid, 1, 1, running);
  for (int i = 0; i < l.repeats; ++i) {
    if (l.kind == "c2f_faster_ema") {
      add_faster_ema_block(a, h, w, hid, l.ema_groups, running);
    } else {
      add_cbs(a, h, w, h, w, hid, hid, 3, 1, running);
      add_cbs(a, h, w, h, w, hid, hid, 3, 1, running);
    }
  }
  add_cbs(a, h, w, h, w, (2 + l.repeats) * hid, l.out_channels, 1, 1, running);
}

void add_sppf(Acc& a, std::int64_t h, std::int64_t w, const LayerSpec& l, int in_c,
              bool running) {
  const int hid = in_c / 2;
  add_cbs(a, h, w, h, w, in_c, hid, 1, 1, running);
  if (l.kind == "sppf_cpca") add_cpca(a, h, w, 4 * hid, l.cpca_reduction, running);
  add_cbs(a, h, w, h, w, 4 * hid, l.out_channels, 1, 1, running);
}

void add_head(Acc& a, const std::array<Extent, 3>& grids, const std::array<int, 3>& in_c,
              int num_classes, int reg_max, bool dfl, bool running) {
  const int c2 = std::max({16, in_c[0] / 4, 4 * reg_max});
  const int c3 = std::max(in_c[0], std::min(num_classes, 100));
  for (int i = 0; i < 3; ++i) {
    const auto [h, w] = grids[static_cast<std::size_t>(i)];
    add_cbs(a, h, w, h, w, in_c[static_cast<std::size_t>(i)], c2, 3, 1, running);
    add_cbs(a, h, w, h, w, c2, c2, 3, 1, running);
    a.conv(h, w, h, w, c2, dfl ? 4 * reg_max : 4, 1, 1, true);
    add_cbs(a, h, w, h, w, in_c[static_cast<std::size_t>(i)], c3, 3, 1, running);
    add_cbs(a, h, w, h, w, c3, c3, 3, 1, running);
    a.conv(h, w, h, w, c3, num_classes, 1, 1, true);
    if (dfl) a.conv(h, w, h, w, reg_max, 1, 1, 1, false);  // fixed projection over 4 sides
  }
}

}  // namespace

CostReport analyze_graph(const ModelGraph& g, int input_h, int input_w,
                         const CostOptions& opts) {
  if (input_h % 32 != 0 || input_w % 32 != 0) {
    throw ConfigError(msg("input extents must be divisible by 32, got ", input_h, "x",
                          input_w));
  }
  const auto channels = g.resolve_channels();
  std::map<std::string, Extent> extents;
  extents["image"] = {input_h, input_w};

  CostReport rep;
  rep.model = g.model;
  rep.scale = g.scale;
  rep.input_h = input_h;
  rep.input_w = input_w;
  rep.options = opts;

  const bool running = opts.count_running_stats;
  for (const auto& l : g.layers) {
    const Extent in = extents.at(l.inputs[0]);
    const int in_c = channels.at(l.inputs[0]);
    Acc a;
    Extent out = in;
    if (l.kind == "cbs" || l.kind == "downsample") {
      out = Extent{l.stride == 2 ? in.h / 2 : in.h, l.stride == 2 ? in.w / 2 : in.w};
      add_cbs(a, in.h, in.w, out.h, out.w, in_c, l.out_channels, l.kernel, l.groups,
              running);
    } else if (l.kind == "c2f" || l.kind == "c2f_faster_ema") {
      add_c2f(a, in.h, in.w, l, in_c, running);
    } else if (l.kind == "sppf" || l.kind == "sppf_cpca") {
      add_sppf(a, in.h, in.w, l, in_c, running);
    } else if (l.kind == "upsample") {
      out = Extent{in.h * 2, in.w * 2};
    } else if (l.kind == "concat") {
      for (const auto& id : l.inputs) {
        const Extent e = extents.at(id);
        if (e.h != in.h || e.w != in.w) {
          throw ConfigError(msg("concat '", l.id, "' inputs disagree on extent"));
        }
      }
    } else if (l.kind == "fuse") {
      const int m = static_cast<int>(l.inputs.size());
      a.raw(m, static_cast<std::int64_t>(m) * in.h * in.w * in_c,
            static_cast<std::int64_t>(m + 1) * in.h * in.w * in_c + m);
    } else if (l.kind == "head") {
      std::array<Extent, 3> grids;
      std::array<int, 3> hc{};
      for (int i = 0; i < 3; ++i) {
        grids[static_cast<std::size_t>(i)] = extents.at(l.inputs[static_cast<std::size_t>(i)]);
        hc[static_cast<std::size_t>(i)] = channels.at(l.inputs[static_cast<std::size_t>(i)]);
      }
      add_head(a, grids, hc, l.num_classes > 0 ? l.num_classes : g.num_classes, l.reg_max,
               opts.dfl_style_head, running);
    } else {
      throw ConfigError(msg("unknown layer kind '", l.kind, "'"));
    }
    extents[l.id] = out;
    rep.rows.push_back(CostRow{l.id, l.kind, a.params, a.macs, a.mem});
    rep.total_params += a.params;
    rep.total_macs += a.macs;
    rep.total_mem_access += a.mem;
  }
  return rep;
}

std::string cost_report_csv(const CostReport& r) {
  std::string out = "id,kind,params,macs,mem_access\n";
  char buf[256];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%lld,%lld,%lld\n", row.id.c_str(),
                  row.kind.c_str(), static_cast<long long>(row.params),
                  static_cast<long long>(row.macs), static_cast<long long>(row.mem_access));
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "total,,%lld,%lld,%lld\n",
                static_cast<long long>(r.total_params), static_cast<long long>(r.total_macs),
                static_cast<long long>(r.total_mem_access));
  out += buf;
  return out;
}

std::string cost_report_json(const CostReport& r) {
  nlohmann::json root;
  root["model"] = r.model;
  root["scale"] = r.scale;
  root["input_size"] = {r.input_h, r.input_w};
  root["options"] = {{"dfl_style_head", r.options.dfl_style_head},
                     {"count_running_stats", r.options.count_running_stats}};
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"id", row.id},
                    {"kind", row.kind},
                    {"params", row.params},
                    {"macs", row.macs},
                    {"mem_access", row.mem_access}});
  }
  root["rows"] = std::move(rows);
  root["totals"] = {{"params", r.total_params},
                    {"macs", r.total_macs},
                    {"mem_access", r.total_mem_access}};
  return root.dump(2) + "\n";
}

}  // namespace pec
