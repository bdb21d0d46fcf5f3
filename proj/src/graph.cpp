#include "pec/graph.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"

namespace pec {

using nlohmann::json;

const LayerSpec& ModelGraph::layer(const std::string& id) const {
  for (const auto& l : layers)
    if (l.id == id) return l;
  throw ConfigError(msg("no layer with id '", id, "'"));
}

const LayerSpec& ModelGraph::head() const {
  for (const auto& l : layers)
    if (l.kind == "head") return l;
  throw ConfigError("graph has no head layer");
}

std::map<std::string, int> ModelGraph::resolve_channels() const {
  std::map<std::string, int> ch;
  ch["image"] = 3;
  for (const auto& l : layers) {
    auto in_ch = [&](std::size_t i) {
      auto it = ch.find(l.inputs.at(i));
      if (it == ch.end()) {
        throw ConfigError(msg("layer '", l.id, "' references unknown input '",
                              l.inputs.at(i), "'"));
      }
      return it->second;
    };
    int out = 0;
    if (l.kind == "cbs" || l.kind == "downsample" || l.kind == "c2f" ||
        l.kind == "c2f_faster_ema" || l.kind == "sppf" || l.kind == "sppf_cpca") {
      out = l.out_channels;
    } else if (l.kind == "upsample") {
      out = in_ch(0);
    } else if (l.kind == "concat") {
      for (std::size_t i = 0; i < l.inputs.size(); ++i) out += in_ch(i);
    } else if (l.kind == "fuse") {
      out = in_ch(0);
      for (std::size_t i = 1; i < l.inputs.size(); ++i) {
        if (in_ch(i) != out) {
          throw ConfigError(msg("fuse '", l.id, "' inputs disagree on channels: ", out,
                                " vs ", in_ch(i)));
        }
      }
    } else if (l.kind == "head") {
      for (std::size_t i = 0; i < l.inputs.size(); ++i) in_ch(i);
      out = 0;
    } else {
      throw ConfigError(msg("unknown layer kind '", l.kind, "'"));
    }
    ch[l.id] = out;
  }
  return ch;
}

void ModelGraph::validate() const {
  std::set<std::string> seen{"image"};
  std::map<std::string, int> consumers;
  int heads = 0;
  for (const auto& l : layers) {
    if (l.id.empty() || l.kind.empty()) throw ConfigError("layer with empty id or kind");
    if (seen.count(l.id)) throw ConfigError(msg("duplicate layer id '", l.id, "'"));
    if (l.inputs.empty()) throw ConfigError(msg("layer '", l.id, "' has no inputs"));
    for (const auto& in : l.inputs) {
      if (!seen.count(in)) {
        throw ConfigError(msg("layer '", l.id, "' input '", in,
                              "' is not defined earlier (cycle or dangling reference)"));
      }
      ++consumers[in];
    }
    if (l.kind == "fuse") {
      if (l.inputs.size() < 2) {
        throw ConfigError(msg("fuse '", l.id, "' needs at least two inputs"));
      }
      if (l.fuse_weights.size() != l.inputs.size()) {
        throw ConfigError(msg("fuse '", l.id, "' has ", l.inputs.size(), " inputs but ",
                              l.fuse_weights.size(), " raw weights"));
      }
    }
    if (l.kind == "head") {
      ++heads;
      if (l.inputs.size() != 3) throw ConfigError("head must consume exactly three scales");
      if (l.num_classes < 1) throw ConfigError("head needs a positive class count");
    }
    seen.insert(l.id);
  }
  if (heads != 1) throw ConfigError(msg("graph must contain exactly one head, found ", heads));
  resolve_channels();

  const LayerSpec& h = head();
  for (int i = 0; i < 3; ++i) {
    if (outputs[i] != h.inputs[static_cast<std::size_t>(i)]) {
      throw ConfigError("graph outputs must match the head inputs in order");
    }
  }
  for (int i = 1; i < 3; ++i) {
    if (strides[i] <= strides[i - 1]) {
      throw ConfigError("detection strides must increase strictly");
    }
  }
  // No orphans: every layer except the head feeds something downstream.
  for (const auto& l : layers) {
    if (l.kind == "head") continue;
    if (consumers[l.id] == 0) {
      throw ConfigError(msg("layer '", l.id, "' is never consumed"));
    }
  }
}

ScalePreset scale_preset(const std::string& name) {
  if (name == "s") return ScalePreset{"s", 0.33, 0.50, 512};
  if (name == "toy") return ScalePreset{"toy", 1.0 / 6.0, 0.125, 128};
  throw ConfigError(msg("unknown scale preset '", name, "' (expected s or toy)"));
}

NeckTopology neck_topology_from(const std::string& label) {
  if (label == "fpn") return NeckTopology::Fpn;
  if (label == "panet") return NeckTopology::Panet;
  if (label == "bifpn") return NeckTopology::Bifpn;
  throw ConfigError(msg("unknown neck topology '", label, "'"));
}

ModelVariant model_variant_from(const std::string& label) {
  if (label == "baseline") return ModelVariant::Baseline;
  if (label == "pec") return ModelVariant::Pec;
  throw ConfigError(msg("unknown model variant '", label, "' (expected baseline or pec)"));
}

namespace {

int make_divisible(double v, int divisor = 8) {
  int d = static_cast<int>(std::lround(v / divisor)) * divisor;
  if (d < divisor) d = divisor;
  return d;
}

int depth_round(int n, double depth) {
  return std::max(1, static_cast<int>(std::lround(n * depth)));
}

LayerSpec cbs(std::string id, std::string input, int out_c, int k, int s) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = "cbs";
  l.inputs = {std::move(input)};
  l.out_channels = out_c;
  l.kernel = k;
  l.stride = s;
  return l;
}

LayerSpec dw_cbs(std::string id, std::string input, int channels, int k) {
  LayerSpec l = cbs(std::move(id), std::move(input), channels, k, 1);
  l.groups = channels;
  return l;
}

LayerSpec c2f(std::string id, std::string input, int out_c, int n, bool shortcut,
              bool faster_ema) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = faster_ema ? "c2f_faster_ema" : "c2f";
  l.inputs = {std::move(input)};
  l.out_channels = out_c;
  l.repeats = n;
  l.shortcut = shortcut;
  return l;
}

LayerSpec upsample(std::string id, std::string input) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = "upsample";
  l.inputs = {std::move(input)};
  return l;
}

LayerSpec downsample(std::string id, std::string input, int out_c) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = "downsample";
  l.inputs = {std::move(input)};
  l.out_channels = out_c;
  l.kernel = 3;
  l.stride = 2;
  return l;
}

LayerSpec concat(std::string id, std::vector<std::string> inputs) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = "concat";
  l.inputs = std::move(inputs);
  return l;
}

LayerSpec fuse(std::string id, std::vector<std::string> inputs) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = "fuse";
  l.inputs = std::move(inputs);
  l.fuse_weights.assign(l.inputs.size(), 1.0);
  l.fuse_eps = 1e-4;
  return l;
}

}  // namespace

NeckFragment build_neck(const std::array<std::string, 3>& in_ids,
                        const std::array<int, 3>& in_ch, NeckTopology topology,
                        int repeats, const std::string& prefix) {
  NeckFragment f;
  auto add = [&](LayerSpec l) -> std::string {
    f.layers.push_back(std::move(l));
    return f.layers.back().id;
  };

  if (topology == NeckTopology::Fpn) {
    // Top-down pathway only.
    auto up1 = add(upsample(prefix + ".up1", in_ids[2]));
    auto cat1 = add(concat(prefix + ".cat1", {up1, in_ids[1]}));
    auto p4 = add(c2f(prefix + ".p4", cat1, in_ch[1], 1, false, false));
    auto up2 = add(upsample(prefix + ".up2", p4));
    auto cat2 = add(concat(prefix + ".cat2", {up2, in_ids[0]}));
    auto p3 = add(c2f(prefix + ".p3", cat2, in_ch[0], 1, false, false));
    f.outputs = {p3, p4, in_ids[2]};
    f.out_channels = {in_ch[0], in_ch[1], in_ch[2]};
    return f;
  }

  if (topology == NeckTopology::Panet) {
    auto up1 = add(upsample(prefix + ".up1", in_ids[2]));
    auto cat1 = add(concat(prefix + ".cat1", {up1, in_ids[1]}));
    auto td1 = add(c2f(prefix + ".td1", cat1, in_ch[1], 1, false, false));
    auto up2 = add(upsample(prefix + ".up2", td1));
    auto cat2 = add(concat(prefix + ".cat2", {up2, in_ids[0]}));
    auto p3 = add(c2f(prefix + ".p3", cat2, in_ch[0], 1, false, false));
    auto d1 = add(downsample(prefix + ".down1", p3, in_ch[0]));
    auto cat3 = add(concat(prefix + ".cat3", {d1, td1}));
    auto p4 = add(c2f(prefix + ".p4", cat3, in_ch[1], 1, false, false));
    auto d2 = add(downsample(prefix + ".down2", p4, in_ch[1]));
    auto cat4 = add(concat(prefix + ".cat4", {d2, in_ids[2]}));
    auto p5 = add(c2f(prefix + ".p5", cat4, in_ch[2], 1, false, false));
    f.outputs = {p3, p4, p5};
    f.out_channels = {in_ch[0], in_ch[1], in_ch[2]};
    return f;
  }

  // BiFPN. Every level runs at the P3 width; cross-scale inputs are
  // projected once with a 1x1 conv, downsampling uses stride-2 3x3 convs,
  // fusion nodes are weighted sums followed by a depthwise-separable conv
  // with BN+SiLU after each stage.
  const int width = in_ch[0];
  std::array<std::string, 3> cur = in_ids;
  std::array<int, 3> cur_ch = in_ch;
  for (int i = 1; i < 3; ++i) {
    if (cur_ch[i] != width) {
      cur[i] = add(cbs(msg(prefix, ".proj_p", 3 + i), cur[i], width, 1, 1));
      cur_ch[i] = width;
    }
  }
  for (int r = 0; r < repeats; ++r) {
    const std::string u = msg(prefix, ".u", r);
    auto dwsep = [&](const std::string& node, const std::string& input) {
      auto dw = add(dw_cbs(node + ".dw", input, width, 3));
      return add(cbs(node + ".pw", dw, width, 1, 1));
    };
    auto td4_up = add(upsample(u + ".td4.up", cur[2]));
    auto td4 = dwsep(u + ".td4", add(fuse(u + ".td4.fuse", {cur[1], td4_up})));
    auto p3_up = add(upsample(u + ".p3.up", td4));
    auto p3 = dwsep(u + ".p3", add(fuse(u + ".p3.fuse", {cur[0], p3_up})));
    auto p4_dn = add(downsample(u + ".p4.down", p3, width));
    auto p4 = dwsep(u + ".p4", add(fuse(u + ".p4.fuse", {cur[1], td4, p4_dn})));
    auto p5_dn = add(downsample(u + ".p5.down", p4, width));
    auto p5 = dwsep(u + ".p5", add(fuse(u + ".p5.fuse", {cur[2], p5_dn})));
    cur = {p3, p4, p5};
  }
  f.outputs = cur;
  f.out_channels = {width, width, width};
  return f;
}

ModelGraph build_model(ModelVariant variant, const std::string& scale, int num_classes) {
  const ScalePreset sp = scale_preset(scale);
  const bool pec = variant == ModelVariant::Pec;

  const int w1 = make_divisible(64 * sp.width);
  const int w2 = make_divisible(128 * sp.width);
  const int w3 = make_divisible(256 * sp.width);
  const int w4 = make_divisible(512 * sp.width);
  const int w5 = std::min(make_divisible(1024 * sp.width), sp.max_channels);
  const int n3 = depth_round(3, sp.depth);
  const int n6 = depth_round(6, sp.depth);

  ModelGraph g;
  g.model = pec ? "pec" : "baseline";
  g.scale = sp.name;
  g.num_classes = num_classes;
  g.depth_multiple = sp.depth;
  g.width_multiple = sp.width;

  auto add = [&](LayerSpec l) -> std::string {
    g.layers.push_back(std::move(l));
    return g.layers.back().id;
  };

  auto stem = add(cbs("bb.stem", "image", w1, 3, 2));
  auto d1 = add(cbs("bb.down1", stem, w2, 3, 2));
  auto s1 = add(c2f("bb.stage1", d1, w2, n3, true, pec));
  auto d2 = add(cbs("bb.down2", s1, w3, 3, 2));
  auto s2 = add(c2f("bb.stage2", d2, w3, n6, true, pec));  // P3 source
  auto d3 = add(cbs("bb.down3", s2, w4, 3, 2));
  auto s3 = add(c2f("bb.stage3", d3, w4, n6, true, pec));  // P4 source
  auto d4 = add(cbs("bb.down4", s3, w5, 3, 2));
  auto s4 = add(c2f("bb.stage4", d4, w5, n3, true, pec));
  LayerSpec sppf;
  sppf.id = "bb.sppf";
  sppf.kind = pec ? "sppf_cpca" : "sppf";
  sppf.inputs = {s4};
  sppf.out_channels = w5;
  auto p5 = add(sppf);  // P5 source

  NeckFragment neck = build_neck({s2, s3, p5}, {w3, w4, w5},
                                 pec ? NeckTopology::Bifpn : NeckTopology::Panet, 1);
  for (auto& l : neck.layers) g.layers.push_back(std::move(l));

  LayerSpec head;
  head.id = "head";
  head.kind = "head";
  head.inputs = {neck.outputs[0], neck.outputs[1], neck.outputs[2]};
  head.num_classes = num_classes;
  head.reg_max = 16;
  add(head);

  g.outputs = neck.outputs;
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// JSON serialization. Field names are part of the external interface.
// ---------------------------------------------------------------------------

std::string graph_to_json(const ModelGraph& g) {
  json layers = json::array();
  for (const auto& l : g.layers) {
    json j;
    j["id"] = l.id;
    j["kind"] = l.kind;
    j["inputs"] = l.inputs;
    if (l.kind == "cbs" || l.kind == "downsample") {
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      if (l.groups != 1) j["groups"] = l.groups;
    } else if (l.kind == "c2f" || l.kind == "c2f_faster_ema") {
      j["out_channels"] = l.out_channels;
      j["repeats"] = l.repeats;
      j["shortcut"] = l.shortcut;
      if (l.kind == "c2f_faster_ema") j["ema_groups"] = l.ema_groups;
    } else if (l.kind == "sppf" || l.kind == "sppf_cpca") {
      j["out_channels"] = l.out_channels;
      if (l.kind == "sppf_cpca") j["cpca_reduction"] = l.cpca_reduction;
    } else if (l.kind == "fuse") {
      j["weights"] = l.fuse_weights;
      j["eps"] = l.fuse_eps;
    } else if (l.kind == "head") {
      j["num_classes"] = l.num_classes;
      j["reg_max"] = l.reg_max;
    }
    layers.push_back(std::move(j));
  }
  json root;
  root["model"] = g.model;
  root["scale"] = g.scale;
  root["num_classes"] = g.num_classes;
  root["depth_multiple"] = g.depth_multiple;
  root["width_multiple"] = g.width_multiple;
  root["strides"] = g.strides;
  root["outputs"] = g.outputs;
  root["layers"] = std::move(layers);
  return root.dump(2) + "\n";
}

ModelGraph graph_from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(msg("model graph JSON: ", e.what()));
  }
  ModelGraph g;
  try {
    g.model = root.at("model").get<std::string>();
    g.scale = root.at("scale").get<std::string>();
    g.num_classes = root.at("num_classes").get<int>();
    g.depth_multiple = root.at("depth_multiple").get<double>();
    g.width_multiple = root.at("width_multiple").get<double>();
    for (int i = 0; i < 3; ++i) {
      g.strides[i] = root.at("strides").at(i).get<int>();
      g.outputs[i] = root.at("outputs").at(i).get<std::string>();
    }
    for (const auto& j : root.at("layers")) {
      LayerSpec l;
      l.id = j.at("id").get<std::string>();
      l.kind = j.at("kind").get<std::string>();
      l.inputs = j.at("inputs").get<std::vector<std::string>>();
      l.out_channels = j.value("out_channels", 0);
      l.kernel = j.value("kernel", 1);
      l.stride = j.value("stride", 1);
      l.groups = j.value("groups", 1);
      l.repeats = j.value("repeats", 1);
      l.shortcut = j.value("shortcut", false);
      l.ema_groups = j.value("ema_groups", 4);
      l.cpca_reduction = j.value("cpca_reduction", 16);
      l.fuse_weights = j.value("weights", std::vector<double>{});
      l.fuse_eps = j.value("eps", 1e-4);
      l.num_classes = j.value("num_classes", 0);
      l.reg_max = j.value("reg_max", 16);
      g.layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw ParseError(msg("model graph JSON: ", e.what()));
  }
  g.validate();
  return g;
}

}  // namespace pec
