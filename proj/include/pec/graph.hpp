#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "pec/common.hpp"

namespace pec {

// One declarative layer. Only the fields meaningful for `kind` are used:
//   cbs         inputs[1], out_channels, kernel, stride, groups
//   c2f         inputs[1], out_channels, repeats, shortcut
//   c2f_faster_ema  as c2f, plus ema_groups
//   sppf        inputs[1], out_channels
//   sppf_cpca   as sppf, plus cpca_reduction
//   upsample    inputs[1] (nearest 2x, parameter free)
//   downsample  inputs[1], out_channels (3x3 stride-2 conv+BN+SiLU)
//   concat      inputs[2..] (channel concatenation)
//   fuse        inputs[2..], fuse_weights (one raw weight per input), fuse_eps
//   head        inputs[3] (P3, P4, P5), num_classes, reg_max
struct LayerSpec {
  std::string id;
  std::string kind;
  std::vector<std::string> inputs;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int groups = 1;
  int repeats = 1;
  bool shortcut = false;
  int ema_groups = 4;
  int cpca_reduction = 16;
  std::vector<double> fuse_weights;
  double fuse_eps = 1e-4;
  int num_classes = 0;
  int reg_max = 16;
};

struct ModelGraph {
  std::string model;  // "baseline" | "pec"
  std::string scale;  // "s" | "toy"
  int num_classes = 4;
  double depth_multiple = 1.0;
  double width_multiple = 1.0;
  std::array<int, 3> strides{8, 16, 32};
  std::array<std::string, 3> outputs{};  // P3/P4/P5 feature layer ids
  std::vector<LayerSpec> layers;

  const LayerSpec& layer(const std::string& id) const;
  const LayerSpec& head() const;

  // Output channel count per layer id (plus the implicit "image" input).
  std::map<std::string, int> resolve_channels() const;

  // Rejects unknown/forward references, duplicate ids, orphan layers,
  // malformed fuse nodes, and bad output wiring.
  void validate() const;
};

struct ScalePreset {
  std::string name;
  double depth = 1.0;
  double width = 1.0;
  int max_channels = 1024;
};

ScalePreset scale_preset(const std::string& name);

enum class NeckTopology { Fpn, Panet, Bifpn };
NeckTopology neck_topology_from(const std::string& label);

// Emits neck layers for three input scales. `input_ids` and
// `input_channels` describe P3/P4/P5 sources at strides 8/16/32.
struct NeckFragment {
  std::vector<LayerSpec> layers;
  std::array<std::string, 3> outputs;
  std::array<int, 3> out_channels;
};

NeckFragment build_neck(const std::array<std::string, 3>& input_ids,
                        const std::array<int, 3>& input_channels,
                        NeckTopology topology, int repeats = 1,
                        const std::string& prefix = "neck");

enum class ModelVariant { Baseline, Pec };
ModelVariant model_variant_from(const std::string& label);

ModelGraph build_model(ModelVariant variant, const std::string& scale, int num_classes);

// JSON round trip with stable field names.
std::string graph_to_json(const ModelGraph& g);
ModelGraph graph_from_json(const std::string& json_text);

}  // namespace pec
