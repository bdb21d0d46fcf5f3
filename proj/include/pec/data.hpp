#pragma once

#include <array>
#include <string>
#include <vector>

#include "pec/eval.hpp"
#include "pec/tensor.hpp"

namespace pec {

// One "class cx cy w h" line, all box values normalized to [0, 1].
struct LabelRecord {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;

  Box denormalize(int image_w, int image_h) const {
    Box b;
    b.x1 = std::clamp((cx - w / 2) * image_w, 0.0, static_cast<double>(image_w));
    b.y1 = std::clamp((cy - h / 2) * image_h, 0.0, static_cast<double>(image_h));
    b.x2 = std::clamp((cx + w / 2) * image_w, 0.0, static_cast<double>(image_w));
    b.y2 = std::clamp((cy + h / 2) * image_h, 0.0, static_cast<double>(image_h));
    return b;
  }
};

std::vector<LabelRecord> parse_labels(const std::string& text);
std::string serialize_labels(const std::vector<LabelRecord>& records);

enum class Split { Train, Val, Test };
std::string split_name(Split s);

struct DatasetItem {
  std::string image_path;
  std::string label_path;
  std::string stem;
  Split split = Split::Train;
};

struct DatasetIndex {
  std::vector<DatasetItem> items;
  std::uint64_t seed = 0;
  std::array<int, 3> ratios{7, 1, 2};

  std::vector<DatasetItem> of(Split s) const;
};

// Deterministic shuffle + largest-remainder apportionment of the 7:1:2
// ratio (ties resolved in train, val, test order).
DatasetIndex split_dataset(std::vector<std::string> stems, const std::string& root,
                           std::uint64_t seed, std::array<int, 3> ratios = {7, 1, 2});

std::array<int, 3> split_sizes(int count, std::array<int, 3> ratios = {7, 1, 2});

// Binary PPM (P6, maxval 255) <-> 1x3xHxW tensor scaled to [0, 1].
TensorF load_ppm(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> encode_ppm(const TensorF& image);
TensorF load_ppm_file(const std::string& path);
void save_ppm_file(const std::string& path, const TensorF& image);

// The four synthesized classes mirror the label catalog the harness
// stands in for: a small square, a tall rectangle, a wide rectangle and
// a disc, each with a fixed color signature.
struct ClassCatalog {
  std::array<std::string, 4> names{"Badge", "Offground", "Ground", "Safebelt"};
  std::array<int, 4> target_counts{673, 2477, 2257, 1747};
};

struct SyntheticConfig {
  int num_images = 286;
  int image_size = 64;
  std::uint64_t seed = 7;
  bool occlusion = false;  // allow overlapping shapes
  int min_shapes = 1;
  int max_shapes = 6;
};

struct SyntheticImage {
  TensorF image;
  std::vector<LabelRecord> labels;
};

// Fully deterministic per (seed, index); parallel generation safe.
SyntheticImage gen_synthetic_image(const ClassCatalog& catalog, const SyntheticConfig& cfg,
                                   int index);

// Writes images/*.ppm, labels/*.txt and split.json under `out_dir`.
DatasetIndex gen_synthetic(const ClassCatalog& catalog, const SyntheticConfig& cfg,
                           const std::string& out_dir);

// Loads a dataset laid out as images/*.ppm + labels/*.txt + split.json.
DatasetIndex load_dataset_index(const std::string& root);

std::vector<GroundTruth> labels_to_ground_truth(const std::vector<LabelRecord>& records,
                                                int image_w, int image_h, int image_id);

void write_split_manifest(const std::string& path, const DatasetIndex& index);

}  // namespace pec
