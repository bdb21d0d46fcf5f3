#include "pec/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace pec {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<LabelRecord> parse_labels(const std::string& text) {
  std::vector<LabelRecord> records;
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    LabelRecord r;
    double cls = -1;
    if (!(ls >> cls >> r.cx >> r.cy >> r.w >> r.h)) {
      throw ParseError(msg("label line ", line_no, ": expected 'class cx cy w h'"));
    }
    std::string extra;
    if (ls >> extra) {
      throw ParseError(msg("label line ", line_no, ": trailing token '", extra, "'"));
    }
    if (cls < 0 || cls != std::floor(cls)) {
      throw ParseError(msg("label line ", line_no, ": class must be a non-negative integer"));
    }
    r.class_id = static_cast<int>(cls);
    for (double v : {r.cx, r.cy, r.w, r.h}) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ParseError(msg("label line ", line_no, ": coordinate ", v,
                             " outside [0, 1]"));
      }
    }
    if (r.w <= 0.0 || r.h <= 0.0) {
      throw ParseError(msg("label line ", line_no, ": box size must be positive"));
    }
    records.push_back(r);
  }
  return records;
}

std::string serialize_labels(const std::vector<LabelRecord>& records) {
  std::string out;
  char buf[96];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f\n", r.class_id, r.cx, r.cy,
                  r.w, r.h);
    out += buf;
  }
  return out;
}

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::vector<DatasetItem> DatasetIndex::of(Split s) const {
  std::vector<DatasetItem> out;
  for (const auto& it : items)
    if (it.split == s) out.push_back(it);
  return out;
}

std::array<int, 3> split_sizes(int count, std::array<int, 3> ratios) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  std::array<double, 3> quota{};
  std::array<int, 3> sizes{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    quota[i] = count * ratios[i] / total;
    sizes[i] = static_cast<int>(std::floor(quota[i]));
    assigned += sizes[i];
  }
  // Largest remainder; ties resolved in train, val, test order.
  while (assigned < count) {
    int best = 0;
    double best_frac = -1.0;
    for (int i = 0; i < 3; ++i) {
      const double frac = quota[i] - sizes[i];
      if (frac > best_frac + 1e-12) {
        best_frac = frac;
        best = i;
      }
    }
    ++sizes[best];
    quota[best] = sizes[best];  // consume the remainder
    ++assigned;
  }
  return sizes;
}

DatasetIndex split_dataset(std::vector<std::string> stems, const std::string& root,
                           std::uint64_t seed, std::array<int, 3> ratios) {
  if (stems.size() < 10) {
    throw ConfigError(msg("dataset split needs at least 10 items, got ", stems.size()));
  }
  std::sort(stems.begin(), stems.end());
  Rng rng(seed);
  shuffle(stems, rng);
  const auto sizes = split_sizes(static_cast<int>(stems.size()), ratios);
  DatasetIndex index;
  index.seed = seed;
  index.ratios = ratios;
  int k = 0;
  for (int part = 0; part < 3; ++part) {
    for (int i = 0; i < sizes[part]; ++i, ++k) {
      DatasetItem item;
      item.stem = stems[static_cast<std::size_t>(k)];
      item.image_path = root + "/images/" + item.stem + ".ppm";
      item.label_path = root + "/labels/" + item.stem + ".txt";
      item.split = static_cast<Split>(part);
      index.items.push_back(std::move(item));
    }
  }
  return index;
}

// ---------------------------------------------------------------------------
// PPM codec.
// ---------------------------------------------------------------------------

namespace {

// Reads the next header token, skipping whitespace and # comments.
std::string ppm_token(const std::vector<unsigned char>& b, std::size_t& pos) {
  while (pos < b.size()) {
    if (std::isspace(b[pos])) {
      ++pos;
    } else if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < b.size() && !std::isspace(b[pos])) tok += static_cast<char>(b[pos++]);
  if (tok.empty()) throw ParseError("truncated PPM header");
  return tok;
}

}  // namespace

TensorF load_ppm(const std::vector<unsigned char>& bytes) {
  std::size_t pos = 0;
  if (ppm_token(bytes, pos) != "P6") throw ParseError("not a binary PPM (magic P6)");
  const int w = std::stoi(ppm_token(bytes, pos));
  const int h = std::stoi(ppm_token(bytes, pos));
  const int maxval = std::stoi(ppm_token(bytes, pos));
  if (maxval != 255) throw ParseError(msg("PPM maxval must be 255, got ", maxval));
  if (w < 1 || h < 1) throw ParseError("PPM with empty raster");
  ++pos;  // single whitespace after maxval
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() - pos < need) {
    throw ParseError(msg("PPM payload truncated: need ", need, " bytes, have ",
                         bytes.size() - pos));
  }
  TensorF img(Shape{1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        img.at(0, c, y, x) =
            static_cast<float>(bytes[pos + (static_cast<std::size_t>(y) * w + x) * 3 +
                                     static_cast<std::size_t>(c)]) /
            255.0f;
      }
  return img;
}

std::vector<unsigned char> encode_ppm(const TensorF& image) {
  const Shape s = image.shape;
  if (s.n != 1 || s.c != 3) {
    throw DimensionError(msg("PPM encoder expects a 1x3xHxW tensor, got ", s.str()));
  }
  std::string header = msg("P6\n", s.w, " ", s.h, "\n255\n");
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<std::size_t>(s.h) * s.w * 3);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(0, c, y, x), 0.0f, 1.0f);
        out.push_back(static_cast<unsigned char>(std::lround(v * 255.0f)));
      }
  return out;
}

TensorF load_ppm_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(msg("cannot open image: ", path));
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  return load_ppm(bytes);
}

void save_ppm_file(const std::string& path, const TensorF& image) {
  const auto bytes = encode_ppm(image);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(msg("cannot write image: ", path));
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Synthetic dataset.
// ---------------------------------------------------------------------------

namespace {

struct Rgb {
  float r, g, b;
};

constexpr Rgb kBackground{0.09f, 0.10f, 0.11f};
// Each class owns a distinct strong-channel pattern so no pair differs in
// only one subtle channel.
constexpr std::array<Rgb, 4> kClassColors{{
    {0.86f, 0.16f, 0.86f},  // Badge: magenta square
    {0.16f, 0.31f, 0.86f},  // Offground: blue tall rectangle
    {0.16f, 0.78f, 0.31f},  // Ground: green wide rectangle
    {0.90f, 0.82f, 0.16f},  // Safebelt: yellow disc
}};

struct PaintedShape {
  int x0, y0, x1, y1;  // inclusive painted bounds
  int class_id;
};

// Paints one shape and returns its exact raster bounds.
PaintedShape paint_shape(TensorF& img, int class_id, int cx, int cy, int half_w,
                         int half_h, const Rgb& color) {
  const int size = img.shape.w;
  int x0 = size, y0 = size, x1 = -1, y1 = -1;
  for (int y = cy - half_h; y <= cy + half_h; ++y) {
    if (y < 0 || y >= size) continue;
    for (int x = cx - half_w; x <= cx + half_w; ++x) {
      if (x < 0 || x >= size) continue;
      if (class_id == 3) {  // disc
        const double dx = (x - cx) / static_cast<double>(half_w);
        const double dy = (y - cy) / static_cast<double>(half_h);
        if (dx * dx + dy * dy > 1.0) continue;
      }
      img.at(0, 0, y, x) = color.r;
      img.at(0, 1, y, x) = color.g;
      img.at(0, 2, y, x) = color.b;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  return PaintedShape{x0, y0, x1, y1, class_id};
}

int sample_class(const ClassCatalog& catalog, Rng& rng) {
  std::int64_t total = 0;
  for (int c : catalog.target_counts) total += c;
  std::int64_t pick = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(total)));
  for (int i = 0; i < 4; ++i) {
    pick -= catalog.target_counts[static_cast<std::size_t>(i)];
    if (pick < 0) return i;
  }
  return 3;
}

}  // namespace

SyntheticImage gen_synthetic_image(const ClassCatalog& catalog, const SyntheticConfig& cfg,
                                   int index) {
  if (cfg.image_size % 32 != 0) {
    throw ConfigError(msg("image size must be divisible by 32, got ", cfg.image_size));
  }
  Rng rng(cfg.seed * 1000003ull + static_cast<std::uint64_t>(index));
  const int size = cfg.image_size;
  SyntheticImage out;
  out.image = TensorF(Shape{1, 3, size, size});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      out.image.at(0, 0, y, x) = kBackground.r;
      out.image.at(0, 1, y, x) = kBackground.g;
      out.image.at(0, 2, y, x) = kBackground.b;
    }

  const double unit = size / 64.0;  // shape sizes scale with the canvas
  const int target = rng.range(cfg.min_shapes, cfg.max_shapes);
  // Draw every (class, size) first, then place large shapes before small
  // ones so placement failure does not skew the class frequencies.
  struct Draw {
    int cls;
    int half_w;
    int half_h;
  };
  std::vector<Draw> draws;
  for (int k = 0; k < target; ++k) {
    const int cls = sample_class(catalog, rng);
    // Half extents are sized so every box spans at least two stride-8
    // cells and the larger shapes reach the stride-16 scale.
    Draw d{cls, 0, 0};
    switch (cls) {
      case 0:  // small square
        d.half_w = d.half_h = static_cast<int>(std::lround(rng.range(8, 11) * unit));
        break;
      case 1:  // tall rectangle
        d.half_w = static_cast<int>(std::lround(rng.range(8, 11) * unit));
        d.half_h = static_cast<int>(std::lround(rng.range(16, 22) * unit));
        break;
      case 2:  // wide rectangle
        d.half_w = static_cast<int>(std::lround(rng.range(16, 22) * unit));
        d.half_h = static_cast<int>(std::lround(rng.range(8, 11) * unit));
        break;
      default:  // disc
        d.half_w = d.half_h = static_cast<int>(std::lround(rng.range(9, 13) * unit));
        break;
    }
    draws.push_back(d);
  }
  // Cap crowding with an area budget decided by the PREVIOUS draws only:
  // whether a draw survives is then independent of its own class, so kept
  // frequencies match the sampled ones. The kept set occupies at most half
  // the canvas, which largest-first rejection placement handles reliably.
  std::vector<Draw> kept;
  std::int64_t cum_area = 0;
  const std::int64_t budget = static_cast<std::int64_t>(size) * size / 2;
  for (const Draw& d : draws) {
    if (cum_area > budget) break;
    kept.push_back(d);
    cum_area += static_cast<std::int64_t>(2 * d.half_w + 4) * (2 * d.half_h + 4);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Draw& a, const Draw& b) {
    return (a.half_w + 1) * (a.half_h + 1) > (b.half_w + 1) * (b.half_h + 1);
  });

  std::vector<PaintedShape> placed;
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const Draw& d = kept[k];
    bool placed_ok = false;
    for (int attempt = 0; attempt < 60 && !placed_ok; ++attempt) {
      const int cx = rng.range(d.half_w, size - 1 - d.half_w);
      const int cy = rng.range(d.half_h, size - 1 - d.half_h);
      if (!cfg.occlusion) {
        bool overlaps = false;
        for (const auto& p : placed) {
          if (cx - d.half_w <= p.x1 + 1 && cx + d.half_w >= p.x0 - 1 &&
              cy - d.half_h <= p.y1 + 1 && cy + d.half_h >= p.y0 - 1) {
            overlaps = true;
            break;
          }
        }
        if (overlaps) continue;
      }
      placed.push_back(paint_shape(out.image, d.cls, cx, cy, d.half_w, d.half_h,
                                   kClassColors[static_cast<std::size_t>(d.cls)]));
      placed_ok = true;
    }
    if (placed.empty() && k + 1 == kept.size()) {
      // Guarantee at least one shape per image.
      placed.push_back(paint_shape(out.image, d.cls, size / 2, size / 2, d.half_w,
                                   d.half_h, kClassColors[static_cast<std::size_t>(d.cls)]));
    }
  }

  for (const auto& p : placed) {
    LabelRecord r;
    r.class_id = p.class_id;
    r.cx = (p.x0 + p.x1 + 1) / 2.0 / size;
    r.cy = (p.y0 + p.y1 + 1) / 2.0 / size;
    r.w = (p.x1 - p.x0 + 1) / static_cast<double>(size);
    r.h = (p.y1 - p.y0 + 1) / static_cast<double>(size);
    out.labels.push_back(r);
  }
  return out;
}

void write_split_manifest(const std::string& path, const DatasetIndex& index) {
  json root;
  root["seed"] = index.seed;
  root["ratios"] = index.ratios;
  for (int part = 0; part < 3; ++part) {
    json arr = json::array();
    for (const auto& it : index.items) {
      if (it.split == static_cast<Split>(part)) arr.push_back(it.stem);
    }
    root[split_name(static_cast<Split>(part))] = std::move(arr);
  }
  std::ofstream os(path);
  if (!os) throw IoError(msg("cannot write split manifest: ", path));
  os << root.dump(2) << "\n";
}

DatasetIndex gen_synthetic(const ClassCatalog& catalog, const SyntheticConfig& cfg,
                           const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir + "/images", ec);
  fs::create_directories(out_dir + "/labels", ec);
  if (!fs::is_directory(out_dir + "/images") || !fs::is_directory(out_dir + "/labels")) {
    throw IoError(msg("cannot create dataset directories under ", out_dir));
  }
  std::vector<std::string> stems;
  char buf[32];
  for (int i = 0; i < cfg.num_images; ++i) {
    std::snprintf(buf, sizeof buf, "img_%05d", i);
    const std::string stem = buf;
    const SyntheticImage si = gen_synthetic_image(catalog, cfg, i);
    save_ppm_file(out_dir + "/images/" + stem + ".ppm", si.image);
    std::ofstream os(out_dir + "/labels/" + stem + ".txt");
    if (!os) throw IoError(msg("cannot write labels under ", out_dir));
    os << serialize_labels(si.labels);
    stems.push_back(stem);
  }
  DatasetIndex index = split_dataset(stems, out_dir, cfg.seed);
  write_split_manifest(out_dir + "/split.json", index);
  return index;
}

DatasetIndex load_dataset_index(const std::string& root) {
  std::ifstream is(root + "/split.json");
  if (!is) throw IoError(msg("no split manifest at ", root, "/split.json"));
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError(msg("split manifest: ", e.what()));
  }
  DatasetIndex index;
  index.seed = j.value("seed", 0ull);
  if (j.contains("ratios")) {
    for (int i = 0; i < 3; ++i) index.ratios[i] = j["ratios"][static_cast<std::size_t>(i)].get<int>();
  }
  for (int part = 0; part < 3; ++part) {
    const std::string name = split_name(static_cast<Split>(part));
    if (!j.contains(name)) continue;
    for (const auto& stem : j[name]) {
      DatasetItem item;
      item.stem = stem.get<std::string>();
      item.image_path = root + "/images/" + item.stem + ".ppm";
      item.label_path = root + "/labels/" + item.stem + ".txt";
      item.split = static_cast<Split>(part);
      index.items.push_back(std::move(item));
    }
  }
  if (index.items.empty()) throw ParseError(msg("split manifest lists no items: ", root));
  return index;
}

std::vector<GroundTruth> labels_to_ground_truth(const std::vector<LabelRecord>& records,
                                                int image_w, int image_h, int image_id) {
  std::vector<GroundTruth> gts;
  for (const auto& r : records) {
    GroundTruth g;
    g.box = r.denormalize(image_w, image_h);
    g.class_id = r.class_id;
    g.image_id = image_id;
    gts.push_back(g);
  }
  return gts;
}

}  // namespace pec
