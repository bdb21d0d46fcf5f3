#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pec/tensor.hpp"

namespace pec {

// Named tensor storage for a model. Insertion order is preserved so
// optimizer sweeps and checkpoints are deterministic. Entries flagged
// trainable receive gradients; the rest is state (BN running statistics).
template <typename T>
class WeightStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> t, bool trainable = true) {
    if (index_.count(name)) throw ConfigError(msg("duplicate weight name: ", name));
    t.requires_grad = trainable;
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(t), trainable});
    return entries_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError(msg("unknown weight: ", name));
    return entries_[it->second].tensor;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError(msg("unknown weight: ", name));
    return entries_[it->second].tensor;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::int64_t trainable_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.count();
    return n;
  }
  std::int64_t total_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.count();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_)
      if (e.trainable) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// He-uniform fill for convolution weights: U(-b, b), b = sqrt(6 / fan_in).
template <typename T>
Tensor<T> kaiming_uniform(Shape s, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor<T> t(s);
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic, version, a metadata JSON string, then the
// named tensors with shape and raw little-endian float payload.
// ---------------------------------------------------------------------------

namespace ckpt {

constexpr char kMagic[8] = {'P', 'E', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void write_i64(std::ostream& os, std::int64_t v) {
  const auto u = static_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline std::int64_t read_i64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<std::int64_t>(v);
}
inline void write_f32(std::ostream& os, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  write_u32(os, u);
}
inline float read_f32(std::istream& is) {
  const std::uint32_t u = read_u32(is);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace ckpt

inline void save_checkpoint(const std::string& path, const WeightStore<float>& store,
                            const std::string& meta_json) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(msg("cannot open checkpoint for writing: ", path));
  os.write(ckpt::kMagic, 8);
  ckpt::write_u32(os, ckpt::kVersion);
  ckpt::write_u32(os, static_cast<std::uint32_t>(meta_json.size()));
  os.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
  ckpt::write_u32(os, static_cast<std::uint32_t>(store.entries().size()));
  for (const auto& e : store.entries()) {
    ckpt::write_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    ckpt::write_u32(os, e.trainable ? 1u : 0u);
    ckpt::write_i64(os, e.tensor.shape.n);
    ckpt::write_i64(os, e.tensor.shape.c);
    ckpt::write_i64(os, e.tensor.shape.h);
    ckpt::write_i64(os, e.tensor.shape.w);
    for (float v : e.tensor.data) ckpt::write_f32(os, v);
  }
  if (!os) throw IoError(msg("checkpoint write failed: ", path));
}

// Loads into an already-built store; names and shapes must match.
// Returns the metadata string.
inline std::string load_checkpoint(const std::string& path, WeightStore<float>& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(msg("cannot open checkpoint: ", path));
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, ckpt::kMagic, 8) != 0) {
    throw IoError(msg("not a checkpoint file: ", path));
  }
  const std::uint32_t version = ckpt::read_u32(is);
  if (version != ckpt::kVersion) throw IoError(msg("unsupported checkpoint version ", version));
  const std::uint32_t meta_len = ckpt::read_u32(is);
  std::string meta(meta_len, '\0');
  is.read(meta.data(), meta_len);
  const std::uint32_t count = ckpt::read_u32(is);
  if (count != store.entries().size()) {
    throw ConfigError(msg("checkpoint holds ", count, " tensors, model expects ",
                          store.entries().size()));
  }
  for (auto& e : store.entries()) {
    const std::uint32_t name_len = ckpt::read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (name != e.name) {
      throw ConfigError(msg("checkpoint tensor '", name, "' does not match model tensor '",
                            e.name, "'"));
    }
    ckpt::read_u32(is);  // trainable flag: informational
    Shape s{static_cast<int>(ckpt::read_i64(is)), static_cast<int>(ckpt::read_i64(is)),
            static_cast<int>(ckpt::read_i64(is)), static_cast<int>(ckpt::read_i64(is))};
    if (!(s == e.tensor.shape)) {
      throw ConfigError(msg("checkpoint tensor '", name, "' has shape ", s.str(),
                            ", model expects ", e.tensor.shape.str()));
    }
    for (auto& v : e.tensor.data) v = ckpt::read_f32(is);
  }
  if (!is) throw IoError(msg("checkpoint truncated: ", path));
  return meta;
}

}  // namespace pec
