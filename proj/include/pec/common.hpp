#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pec {

// Error taxonomy. DimensionError/ConfigError cover shape and wiring
// mistakes inside the engine; ParseError and IoError cover the data
// plumbing; UsageError maps to CLI exit code 2.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& m) : std::runtime_error(m) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error(m) {}
};
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

namespace detail {
inline void msg_append(std::ostringstream&) {}
template <typename A, typename... Rest>
void msg_append(std::ostringstream& os, A&& a, Rest&&... rest) {
  os << std::forward<A>(a);
  msg_append(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
std::string msg(Args&&... args) {
  std::ostringstream os;
  detail::msg_append(os, std::forward<Args>(args)...);
  return os.str();
}

// Deterministic RNG. mt19937_64 output is fully specified by the
// standard; the value transforms below avoid std::uniform_*_distribution,
// whose results are implementation defined, so streams are reproducible
// across platforms and library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be >= 1.
  std::uint64_t uniform_int(std::uint64_t n) {
    // Rejection sampling keeps the distribution exact and deterministic.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  int range(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // Standard normal via Box-Muller on the deterministic uniform stream.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::mt19937_64 eng_;
};

// Deterministic Fisher-Yates shuffle (std::shuffle draws are
// implementation defined).
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_int(i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace pec
