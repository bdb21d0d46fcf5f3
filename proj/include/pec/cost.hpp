#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "pec/graph.hpp"

namespace pec {

// Exact rational for the analytic arithmetic-ratio claims.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n, std::int64_t d) : num(n), den(d) {
    if (den == 0) throw ConfigError("rational with zero denominator");
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return msg(num, "/", den); }
};

// params = k^2 * cin * cout / groups (+ cout if biased);
// macs = h_out * w_out * k^2 * cin * cout / groups.
struct ConvCost {
  std::int64_t params = 0;
  std::int64_t macs = 0;
};
ConvCost conv_cost(std::int64_t h_out, std::int64_t w_out, std::int64_t cin,
                   std::int64_t cout, std::int64_t k, std::int64_t groups, bool has_bias);

// Partial-convolution arithmetic: macs = h*w*k^2*cp^2 and
// mem_access = h*w*2*cp + k^2*cp^2, with exact ratios against the regular
// convolution of the same (h, w, c, k).
struct PConvCost {
  std::int64_t cp = 0;
  std::int64_t macs = 0;
  std::int64_t mem_access = 0;
  Rational mac_ratio;           // vs regular conv: (cp/c)^2
  Rational mem_dominant_ratio;  // dominant term: cp/c
  Rational mem_full_ratio;      // full formula ratio
};
PConvCost pconv_cost(std::int64_t h, std::int64_t w, std::int64_t c, double ratio,
                     std::int64_t k);

struct CostOptions {
  // Count the box branch as a DFL-style head (4 * reg_max output channels
  // plus the fixed projection) instead of the plain 4-channel regressor
  // the executor runs. Reporting toggle only.
  bool dfl_style_head = false;
  // Include BN running statistics in parameter totals.
  bool count_running_stats = false;
};

struct CostRow {
  std::string id;
  std::string kind;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t mem_access = 0;
};

struct CostReport {
  std::string model;
  std::string scale;
  int input_h = 0;
  int input_w = 0;
  CostOptions options;
  std::vector<CostRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  std::int64_t total_mem_access = 0;
};

// Walks the graph once, propagating feature-map extents from the input
// resolution. All quantities are exact integers.
CostReport analyze_graph(const ModelGraph& g, int input_h, int input_w,
                         const CostOptions& opts = {});

inline CostReport count_params(const ModelGraph& g, const CostOptions& opts = {}) {
  return analyze_graph(g, 640, 640, opts);
}
inline CostReport model_macs(const ModelGraph& g, int input_h, int input_w,
                             const CostOptions& opts = {}) {
  return analyze_graph(g, input_h, input_w, opts);
}

std::string cost_report_csv(const CostReport& r);
std::string cost_report_json(const CostReport& r);

}  // namespace pec
