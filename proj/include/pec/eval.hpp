#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pec/common.hpp"

namespace pec {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
  int image_id = 0;
};

struct GroundTruth {
  Box box;
  int class_id = 0;
  int image_id = 0;
};

struct EvalConfig {
  double nms_iou_threshold = 0.3;
  double match_iou_threshold = 0.5;
  double confidence_floor = 0.05;
  int ap_grid_points = 101;
  std::vector<double> map_sweep{0.50, 0.55, 0.60, 0.65, 0.70,
                                0.75, 0.80, 0.85, 0.90, 0.95};
};

double iou(const Box& a, const Box& b);

// Complete IoU: IoU minus center-distance and aspect-ratio penalties.
double ciou(const Box& pred, const Box& gt);
inline double ciou_loss(const Box& pred, const Box& gt) { return 1.0 - ciou(pred, gt); }

// Class-wise greedy suppression; result sorted by descending score with
// deterministic tie-breaking (score, lower class id, insertion order).
std::vector<Detection> nms(const std::vector<Detection>& dets, const EvalConfig& cfg);

struct PrCurve {
  std::vector<double> precision;
  std::vector<double> recall;
  bool recall_undefined = false;  // detections exist but no ground truth
};

PrCurve pr_curve(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                 int class_id, double match_iou);

struct ApResult {
  double value = 0.0;
  bool empty_curve = false;
};

ApResult average_precision(const PrCurve& curve, int grid_points = 101);

struct ClassAp {
  int class_id = 0;
  double ap50 = 0.0;
  double ap5095 = 0.0;
};

struct MapResult {
  double map50 = 0.0;
  double map5095 = 0.0;
  std::vector<ClassAp> per_class;
  std::vector<int> absent_classes;  // present in detections only; excluded
};

MapResult mean_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                  const EvalConfig& cfg);

// Mean precision/recall across classes at the best-F1 point of each
// class's PR curve (reported alongside mAP; convention documented in docs).
struct PrSummary {
  double precision = 0.0;
  double recall = 0.0;
};
PrSummary precision_recall(const std::vector<Detection>& dets,
                           const std::vector<GroundTruth>& gts, const EvalConfig& cfg);

// Monotonic clock interface so tests can inject fake time.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual double now() = 0;  // seconds
};

class SteadyClock : public Clock {
 public:
  double now() override;
};

// Advances a fixed step per call.
class FakeClock : public Clock {
 public:
  explicit FakeClock(double step) : step_(step) {}
  double now() override { return t_ += step_; }

 private:
  double step_;
  double t_ = 0.0;
};

struct FpsResult {
  double fps_mean = 0.0;
  double fps_sd = 0.0;
  std::vector<double> per_rep;
};

// Times `pass(i)` for image indices 0..num_images-1, repeated `reps`
// times after `warmup` untimed passes. FPS per repetition is
// num_images / elapsed.
FpsResult fps_benchmark(const std::function<void(int)>& pass, int num_images, Clock& clock,
                        int warmup = 1, int reps = 3);

}  // namespace pec
