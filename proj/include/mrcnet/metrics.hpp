#pragma once

#include <map>
#include <string>
#include <vector>

#include "mrcnet/common.hpp"

namespace mrc {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double area() const { return (x2 - x1) * (y2 - y1); }
  bool valid() const { return x2 > x1 && y2 > y1; }
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
};

struct GroundTruthBox {
  Box box;
  int class_id = 0;
};

double iou(const Box& a, const Box& b);

enum class MatchFlag { TP, FP };

struct MatchResult {
  // flags[i] corresponds to dets[i]; order preserved
  std::vector<MatchFlag> flags;
  int tp = 0, fp = 0, fn = 0;
};

// Greedy score-ranked matching for one image and one class set: each
// detection claims the unmatched same-class GT with the highest IoU >= thr.
// Ties in score keep insertion order.
MatchResult match_and_count(const std::vector<Detection>& dets,
                            const std::vector<GroundTruthBox>& gts,
                            double iou_thr = 0.5);

// All-point interpolated AP over a score-ranked TP/FP sequence.
double average_precision(const std::vector<MatchFlag>& ranked_flags,
                         const std::vector<double>& ranked_scores, i64 gt_count);

struct ClassEval {
  double ap = 0.0;
  int tp = 0, fp = 0, fn = 0;
  i64 gt_count = 0;
};

struct EvalReport {
  std::map<int, ClassEval> per_class;
  double map50 = 0.0;
  double precision = 0.0;  // micro, over all classes at the operating threshold
  double recall = 0.0;
  bool empty = false;  // no GT and no detections anywhere

  std::string to_json(const std::vector<std::string>& class_names = {}) const;
};

struct ImageEval {
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> gts;
};

// Aggregate AP per class across images (global score ranking per class);
// classes without GT instances are excluded from the mean.
EvalReport map50(const std::vector<ImageEval>& images, int num_classes,
                 double iou_thr = 0.5);

}  // namespace mrc
