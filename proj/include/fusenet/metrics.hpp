#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fusenet/boxes.hpp"

namespace fusenet::metrics {

// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> iou_ladder();

// Single-class average precision with all-point interpolation.
//
// Detections are ranked by descending score (stable on input order); each
// one is matched to the highest-IoU unmatched truth of the same image when
// that IoU reaches `iou_threshold`. AP is the area under the monotone
// precision envelope of the resulting precision/recall points.
double average_precision(std::span<const Detection> detections, std::span<const GroundTruthBox> truths,
                         double iou_threshold);

struct ClassMetrics {
  int class_id = 0;
  std::size_t truths = 0;
  double ap50 = 0.0;
  double ap50_95 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double map50 = 0.0;
  // Mean over the IoU ladder; reported under the "mAP50-90" label.
  double map50_95 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double conf_threshold = 0.25;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

// Per-class AP over `iou_thresholds` averaged across the classes that occur in
// `truths` (absent classes are excluded). Precision and recall are measured
// at IoU 0.5 on detections scoring at least `conf_threshold`, then averaged
// over classes. Throws InputError when `truths` is empty.
MetricsReport mean_ap(std::span<const Detection> detections, std::span<const GroundTruthBox> truths,
                      std::span<const double> iou_thresholds, double conf_threshold = 0.25);
MetricsReport mean_ap(std::span<const Detection> detections, std::span<const GroundTruthBox> truths);

}  // namespace fusenet::metrics
