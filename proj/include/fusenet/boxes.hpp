#pragma once

#include <cstddef>
#include <vector>

namespace fusenet {

// Axis-aligned box in normalized center format.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
};

struct GroundTruthBox {
  int class_id = 0;
  Box box;
  std::size_t image_id = 0;
  bool occluded = false;
};

struct Detection {
  int class_id = 0;
  double score = 0.0;
  Box box;
  std::size_t image_id = 0;
};

// Intersection over union; 0 for disjoint boxes.
double iou(const Box& a, const Box& b);

// Clips a box to the unit square.
Box clamp_unit(const Box& b);

// Greedy per-class non-maximum suppression. Keeps detections in descending
// score order (ties broken by input position) and drops any box whose IoU
// with an already kept box of the same class exceeds `iou_threshold`.
std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold);

}  // namespace fusenet
