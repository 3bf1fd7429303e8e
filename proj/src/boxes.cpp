#include "fusenet/boxes.hpp"

#include <algorithm>
#include <numeric>

namespace fusenet {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box clamp_unit(const Box& b) {
  const double x0 = std::clamp(b.x0(), 0.0, 1.0);
  const double y0 = std::clamp(b.y0(), 0.0, 1.0);
  const double x1 = std::clamp(b.x1(), 0.0, 1.0);
  const double y1 = std::clamp(b.y1(), 0.0, 1.0);
  return Box{0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
}

std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
  std::vector<Detection> kept;
  for (auto i : order) {
    const auto& cand = detections[i];
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == cand.class_id && k.image_id == cand.image_id && iou(k.box, cand.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

}  // namespace fusenet
