#include "fusenet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "fusenet/errors.hpp"

namespace fusenet::metrics {

namespace {

// True-positive flags of detections in ranked order.
std::vector<bool> match_ranked(std::span<const Detection> detections, std::span<const GroundTruthBox> truths,
                               double iou_threshold, std::vector<std::size_t>& order) {
  order.resize(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
  std::vector<bool> used(truths.size(), false);
  std::vector<bool> tp(detections.size(), false);
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const auto& det = detections[order[rank]];
    double best = -1.0;
    std::size_t best_idx = truths.size();
    for (std::size_t t = 0; t < truths.size(); ++t) {
      if (used[t] || truths[t].image_id != det.image_id) continue;
      const double v = iou(det.box, truths[t].box);
      if (v > best) {
        best = v;
        best_idx = t;
      }
    }
    if (best_idx < truths.size() && best >= iou_threshold) {
      used[best_idx] = true;
      tp[rank] = true;
    }
  }
  return tp;
}

}  // namespace

std::vector<double> iou_ladder() {
  std::vector<double> out;
  for (int i = 0; i < 10; ++i) out.push_back(0.5 + 0.05 * i);
  return out;
}

double average_precision(std::span<const Detection> detections, std::span<const GroundTruthBox> truths,
                         double iou_threshold) {
  if (truths.empty() || detections.empty()) return 0.0;
  std::vector<std::size_t> order;
  const auto tp = match_ranked(detections, truths, iou_threshold, order);
  const double n_truth = static_cast<double>(truths.size());
  std::vector<double> precision(tp.size()), recall(tp.size());
  std::size_t hits = 0;
  for (std::size_t k = 0; k < tp.size(); ++k) {
    hits += tp[k] ? 1 : 0;
    precision[k] = static_cast<double>(hits) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(hits) / n_truth;
  }
  for (std::size_t k = tp.size() - 1; k-- > 0;) precision[k] = std::max(precision[k], precision[k + 1]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < tp.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

MetricsReport mean_ap(std::span<const Detection> detections, std::span<const GroundTruthBox> truths,
                      std::span<const double> iou_thresholds, double conf_threshold) {
  if (truths.empty()) throw InputError("mean_ap: no ground-truth boxes, so no classes to evaluate");
  std::map<int, std::pair<std::vector<Detection>, std::vector<GroundTruthBox>>> by_class;
  for (const auto& t : truths) by_class[t.class_id].second.push_back(t);
  for (const auto& d : detections) {
    auto it = by_class.find(d.class_id);
    if (it != by_class.end()) it->second.first.push_back(d);
  }

  MetricsReport report;
  report.conf_threshold = conf_threshold;
  for (const auto& [cls, pair] : by_class) {
    const auto& [dets, gts] = pair;
    ClassMetrics cm;
    cm.class_id = cls;
    cm.truths = gts.size();
    cm.ap50 = average_precision(dets, gts, 0.5);
    double total = 0.0;
    for (double thr : iou_thresholds) total += average_precision(dets, gts, thr);
    cm.ap50_95 = iou_thresholds.empty() ? cm.ap50 : total / static_cast<double>(iou_thresholds.size());

    std::vector<Detection> confident;
    for (const auto& d : dets) {
      if (d.score >= conf_threshold) confident.push_back(d);
    }
    std::vector<std::size_t> order;
    const auto tp = match_ranked(confident, gts, 0.5, order);
    const auto hits = static_cast<double>(std::count(tp.begin(), tp.end(), true));
    cm.precision = confident.empty() ? 0.0 : hits / static_cast<double>(confident.size());
    cm.recall = hits / static_cast<double>(gts.size());
    report.per_class.push_back(cm);
  }
  const double n = static_cast<double>(report.per_class.size());
  for (const auto& cm : report.per_class) {
    report.map50 += cm.ap50;
    report.map50_95 += cm.ap50_95;
    report.precision += cm.precision;
    report.recall += cm.recall;
  }
  report.map50 /= n;
  report.map50_95 /= n;
  report.precision /= n;
  report.recall /= n;
  return report;
}

MetricsReport mean_ap(std::span<const Detection> detections, std::span<const GroundTruthBox> truths) {
  const auto ladder = iou_ladder();
  return mean_ap(detections, truths, ladder);
}

}  // namespace fusenet::metrics
