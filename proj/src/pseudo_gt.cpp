#include "tridet/pseudo_gt.hpp"

#include <stdexcept>
#include <string>

namespace tridet {

void Thresholds::validate() const {
  if (!(theta_low > 0.0 && theta_low <= theta_high && theta_high < 1.0))
    throw std::invalid_argument("thresholds must satisfy 0 < theta_low <= theta_high < 1 (got " +
                                std::to_string(theta_low) + ", " + std::to_string(theta_high) +
                                ")");
  if (!(theta_iou > 0.0 && theta_iou < 1.0))
    throw std::invalid_argument("theta_iou must lie in (0,1), got " + std::to_string(theta_iou));
}

std::vector<Detection> filter_against_gt(std::span<const Detection> dets,
                                         std::span<const LabeledBox> new_gt, double theta_iou) {
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    double worst = 0.0;
    for (const auto& gt : new_gt) worst = std::max(worst, iou(d.bbox, gt.bbox));
    if (!(worst > theta_iou)) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> generate_pseudo_gt(Graph& g, const BoundModel& om, Var features,
                                          std::span<const LabeledBox> new_gt,
                                          const Thresholds& th) {
  th.validate();
  const auto dets = detect_on_features(g, om, features, th.theta_low, th.theta_iou);
  return filter_against_gt(dets, new_gt, th.theta_iou);
}

std::vector<Detection> generate_pseudo_gt(const DetectorModel& om, const Tensor& image,
                                          std::span<const LabeledBox> new_gt,
                                          const Thresholds& th) {
  th.validate();
  const auto dets = detect(om, image, th.theta_low, th.theta_iou);
  return filter_against_gt(dets, new_gt, th.theta_iou);
}

PseudoGTSet build_training_targets(std::span<const Detection> boxes_p,
                                   std::span<const LabeledBox> new_gt, const Thresholds& th) {
  th.validate();
  PseudoGTSet set;
  set.boxes_p.assign(boxes_p.begin(), boxes_p.end());
  for (const auto& d : boxes_p) {
    if (d.score > th.theta_low) set.rpn_targets.push_back(d.bbox);
    if (d.score > th.theta_high) set.rcnn_targets.push_back({d.bbox, d.class_id});
  }
  set.rpn_pseudo_count = set.rpn_targets.size();
  set.rcnn_pseudo_count = set.rcnn_targets.size();
  for (const auto& gt : new_gt) {
    set.rpn_targets.push_back(gt.bbox);
    set.rcnn_targets.push_back(gt);
  }
  return set;
}

}  // namespace tridet
