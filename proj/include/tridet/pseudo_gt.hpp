#pragma once

#include <span>
#include <vector>

#include "tridet/boxes.hpp"
#include "tridet/detector.hpp"

namespace tridet {

struct Thresholds {
  double theta_low = 0.1;
  double theta_high = 0.9;
  double theta_iou = 0.3;

  /// Throws std::invalid_argument unless 0 < low <= high < 1 and iou in (0,1).
  void validate() const;
  static Thresholds single(double theta, double theta_iou = 0.3) {
    return Thresholds{theta, theta, theta_iou};
  }
};

/// Old-model boxes split into the two target sets. In both target lists the
/// pseudo boxes come first, followed by the new-class ground truth.
struct PseudoGTSet {
  std::vector<Detection> boxes_p;
  std::vector<BBox> rpn_targets;
  std::vector<LabeledBox> rcnn_targets;
  std::size_t rpn_pseudo_count = 0;
  std::size_t rcnn_pseudo_count = 0;

  FrcnnTargets as_targets() const { return FrcnnTargets{rpn_targets, rcnn_targets}; }
};

/// Drops every detection whose IoU with some new-class GT box exceeds theta_iou.
std::vector<Detection> filter_against_gt(std::span<const Detection> dets,
                                         std::span<const LabeledBox> new_gt, double theta_iou);

/// Old-model inference with theta_low as confidence floor and theta_iou as
/// NMS threshold, followed by the GT-overlap filter.
std::vector<Detection> generate_pseudo_gt(const DetectorModel& om, const Tensor& image,
                                          std::span<const LabeledBox> new_gt,
                                          const Thresholds& th);

/// Same, reusing old-model features already computed in `g`.
std::vector<Detection> generate_pseudo_gt(Graph& g, const BoundModel& om, Var features,
                                          std::span<const LabeledBox> new_gt,
                                          const Thresholds& th);

PseudoGTSet build_training_targets(std::span<const Detection> boxes_p,
                                   std::span<const LabeledBox> new_gt, const Thresholds& th);

}  // namespace tridet
