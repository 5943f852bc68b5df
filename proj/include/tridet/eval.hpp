#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "tridet/boxes.hpp"
#include "tridet/detector.hpp"
#include "tridet/synthdata.hpp"

namespace tridet {

struct ScoredBox {
  std::size_t image = 0;
  BBox bbox;
  double score = 0.0;
};

struct GtBox {
  std::size_t image = 0;
  BBox bbox;
};

struct ApResult {
  double ap = 0.0;
  bool vacuous = false;  // no ground truth for the class
  std::size_t num_dets = 0;
  std::size_t num_gt = 0;
};

/// Average precision for one class. Detections are visited by descending
/// score (stable); each claims the unmatched ground-truth box of its image
/// with the highest IoU, and counts as a true positive if that IoU is at
/// least `iou_thresh`. All-point interpolation unless `eleven_point`.
ApResult voc_ap(std::span<const ScoredBox> dets, std::span<const GtBox> gts, double iou_thresh,
                bool eleven_point = false);

/// Maps model label k (1-based) to dataset class id label_to_class[k-1].
using LabelMap = std::vector<int>;

struct EvalOptions {
  double iou_thresh = 0.5;
  double score_thresh = 0.5;
  double nms_thresh = 0.3;
  bool eleven_point = false;
};

struct APReport {
  std::map<int, double> per_class_ap;
  std::map<int, std::size_t> num_dets;
  std::map<int, std::size_t> num_gt;
  std::vector<int> vacuous;
  double map_all = 0.0;
  double map_old = 0.0;
  double map_new = 0.0;
};

/// Per-scene detections with labels already mapped to class ids.
std::vector<std::vector<Detection>> detect_scenes(const DetectorModel& model,
                                                  std::span<const Scene> scenes,
                                                  const LabelMap& labels, const EvalOptions& opts);

/// Builds the report from precomputed detections. Means skip vacuous classes;
/// an empty mean is 0.
APReport report_from_detections(std::span<const std::vector<Detection>> dets,
                                std::span<const Scene> scenes, std::span<const int> old_classes,
                                std::span<const int> new_classes, const EvalOptions& opts);

APReport evaluate_model(const DetectorModel& model, std::span<const Scene> scenes,
                        const LabelMap& labels, std::span<const int> old_classes,
                        std::span<const int> new_classes, const EvalOptions& opts = {});

nlohmann::json report_to_json(const APReport& report);

}  // namespace tridet
