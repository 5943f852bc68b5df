#include "tridet/boxes.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace tridet {

void require_valid(const BBox& b) {
  if (!b.valid())
    throw InvalidBox("degenerate box (" + std::to_string(b.x1) + "," + std::to_string(b.y1) +
                     "," + std::to_string(b.x2) + "," + std::to_string(b.y2) + ")");
}

double iou(const BBox& a, const BBox& b) {
  require_valid(a);
  require_valid(b);
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

namespace {

std::vector<std::size_t> score_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

std::vector<std::size_t> nms_indices(std::span<const BBox> boxes, std::span<const double> scores,
                                     double iou_thresh) {
  if (boxes.size() != scores.size())
    throw std::invalid_argument("nms_indices: boxes and scores differ in length");
  std::vector<std::size_t> kept;
  for (std::size_t i : score_order(scores)) {
    bool suppressed = false;
    for (std::size_t k : kept)
      if (iou(boxes[i], boxes[k]) > iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

std::vector<Detection> nms_per_class(std::span<const Detection> dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0))
    throw std::invalid_argument("nms_per_class: iou_thresh must lie in (0,1)");
  std::vector<double> scores(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) scores[i] = dets[i].score;
  std::vector<Detection> kept;
  for (std::size_t i : score_order(scores)) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.class_id == dets[i].class_id && iou(dets[i].bbox, k.bbox) > iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

BoxDeltas encode_deltas(const BBox& anchor, const BBox& target) {
  require_valid(anchor);
  require_valid(target);
  return BoxDeltas{(target.cx() - anchor.cx()) / anchor.width(),
                   (target.cy() - anchor.cy()) / anchor.height(),
                   std::log(target.width() / anchor.width()),
                   std::log(target.height() / anchor.height())};
}

BBox decode_deltas(const BBox& anchor, const BoxDeltas& d) {
  const double w = anchor.width() * std::exp(std::min(d.dw, kMaxDeltaLog));
  const double h = anchor.height() * std::exp(std::min(d.dh, kMaxDeltaLog));
  const double cx = anchor.cx() + d.dx * anchor.width();
  const double cy = anchor.cy() + d.dy * anchor.height();
  return BBox{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

BBox clip_box(const BBox& b, double width, double height) {
  return BBox{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
              std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

}  // namespace tridet
