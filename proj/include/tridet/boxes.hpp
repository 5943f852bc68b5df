#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace tridet {

/// Axis-aligned box in continuous pixel coordinates; area is (x2-x1)*(y2-y1).
struct BBox {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return x1 + 0.5 * width(); }
  double cy() const { return y1 + 0.5 * height(); }
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
           x2 > x1 && y2 > y1;
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct LabeledBox {
  BBox bbox;
  int class_id = 0;
  friend bool operator==(const LabeledBox&, const LabeledBox&) = default;
};

/// class_id 0 is background and never appears in a Detection.
struct Detection {
  BBox bbox;
  int class_id = 0;
  double score = 0.0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

struct BoxDeltas {
  double dx = 0.0, dy = 0.0, dw = 0.0, dh = 0.0;
};

class InvalidBox : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// log(16): cap on dw/dh before exponentiation.
inline const double kMaxDeltaLog = std::log(16.0);

void require_valid(const BBox& b);

double iou(const BBox& a, const BBox& b);

/// Greedy class-agnostic suppression. Returns kept indices ordered by
/// descending score, ties by lower index. Suppression is strict: IoU > thresh.
std::vector<std::size_t> nms_indices(std::span<const BBox> boxes, std::span<const double> scores,
                                     double iou_thresh);

/// Greedy NMS run independently per class_id; output by descending score.
std::vector<Detection> nms_per_class(std::span<const Detection> dets, double iou_thresh);

BoxDeltas encode_deltas(const BBox& anchor, const BBox& target);
BBox decode_deltas(const BBox& anchor, const BoxDeltas& deltas);

BBox clip_box(const BBox& b, double width, double height);

}  // namespace tridet
