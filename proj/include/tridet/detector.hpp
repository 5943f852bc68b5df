#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tridet/autodiff.hpp"
#include "tridet/boxes.hpp"
#include "tridet/tensor.hpp"

namespace tridet {

using Rng = std::mt19937_64;

/// Architecture plus every matching/sampling constant of the toy detector.
/// Defaults are scaled-down Faster R-CNN values for 64x64 inputs.
struct DetectorConfig {
  std::size_t image_size = 64;
  std::size_t conv1 = 8;
  std::size_t conv2 = 16;
  std::size_t conv3 = 16;
  std::size_t rpn_channels = 16;
  std::size_t fc = 64;
  std::size_t pool = 4;
  std::vector<double> anchor_sides = {8.0, 16.0, 32.0};

  std::size_t num_proposals = 32;
  double proposal_nms = 0.7;
  double min_proposal_side = 1.0;

  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  std::size_t rpn_batch = 64;
  double rpn_pos_fraction = 0.5;

  double rcnn_pos_iou = 0.5;
  std::size_t rcnn_batch = 16;
  double rcnn_pos_fraction = 0.25;

  static constexpr std::size_t kStride = 4;
  std::size_t feature_size() const { return image_size / kStride; }
  std::size_t num_anchors() const { return anchor_sides.size(); }

  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

/// Parameter slots in checkpoint order. Slots [kConv1W, kConv3B] form the backbone.
enum ParamSlot : std::size_t {
  kConv1W, kConv1B, kConv2W, kConv2B, kConv3W, kConv3B,
  kRpnConvW, kRpnConvB, kRpnObjW, kRpnObjB, kRpnDeltaW, kRpnDeltaB,
  kFc1W, kFc1B, kFc2W, kFc2B, kClsW, kClsB, kBoxW, kBoxB,
  kNumParamSlots
};
inline constexpr std::size_t kBackboneSlots = kConv3B + 1;

struct Parameter {
  std::string name;
  Tensor value;
};

struct DetectorModel {
  DetectorConfig config;
  int num_classes = 0;  // foreground classes; logits have num_classes + 1 columns
  std::uint64_t seed = 0;
  std::vector<Parameter> params;

  const Tensor& param(ParamSlot s) const { return params.at(s).value; }
  Tensor& param(ParamSlot s) { return params.at(s).value; }
};

/// He-initialised backbone/FC layers, small-normal output heads, zero biases.
DetectorModel make_detector(const DetectorConfig& config, int num_classes, Rng& rng);

std::vector<std::string> param_names();
std::vector<Shape> param_shapes(const DetectorConfig& config, int num_classes);
void validate_model(const DetectorModel& model);

/// A model's parameters placed into a graph.
struct BoundModel {
  const DetectorModel* model = nullptr;
  std::vector<Var> params;
  Var operator[](ParamSlot s) const { return params[s]; }
};

BoundModel bind(Graph& g, const DetectorModel& model, bool trainable);

struct Proposal {
  BBox bbox;
  double objectness = 0.0;
};

struct RpnOutput {
  Var objectness;  // [A, H, W] logits
  Var deltas;      // [4A, H, W], channel a*4 + k
};

struct HeadOutput {
  Var cls_logits;  // [n, C+1]
  Var deltas;      // [n, 4C], column (c-1)*4 + k for class c
};

/// Anchor i = a*H*W + y*W + x, centred at (4x+2, 4y+2).
std::vector<BBox> make_anchors(const DetectorConfig& config);

Var forward_features(Graph& g, const BoundModel& m, Var image);
RpnOutput rpn_forward(Graph& g, const BoundModel& m, Var features);
std::vector<Proposal> propose(const DetectorConfig& config, const Tensor& objectness,
                              const Tensor& deltas);
Var pool_rois(Graph& g, Var features, std::span<const BBox> rois, const DetectorConfig& config);
HeadOutput head_forward(Graph& g, const BoundModel& m, Var pooled);

/// Post-processing of head outputs over `rois`: per-class softmax score,
/// per-class decode, clip, strict score filter, per-class NMS.
std::vector<Detection> postprocess(const DetectorConfig& config, std::span<const BBox> rois,
                                   const Tensor& cls_logits, const Tensor& deltas,
                                   int num_classes, double score_thresh, double nms_thresh);

std::vector<Detection> detect_on_features(Graph& g, const BoundModel& m, Var features,
                                          double score_thresh, double nms_thresh);

std::vector<Detection> detect(const DetectorModel& model, const Tensor& image,
                              double score_thresh = 0.5, double nms_thresh = 0.3);

/// Image-level convenience wrapper.
std::vector<Proposal> propose(const DetectorModel& model, const Tensor& image);

void require_image_shape(const DetectorConfig& config, const Tensor& image);

// ---------------------------------------------------------------------------
// Training losses

struct FrcnnTargets {
  std::vector<BBox> rpn_boxes;         // class-agnostic
  std::vector<LabeledBox> rcnn_boxes;  // labels in 1..num_classes
};

struct RpnPlan {
  std::vector<std::size_t> sampled;   // anchor indices, sorted
  std::vector<double> labels;         // 1 positive / 0 negative, parallel to sampled
  std::vector<std::size_t> positives; // anchor indices, sorted
  std::vector<BoxDeltas> targets;     // parallel to positives
};

struct RcnnPlan {
  std::vector<BBox> rois;
  std::vector<std::size_t> labels;    // 0 background
  std::vector<std::size_t> pos_rows;  // rows of rois with label > 0
  std::vector<BoxDeltas> targets;     // parallel to pos_rows
};

/// Non-differentiable half of the loss: anchor matching, RoI matching and
/// seeded sampling. Freezing it makes the loss a smooth function of the
/// parameters.
struct LossPlan {
  RpnPlan rpn;
  RcnnPlan rcnn;
};

/// Anchor labels before sampling: 1 positive, 0 negative, -1 ignored.
struct AnchorMatch {
  std::vector<int> label;
  std::vector<std::size_t> target;  // argmax target per anchor
};
AnchorMatch match_anchors(const DetectorConfig& config, std::span<const BBox> anchors,
                          std::span<const BBox> targets);

LossPlan plan_losses(const DetectorConfig& config, std::span<const Proposal> proposals,
                     const FrcnnTargets& targets, Rng& rng);

struct FrcnnLoss {
  Var rpn_cls, rpn_reg, rcnn_cls, rcnn_reg;
  Var total;
  bool has_rcnn = false;
  Var pooled;       // valid when has_rcnn
  HeadOutput head;  // valid when has_rcnn
};

FrcnnLoss frcnn_loss(Graph& g, const BoundModel& m, Var features, const RpnOutput& rpn,
                     const LossPlan& plan);

/// Full single-image loss: forward, propose, plan with `rng`, evaluate.
double frcnn_loss_value(const DetectorModel& model, const Tensor& image,
                        const FrcnnTargets& targets, Rng& rng);

}  // namespace tridet
