#include "tridet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tridet {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

std::vector<std::size_t> sample_subset(std::vector<std::size_t> pool, std::size_t count,
                                       Rng& rng) {
  if (pool.size() > count) {
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(count);
  }
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

std::vector<std::string> param_names() {
  return {"conv1.weight",     "conv1.bias",     "conv2.weight",      "conv2.bias",
          "conv3.weight",     "conv3.bias",     "rpn.conv.weight",   "rpn.conv.bias",
          "rpn.obj.weight",   "rpn.obj.bias",   "rpn.delta.weight",  "rpn.delta.bias",
          "fc1.weight",       "fc1.bias",       "fc2.weight",        "fc2.bias",
          "cls.weight",       "cls.bias",       "bbox.weight",       "bbox.bias"};
}

std::vector<Shape> param_shapes(const DetectorConfig& c, int num_classes) {
  const std::size_t A = c.num_anchors();
  const auto C = static_cast<std::size_t>(num_classes);
  return {
      {c.conv1, 3, 3, 3},        {c.conv1},
      {c.conv2, c.conv1, 3, 3},  {c.conv2},
      {c.conv3, c.conv2, 3, 3},  {c.conv3},
      {c.rpn_channels, c.conv3, 3, 3}, {c.rpn_channels},
      {A, c.rpn_channels, 1, 1}, {A},
      {4 * A, c.rpn_channels, 1, 1}, {4 * A},
      {c.fc, c.conv3 * c.pool * c.pool}, {c.fc},
      {c.fc, c.fc},              {c.fc},
      {C + 1, c.fc},             {C + 1},
      {4 * C, c.fc},             {4 * C},
  };
}

DetectorModel make_detector(const DetectorConfig& config, int num_classes, Rng& rng) {
  if (num_classes < 1) throw std::invalid_argument("make_detector: need at least one class");
  if (config.image_size % DetectorConfig::kStride != 0 || config.image_size == 0)
    throw std::invalid_argument("make_detector: image size must be a positive multiple of 4");
  DetectorModel m;
  m.config = config;
  m.num_classes = num_classes;
  const auto names = param_names();
  const auto shapes = param_shapes(config, num_classes);
  for (std::size_t s = 0; s < kNumParamSlots; ++s) {
    const Shape& shape = shapes[s];
    Tensor value;
    if (shape.size() == 1) {
      value = Tensor(shape, 0.0);
    } else {
      double stddev = 0.0;
      switch (s) {
        case kRpnObjW:
        case kRpnDeltaW:
        case kClsW: stddev = 0.01; break;
        case kBoxW: stddev = 0.001; break;
        default: {
          const double fan_in = static_cast<double>(shape_numel(shape) / shape[0]);
          stddev = std::sqrt(2.0 / fan_in);
        }
      }
      value = normal_tensor(shape, stddev, rng);
    }
    m.params.push_back({names[s], std::move(value)});
  }
  return m;
}

void validate_model(const DetectorModel& model) {
  if (model.num_classes < 1) throw std::invalid_argument("model has no foreground classes");
  if (model.params.size() != kNumParamSlots)
    throw std::invalid_argument("model has " + std::to_string(model.params.size()) +
                                " parameter tensors, expected " +
                                std::to_string(kNumParamSlots));
  const auto shapes = param_shapes(model.config, model.num_classes);
  for (std::size_t s = 0; s < kNumParamSlots; ++s) {
    if (model.params[s].value.shape() != shapes[s])
      throw ShapeError("parameter " + model.params[s].name + " has shape " +
                       shape_str(model.params[s].value.shape()) + ", expected " +
                       shape_str(shapes[s]));
    if (!model.params[s].value.all_finite())
      throw std::invalid_argument("parameter " + model.params[s].name + " is not finite");
  }
}

BoundModel bind(Graph& g, const DetectorModel& model, bool trainable) {
  BoundModel b;
  b.model = &model;
  b.params.reserve(model.params.size());
  for (const auto& p : model.params) b.params.push_back(g.leaf(p.value, trainable));
  return b;
}

std::vector<BBox> make_anchors(const DetectorConfig& config) {
  const std::size_t F = config.feature_size();
  std::vector<BBox> anchors;
  anchors.reserve(config.num_anchors() * F * F);
  const double stride = static_cast<double>(DetectorConfig::kStride);
  for (double side : config.anchor_sides)
    for (std::size_t y = 0; y < F; ++y)
      for (std::size_t x = 0; x < F; ++x) {
        const double cx = stride * static_cast<double>(x) + 0.5 * stride;
        const double cy = stride * static_cast<double>(y) + 0.5 * stride;
        anchors.push_back({cx - 0.5 * side, cy - 0.5 * side, cx + 0.5 * side, cy + 0.5 * side});
      }
  return anchors;
}

void require_image_shape(const DetectorConfig& config, const Tensor& image) {
  const Shape want{3, config.image_size, config.image_size};
  if (image.shape() != want)
    throw ShapeError("image must have shape " + shape_str(want) + ", got " +
                     shape_str(image.shape()));
}

Var forward_features(Graph& g, const BoundModel& m, Var image) {
  require_image_shape(m.model->config, g.value(image));
  Var h = ops::relu(g, ops::conv2d(g, image, m[kConv1W], m[kConv1B], 1, 1));
  h = ops::max_pool2(g, h);
  h = ops::relu(g, ops::conv2d(g, h, m[kConv2W], m[kConv2B], 1, 1));
  h = ops::max_pool2(g, h);
  return ops::relu(g, ops::conv2d(g, h, m[kConv3W], m[kConv3B], 1, 1));
}

RpnOutput rpn_forward(Graph& g, const BoundModel& m, Var features) {
  Var h = ops::relu(g, ops::conv2d(g, features, m[kRpnConvW], m[kRpnConvB], 1, 1));
  return RpnOutput{ops::conv2d(g, h, m[kRpnObjW], m[kRpnObjB], 1, 0),
                   ops::conv2d(g, h, m[kRpnDeltaW], m[kRpnDeltaB], 1, 0)};
}

std::vector<Proposal> propose(const DetectorConfig& config, const Tensor& objectness,
                              const Tensor& deltas) {
  const auto anchors = make_anchors(config);
  const std::size_t F = config.feature_size();
  const std::size_t HW = F * F;
  if (objectness.numel() != anchors.size() || deltas.numel() != 4 * anchors.size())
    throw ShapeError("propose: RPN outputs do not match the anchor grid");
  const double S = static_cast<double>(config.image_size);

  std::vector<BBox> boxes;
  std::vector<double> scores;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const std::size_t a = i / HW, cell = i % HW;
    auto d = [&](std::size_t k) { return deltas[(a * 4 + k) * HW + cell]; };
    BBox b = clip_box(decode_deltas(anchors[i], {d(0), d(1), d(2), d(3)}), S, S);
    if (b.width() < config.min_proposal_side || b.height() < config.min_proposal_side) continue;
    boxes.push_back(b);
    scores.push_back(sigmoid(objectness[i]));
  }

  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
  std::vector<Proposal> out;
  for (std::size_t i : order) {
    if (out.size() >= config.num_proposals) break;
    bool suppressed = false;
    for (const auto& p : out)
      if (iou(boxes[i], p.bbox) > config.proposal_nms) {
        suppressed = true;
        break;
      }
    if (!suppressed) out.push_back({boxes[i], scores[i]});
  }
  return out;
}

Var pool_rois(Graph& g, Var features, std::span<const BBox> rois, const DetectorConfig& config) {
  std::vector<RoiRect> rects;
  rects.reserve(rois.size());
  for (const auto& r : rois) rects.push_back({r.x1, r.y1, r.x2, r.y2});
  return ops::roi_pool(g, features, rects, config.pool,
                       1.0 / static_cast<double>(DetectorConfig::kStride));
}

HeadOutput head_forward(Graph& g, const BoundModel& m, Var pooled) {
  const Tensor& p = g.value(pooled);
  if (p.rank() != 4) throw ShapeError("head_forward: pooled must be [n,c,P,P]");
  const std::size_t n = p.dim(0);
  Var x = ops::reshape(g, pooled, Shape{n, p.numel() / n});
  x = ops::relu(g, ops::linear(g, x, m[kFc1W], m[kFc1B]));
  x = ops::relu(g, ops::linear(g, x, m[kFc2W], m[kFc2B]));
  return HeadOutput{ops::linear(g, x, m[kClsW], m[kClsB]), ops::linear(g, x, m[kBoxW], m[kBoxB])};
}

std::vector<Detection> postprocess(const DetectorConfig& config, std::span<const BBox> rois,
                                   const Tensor& cls_logits, const Tensor& deltas,
                                   int num_classes, double score_thresh, double nms_thresh) {
  const auto C = static_cast<std::size_t>(num_classes);
  const double S = static_cast<double>(config.image_size);
  std::vector<Detection> dets;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    double mx = cls_logits.at(r, 0);
    for (std::size_t c = 1; c <= C; ++c) mx = std::max(mx, cls_logits.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c <= C; ++c) z += std::exp(cls_logits.at(r, c) - mx);
    for (std::size_t c = 1; c <= C; ++c) {
      const double score = std::exp(cls_logits.at(r, c) - mx) / z;
      if (!(score > score_thresh)) continue;
      const std::size_t base = (c - 1) * 4;
      BBox b = clip_box(decode_deltas(rois[r], {deltas.at(r, base), deltas.at(r, base + 1),
                                                deltas.at(r, base + 2), deltas.at(r, base + 3)}),
                        S, S);
      if (!b.valid()) continue;
      dets.push_back({b, static_cast<int>(c), score});
    }
  }
  return nms_per_class(dets, nms_thresh);
}

std::vector<Detection> detect_on_features(Graph& g, const BoundModel& m, Var features,
                                          double score_thresh, double nms_thresh) {
  const auto& config = m.model->config;
  RpnOutput rpn = rpn_forward(g, m, features);
  const auto proposals = propose(config, g.value(rpn.objectness), g.value(rpn.deltas));
  if (proposals.empty()) return {};
  std::vector<BBox> rois;
  for (const auto& p : proposals) rois.push_back(p.bbox);
  HeadOutput head = head_forward(g, m, pool_rois(g, features, rois, config));
  return postprocess(config, rois, g.value(head.cls_logits), g.value(head.deltas),
                     m.model->num_classes, score_thresh, nms_thresh);
}

std::vector<Detection> detect(const DetectorModel& model, const Tensor& image,
                              double score_thresh, double nms_thresh) {
  Graph g;
  BoundModel m = bind(g, model, false);
  Var features = forward_features(g, m, g.constant(image));
  return detect_on_features(g, m, features, score_thresh, nms_thresh);
}

std::vector<Proposal> propose(const DetectorModel& model, const Tensor& image) {
  Graph g;
  BoundModel m = bind(g, model, false);
  RpnOutput rpn = rpn_forward(g, m, forward_features(g, m, g.constant(image)));
  return propose(model.config, g.value(rpn.objectness), g.value(rpn.deltas));
}

// ---------------------------------------------------------------------------
// Losses

AnchorMatch match_anchors(const DetectorConfig& config, std::span<const BBox> anchors,
                          std::span<const BBox> targets) {
  AnchorMatch m;
  m.label.assign(anchors.size(), 0);
  m.target.assign(anchors.size(), 0);
  if (targets.empty()) return m;
  std::vector<double> max_iou(anchors.size(), 0.0);
  std::vector<double> best_for_target(targets.size(), 0.0);
  std::vector<double> ious(anchors.size() * targets.size());
  for (std::size_t a = 0; a < anchors.size(); ++a)
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const double v = iou(anchors[a], targets[t]);
      ious[a * targets.size() + t] = v;
      if (v > max_iou[a]) {
        max_iou[a] = v;
        m.target[a] = t;
      }
      best_for_target[t] = std::max(best_for_target[t], v);
    }
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    bool positive = max_iou[a] >= config.rpn_pos_iou;
    for (std::size_t t = 0; t < targets.size() && !positive; ++t)
      if (best_for_target[t] > 0.0 && ious[a * targets.size() + t] == best_for_target[t])
        positive = true;
    if (positive)
      m.label[a] = 1;
    else if (max_iou[a] <= config.rpn_neg_iou)
      m.label[a] = 0;
    else
      m.label[a] = -1;
  }
  return m;
}

LossPlan plan_losses(const DetectorConfig& config, std::span<const Proposal> proposals,
                     const FrcnnTargets& targets, Rng& rng) {
  LossPlan plan;

  // RPN: match, then sample positives first so the draw order is fixed.
  const auto anchors = make_anchors(config);
  const AnchorMatch match = match_anchors(config, anchors, targets.rpn_boxes);
  std::vector<std::size_t> pos, neg;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (match.label[a] == 1) pos.push_back(a);
    else if (match.label[a] == 0) neg.push_back(a);
  }
  const auto pos_cap = static_cast<std::size_t>(
      std::floor(static_cast<double>(config.rpn_batch) * config.rpn_pos_fraction));
  pos = sample_subset(std::move(pos), pos_cap, rng);
  neg = sample_subset(std::move(neg), config.rpn_batch - pos.size(), rng);
  {
    std::vector<std::pair<std::size_t, double>> merged;
    for (auto a : pos) merged.emplace_back(a, 1.0);
    for (auto a : neg) merged.emplace_back(a, 0.0);
    std::sort(merged.begin(), merged.end());
    for (const auto& [a, l] : merged) {
      plan.rpn.sampled.push_back(a);
      plan.rpn.labels.push_back(l);
    }
  }
  plan.rpn.positives = pos;
  for (auto a : pos)
    plan.rpn.targets.push_back(encode_deltas(anchors[a], targets.rpn_boxes[match.target[a]]));

  // R-CNN: candidates are the proposals followed by the labeled targets.
  std::vector<BBox> candidates;
  for (const auto& p : proposals) candidates.push_back(p.bbox);
  for (const auto& t : targets.rcnn_boxes) candidates.push_back(t.bbox);
  std::vector<std::size_t> cand_label(candidates.size(), 0), cand_target(candidates.size(), 0);
  std::vector<std::size_t> rpos, rneg;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = 0.0;
    for (std::size_t t = 0; t < targets.rcnn_boxes.size(); ++t) {
      const double v = iou(candidates[i], targets.rcnn_boxes[t].bbox);
      if (v > best) {
        best = v;
        cand_target[i] = t;
      }
    }
    if (best >= config.rcnn_pos_iou) {
      cand_label[i] = static_cast<std::size_t>(targets.rcnn_boxes[cand_target[i]].class_id);
      rpos.push_back(i);
    } else {
      rneg.push_back(i);
    }
  }
  const auto rpos_cap = static_cast<std::size_t>(
      std::floor(static_cast<double>(config.rcnn_batch) * config.rcnn_pos_fraction));
  rpos = sample_subset(std::move(rpos), rpos_cap, rng);
  rneg = sample_subset(std::move(rneg), config.rcnn_batch - rpos.size(), rng);
  std::vector<std::size_t> rows(rpos);
  rows.insert(rows.end(), rneg.begin(), rneg.end());
  std::sort(rows.begin(), rows.end());
  for (std::size_t i : rows) {
    const std::size_t row = plan.rcnn.rois.size();
    plan.rcnn.rois.push_back(candidates[i]);
    plan.rcnn.labels.push_back(cand_label[i]);
    if (cand_label[i] > 0) {
      plan.rcnn.pos_rows.push_back(row);
      plan.rcnn.targets.push_back(
          encode_deltas(candidates[i], targets.rcnn_boxes[cand_target[i]].bbox));
    }
  }
  return plan;
}

FrcnnLoss frcnn_loss(Graph& g, const BoundModel& m, Var features, const RpnOutput& rpn,
                     const LossPlan& plan) {
  const auto& config = m.model->config;
  const std::size_t HW = config.feature_size() * config.feature_size();
  FrcnnLoss out;
  Var zero = g.constant(Tensor::scalar(0.0));

  out.rpn_cls = plan.rpn.sampled.empty()
                    ? zero
                    : ops::sigmoid_bce(g, ops::gather(g, rpn.objectness, plan.rpn.sampled),
                                       plan.rpn.labels);
  if (plan.rpn.positives.empty()) {
    out.rpn_reg = zero;
  } else {
    std::vector<std::size_t> idx;
    std::vector<double> tgt;
    for (std::size_t i = 0; i < plan.rpn.positives.size(); ++i) {
      const std::size_t a = plan.rpn.positives[i] / HW, cell = plan.rpn.positives[i] % HW;
      const auto& t = plan.rpn.targets[i];
      const double tv[4] = {t.dx, t.dy, t.dw, t.dh};
      for (std::size_t k = 0; k < 4; ++k) {
        idx.push_back((a * 4 + k) * HW + cell);
        tgt.push_back(tv[k]);
      }
    }
    Var diff = ops::sub(g, ops::gather(g, rpn.deltas, std::move(idx)),
                        g.constant(Tensor::from_vector(std::move(tgt))));
    out.rpn_reg = ops::scale(g, ops::sum(g, ops::smooth_l1(g, diff)),
                             1.0 / static_cast<double>(plan.rpn.positives.size()));
  }

  out.rcnn_cls = zero;
  out.rcnn_reg = zero;
  if (!plan.rcnn.rois.empty()) {
    out.has_rcnn = true;
    out.pooled = pool_rois(g, features, plan.rcnn.rois, config);
    out.head = head_forward(g, m, out.pooled);
    out.rcnn_cls = ops::softmax_cross_entropy(g, out.head.cls_logits, plan.rcnn.labels);
    if (!plan.rcnn.pos_rows.empty()) {
      const std::size_t width = 4 * static_cast<std::size_t>(m.model->num_classes);
      std::vector<std::size_t> idx;
      std::vector<double> tgt;
      for (std::size_t i = 0; i < plan.rcnn.pos_rows.size(); ++i) {
        const std::size_t row = plan.rcnn.pos_rows[i];
        const std::size_t base = row * width + (plan.rcnn.labels[row] - 1) * 4;
        const auto& t = plan.rcnn.targets[i];
        const double tv[4] = {t.dx, t.dy, t.dw, t.dh};
        for (std::size_t k = 0; k < 4; ++k) {
          idx.push_back(base + k);
          tgt.push_back(tv[k]);
        }
      }
      Var diff = ops::sub(g, ops::gather(g, out.head.deltas, std::move(idx)),
                          g.constant(Tensor::from_vector(std::move(tgt))));
      out.rcnn_reg = ops::scale(g, ops::sum(g, ops::smooth_l1(g, diff)),
                                1.0 / static_cast<double>(plan.rcnn.pos_rows.size()));
    }
  }
  out.total = ops::add(g, ops::add(g, out.rpn_cls, out.rpn_reg),
                       ops::add(g, out.rcnn_cls, out.rcnn_reg));
  return out;
}

double frcnn_loss_value(const DetectorModel& model, const Tensor& image,
                        const FrcnnTargets& targets, Rng& rng) {
  for (const auto& t : targets.rcnn_boxes)
    if (t.class_id < 1 || t.class_id > model.num_classes)
      throw std::invalid_argument("frcnn_loss: target class " + std::to_string(t.class_id) +
                                  " outside model range");
  Graph g;
  BoundModel m = bind(g, model, false);
  Var features = forward_features(g, m, g.constant(image));
  RpnOutput rpn = rpn_forward(g, m, features);
  const auto proposals = propose(model.config, g.value(rpn.objectness), g.value(rpn.deltas));
  const LossPlan plan = plan_losses(model.config, proposals, targets, rng);
  return g.value(frcnn_loss(g, m, features, rpn, plan).total).item();
}

}  // namespace tridet
