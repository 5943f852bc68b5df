#include "tridet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "tridet/distill.hpp"

namespace tridet {

namespace {

std::size_t index_in(std::span<const int> ids, int class_id, const char* what) {
  const auto it = std::find(ids.begin(), ids.end(), class_id);
  if (it == ids.end())
    throw std::invalid_argument(std::string("class ") + std::to_string(class_id) + " is not " +
                                what);
  return static_cast<std::size_t>(it - ids.begin());
}

Tensor normal_rows(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t(Shape{rows, cols});
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor stack_rows(const Tensor& top, const Tensor& bottom) {
  Shape shape = top.shape();
  shape[0] += bottom.dim(0);
  std::vector<double> data(top.data().begin(), top.data().end());
  data.insert(data.end(), bottom.data().begin(), bottom.data().end());
  return Tensor(std::move(shape), std::move(data));
}

Tensor extend_zeros(const Tensor& v, std::size_t extra) {
  std::vector<double> data(v.data().begin(), v.data().end());
  data.resize(data.size() + extra, 0.0);
  return Tensor::from_vector(std::move(data));
}

Var select_rows(Graph& g, Var m, std::span<const std::size_t> rows) {
  const std::size_t width = g.value(m).dim(1);
  std::vector<std::size_t> idx;
  for (std::size_t r : rows)
    for (std::size_t k = 0; k < width; ++k) idx.push_back(r * width + k);
  return ops::reshape(g, ops::gather(g, m, std::move(idx)), Shape{rows.size(), width});
}

Var zero_scalar(Graph& g) { return g.constant(Tensor::scalar(0.0)); }

void check_finite(const char* term, double v) {
  if (!std::isfinite(v)) throw NonFiniteLoss(term, v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ClassSplit::validate() const {
  if (old_ids.empty()) throw std::invalid_argument("class split has no old classes");
  if (new_ids.empty()) throw std::invalid_argument("class split has no new classes");
  std::set<int> seen;
  for (int c : old_ids)
    if (c < 1 || !seen.insert(c).second)
      throw std::invalid_argument("invalid or repeated old class id " + std::to_string(c));
  for (int c : new_ids)
    if (c < 1 || !seen.insert(c).second)
      throw std::invalid_argument("new class id " + std::to_string(c) +
                                  " is invalid or also listed as old");
}

LabelMap ClassSplit::im_labels() const {
  LabelMap m = old_ids;
  m.insert(m.end(), new_ids.begin(), new_ids.end());
  return m;
}

std::size_t ClassSplit::im_new_label(int class_id) const {
  return old_ids.size() + index_in(new_ids, class_id, "a new class") + 1;
}

std::size_t ClassSplit::rm_label(int class_id) const {
  return index_in(new_ids, class_id, "a new class") + 1;
}

std::size_t ClassSplit::om_label(int class_id) const {
  return index_in(old_ids, class_id, "an old class") + 1;
}

void Schedule::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be > 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0))
    throw std::invalid_argument("lr decay must lie in (0,1]");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("momentum must lie in [0,1)");
}

double Schedule::lr_at(std::size_t epoch) const {
  const std::size_t boundary = decay_epoch ? decay_epoch : epochs / 2;
  return epoch < boundary || boundary == 0 ? lr : lr * lr_decay;
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw std::invalid_argument("lambda must be >= 0");
  schedule.validate();
  thresholds.validate();
  effective_thresholds().validate();
}

Thresholds TrainConfig::effective_thresholds() const {
  if (switches.two_threshold) return thresholds;
  return Thresholds::single(single_threshold, thresholds.theta_iou);
}

// ---------------------------------------------------------------------------
// Initialisation

DetectorModel init_incremental(const DetectorModel& om, int num_new, Rng& rng) {
  if (num_new < 1) throw std::invalid_argument("init_incremental: num_new must be >= 1");
  validate_model(om);
  DetectorModel im = om;
  im.num_classes = om.num_classes + num_new;
  const auto B = static_cast<std::size_t>(num_new);
  const std::size_t fc = om.config.fc;
  im.param(kClsW) = stack_rows(om.param(kClsW), normal_rows(B, fc, 0.01, rng));
  im.param(kClsB) = extend_zeros(om.param(kClsB), B);
  im.param(kBoxW) = stack_rows(om.param(kBoxW), normal_rows(4 * B, fc, 0.01, rng));
  im.param(kBoxB) = extend_zeros(om.param(kBoxB), 4 * B);
  validate_model(im);
  return im;
}

DetectorModel init_incremental(const DetectorModel& om, int num_new, std::uint64_t seed) {
  Rng rng(seed);
  DetectorModel im = init_incremental(om, num_new, rng);
  im.seed = seed;
  return im;
}

DetectorModel init_residual(const DetectorModel& om, int num_new, Rng& rng,
                            bool random_backbone) {
  if (num_new < 1) throw std::invalid_argument("init_residual: num_new must be >= 1");
  DetectorModel rm = make_detector(om.config, num_new, rng);
  if (!random_backbone)
    for (std::size_t s = 0; s < kBackboneSlots; ++s) rm.params[s].value = om.params[s].value;
  return rm;
}

DetectorModel init_residual(const DetectorModel& om, int num_new, std::uint64_t seed,
                            bool random_backbone) {
  Rng rng(seed);
  DetectorModel rm = init_residual(om, num_new, rng, random_backbone);
  rm.seed = seed;
  return rm;
}

TripleNetwork make_triple(const DetectorModel& om, const ClassSplit& split, const TrainConfig& cfg,
                          Rng& rng) {
  split.validate();
  if (static_cast<std::size_t>(om.num_classes) != split.num_old())
    throw std::invalid_argument("old model has " + std::to_string(om.num_classes) +
                                " classes but the split lists " +
                                std::to_string(split.num_old()));
  TripleNetwork t{om, {}, {}, split};
  const int B = static_cast<int>(split.num_new());
  t.im = init_incremental(om, B, rng);
  t.rm = init_residual(om, B, rng, cfg.rm_random_backbone);
  t.im.seed = t.rm.seed = cfg.seed;
  return t;
}

// ---------------------------------------------------------------------------
// Objective

LossBreakdown StepLosses::values(const Graph& g) const {
  return {g.value(frcnn_im).item(), g.value(frcnn_rm).item(), g.value(d_fea).item(),
          g.value(d_res).item(),    g.value(d_cls).item(),    g.value(all).item()};
}

StepLosses build_step_losses(Graph& g, const BoundModel& om, const BoundModel& im,
                             const BoundModel& rm, const ClassSplit& split,
                             std::span<const Scene> batch, const TrainConfig& cfg, Rng& rng,
                             std::span<const ImagePlan> fixed) {
  if (batch.empty()) throw std::invalid_argument("build_step_losses: empty batch");
  if (!fixed.empty() && fixed.size() != batch.size())
    throw std::invalid_argument("build_step_losses: plan count differs from batch size");
  const DetectorConfig& config = im.model->config;
  if (!(om.model->config == config) || !(rm.model->config == config))
    throw std::invalid_argument("the three models must share one architecture");
  const std::size_t A = split.num_old(), B = split.num_new();
  if (static_cast<std::size_t>(om.model->num_classes) != A ||
      static_cast<std::size_t>(im.model->num_classes) != A + B ||
      static_cast<std::size_t>(rm.model->num_classes) != B)
    throw std::invalid_argument("model class counts disagree with the class split");
  const Thresholds th = cfg.effective_thresholds();
  const auto& sw = cfg.switches;

  std::vector<Var> t_im, t_rm, t_fea, t_res, t_cls;
  StepLosses out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Scene& scene = batch[i];
    require_image_shape(config, scene.image);
    Var image = g.constant(scene.image);

    std::vector<LabeledBox> gt_im, gt_rm;
    for (const auto& o : scene.objects) {
      gt_im.push_back({o.bbox, static_cast<int>(split.im_new_label(o.class_id))});
      gt_rm.push_back({o.bbox, static_cast<int>(split.rm_label(o.class_id))});
    }

    Var f_om = forward_features(g, om, image);
    Var f_im = forward_features(g, im, image);
    Var f_rm = forward_features(g, rm, image);
    RpnOutput rpn_im = rpn_forward(g, im, f_im);
    RpnOutput rpn_rm = rpn_forward(g, rm, f_rm);

    ImagePlan plan;
    if (!fixed.empty()) {
      plan = fixed[i];
    } else {
      if (sw.pseudo_gt) {
        const auto boxes_p = generate_pseudo_gt(g, om, f_om, gt_im, th);
        plan.im_targets = build_training_targets(boxes_p, gt_im, th).as_targets();
      } else {
        for (const auto& b : gt_im) plan.im_targets.rpn_boxes.push_back(b.bbox);
        plan.im_targets.rcnn_boxes = gt_im;
      }
      FrcnnTargets rm_targets;
      for (const auto& b : gt_rm) rm_targets.rpn_boxes.push_back(b.bbox);
      rm_targets.rcnn_boxes = gt_rm;
      plan.im = plan_losses(config,
                            propose(config, g.value(rpn_im.objectness), g.value(rpn_im.deltas)),
                            plan.im_targets, rng);
      plan.rm = plan_losses(config,
                            propose(config, g.value(rpn_rm.objectness), g.value(rpn_rm.deltas)),
                            rm_targets, rng);
    }

    FrcnnLoss l_im = frcnn_loss(g, im, f_im, rpn_im, plan.im);
    FrcnnLoss l_rm = frcnn_loss(g, rm, f_rm, rpn_rm, plan.rm);
    t_im.push_back(l_im.total);
    t_rm.push_back(l_rm.total);

    Var f_rm_d = cfg.rm_stop_gradient ? ops::detach(g, f_rm) : f_rm;
    const FeatureTriple feat{f_om, f_im, f_rm_d};
    t_fea.push_back(sw.d_fea ? d_fea(g, feat) : zero_scalar(g));

    const auto& rois = plan.im.rcnn.rois;
    const bool have_rois = l_im.has_rcnn;
    Var p_om, p_rm;
    if (have_rois && (sw.d_res || sw.d_cls)) {
      p_om = pool_rois(g, f_om, rois, config);
      p_rm = pool_rois(g, f_rm_d, rois, config);
    }
    if (!sw.d_res) {
      t_res.push_back(zero_scalar(g));
    } else if (have_rois) {
      t_res.push_back(d_res(g, feat, PooledTriple{p_om, l_im.pooled, p_rm}).total);
    } else {
      Var m_res = attention_map(g, ops::sub(g, f_im, f_om));
      t_res.push_back(attn_pair_loss(g, m_res, attention_map(g, f_rm_d)));
    }

    if (!sw.d_cls || !have_rois) {
      t_cls.push_back(zero_scalar(g));
    } else {
      Var om_logits = head_forward(g, om, p_om).cls_logits;
      Var rm_logits = head_forward(g, rm, p_rm).cls_logits;
      if (cfg.rm_stop_gradient) rm_logits = ops::detach(g, rm_logits);
      const LogitTriple logits{om_logits, l_im.head.cls_logits, rm_logits, A, B};
      if (cfg.cls_scope == ClsScope::AllRois) {
        t_cls.push_back(d_cls(g, logits));
      } else {
        std::vector<std::size_t> old_rows, new_rows;
        for (std::size_t r = 0; r < plan.im.rcnn.labels.size(); ++r) {
          const std::size_t lab = plan.im.rcnn.labels[r];
          if (lab >= 1 && lab <= A) old_rows.push_back(r);
          if (lab > A) new_rows.push_back(r);
        }
        Var term = zero_scalar(g);
        if (!old_rows.empty()) {
          const LogitTriple sub{select_rows(g, om_logits, old_rows),
                                select_rows(g, l_im.head.cls_logits, old_rows),
                                select_rows(g, rm_logits, old_rows), A, B};
          term = ops::add(g, term, d_cls_terms(g, sub).old_term);
        }
        if (!new_rows.empty()) {
          const LogitTriple sub{select_rows(g, om_logits, new_rows),
                                select_rows(g, l_im.head.cls_logits, new_rows),
                                select_rows(g, rm_logits, new_rows), A, B};
          term = ops::add(g, term, d_cls_terms(g, sub).new_term);
        }
        t_cls.push_back(term);
      }
    }
    out.plans.push_back(std::move(plan));
  }

  const double inv = 1.0 / static_cast<double>(batch.size());
  auto batch_mean = [&](const std::vector<Var>& terms) {
    Var acc = terms[0];
    for (std::size_t k = 1; k < terms.size(); ++k) acc = ops::add(g, acc, terms[k]);
    return ops::scale(g, acc, inv);
  };
  out.frcnn_im = batch_mean(t_im);
  out.frcnn_rm = batch_mean(t_rm);
  out.d_fea = batch_mean(t_fea);
  out.d_res = batch_mean(t_res);
  out.d_cls = batch_mean(t_cls);
  Var distill = ops::add(g, ops::add(g, out.d_fea, out.d_res), out.d_cls);
  out.all = ops::add(g, ops::add(g, out.frcnn_im, out.frcnn_rm), ops::scale(g, distill, cfg.lambda));
  return out;
}

// ---------------------------------------------------------------------------
// Optimisation

NonFiniteLoss::NonFiniteLoss(const std::string& term, double value)
    : std::runtime_error("non-finite loss term " + term + " (" + std::to_string(value) + ")"),
      term_(term) {}

void MomentumSgd::step(DetectorModel& model, const Gradients& grads, const BoundModel& bound,
                       double lr) {
  if (velocity_.empty())
    for (const auto& p : model.params) velocity_.push_back(Tensor::zeros(p.value.shape()));
  for (std::size_t s = 0; s < model.params.size(); ++s) {
    const auto g = grads.of(bound.params[s]).data();
    auto v = velocity_[s].data();
    auto p = model.params[s].value.data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum_ * v[k] + g[k];
      p[k] -= lr * v[k];
    }
  }
}

LossBreakdown train_step(TripleNetwork& triple, std::span<const Scene> batch,
                         const TrainConfig& cfg, double lr, TrainState& state, Rng& rng) {
  Graph g;
  const BoundModel om = bind(g, triple.om, false);
  const BoundModel im = bind(g, triple.im, true);
  const BoundModel rm = bind(g, triple.rm, true);
  const StepLosses losses = build_step_losses(g, om, im, rm, triple.split, batch, cfg, rng);
  const LossBreakdown v = losses.values(g);
  check_finite("frcnn_im", v.frcnn_im);
  check_finite("frcnn_rm", v.frcnn_rm);
  check_finite("d_fea", v.d_fea);
  check_finite("d_res", v.d_res);
  check_finite("d_cls", v.d_cls);
  check_finite("l_all", v.all);
  const Gradients grads = backward(g, losses.all);
  state.im_opt.step(triple.im, grads, im, lr);
  state.rm_opt.step(triple.rm, grads, rm, lr);
  return v;
}

// ---------------------------------------------------------------------------
// Loops

std::string epoch_csv_header() {
  return "epoch,lr,frcnn_im,frcnn_rm,d_fea,d_res,d_cls,l_all,map_old,map_new,map_all";
}

std::string epoch_csv_row(const EpochLog& e) {
  std::ostringstream os;
  os.precision(10);
  os << e.epoch << ',' << e.lr << ',' << e.loss.frcnn_im << ',' << e.loss.frcnn_rm << ','
     << e.loss.d_fea << ',' << e.loss.d_res << ',' << e.loss.d_cls << ',' << e.loss.all << ','
     << e.map_old << ',' << e.map_new << ',' << e.map_all;
  return os.str();
}

void write_epoch_csv(std::span<const EpochLog> logs, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << epoch_csv_header() << '\n';
  for (const auto& e : logs) out << epoch_csv_row(e) << '\n';
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

namespace {

template <typename StepFn>
void run_epochs(std::size_t n, const Schedule& sched, Rng& rng, std::vector<EpochLog>& log,
                StepFn step, const std::function<void(EpochLog&)>& after_epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < sched.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog e;
    e.epoch = epoch + 1;
    e.lr = sched.lr_at(epoch);
    std::size_t steps = 0;
    for (std::size_t start = 0; start < n; start += sched.batch_size) {
      const std::size_t end = std::min(n, start + sched.batch_size);
      const LossBreakdown l = step(std::span<const std::size_t>(order).subspan(start, end - start),
                                   e.lr);
      e.loss.frcnn_im += l.frcnn_im;
      e.loss.frcnn_rm += l.frcnn_rm;
      e.loss.d_fea += l.d_fea;
      e.loss.d_res += l.d_res;
      e.loss.d_cls += l.d_cls;
      e.loss.all += l.all;
      ++steps;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    e.loss.frcnn_im *= inv;
    e.loss.frcnn_rm *= inv;
    e.loss.d_fea *= inv;
    e.loss.d_res *= inv;
    e.loss.d_cls *= inv;
    e.loss.all *= inv;
    if (after_epoch) after_epoch(e);
    log.push_back(e);
  }
}

}  // namespace

IncrementalResult train_incremental(const DetectorModel& om, const ClassSplit& split,
                                    std::span<const Scene> data, const TrainConfig& cfg,
                                    std::span<const Scene> eval_scenes) {
  cfg.validate();
  validate_model(om);
  if (data.empty()) throw std::invalid_argument("train_incremental: empty dataset");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].objects.empty())
      throw std::invalid_argument("incremental scene " + std::to_string(i) +
                                  " has no new-class object");
    for (const auto& o : data[i].objects) split.rm_label(o.class_id);
  }

  Rng rng(cfg.seed);
  IncrementalResult result{make_triple(om, split, cfg, rng), {}};
  TrainState state(cfg.schedule.momentum);
  std::vector<Scene> batch;
  auto step = [&](std::span<const std::size_t> idx, double lr) {
    batch.clear();
    for (std::size_t i : idx) batch.push_back(data[i]);
    return train_step(result.triple, batch, cfg, lr, state, rng);
  };
  std::function<void(EpochLog&)> after;
  if (!eval_scenes.empty())
    after = [&](EpochLog& e) {
      const APReport r = evaluate_model(result.triple.im, eval_scenes, split.im_labels(),
                                        split.old_ids, split.new_ids);
      e.map_old = r.map_old;
      e.map_new = r.map_new;
      e.map_all = r.map_all;
    };
  run_epochs(data.size(), cfg.schedule, rng, result.log, step, after);
  return result;
}

BaseResult train_base(const DetectorConfig& config, std::span<const int> classes,
                      std::span<const Scene> data, const BaseTrainConfig& cfg,
                      std::span<const Scene> eval_scenes) {
  cfg.schedule.validate();
  if (data.empty()) throw std::invalid_argument("train_base: empty dataset");
  if (classes.empty()) throw std::invalid_argument("train_base: no classes");
  Rng rng(cfg.seed);
  BaseResult result{make_detector(config, static_cast<int>(classes.size()), rng), {}};
  result.model.seed = cfg.seed;
  MomentumSgd opt(cfg.schedule.momentum);

  auto targets_of = [&](const Scene& s) {
    FrcnnTargets t;
    for (const auto& o : s.objects) {
      const auto it = std::find(classes.begin(), classes.end(), o.class_id);
      if (it == classes.end()) continue;
      t.rpn_boxes.push_back(o.bbox);
      t.rcnn_boxes.push_back({o.bbox, static_cast<int>(it - classes.begin()) + 1});
    }
    return t;
  };

  auto step = [&](std::span<const std::size_t> idx, double lr) {
    Graph g;
    const BoundModel m = bind(g, result.model, true);
    Var acc;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Scene& s = data[idx[k]];
      require_image_shape(config, s.image);
      Var f = forward_features(g, m, g.constant(s.image));
      RpnOutput rpn = rpn_forward(g, m, f);
      const LossPlan plan = plan_losses(
          config, propose(config, g.value(rpn.objectness), g.value(rpn.deltas)), targets_of(s),
          rng);
      Var l = frcnn_loss(g, m, f, rpn, plan).total;
      acc = k == 0 ? l : ops::add(g, acc, l);
    }
    Var total = ops::scale(g, acc, 1.0 / static_cast<double>(idx.size()));
    const double v = g.value(total).item();
    check_finite("frcnn", v);
    opt.step(result.model, backward(g, total), m, lr);
    LossBreakdown b;
    b.frcnn_im = b.all = v;
    return b;
  };
  std::function<void(EpochLog&)> after;
  if (!eval_scenes.empty())
    after = [&](EpochLog& e) {
      const APReport r = evaluate_model(result.model, eval_scenes,
                                        LabelMap(classes.begin(), classes.end()), classes, {});
      e.map_old = e.map_all = r.map_all;
    };
  run_epochs(data.size(), cfg.schedule, rng, result.log, step, after);
  return result;
}

}  // namespace tridet
