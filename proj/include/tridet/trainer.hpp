#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tridet/detector.hpp"
#include "tridet/eval.hpp"
#include "tridet/pseudo_gt.hpp"
#include "tridet/synthdata.hpp"

namespace tridet {

/// Dataset class ids behind each model's labels. The old model predicts
/// `old_ids`, the incremental model `old_ids ++ new_ids`, the residual model
/// `new_ids`, each in list order starting at label 1.
struct ClassSplit {
  std::vector<int> old_ids;
  std::vector<int> new_ids;

  void validate() const;
  std::size_t num_old() const { return old_ids.size(); }
  std::size_t num_new() const { return new_ids.size(); }
  LabelMap om_labels() const { return old_ids; }
  LabelMap im_labels() const;
  LabelMap rm_labels() const { return new_ids; }
  /// Label of a new class id in the incremental / residual model; throws if
  /// `class_id` is not new.
  std::size_t im_new_label(int class_id) const;
  std::size_t rm_label(int class_id) const;
  std::size_t om_label(int class_id) const;
};

struct LossSwitches {
  bool d_fea = true;
  bool d_res = true;
  bool d_cls = true;
  bool two_threshold = true;
  bool pseudo_gt = true;
};

enum class ClsScope {
  AllRois,      // both halves of d_cls over every sampled RoI
  MatchedRois,  // old half on RoIs labelled old, new half on RoIs labelled new
};

struct Schedule {
  std::size_t epochs = 10;
  std::size_t batch_size = 2;
  double lr = 1e-3;
  double lr_decay = 0.1;
  std::size_t decay_epoch = 0;  // 0 means epochs / 2
  double momentum = 0.9;

  void validate() const;
  double lr_at(std::size_t epoch) const;
};

struct TrainConfig {
  double lambda = 1.0;
  Schedule schedule;
  std::uint64_t seed = 0;
  Thresholds thresholds;
  double single_threshold = 0.5;
  LossSwitches switches;
  ClsScope cls_scope = ClsScope::AllRois;
  bool rm_stop_gradient = false;
  bool rm_random_backbone = false;

  void validate() const;
  /// thresholds, or single_threshold for both sets when two_threshold is off.
  Thresholds effective_thresholds() const;
};

struct TripleNetwork {
  DetectorModel om;
  DetectorModel im;
  DetectorModel rm;
  ClassSplit split;
};

/// Copy of `om` with class and box heads widened by `num_new` classes; the new
/// rows are drawn from N(0, 0.01^2), new biases are zero.
DetectorModel init_incremental(const DetectorModel& om, int num_new, Rng& rng);
DetectorModel init_incremental(const DetectorModel& om, int num_new, std::uint64_t seed);

/// Fresh detector for `num_new` classes. Its backbone is copied from `om`
/// unless `random_backbone` is set.
DetectorModel init_residual(const DetectorModel& om, int num_new, Rng& rng,
                            bool random_backbone = false);
DetectorModel init_residual(const DetectorModel& om, int num_new, std::uint64_t seed,
                            bool random_backbone = false);

/// Draws the incremental model first, then the residual model, from `rng`.
TripleNetwork make_triple(const DetectorModel& om, const ClassSplit& split, const TrainConfig& cfg,
                          Rng& rng);

struct LossBreakdown {
  double frcnn_im = 0.0;
  double frcnn_rm = 0.0;
  double d_fea = 0.0;
  double d_res = 0.0;
  double d_cls = 0.0;
  double all = 0.0;
};

/// Non-differentiable per-image state of a step: the incremental model's
/// targets and both sampling plans.
struct ImagePlan {
  FrcnnTargets im_targets;
  LossPlan im;
  LossPlan rm;
};

struct StepLosses {
  Var frcnn_im, frcnn_rm, d_fea, d_res, d_cls, all;
  std::vector<ImagePlan> plans;
  LossBreakdown values(const Graph& g) const;
};

/// Assembles the batch-mean objective on `g`. When `fixed` is non-empty it
/// supplies every image's plan and `rng` is not touched; otherwise plans are
/// drawn from `rng`, incremental model before residual model, image by image.
StepLosses build_step_losses(Graph& g, const BoundModel& om, const BoundModel& im,
                             const BoundModel& rm, const ClassSplit& split,
                             std::span<const Scene> batch, const TrainConfig& cfg, Rng& rng,
                             std::span<const ImagePlan> fixed = {});

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& term, double value);
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

/// Heavy-ball SGD: v = momentum * v + g; p -= lr * v.
class MomentumSgd {
 public:
  explicit MomentumSgd(double momentum) : momentum_(momentum) {}
  void step(DetectorModel& model, const Gradients& grads, const BoundModel& bound, double lr);

 private:
  double momentum_;
  std::vector<Tensor> velocity_;
};

struct TrainState {
  MomentumSgd im_opt;
  MomentumSgd rm_opt;
  explicit TrainState(double momentum) : im_opt(momentum), rm_opt(momentum) {}
};

/// One update of the incremental and residual models; the old model is read only.
LossBreakdown train_step(TripleNetwork& triple, std::span<const Scene> batch,
                         const TrainConfig& cfg, double lr, TrainState& state, Rng& rng);

inline constexpr double kNoMetric = std::numeric_limits<double>::quiet_NaN();

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
  double map_old = kNoMetric;
  double map_new = kNoMetric;
  double map_all = kNoMetric;
};

std::string epoch_csv_header();
std::string epoch_csv_row(const EpochLog& log);
void write_epoch_csv(std::span<const EpochLog> logs, const std::filesystem::path& path);

struct IncrementalResult {
  TripleNetwork triple;
  std::vector<EpochLog> log;
};

/// Every scene must be annotated with new classes only. When `eval_scenes`
/// is non-empty the incremental model is evaluated after each epoch.
IncrementalResult train_incremental(const DetectorModel& om, const ClassSplit& split,
                                    std::span<const Scene> data, const TrainConfig& cfg,
                                    std::span<const Scene> eval_scenes = {});

struct BaseTrainConfig {
  Schedule schedule{20, 2, 1e-2, 0.1, 0, 0.9};
  std::uint64_t seed = 0;
};

struct BaseResult {
  DetectorModel model;
  std::vector<EpochLog> log;  // only frcnn_im and all are filled
};

/// Plain detector training on `classes` (label k is classes[k-1]);
/// annotations of other classes are ignored.
BaseResult train_base(const DetectorConfig& config, std::span<const int> classes,
                      std::span<const Scene> data, const BaseTrainConfig& cfg,
                      std::span<const Scene> eval_scenes = {});

}  // namespace tridet
