#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tridet/eval.hpp"
#include "tridet/trainer.hpp"

namespace tridet {

enum class VariantKind {
  OldModel,     // evaluate the starting model as is
  Incremental,  // train the triple network with `config`
};

struct Variant {
  std::string name;
  VariantKind kind = VariantKind::Incremental;
  TrainConfig config;  // seed is overwritten per row
};

struct ExperimentProtocol {
  std::vector<Variant> variants;
  std::vector<std::uint64_t> seeds;
  ClassSplit split;
  std::vector<Scene> train;  // new-class annotations only
  std::vector<Scene> test;   // old and new annotations
  /// Old model for a seed. Called once per seed.
  std::function<DetectorModel(std::uint64_t)> old_model;
  EvalOptions eval;
};

struct ExperimentRow {
  std::string variant;
  std::optional<std::uint64_t> seed;  // empty on the seed-mean row
  bool failed = false;
  std::string error;
  double map_old = 0.0;
  double map_new = 0.0;
  double map_all = 0.0;
  double secs = 0.0;
};

struct ExperimentResult {
  /// Per variant: one row per seed, then its mean row.
  std::vector<ExperimentRow> rows;

  const ExperimentRow& mean_row(const std::string& variant) const;
  std::string to_csv() const;
};

using ProgressFn = std::function<void(const ExperimentRow&)>;

/// A failing variant yields a failed row and the run continues. Mean rows
/// average the successful seeds and fail only if every seed failed.
ExperimentResult run_experiment(const ExperimentProtocol& protocol, const ProgressFn& progress = {});

/// old-model, finetune, baseline (pseudo ground truth, one threshold, no
/// distillation), the distillation and 2-threshold singletons, their
/// cumulative combinations, and the full method.
std::vector<Variant> ablation_variants(const TrainConfig& base);

/// One full-method variant per (theta_low, theta_high) pair, named th-LOW-HIGH.
std::vector<Variant> threshold_variants(const TrainConfig& base,
                                        const std::vector<std::pair<double, double>>& pairs);

}  // namespace tridet
