#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tridet/autodiff.hpp"

namespace tridet {

/// Scalar-valued function built on a fresh graph from one leaf per input.
using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Per input tensor; 0 checks every coordinate, otherwise a seeded sample.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
  bool finite = true;  // false if f was non-finite at some perturbed point
  std::string failure;
};

/// Central-difference check of the reverse-mode gradient of `f` at `point`.
/// Error per coordinate is |a - n| / max(1, |a|, |n|).
GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> point,
                           const GradCheckOptions& options = {});

/// Smallest distance, over every relu, abs, smooth-L1 and max-pool node of
/// `g`, between a node input and that node's nearest non-smooth point.
/// Max-pool windows tied at exactly zero (dead relu outputs) are ignored.
/// Returns +infinity for a graph without such nodes.
double kink_distance(const Graph& g);

/// kink_distance of the graph f builds at `point`.
double kink_distance(const ScalarFn& f, std::span<const Tensor> point);

/// Evaluates f at `point` without requiring gradients.
double evaluate(const ScalarFn& f, std::span<const Tensor> point);

}  // namespace tridet
