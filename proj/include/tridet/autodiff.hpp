#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tridet/tensor.hpp"

namespace tridet {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
struct Var {
  const Graph* graph = nullptr;
  std::size_t id = 0;
};

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  DivByScalar,
  MatMul,
  Linear,
  Conv2d,
  Relu,
  MaxPool2,
  Mean,
  Sum,
  Abs,
  Square,
  Softmax,
  FrobeniusNorm,
  SmoothL1,
  Gram,
  RoiPool,
  Reshape,
  Gather,
  SigmoidBce,
  SoftmaxCrossEntropy,
  Detach,
};

std::string op_name(OpKind kind);

/// Box in input-image pixels, (x1, y1, x2, y2).
using RoiRect = std::array<double, 4>;

/// Attribute bag for the generic `apply` entry point. Each kind reads only
/// the fields it needs.
struct OpAttrs {
  double scalar = 1.0;
  std::size_t axis = 0;
  std::size_t range_lo = 0;
  std::size_t range_hi = 0;  // 0 means "to the end of the axis"
  std::size_t stride = 1;
  std::size_t pad = 0;
  Shape shape;
  std::vector<std::size_t> indices;
  std::vector<RoiRect> rois;
  std::size_t pool_size = 4;
  double spatial_scale = 1.0;
  std::vector<double> targets;
};

inline constexpr double kNormEpsilon = 1e-12;

class Graph {
 public:
  using BackwardFn =
      std::function<void(const Graph&, const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  bool owns(Var v) const { return v.graph == this && v.id < nodes_.size(); }

  /// Appends an op node. Inputs must belong to this graph.
  Var record(OpKind kind, std::span<const Var> inputs, Tensor value, BackwardFn backward);

 private:
  std::vector<Node> nodes_;
};

/// Gradients of a scalar root with respect to every requires_grad leaf.
class Gradients {
 public:
  const Tensor& of(Var leaf) const;
  bool has(Var leaf) const;

 private:
  friend Gradients backward(const Graph& graph, Var root);
  const Graph* graph_ = nullptr;
  std::vector<Tensor> grads_;  // indexed by node id; empty for non-leaves
};

/// Reverse-mode sweep from `root`. Does not mutate the graph, so calling it
/// twice yields identical results.
Gradients backward(const Graph& graph, Var root);

/// Generic dispatch over OpKind; throws std::invalid_argument on a kind it
/// does not know (including Leaf).
Var apply(Graph& g, OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

namespace ops {

Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double factor);
Var add_scalar(Graph& g, Var a, double c);
/// a / s where s holds exactly one element.
Var div_by_scalar(Graph& g, Var a, Var s);
Var matmul(Graph& g, Var a, Var b);
/// x[n,in] * w[out,in]^T + b[out]
Var linear(Graph& g, Var x, Var w, Var b);
/// x[c,h,w], w[o,c,k,k], b[o]; zero padding.
Var conv2d(Graph& g, Var x, Var w, Var b, std::size_t stride, std::size_t pad);
Var relu(Graph& g, Var a);
/// 2x2 window, stride 2 over x[c,h,w]. Ties go to the first index in scan order.
Var max_pool2(Graph& g, Var a);
/// Mean over `axis`; the axis is removed (rank-1 input gives shape {1}).
Var mean(Graph& g, Var a, std::size_t axis);
Var sum(Graph& g, Var a);
Var mean_all(Graph& g, Var a);
Var abs(Graph& g, Var a);
Var square(Graph& g, Var a);
/// Softmax along `axis`, restricted to indices [lo, hi) of that axis.
Var softmax(Graph& g, Var a, std::size_t axis, std::size_t lo, std::size_t hi);
Var softmax(Graph& g, Var a, std::size_t axis);
/// sqrt(sum(x^2) + eps)
Var frobenius_norm(Graph& g, Var a);
/// Elementwise Huber with unit transition point.
Var smooth_l1(Graph& g, Var a);
/// m * m^T for m[h,w].
Var gram(Graph& g, Var m);
/// Nearest-cell sampling of a P x P grid per RoI from features[c,h,w].
/// RoIs are in image pixels; spatial_scale maps them onto the feature grid.
Var roi_pool(Graph& g, Var features, std::span<const RoiRect> rois, std::size_t pool_size,
             double spatial_scale);
Var reshape(Graph& g, Var a, Shape shape);
/// Picks flat indices of `a` into a rank-1 tensor.
Var gather(Graph& g, Var a, std::vector<std::size_t> indices);
/// Mean binary cross-entropy on logits[n] against 0/1 targets.
Var sigmoid_bce(Graph& g, Var logits, std::vector<double> targets);
/// Mean categorical cross-entropy on logits[n,k].
Var softmax_cross_entropy(Graph& g, Var logits, std::vector<std::size_t> labels);
/// Same value, no gradient flows back through it.
Var detach(Graph& g, Var a);

}  // namespace ops

}  // namespace tridet
