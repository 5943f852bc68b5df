#include "tridet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace tridet {

std::string op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::DivByScalar: return "div_by_scalar";
    case OpKind::MatMul: return "matmul";
    case OpKind::Linear: return "linear";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::MaxPool2: return "max_pool2";
    case OpKind::Mean: return "mean";
    case OpKind::Sum: return "sum";
    case OpKind::Abs: return "abs";
    case OpKind::Square: return "square";
    case OpKind::Softmax: return "softmax";
    case OpKind::FrobeniusNorm: return "frobenius_norm";
    case OpKind::SmoothL1: return "smooth_l1";
    case OpKind::Gram: return "gram";
    case OpKind::RoiPool: return "roi_pool";
    case OpKind::Reshape: return "reshape";
    case OpKind::Gather: return "gather";
    case OpKind::SigmoidBce: return "sigmoid_bce";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::Detach: return "detach";
  }
  return "unknown(" + std::to_string(static_cast<int>(kind)) + ")";
}

// ---------------------------------------------------------------------------
// Graph

Var Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.kind = OpKind::Leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Graph::value(Var v) const {
  if (!owns(v)) throw std::invalid_argument("variable does not belong to this graph");
  return nodes_[v.id].value;
}

bool Graph::requires_grad(Var v) const {
  if (!owns(v)) throw std::invalid_argument("variable does not belong to this graph");
  return nodes_[v.id].requires_grad;
}

Var Graph::record(OpKind kind, std::span<const Var> inputs, Tensor value, BackwardFn backward) {
  Node n;
  n.kind = kind;
  for (const Var& in : inputs) {
    if (!owns(in))
      throw std::invalid_argument(op_name(kind) + ": input does not belong to this graph");
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

// ---------------------------------------------------------------------------
// Backward

const Tensor& Gradients::of(Var leaf) const {
  if (!has(leaf)) throw std::invalid_argument("no gradient recorded for this variable");
  return grads_[leaf.id];
}

bool Gradients::has(Var leaf) const {
  return leaf.graph == graph_ && leaf.id < grads_.size() && !grads_[leaf.id].empty();
}

Gradients backward(const Graph& graph, Var root) {
  if (!graph.owns(root)) throw std::invalid_argument("backward: root is not in the graph");
  const Tensor& root_value = graph.value(root);
  if (root_value.numel() != 1)
    throw ShapeError("backward: root must be scalar, got " + shape_str(root_value.shape()));

  std::vector<Tensor> acc(root.id + 1);
  if (graph.node(root.id).requires_grad) acc[root.id] = Tensor(root_value.shape(), 1.0);

  std::vector<Tensor*> in_ptrs;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    const auto& node = graph.node(id);
    if (acc[id].empty() || node.kind == OpKind::Leaf || !node.backward) continue;
    in_ptrs.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (!graph.node(in).requires_grad) continue;
      if (acc[in].empty()) acc[in] = Tensor(graph.node(in).value.shape(), 0.0);
      in_ptrs[k] = &acc[in];
    }
    node.backward(graph, acc[id], in_ptrs);
    acc[id] = Tensor();  // interior grads are not needed past this point
  }

  Gradients out;
  out.graph_ = &graph;
  out.grads_.resize(graph.size());
  for (std::size_t id = 0; id < graph.size(); ++id) {
    const auto& node = graph.node(id);
    if (node.kind != OpKind::Leaf || !node.requires_grad) continue;
    out.grads_[id] = (id < acc.size() && !acc[id].empty()) ? std::move(acc[id])
                                                            : Tensor(node.value.shape(), 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ops

namespace ops {
namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
}

template <class F, class D>
Var unary(Graph& g, OpKind kind, Var a, F f, D df) {
  const Tensor& x = g.value(a);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id;
  Var in[] = {a};
  return g.record(kind, in, std::move(y),
                  [ia, df](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    const Tensor& xv = gr.node(ia).value;
                    Tensor& gx = *gi[0];
                    for (std::size_t i = 0; i < xv.numel(); ++i) gx[i] += go[i] * df(xv[i]);
                  });
}

}  // namespace

Var add(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  require_same_shape("add", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
  Var in[] = {a, b};
  return g.record(OpKind::Add, in, std::move(out),
                  [](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                    for (int k = 0; k < 2; ++k)
                      if (gi[k])
                        for (std::size_t i = 0; i < go.numel(); ++i) (*gi[k])[i] += go[i];
                  });
}

Var sub(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  require_same_shape("sub", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] - y[i];
  Var in[] = {a, b};
  return g.record(OpKind::Sub, in, std::move(out),
                  [](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                    if (gi[0])
                      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i];
                    if (gi[1])
                      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[1])[i] -= go[i];
                  });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  require_same_shape("mul", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
  const std::size_t ia = a.id, ib = b.id;
  Var in[] = {a, b};
  return g.record(OpKind::Mul, in, std::move(out),
                  [ia, ib](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    const Tensor& xv = gr.node(ia).value;
                    const Tensor& yv = gr.node(ib).value;
                    if (gi[0])
                      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i] * yv[i];
                    if (gi[1])
                      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[1])[i] += go[i] * xv[i];
                  });
}

Var scale(Graph& g, Var a, double factor) {
  return unary(
      g, OpKind::Scale, a, [factor](double v) { return v * factor; },
      [factor](double) { return factor; });
}

Var add_scalar(Graph& g, Var a, double c) {
  return unary(
      g, OpKind::AddScalar, a, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Var div_by_scalar(Graph& g, Var a, Var s) {
  const Tensor& x = g.value(a);
  const Tensor& sv = g.value(s);
  if (sv.numel() != 1)
    throw ShapeError("div_by_scalar: divisor must have one element, got " +
                     shape_str(sv.shape()));
  const double d = sv[0];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] / d;
  const std::size_t ia = a.id;
  Var in[] = {a, s};
  return g.record(OpKind::DivByScalar, in, std::move(out),
                  [ia, d](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    const Tensor& xv = gr.node(ia).value;
                    if (gi[0])
                      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i] / d;
                    if (gi[1]) {
                      double acc = 0.0;
                      for (std::size_t i = 0; i < go.numel(); ++i) acc += go[i] * xv[i];
                      (*gi[1])[0] -= acc / (d * d);
                    }
                  });
}

Var matmul(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  require_rank("matmul", x, 2);
  require_rank("matmul", y, 2);
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  if (y.dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(x.shape()) + " x " +
                     shape_str(y.shape()));
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x.at(i, p);
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += xv * y.at(p, j);
    }
  const std::size_t ia = a.id, ib = b.id;
  Var in[] = {a, b};
  return g.record(
      OpKind::MatMul, in, std::move(out),
      [ia, ib, m, k, n](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
        const Tensor& xv = gr.node(ia).value;
        const Tensor& yv = gr.node(ib).value;
        if (gi[0])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += go.at(i, j) * yv.at(p, j);
              gi[0]->at(i, p) += acc;
            }
        if (gi[1])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double xi = xv.at(i, p);
              for (std::size_t j = 0; j < n; ++j) gi[1]->at(p, j) += xi * go.at(i, j);
            }
      });
}

Var linear(Graph& g, Var x, Var w, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  require_rank("linear", xv, 2);
  require_rank("linear", wv, 2);
  const std::size_t n = xv.dim(0), in_dim = xv.dim(1), out_dim = wv.dim(0);
  if (wv.dim(1) != in_dim || bv.numel() != out_dim)
    throw ShapeError("linear: incompatible shapes x" + shape_str(xv.shape()) + " w" +
                     shape_str(wv.shape()) + " b" + shape_str(bv.shape()));
  Tensor out(Shape{n, out_dim});
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = &xv[i * in_dim];
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = &wv[o * in_dim];
      double acc = bv[o];
      for (std::size_t p = 0; p < in_dim; ++p) acc += xr[p] * wr[p];
      out.at(i, o) = acc;
    }
  }
  const std::size_t ix = x.id, iw = w.id;
  Var in[] = {x, w, b};
  return g.record(
      OpKind::Linear, in, std::move(out),
      [ix, iw, n, in_dim, out_dim](const Graph& gr, const Tensor& go,
                                   std::span<Tensor* const> gi) {
        const Tensor& xv2 = gr.node(ix).value;
        const Tensor& wv2 = gr.node(iw).value;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t o = 0; o < out_dim; ++o) {
            const double gv = go.at(i, o);
            if (gv == 0.0) continue;
            if (gi[0]) {
              double* gx = &(*gi[0])[i * in_dim];
              const double* wr = &wv2[o * in_dim];
              for (std::size_t p = 0; p < in_dim; ++p) gx[p] += gv * wr[p];
            }
            if (gi[1]) {
              double* gw = &(*gi[1])[o * in_dim];
              const double* xr = &xv2[i * in_dim];
              for (std::size_t p = 0; p < in_dim; ++p) gw[p] += gv * xr[p];
            }
            if (gi[2]) (*gi[2])[o] += gv;
          }
        }
      });
}

Var conv2d(Graph& g, Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  require_rank("conv2d", xv, 3);
  require_rank("conv2d", wv, 4);
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const std::size_t O = wv.dim(0), K = wv.dim(2);
  if (wv.dim(1) != C || wv.dim(3) != K || bv.numel() != O || stride == 0)
    throw ShapeError("conv2d: incompatible shapes x" + shape_str(xv.shape()) + " w" +
                     shape_str(wv.shape()) + " b" + shape_str(bv.shape()));
  if (H + 2 * pad < K || W + 2 * pad < K)
    throw ShapeError("conv2d: kernel larger than padded input " + shape_str(xv.shape()));
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - K) / stride + 1;
  const auto P = static_cast<long>(pad);
  const auto S = static_cast<long>(stride);

  // Output x-range whose input column ox*S - P + kx lies inside [0, W).
  auto ox_range = [=](long kx, std::size_t& lo, std::size_t& hi) {
    long l = 0;
    while (l < static_cast<long>(Wo) && l * S - P + kx < 0) ++l;
    long h = static_cast<long>(Wo);
    while (h > l && (h - 1) * S - P + kx >= static_cast<long>(W)) --h;
    lo = static_cast<std::size_t>(l);
    hi = static_cast<std::size_t>(h);
  };

  Tensor out(Shape{O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o) {
    double* op = &out[o * Ho * Wo];
    for (std::size_t i = 0; i < Ho * Wo; ++i) op[i] = bv[o];
    for (std::size_t c = 0; c < C; ++c) {
      const double* xp = &xv[c * H * W];
      for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < K; ++kx) {
          const double wk = wv[((o * C + c) * K + ky) * K + kx];
          std::size_t lo, hi;
          ox_range(static_cast<long>(kx), lo, hi);
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy) * S - P + static_cast<long>(ky);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            const double* xr = xp + static_cast<std::size_t>(iy) * W;
            double* orow = op + oy * Wo;
            for (std::size_t ox = lo; ox < hi; ++ox)
              orow[ox] += wk * xr[ox * stride + kx - pad];
          }
        }
    }
  }
  const std::size_t ix = x.id, iw = w.id;
  Var in[] = {x, w, b};
  return g.record(
      OpKind::Conv2d, in, std::move(out),
      [=](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
        const Tensor& xv2 = gr.node(ix).value;
        const Tensor& wv2 = gr.node(iw).value;
        for (std::size_t o = 0; o < O; ++o) {
          const double* gp = &go[o * Ho * Wo];
          if (gi[2]) {
            double acc = 0.0;
            for (std::size_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
            (*gi[2])[o] += acc;
          }
          for (std::size_t c = 0; c < C; ++c) {
            const double* xp = &xv2[c * H * W];
            for (std::size_t ky = 0; ky < K; ++ky)
              for (std::size_t kx = 0; kx < K; ++kx) {
                const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
                const double wk = wv2[widx];
                std::size_t lo, hi;
                ox_range(static_cast<long>(kx), lo, hi);
                double gw = 0.0;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const long iy = static_cast<long>(oy) * S - P + static_cast<long>(ky);
                  if (iy < 0 || iy >= static_cast<long>(H)) continue;
                  const std::size_t row = static_cast<std::size_t>(iy) * W;
                  const double* grow = gp + oy * Wo;
                  const double* xr = xp + row;
                  if (gi[0]) {
                    double* gx = &(*gi[0])[c * H * W + row];
                    for (std::size_t ox = lo; ox < hi; ++ox)
                      gx[ox * stride + kx - pad] += wk * grow[ox];
                  }
                  for (std::size_t ox = lo; ox < hi; ++ox)
                    gw += grow[ox] * xr[ox * stride + kx - pad];
                }
                if (gi[1]) (*gi[1])[widx] += gw;
              }
          }
        }
      });
}

Var relu(Graph& g, Var a) {
  return unary(
      g, OpKind::Relu, a, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var max_pool2(Graph& g, Var a) {
  const Tensor& x = g.value(a);
  require_rank("max_pool2", x, 3);
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H % 2 || W % 2) throw ShapeError("max_pool2: spatial size must be even, got " +
                                       shape_str(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out(Shape{C, Ho, Wo});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (c * H + 2 * oy) * W + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (c * H + 2 * oy + dy) * W + 2 * ox + dx;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (c * Ho + oy) * Wo + ox;
        out[o] = x[best];
        argmax[o] = best;
      }
  Var in[] = {a};
  return g.record(OpKind::MaxPool2, in, std::move(out),
                  [argmax = std::move(argmax)](const Graph&, const Tensor& go,
                                               std::span<Tensor* const> gi) {
                    for (std::size_t o = 0; o < go.numel(); ++o) (*gi[0])[argmax[o]] += go[o];
                  });
}

Var mean(Graph& g, Var a, std::size_t axis) {
  const Tensor& x = g.value(a);
  if (axis >= x.rank())
    throw ShapeError("mean: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + k) * inner + i];
  const double inv = 1.0 / static_cast<double>(n);
  for (double& v : out.data()) v *= inv;
  Var in[] = {a};
  return g.record(OpKind::Mean, in, std::move(out),
                  [=](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t k = 0; k < n; ++k)
                        for (std::size_t i = 0; i < inner; ++i)
                          (*gi[0])[(o * n + k) * inner + i] += go[o * inner + i] * inv;
                  });
}

Var sum(Graph& g, Var a) {
  const Tensor& x = g.value(a);
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Var in[] = {a};
  return g.record(OpKind::Sum, in, Tensor::scalar(acc),
                  [](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                    for (double& v : gi[0]->data()) v += go[0];
                  });
}

Var mean_all(Graph& g, Var a) {
  const double n = static_cast<double>(g.value(a).numel());
  return scale(g, sum(g, a), 1.0 / n);
}

Var abs(Graph& g, Var a) {
  return unary(
      g, OpKind::Abs, a, [](double v) { return std::fabs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var square(Graph& g, Var a) {
  return unary(
      g, OpKind::Square, a, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Var softmax(Graph& g, Var a, std::size_t axis, std::size_t lo, std::size_t hi) {
  const Tensor& x = g.value(a);
  if (axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  const std::size_t n = x.dim(axis);
  if (hi == 0) hi = n;
  if (lo >= hi || hi > n)
    throw ShapeError("softmax: index range [" + std::to_string(lo) + "," + std::to_string(hi) +
                     ") invalid for axis of size " + std::to_string(n));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t m = hi - lo;
  Shape out_shape = x.shape();
  out_shape[axis] = m;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = lo; k < hi; ++k) mx = std::max(mx, x[(o * n + k) * inner + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        const double e = std::exp(x[(o * n + lo + k) * inner + i] - mx);
        out[(o * m + k) * inner + i] = e;
        z += e;
      }
      for (std::size_t k = 0; k < m; ++k) out[(o * m + k) * inner + i] /= z;
    }
  Var in[] = {a};
  Tensor y = out;
  return g.record(
      OpKind::Softmax, in, std::move(out),
      [=, y = std::move(y)](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            double dot = 0.0;
            for (std::size_t k = 0; k < m; ++k)
              dot += go[(o * m + k) * inner + i] * y[(o * m + k) * inner + i];
            for (std::size_t k = 0; k < m; ++k) {
              const std::size_t yi = (o * m + k) * inner + i;
              (*gi[0])[(o * n + lo + k) * inner + i] += y[yi] * (go[yi] - dot);
            }
          }
      });
}

Var softmax(Graph& g, Var a, std::size_t axis) { return softmax(g, a, axis, 0, 0); }

Var frobenius_norm(Graph& g, Var a) {
  const Tensor& x = g.value(a);
  double ss = 0.0;
  for (double v : x.data()) ss += v * v;
  const double norm = std::sqrt(ss + kNormEpsilon);
  const std::size_t ia = a.id;
  Var in[] = {a};
  return g.record(OpKind::FrobeniusNorm, in, Tensor::scalar(norm),
                  [ia, norm](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    const Tensor& xv = gr.node(ia).value;
                    for (std::size_t i = 0; i < xv.numel(); ++i)
                      (*gi[0])[i] += go[0] * xv[i] / norm;
                  });
}

Var smooth_l1(Graph& g, Var a) {
  return unary(
      g, OpKind::SmoothL1, a,
      [](double v) {
        const double av = std::fabs(v);
        return av < 1.0 ? 0.5 * v * v : av - 0.5;
      },
      [](double v) {
        if (v >= 1.0) return 1.0;
        if (v <= -1.0) return -1.0;
        return v;
      });
}

Var gram(Graph& g, Var m) {
  const Tensor& x = g.value(m);
  require_rank("gram", x, 2);
  const std::size_t h = x.dim(0), w = x.dim(1);
  Tensor out(Shape{h, h});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < h; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < w; ++k) acc += x.at(i, k) * x.at(j, k);
      out.at(i, j) = acc;
    }
  const std::size_t im = m.id;
  Var in[] = {m};
  return g.record(OpKind::Gram, in, std::move(out),
                  [im, h, w](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    const Tensor& xv = gr.node(im).value;
                    // dM = (G_out + G_out^T) M
                    for (std::size_t i = 0; i < h; ++i)
                      for (std::size_t j = 0; j < h; ++j) {
                        const double s = go.at(i, j) + go.at(j, i);
                        if (s == 0.0) continue;
                        for (std::size_t k = 0; k < w; ++k) gi[0]->at(i, k) += s * xv.at(j, k);
                      }
                  });
}

Var roi_pool(Graph& g, Var features, std::span<const RoiRect> rois, std::size_t pool_size,
             double spatial_scale) {
  const Tensor& f = g.value(features);
  require_rank("roi_pool", f, 3);
  if (rois.empty()) throw ShapeError("roi_pool: no RoIs given");
  if (pool_size == 0) throw ShapeError("roi_pool: pool size must be positive");
  const std::size_t C = f.dim(0), H = f.dim(1), W = f.dim(2), P = pool_size;
  const std::size_t n = rois.size();
  std::vector<std::size_t> cells(n * P * P);  // flattened y*W+x per bin
  auto clampi = [](double v, std::size_t hi) {
    const double fl = std::floor(v);
    if (fl < 0.0) return std::size_t{0};
    if (fl > static_cast<double>(hi - 1)) return hi - 1;
    return static_cast<std::size_t>(fl);
  };
  for (std::size_t r = 0; r < n; ++r) {
    const auto& roi = rois[r];
    const double x1 = roi[0] * spatial_scale, y1 = roi[1] * spatial_scale;
    const double bw = (roi[2] - roi[0]) * spatial_scale / static_cast<double>(P);
    const double bh = (roi[3] - roi[1]) * spatial_scale / static_cast<double>(P);
    for (std::size_t py = 0; py < P; ++py) {
      const std::size_t cy = clampi(y1 + (static_cast<double>(py) + 0.5) * bh, H);
      for (std::size_t px = 0; px < P; ++px) {
        const std::size_t cx = clampi(x1 + (static_cast<double>(px) + 0.5) * bw, W);
        cells[(r * P + py) * P + px] = cy * W + cx;
      }
    }
  }
  Tensor out(Shape{n, C, P, P});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t b = 0; b < P * P; ++b)
        out[(r * C + c) * P * P + b] = f[c * H * W + cells[r * P * P + b]];
  Var in[] = {features};
  return g.record(OpKind::RoiPool, in, std::move(out),
                  [=, cells = std::move(cells)](const Graph&, const Tensor& go,
                                                std::span<Tensor* const> gi) {
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t b = 0; b < P * P; ++b)
                          (*gi[0])[c * H * W + cells[r * P * P + b]] +=
                              go[(r * C + c) * P * P + b];
                  });
}

Var reshape(Graph& g, Var a, Shape shape) {
  const Tensor& x = g.value(a);
  Tensor out = x.reshaped(std::move(shape));
  Var in[] = {a};
  return g.record(OpKind::Reshape, in, std::move(out),
                  [](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                    for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i];
                  });
}

Var gather(Graph& g, Var a, std::vector<std::size_t> indices) {
  const Tensor& x = g.value(a);
  if (indices.empty()) throw ShapeError("gather: empty index list");
  Tensor out(Shape{indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.numel())
      throw ShapeError("gather: index " + std::to_string(indices[i]) + " out of range for " +
                       shape_str(x.shape()));
    out[i] = x[indices[i]];
  }
  Var in[] = {a};
  return g.record(OpKind::Gather, in, std::move(out),
                  [idx = std::move(indices)](const Graph&, const Tensor& go,
                                             std::span<Tensor* const> gi) {
                    for (std::size_t i = 0; i < idx.size(); ++i) (*gi[0])[idx[i]] += go[i];
                  });
}

Var sigmoid_bce(Graph& g, Var logits, std::vector<double> targets) {
  const Tensor& x = g.value(logits);
  if (x.numel() != targets.size())
    throw ShapeError("sigmoid_bce: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(x.shape()));
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    acc += std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::fabs(v)));
  }
  const std::size_t ix = logits.id;
  Var in[] = {logits};
  return g.record(OpKind::SigmoidBce, in, Tensor::scalar(acc / n),
                  [ix, n, t = std::move(targets)](const Graph& gr, const Tensor& go,
                                                  std::span<Tensor* const> gi) {
                    const Tensor& xv = gr.node(ix).value;
                    for (std::size_t i = 0; i < xv.numel(); ++i) {
                      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
                      (*gi[0])[i] += go[0] * (s - t[i]) / n;
                    }
                  });
}

Var softmax_cross_entropy(Graph& g, Var logits, std::vector<std::size_t> labels) {
  const Tensor& x = g.value(logits);
  require_rank("softmax_cross_entropy", x, 2);
  const std::size_t n = x.dim(0), k = x.dim(1);
  if (labels.size() != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_str(x.shape()));
  Tensor prob(Shape{n, k});
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw ShapeError("softmax_cross_entropy: label out of range");
    double mx = x.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      prob.at(i, j) = std::exp(x.at(i, j) - mx);
      z += prob.at(i, j);
    }
    for (std::size_t j = 0; j < k; ++j) prob.at(i, j) /= z;
    loss += -(x.at(i, labels[i]) - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(n);
  Var in[] = {logits};
  return g.record(OpKind::SoftmaxCrossEntropy, in, Tensor::scalar(loss * inv),
                  [=, prob = std::move(prob), lab = std::move(labels)](
                      const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < k; ++j) {
                        const double d = prob.at(i, j) - (j == lab[i] ? 1.0 : 0.0);
                        gi[0]->at(i, j) += go[0] * d * inv;
                      }
                  });
}

Var detach(Graph& g, Var a) {
  Tensor copy = g.value(a);
  return g.constant(std::move(copy));
}

}  // namespace ops

Var apply(Graph& g, OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs) {
  auto need = [&](std::size_t count) {
    if (inputs.size() != count)
      throw std::invalid_argument(op_name(kind) + ": expected " + std::to_string(count) +
                                  " inputs, got " + std::to_string(inputs.size()));
  };
  switch (kind) {
    case OpKind::Add: need(2); return ops::add(g, inputs[0], inputs[1]);
    case OpKind::Sub: need(2); return ops::sub(g, inputs[0], inputs[1]);
    case OpKind::Mul: need(2); return ops::mul(g, inputs[0], inputs[1]);
    case OpKind::Scale: need(1); return ops::scale(g, inputs[0], attrs.scalar);
    case OpKind::AddScalar: need(1); return ops::add_scalar(g, inputs[0], attrs.scalar);
    case OpKind::DivByScalar: need(2); return ops::div_by_scalar(g, inputs[0], inputs[1]);
    case OpKind::MatMul: need(2); return ops::matmul(g, inputs[0], inputs[1]);
    case OpKind::Linear: need(3); return ops::linear(g, inputs[0], inputs[1], inputs[2]);
    case OpKind::Conv2d:
      need(3);
      return ops::conv2d(g, inputs[0], inputs[1], inputs[2], attrs.stride, attrs.pad);
    case OpKind::Relu: need(1); return ops::relu(g, inputs[0]);
    case OpKind::MaxPool2: need(1); return ops::max_pool2(g, inputs[0]);
    case OpKind::Mean: need(1); return ops::mean(g, inputs[0], attrs.axis);
    case OpKind::Sum: need(1); return ops::sum(g, inputs[0]);
    case OpKind::Abs: need(1); return ops::abs(g, inputs[0]);
    case OpKind::Square: need(1); return ops::square(g, inputs[0]);
    case OpKind::Softmax:
      need(1);
      return ops::softmax(g, inputs[0], attrs.axis, attrs.range_lo, attrs.range_hi);
    case OpKind::FrobeniusNorm: need(1); return ops::frobenius_norm(g, inputs[0]);
    case OpKind::SmoothL1: need(1); return ops::smooth_l1(g, inputs[0]);
    case OpKind::Gram: need(1); return ops::gram(g, inputs[0]);
    case OpKind::RoiPool:
      need(1);
      return ops::roi_pool(g, inputs[0], attrs.rois, attrs.pool_size, attrs.spatial_scale);
    case OpKind::Reshape: need(1); return ops::reshape(g, inputs[0], attrs.shape);
    case OpKind::Gather: need(1); return ops::gather(g, inputs[0], attrs.indices);
    case OpKind::SigmoidBce: need(1); return ops::sigmoid_bce(g, inputs[0], attrs.targets);
    case OpKind::SoftmaxCrossEntropy: {
      need(1);
      std::vector<std::size_t> labels(attrs.indices);
      return ops::softmax_cross_entropy(g, inputs[0], std::move(labels));
    }
    case OpKind::Detach: need(1); return ops::detach(g, inputs[0]);
    case OpKind::Leaf: break;
  }
  throw std::invalid_argument("apply: unsupported op kind " + op_name(kind));
}

}  // namespace tridet
