#include "tridet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace tridet {

namespace {

double eval_at(const ScalarFn& f, std::span<const Tensor> point) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(point.size());
  for (const auto& t : point) vars.push_back(g.constant(t));
  const Tensor& out = g.value(f(g, vars));
  return out.item();
}

}  // namespace

double evaluate(const ScalarFn& f, std::span<const Tensor> point) { return eval_at(f, point); }

double kink_distance(const Graph& g) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t id = 0; id < g.size(); ++id) {
    const auto& node = g.node(id);
    if (node.inputs.empty()) continue;
    const Tensor& x = g.node(node.inputs[0]).value;
    switch (node.kind) {
      case OpKind::Relu:
      case OpKind::Abs:
        for (double v : x.data()) best = std::min(best, std::fabs(v));
        break;
      case OpKind::SmoothL1:
        for (double v : x.data()) best = std::min(best, std::fabs(std::fabs(v) - 1.0));
        break;
      case OpKind::MaxPool2: {
        const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t y = 0; y + 1 < H; y += 2)
            for (std::size_t xx = 0; xx + 1 < W; xx += 2) {
              double w[4] = {x.at(c, y, xx), x.at(c, y, xx + 1), x.at(c, y + 1, xx),
                             x.at(c, y + 1, xx + 1)};
              std::sort(w, w + 4);
              if (w[3] == 0.0 && w[2] == 0.0) continue;
              best = std::min(best, w[3] - w[2]);
            }
        break;
      }
      default: break;
    }
  }
  return best;
}

double kink_distance(const ScalarFn& f, std::span<const Tensor> point) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : point) vars.push_back(g.constant(t));
  f(g, vars);
  return kink_distance(g);
}

GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> point,
                           const GradCheckOptions& options) {
  GradCheckResult result;
  if (!(options.step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const auto& t : point) vars.push_back(g.leaf(t, true));
    Var root = f(g, vars);
    Gradients grads = backward(g, root);
    for (const auto& v : vars) analytic.push_back(grads.of(v));
  }

  std::mt19937_64 rng(options.seed);
  std::vector<Tensor> probe(point.begin(), point.end());
  for (std::size_t t = 0; t < probe.size(); ++t) {
    std::vector<std::size_t> coords(probe[t].numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords != 0 && coords.size() > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double orig = probe[t][i];
      probe[t][i] = orig + options.step;
      const double fp = eval_at(f, probe);
      probe[t][i] = orig - options.step;
      const double fm = eval_at(f, probe);
      probe[t][i] = orig;
      ++result.coords_checked;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        result.finite = false;
        result.worst_input = t;
        result.worst_index = i;
        result.failure = "non-finite function value at input " + std::to_string(t) +
                         " coordinate " + std::to_string(i);
        result.max_rel_error = std::numeric_limits<double>::infinity();
        return result;
      }
      const double numeric = (fp - fm) / (2.0 * options.step);
      const double a = analytic[t][i];
      const double err =
          std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = t;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace tridet
