#include "tridet/gradsuite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>

#include "tridet/distill.hpp"
#include "tridet/gradcheck.hpp"
#include "tridet/trainer.hpp"

namespace tridet {

namespace {

constexpr double kKinkMargin = 1e-3;
constexpr std::size_t kMaxResamples = 1000;

struct Instance {
  std::vector<Tensor> point;
  ScalarFn fn;
};

using CaseFn = std::function<Instance(Rng&)>;

Tensor uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.data()) v = d(rng);
  return t;
}

/// Uniform values kept at least kKinkMargin away from every point in `kinks`.
Tensor uniform_away(Shape shape, Rng& rng, double lo, double hi, std::vector<double> kinks) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.data()) {
    bool near = true;
    while (near) {
      v = d(rng);
      near = false;
      for (double k : kinks) near = near || std::fabs(v - k) < kKinkMargin;
    }
  }
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Wraps a tensor-valued op into a scalar by a fixed random weighting.
Instance weighted(std::vector<Tensor> point, Rng& rng,
                  std::function<Var(Graph&, std::span<const Var>)> op) {
  Graph probe;
  std::vector<Var> vars;
  for (const auto& t : point) vars.push_back(probe.constant(t));
  const Shape out_shape = probe.value(op(probe, vars)).shape();
  Tensor w = uniform(out_shape, rng, 0.5, 1.5);
  return {std::move(point), [op, w](Graph& g, std::span<const Var> in) {
            return ops::sum(g, ops::mul(g, op(g, in), g.constant(w)));
          }};
}

Instance unary_case(Rng& rng, Tensor x, std::function<Var(Graph&, Var)> op) {
  return weighted({std::move(x)}, rng, [op](Graph& g, std::span<const Var> in) {
    return op(g, in[0]);
  });
}

Tensor distinct_pool_input(Rng& rng) {
  const Shape shape{2, 4, 6};
  std::vector<double> values(shape_numel(shape));
  std::iota(values.begin(), values.end(), 0.0);
  std::shuffle(values.begin(), values.end(), rng);
  std::uniform_real_distribution<double> jitter(-0.003, 0.003);
  for (double& v : values) v = (v - 24.0) * 0.01 + jitter(rng);
  return Tensor(shape, std::move(values));
}

RoiRect random_roi(Rng& rng, double size) {
  std::uniform_real_distribution<double> d(0.0, size);
  double x1 = d(rng), x2 = d(rng), y1 = d(rng), y2 = d(rng);
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  return {x1, y1, std::max(x2, x1 + 1.0), std::max(y2, y1 + 1.0)};
}

BBox random_box(Rng& rng, double size, double min_side) {
  std::uniform_real_distribution<double> side(min_side, size / 2.0);
  const double w = side(rng), h = side(rng);
  std::uniform_real_distribution<double> px(0.0, size - w), py(0.0, size - h);
  const double x = px(rng), y = py(rng);
  return {x, y, x + w, y + h};
}

DetectorModel perturbed(DetectorModel m, Rng& rng, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  for (auto& p : m.params)
    for (double& v : p.value.data()) v += d(rng);
  return m;
}

BoundModel bound_from(const DetectorModel& model, std::span<const Var> vars) {
  return BoundModel{&model, std::vector<Var>(vars.begin(), vars.end())};
}

std::vector<Tensor> param_values(const DetectorModel& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.params) out.push_back(p.value);
  return out;
}

Instance frcnn_case(Rng& rng) {
  const DetectorConfig config = micro_config();
  const int C = static_cast<int>(pick(rng, 1, 3));
  auto model = std::make_shared<DetectorModel>(perturbed(make_detector(config, C, rng), rng, 0.05));
  const Tensor image = uniform({3, config.image_size, config.image_size}, rng, 0.0, 1.0);
  FrcnnTargets targets;
  const std::size_t n = pick(rng, 1, 2);
  for (std::size_t k = 0; k < n; ++k) {
    const BBox b = random_box(rng, static_cast<double>(config.image_size), 4.0);
    targets.rpn_boxes.push_back(b);
    targets.rcnn_boxes.push_back({b, static_cast<int>(pick(rng, 1, static_cast<std::size_t>(C)))});
  }
  LossPlan plan;
  {
    Graph g;
    const BoundModel m = bind(g, *model, false);
    RpnOutput rpn = rpn_forward(g, m, forward_features(g, m, g.constant(image)));
    plan = plan_losses(config, propose(config, g.value(rpn.objectness), g.value(rpn.deltas)),
                       targets, rng);
  }
  return {param_values(*model), [model, image, plan](Graph& g, std::span<const Var> in) {
            const BoundModel m = bound_from(*model, in);
            Var f = forward_features(g, m, g.constant(image));
            return frcnn_loss(g, m, f, rpn_forward(g, m, f), plan).total;
          }};
}

Instance l_all_case(Rng& rng) {
  const DetectorConfig config = micro_config();
  const ClassSplit split{{1, 2}, {3}};
  auto om = std::make_shared<DetectorModel>(perturbed(make_detector(config, 2, rng), rng, 0.2));
  auto im = std::make_shared<DetectorModel>(perturbed(init_incremental(*om, 1, rng), rng, 0.05));
  auto rm = std::make_shared<DetectorModel>(perturbed(init_residual(*om, 1, rng), rng, 0.05));
  Scene scene{uniform({3, config.image_size, config.image_size}, rng, 0.0, 1.0), {}};
  scene.objects.push_back({random_box(rng, static_cast<double>(config.image_size), 4.0), 3});

  TrainConfig cfg;
  cfg.lambda = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
  std::vector<ImagePlan> plans;
  {
    Graph g;
    const std::vector<Scene> batch{scene};
    plans = build_step_losses(g, bind(g, *om, false), bind(g, *im, false), bind(g, *rm, false),
                              split, batch, cfg, rng)
                .plans;
  }
  std::vector<Tensor> point = param_values(*im);
  for (auto& t : param_values(*rm)) point.push_back(std::move(t));
  return {std::move(point),
          [om, im, rm, scene, cfg, plans, split](Graph& g, std::span<const Var> in) {
            const BoundModel bom = bind(g, *om, false);
            const BoundModel bim = bound_from(*im, in.subspan(0, kNumParamSlots));
            const BoundModel brm = bound_from(*rm, in.subspan(kNumParamSlots, kNumParamSlots));
            Rng unused(0);
            const std::vector<Scene> batch{scene};
            return build_step_losses(g, bom, bim, brm, split, batch, cfg, unused, plans).all;
          }};
}

const std::vector<std::pair<std::string, CaseFn>>& cases() {
  static const std::vector<std::pair<std::string, CaseFn>> table = {
      {"add",
       [](Rng& r) {
         return weighted({uniform({3, 4}, r), uniform({3, 4}, r)}, r,
                         [](Graph& g, std::span<const Var> in) { return ops::add(g, in[0], in[1]); });
       }},
      {"sub",
       [](Rng& r) {
         return weighted({uniform({3, 4}, r), uniform({3, 4}, r)}, r,
                         [](Graph& g, std::span<const Var> in) { return ops::sub(g, in[0], in[1]); });
       }},
      {"mul",
       [](Rng& r) {
         return weighted({uniform({3, 4}, r), uniform({3, 4}, r)}, r,
                         [](Graph& g, std::span<const Var> in) { return ops::mul(g, in[0], in[1]); });
       }},
      {"scale",
       [](Rng& r) {
         const double k = uniform({1}, r, -2.0, 2.0)[0];
         return unary_case(r, uniform({5}, r), [k](Graph& g, Var x) { return ops::scale(g, x, k); });
       }},
      {"add_scalar",
       [](Rng& r) {
         const double k = uniform({1}, r, -2.0, 2.0)[0];
         return unary_case(r, uniform({5}, r),
                           [k](Graph& g, Var x) { return ops::add_scalar(g, x, k); });
       }},
      {"div_by_scalar",
       [](Rng& r) {
         Tensor s = uniform_away({1}, r, -2.0, 2.0, {0.0});
         if (std::fabs(s[0]) < 0.5) s[0] = s[0] < 0 ? -0.5 : 0.5;
         return weighted({uniform({2, 3}, r), s}, r, [](Graph& g, std::span<const Var> in) {
           return ops::div_by_scalar(g, in[0], in[1]);
         });
       }},
      {"matmul",
       [](Rng& r) {
         return weighted({uniform({3, 4}, r), uniform({4, 2}, r)}, r,
                         [](Graph& g, std::span<const Var> in) {
                           return ops::matmul(g, in[0], in[1]);
                         });
       }},
      {"linear",
       [](Rng& r) {
         return weighted({uniform({3, 4}, r), uniform({5, 4}, r), uniform({5}, r)}, r,
                         [](Graph& g, std::span<const Var> in) {
                           return ops::linear(g, in[0], in[1], in[2]);
                         });
       }},
      {"conv2d",
       [](Rng& r) {
         const std::size_t stride = pick(r, 1, 2), pad = pick(r, 0, 1);
         return weighted({uniform({2, 5, 5}, r), uniform({3, 2, 3, 3}, r), uniform({3}, r)}, r,
                         [stride, pad](Graph& g, std::span<const Var> in) {
                           return ops::conv2d(g, in[0], in[1], in[2], stride, pad);
                         });
       }},
      {"relu",
       [](Rng& r) {
         return unary_case(r, uniform_away({12}, r, -1.0, 1.0, {0.0}),
                           [](Graph& g, Var x) { return ops::relu(g, x); });
       }},
      {"max_pool2",
       [](Rng& r) {
         return unary_case(r, distinct_pool_input(r),
                           [](Graph& g, Var x) { return ops::max_pool2(g, x); });
       }},
      {"mean",
       [](Rng& r) {
         const std::size_t axis = pick(r, 0, 2);
         return unary_case(r, uniform({2, 3, 4}, r),
                           [axis](Graph& g, Var x) { return ops::mean(g, x, axis); });
       }},
      {"sum",
       [](Rng& r) {
         return unary_case(r, uniform({3, 3}, r), [](Graph& g, Var x) { return ops::sum(g, x); });
       }},
      {"abs",
       [](Rng& r) {
         return unary_case(r, uniform_away({12}, r, -1.0, 1.0, {0.0}),
                           [](Graph& g, Var x) { return ops::abs(g, x); });
       }},
      {"square",
       [](Rng& r) {
         return unary_case(r, uniform({6}, r), [](Graph& g, Var x) { return ops::square(g, x); });
       }},
      {"softmax",
       [](Rng& r) {
         const std::size_t axis = pick(r, 0, 1);
         const std::size_t extent = axis == 0 ? 4 : 5;
         const std::size_t lo = pick(r, 0, extent - 2), hi = pick(r, lo + 1, extent);
         return unary_case(r, uniform({4, 5}, r, -3.0, 3.0), [axis, lo, hi](Graph& g, Var x) {
           return ops::softmax(g, x, axis, lo, hi);
         });
       }},
      {"frobenius_norm",
       [](Rng& r) {
         return unary_case(r, uniform({3, 3}, r),
                           [](Graph& g, Var x) { return ops::frobenius_norm(g, x); });
       }},
      {"smooth_l1",
       [](Rng& r) {
         return unary_case(r, uniform_away({12}, r, -3.0, 3.0, {-1.0, 1.0}),
                           [](Graph& g, Var x) { return ops::smooth_l1(g, x); });
       }},
      {"gram",
       [](Rng& r) {
         return unary_case(r, uniform({4, 3}, r), [](Graph& g, Var x) { return ops::gram(g, x); });
       }},
      {"roi_pool",
       [](Rng& r) {
         std::vector<RoiRect> rois;
         const std::size_t n = pick(r, 1, 3), P = pick(r, 2, 4);
         for (std::size_t k = 0; k < n; ++k) rois.push_back(random_roi(r, 32.0));
         return unary_case(r, uniform({2, 8, 8}, r), [rois, P](Graph& g, Var x) {
           return ops::roi_pool(g, x, rois, P, 0.25);
         });
       }},
      {"reshape",
       [](Rng& r) {
         return unary_case(r, uniform({2, 6}, r),
                           [](Graph& g, Var x) { return ops::reshape(g, x, Shape{3, 4}); });
       }},
      {"gather",
       [](Rng& r) {
         std::vector<std::size_t> idx;
         for (int k = 0; k < 8; ++k) idx.push_back(pick(r, 0, 9));
         return unary_case(r, uniform({10}, r),
                           [idx](Graph& g, Var x) { return ops::gather(g, x, idx); });
       }},
      {"sigmoid_bce",
       [](Rng& r) {
         std::vector<double> t;
         for (int k = 0; k < 7; ++k) t.push_back(static_cast<double>(pick(r, 0, 1)));
         return unary_case(r, uniform({7}, r, -4.0, 4.0),
                           [t](Graph& g, Var x) { return ops::sigmoid_bce(g, x, t); });
       }},
      {"softmax_cross_entropy",
       [](Rng& r) {
         std::vector<std::size_t> labels;
         for (int k = 0; k < 4; ++k) labels.push_back(pick(r, 0, 4));
         return unary_case(r, uniform({4, 5}, r, -3.0, 3.0), [labels](Graph& g, Var x) {
           return ops::softmax_cross_entropy(g, x, labels);
         });
       }},
      {"attn_pair",
       [](Rng& r) -> Instance {
         return {{uniform({5, 5}, r), uniform({5, 5}, r)},
                 [](Graph& g, std::span<const Var> in) { return attn_pair_loss(g, in[0], in[1]); }};
       }},
      {"d_fea",
       [](Rng& r) -> Instance {
         return {{uniform({2, 4, 4}, r), uniform({2, 4, 4}, r), uniform({2, 4, 4}, r)},
                 [](Graph& g, std::span<const Var> in) {
                   return d_fea(g, FeatureTriple{in[0], in[1], in[2]});
                 }};
       }},
      {"d_res_base",
       [](Rng& r) -> Instance {
         const Tensor p = uniform({1, 2, 2, 2}, r);
         return {{uniform({2, 4, 4}, r), uniform({2, 4, 4}, r), uniform({2, 4, 4}, r)},
                 [p](Graph& g, std::span<const Var> in) {
                   Var pv = g.constant(p);
                   return d_res(g, FeatureTriple{in[0], in[1], in[2]}, PooledTriple{pv, pv, pv})
                       .base;
                 }};
       }},
      {"d_res_pool",
       [](Rng& r) -> Instance {
         Tensor om = uniform({3, 2, 2, 2}, r), rm = uniform({3, 2, 2, 2}, r);
         Tensor im = uniform({3, 2, 2, 2}, r);
         for (std::size_t k = 0; k < im.numel(); ++k) {
           // Keep the residual away from the absolute-value kink.
           const double res = im[k] - om[k] - rm[k];
           if (std::fabs(res) < kKinkMargin) im[k] += 0.01;
         }
         const Tensor f = uniform({2, 3, 3}, r);
         return {{om, im, rm}, [f](Graph& g, std::span<const Var> in) {
                   Var fv = g.constant(f);
                   return d_res(g, FeatureTriple{fv, fv, fv}, PooledTriple{in[0], in[1], in[2]})
                       .pool;
                 }};
       }},
      {"d_cls",
       [](Rng& r) -> Instance {
         const std::size_t A = pick(r, 1, 3), B = pick(r, 1, 2), n = pick(r, 1, 4);
         return {{uniform({n, A + 1}, r, -3, 3), uniform({n, A + B + 1}, r, -3, 3),
                  uniform({n, B + 1}, r, -3, 3)},
                 [A, B](Graph& g, std::span<const Var> in) {
                   return d_cls(g, LogitTriple{in[0], in[1], in[2], A, B});
                 }};
       }},
      {"frcnn_loss", frcnn_case},
      {"l_all", l_all_case},
  };
  return table;
}

}  // namespace

DetectorConfig micro_config() {
  DetectorConfig c;
  c.image_size = 16;
  c.conv1 = c.conv2 = c.conv3 = 2;
  c.rpn_channels = 2;
  c.fc = 8;
  c.num_proposals = 8;
  c.rpn_batch = 16;
  c.rcnn_batch = 8;
  return c;
}

std::vector<std::string> gradient_suite_names() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : cases()) names.push_back(name);
  return names;
}

GradSuiteEntry run_gradient_case(const std::string& name, const GradSuiteOptions& options) {
  const auto& table = cases();
  const auto it = std::find_if(table.begin(), table.end(),
                               [&](const auto& c) { return c.first == name; });
  if (it == table.end()) throw std::invalid_argument("unknown gradient case '" + name + "'");
  GradSuiteEntry entry;
  entry.name = name;
  entry.passed = true;
  const auto t0 = std::chrono::steady_clock::now();
  const auto salt = static_cast<std::uint64_t>(it - table.begin()) + 1;
  for (std::size_t i = 0; i < options.instances; ++i) {
    Rng rng(options.seed * 1000003ull + salt * 7919ull + i);
    Instance inst = it->second(rng);
    for (std::size_t attempt = 0;
         attempt < kMaxResamples && kink_distance(inst.fn, inst.point) < kKinkMargin; ++attempt) {
      inst = it->second(rng);
      ++entry.resampled;
    }
    GradCheckOptions gco;
    gco.step = options.step;
    const GradCheckResult r = grad_check(inst.fn, inst.point, gco);
    ++entry.instances;
    entry.coords += r.coords_checked;
    entry.max_error = std::max(entry.max_error, r.max_rel_error);
    if (!r.finite || !(r.max_rel_error < options.tolerance)) {
      entry.passed = false;
      if (entry.failure.empty())
        entry.failure = r.finite ? "instance " + std::to_string(i) + ": error " +
                                       std::to_string(r.max_rel_error) + " at input " +
                                       std::to_string(r.worst_input) + " coordinate " +
                                       std::to_string(r.worst_index)
                                 : "instance " + std::to_string(i) + ": " + r.failure;
    }
  }
  entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return entry;
}

std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options) {
  std::vector<GradSuiteEntry> out;
  for (const auto& name : gradient_suite_names()) out.push_back(run_gradient_case(name, options));
  return out;
}

}  // namespace tridet
