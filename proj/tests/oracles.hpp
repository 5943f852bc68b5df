#pragma once

// Deliberately naive reference implementations used to cross-check the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "tridet/boxes.hpp"
#include "tridet/eval.hpp"
#include "tridet/tensor.hpp"

namespace oracle {

using tridet::BBox;
using tridet::Detection;
using tridet::Tensor;

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return inter / uni;
}

/// Repeatedly keeps the best remaining detection of each class and strikes
/// out everything of that class overlapping it by more than `thresh`.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double thresh) {
  std::vector<bool> alive(dets.size(), true);
  std::vector<std::size_t> kept;
  for (;;) {
    std::size_t best = dets.size();
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (alive[i] && (best == dets.size() || dets[i].score > dets[best].score)) best = i;
    if (best == dets.size()) break;
    kept.push_back(best);
    alive[best] = false;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (alive[i] && dets[i].class_id == dets[best].class_id &&
          oracle::iou(dets[i].bbox, dets[best].bbox) > thresh)
        alive[i] = false;
  }
  std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b);
  });
  std::vector<Detection> out;
  for (auto i : kept) out.push_back(dets[i]);
  return out;
}

/// Sum over true positives of (1/G) * (best precision at any later prefix).
inline double ap(const std::vector<tridet::ScoredBox>& dets, const std::vector<tridet::GtBox>& gts,
                 double thresh) {
  if (gts.empty()) return 0.0;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i) order.push_back(i);
  for (std::size_t i = 0; i < order.size(); ++i)
    for (std::size_t j = order.size() - 1; j > i; --j)
      if (dets[order[j]].score > dets[order[j - 1]].score) std::swap(order[j], order[j - 1]);

  std::vector<bool> used(gts.size(), false), tp(order.size(), false);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& d = dets[order[k]];
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image != d.image) continue;
      const double v = oracle::iou(d.bbox, gts[g].bbox);
      if (v > best) best = v, arg = g;
    }
    if (best >= thresh) used[arg] = true, tp[k] = true;
  }
  std::vector<double> precision(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    double hits = 0;
    for (std::size_t j = 0; j <= k; ++j) hits += tp[j] ? 1.0 : 0.0;
    precision[k] = hits / static_cast<double>(k + 1);
  }
  double total = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (!tp[k]) continue;
    double envelope = 0.0;
    for (std::size_t j = k; j < order.size(); ++j) envelope = std::max(envelope, precision[j]);
    total += envelope / static_cast<double>(gts.size());
  }
  return total;
}

inline std::vector<double> attention(const Tensor& f) {
  const std::size_t C = f.dim(0), H = f.dim(1), W = f.dim(2);
  std::vector<double> m(H * W, 0.0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < C; ++k) s += f.at(k, i, j);
      m[i * W + j] = s / static_cast<double>(C);
    }
  return m;
}

inline std::vector<double> normalized_gram(const std::vector<double>& m, std::size_t H,
                                           std::size_t W) {
  std::vector<double> g(H * H, 0.0);
  for (std::size_t a = 0; a < H; ++a)
    for (std::size_t b = 0; b < H; ++b)
      for (std::size_t j = 0; j < W; ++j) g[a * H + b] += m[a * W + j] * m[b * W + j];
  double sq = 0.0;
  for (double v : g) sq += v * v;
  const double denom = std::sqrt(sq + 1e-12) + 1e-12;
  for (double& v : g) v /= denom;
  return g;
}

inline double attn_pair(const std::vector<double>& ma, const std::vector<double>& mb,
                        std::size_t H, std::size_t W) {
  const auto ga = normalized_gram(ma, H, W), gb = normalized_gram(mb, H, W);
  double s = 0.0;
  for (std::size_t k = 0; k < ga.size(); ++k) s += std::fabs(gb[k] - ga[k]);
  return s / static_cast<double>(ga.size());
}

inline Tensor add(const Tensor& a, const Tensor& b, double sign = 1.0) {
  Tensor out = a;
  for (std::size_t k = 0; k < out.numel(); ++k) out[k] = a[k] + sign * b[k];
  return out;
}

inline double d_fea(const Tensor& om, const Tensor& im, const Tensor& rm) {
  const std::size_t H = om.dim(1), W = om.dim(2);
  return attn_pair(attention(om), attention(im), H, W) +
         attn_pair(attention(add(om, rm)), attention(im), H, W);
}

inline double d_res_base(const Tensor& om, const Tensor& im, const Tensor& rm) {
  return attn_pair(attention(add(im, om, -1.0)), attention(rm), om.dim(1), om.dim(2));
}

inline double d_res_pool(const Tensor& p_om, const Tensor& p_im, const Tensor& p_rm) {
  double a = 0.0, b = 0.0;
  for (std::size_t k = 0; k < p_om.numel(); ++k) {
    a += std::fabs((p_im[k] - p_om[k]) - p_rm[k]);
    b += std::fabs((p_im[k] - p_rm[k]) - p_om[k]);
  }
  const double n = static_cast<double>(p_om.numel());
  return a / n + b / n;
}

inline std::vector<double> softmax_slice(const Tensor& logits, std::size_t row, std::size_t lo,
                                         std::size_t hi) {
  std::vector<double> e;
  double z = 0.0;
  for (std::size_t k = lo; k < hi; ++k) {
    e.push_back(std::exp(logits.at(row, k)));
    z += e.back();
  }
  for (double& v : e) v /= z;
  return e;
}

inline double d_cls(const Tensor& om, const Tensor& im, const Tensor& rm, std::size_t A,
                    std::size_t B) {
  const std::size_t n = om.dim(0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto c_om = softmax_slice(om, r, 0, A + 1);
    const auto c_im_old = softmax_slice(im, r, 0, A + 1);
    double old_term = 0.0;
    for (std::size_t k = 0; k <= A; ++k) old_term += std::pow(c_im_old[k] - c_om[k], 2);
    total += old_term / static_cast<double>(A + 1);
    if (B == 0) continue;
    const auto c_rm = softmax_slice(rm, r, 1, B + 1);
    const auto c_im_new = softmax_slice(im, r, A + 1, A + B + 1);
    double new_term = 0.0;
    for (std::size_t k = 0; k < B; ++k) new_term += std::pow(c_im_new[k] - c_rm[k], 2);
    total += new_term / static_cast<double>(B);
  }
  return total / static_cast<double>(n);
}

/// Keeps a detection unless some ground-truth box overlaps it by more than `thresh`.
inline std::vector<Detection> gt_filter(const std::vector<Detection>& dets,
                                        const std::vector<tridet::LabeledBox>& gt, double thresh) {
  std::vector<Detection> out;
  for (const auto& d : dets) {
    bool clash = false;
    for (const auto& g : gt) clash = clash || oracle::iou(d.bbox, g.bbox) > thresh;
    if (!clash) out.push_back(d);
  }
  return out;
}

}  // namespace oracle
