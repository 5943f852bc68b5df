#include "tridet/distill.hpp"

#include <stdexcept>

namespace tridet {

namespace {

void require_same(const Graph& g, const char* what, Var a, Var b) {
  if (g.value(a).shape() != g.value(b).shape())
    throw ShapeError(std::string(what) + ": shapes differ " + shape_str(g.value(a).shape()) +
                     " vs " + shape_str(g.value(b).shape()));
}

void validate(const Graph& g, const FeatureTriple& t) {
  if (g.value(t.f_om).rank() != 3) throw ShapeError("feature triple members must be [c,h,w]");
  require_same(g, "feature triple", t.f_om, t.f_im);
  require_same(g, "feature triple", t.f_om, t.f_rm);
}

Var normalized_gram(Graph& g, Var m) {
  Var gm = ops::gram(g, m);
  return ops::div_by_scalar(g, gm, ops::add_scalar(g, ops::frobenius_norm(g, gm), kNormEpsilon));
}

}  // namespace

Var attention_map(Graph& g, Var f) {
  if (g.value(f).rank() != 3)
    throw ShapeError("attention_map: expected [c,h,w], got " + shape_str(g.value(f).shape()));
  return ops::mean(g, f, 0);
}

Var attn_pair_loss(Graph& g, Var m_a, Var m_b) {
  require_same(g, "attn_pair_loss", m_a, m_b);
  if (g.value(m_a).rank() != 2) throw ShapeError("attn_pair_loss: maps must be [h,w]");
  return ops::mean_all(g, ops::abs(g, ops::sub(g, normalized_gram(g, m_b), normalized_gram(g, m_a))));
}

Var d_fea(Graph& g, const FeatureTriple& t) {
  validate(g, t);
  Var m_om = attention_map(g, t.f_om);
  Var m_im = attention_map(g, t.f_im);
  Var m_syn = attention_map(g, ops::add(g, t.f_om, t.f_rm));
  return ops::add(g, attn_pair_loss(g, m_om, m_im), attn_pair_loss(g, m_syn, m_im));
}

ResidualLoss d_res(Graph& g, const FeatureTriple& feat, const PooledTriple& pooled) {
  validate(g, feat);
  require_same(g, "pooled triple", pooled.p_om, pooled.p_im);
  require_same(g, "pooled triple", pooled.p_om, pooled.p_rm);
  ResidualLoss out;
  Var m_res = attention_map(g, ops::sub(g, feat.f_im, feat.f_om));
  out.base = attn_pair_loss(g, m_res, attention_map(g, feat.f_rm));
  Var forward = ops::sub(g, ops::sub(g, pooled.p_im, pooled.p_om), pooled.p_rm);
  Var reverse = ops::sub(g, ops::sub(g, pooled.p_im, pooled.p_rm), pooled.p_om);
  out.pool = ops::add(g, ops::mean_all(g, ops::abs(g, forward)),
                      ops::mean_all(g, ops::abs(g, reverse)));
  out.total = ops::add(g, out.base, out.pool);
  return out;
}

ClsTerms d_cls_terms(Graph& g, const LogitTriple& l) {
  const Tensor& om = g.value(l.om);
  const Tensor& im = g.value(l.im);
  const Tensor& rm = g.value(l.rm);
  const std::size_t A = l.old_classes, B = l.new_classes;
  if (om.rank() != 2 || im.rank() != 2 || rm.rank() != 2)
    throw ShapeError("d_cls: logits must be [n,k]");
  const std::size_t n = om.dim(0);
  if (n == 0 || im.dim(0) != n || rm.dim(0) != n)
    throw ShapeError("d_cls: logit row counts differ");
  if (om.dim(1) != A + 1 || im.dim(1) != A + B + 1 || rm.dim(1) != B + 1)
    throw ShapeError("d_cls: logit widths " + shape_str(om.shape()) + " " +
                     shape_str(im.shape()) + " " + shape_str(rm.shape()) +
                     " inconsistent with class counts");
  Var old_term = ops::mean_all(
      g, ops::square(g, ops::sub(g, ops::softmax(g, l.im, 1, 0, A + 1), ops::softmax(g, l.om, 1))));
  if (B == 0) {
    Var zero = g.constant(Tensor::scalar(0.0));
    return {old_term, zero, ops::add(g, old_term, zero)};
  }
  Var new_term = ops::mean_all(
      g, ops::square(g, ops::sub(g, ops::softmax(g, l.im, 1, A + 1, A + B + 1),
                                 ops::softmax(g, l.rm, 1, 1, B + 1))));
  return {old_term, new_term, ops::add(g, old_term, new_term)};
}

Var d_cls(Graph& g, const LogitTriple& l) { return d_cls_terms(g, l).total; }

}  // namespace tridet
