#pragma once

#include <cstddef>

#include "tridet/autodiff.hpp"

namespace tridet {

/// Backbone features [c,h,w] of the old, incremental and residual models.
struct FeatureTriple {
  Var f_om, f_im, f_rm;
};

/// RoI-pooled features [n,c,P,P], all pooled with the incremental model's RoIs.
struct PooledTriple {
  Var p_om, p_im, p_rm;
};

/// Class logits over the same RoIs: om [n, A+1], im [n, A+B+1], rm [n, B+1].
struct LogitTriple {
  Var om, im, rm;
  std::size_t old_classes = 0;
  std::size_t new_classes = 0;
};

/// Channel mean of f[c,h,w] -> [h,w].
Var attention_map(Graph& g, Var f);

/// Mean |G_b - G_a| with G = (M M^T) / (||M M^T||_F + eps).
Var attn_pair_loss(Graph& g, Var m_a, Var m_b);

/// Old/incremental attention distillation plus the merge term between
/// f_om + f_rm and f_im.
Var d_fea(Graph& g, const FeatureTriple& t);

struct ResidualLoss {
  Var base;
  Var pool;
  Var total;
};

/// Residual distillation on backbone features (f_im - f_om against f_rm)
/// and on pooled features (both directions, elementwise L1 means).
ResidualLoss d_res(Graph& g, const FeatureTriple& feat, const PooledTriple& pooled);

struct ClsTerms {
  Var old_term;
  Var new_term;  // constant 0 when there are no new classes
  Var total;
};

/// Both halves of d_cls kept apart so callers can evaluate them on different RoI subsets.
ClsTerms d_cls_terms(Graph& g, const LogitTriple& logits);

/// Squared distance between restricted softmaxes: old+background columns of
/// the incremental model against the old model, new-class columns against
/// the residual model's new-class columns. Averaged over RoIs.
Var d_cls(Graph& g, const LogitTriple& logits);

}  // namespace tridet
