#pragma once

// Neural logical operators on raw k x 3d GMM embeddings: projection,
// intersection, negation, and post-order evaluation of a union-free branch.
// Union has no operator; branches are scored separately (see distance.hpp).

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "gmmr/embeddings.hpp"
#include "gmmr/numerics.hpp"
#include "gmmr/query_dag.hpp"

namespace gmmr {

namespace detail {

struct LayerNormParams {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;

  static LayerNormParams create(ParameterSet& ps, const std::string& prefix, std::size_t width) {
    LayerNormParams ln{&ps.add(prefix + ".gain", 1, width), &ps.add(prefix + ".bias", 1, width)};
    ln.gain->value.fill(1.0);
    return ln;
  }

  Var operator()(Binder& b, Var x) const { return layer_norm(x, b(*gain), b(*bias)); }
};

/// Row-wise x W (+ bias).
inline Var linear(Binder& b, Var x, const Parameter& w, const Parameter* bias = nullptr) {
  Var y = matmul(x, b(w));
  if (bias) y = add(y, expand(b(*bias), y.rows(), y.cols()));
  return y;
}

/// Single-layer row-wise feed-forward: ReLU(x W + b).
struct RowFeedForward {
  Parameter* w = nullptr;
  Parameter* bias = nullptr;

  static RowFeedForward create(ParameterSet& ps, const std::string& prefix, std::size_t width) {
    return {&ps.add(prefix + ".W", width, width), &ps.add(prefix + ".b", 1, width)};
  }

  void init(Rng& rng) const {
    init_uniform(w->value, w->value.rows(), rng);
    init_uniform(bias->value, w->value.rows(), rng);
  }

  Var operator()(Binder& b, Var x) const { return relu(linear(b, x, *w, bias)); }
};

struct AttentionWeights {
  Parameter* W_Q = nullptr;
  Parameter* W_K = nullptr;
  Parameter* W_V = nullptr;

  static AttentionWeights create(ParameterSet& ps, const std::string& prefix, std::size_t width) {
    return {&ps.add(prefix + ".W_Q", width, width), &ps.add(prefix + ".W_K", width, width),
            &ps.add(prefix + ".W_V", width, width)};
  }

  void init(Rng& rng) const {
    for (Parameter* p : {W_Q, W_K, W_V}) init_uniform(p->value, p->value.rows(), rng);
  }

  /// Attention with queries from `x` and keys/values from `y`.
  Var operator()(Binder& b, Var x, Var y) const {
    const double scale = std::sqrt(static_cast<double>(W_Q->value.rows()));
    return attention(matmul(x, b(*W_Q)), matmul(y, b(*W_K)), matmul(y, b(*W_V)), scale);
  }
};

inline void require_gmm_shape(Var g, std::size_t k, std::size_t width, const char* op) {
  if (g.rows() != k || g.cols() != width) {
    throw ShapeError(std::string(op) + ": expected (" + std::to_string(k) + "x" + std::to_string(width) +
                     ") embedding, got " + g.value().shape_string());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Projection

struct ProjectionParams {
  Parameter* alpha_r_aug = nullptr;  // 1 x d, shared by all relations
  Parameter* W_g = nullptr;
  Parameter* U_g = nullptr;
  Parameter* W_h = nullptr;
  Parameter* U_h = nullptr;
  detail::LayerNormParams ln_g;
  detail::LayerNormParams ln_h;
  detail::AttentionWeights attn;

  static ProjectionParams create(ParameterSet& ps, std::size_t d) {
    const std::size_t w = 3 * d;
    ProjectionParams p;
    p.alpha_r_aug = &ps.add("proj.alpha_r_aug", 1, d);
    p.W_g = &ps.add("proj.W_g", w, w);
    p.U_g = &ps.add("proj.U_g", w, w);
    p.W_h = &ps.add("proj.W_h", w, w);
    p.U_h = &ps.add("proj.U_h", w, w);
    p.ln_g = detail::LayerNormParams::create(ps, "proj.ln_g", w);
    p.ln_h = detail::LayerNormParams::create(ps, "proj.ln_h", w);
    p.attn = detail::AttentionWeights::create(ps, "proj.attn", w);
    return p;
  }

  void init(Rng& rng) const {
    init_uniform(alpha_r_aug->value, alpha_r_aug->value.cols(), rng);
    for (Parameter* m : {W_g, U_g, W_h, U_h}) init_uniform(m->value, m->value.rows(), rng);
    attn.init(rng);
  }
};

/// Moves the head embedding (k x 3d) along relation (mu, sigma_raw), each 1 x d.
inline Var project(Binder& b, Var head, Var rel_mu, Var rel_sigma_raw, const ProjectionParams& p) {
  const std::size_t d = p.alpha_r_aug->value.cols(), k = head.rows();
  detail::require_gmm_shape(head, k, 3 * d, "project");
  if (rel_mu.cols() != d || rel_sigma_raw.cols() != d || rel_mu.rows() != 1 || rel_sigma_raw.rows() != 1) {
    throw ShapeError("project: relation " + rel_mu.value().shape_string() + "/" +
                     rel_sigma_raw.value().shape_string() + " does not match d=" + std::to_string(d));
  }
  Var r_aug = concat_cols({b(*p.alpha_r_aug), rel_mu, rel_sigma_raw});  // 1 x 3d
  Var gate = sigmoid(p.ln_g(b, add(broadcast_row(matmul(r_aug, b(*p.W_g)), k), matmul(head, b(*p.U_g)))));
  Var cand = relu(add(broadcast_row(p.ln_h(b, matmul(r_aug, b(*p.W_h))), k), matmul(head, b(*p.U_h))));
  // gate * head + (1 - gate) * cand
  Var mixed = add(mul(gate, head), mul(affine(gate, -1.0, 1.0), cand));
  return p.attn(b, mixed, mixed);
}

// ---------------------------------------------------------------------------
// Intersection

struct IntersectionParams {
  // inter-query scoring MLP, 3d -> h -> 3d. The output layer has no bias:
  // a shared shift cancels in the softmax across inputs.
  Parameter* mlp_W1 = nullptr;
  Parameter* mlp_b1 = nullptr;
  Parameter* mlp_W2 = nullptr;
  detail::AttentionWeights self_attn;   // over the row-stacked inputs
  detail::RowFeedForward rff_in;        // applied to the self-attention output
  Parameter* seeds = nullptr;           // k x 3d pooling queries
  detail::AttentionWeights pool_attn;   // seeds attend to the stacked rows
  detail::LayerNormParams ln1;
  detail::RowFeedForward rff_block;
  detail::LayerNormParams ln2;
  Parameter* W_gt = nullptr;            // 6d x 3d fusion gate

  static IntersectionParams create(ParameterSet& ps, std::size_t k, std::size_t d, std::size_t hidden = 0) {
    const std::size_t w = 3 * d;
    if (hidden == 0) hidden = w;
    IntersectionParams p;
    p.mlp_W1 = &ps.add("inter.mlp.W1", w, hidden);
    p.mlp_b1 = &ps.add("inter.mlp.b1", 1, hidden);
    p.mlp_W2 = &ps.add("inter.mlp.W2", hidden, w);
    p.self_attn = detail::AttentionWeights::create(ps, "inter.self_attn", w);
    p.rff_in = detail::RowFeedForward::create(ps, "inter.rff_in", w);
    p.seeds = &ps.add("inter.seeds", k, w);
    p.pool_attn = detail::AttentionWeights::create(ps, "inter.pool_attn", w);
    p.ln1 = detail::LayerNormParams::create(ps, "inter.ln1", w);
    p.rff_block = detail::RowFeedForward::create(ps, "inter.rff_block", w);
    p.ln2 = detail::LayerNormParams::create(ps, "inter.ln2", w);
    p.W_gt = &ps.add("inter.W_gt", 2 * w, w);
    return p;
  }

  void init(Rng& rng) const {
    const std::size_t w = mlp_W1->value.rows(), h = mlp_W1->value.cols();
    init_uniform(mlp_W1->value, w, rng);
    init_uniform(mlp_b1->value, w, rng);
    init_uniform(mlp_W2->value, h, rng);
    self_attn.init(rng);
    rff_in.init(rng);
    init_uniform(seeds->value, w, rng);
    pool_attn.init(rng);
    rff_block.init(rng);
    init_uniform(W_gt->value, W_gt->value.rows(), rng);
  }
};

/// Intersects m >= 2 embeddings of identical shape. The result does not
/// depend on the order of `inputs`.
inline Var intersect(Binder& b, std::span<const Var> inputs, const IntersectionParams& p) {
  if (inputs.size() < 2) throw InputError("intersect needs at least two inputs");
  const std::size_t k = p.seeds->value.rows(), w = p.seeds->value.cols();
  for (const Var& g : inputs) detail::require_gmm_shape(g, k, w, "intersect");
  const std::size_t m = inputs.size();

  // inter-query level: elementwise softmax of MLP scores across the m inputs
  std::vector<Var> scores;
  scores.reserve(m);
  for (const Var& g : inputs) {
    Var hidden = relu(detail::linear(b, g, *p.mlp_W1, p.mlp_b1));
    scores.push_back(detail::linear(b, hidden, *p.mlp_W2));
  }
  Var weights = softmax_across(scores);
  Var pooled_q;
  for (std::size_t i = 0; i < m; ++i) {
    Var term = mul(slice_rows(weights, i * k, k), inputs[i]);
    pooled_q = i == 0 ? term : add(pooled_q, term);
  }

  // inter-subset level: self-attention over all m*k rows, then seed pooling
  Var stacked = concat_rows(inputs);
  Var mixed = p.self_attn(b, stacked, stacked);
  Var features = p.rff_in(b, mixed);
  Var s = b(*p.seeds);
  Var h = p.ln1(b, add(s, p.pool_attn(b, s, features)));
  Var pooled_s = p.ln2(b, add(h, p.rff_block(b, h)));

  Var gate = sigmoid(matmul(concat_cols({pooled_q, pooled_s}), b(*p.W_gt)));
  return add(mul(gate, pooled_q), mul(affine(gate, -1.0, 1.0), pooled_s));
}

// ---------------------------------------------------------------------------
// Negation

struct NegationParams {
  detail::AttentionWeights attn;
  detail::LayerNormParams ln1;
  detail::RowFeedForward rff;
  detail::LayerNormParams ln2;

  static NegationParams create(ParameterSet& ps, std::size_t d) {
    const std::size_t w = 3 * d;
    NegationParams p;
    p.attn = detail::AttentionWeights::create(ps, "neg.attn", w);
    p.ln1 = detail::LayerNormParams::create(ps, "neg.ln1", w);
    p.rff = detail::RowFeedForward::create(ps, "neg.rff", w);
    p.ln2 = detail::LayerNormParams::create(ps, "neg.ln2", w);
    return p;
  }

  void init(Rng& rng) const {
    attn.init(rng);
    rff.init(rng);
  }
};

inline Var negate(Binder& b, Var q, const NegationParams& p) {
  const std::size_t w = p.attn.W_Q->value.rows();
  detail::require_gmm_shape(q, q.rows(), w, "negate");
  Var h = p.ln1(b, add(q, p.attn(b, q, q)));
  return p.ln2(b, add(h, p.rff(b, h)));
}

// ---------------------------------------------------------------------------
// Branch evaluation

struct OperatorParams {
  ProjectionParams projection;
  IntersectionParams intersection;
  NegationParams negation;

  static OperatorParams create(ParameterSet& ps, std::size_t k, std::size_t d) {
    OperatorParams o;
    o.projection = ProjectionParams::create(ps, d);
    o.intersection = IntersectionParams::create(ps, k, d);
    o.negation = NegationParams::create(ps, d);
    return o;
  }

  void init(Rng& rng) const {
    projection.init(rng);
    intersection.init(rng);
    negation.init(rng);
  }
};

/// Post-order embedding of a union-free query.
inline Var embed_branch(Binder& b, const Query& q, const EmbeddingTables& tables, const AnchorLift& lift,
                        const OperatorParams& ops) {
  switch (q->kind()) {
    case QueryKind::anchor: {
      const std::size_t e = q->entity();
      if (e >= tables.num_entities()) throw InputError("anchor entity e" + std::to_string(e) + " out of range");
      return lift_anchor(b, slice_rows(b(*tables.entity_mu), e, 1),
                         slice_rows(b(*tables.entity_sigma_raw), e, 1), lift);
    }
    case QueryKind::projection: {
      const std::size_t r = q->relation();
      if (r >= tables.num_relations()) throw InputError("relation r" + std::to_string(r) + " out of range");
      Var head = embed_branch(b, q->child(), tables, lift, ops);
      return project(b, head, slice_rows(b(*tables.relation_mu), r, 1),
                     slice_rows(b(*tables.relation_sigma_raw), r, 1), ops.projection);
    }
    case QueryKind::negation:
      return negate(b, embed_branch(b, q->child(), tables, lift, ops), ops.negation);
    case QueryKind::intersection: {
      std::vector<Var> parts;
      for (const auto& c : q->children()) parts.push_back(embed_branch(b, c, tables, lift, ops));
      return intersect(b, parts, ops.intersection);
    }
    case QueryKind::union_:
      throw InputError("embed_branch needs a union-free query; rewrite with to_dnf first");
  }
  throw Error("unreachable query kind");
}

}  // namespace gmmr
