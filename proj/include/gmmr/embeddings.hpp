#pragma once

// Gaussian embeddings for entities and relations, k-component GMM embeddings
// for queries, the anchor lift, and the canonical (constrained) view.
//
// A query embedding is stored raw as one k x 3d matrix
//   [alpha_logits | mu | sigma_raw]
// and only the canonical view constrains it: alpha = softmax over the k rows
// of each column, sigma = softplus(sigma_raw).

#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "gmmr/error.hpp"
#include "gmmr/numerics.hpp"
#include "gmmr/rng.hpp"

namespace gmmr {

struct Ablation {
  bool no_cardinality = false;  // alpha frozen at 1/k
  bool no_dispersion = false;   // sigma frozen at 1
  bool mwd_distance = false;    // transport term only

  bool any() const { return no_cardinality || no_dispersion || mwd_distance; }
  friend bool operator==(const Ablation&, const Ablation&) = default;
};

/// Owns parameters at stable addresses, in registration order.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;

  Parameter& add(std::string name, std::size_t rows, std::size_t cols) {
    for (const auto& p : params_) {
      if (p.name == name) throw Error("duplicate parameter name " + name);
    }
    params_.push_back(Parameter{std::move(name), params_.size(), Tensor(rows, cols)});
    return params_.back();
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  const Parameter* find(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  std::vector<const Parameter*> list() const {
    std::vector<const Parameter*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
};

/// Uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.values()) v = uniform_real(rng, -bound, bound);
}

// ---------------------------------------------------------------------------
// Value types

/// Univariate Gaussian per dimension; both fields are 1 x d.
struct GaussianEmbedding {
  Tensor mu;
  Tensor sigma_raw;
};

/// Raw k x 3d query embedding.
struct GmmEmbedding {
  Tensor raw;

  std::size_t k() const { return raw.rows(); }
  std::size_t d() const { return raw.cols() / 3; }
};

struct CanonicalGaussian {
  Tensor mu;     // 1 x d
  Tensor sigma;  // 1 x d, positive
};

struct CanonicalGmm {
  Tensor alpha;  // k x d, columns sum to 1
  Tensor mu;     // k x d
  Tensor sigma;  // k x d, positive
};

inline CanonicalGaussian canonicalize(const GaussianEmbedding& e, const Ablation& ab = {}) {
  CanonicalGaussian c{e.mu, Tensor(e.sigma_raw.rows(), e.sigma_raw.cols())};
  for (std::size_t i = 0; i < c.sigma.size(); ++i) {
    c.sigma[i] = ab.no_dispersion ? 1.0 : kernel::softplus(e.sigma_raw[i]);
  }
  return c;
}

inline CanonicalGmm canonicalize(const GmmEmbedding& g, const Ablation& ab = {}) {
  if (g.raw.cols() % 3 != 0 || g.raw.rows() == 0) {
    throw ShapeError("GMM embedding must be k x 3d, got " + g.raw.shape_string());
  }
  const std::size_t k = g.k(), d = g.d();
  CanonicalGmm c{Tensor(k, d), Tensor(k, d), Tensor(k, d)};
  for (std::size_t j = 0; j < d; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) mx = std::max(mx, g.raw(i, j));
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += (c.alpha(i, j) = std::exp(g.raw(i, j) - mx));
    for (std::size_t i = 0; i < k; ++i) {
      c.alpha(i, j) = ab.no_cardinality ? 1.0 / static_cast<double>(k) : c.alpha(i, j) / s;
      c.mu(i, j) = g.raw(i, d + j);
      c.sigma(i, j) = ab.no_dispersion ? 1.0 : kernel::softplus(g.raw(i, 2 * d + j));
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Parameter tables

struct EmbeddingTables {
  Parameter* entity_mu = nullptr;          // V x d
  Parameter* entity_sigma_raw = nullptr;   // V x d
  Parameter* relation_mu = nullptr;        // R x d
  Parameter* relation_sigma_raw = nullptr; // R x d

  static EmbeddingTables create(ParameterSet& ps, std::size_t num_entities, std::size_t num_relations,
                                std::size_t d) {
    EmbeddingTables t;
    t.entity_mu = &ps.add("entity.mu", num_entities, d);
    t.entity_sigma_raw = &ps.add("entity.sigma_raw", num_entities, d);
    t.relation_mu = &ps.add("relation.mu", num_relations, d);
    t.relation_sigma_raw = &ps.add("relation.sigma_raw", num_relations, d);
    return t;
  }

  void init(Rng& rng) const {
    const std::size_t d = entity_mu->value.cols();
    for (Parameter* p : {entity_mu, entity_sigma_raw, relation_mu, relation_sigma_raw}) {
      init_uniform(p->value, d, rng);
    }
  }

  std::size_t num_entities() const { return entity_mu->value.rows(); }
  std::size_t num_relations() const { return relation_mu->value.rows(); }

  GaussianEmbedding entity(std::size_t e) const { return row_pair(*entity_mu, *entity_sigma_raw, e); }
  GaussianEmbedding relation(std::size_t r) const {
    return row_pair(*relation_mu, *relation_sigma_raw, r);
  }

 private:
  static GaussianEmbedding row_pair(const Parameter& mu, const Parameter& sr, std::size_t i) {
    if (i >= mu.value.rows()) throw InputError("embedding row " + std::to_string(i) + " out of range");
    const std::size_t d = mu.value.cols();
    GaussianEmbedding g{Tensor(1, d), Tensor(1, d)};
    for (std::size_t j = 0; j < d; ++j) {
      g.mu[j] = mu.value(i, j);
      g.sigma_raw[j] = sr.value(i, j);
    }
    return g;
  }
};

struct AnchorLift {
  Parameter* O_alpha = nullptr;  // k x d
  Parameter* O_mu = nullptr;     // k x d
  Parameter* O_sigma = nullptr;  // k x d

  static AnchorLift create(ParameterSet& ps, std::size_t k, std::size_t d) {
    return {&ps.add("lift.O_alpha", k, d), &ps.add("lift.O_mu", k, d), &ps.add("lift.O_sigma", k, d)};
  }

  void init(Rng& rng) const {
    const std::size_t d = O_alpha->value.cols();
    for (Parameter* p : {O_alpha, O_mu, O_sigma}) init_uniform(p->value, d, rng);
  }
};

// ---------------------------------------------------------------------------
// Tape-level forms

/// Raw k x 3d embedding of an anchor whose Gaussian is (mu, sigma_raw), both 1 x d.
inline Var lift_anchor(Binder& b, Var mu, Var sigma_raw, const AnchorLift& lift) {
  const Tensor& oa = lift.O_alpha->value;
  const std::size_t k = oa.rows(), d = oa.cols();
  if (mu.rows() != 1 || mu.cols() != d || sigma_raw.rows() != 1 || sigma_raw.cols() != d) {
    throw ShapeError("lift_anchor: entity " + mu.value().shape_string() + "/" +
                     sigma_raw.value().shape_string() + " vs lift " + oa.shape_string());
  }
  Var alpha = b(*lift.O_alpha);
  Var m = add(broadcast_row(mu, k), b(*lift.O_mu));
  Var s = add(broadcast_row(sigma_raw, k), b(*lift.O_sigma));
  return concat_cols({alpha, m, s});
}

inline GmmEmbedding lift_anchor(const GaussianEmbedding& e, const AnchorLift& lift) {
  Tape tape(false);
  Binder b(tape, nullptr);
  Var out = lift_anchor(b, tape.constant(e.mu), tape.constant(e.sigma_raw), lift);
  return {out.value()};
}

struct CanonicalVars {
  Var alpha;  // k x d
  Var mu;     // k x d
  Var sigma;  // k x d
};

inline CanonicalVars canonicalize(Var raw, const Ablation& ab = {}) {
  const std::size_t k = raw.rows(), d = raw.cols() / 3;
  if (raw.cols() % 3 != 0) throw ShapeError("GMM embedding must be k x 3d, got " + raw.value().shape_string());
  Tape& t = *raw.tape();
  CanonicalVars c;
  c.alpha = ab.no_cardinality ? t.constant(Tensor(k, d, 1.0 / static_cast<double>(k)))
                              : softmax(slice_cols(raw, 0, d), Axis::cols);
  c.mu = slice_cols(raw, d, d);
  c.sigma = ab.no_dispersion ? t.constant(Tensor(k, d, 1.0)) : softplus(slice_cols(raw, 2 * d, d));
  return c;
}

}  // namespace gmmr
