#pragma once

// Mixed Wasserstein distance between an entity Gaussian and a query GMM:
// a symmetric-KL cardinality term between uniform weights and alpha, plus
// uniformly weighted 2-Wasserstein distances to each component, summed over
// dimensions. Union queries take the minimum over DNF branches.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <json.hpp>

#include "gmmr/embeddings.hpp"
#include "gmmr/error.hpp"
#include "gmmr/numerics.hpp"

namespace gmmr {

inline constexpr double kAlphaFloor = 1e-6;
inline constexpr double kDistanceFloor = 1e-10;

struct DistanceBreakdown {
  double cardinality_term = 0.0;
  double transport_term = 0.0;
  double total = 0.0;
  std::vector<double> per_dimension;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["cardinality_term"] = cardinality_term;
    j["transport_term"] = transport_term;
    j["total"] = total;
    j["per_dimension"] = per_dimension;
    return j;
  }
};

inline double w2_gauss(double mu1, double sigma1, double mu2, double sigma2) {
  if (!(sigma1 > 0.0) || !(sigma2 > 0.0)) throw InputError("w2_gauss: sigma must be positive");
  return std::hypot(mu1 - mu2, sigma1 - sigma2);
}

inline DistanceBreakdown mixed_distance(const CanonicalGaussian& e, const CanonicalGmm& q,
                                        bool with_cardinality = true) {
  const std::size_t k = q.alpha.rows(), d = q.alpha.cols();
  if (e.mu.size() != d || e.sigma.size() != d) {
    throw ShapeError("mixed_distance: entity dimension " + std::to_string(e.mu.size()) +
                     " vs query dimension " + std::to_string(d));
  }
  const double u = 1.0 / static_cast<double>(k);
  DistanceBreakdown out;
  out.per_dimension.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double card = 0.0, transport = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      if (with_cardinality) {
        const double a = std::clamp(q.alpha(i, j), kAlphaFloor, 1.0);
        card += u * std::log(u / a) + a * std::log(a / u);
      }
      transport += u * w2_gauss(e.mu[j], e.sigma[j], q.mu(i, j), q.sigma(i, j));
    }
    out.cardinality_term += card;
    out.transport_term += transport;
    out.per_dimension[j] = card + transport;
  }
  out.total = out.cardinality_term + out.transport_term;
  return out;
}

inline DistanceBreakdown mixed_distance(const GaussianEmbedding& e, const GmmEmbedding& q,
                                        const Ablation& ab = {}) {
  return mixed_distance(canonicalize(e, ab), canonicalize(q, ab), !ab.mwd_distance);
}

/// Transport term alone.
inline double mwd_variant(const GaussianEmbedding& e, const GmmEmbedding& q, const Ablation& ab = {}) {
  return mixed_distance(canonicalize(e, ab), canonicalize(q, ab), false).total;
}

struct BranchChoice {
  std::size_t branch = 0;
  DistanceBreakdown breakdown;
};

/// Closest DNF branch and its breakdown.
inline BranchChoice closest_branch(const GaussianEmbedding& e, std::span<const GmmEmbedding> branches,
                                   const Ablation& ab = {}) {
  if (branches.empty()) throw InputError("query_distance: empty branch list");
  BranchChoice best{0, mixed_distance(e, branches[0], ab)};
  for (std::size_t b = 1; b < branches.size(); ++b) {
    DistanceBreakdown bd = mixed_distance(e, branches[b], ab);
    if (bd.total < best.breakdown.total) best = {b, std::move(bd)};
  }
  return best;
}

inline double query_distance(const GaussianEmbedding& e, std::span<const GmmEmbedding> branches,
                             const Ablation& ab = {}) {
  return closest_branch(e, branches, ab).breakdown.total;
}

inline double similarity_from_distance(double distance) {
  return 1.0 / std::max(distance, kDistanceFloor);
}

inline double similarity(const GaussianEmbedding& e, std::span<const GmmEmbedding> branches,
                         const Ablation& ab = {}) {
  return similarity_from_distance(query_distance(e, branches, ab));
}

// ---------------------------------------------------------------------------
// Tape-level forms, scoring every entity at once

/// (1/k) sum_i sum_j w2 between entity rows (V x d) and query components
/// (k x d); returns 1 x V. The derivative at coincident points is 0.
inline Var gauss_transport(Var ent_mu, Var ent_sigma, Var q_mu, Var q_sigma) {
  const Tensor& em = ent_mu.value();
  const Tensor& es = ent_sigma.value();
  const Tensor& qm = q_mu.value();
  const Tensor& qs = q_sigma.value();
  if (!em.same_shape(es) || !qm.same_shape(qs) || em.cols() != qm.cols()) {
    throw ShapeError("gauss_transport: entity " + em.shape_string() + "/" + es.shape_string() +
                     " vs query " + qm.shape_string() + "/" + qs.shape_string());
  }
  const std::size_t V = em.rows(), k = qm.rows(), d = qm.cols();
  const double u = 1.0 / static_cast<double>(k);
  Tensor out(1, V);
  for (std::size_t v = 0; v < V; ++v) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < d; ++j) s += std::hypot(em(v, j) - qm(i, j), es(v, j) - qs(i, j));
    out[v] = u * s;
  }
  return ent_mu.tape()->record(
      std::move(out), {ent_mu, ent_sigma, q_mu, q_sigma},
      [ent_mu, ent_sigma, q_mu, q_sigma, u](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& em = t.value(ent_mu);
        const Tensor& es = t.value(ent_sigma);
        const Tensor& qm = t.value(q_mu);
        const Tensor& qs = t.value(q_sigma);
        Tensor* gem = t.requires_grad(ent_mu) ? &t.grad(ent_mu.id()) : nullptr;
        Tensor* ges = t.requires_grad(ent_sigma) ? &t.grad(ent_sigma.id()) : nullptr;
        Tensor* gqm = t.requires_grad(q_mu) ? &t.grad(q_mu.id()) : nullptr;
        Tensor* gqs = t.requires_grad(q_sigma) ? &t.grad(q_sigma.id()) : nullptr;
        const std::size_t V = em.rows(), k = qm.rows(), d = qm.cols();
        for (std::size_t v = 0; v < V; ++v) {
          const double gv = g[v] * u;
          if (gv == 0.0) continue;
          for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
              const double dm = em(v, j) - qm(i, j), ds = es(v, j) - qs(i, j);
              const double w = std::hypot(dm, ds);
              if (w == 0.0) continue;
              const double cm = gv * dm / w, cs = gv * ds / w;
              if (gem) (*gem)(v, j) += cm;
              if (gqm) (*gqm)(i, j) -= cm;
              if (ges) (*ges)(v, j) += cs;
              if (gqs) (*gqs)(i, j) -= cs;
            }
          }
        }
      });
}

/// KL(u||alpha) + KL(alpha||u) summed over all positions, 1 x 1.
/// Uses (alpha - u)(log alpha - log u), the same quantity.
inline Var cardinality_term(Var alpha) {
  const double u = 1.0 / static_cast<double>(alpha.rows());
  Var a = clamp(alpha, kAlphaFloor, 1.0);
  return sum(mul(affine(a, 1.0, -u), affine(log(a), 1.0, -std::log(u))));
}

/// Distances from every entity (canonical V x d rows) to one branch; 1 x V.
inline Var branch_distances(const CanonicalVars& q, Var ent_mu, Var ent_sigma, const Ablation& ab) {
  Var transport = gauss_transport(ent_mu, ent_sigma, q.mu, q.sigma);
  if (ab.mwd_distance || ab.no_cardinality) return transport;
  return add(transport, expand(cardinality_term(q.alpha), 1, transport.cols()));
}

struct UnionAggregation {
  bool soft = false;          // log-sum-exp soft minimum instead of min
  double temperature = 0.1;
};

inline Var aggregate_branches(std::span<const Var> per_branch, const UnionAggregation& agg = {}) {
  if (per_branch.empty()) throw InputError("query_distance: empty branch list");
  if (per_branch.size() == 1) return per_branch[0];
  return agg.soft ? soft_min(per_branch, agg.temperature) : min_of(per_branch);
}

}  // namespace gmmr
