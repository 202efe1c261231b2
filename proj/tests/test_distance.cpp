#include <gtest/gtest.h>

#include "gmmr/distance.hpp"
#include "gmmr/rng.hpp"

using namespace gmmr;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(r, c);
  for (double& v : t.values()) v = uniform_real(rng, lo, hi);
  return t;
}

// Both KL divergences summed directly, per dimension and component.
double direct_kl_sum(const Tensor& alpha) {
  const std::size_t k = alpha.rows();
  const double u = 1.0 / static_cast<double>(k);
  double kl_ua = 0.0, kl_au = 0.0;
  for (std::size_t j = 0; j < alpha.cols(); ++j)
    for (std::size_t i = 0; i < k; ++i) {
      const double a = std::clamp(alpha(i, j), 1e-6, 1.0);
      kl_ua += u * (std::log(u) - std::log(a));
      kl_au += a * (std::log(a) - std::log(u));
    }
  return kl_ua + kl_au;
}

CanonicalGmm random_gmm(std::size_t k, std::size_t d, Rng& rng) {
  return canonicalize(GmmEmbedding{random_tensor(k, 3 * d, rng, -2, 2)});
}

CanonicalGaussian random_entity(std::size_t d, Rng& rng) {
  return canonicalize(GaussianEmbedding{random_tensor(1, d, rng, -2, 2), random_tensor(1, d, rng, -2, 2)});
}

}  // namespace

TEST(W2, ClosedFormCases) {
  EXPECT_EQ(w2_gauss(0, 1, 0, 1), 0.0);
  EXPECT_EQ(w2_gauss(3, 1, 0, 1), 3.0);
  EXPECT_DOUBLE_EQ(w2_gauss(1, 2, 4, 6), 5.0);
  EXPECT_THROW(w2_gauss(0, 0, 0, 1), InputError);
  EXPECT_THROW(w2_gauss(0, 1, 0, -1), InputError);
}

TEST(Mixed, CoincidentUniformIsZero) {
  CanonicalGaussian e{Tensor::row({0.3, -1.0}), Tensor::row({0.5, 2.0})};
  CanonicalGmm q{Tensor(3, 2, 1.0 / 3.0), Tensor(3, 2), Tensor(3, 2)};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      q.mu(i, j) = e.mu[j];
      q.sigma(i, j) = e.sigma[j];
    }
  EXPECT_NEAR(mixed_distance(e, q).total, 0.0, 1e-15);
}

TEST(Mixed, TwoComponentCardinalityValue) {
  CanonicalGaussian e{Tensor::row({0.0}), Tensor::row({1.0})};
  CanonicalGmm q{Tensor(2, 1, std::vector<double>{0.25, 0.75}), Tensor(2, 1), Tensor(2, 1, 1.0)};
  auto bd = mixed_distance(e, q);
  EXPECT_NEAR(bd.total, 0.25 * (std::log(2.0) + std::log(1.5)), 1e-15);
  EXPECT_NEAR(bd.total, 0.274653, 1e-6);
  EXPECT_EQ(bd.transport_term, 0.0);
}

TEST(Mixed, SingleComponentIsSummedW2) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    auto e = random_entity(5, rng);
    auto q = random_gmm(1, 5, rng);
    double ref = 0.0;
    for (std::size_t j = 0; j < 5; ++j) ref += w2_gauss(e.mu[j], e.sigma[j], q.mu(0, j), q.sigma(0, j));
    auto bd = mixed_distance(e, q);
    EXPECT_EQ(bd.cardinality_term, 0.0);
    EXPECT_NEAR(bd.total, ref, 1e-13);
  }
}

TEST(Mixed, CardinalityEqualsDirectKlSums) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + uniform_index(rng, 4), d = 1 + uniform_index(rng, 6);
    auto q = canonicalize(GmmEmbedding{random_tensor(k, 3 * d, rng, -20, 20)});
    auto bd = mixed_distance(random_entity(d, rng), q);
    EXPECT_NEAR(bd.cardinality_term, direct_kl_sum(q.alpha), 1e-10 * std::max(1.0, bd.cardinality_term));
    EXPECT_GE(bd.cardinality_term, 0.0);
    EXPECT_GE(bd.transport_term, 0.0);
    EXPECT_DOUBLE_EQ(bd.total, bd.cardinality_term + bd.transport_term);
    double per_dim = 0.0;
    for (double v : bd.per_dimension) per_dim += v;
    EXPECT_NEAR(per_dim, bd.total, 1e-12 * std::max(1.0, bd.total));
  }
}

TEST(Mixed, TransportSymmetricUnderSwap) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto e = random_entity(3, rng);
    auto q = random_gmm(1, 3, rng);
    CanonicalGaussian e2{Tensor(1, 3), Tensor(1, 3)};
    CanonicalGmm q2 = q;
    for (std::size_t j = 0; j < 3; ++j) {
      e2.mu[j] = q.mu(0, j);
      e2.sigma[j] = q.sigma(0, j);
      q2.mu(0, j) = e.mu[j];
      q2.sigma(0, j) = e.sigma[j];
    }
    EXPECT_NEAR(mixed_distance(e, q).transport_term, mixed_distance(e2, q2).transport_term, 1e-14);
  }
}

TEST(Mixed, MonotoneInMeanGap) {
  CanonicalGmm q{Tensor(1, 1, 1.0), Tensor(1, 1, 0.0), Tensor(1, 1, 0.7)};
  double prev = -1.0;
  for (double gap = 0.0; gap < 5.0; gap += 0.25) {
    const double d = mixed_distance(CanonicalGaussian{Tensor::row({gap}), Tensor::row({1.3})}, q).total;
    EXPECT_GT(d, prev);
    prev = d;
  }
}

TEST(Mixed, DimensionMismatch) {
  Rng rng(4);
  EXPECT_THROW(mixed_distance(random_entity(3, rng), random_gmm(2, 4, rng)), ShapeError);
}

TEST(Mwd, TransportOnly) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    GaussianEmbedding e{random_tensor(1, 4, rng), random_tensor(1, 4, rng)};
    GmmEmbedding q{random_tensor(3, 12, rng, -2, 2)};
    auto bd = mixed_distance(e, q);
    EXPECT_EQ(mwd_variant(e, q), bd.transport_term);
    EXPECT_LT(mwd_variant(e, q), bd.total);
  }
  GaussianEmbedding e{random_tensor(1, 4, rng), random_tensor(1, 4, rng)};
  GmmEmbedding q{random_tensor(3, 12, rng)};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) q.raw(i, j) = 0.0;
  EXPECT_NEAR(mixed_distance(e, q).total, mwd_variant(e, q), 1e-12);
}

TEST(QueryDistance, MinimumOverBranches) {
  Rng rng(6);
  GaussianEmbedding e{random_tensor(1, 3, rng), random_tensor(1, 3, rng)};
  std::vector<GmmEmbedding> branches;
  for (int i = 0; i < 3; ++i) branches.push_back({random_tensor(2, 9, rng, -2, 2)});
  double m = 1e300;
  for (const auto& b : branches) m = std::min(m, mixed_distance(e, b).total);
  EXPECT_EQ(query_distance(e, branches), m);
  EXPECT_EQ(query_distance(e, std::span(branches).first(1)), mixed_distance(e, branches[0]).total);
  EXPECT_THROW(query_distance(e, std::span<const GmmEmbedding>()), InputError);

  // a branch that coincides with the entity wins with 0
  GmmEmbedding exact{Tensor(2, 9)};
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      exact.raw(i, 3 + j) = e.mu[j];
      exact.raw(i, 6 + j) = e.sigma_raw[j];
    }
  branches.push_back(exact);
  EXPECT_NEAR(query_distance(e, branches), 0.0, 1e-15);
  EXPECT_EQ(closest_branch(e, branches).branch, 3u);
}

TEST(Similarity, ClampAndOrdering) {
  EXPECT_EQ(similarity_from_distance(0.0), 1e10);
  EXPECT_EQ(similarity_from_distance(2.0), 0.5);
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const double a = uniform_real(rng, 1e-8, 10), b = uniform_real(rng, 1e-8, 10);
    if (a < b) {
      EXPECT_GT(similarity_from_distance(a), similarity_from_distance(b));
    }
  }
}

TEST(TapeForm, MatchesValueFormForEveryEntity) {
  Rng rng(8);
  for (Ablation ab : {Ablation{}, Ablation{true, false, false}, Ablation{false, true, false},
                      Ablation{false, false, true}}) {
    const std::size_t V = 7, k = 3, d = 4;
    Tensor emu = random_tensor(V, d, rng), esr = random_tensor(V, d, rng);
    GmmEmbedding q{random_tensor(k, 3 * d, rng, -2, 2)};
    Tape t(false);
    Var sigma = ab.no_dispersion ? t.constant(Tensor(V, d, 1.0)) : softplus(t.constant(esr));
    const Tensor& got = branch_distances(canonicalize(t.constant(q.raw), ab), t.constant(emu), sigma, ab).value();
    for (std::size_t v = 0; v < V; ++v) {
      GaussianEmbedding e{Tensor(1, d), Tensor(1, d)};
      for (std::size_t j = 0; j < d; ++j) {
        e.mu[j] = emu(v, j);
        e.sigma_raw[j] = esr(v, j);
      }
      EXPECT_NEAR(got[v], mixed_distance(e, q, ab).total, 1e-12);
    }
  }
}

TEST(TapeForm, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  for (int draw = 0; draw < 5; ++draw) {
    const std::size_t V = 4, k = 3, d = 3;
    std::vector<Tensor> x{random_tensor(V, d, rng, -2, 2), random_tensor(V, d, rng, -2, 2),
                          random_tensor(k, 3 * d, rng, -2, 2)};
    Tensor w = random_tensor(1, V, rng);
    auto f = [&](Tape& t, const std::vector<Var>& v) {
      Var dist = branch_distances(canonicalize(v[2]), v[0], softplus(v[1]), Ablation{});
      return sum(mul(dist, t.constant(w)));
    };
    std::vector<Tensor> g;
    for (auto& xi : x) g.emplace_back(xi.rows(), xi.cols());
    {
      Tape t;
      std::vector<Var> leaves;
      for (std::size_t i = 0; i < 3; ++i) leaves.push_back(t.leaf(x[i], &g[i]));
      t.backward(f(t, leaves));
    }
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t e = 0; e < x[i].size(); ++e) {
        const double x0 = x[i][e];
        auto eval = [&](double v) {
          x[i][e] = v;
          Tape t(false);
          std::vector<Var> leaves;
          for (auto& xi : x) leaves.push_back(t.constant(xi));
          return f(t, leaves).value().item();
        };
        const double num = (eval(x0 + 1e-5) - eval(x0 - 1e-5)) / 2e-5;
        x[i][e] = x0;
        EXPECT_LE(std::abs(num - g[i][e]) / std::max({std::abs(num), std::abs(g[i][e]), 1e-6}), 1e-4)
            << "input " << i << " entry " << e;
      }
    }
  }
}

TEST(Breakdown, JsonFields) {
  Rng rng(10);
  auto j = mixed_distance(random_entity(2, rng), random_gmm(2, 2, rng)).to_json();
  for (const char* key : {"cardinality_term", "transport_term", "total", "per_dimension"}) EXPECT_TRUE(j.contains(key));
  EXPECT_EQ(j["per_dimension"].size(), 2u);
}
