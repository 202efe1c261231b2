#pragma once

// Central finite-difference certification of tape gradients, and a suite
// covering every primitive, the operators, the distance and the full loss.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gmmr/distance.hpp"
#include "gmmr/model.hpp"
#include "gmmr/numerics.hpp"
#include "gmmr/operators.hpp"
#include "gmmr/query_dag.hpp"
#include "gmmr/rng.hpp"
#include "gmmr/training.hpp"

namespace gmmr {

struct GradCheckOptions {
  double step = 1e-4;
  // five-point central stencil: at a step small enough for the three-point
  // one, rounding noise (~1e-10 absolute) swamps entries near the floor
  bool fourth_order = true;
  std::size_t kink_retries = 2;
  // denominators below this are replaced by it, so entries whose true
  // gradient is ~0 are judged on absolute error
  double floor = 1e-6;
  std::size_t max_entries = 0;  // per tensor; 0 checks every entry
  std::uint64_t seed = 0;       // entry sampling when max_entries is set
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst;  // "tensor[index]" of the largest error
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t at_kink = 0;  // entries whose stencil never cleared a kink; not judged
  double seconds = 0.0;
};

/// Central difference of `eval` in the entry `x`, which is restored
/// afterwards. When the stencil straddles a kink of a non-smooth primitive
/// (the branch signature differs from the one at `x`), the step shrinks by
/// 10x, up to `kink_retries` times; nullopt if it never clears the kink.
template <typename F>
std::optional<double> central_difference(double& x, const GradCheckOptions& opt, F&& eval) {
  const double saved = x;
  auto at = [&](double point, std::uint64_t* sig) {
    x = point;
    BranchSignature s;
    double v;
    {
      BranchSignatureScope scope(s);
      v = eval();
    }
    *sig = s.hash;
    return v;
  };
  std::uint64_t base = 0, sig = 0;
  at(saved, &base);
  std::optional<double> out;
  double h = opt.step;
  for (std::size_t attempt = 0; attempt <= opt.kink_retries && !out; ++attempt, h /= 10.0) {
    bool smooth = true;
    auto probe = [&](double offset) {
      const double v = at(saved + offset, &sig);
      smooth = smooth && sig == base;
      return v;
    };
    double d;
    if (opt.fourth_order) {
      d = (8.0 * (probe(h) - probe(-h)) - (probe(2.0 * h) - probe(-2.0 * h))) / (12.0 * h);
    } else {
      d = (probe(h) - probe(-h)) / (2.0 * h);
    }
    if (smooth) out = d;
  }
  x = saved;
  return out;
}

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct CheckedTensor {
  std::string name;
  Tensor* value;
};

/// `f` builds a scalar on the given tape from leaves bound to `inputs` (in order).
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline GradCheckResult check_gradients(const std::string& name, const std::vector<CheckedTensor>& inputs,
                                       const ScalarFn& f, const GradCheckOptions& opt = {}) {
  const auto started = std::chrono::steady_clock::now();
  std::vector<Tensor> analytic;
  for (const auto& in : inputs) analytic.emplace_back(in.value->rows(), in.value->cols());
  {
    Tape tape(true);
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(tape.leaf(*inputs[i].value, &analytic[i]));
    tape.backward(f(tape, leaves));
  }
  auto evaluate = [&] {
    Tape tape(false);
    std::vector<Var> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(*in.value, nullptr));
    return f(tape, leaves).value().item();
  };

  GradCheckResult res;
  res.name = name;
  Rng rng(opt.seed);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor& x = *inputs[t].value;
    std::vector<std::size_t> entries(x.size());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (opt.max_entries && entries.size() > opt.max_entries) {
      shuffle(entries, rng);
      // keep the largest analytic entry among the sample
      auto largest = std::max_element(analytic[t].values().begin(), analytic[t].values().end(),
                                       [](double a, double b) { return std::abs(a) < std::abs(b); });
      const auto big = static_cast<std::size_t>(largest - analytic[t].values().begin());
      entries.resize(opt.max_entries);
      if (std::find(entries.begin(), entries.end(), big) == entries.end()) entries.back() = big;
    }
    for (std::size_t i : entries) {
      const auto fd = central_difference(x[i], opt, evaluate);
      if (!fd) {
        ++res.at_kink;
        continue;
      }
      const double numeric = *fd;
      const double err = relative_error(analytic[t][i], numeric, opt.floor);
      ++res.checked;
      if (err >= res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_analytic = analytic[t][i];
        res.worst_numeric = numeric;
        res.worst = inputs[t].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return res;
}

/// Same, for the parameters of a model: f evaluates a loss through a Binder.
inline GradCheckResult check_model_gradients(const std::string& name, Model& model,
                                             const std::function<double(const Model&, GradStore*)>& loss,
                                             const GradCheckOptions& opt = {}) {
  const auto started = std::chrono::steady_clock::now();
  const auto params = model.parameters().list();
  GradStore grads(params);
  loss(model, &grads);

  GradCheckResult res;
  res.name = name;
  Rng rng(opt.seed);
  auto& ps = model.parameters();
  for (std::size_t t = 0; t < ps.size(); ++t) {
    Tensor& x = ps[t].value;
    std::vector<std::size_t> entries(x.size());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (opt.max_entries && entries.size() > opt.max_entries) {
      shuffle(entries, rng);
      auto largest = std::max_element(grads[t].values().begin(), grads[t].values().end(),
                                       [](double a, double b) { return std::abs(a) < std::abs(b); });
      const auto big = static_cast<std::size_t>(largest - grads[t].values().begin());
      entries.resize(opt.max_entries);
      if (std::find(entries.begin(), entries.end(), big) == entries.end()) entries.back() = big;
    }
    for (std::size_t i : entries) {
      const auto fd = central_difference(x[i], opt, [&] { return loss(model, nullptr); });
      if (!fd) {
        ++res.at_kink;
        continue;
      }
      const double numeric = *fd;
      const double err = relative_error(grads[t][i], numeric, opt.floor);
      ++res.checked;
      if (err >= res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_analytic = grads[t][i];
        res.worst_numeric = numeric;
        res.worst = ps[t].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return res;
}

// ---------------------------------------------------------------------------
// Suite

struct GradCheckSuiteConfig {
  std::size_t d = 4;
  std::size_t k = 2;
  std::size_t num_entities = 8;
  std::size_t num_relations = 3;
  std::uint64_t seed = 0;
  GradCheckOptions options;
  // The operator checks cover every entry of their own parameters. The full
  // loss touches all of them through 14 queries, so it samples this many
  // entries per tensor (the largest-gradient entry always included); 0 = all.
  std::size_t loss_max_entries = 32;
};

namespace detail {

inline Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(r, c);
  for (double& v : t.values()) v = uniform_real(rng, lo, hi);
  return t;
}

/// Values bounded away from zero with random sign.
inline Tensor away_from_zero(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t(r, c);
  for (double& v : t.values()) v = (uniform_unit(rng) < 0.5 ? -1.0 : 1.0) * uniform_real(rng, 0.1, 1.0);
  return t;
}

/// Scalar readout sum(x * w) with a fixed random weight, so no output
/// direction is degenerate.
inline Var readout(Tape& t, Var x, Rng& rng) {
  return sum(mul(x, t.constant(random_tensor(x.rows(), x.cols(), rng))));
}

/// One sample per template with random anchors/relations and answers.
inline std::vector<QuerySample> random_template_batch(std::size_t V, std::size_t R, Rng& rng) {
  std::vector<QuerySample> out;
  for (const auto& t : all_templates()) {
    std::vector<EntityId> anchors(t.num_anchors);
    std::vector<RelationId> rels(t.num_relations);
    for (auto& a : anchors) a = static_cast<EntityId>(uniform_index(rng, V));
    for (auto& r : rels) r = static_cast<RelationId>(uniform_index(rng, R));
    QuerySample s;
    s.query = {instantiate_template(t, anchors, rels), t.name};
    for (EntityId e = 0; e < V; ++e) {
      if (uniform_unit(rng) < 0.3) s.easy_answers.push_back(e);
    }
    if (s.easy_answers.empty()) s.easy_answers.push_back(static_cast<EntityId>(uniform_index(rng, V)));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

inline std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckSuiteConfig& cfg) {
  using detail::away_from_zero;
  using detail::random_tensor;
  using detail::readout;
  const std::size_t d = cfg.d, k = cfg.k, w = 3 * d, V = cfg.num_entities;
  Rng rng(derive_seed(cfg.seed, "gradcheck"));
  std::vector<GradCheckResult> results;
  const GradCheckOptions& opt = cfg.options;

  // Each case owns its inputs and a readout seed so repeated evaluation
  // sees identical readout weights.
  auto run = [&](const std::string& name, std::vector<Tensor> values,
                 std::function<Var(Tape&, const std::vector<Var>&)> body) {
    const std::uint64_t readout_seed = rng();
    std::vector<CheckedTensor> inputs;
    for (std::size_t i = 0; i < values.size(); ++i) inputs.push_back({"x" + std::to_string(i), &values[i]});
    results.push_back(check_gradients(
        name, inputs,
        [&](Tape& t, const std::vector<Var>& xs) {
          Rng r(readout_seed);
          Var out = body(t, xs);
          return out.rows() == 1 && out.cols() == 1 ? out : readout(t, out, r);
        },
        opt));
  };

  // primitives
  run("matmul", {random_tensor(3, 4, rng), random_tensor(4, 2, rng)},
      [](Tape&, const std::vector<Var>& x) { return matmul(x[0], x[1]); });
  run("transpose", {random_tensor(3, 4, rng)}, [](Tape&, const std::vector<Var>& x) { return transpose(x[0]); });
  run("add", {random_tensor(2, 3, rng), random_tensor(2, 3, rng)},
      [](Tape&, const std::vector<Var>& x) { return add(x[0], x[1]); });
  run("sub", {random_tensor(2, 3, rng), random_tensor(2, 3, rng)},
      [](Tape&, const std::vector<Var>& x) { return sub(x[0], x[1]); });
  run("elementwise_mul", {random_tensor(2, 3, rng), random_tensor(2, 3, rng)},
      [](Tape&, const std::vector<Var>& x) { return mul(x[0], x[1]); });
  run("affine", {random_tensor(2, 3, rng)}, [](Tape&, const std::vector<Var>& x) { return affine(x[0], -1.5, 0.3); });
  run("broadcast_row", {random_tensor(1, 3, rng)},
      [](Tape&, const std::vector<Var>& x) { return broadcast_row(x[0], 4); });
  run("expand", {random_tensor(3, 1, rng)}, [](Tape&, const std::vector<Var>& x) { return expand(x[0], 3, 5); });
  run("concat_rows", {random_tensor(2, 3, rng), random_tensor(1, 3, rng)},
      [](Tape&, const std::vector<Var>& x) { return concat_rows({x[0], x[1]}); });
  run("concat_cols", {random_tensor(2, 3, rng), random_tensor(2, 1, rng)},
      [](Tape&, const std::vector<Var>& x) { return concat_cols({x[0], x[1]}); });
  run("slice_rows", {random_tensor(4, 3, rng)}, [](Tape&, const std::vector<Var>& x) { return slice_rows(x[0], 1, 2); });
  run("slice_cols", {random_tensor(3, 4, rng)}, [](Tape&, const std::vector<Var>& x) { return slice_cols(x[0], 1, 2); });
  run("sigmoid", {random_tensor(2, 3, rng, -3, 3)}, [](Tape&, const std::vector<Var>& x) { return sigmoid(x[0]); });
  run("relu", {away_from_zero(2, 3, rng)}, [](Tape&, const std::vector<Var>& x) { return relu(x[0]); });
  run("softplus", {random_tensor(2, 3, rng, -3, 3)}, [](Tape&, const std::vector<Var>& x) { return softplus(x[0]); });
  run("exp", {random_tensor(2, 3, rng)}, [](Tape&, const std::vector<Var>& x) { return exp(x[0]); });
  run("log", {random_tensor(2, 3, rng, 0.2, 2.0)}, [](Tape&, const std::vector<Var>& x) { return log(x[0]); });
  run("sqrt", {random_tensor(2, 3, rng, 0.2, 2.0)}, [](Tape&, const std::vector<Var>& x) { return sqrt(x[0]); });
  run("clamp", {random_tensor(2, 3, rng, 0.1, 0.9)},
      [](Tape&, const std::vector<Var>& x) { return clamp(x[0], 0.0, 1.0); });
  run("reciprocal_clamped", {random_tensor(2, 3, rng, 0.5, 2.0)},
      [](Tape&, const std::vector<Var>& x) { return reciprocal_clamped(x[0], 1e-10); });
  run("row_softmax", {random_tensor(3, 4, rng, -2, 2)},
      [](Tape&, const std::vector<Var>& x) { return softmax(x[0], Axis::rows); });
  run("column_softmax", {random_tensor(3, 4, rng, -2, 2)},
      [](Tape&, const std::vector<Var>& x) { return softmax(x[0], Axis::cols); });
  run("layer_norm", {random_tensor(3, 5, rng), random_tensor(1, 5, rng), random_tensor(1, 5, rng)},
      [](Tape&, const std::vector<Var>& x) { return layer_norm(x[0], x[1], x[2]); });
  run("sum", {random_tensor(2, 3, rng)}, [](Tape&, const std::vector<Var>& x) { return sum(x[0]); });
  run("sum_rows", {random_tensor(3, 2, rng)}, [](Tape&, const std::vector<Var>& x) { return sum_rows(x[0]); });
  run("gather_rows", {random_tensor(4, 3, rng)},
      [](Tape&, const std::vector<Var>& x) { return gather_rows(x[0], {2, 0, 2}); });
  run("min_of", {random_tensor(2, 3, rng), random_tensor(2, 3, rng), random_tensor(2, 3, rng)},
      [](Tape&, const std::vector<Var>& x) { return min_of(x); });
  run("soft_min", {random_tensor(2, 3, rng), random_tensor(2, 3, rng)},
      [](Tape&, const std::vector<Var>& x) { return soft_min(x, 0.5); });
  run("softmax_across", {random_tensor(2, 3, rng), random_tensor(2, 3, rng), random_tensor(2, 3, rng)},
      [](Tape&, const std::vector<Var>& x) { return softmax_across(x); });
  run("nll_logsumexp", {random_tensor(1, 6, rng, -2, 2)},
      [](Tape&, const std::vector<Var>& x) { return nll_logsumexp(x[0], {1, 4, 4}); });
  run("attention", {random_tensor(3, 4, rng), random_tensor(5, 4, rng), random_tensor(5, 2, rng)},
      [](Tape&, const std::vector<Var>& x) { return attention(x[0], x[1], x[2], 2.0); });

  // operators, with their parameters held by a model of the suite's shape
  ModelConfig mc;
  mc.num_entities = V;
  mc.num_relations = cfg.num_relations;
  mc.d = d;
  mc.k = k;
  mc.seed = derive_seed(cfg.seed, "gradcheck-model");
  Model model(mc);
  auto& ps = model.parameters();
  // Parameters outside `prefix` stay constants: the body cannot reach them.
  auto run_model = [&](const std::string& name, const std::string& prefix, std::vector<Tensor> values,
                       std::function<Var(Binder&, const std::vector<Var>&)> body) {
    const std::uint64_t readout_seed = rng();
    std::vector<CheckedTensor> inputs;
    for (std::size_t i = 0; i < values.size(); ++i) inputs.push_back({"input" + std::to_string(i), &values[i]});
    std::vector<const Parameter*> owned;
    for (auto& p : ps) {
      if (prefix.empty() || p.name.rfind(prefix, 0) != 0) continue;
      inputs.push_back({p.name, &p.value});
      owned.push_back(&p);
    }
    const std::size_t n_inputs = values.size();
    results.push_back(check_gradients(
        name, inputs,
        [&](Tape& t, const std::vector<Var>& xs) {
          Binder b(t, nullptr);
          for (std::size_t i = 0; i < owned.size(); ++i) b.bind(*owned[i], xs[n_inputs + i]);
          Rng r(readout_seed);
          return readout(t, body(b, std::vector<Var>(xs.begin(), xs.begin() + n_inputs)), r);
        },
        opt));
  };

  const AnchorLift& lift = model.lift();
  const OperatorParams& ops = model.operators();
  run_model("lift_anchor", "lift.", {random_tensor(1, d, rng), random_tensor(1, d, rng)},
            [&](Binder& b, const std::vector<Var>& x) { return lift_anchor(b, x[0], x[1], lift); });
  run_model("canonicalize", "", {random_tensor(k, w, rng, -2, 2)}, [&](Binder&, const std::vector<Var>& x) {
    CanonicalVars c = canonicalize(x[0]);
    return concat_cols({c.alpha, c.mu, c.sigma});
  });
  run_model("project", "proj.", {random_tensor(k, w, rng), random_tensor(1, d, rng), random_tensor(1, d, rng)},
            [&](Binder& b, const std::vector<Var>& x) { return project(b, x[0], x[1], x[2], ops.projection); });
  run_model("intersect_m2", "inter.", {random_tensor(k, w, rng), random_tensor(k, w, rng)},
            [&](Binder& b, const std::vector<Var>& x) { return intersect(b, x, ops.intersection); });
  run_model("intersect_m3", "inter.", {random_tensor(k, w, rng), random_tensor(k, w, rng), random_tensor(k, w, rng)},
            [&](Binder& b, const std::vector<Var>& x) { return intersect(b, x, ops.intersection); });
  run_model("negate", "neg.", {random_tensor(k, w, rng)},
            [&](Binder& b, const std::vector<Var>& x) { return negate(b, x[0], ops.negation); });

  // distance: query raw embedding against every entity row
  auto distance_case = [&](const std::string& name, Ablation ab) {
    run("distance" + name, {random_tensor(k, w, rng, -2, 2), random_tensor(V, d, rng), random_tensor(V, d, rng)},
        [ab](Tape&, const std::vector<Var>& x) {
          return branch_distances(canonicalize(x[0], ab), x[1], softplus(x[2]), ab);
        });
  };
  distance_case("", {});
  distance_case("_mwd", Ablation{false, false, true});

  // full loss over one sample of every template
  const std::vector<QuerySample> batch = detail::random_template_batch(V, cfg.num_relations, rng);
  GradCheckOptions o = opt;
  o.max_entries = cfg.loss_max_entries;
  results.push_back(check_model_gradients(
      "full_loss", model, [&](const Model& m, GradStore* g) { return batch_loss(m, batch, g); }, o));
  return results;
}

}  // namespace gmmr
