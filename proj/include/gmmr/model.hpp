#pragma once

// The full query-embedding model: parameter tables, anchor lift, operators,
// and distance scoring of every entity against a (possibly union) query.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmmr/checkpoint.hpp"
#include "gmmr/distance.hpp"
#include "gmmr/embeddings.hpp"
#include "gmmr/operators.hpp"
#include "gmmr/query_dag.hpp"
#include "gmmr/rng.hpp"

namespace gmmr {

struct ModelConfig {
  std::size_t num_entities = 0;
  std::size_t num_relations = 0;
  std::size_t d = 32;
  std::size_t k = 3;
  std::uint64_t seed = 0;
  Ablation ablation;
  UnionAggregation union_aggregation;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["num_entities"] = num_entities;
    j["num_relations"] = num_relations;
    j["d"] = d;
    j["k"] = k;
    j["seed"] = seed;
    j["no_cardinality"] = ablation.no_cardinality;
    j["no_dispersion"] = ablation.no_dispersion;
    j["mwd_distance"] = ablation.mwd_distance;
    j["soft_union"] = union_aggregation.soft;
    j["soft_union_temperature"] = union_aggregation.temperature;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_entities = j.at("num_entities").get<std::size_t>();
    c.num_relations = j.at("num_relations").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.k = j.at("k").get<std::size_t>();
    c.seed = j.value("seed", std::uint64_t{0});
    c.ablation.no_cardinality = j.value("no_cardinality", false);
    c.ablation.no_dispersion = j.value("no_dispersion", false);
    c.ablation.mwd_distance = j.value("mwd_distance", false);
    c.union_aggregation.soft = j.value("soft_union", false);
    c.union_aggregation.temperature = j.value("soft_union_temperature", 0.1);
    return c;
  }
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg), params_(std::make_unique<ParameterSet>()) {
    if (cfg.d == 0 || cfg.k == 0 || cfg.num_entities == 0 || cfg.num_relations == 0) {
      throw InputError("model needs positive d, k, entity count and relation count");
    }
    tables_ = EmbeddingTables::create(*params_, cfg.num_entities, cfg.num_relations, cfg.d);
    lift_ = AnchorLift::create(*params_, cfg.k, cfg.d);
    ops_ = OperatorParams::create(*params_, cfg.k, cfg.d);
    Rng rng(derive_seed(cfg.seed, "init"));
    tables_.init(rng);
    lift_.init(rng);
    ops_.init(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const Ablation& ablation() const { return cfg_.ablation; }
  void set_ablation(const Ablation& ab) { cfg_.ablation = ab; }
  std::size_t num_entities() const { return cfg_.num_entities; }

  ParameterSet& parameters() { return *params_; }
  const ParameterSet& parameters() const { return *params_; }
  const EmbeddingTables& tables() const { return tables_; }
  const AnchorLift& lift() const { return lift_; }
  const OperatorParams& operators() const { return ops_; }

  /// Raw embedding of a union-free branch.
  Var embed_branch(Binder& b, const Query& branch) const {
    return gmmr::embed_branch(b, branch, tables_, lift_, ops_);
  }

  /// Canonical entity views, V x d each.
  std::pair<Var, Var> entity_views(Binder& b) const {
    Var mu = b(*tables_.entity_mu);
    Var sigma = cfg_.ablation.no_dispersion
                    ? b.constant(Tensor(cfg_.num_entities, cfg_.d, 1.0))
                    : softplus(b(*tables_.entity_sigma_raw));
    return {mu, sigma};
  }

  /// Distance from every entity to `q`; 1 x V.
  Var query_distances(Binder& b, const Query& q) const {
    auto [mu, sigma] = entity_views(b);
    std::vector<Var> per_branch;
    for (const Query& branch : to_dnf(q)) {
      per_branch.push_back(branch_distances(canonicalize(embed_branch(b, branch), cfg_.ablation), mu, sigma,
                                            cfg_.ablation));
    }
    return aggregate_branches(per_branch, cfg_.union_aggregation);
  }

  std::vector<double> distances(const Query& q) const {
    Tape tape(false);
    Binder b(tape, nullptr);
    const Tensor& v = query_distances(b, q).value();
    return {v.values().begin(), v.values().end()};
  }

  GmmEmbedding embed(const Query& branch) const {
    Tape tape(false);
    Binder b(tape, nullptr);
    return {embed_branch(b, branch).value()};
  }

  GaussianEmbedding entity(EntityId e) const { return tables_.entity(e); }

  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& p : *params_) out.push_back({p.name, &p.value});
    return out;
  }

  void save(const std::filesystem::path& path, nlohmann::json extra = nlohmann::json::object()) const {
    extra["model"] = cfg_.to_json();
    write_checkpoint(path, named_tensors(), extra);
  }

  /// Copies tensors by name; every parameter must be present with its shape.
  void load_tensors(const Checkpoint& ck) {
    for (auto& p : *params_) {
      const Tensor& t = ck.at(p.name);
      if (!t.same_shape(p.value)) {
        throw InputError("checkpoint tensor " + p.name + " has shape " + t.shape_string() + ", expected " +
                         p.value.shape_string());
      }
      p.value = t;
    }
  }

  static Model load(const std::filesystem::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    if (!ck.meta.contains("model")) throw InputError("checkpoint lacks model configuration");
    Model m(ModelConfig::from_json(ck.meta.at("model")));
    m.load_tensors(ck);
    return m;
  }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParameterSet> params_;
  EmbeddingTables tables_;
  AnchorLift lift_;
  OperatorParams ops_;
};

}  // namespace gmmr
