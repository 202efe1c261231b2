#pragma once

// Synthetic knowledge graphs with planted multi-modal relation structure.
// Entities are split into equal clusters; every (relation, head cluster)
// pair maps to a fixed set of disjoint tail clusters, so one-hop answer sets
// are unions of well separated groups.

#include <cstdint>
#include <vector>

#include "gmmr/error.hpp"
#include "gmmr/kg_store.hpp"
#include "gmmr/rng.hpp"

namespace gmmr {

struct PlantedKgConfig {
  std::size_t num_entities = 64;
  std::size_t num_relations = 4;
  std::size_t num_clusters = 8;
  std::size_t tail_clusters = 2;   // disjoint target clusters per (relation, head cluster)
  double edge_probability = 0.5;   // chance of each head -> candidate tail edge
  std::uint64_t seed = 7;
};

struct PlantedKg {
  Graph graph;
  std::vector<std::size_t> cluster_of;  // entity -> cluster
  // targets[r][c] = tail clusters of relation r from head cluster c
  std::vector<std::vector<std::vector<std::size_t>>> targets;
};

inline PlantedKg make_planted_kg(const PlantedKgConfig& cfg) {
  if (cfg.num_clusters == 0 || cfg.num_entities < cfg.num_clusters) {
    throw InputError("planted KG needs at least one entity per cluster");
  }
  if (cfg.tail_clusters == 0 || cfg.tail_clusters > cfg.num_clusters) {
    throw InputError("tail cluster count must lie in [1, num_clusters]");
  }
  Rng rng(cfg.seed);
  PlantedKg kg;
  kg.cluster_of.resize(cfg.num_entities);
  std::vector<std::vector<EntityId>> members(cfg.num_clusters);
  for (std::size_t e = 0; e < cfg.num_entities; ++e) {
    kg.cluster_of[e] = e * cfg.num_clusters / cfg.num_entities;
    members[kg.cluster_of[e]].push_back(static_cast<EntityId>(e));
  }
  kg.targets.assign(cfg.num_relations, std::vector<std::vector<std::size_t>>(cfg.num_clusters));
  std::vector<Triple> triples;
  for (std::size_t r = 0; r < cfg.num_relations; ++r) {
    for (std::size_t c = 0; c < cfg.num_clusters; ++c) {
      std::vector<std::size_t> order(cfg.num_clusters);
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      shuffle(order, rng);
      order.resize(cfg.tail_clusters);
      kg.targets[r][c] = order;
      for (EntityId h : members[c]) {
        for (std::size_t tc : order) {
          for (EntityId t : members[tc]) {
            if (uniform_unit(rng) < cfg.edge_probability) {
              triples.push_back({h, static_cast<RelationId>(r), t});
            }
          }
        }
      }
    }
  }
  kg.graph = Graph::from_ids(cfg.num_entities, cfg.num_relations, std::move(triples));
  return kg;
}

}  // namespace gmmr
