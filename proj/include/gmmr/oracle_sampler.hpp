#pragma once

// Exact symbolic query answering and the query-answer dataset pipeline.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "gmmr/error.hpp"
#include "gmmr/kg_store.hpp"
#include "gmmr/query_dag.hpp"
#include "gmmr/rng.hpp"

namespace gmmr {

/// Sorted, duplicate-free entity ids.
using EntitySet = std::vector<EntityId>;

namespace detail {

using Membership = std::vector<char>;

inline Membership answer_mask(const QueryNode& q, const Graph& g) {
  const std::size_t n = g.num_entities();
  switch (q.kind()) {
    case QueryKind::anchor: {
      Membership m(n, 0);
      m.at(q.entity()) = 1;
      return m;
    }
    case QueryKind::projection: {
      Membership in = answer_mask(*q.child(), g);
      Membership out(n, 0);
      for (std::size_t e = 0; e < n; ++e) {
        if (!in[e]) continue;
        for (EntityId t : g.neighbors(static_cast<EntityId>(e), q.relation())) out[t] = 1;
      }
      return out;
    }
    case QueryKind::intersection: {
      Membership acc = answer_mask(*q.children()[0], g);
      for (std::size_t i = 1; i < q.children().size(); ++i) {
        Membership m = answer_mask(*q.children()[i], g);
        for (std::size_t e = 0; e < n; ++e) acc[e] = static_cast<char>(acc[e] && m[e]);
      }
      return acc;
    }
    case QueryKind::union_: {
      Membership acc(n, 0);
      for (const auto& c : q.children()) {
        Membership m = answer_mask(*c, g);
        for (std::size_t e = 0; e < n; ++e) acc[e] = static_cast<char>(acc[e] || m[e]);
      }
      return acc;
    }
    case QueryKind::negation: {
      Membership m = answer_mask(*q.child(), g);
      for (auto& x : m) x = static_cast<char>(!x);
      return m;
    }
  }
  return {};
}

}  // namespace detail

/// Exact answer set by post-order evaluation. Negation complements with
/// respect to every entity of the graph's vocabulary.
inline EntitySet answer(const Query& q, const Graph& g) {
  auto mask = detail::answer_mask(*q, g);
  EntitySet out;
  for (std::size_t e = 0; e < mask.size(); ++e) {
    if (mask[e]) out.push_back(static_cast<EntityId>(e));
  }
  return out;
}

inline bool is_subset(const EntitySet& a, const EntitySet& b) {
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

inline EntitySet set_difference(const EntitySet& a, const EntitySet& b) {
  EntitySet out;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

struct GroundedQuery {
  Query dag;
  std::string structure;
};

struct QuerySample {
  GroundedQuery query;
  EntitySet easy_answers;
  EntitySet hard_answers;
};

inline constexpr std::size_t kDefaultRetryBudget = 128;

/// Grounds templates top-down: the target node gets an entity with at least
/// one incoming edge, each projection picks one incoming edge of its target
/// uniformly, and negated branches start from a uniformly drawn target.
class QuerySampler {
 public:
  explicit QuerySampler(const Graph& g) : graph_(g), incoming_(g.num_entities()) {
    for (const Triple& t : g.triples()) incoming_[t.tail].push_back({t.relation, t.head});
    for (std::size_t e = 0; e < incoming_.size(); ++e) {
      if (!incoming_[e].empty()) reachable_.push_back(static_cast<EntityId>(e));
    }
  }

  const Graph& graph() const { return graph_; }

  /// One grounding attempt; nullopt when the walk hits a dead end or the
  /// result is degenerate (duplicate operands, target not an answer).
  std::optional<GroundedQuery> try_sample(const StructureTemplate& t, Rng& rng) const {
    if (reachable_.empty()) return std::nullopt;
    const EntityId target = reachable_[uniform_index(rng, reachable_.size())];
    auto q = assign(t.shape, target, rng);
    if (!q) return std::nullopt;
    auto ans = answer(*q, graph_);
    if (!std::binary_search(ans.begin(), ans.end(), target)) return std::nullopt;
    return GroundedQuery{*q, t.name};
  }

  /// Retries up to `budget` times; nullopt is the rejection value.
  std::optional<GroundedQuery> sample(const StructureTemplate& t, Rng& rng,
                                      std::size_t budget = kDefaultRetryBudget) const {
    for (std::size_t i = 0; i < budget; ++i) {
      if (auto q = try_sample(t, rng)) return q;
    }
    return std::nullopt;
  }

 private:
  struct InEdge {
    RelationId relation;
    EntityId head;
  };

  std::optional<Query> assign(const Query& node, EntityId target, Rng& rng) const {
    switch (node->kind()) {
      case QueryKind::anchor: return query::anchor(target);
      case QueryKind::projection: {
        const auto& in = incoming_[target];
        if (in.empty()) return std::nullopt;
        const InEdge edge = in[uniform_index(rng, in.size())];
        auto child = assign(node->child(), edge.head, rng);
        if (!child) return std::nullopt;
        return query::projection(edge.relation, *child);
      }
      case QueryKind::negation: {
        const EntityId other = reachable_[uniform_index(rng, reachable_.size())];
        auto child = assign(node->child(), other, rng);
        if (!child) return std::nullopt;
        return query::negation(*child);
      }
      case QueryKind::intersection:
      case QueryKind::union_: {
        std::vector<Query> children;
        for (const auto& c : node->children()) {
          auto sub = assign(c, target, rng);
          if (!sub) return std::nullopt;
          for (const auto& prev : children) {
            if (same_query(prev, *sub)) return std::nullopt;
          }
          children.push_back(*sub);
        }
        return node->kind() == QueryKind::intersection ? query::intersection(std::move(children))
                                                       : query::union_of(std::move(children));
      }
    }
    return std::nullopt;
  }

  const Graph& graph_;
  std::vector<std::vector<InEdge>> incoming_;
  std::vector<EntityId> reachable_;
};

/// Single-call convenience over QuerySampler.
inline std::optional<GroundedQuery> sample_query(const StructureTemplate& t, const Graph& g, Rng& rng,
                                                 std::size_t budget = kDefaultRetryBudget) {
  return QuerySampler(g).sample(t, rng, budget);
}

// ---------------------------------------------------------------------------
// Dataset generation

enum class Split { train, valid, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

struct TemplateCount {
  std::string name;
  std::size_t count = 0;
};

struct GenerationStats {
  std::string structure;
  Split split = Split::train;
  std::size_t emitted = 0;
  std::size_t attempts = 0;
  std::size_t rejections = 0;
};

struct Dataset {
  std::vector<QuerySample> train;
  std::vector<QuerySample> valid;
  std::vector<QuerySample> test;
  std::vector<GenerationStats> stats;
  std::uint64_t seed = 0;
  std::size_t retry_budget = kDefaultRetryBudget;
  std::vector<TemplateCount> counts;
  std::size_t num_entities = 0;
  std::size_t num_relations = 0;

  std::vector<QuerySample>& split(Split s) {
    return s == Split::train ? train : s == Split::valid ? valid : test;
  }
  const std::vector<QuerySample>& split(Split s) const {
    return s == Split::train ? train : s == Split::valid ? valid : test;
  }
};

/// Raised when some template cannot reach its requested count.
class GenerationError : public Error {
 public:
  using Error::Error;
};

namespace detail {

struct SplitWork {
  std::vector<QuerySample> samples;
  GenerationStats stats;
  std::string failure;
};

/// Samples `count` distinct queries of one template for one split. Training
/// samples are answered on the training graph only; validation and test
/// samples keep easy = answers on the smaller graph and hard = the extra
/// answers of the larger graph, and are redrawn when hard is empty or the
/// smaller answer set is not contained in the larger one.
inline SplitWork generate_one(const StructureTemplate& t, Split split, std::size_t count,
                              const SplitGraphs& graphs, std::uint64_t seed, std::size_t budget) {
  SplitWork work;
  work.stats.structure = t.name;
  work.stats.split = split;
  const Graph& small = split == Split::test ? graphs.valid : graphs.train;
  const Graph& large = split == Split::train   ? graphs.train
                       : split == Split::valid ? graphs.valid
                                               : graphs.test;
  QuerySampler sampler(large);
  Rng rng(derive_seed(seed, t.name + "/" + std::string(to_string(split))));
  std::set<std::string> seen;
  while (work.samples.size() < count) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < budget && !placed; ++attempt) {
      ++work.stats.attempts;
      auto q = sampler.try_sample(t, rng);
      if (!q || seen.count(q->dag->text())) {
        ++work.stats.rejections;
        continue;
      }
      QuerySample s;
      s.query = *q;
      if (split == Split::train) {
        s.easy_answers = answer(q->dag, large);
      } else {
        EntitySet easy = answer(q->dag, small);
        EntitySet full = answer(q->dag, large);
        if (!is_subset(easy, full)) {
          ++work.stats.rejections;
          continue;
        }
        s.hard_answers = set_difference(full, easy);
        s.easy_answers = std::move(easy);
        if (s.hard_answers.empty()) {
          ++work.stats.rejections;
          continue;
        }
      }
      seen.insert(q->dag->text());
      work.samples.push_back(std::move(s));
      placed = true;
    }
    if (!placed) {
      work.failure = t.name + " (" + std::string(to_string(split)) + "): exhausted " +
                     std::to_string(budget) + " attempts after " +
                     std::to_string(work.samples.size()) + " samples";
      break;
    }
  }
  work.stats.emitted = work.samples.size();
  return work;
}

}  // namespace detail

/// Generates train/valid/test samples for each template. Each (template,
/// split) pair draws from its own stream seeded from (seed, name, split), so
/// the output does not depend on `threads`.
inline Dataset generate_dataset(const std::vector<TemplateCount>& counts, const SplitGraphs& graphs,
                                std::uint64_t seed, std::size_t retry_budget = kDefaultRetryBudget,
                                std::size_t threads = 1) {
  if (!verify_containment(graphs.train, graphs.valid, graphs.test)) {
    throw InputError("split graphs violate train ⊆ valid ⊆ test");
  }
  struct Job {
    const StructureTemplate* t;
    Split split;
    std::size_t count;
  };
  std::vector<Job> jobs;
  for (const auto& c : counts) {
    const StructureTemplate& t = find_template(c.name);
    for (Split s : {Split::train, Split::valid, Split::test}) jobs.push_back({&t, s, c.count});
  }
  std::vector<detail::SplitWork> results(jobs.size());
  auto run = [&](std::size_t i) {
    results[i] = detail::generate_one(*jobs[i].t, jobs[i].split, jobs[i].count, graphs, seed,
                                      retry_budget);
  };
  threads = std::max<std::size_t>(1, threads);
  if (threads == 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  Dataset ds;
  ds.seed = seed;
  ds.retry_budget = retry_budget;
  ds.counts = counts;
  ds.num_entities = graphs.test.num_entities();
  ds.num_relations = graphs.test.num_relations();
  std::string failures;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    auto& r = results[i];
    if (!r.failure.empty()) failures += (failures.empty() ? "" : "; ") + r.failure;
    auto& dst = ds.split(jobs[i].split);
    std::move(r.samples.begin(), r.samples.end(), std::back_inserter(dst));
    ds.stats.push_back(r.stats);
  }
  if (!failures.empty()) throw GenerationError("insufficient satisfiable instances: " + failures);
  return ds;
}

// ---------------------------------------------------------------------------
// JSON Lines I/O

inline std::string sample_to_json_line(const QuerySample& s) {
  nlohmann::ordered_json j;
  j["structure"] = s.query.structure;
  j["query"] = s.query.dag->text();
  j["easy_answers"] = s.easy_answers;
  j["hard_answers"] = s.hard_answers;
  return j.dump();
}

inline QuerySample sample_from_json(const nlohmann::json& j,
                                    std::optional<VocabularyLimits> limits = std::nullopt) {
  QuerySample s;
  s.query.structure = j.at("structure").get<std::string>();
  s.query.dag = parse_query(j.at("query").get<std::string>(), limits);
  s.easy_answers = j.at("easy_answers").get<EntitySet>();
  s.hard_answers = j.at("hard_answers").get<EntitySet>();
  std::sort(s.easy_answers.begin(), s.easy_answers.end());
  std::sort(s.hard_answers.begin(), s.hard_answers.end());
  return s;
}

inline void write_samples(const std::vector<QuerySample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& s : samples) out << sample_to_json_line(s) << '\n';
}

inline std::vector<QuerySample> read_samples(const std::filesystem::path& path,
                                             std::optional<VocabularyLimits> limits = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw InputError("dataset file not found: " + path.string());
  std::vector<QuerySample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line), limits));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::ordered_json generation_manifest(const Dataset& ds) {
  nlohmann::ordered_json j;
  j["seed"] = ds.seed;
  j["retry_budget"] = ds.retry_budget;
  j["num_entities"] = ds.num_entities;
  j["num_relations"] = ds.num_relations;
  nlohmann::ordered_json counts = nlohmann::ordered_json::object();
  for (const auto& c : ds.counts) counts[c.name] = c.count;
  j["counts"] = counts;
  nlohmann::ordered_json stats = nlohmann::ordered_json::array();
  for (const auto& s : ds.stats) {
    nlohmann::ordered_json e;
    e["structure"] = s.structure;
    e["split"] = std::string(to_string(s.split));
    e["emitted"] = s.emitted;
    e["attempts"] = s.attempts;
    e["rejections"] = s.rejections;
    stats.push_back(e);
  }
  j["rejection_stats"] = stats;
  return j;
}

/// Writes train/valid/test JSON Lines files and `generation.json` into `dir`.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_samples(ds.train, dir / "train.jsonl");
  write_samples(ds.valid, dir / "valid.jsonl");
  write_samples(ds.test, dir / "test.jsonl");
  std::ofstream out(dir / "generation.json", std::ios::binary);
  out << generation_manifest(ds).dump(2) << '\n';
}

struct DatasetInfo {
  std::size_t num_entities = 0;
  std::size_t num_relations = 0;
};

inline DatasetInfo read_dataset_info(const std::filesystem::path& dir) {
  std::ifstream in(dir / "generation.json");
  if (!in) throw InputError("dataset manifest not found: " + (dir / "generation.json").string());
  try {
    const auto j = nlohmann::json::parse(in);
    return {j.at("num_entities").get<std::size_t>(), j.at("num_relations").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed dataset manifest: " + std::string(e.what()));
  }
}

inline std::vector<QuerySample> read_split(const std::filesystem::path& dir, Split split,
                                           std::optional<VocabularyLimits> limits = std::nullopt) {
  return read_samples(dir / (std::string(to_string(split)) + ".jsonl"), limits);
}

}  // namespace gmmr
