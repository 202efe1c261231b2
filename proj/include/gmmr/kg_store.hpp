#pragma once

// Knowledge graph storage: vocabularies, deduplicated triple sets, a
// (head, relation) -> tails index, edge hiding and nested split creation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "gmmr/error.hpp"
#include "gmmr/rng.hpp"

namespace gmmr {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

/// Bijective label <-> dense id mapping.
class Vocabulary {
 public:
  Vocabulary() = default;

  /// Vocabulary of synthetic labels `<prefix>0 .. <prefix>(n-1)`.
  static Vocabulary numbered(std::size_t n, std::string_view prefix) {
    Vocabulary v;
    for (std::size_t i = 0; i < n; ++i) v.add(std::string(prefix) + std::to_string(i));
    return v;
  }

  std::uint32_t add(const std::string& label) {
    auto [it, inserted] = index_.try_emplace(label, static_cast<std::uint32_t>(labels_.size()));
    if (inserted) labels_.push_back(label);
    return it->second;
  }

  std::optional<std::uint32_t> find(const std::string& label) const {
    auto it = index_.find(label);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& label(std::uint32_t id) const { return labels_.at(id); }
  std::size_t size() const { return labels_.size(); }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

enum class GraphLevel { training, validation, test };

inline std::string_view to_string(GraphLevel level) {
  switch (level) {
    case GraphLevel::training: return "training";
    case GraphLevel::validation: return "validation";
    case GraphLevel::test: return "test";
  }
  return "unknown";
}

/// Immutable triple set with a forward adjacency index. Triples are kept
/// sorted by (head, relation, tail), so the tails of one (head, relation)
/// key are a contiguous sorted run.
class Graph {
 public:
  Graph() : Graph(std::make_shared<Vocabulary>(), std::make_shared<Vocabulary>(), {}) {}

  Graph(std::shared_ptr<const Vocabulary> entities, std::shared_ptr<const Vocabulary> relations,
        std::vector<Triple> triples, GraphLevel level = GraphLevel::test)
      : entities_(std::move(entities)), relations_(std::move(relations)), level_(level) {
    for (const Triple& t : triples) {
      if (t.head >= entities_->size() || t.tail >= entities_->size() ||
          t.relation >= relations_->size()) {
        throw InputError("triple references an id outside the vocabulary");
      }
    }
    std::sort(triples.begin(), triples.end());
    triples.erase(std::unique(triples.begin(), triples.end()), triples.end());
    triples_ = std::move(triples);
    tails_.reserve(triples_.size());
    for (std::size_t i = 0; i < triples_.size(); ++i) {
      const Triple& t = triples_[i];
      tails_.push_back(t.tail);
      auto [it, inserted] = index_.try_emplace(key(t.head, t.relation), Run{i, 0});
      it->second.length++;
    }
  }

  /// Graph over numbered vocabularies (`e<i>`, `r<j>`); used by tests and the
  /// synthetic generator.
  static Graph from_ids(std::size_t num_entities, std::size_t num_relations,
                        std::vector<Triple> triples, GraphLevel level = GraphLevel::test) {
    return Graph(std::make_shared<Vocabulary>(Vocabulary::numbered(num_entities, "e")),
                 std::make_shared<Vocabulary>(Vocabulary::numbered(num_relations, "r")),
                 std::move(triples), level);
  }

  std::size_t num_entities() const { return entities_->size(); }
  std::size_t num_relations() const { return relations_->size(); }
  std::size_t num_triples() const { return triples_.size(); }
  GraphLevel level() const { return level_; }

  const Vocabulary& entities() const { return *entities_; }
  const Vocabulary& relations() const { return *relations_; }
  const std::shared_ptr<const Vocabulary>& entity_vocab() const { return entities_; }
  const std::shared_ptr<const Vocabulary>& relation_vocab() const { return relations_; }

  std::span<const Triple> triples() const { return triples_; }

  /// Sorted tails t with (head, relation, t) in the graph.
  std::span<const EntityId> neighbors(EntityId head, RelationId relation) const {
    if (head >= num_entities()) throw InputError("entity id out of range: " + std::to_string(head));
    if (relation >= num_relations()) {
      throw InputError("relation id out of range: " + std::to_string(relation));
    }
    auto it = index_.find(key(head, relation));
    if (it == index_.end()) return {};
    return std::span<const EntityId>(tails_).subspan(it->second.offset, it->second.length);
  }

  bool contains(const Triple& t) const {
    return std::binary_search(triples_.begin(), triples_.end(), t);
  }

  Graph with_level(GraphLevel level) const {
    Graph g = *this;
    g.level_ = level;
    return g;
  }

 private:
  struct Run {
    std::size_t offset;
    std::size_t length;
  };

  static std::uint64_t key(EntityId head, RelationId relation) {
    return (static_cast<std::uint64_t>(head) << 32) | relation;
  }

  std::shared_ptr<const Vocabulary> entities_;
  std::shared_ptr<const Vocabulary> relations_;
  std::vector<Triple> triples_;
  std::vector<EntityId> tails_;
  std::unordered_map<std::uint64_t, Run> index_;
  GraphLevel level_ = GraphLevel::test;
};

struct VocabularyPair {
  std::shared_ptr<const Vocabulary> entities;
  std::shared_ptr<const Vocabulary> relations;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// Reads `head<TAB>relation<TAB>tail` lines. With `fixed`, labels must already
/// exist in the given vocabularies; otherwise ids are assigned by first appearance.
inline Graph load_triples(const std::filesystem::path& path,
                          const std::optional<VocabularyPair>& fixed = std::nullopt,
                          GraphLevel level = GraphLevel::test) {
  std::ifstream in(path);
  if (!in) throw InputError("triples file not found: " + path.string());

  auto entities = std::make_shared<Vocabulary>();
  auto relations = std::make_shared<Vocabulary>();

  auto resolve = [&](Vocabulary& grow, const std::shared_ptr<const Vocabulary>& frozen,
                     std::string_view token, std::size_t line_no, const char* what) -> std::uint32_t {
    std::string label(token);
    if (fixed) {
      auto id = frozen->find(label);
      if (!id) {
        throw InputError(path.string() + ":" + std::to_string(line_no) + ": unknown " + what +
                         " label '" + label + "'");
      }
      return *id;
    }
    return grow.add(label);
  };
  const std::shared_ptr<const Vocabulary> no_vocab;

  std::vector<Triple> triples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_tabs(line);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty()) {
      throw InputError(path.string() + ":" + std::to_string(line_no) +
                       ": expected three tab-separated tokens");
    }
    Triple t;
    t.head = resolve(*entities, fixed ? fixed->entities : no_vocab, fields[0], line_no, "entity");
    t.relation =
        resolve(*relations, fixed ? fixed->relations : no_vocab, fields[1], line_no, "relation");
    t.tail = resolve(*entities, fixed ? fixed->entities : no_vocab, fields[2], line_no, "entity");
    triples.push_back(t);
  }
  if (fixed) {
    // Keep the caller's vocabulary objects so graphs of one split share them.
    return Graph(fixed->entities, fixed->relations, std::move(triples), level);
  }
  return Graph(std::move(entities), std::move(relations), std::move(triples), level);
}

inline void save_triples(const Graph& g, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const Triple& t : g.triples()) {
    out << g.entities().label(t.head) << '\t' << g.relations().label(t.relation) << '\t'
        << g.entities().label(t.tail) << '\n';
  }
}

/// Removes floor(fraction * |triples|) uniformly chosen triples.
inline Graph hide_edges(const Graph& g, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw InputError("hidden fraction must lie in [0, 1]");
  }
  std::vector<Triple> triples(g.triples().begin(), g.triples().end());
  const auto remove = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(triples.size())));
  Rng rng(seed);
  shuffle(triples, rng);
  triples.erase(triples.begin(), triples.begin() + static_cast<std::ptrdiff_t>(remove));
  return Graph(g.entity_vocab(), g.relation_vocab(), std::move(triples), GraphLevel::training);
}

/// True iff train ⊆ valid ⊆ test as triple sets.
inline bool verify_containment(const Graph& train, const Graph& valid, const Graph& test) {
  auto subset = [](const Graph& a, const Graph& b) {
    return std::includes(b.triples().begin(), b.triples().end(), a.triples().begin(),
                         a.triples().end());
  };
  return subset(train, valid) && subset(valid, test);
}

struct SplitGraphs {
  Graph train;
  Graph valid;
  Graph test;
};

/// Shuffles the edges with `seed` and cuts them 80/10/10. The training graph
/// additionally loses `hidden_fraction` of its edges; the validation graph is
/// the full training edge set plus validation edges; the test graph is `g`.
inline SplitGraphs make_splits(const Graph& g, std::uint64_t seed, double hidden_fraction) {
  if (!(hidden_fraction >= 0.0 && hidden_fraction <= 1.0)) {
    throw InputError("hidden fraction must lie in [0, 1]");
  }
  std::vector<Triple> edges(g.triples().begin(), g.triples().end());
  Rng rng(seed);
  shuffle(edges, rng);
  const std::size_t n = edges.size();
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_valid = n / 10;
  std::vector<Triple> train_edges(edges.begin(), edges.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<Triple> valid_edges(edges.begin(),
                                  edges.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  Graph train_full(g.entity_vocab(), g.relation_vocab(), std::move(train_edges), GraphLevel::training);
  Graph valid(g.entity_vocab(), g.relation_vocab(), std::move(valid_edges), GraphLevel::validation);
  Graph train = hide_edges(train_full, hidden_fraction, derive_seed(seed, "hide"));
  return {std::move(train), std::move(valid), g.with_level(GraphLevel::test)};
}

/// On-disk description of a split: file names are relative to the manifest.
struct SplitManifest {
  std::string train;
  std::string valid;
  std::string test;
  std::uint64_t seed = 0;
  double hidden_fraction = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["train"] = train;
    j["valid"] = valid;
    j["test"] = test;
    j["seed"] = seed;
    j["hidden_fraction"] = hidden_fraction;
    return j;
  }

  static SplitManifest from_json(const nlohmann::json& j) {
    SplitManifest m;
    try {
      m.train = j.at("train").get<std::string>();
      m.valid = j.at("valid").get<std::string>();
      m.test = j.at("test").get<std::string>();
      m.seed = j.at("seed").get<std::uint64_t>();
      m.hidden_fraction = j.at("hidden_fraction").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("malformed split manifest: ") + e.what());
    }
    return m;
  }
};

/// Writes the three graphs plus `manifest.json` into `dir`.
inline SplitManifest write_splits(const SplitGraphs& splits, const std::filesystem::path& dir,
                                  std::uint64_t seed, double hidden_fraction) {
  std::filesystem::create_directories(dir);
  SplitManifest m{"train.txt", "valid.txt", "test.txt", seed, hidden_fraction};
  save_triples(splits.test, dir / m.test);
  save_triples(splits.valid, dir / m.valid);
  save_triples(splits.train, dir / m.train);
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << m.to_json().dump(2) << '\n';
  return m;
}

/// Loads a split manifest. Vocabularies come from the test graph (ids by first
/// appearance in its file), so every command that loads the same manifest sees
/// the same ids.
inline SplitGraphs load_splits(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw InputError("split manifest not found: " + manifest_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed split manifest: ") + e.what());
  }
  SplitManifest m = SplitManifest::from_json(j);
  auto base = manifest_path.parent_path();
  Graph test = load_triples(base / m.test, std::nullopt, GraphLevel::test);
  VocabularyPair vocab{test.entity_vocab(), test.relation_vocab()};
  Graph valid = load_triples(base / m.valid, vocab, GraphLevel::validation);
  Graph train = load_triples(base / m.train, vocab, GraphLevel::training);
  return {std::move(train), std::move(valid), std::move(test)};
}

}  // namespace gmmr
