#pragma once

// FOL queries as computation trees, the s-expression query grammar, the
// fourteen benchmark structure templates and the rewrite to disjunctive
// normal form.
//
//   query := term
//   term  := entity | "(p" rel term ")" | "(i" term term+ ")"
//          | "(u" term term+ ")" | "(n" term ")"
//   entity := "e" digits      rel := "r" digits

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gmmr/error.hpp"
#include "gmmr/kg_store.hpp"

namespace gmmr {

enum class QueryKind { anchor, projection, intersection, union_, negation };

class QueryNode;
using Query = std::shared_ptr<const QueryNode>;

/// Immutable query node. Intersection and union children are kept sorted by
/// their serialized form, so structurally equal queries serialize identically.
class QueryNode {
 public:
  QueryKind kind() const { return kind_; }
  EntityId entity() const { return id_; }
  RelationId relation() const { return id_; }
  const std::vector<Query>& children() const { return children_; }
  const Query& child() const { return children_.front(); }

  /// Canonical s-expression.
  const std::string& text() const { return text_; }

  struct Token {};  // restricts construction to the builders below
  QueryNode(Token, QueryKind kind, std::uint32_t id, std::vector<Query> children)
      : kind_(kind), id_(id), children_(std::move(children)) {
    text_ = render();
  }

 private:
  std::string render() const {
    switch (kind_) {
      case QueryKind::anchor: return "e" + std::to_string(id_);
      case QueryKind::projection:
        return "(p r" + std::to_string(id_) + " " + children_[0]->text() + ")";
      case QueryKind::negation: return "(n " + children_[0]->text() + ")";
      case QueryKind::intersection:
      case QueryKind::union_: {
        std::string s = kind_ == QueryKind::intersection ? "(i" : "(u";
        for (const auto& c : children_) s += " " + c->text();
        return s + ")";
      }
    }
    return {};
  }

  QueryKind kind_;
  std::uint32_t id_;
  std::vector<Query> children_;
  std::string text_;
};

inline bool same_query(const Query& a, const Query& b) { return a->text() == b->text(); }

namespace query {

inline Query anchor(EntityId e) {
  return std::make_shared<const QueryNode>(QueryNode::Token{}, QueryKind::anchor, e,
                                           std::vector<Query>{});
}

inline Query projection(RelationId r, Query child) {
  return std::make_shared<const QueryNode>(QueryNode::Token{}, QueryKind::projection, r,
                                           std::vector<Query>{std::move(child)});
}

inline Query negation(Query child) {
  return std::make_shared<const QueryNode>(QueryNode::Token{}, QueryKind::negation, 0,
                                           std::vector<Query>{std::move(child)});
}

namespace detail {
inline Query nary(QueryKind kind, std::vector<Query> children) {
  if (children.size() < 2) {
    throw InputError(std::string(kind == QueryKind::intersection ? "intersection" : "union") +
                     " needs at least two operands");
  }
  std::stable_sort(children.begin(), children.end(),
                   [](const Query& a, const Query& b) { return a->text() < b->text(); });
  return std::make_shared<const QueryNode>(QueryNode::Token{}, kind, 0, std::move(children));
}
}  // namespace detail

inline Query intersection(std::vector<Query> children) {
  return detail::nary(QueryKind::intersection, std::move(children));
}

inline Query union_of(std::vector<Query> children) {
  return detail::nary(QueryKind::union_, std::move(children));
}

}  // namespace query

inline bool is_union_free(const Query& q) {
  if (q->kind() == QueryKind::union_) return false;
  return std::all_of(q->children().begin(), q->children().end(),
                     [](const Query& c) { return is_union_free(c); });
}

inline void collect_ids(const Query& q, std::vector<EntityId>& anchors,
                        std::vector<RelationId>& relations) {
  if (q->kind() == QueryKind::anchor) anchors.push_back(q->entity());
  if (q->kind() == QueryKind::projection) relations.push_back(q->relation());
  for (const auto& c : q->children()) collect_ids(c, anchors, relations);
}

// ---------------------------------------------------------------------------
// Parsing

class ParseError : public InputError {
 public:
  ParseError(std::size_t offset, const std::string& message)
      : InputError("parse error at byte " + std::to_string(offset) + ": " + message),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Optional vocabulary bounds; ids at or beyond them are rejected.
struct VocabularyLimits {
  std::size_t num_entities = 0;
  std::size_t num_relations = 0;
};

namespace detail {

class QueryParser {
 public:
  QueryParser(std::string_view text, std::optional<VocabularyLimits> limits)
      : text_(text), limits_(limits) {}

  Query parse() {
    skip_ws();
    if (pos_ == text_.size()) throw ParseError(pos_, "empty query");
    Query q = term();
    skip_ws();
    if (pos_ != text_.size()) throw ParseError(pos_, "trailing input");
    if (q->kind() == QueryKind::negation) throw ParseError(0, "negation cannot be the query root");
    return q;
  }

 private:
  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  std::uint32_t number(char prefix, const char* what) {
    const std::size_t start = pos_;
    if (pos_ >= text_.size() || text_[pos_] != prefix) {
      throw ParseError(pos_, std::string("expected ") + what);
    }
    ++pos_;
    const std::size_t digits = pos_;
    std::uint64_t value = 0;
    while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      value = value * 10 + static_cast<std::uint64_t>(text_[pos_] - '0');
      if (value > 0xffffffffULL) throw ParseError(start, std::string(what) + " id too large");
      ++pos_;
    }
    if (pos_ == digits) throw ParseError(start, std::string("expected ") + what);
    if (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_])) &&
        text_[pos_] != ')' && text_[pos_] != '(') {
      throw ParseError(pos_, std::string("malformed ") + what + " token");
    }
    if (limits_) {
      const std::size_t bound = prefix == 'e' ? limits_->num_entities : limits_->num_relations;
      if (value >= bound) {
        throw ParseError(start, std::string("unknown ") + what + " " +
                                    std::string(text_.substr(start, pos_ - start)));
      }
    }
    return static_cast<std::uint32_t>(value);
  }

  Query term() {
    skip_ws();
    if (pos_ >= text_.size()) throw ParseError(pos_, "unexpected end of input");
    if (text_[pos_] != '(') return query::anchor(number('e', "entity"));
    const std::size_t open = pos_;
    ++pos_;
    skip_ws();
    if (pos_ >= text_.size()) throw ParseError(pos_, "unexpected end of input");
    const char op = text_[pos_++];
    if (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_])) &&
        text_[pos_] != '(') {
      throw ParseError(pos_ - 1, "unknown operator");
    }
    Query out;
    switch (op) {
      case 'p': {
        skip_ws();
        RelationId r = number('r', "relation");
        out = query::projection(r, term());
        break;
      }
      case 'n': out = query::negation(term()); break;
      case 'i':
      case 'u': {
        std::vector<Query> children;
        skip_ws();
        while (pos_ < text_.size() && text_[pos_] != ')') {
          children.push_back(term());
          skip_ws();
        }
        if (children.size() < 2) {
          throw ParseError(open, std::string(op == 'i' ? "intersection" : "union") +
                                     " needs at least two operands");
        }
        out = op == 'i' ? query::intersection(std::move(children))
                        : query::union_of(std::move(children));
        break;
      }
      default: throw ParseError(pos_ - 1, std::string("unknown operator '") + op + "'");
    }
    skip_ws();
    if (pos_ >= text_.size() || text_[pos_] != ')') throw ParseError(pos_, "expected ')'");
    ++pos_;
    return out;
  }

  std::string_view text_;
  std::optional<VocabularyLimits> limits_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Query parse_query(std::string_view text,
                         std::optional<VocabularyLimits> limits = std::nullopt) {
  return detail::QueryParser(text, limits).parse();
}

// ---------------------------------------------------------------------------
// Disjunctive normal form

/// Rewrites `q` into union-free branches whose union is equivalent to `q`.
/// Projection and intersection distribute over union; negation over union
/// becomes an intersection of negations. Duplicate branches are dropped.
inline std::vector<Query> to_dnf(const Query& q) {
  std::vector<Query> out;
  switch (q->kind()) {
    case QueryKind::anchor: out.push_back(q); break;
    case QueryKind::projection:
      for (auto& b : to_dnf(q->child())) out.push_back(query::projection(q->relation(), b));
      break;
    case QueryKind::union_:
      for (const auto& c : q->children()) {
        auto sub = to_dnf(c);
        out.insert(out.end(), sub.begin(), sub.end());
      }
      break;
    case QueryKind::negation: {
      auto sub = to_dnf(q->child());
      if (sub.size() == 1) {
        out.push_back(query::negation(sub.front()));
      } else {
        std::vector<Query> negs;
        for (auto& b : sub) negs.push_back(query::negation(b));
        out.push_back(query::intersection(std::move(negs)));
      }
      break;
    }
    case QueryKind::intersection: {
      std::vector<std::vector<Query>> options;
      for (const auto& c : q->children()) options.push_back(to_dnf(c));
      std::vector<std::size_t> pick(options.size(), 0);
      while (true) {
        std::vector<Query> chosen;
        for (std::size_t i = 0; i < options.size(); ++i) {
          const Query& c = options[i][pick[i]];
          // negated unions arrive as intersections; splice them in flat
          if (c->kind() == QueryKind::intersection) {
            chosen.insert(chosen.end(), c->children().begin(), c->children().end());
          } else {
            chosen.push_back(c);
          }
        }
        out.push_back(query::intersection(std::move(chosen)));
        std::size_t i = 0;
        while (i < pick.size() && ++pick[i] == options[i].size()) pick[i++] = 0;
        if (i == pick.size()) break;
      }
      break;
    }
  }
  std::vector<Query> unique;
  for (auto& b : out) {
    if (std::none_of(unique.begin(), unique.end(), [&](const Query& u) { return same_query(u, b); })) {
      unique.push_back(std::move(b));
    }
  }
  return unique;
}

// ---------------------------------------------------------------------------
// Structure templates

/// A query skeleton whose anchor ids and relation ids are placeholder slots
/// 0..num_anchors-1 and 0..num_relations-1.
struct StructureTemplate {
  std::string name;
  Query shape;
  std::size_t num_anchors = 0;
  std::size_t num_relations = 0;
};

namespace detail {

inline Query substitute(const Query& q, std::span<const EntityId> anchors,
                        std::span<const RelationId> relations) {
  switch (q->kind()) {
    case QueryKind::anchor: return query::anchor(anchors[q->entity()]);
    case QueryKind::projection:
      return query::projection(relations[q->relation()], substitute(q->child(), anchors, relations));
    case QueryKind::negation: return query::negation(substitute(q->child(), anchors, relations));
    case QueryKind::intersection:
    case QueryKind::union_: {
      std::vector<Query> children;
      for (const auto& c : q->children()) children.push_back(substitute(c, anchors, relations));
      return q->kind() == QueryKind::intersection ? query::intersection(std::move(children))
                                                  : query::union_of(std::move(children));
    }
  }
  return q;
}

inline std::vector<StructureTemplate> build_templates() {
  using namespace query;
  auto a = [](EntityId i) { return anchor(i); };
  auto p = [](RelationId r, Query c) { return projection(r, std::move(c)); };
  auto i = [](std::vector<Query> c) { return intersection(std::move(c)); };
  auto u = [](std::vector<Query> c) { return union_of(std::move(c)); };
  auto n = [](Query c) { return negation(std::move(c)); };
  return {
      {"1p", p(0, a(0)), 1, 1},
      {"2p", p(1, p(0, a(0))), 1, 2},
      {"3p", p(2, p(1, p(0, a(0)))), 1, 3},
      {"2i", i({p(0, a(0)), p(1, a(1))}), 2, 2},
      {"3i", i({p(0, a(0)), p(1, a(1)), p(2, a(2))}), 3, 3},
      {"ip", p(2, i({p(0, a(0)), p(1, a(1))})), 2, 3},
      {"pi", i({p(1, p(0, a(0))), p(2, a(1))}), 2, 3},
      {"2u", u({p(0, a(0)), p(1, a(1))}), 2, 2},
      {"up", p(2, u({p(0, a(0)), p(1, a(1))})), 2, 3},
      {"2in", i({p(0, a(0)), n(p(1, a(1)))}), 2, 2},
      {"3in", i({p(0, a(0)), p(1, a(1)), n(p(2, a(2)))}), 3, 3},
      {"inp", p(2, i({p(0, a(0)), n(p(1, a(1)))})), 2, 3},
      {"pin", i({p(1, p(0, a(0))), n(p(2, a(1)))}), 2, 3},
      {"pni", i({n(p(1, p(0, a(0)))), p(2, a(1))}), 2, 3},
  };
}

}  // namespace detail

inline const std::vector<StructureTemplate>& all_templates() {
  static const std::vector<StructureTemplate> templates = detail::build_templates();
  return templates;
}

inline const std::array<std::string_view, 9> kEpfoStructures = {"1p", "2p", "3p", "2i", "3i",
                                                                 "ip", "pi", "2u", "up"};
inline const std::array<std::string_view, 5> kNegationStructures = {"2in", "3in", "inp", "pin",
                                                                    "pni"};

inline const StructureTemplate& find_template(std::string_view name) {
  for (const auto& t : all_templates()) {
    if (t.name == name) return t;
  }
  throw InputError("unknown template: " + std::string(name));
}

inline Query instantiate_template(const StructureTemplate& t, std::span<const EntityId> anchors,
                                  std::span<const RelationId> relations) {
  if (anchors.size() != t.num_anchors || relations.size() != t.num_relations) {
    throw InputError("template " + t.name + " needs " + std::to_string(t.num_anchors) +
                     " anchors and " + std::to_string(t.num_relations) + " relations");
  }
  return detail::substitute(t.shape, anchors, relations);
}

}  // namespace gmmr
