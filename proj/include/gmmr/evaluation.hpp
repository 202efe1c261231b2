#pragma once

// Filtered ranking metrics per query structure, with A_p / A_n aggregates.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "gmmr/error.hpp"
#include "gmmr/model.hpp"
#include "gmmr/oracle_sampler.hpp"
#include "gmmr/query_dag.hpp"

namespace gmmr {

/// Distances of every entity to a sample's query (lower is closer).
using Scorer = std::function<std::vector<double>(const QuerySample&)>;

inline Scorer model_scorer(const Model& model) {
  return [&model](const QuerySample& s) { return model.distances(s.query.dag); };
}

/// Stub that knows the answers: 0 for every known answer, 1 otherwise.
inline Scorer oracle_scorer(std::size_t num_entities) {
  return [num_entities](const QuerySample& s) {
    std::vector<double> d(num_entities, 1.0);
    for (EntityId e : s.easy_answers) d.at(e) = 0.0;
    for (EntityId e : s.hard_answers) d.at(e) = 0.0;
    return d;
  };
}

/// Pessimistic filtered rank: ties with the answer count against it.
inline std::size_t rank_answer(EntityId answer, std::span<const double> distances, const EntitySet& filter_out) {
  if (answer >= distances.size()) throw InputError("answer id out of range");
  if (std::binary_search(filter_out.begin(), filter_out.end(), answer)) {
    throw InputError("answer e" + std::to_string(answer) + " is in the filter set");
  }
  const double da = distances[answer];
  std::size_t rank = 1;
  auto f = filter_out.begin();
  for (std::size_t e = 0; e < distances.size(); ++e) {
    while (f != filter_out.end() && *f < e) ++f;
    if (e == answer || (f != filter_out.end() && *f == e)) continue;
    if (distances[e] <= da) ++rank;
  }
  return rank;
}

struct StructureMetrics {
  std::string structure;
  std::size_t samples = 0;
  std::size_t answers = 0;
  double mrr = 0.0;
  double hits1 = 0.0;
  double hits3 = 0.0;
  double hits10 = 0.0;
};

struct MetricsReport {
  std::vector<StructureMetrics> per_structure;  // catalog order, present structures only
  std::optional<double> A_p;
  std::optional<double> A_n;

  const StructureMetrics* find(std::string_view name) const {
    for (const auto& s : per_structure) {
      if (s.structure == name) return &s;
    }
    return nullptr;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    nlohmann::ordered_json per = nlohmann::ordered_json::object();
    for (const auto& s : per_structure) {
      nlohmann::ordered_json e;
      e["samples"] = s.samples;
      e["answers"] = s.answers;
      e["mrr"] = s.mrr;
      e["hits@1"] = s.hits1;
      e["hits@3"] = s.hits3;
      e["hits@10"] = s.hits10;
      per[s.structure] = e;
    }
    j["structures"] = per;
    j["A_p"] = A_p ? nlohmann::ordered_json(*A_p) : nlohmann::ordered_json(nullptr);
    j["A_n"] = A_n ? nlohmann::ordered_json(*A_n) : nlohmann::ordered_json(nullptr);
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    for (const auto& t : all_templates()) {
      if (!j.at("structures").contains(t.name)) continue;
      const auto& e = j.at("structures").at(t.name);
      r.per_structure.push_back({t.name, e.at("samples").get<std::size_t>(), e.at("answers").get<std::size_t>(),
                                 e.at("mrr").get<double>(), e.at("hits@1").get<double>(),
                                 e.at("hits@3").get<double>(), e.at("hits@10").get<double>()});
    }
    if (!j.at("A_p").is_null()) r.A_p = j.at("A_p").get<double>();
    if (!j.at("A_n").is_null()) r.A_n = j.at("A_n").get<double>();
    return r;
  }

  /// Metric rows, structures as columns, then A_p and A_n; absent cells empty.
  std::string to_csv() const {
    std::string out = "metric";
    for (const auto& t : all_templates()) out += "," + t.name;
    out += ",A_p,A_n\n";
    struct Row {
      const char* name;
      double StructureMetrics::*field;
    };
    for (const Row& row : {Row{"MRR", &StructureMetrics::mrr}, Row{"Hits@1", &StructureMetrics::hits1},
                           Row{"Hits@3", &StructureMetrics::hits3}, Row{"Hits@10", &StructureMetrics::hits10}}) {
      out += row.name;
      for (const auto& t : all_templates()) {
        const StructureMetrics* s = find(t.name);
        out += s ? fmt::format(",{:.6f}", s->*row.field) : std::string(",");
      }
      for (auto group : {std::span<const std::string_view>(kEpfoStructures),
                         std::span<const std::string_view>(kNegationStructures)}) {
        auto mean = group_mean(group, row.field);
        out += mean ? fmt::format(",{:.6f}", *mean) : std::string(",");
      }
      out += "\n";
    }
    return out;
  }

  std::optional<double> group_mean(std::span<const std::string_view> group,
                                   double StructureMetrics::*field = &StructureMetrics::mrr) const {
    double total = 0.0;
    std::size_t n = 0;
    for (auto name : group) {
      if (const StructureMetrics* s = find(name)) {
        total += s->*field;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
  }
};

namespace detail {

struct SampleRanks {
  std::vector<std::size_t> ranks;
};

inline SampleRanks rank_sample(const QuerySample& s, const Scorer& scorer) {
  const std::vector<double> dist = scorer(s);
  EntitySet filter = s.easy_answers;
  filter.insert(filter.end(), s.hard_answers.begin(), s.hard_answers.end());
  std::sort(filter.begin(), filter.end());
  SampleRanks out;
  for (EntityId a : s.hard_answers) {
    EntitySet f;
    f.reserve(filter.size());
    for (EntityId e : filter) {
      if (e != a) f.push_back(e);
    }
    out.ranks.push_back(rank_answer(a, dist, f));
  }
  return out;
}

}  // namespace detail

/// Ranks each hard answer with easy and the other hard answers filtered.
/// Per-sample results are reduced in sample order, so the report does not
/// depend on `threads`.
inline MetricsReport evaluate(const std::vector<QuerySample>& samples, const Scorer& scorer,
                              std::size_t threads = 1) {
  if (samples.empty()) throw InputError("cannot evaluate an empty dataset");
  std::vector<detail::SampleRanks> results(samples.size());
  threads = std::max<std::size_t>(1, std::min(threads, samples.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) results[i] = detail::rank_sample(samples[i], scorer);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < samples.size(); i = next++) {
          results[i] = detail::rank_sample(samples[i], scorer);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  std::map<std::string, StructureMetrics> acc;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& m = acc[samples[i].query.structure];
    m.structure = samples[i].query.structure;
    ++m.samples;
    for (std::size_t r : results[i].ranks) {
      ++m.answers;
      m.mrr += 1.0 / static_cast<double>(r);
      m.hits1 += r <= 1;
      m.hits3 += r <= 3;
      m.hits10 += r <= 10;
    }
  }
  MetricsReport report;
  auto finish = [](StructureMetrics m) {
    const double n = static_cast<double>(std::max<std::size_t>(m.answers, 1));
    m.mrr /= n;
    m.hits1 /= n;
    m.hits3 /= n;
    m.hits10 /= n;
    return m;
  };
  for (const auto& t : all_templates()) {
    auto it = acc.find(t.name);
    if (it != acc.end() && it->second.answers > 0) {
      report.per_structure.push_back(finish(it->second));
      acc.erase(it);
    }
  }
  for (auto& [name, m] : acc) {
    if (m.answers > 0) report.per_structure.push_back(finish(m));
  }
  report.A_p = report.group_mean(kEpfoStructures);
  report.A_n = report.group_mean(kNegationStructures);
  return report;
}

/// Training-set ranking: the training answers become the ranking targets.
inline std::vector<QuerySample> as_training_targets(const std::vector<QuerySample>& samples) {
  std::vector<QuerySample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    QuerySample t = s;
    t.hard_answers = s.easy_answers;
    t.hard_answers.insert(t.hard_answers.end(), s.hard_answers.begin(), s.hard_answers.end());
    std::sort(t.hard_answers.begin(), t.hard_answers.end());
    t.hard_answers.erase(std::unique(t.hard_answers.begin(), t.hard_answers.end()), t.hard_answers.end());
    t.easy_answers.clear();
    out.push_back(std::move(t));
  }
  return out;
}

struct RandomRankingExpectation {
  double mean = 0.0;
  double standard_error = 0.0;
};

/// Mean reciprocal rank under uniformly random ordering of the unfiltered
/// candidates: rank is uniform on 1..N, so E[1/rank] = H_N / N.
inline RandomRankingExpectation random_ranking_expectation(const std::vector<QuerySample>& samples,
                                                           std::size_t num_entities) {
  double mean_sum = 0.0, var_sum = 0.0;
  std::size_t pairs = 0;
  for (const auto& s : samples) {
    const std::size_t filtered = s.easy_answers.size() + s.hard_answers.size() - 1;
    for (std::size_t a = 0; a < s.hard_answers.size(); ++a) {
      const std::size_t n = num_entities - filtered;
      double h1 = 0.0, h2 = 0.0;
      for (std::size_t r = 1; r <= n; ++r) {
        h1 += 1.0 / static_cast<double>(r);
        h2 += 1.0 / static_cast<double>(r * r);
      }
      const double m = h1 / static_cast<double>(n);
      mean_sum += m;
      var_sum += h2 / static_cast<double>(n) - m * m;
      ++pairs;
    }
  }
  if (pairs == 0) throw InputError("no hard answers to rank");
  const double p = static_cast<double>(pairs);
  return {mean_sum / p, std::sqrt(var_sum) / p};
}

}  // namespace gmmr
