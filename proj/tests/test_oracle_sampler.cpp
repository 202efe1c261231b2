#include <gtest/gtest.h>

#include "gmmr/oracle_sampler.hpp"
#include "gmmr/synthetic.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace gmmr;

namespace {

Graph random_graph(std::size_t n, std::size_t r, std::size_t m, Rng& rng) {
  std::vector<Triple> t;
  for (std::size_t i = 0; i < m; ++i) {
    t.push_back({static_cast<EntityId>(uniform_index(rng, n)), static_cast<RelationId>(uniform_index(rng, r)),
                 static_cast<EntityId>(uniform_index(rng, n))});
  }
  return Graph::from_ids(n, r, std::move(t));
}

Query random_instance(const StructureTemplate& t, std::size_t n, std::size_t r, Rng& rng) {
  std::vector<EntityId> a(t.num_anchors);
  std::vector<RelationId> rel(t.num_relations);
  for (auto& x : a) x = static_cast<EntityId>(uniform_index(rng, n));
  for (auto& x : rel) x = static_cast<RelationId>(uniform_index(rng, r));
  return instantiate_template(t, a, rel);
}

SplitGraphs planted_splits(std::uint64_t seed) {
  PlantedKgConfig cfg;
  cfg.seed = seed;
  return make_splits(make_planted_kg(cfg).graph, seed, 0.1);
}

std::vector<TemplateCount> all_counts(std::size_t n) {
  std::vector<TemplateCount> c;
  for (const auto& t : all_templates()) c.push_back({t.name, n});
  return c;
}

EntitySet merged(const EntitySet& a, const EntitySet& b) {
  EntitySet out;
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

}  // namespace

TEST(Answer, TwoHopChain) {
  Graph g = Graph::from_ids(3, 2, {{0, 0, 1}, {1, 1, 2}});
  EXPECT_EQ(answer(parse_query("(p r1 (p r0 e0))"), g), (EntitySet{2}));
}

TEST(Answer, SetAndComplementIsEmpty) {
  Rng rng(1);
  Graph g = random_graph(20, 2, 60, rng);
  EXPECT_TRUE(answer(parse_query("(i (p r0 e0) (n (p r0 e0)))"), g).empty());
}

TEST(Answer, MatchesExhaustiveEnumeration) {
  Rng rng(2);
  std::size_t nonempty = 0, total = 0;
  for (const auto& t : all_templates()) {
    for (int i = 0; i < 100; ++i) {
      Graph g = random_graph(20 + uniform_index(rng, 31), 3, 150 + uniform_index(rng, 100), rng);
      Query q;
      if (i % 2 == 0) {
        auto s = sample_query(t, g, rng);
        q = s ? s->dag : random_instance(t, g.num_entities(), 3, rng);
      } else {
        q = random_instance(t, g.num_entities(), 3, rng);
      }
      const auto got = answer(q, g);
      EXPECT_EQ(got, oracle::enumerate_answers(q, g)) << t.name << " " << q->text();
      nonempty += !got.empty();
      ++total;
    }
  }
  // the comparison would be vacuous if nearly everything were empty
  EXPECT_GT(nonempty, total / 4);
}

TEST(Answer, NegationIsInvolution) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    Graph g = random_graph(25, 3, 100, rng);
    Query q = random_instance(find_template(i % 2 ? "pi" : "2in"), 25, 3, rng);
    EXPECT_EQ(answer(query::negation(query::negation(q)), g), answer(q, g));
  }
}

TEST(Answer, UnionEqualsUnionOfDnfBranches) {
  Rng rng(4);
  for (const char* name : {"2u", "up"}) {
    for (int i = 0; i < 50; ++i) {
      Graph g = random_graph(25, 3, 120, rng);
      Query q = random_instance(find_template(name), 25, 3, rng);
      EntitySet u;
      for (const auto& b : to_dnf(q)) u = merged(u, answer(b, g));
      EXPECT_EQ(u, answer(q, g)) << q->text();
    }
  }
}

TEST(Sample, SingleTripleGraphHasUniqueGrounding) {
  Graph g = Graph::from_ids(2, 1, {{0, 0, 1}});
  Rng rng(5);
  auto s = sample_query(find_template("1p"), g, rng);
  ASSERT_TRUE(s.has_value());
  EXPECT_EQ(s->dag->text(), "(p r0 e0)");
  EXPECT_EQ(s->structure, "1p");
  EXPECT_EQ(answer(s->dag, g), (EntitySet{1}));
}

TEST(Sample, UnsatisfiableTemplateIsRejected) {
  // a chain: every entity has at most one incoming edge
  Graph g = Graph::from_ids(4, 2, {{0, 0, 1}, {1, 1, 2}, {2, 0, 3}});
  Rng rng(6);
  EXPECT_FALSE(sample_query(find_template("2i"), g, rng).has_value());
  EXPECT_FALSE(sample_query(find_template("3i"), g, rng).has_value());
}

TEST(Sample, EmptyGraphIsRejected) {
  Graph g = Graph::from_ids(3, 1, {});
  Rng rng(7);
  EXPECT_FALSE(sample_query(find_template("1p"), g, rng).has_value());
}

TEST(Sample, TwoHopSamplesHaveAnswers) {
  PlantedKgConfig cfg;
  Graph g = make_planted_kg(cfg).graph;
  ASSERT_EQ(g.num_entities(), 64u);
  QuerySampler sampler(g);
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    auto s = sampler.sample(find_template("2p"), rng);
    ASSERT_TRUE(s.has_value());
    EXPECT_FALSE(answer(s->dag, g).empty());
  }
}

TEST(Sample, GroundingsUseGraphVocabulary) {
  Rng rng(9);
  Graph g = random_graph(30, 3, 200, rng);
  QuerySampler sampler(g);
  for (const auto& t : all_templates()) {
    for (int i = 0; i < 20; ++i) {
      auto s = sampler.sample(t, rng);
      if (!s) continue;
      EXPECT_NO_THROW(parse_query(s->dag->text(), VocabularyLimits{30, 3}));
      EXPECT_FALSE(answer(s->dag, g).empty()) << s->dag->text();
    }
  }
}

TEST(Generate, EveryLineRevalidates) {
  SplitGraphs graphs = planted_splits(11);
  Dataset ds = generate_dataset(all_counts(100), graphs, 5);
  ASSERT_EQ(ds.train.size(), 1400u);
  ASSERT_EQ(ds.valid.size(), 1400u);
  ASSERT_EQ(ds.test.size(), 1400u);
  for (const auto& s : ds.train) {
    EXPECT_TRUE(s.hard_answers.empty());
    EXPECT_EQ(s.easy_answers, oracle::enumerate_answers(s.query.dag, graphs.train));
  }
  auto check = [](const QuerySample& s, const Graph& small, const Graph& large) {
    EXPECT_FALSE(s.hard_answers.empty());
    EXPECT_EQ(s.easy_answers, oracle::enumerate_answers(s.query.dag, small));
    EXPECT_EQ(merged(s.easy_answers, s.hard_answers), oracle::enumerate_answers(s.query.dag, large));
    EntitySet both;
    std::set_intersection(s.easy_answers.begin(), s.easy_answers.end(), s.hard_answers.begin(),
                          s.hard_answers.end(), std::back_inserter(both));
    EXPECT_TRUE(both.empty());
  };
  for (const auto& s : ds.valid) check(s, graphs.train, graphs.valid);
  for (const auto& s : ds.test) check(s, graphs.valid, graphs.test);
}

TEST(Generate, ZeroCountsGiveEmptyFiles) {
  SplitGraphs graphs = planted_splits(12);
  Dataset ds = generate_dataset(all_counts(0), graphs, 1);
  EXPECT_TRUE(ds.train.empty() && ds.valid.empty() && ds.test.empty());
  TempDir dir;
  write_dataset(ds, dir.path());
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl"}) EXPECT_EQ(read_file(dir.path() / f), "");
  auto manifest = nlohmann::json::parse(read_file(dir.path() / "generation.json"));
  EXPECT_EQ(manifest.at("seed").get<std::uint64_t>(), 1u);
  EXPECT_EQ(read_dataset_info(dir.path()).num_entities, 64u);
}

TEST(Generate, IdenticalTrainValidExhausts) {
  SplitGraphs graphs = planted_splits(13);
  graphs.valid = graphs.train;
  try {
    generate_dataset({{"1p", 5}}, graphs, 1, 16);
    FAIL() << "expected exhaustion";
  } catch (const GenerationError& e) {
    EXPECT_NE(std::string(e.what()).find("1p"), std::string::npos) << e.what();
  }
}

TEST(Generate, ContainmentViolationRejected) {
  SplitGraphs graphs = planted_splits(14);
  std::swap(graphs.train, graphs.test);
  EXPECT_THROW(generate_dataset(all_counts(1), graphs, 1), InputError);
}

TEST(Generate, DeterministicAcrossThreadCounts) {
  SplitGraphs graphs = planted_splits(15);
  TempDir a, b, c;
  write_dataset(generate_dataset(all_counts(20), graphs, 77, kDefaultRetryBudget, 1), a.path());
  write_dataset(generate_dataset(all_counts(20), graphs, 77, kDefaultRetryBudget, 1), b.path());
  write_dataset(generate_dataset(all_counts(20), graphs, 77, kDefaultRetryBudget, 4), c.path());
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "generation.json"}) {
    EXPECT_EQ(read_file(a.path() / f), read_file(b.path() / f)) << f;
    EXPECT_EQ(read_file(a.path() / f), read_file(c.path() / f)) << f;
  }
}

TEST(Generate, JsonlRoundTrip) {
  SplitGraphs graphs = planted_splits(16);
  Dataset ds = generate_dataset(all_counts(5), graphs, 3);
  TempDir dir;
  write_dataset(ds, dir.path());
  auto back = read_split(dir.path(), Split::test, VocabularyLimits{64, 4});
  ASSERT_EQ(back.size(), ds.test.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].query.structure, ds.test[i].query.structure);
    EXPECT_EQ(back[i].query.dag->text(), ds.test[i].query.dag->text());
    EXPECT_EQ(back[i].easy_answers, ds.test[i].easy_answers);
    EXPECT_EQ(back[i].hard_answers, ds.test[i].hard_answers);
  }
  const auto line = read_file(dir.path() / "test.jsonl").substr(0, read_file(dir.path() / "test.jsonl").find('\n'));
  auto j = nlohmann::json::parse(line);
  for (const char* key : {"structure", "query", "easy_answers", "hard_answers"}) EXPECT_TRUE(j.contains(key)) << key;
}

TEST(Generate, MalformedJsonlReportsLine) {
  TempDir dir;
  write_file(dir.path() / "x.jsonl", "{\"structure\":\"1p\",\"query\":\"(p r0 e0)\",\"easy_answers\":[1],"
                                     "\"hard_answers\":[]}\nnot json\n");
  try {
    read_samples(dir.path() / "x.jsonl");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}
