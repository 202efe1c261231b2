#include <gtest/gtest.h>

#include "gmmr/gradcheck.hpp"
#include "gmmr/synthetic.hpp"
#include "gmmr/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace gmmr;

namespace {

QuerySample sample(const char* text, EntitySet answers, const char* structure = "1p") {
  return QuerySample{GroundedQuery{parse_query(text), structure}, std::move(answers), {}};
}

ModelConfig small_config(std::size_t V, std::size_t R, std::uint64_t seed = 1) {
  ModelConfig c;
  c.num_entities = V;
  c.num_relations = R;
  c.d = 3;
  c.k = 2;
  c.seed = seed;
  return c;
}

// Every entity gets the same Gaussian, so all distances to any query agree.
void make_entities_identical(Model& m) {
  auto& ps = m.parameters();
  for (const char* name : {"entity.mu", "entity.sigma_raw"}) {
    Tensor& t = const_cast<Parameter*>(ps.find(name))->value;
    for (std::size_t e = 1; e < t.rows(); ++e)
      for (std::size_t j = 0; j < t.cols(); ++j) t(e, j) = t(0, j);
  }
}

TrainData planted_data(std::size_t per_template, std::vector<std::string> templates, std::uint64_t seed) {
  PlantedKgConfig kc;
  SplitGraphs g = make_splits(make_planted_kg(kc).graph, seed, 0.0);
  std::vector<TemplateCount> counts;
  for (auto& t : templates) counts.push_back({t, per_template});
  Dataset ds = generate_dataset(counts, g, seed);
  return {ds.train, ds.valid, g.test.num_entities(), g.test.num_relations()};
}

// metrics.csv with the wall_seconds column dropped
std::string without_last_column(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

}  // namespace

TEST(Loss, SingleEntityIsZero) {
  Model m(small_config(1, 1));
  EXPECT_NEAR(batch_loss(m, std::vector{sample("(p r0 e0)", {0})}), 0.0, 1e-15);
}

TEST(Loss, TwoEquidistantEntitiesIsLn2) {
  Model m(small_config(2, 1));
  make_entities_identical(m);
  EXPECT_NEAR(batch_loss(m, std::vector{sample("(p r0 e0)", {1})}), std::log(2.0), 1e-12);
}

TEST(Loss, UniformDistancesGiveLogV) {
  for (std::size_t V : {3u, 10u, 64u}) {
    Model m(small_config(V, 2, V));
    make_entities_identical(m);
    std::vector<QuerySample> batch{sample("(p r0 e0)", {1, 2}), sample("(i (p r0 e1) (p r1 e2))", {0}, "2i")};
    EXPECT_NEAR(batch_loss(m, batch), std::log(static_cast<double>(V)), 1e-9);
  }
}

TEST(Loss, MatchesDirectFormulaOnToyGraph) {
  Model m(small_config(3, 2, 7));
  std::vector<QuerySample> batch{sample("(p r0 e0)", {1}), sample("(p r1 (p r0 e0))", {0, 2}, "2p"),
                                 sample("(u (p r0 e1) (p r1 e2))", {0, 1}, "2u"),
                                 sample("(i (p r0 e0) (n (p r1 e1)))", {2}, "2in")};
  std::vector<std::vector<double>> dist;
  std::vector<std::vector<EntityId>> answers;
  for (const auto& s : batch) {
    dist.push_back(m.distances(s.query.dag));
    answers.push_back(s.easy_answers);
  }
  EXPECT_NEAR(batch_loss(m, batch), oracle::direct_loss(dist, answers), 1e-10);
}

TEST(Loss, ZeroAnswerSampleRejected) {
  Model m(small_config(3, 1));
  EXPECT_THROW(batch_loss(m, std::vector{sample("(p r0 e0)", {})}), InputError);
  EXPECT_THROW(batch_loss(m, std::vector<QuerySample>{}), InputError);
}

TEST(Loss, ThreadedBatchAgrees) {
  Model m(small_config(8, 3, 2));
  std::vector<QuerySample> batch;
  for (EntityId e = 0; e < 7; ++e) batch.push_back(sample(("(p r" + std::to_string(e % 3) + " e" + std::to_string(e) + ")").c_str(), {e + 1u}));
  const auto params = m.parameters().list();
  GradStore g1(params), g3(params);
  const double l1 = batch_loss(m, batch, &g1, 1);
  const double l3 = batch_loss(m, batch, &g3, 3);
  EXPECT_NEAR(l1, l3, 1e-12);
  for (std::size_t i = 0; i < g1.size(); ++i)
    for (std::size_t j = 0; j < g1[i].size(); ++j) EXPECT_NEAR(g1[i][j], g3[i][j], 1e-12);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::vector<QuerySample> batch{sample("(p r0 e0)", {1}), sample("(i (p r0 e1) (n (p r1 e2)))", {0}, "2in"),
                                 sample("(p r1 (u (p r0 e1) (p r1 e2)))", {0, 2}, "up")};
  // plain three-point stencil, h = 1e-5, every parameter entry, 5 draws
  GradCheckOptions opt;
  opt.step = 1e-5;
  opt.fourth_order = false;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Model m(small_config(3, 2, seed));
    auto res = check_model_gradients(
        "toy_loss", m, [&](const Model& mm, GradStore* g) { return batch_loss(mm, batch, g); }, opt);
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst << " " << res.worst_analytic << " " << res.worst_numeric;
    EXPECT_EQ(res.at_kink, 0u);
    EXPECT_EQ(res.checked, m.parameters().scalar_count());
  }
}

TEST(AdamW, FirstStepMatchesHandFormula) {
  ParameterSet ps;
  Parameter& p = ps.add("x", 1, 1);
  p.value[0] = 2.0;
  GradStore g(ps.list());
  // f(x) = 3 x^2, f'(2) = 12
  g[0][0] = 6.0 * p.value[0];
  const double lr = 1e-3, wd = 1e-2, eps = 1e-8;
  AdamW opt(ps, {lr, 0.9, 0.999, eps, wd});
  opt.step(ps, g);
  const double m = 0.1 * 12.0, v = 0.001 * 144.0;
  const double mhat = m / 0.1, vhat = v / 0.001;
  EXPECT_NEAR(p.value[0], 2.0 * (1 - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps), 1e-12);

  // second step with the gradient at the new point
  const double x1 = p.value[0];
  g[0][0] = 6.0 * x1;
  opt.step(ps, g);
  const double m2 = 0.9 * m + 0.1 * 6.0 * x1, v2 = 0.999 * v + 0.001 * 36.0 * x1 * x1;
  const double expected = x1 * (1 - lr * wd) - lr * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + eps);
  EXPECT_NEAR(p.value[0], expected, 1e-12);
}

TEST(AdamW, DecayIsDecoupled) {
  ParameterSet ps;
  Parameter& p = ps.add("x", 1, 2);
  p.value[0] = 1.5;
  p.value[1] = -4.0;
  GradStore g(ps.list());
  AdamW frozen(ps, {0.0, 0.9, 0.999, 1e-8, 0.5});
  frozen.step(ps, g);
  EXPECT_EQ(p.value[0], 1.5);
  // zero gradient: only the multiplicative decay acts
  AdamW opt(ps, {1e-3, 0.9, 0.999, 1e-8, 0.5});
  opt.step(ps, g);
  EXPECT_DOUBLE_EQ(p.value[0], 1.5 * (1 - 1e-3 * 0.5));
  EXPECT_DOUBLE_EQ(p.value[1], -4.0 * (1 - 1e-3 * 0.5));
}

TEST(Config, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.d = 8;
  c.ablation.no_dispersion = true;
  TrainConfig back = TrainConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  EXPECT_EQ(back.d, 8u);
  EXPECT_TRUE(back.ablation.no_dispersion);
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"dd", 3}}), InputError);
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"learning_rate", 0.1}}), InputError);
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"batch_size", 0}}), InputError);
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"ablation", {{"no_gates", true}}}}), InputError);
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"d", "eight"}}), InputError);
}

TEST(Train, ZeroEpochsKeepsInitialization) {
  TrainData data = planted_data(5, {"1p"}, 1);
  TrainConfig cfg;
  cfg.d = 4;
  cfg.k = 2;
  cfg.epochs = 0;
  cfg.seed = 3;
  TempDir dir;
  TrainResult r = train(cfg, data, {dir.path(), false, 1, {}});
  Model init(ModelConfig{data.num_entities, data.num_relations, 4, 2, 3, {}, {}});
  Model saved = Model::load(dir.path() / "best.ckpt");
  for (std::size_t i = 0; i < init.parameters().size(); ++i) {
    EXPECT_EQ(saved.parameters()[i].value, init.parameters()[i].value) << init.parameters()[i].name;
    EXPECT_EQ(r.model.parameters()[i].value, init.parameters()[i].value);
  }
}

TEST(Train, DeterministicAndResumable) {
  TrainData data = planted_data(6, {"1p", "2p", "2i"}, 2);
  TrainConfig cfg;
  cfg.d = 4;
  cfg.k = 2;
  cfg.epochs = 4;
  cfg.batch_size = 5;
  cfg.seed = 9;
  TempDir a, b, c;
  TrainResult ra = train(cfg, data, {a.path(), false, 1, {}});
  TrainResult rb = train(cfg, data, {b.path(), false, 1, {}});
  ASSERT_EQ(ra.log.size(), 4u);
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    EXPECT_EQ(ra.log[i].train_loss, rb.log[i].train_loss);
    EXPECT_EQ(ra.log[i].valid_ap, rb.log[i].valid_ap);
  }
  EXPECT_EQ(read_file(a.path() / "best.ckpt"), read_file(b.path() / "best.ckpt"));
  EXPECT_EQ(read_file(a.path() / "last.ckpt"), read_file(b.path() / "last.ckpt"));
  EXPECT_EQ(read_file(a.path() / "state.ckpt"), read_file(b.path() / "state.ckpt"));
  EXPECT_EQ(without_last_column(read_file(a.path() / "metrics.csv")),
            without_last_column(read_file(b.path() / "metrics.csv")));

  // 2 epochs, then resume to 4: same parameters bit for bit
  TrainConfig half = cfg;
  half.epochs = 2;
  train(half, data, {c.path(), false, 1, {}});
  TrainResult rc = train(cfg, data, {c.path(), true, 1, {}});
  ASSERT_EQ(rc.log.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(rc.log[i].train_loss, ra.log[i].train_loss) << i;
  EXPECT_EQ(read_file(c.path() / "last.ckpt"), read_file(a.path() / "last.ckpt"));
  EXPECT_EQ(read_file(c.path() / "best.ckpt"), read_file(a.path() / "best.ckpt"));
  EXPECT_EQ(read_file(c.path() / "state.ckpt"), read_file(a.path() / "state.ckpt"));
  // timings of the first two epochs survive the resume
  for (std::size_t i = 1; i < 4; ++i) EXPECT_GE(rc.log[i].wall_seconds, rc.log[i - 1].wall_seconds);
  EXPECT_GT(rc.log[1].wall_seconds, 0.0);

  const std::string csv = read_file(a.path() / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,valid_mrr_Ap,valid_mrr_An,wall_seconds");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Train, LossDecreasesOnSmallRun) {
  TrainData data = planted_data(20, {"1p"}, 3);
  TrainConfig cfg;
  cfg.d = 8;
  cfg.k = 2;
  cfg.epochs = 15;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  TrainResult r = train(cfg, data);
  EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
}

TEST(Ablation, NoCardinalityFreezesAlpha) {
  ModelConfig c = small_config(5, 2);
  Model m(c);
  apply_ablation(m, Ablation{true, false, false});
  const auto emb = m.embed(parse_query("(i (p r0 e1) (p r1 e2))"));
  const auto can = canonicalize(emb, m.ablation());
  for (double v : can.alpha.values()) EXPECT_EQ(v, 0.5);
  // and the distances use the frozen view
  const auto dist = m.distances(parse_query("(p r0 e1)"));
  const auto e0 = m.entity(0);
  const auto q = m.embed(parse_query("(p r0 e1)"));
  EXPECT_NEAR(dist[0], mixed_distance(e0, q, m.ablation()).total, 1e-12);
  EXPECT_EQ(mixed_distance(e0, q, m.ablation()).cardinality_term, 0.0);
}

TEST(Ablation, MwdReportsZeroCardinality) {
  Model m(small_config(5, 2));
  apply_ablation(m, Ablation{false, false, true});
  const auto q = m.embed(parse_query("(p r1 e3)"));
  const auto dist = m.distances(parse_query("(p r1 e3)"));
  for (EntityId e = 0; e < 5; ++e) {
    auto bd = mixed_distance(m.entity(e), q, m.ablation());
    EXPECT_EQ(bd.cardinality_term, 0.0);
    EXPECT_NEAR(dist[e], bd.total, 1e-12);
  }
}

TEST(Ablation, NoFlagsLeavesModelUnchanged) {
  Model a(small_config(5, 2)), b(small_config(5, 2));
  apply_ablation(b, Ablation{});
  EXPECT_EQ(a.distances(parse_query("(p r0 e0)")), b.distances(parse_query("(p r0 e0)")));
}
