#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <set>

#include <json.hpp>

#include "gmmr/oracle_sampler.hpp"
#include "gmmr/synthetic.hpp"
#include "test_util.hpp"

using namespace gmmr;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun gmmr_cli(const std::string& args) {
  static TempDir scratch;
  const fs::path out = scratch.path() / "stdout", err = scratch.path() / "stderr";
  const std::string cmd = std::string(GMMR_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(out), read_file(err)};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

bool single_error_line(const std::string& err) {
  return err.rfind("error: ", 0) == 0 && err.find('\n') == err.size() - 1;
}

std::set<std::string> triple_lines(const fs::path& p) {
  std::set<std::string> out;
  std::istringstream in(read_file(p));
  std::string line;
  while (std::getline(in, line)) out.insert(line);
  return out;
}

// Planted KG written as a labelled triples file.
fs::path write_planted(const fs::path& dir) {
  PlantedKgConfig kc;
  kc.seed = 11;
  const fs::path p = dir / "kg.txt";
  save_triples(make_planted_kg(kc).graph, p);
  return p;
}

}  // namespace

TEST(Cli, HelpListsEveryFlag) {
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands = {
      {"split", {"--triples", "--out", "--seed", "--hidden-fraction"}},
      {"generate", {"--splits", "--templates", "--count", "--seed", "--out"}},
      {"train", {"--config", "--data", "--out", "--resume"}},
      {"eval", {"--checkpoint", "--oracle", "--data", "--split"}},
      {"answer", {"--checkpoint", "--query", "--explain"}},
      {"gradcheck", {"--d", "--k", "--seed"}},
      {"report", {"--metrics", "--format"}},
  };
  for (const auto& [cmd, flags] : commands) {
    CliRun r = gmmr_cli(cmd + " --help");
    EXPECT_EQ(r.code, 0) << cmd;
    for (const auto& f : flags) EXPECT_NE(r.out.find(f), std::string::npos) << cmd << " " << f;
  }
  EXPECT_NE(gmmr_cli("--help").out.find("--threads"), std::string::npos);
}

TEST(Cli, UnknownFlagsAndCommandsAreErrors) {
  CliRun r = gmmr_cli("gradcheck --d 4 --bogus 1");
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(single_error_line(r.err)) << r.err;
  EXPECT_EQ(gmmr_cli("frobnicate").code, 2);
  EXPECT_EQ(gmmr_cli("").code, 2);
}

TEST(Cli, SplitMissingFile) {
  TempDir dir;
  CliRun r = gmmr_cli("split --triples " + q(dir.path() / "nope.txt") + " --out " + q(dir.path() / "s"));
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(single_error_line(r.err)) << r.err;
  EXPECT_NE(r.err.find("triples file not found"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir.path() / "s"));
}

TEST(Cli, SplitWritesContainedGraphsDeterministically) {
  TempDir dir;
  const fs::path kg = write_planted(dir.path());
  for (const char* out : {"a", "b"}) {
    CliRun r = gmmr_cli("split --triples " + q(kg) + " --seed 5 --hidden-fraction 0.2 --out " + q(dir.path() / out));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  for (const char* f : {"train.txt", "valid.txt", "test.txt", "manifest.json"}) {
    EXPECT_EQ(read_file(dir.path() / "a" / f), read_file(dir.path() / "b" / f)) << f;
  }
  SplitGraphs s = load_splits(dir.path() / "a" / "manifest.json");
  EXPECT_TRUE(verify_containment(s.train, s.valid, s.test));
  EXPECT_LT(s.train.num_triples(), s.valid.num_triples());
  EXPECT_EQ(triple_lines(dir.path() / "a" / "test.txt"), triple_lines(kg));

  // F=0 keeps every training edge: rerun with the same seed and compare
  ASSERT_EQ(gmmr_cli("split --triples " + q(kg) + " --seed 5 --hidden-fraction 0 --out " + q(dir.path() / "z")).code, 0);
  Graph g = load_triples(kg);
  SplitGraphs ref = make_splits(g, 5, 0.0);
  const fs::path ref_file = dir.path() / "ref_train.txt";
  save_triples(ref.train, ref_file);
  EXPECT_EQ(triple_lines(dir.path() / "z" / "train.txt"), triple_lines(ref_file));
  auto full = triple_lines(dir.path() / "z" / "train.txt");
  auto hidden = triple_lines(dir.path() / "a" / "train.txt");
  EXPECT_TRUE(std::includes(full.begin(), full.end(), hidden.begin(), hidden.end()));
}

TEST(Cli, GenerateValidatesTemplatesAndRevalidates) {
  TempDir dir;
  const fs::path kg = write_planted(dir.path());
  ASSERT_EQ(gmmr_cli("split --triples " + q(kg) + " --seed 1 --out " + q(dir.path() / "s")).code, 0);
  const std::string manifest = q(dir.path() / "s" / "manifest.json");

  CliRun bad = gmmr_cli("generate --splits " + manifest + " --templates 1p,7x --count 3 --out " + q(dir.path() / "x"));
  EXPECT_EQ(bad.code, 2);
  EXPECT_TRUE(single_error_line(bad.err));
  EXPECT_NE(bad.err.find("7x"), std::string::npos) << bad.err;

  ASSERT_EQ(gmmr_cli("generate --splits " + manifest + " --count 0 --out " + q(dir.path() / "empty")).code, 0);
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl"}) {
    EXPECT_TRUE(fs::exists(dir.path() / "empty" / f));
    EXPECT_EQ(read_file(dir.path() / "empty" / f), "");
  }

  for (const char* out : {"g1", "g2"}) {
    CliRun r = gmmr_cli("--threads 2 generate --splits " + manifest + " --count 5 --seed 3 --out " + q(dir.path() / out));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "generation.json"}) {
    EXPECT_EQ(read_file(dir.path() / "g1" / f), read_file(dir.path() / "g2" / f)) << f;
  }
  SplitGraphs g = load_splits(dir.path() / "s" / "manifest.json");
  std::set<std::string> seen;
  for (Split sp : {Split::train, Split::valid, Split::test}) {
    const Graph& small = sp == Split::train ? g.train : sp == Split::valid ? g.train : g.valid;
    const Graph& large = sp == Split::train ? g.train : sp == Split::valid ? g.valid : g.test;
    for (const auto& s : read_split(dir.path() / "g1", sp)) {
      seen.insert(s.query.structure);
      EntitySet easy = answer(s.query.dag, small);
      EntitySet full = answer(s.query.dag, large);
      EXPECT_EQ(s.easy_answers, easy) << s.query.dag->text();
      EXPECT_EQ(s.hard_answers, set_difference(full, easy)) << s.query.dag->text();
    }
  }
  EXPECT_EQ(seen.size(), 14u);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir;
    const fs::path kg = write_planted(dir_->path());
    ASSERT_EQ(gmmr_cli("split --triples " + q(kg) + " --seed 2 --hidden-fraction 0.1 --out " + q(p("s"))).code, 0);
    ASSERT_EQ(gmmr_cli("generate --splits " + q(p("s") / "manifest.json") +
                       " --templates 1p,2in --count 20 --seed 4 --out " + q(p("data")))
                  .code,
              0);
    write_file(p("cfg.json"),
               R"({"d": 8, "k": 2, "learning_rate": 0.001, "batch_size": 8, "epochs": 60, "seed": 1, "patience": 100})");
    CliRun r = gmmr_cli("train --config " + q(p("cfg.json")) + " --data " + q(p("data")) + " --out " + q(p("run")));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path p(const std::string& name) { return dir_->path() / name; }
  static TempDir* dir_;
};

TempDir* CliPipeline::dir_ = nullptr;

TEST_F(CliPipeline, TrainWritesRunDirectory) {
  for (const char* f : {"metrics.csv", "best.ckpt", "last.ckpt", "state.ckpt"}) EXPECT_TRUE(fs::exists(p("run") / f)) << f;
  const std::string csv = read_file(p("run") / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,valid_mrr_Ap,valid_mrr_An,wall_seconds");
}

TEST_F(CliPipeline, BadConfigIsAnInputError) {
  write_file(p("bad.json"), R"({"d": 8, "learning_rate": 0.5})");
  CliRun r = gmmr_cli("train --config " + q(p("bad.json")) + " --data " + q(p("data")) + " --out " + q(p("bad")));
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(single_error_line(r.err)) << r.err;
}

TEST_F(CliPipeline, OracleEvalIsPerfect) {
  CliRun r = gmmr_cli("eval --oracle --data " + q(p("data")) + " --split test");
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("A_p").get<double>(), 1.0);
  EXPECT_EQ(j.at("A_n").get<double>(), 1.0);
}

TEST_F(CliPipeline, EvalAndReport) {
  CliRun r = gmmr_cli("--threads 3 eval --checkpoint " + q(p("run") / "best.ckpt") + " --data " + q(p("data")) +
                   " --split test --out " + q(p("metrics.json")));
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(read_file(p("metrics.json")));
  EXPECT_TRUE(j.at("structures").contains("1p"));
  EXPECT_TRUE(j.at("structures").contains("2in"));

  CliRun csv = gmmr_cli("report --metrics " + q(p("metrics.json")) + " --format csv");
  ASSERT_EQ(csv.code, 0) << csv.err;
  EXPECT_EQ(csv.out.substr(0, csv.out.find('\n')), "metric,1p,2p,3p,2i,3i,ip,pi,2u,up,2in,3in,inp,pin,pni,A_p,A_n");
  CliRun js = gmmr_cli("report --metrics " + q(p("metrics.json")) + " --format json");
  ASSERT_EQ(js.code, 0);
  EXPECT_EQ(nlohmann::json::parse(js.out), j);
  EXPECT_EQ(gmmr_cli("report --metrics " + q(p("metrics.json")) + " --format xml").code, 2);
  EXPECT_EQ(gmmr_cli("report --metrics " + q(p("missing.json"))).code, 2);
}

TEST_F(CliPipeline, AnswerRanksKnownAnswersInTopTen) {
  auto train = read_split(p("data"), Split::train);
  std::size_t hits = 0, tried = 0;
  for (const auto& s : train) {
    if (s.query.structure != "1p" || tried == 10) continue;
    ++tried;
    CliRun r = gmmr_cli("answer --checkpoint " + q(p("run") / "best.ckpt") + " --query '" + s.query.dag->text() + "'");
    ASSERT_EQ(r.code, 0) << r.err;
    auto j = nlohmann::json::parse(r.out);
    ASSERT_EQ(j.at("answers").size(), 10u);
    bool hit = false;
    for (const auto& a : j.at("answers")) {
      const auto id = static_cast<EntityId>(std::stoul(a.at("entity").get<std::string>().substr(1)));
      hit = hit || std::binary_search(s.easy_answers.begin(), s.easy_answers.end(), id);
    }
    hits += hit;
  }
  EXPECT_EQ(tried, 10u);
  EXPECT_EQ(hits, tried);
}

TEST_F(CliPipeline, AnswerExplainShowsBreakdownAndBranch) {
  CliRun r = gmmr_cli("answer --checkpoint " + q(p("run") / "best.ckpt") + " --query '(u (p r0 e1) (p r1 e2))' --explain --top 5");
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(r.out);
  ASSERT_EQ(j.at("branches").size(), 2u);
  ASSERT_EQ(j.at("answers").size(), 5u);
  double prev = -1.0;
  for (const auto& a : j.at("answers")) {
    const auto& b = a.at("breakdown");
    EXPECT_NEAR(b.at("total").get<double>(), a.at("distance").get<double>(), 1e-9);
    EXPECT_NEAR(b.at("cardinality_term").get<double>() + b.at("transport_term").get<double>(),
                b.at("total").get<double>(), 1e-9);
    EXPECT_LT(a.at("branch").get<std::size_t>(), 2u);
    EXPECT_GE(a.at("distance").get<double>(), prev);
    prev = a.at("distance").get<double>();
  }
  CliRun bad = gmmr_cli("answer --checkpoint " + q(p("run") / "best.ckpt") + " --query '(p r0 e999)'");
  EXPECT_EQ(bad.code, 2);
  EXPECT_TRUE(single_error_line(bad.err)) << bad.err;
}

TEST(Cli, GradcheckPasses) {
  CliRun r = gmmr_cli("gradcheck --d 4 --k 2 --seed 0");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("max relative error"), std::string::npos);
}
