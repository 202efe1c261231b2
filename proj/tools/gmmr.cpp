// gmmr: split / generate / train / eval / answer / gradcheck / report.
// Failures print one line "error: <message>" on stderr. Exit 2 means bad
// input (flags, files, ids); exit 1 means the run itself failed.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "gmmr/evaluation.hpp"
#include "gmmr/gradcheck.hpp"
#include "gmmr/kg_store.hpp"
#include "gmmr/logging.hpp"
#include "gmmr/model.hpp"
#include "gmmr/oracle_sampler.hpp"
#include "gmmr/training.hpp"

namespace fs = std::filesystem;
using namespace gmmr;

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

nlohmann::json read_json_file(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw InputError(std::string(what) + " not found: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed ") + what + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct SplitArgs {
  std::string triples, out;
  std::uint64_t seed = 0;
  double hidden_fraction = 0.1;
};

int run_split(const SplitArgs& a) {
  if (!fs::exists(a.triples)) throw InputError("triples file not found: " + a.triples);
  if (!(a.hidden_fraction >= 0.0 && a.hidden_fraction < 1.0)) {
    throw InputError("--hidden-fraction must lie in [0, 1)");
  }
  Graph g = load_triples(a.triples);
  SplitGraphs s = make_splits(g, a.seed, a.hidden_fraction);
  if (!verify_containment(s.train, s.valid, s.test)) throw Error("split violates train ⊆ valid ⊆ test");
  write_splits(s, a.out, a.seed, a.hidden_fraction);
  fmt::print("train {} valid {} test {} triples; containment verified\n", s.train.num_triples(),
             s.valid.num_triples(), s.test.num_triples());
  return 0;
}

struct GenerateArgs {
  std::string splits, templates, out;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::size_t retry_budget = kDefaultRetryBudget;
};

int run_generate(const GenerateArgs& a, std::size_t threads) {
  std::vector<TemplateCount> counts;
  const auto names = a.templates.empty() ? std::vector<std::string>{} : split_list(a.templates);
  if (names.empty()) {
    for (const auto& t : all_templates()) counts.push_back({t.name, a.count});
  } else {
    for (const auto& n : names) {
      find_template(n);  // throws InputError naming the unknown template
      counts.push_back({n, a.count});
    }
  }
  SplitGraphs g = load_splits(a.splits);
  Dataset ds = generate_dataset(counts, g, a.seed, a.retry_budget, threads);
  write_dataset(ds, a.out);
  fmt::print("train {} valid {} test {} samples\n", ds.train.size(), ds.valid.size(), ds.test.size());
  return 0;
}

TrainData load_train_data(const fs::path& dir) {
  DatasetInfo info = read_dataset_info(dir);
  VocabularyLimits lim{info.num_entities, info.num_relations};
  return {read_split(dir, Split::train, lim), read_split(dir, Split::valid, lim), info.num_entities,
          info.num_relations};
}

struct TrainArgs {
  std::string config, data, out;
  bool resume = false;
};

int run_train(const TrainArgs& a, std::size_t threads) {
  TrainConfig cfg = TrainConfig::from_json(read_json_file(a.config, "config"));
  TrainData data = load_train_data(a.data);
  TrainOptions opt{fs::path(a.out), a.resume, threads, {}};
  TrainResult r = train(cfg, data, opt);
  fmt::print("epochs {} best epoch {} best valid A_p {}{}\n", r.log.size(), r.best_epoch,
             r.best_valid ? fmt::format("{:.6f}", *r.best_valid) : std::string("n/a"),
             r.early_stopped ? " (early stop)" : "");
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, split = "test", out;
  bool oracle = false;
};

int run_eval(const EvalArgs& a, std::size_t threads) {
  if (a.checkpoint.empty() == !a.oracle) throw InputError("give exactly one of --checkpoint or --oracle");
  Split split;
  if (a.split == "train") split = Split::train;
  else if (a.split == "valid") split = Split::valid;
  else if (a.split == "test") split = Split::test;
  else throw InputError("--split must be train, valid or test");

  DatasetInfo info = read_dataset_info(a.data);
  std::vector<QuerySample> samples = read_split(a.data, split, VocabularyLimits{info.num_entities, info.num_relations});
  // training queries have no hard answers; rank everything they know
  if (split == Split::train) samples = as_training_targets(samples);

  MetricsReport rep;
  if (a.oracle) {
    rep = evaluate(samples, oracle_scorer(info.num_entities), threads);
  } else {
    Model m = Model::load(a.checkpoint);
    if (m.num_entities() != info.num_entities) {
      throw InputError(fmt::format("checkpoint has {} entities, dataset has {}", m.num_entities(),
                                   info.num_entities));
    }
    rep = evaluate(samples, model_scorer(m), threads);
  }
  const std::string text = rep.to_json().dump(2) + "\n";
  if (a.out.empty()) {
    std::fputs(text.c_str(), stdout);
  } else {
    write_text(a.out, text);
  }
  return 0;
}

struct AnswerArgs {
  std::string checkpoint, query;
  std::size_t top = 10;
  bool explain = false;
};

int run_answer(const AnswerArgs& a) {
  Model m = Model::load(a.checkpoint);
  const auto& mc = m.config();
  Query q = parse_query(a.query, VocabularyLimits{mc.num_entities, mc.num_relations});
  const std::vector<double> dist = m.distances(q);
  std::vector<EntityId> order(dist.size());
  std::iota(order.begin(), order.end(), EntityId{0});
  std::stable_sort(order.begin(), order.end(), [&](EntityId x, EntityId y) { return dist[x] < dist[y]; });
  order.resize(std::min(a.top, order.size()));

  const std::vector<Query> branches = to_dnf(q);
  std::vector<GmmEmbedding> embedded;
  for (const Query& b : branches) embedded.push_back(m.embed(b));

  nlohmann::ordered_json out;
  out["query"] = q->text();
  out["branches"] = nlohmann::ordered_json::array();
  for (const Query& b : branches) out["branches"].push_back(b->text());
  out["answers"] = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < order.size(); ++r) {
    nlohmann::ordered_json e;
    e["rank"] = r + 1;
    e["entity"] = "e" + std::to_string(order[r]);
    e["distance"] = dist[order[r]];
    if (a.explain) {
      BranchChoice c = closest_branch(m.entity(order[r]), embedded, m.ablation());
      e["branch"] = c.branch;
      e["branch_query"] = branches[c.branch]->text();
      e["breakdown"] = c.breakdown.to_json();
    }
    out["answers"].push_back(e);
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

struct GradcheckArgs {
  std::size_t d = 4, k = 2;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
};

int run_gradcheck(const GradcheckArgs& a) {
  if (a.d == 0 || a.k == 0) throw InputError("--d and --k must be positive");
  GradCheckSuiteConfig cfg;
  cfg.d = a.d;
  cfg.k = a.k;
  cfg.seed = a.seed;
  double worst = 0.0;
  for (const auto& r : run_gradcheck_suite(cfg)) {
    fmt::print("{:<20} max_rel_error {:.3e}  {:>5} entries ({} at kinks)  worst {} (analytic {:.6e}, numeric {:.6e})\n",
               r.name, r.max_rel_error, r.checked, r.at_kink, r.worst, r.worst_analytic, r.worst_numeric);
    worst = std::max(worst, r.max_rel_error);
  }
  const bool ok = worst <= a.tolerance;
  fmt::print("max relative error {:.3e} {} {:.0e}\n", worst, ok ? "<=" : ">", a.tolerance);
  if (!ok) throw Error(fmt::format("gradient check failed: {:.3e} > {:.0e}", worst, a.tolerance));
  return 0;
}

struct ReportArgs {
  std::string metrics, format = "csv";
};

int run_report(const ReportArgs& a) {
  if (a.format != "csv" && a.format != "json") throw InputError("--format must be csv or json");
  MetricsReport rep;
  try {
    rep = MetricsReport::from_json(read_json_file(a.metrics, "metrics file"));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed metrics file: ") + e.what());
  }
  if (a.format == "csv") {
    std::fputs(rep.to_csv().c_str(), stdout);
  } else {
    std::cout << rep.to_json().dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian-mixture query embeddings over knowledge graphs"};
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "worker threads for generate, train and eval")
      ->check(CLI::PositiveNumber);

  SplitArgs sa;
  auto* split = app.add_subcommand("split", "split a triples file into train/valid/test graphs");
  split->add_option("--triples", sa.triples, "tab-separated head/relation/tail file")->required();
  split->add_option("--out", sa.out, "output directory")->required();
  split->add_option("--seed", sa.seed, "split seed");
  split->add_option("--hidden-fraction", sa.hidden_fraction, "fraction of training edges hidden");

  GenerateArgs ga;
  auto* generate = app.add_subcommand("generate", "sample query datasets from a split");
  generate->add_option("--splits", ga.splits, "split manifest.json")->required();
  generate->add_option("--templates", ga.templates, "comma-separated structures (default all 14)");
  generate->add_option("--count", ga.count, "samples per template and split")->required();
  generate->add_option("--seed", ga.seed, "generation seed");
  generate->add_option("--retry-budget", ga.retry_budget, "attempts per sample before giving up");
  generate->add_option("--out", ga.out, "output directory")->required();

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "train a model");
  trainc->add_option("--config", ta.config, "TrainConfig JSON")->required();
  trainc->add_option("--data", ta.data, "dataset directory from generate")->required();
  trainc->add_option("--out", ta.out, "run directory")->required();
  trainc->add_flag("--resume", ta.resume, "continue from <out>/state.ckpt");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "filtered MRR / Hits@K of a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "model checkpoint");
  eval->add_flag("--oracle", ea.oracle, "score with the perfect-answer stub instead of a model");
  eval->add_option("--data", ea.data, "dataset directory")->required();
  eval->add_option("--split", ea.split, "train | valid | test");
  eval->add_option("--out", ea.out, "write metrics JSON here instead of stdout");

  AnswerArgs aa;
  auto* answer = app.add_subcommand("answer", "rank entities for one query");
  answer->add_option("--checkpoint", aa.checkpoint, "model checkpoint")->required();
  answer->add_option("--query", aa.query, "s-expression, e.g. \"(p r0 e3)\"")->required();
  answer->add_option("--top", aa.top, "number of entities to list")->check(CLI::PositiveNumber);
  answer->add_flag("--explain", aa.explain, "per-entity distance breakdown and chosen DNF branch");

  GradcheckArgs gc;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of all gradients");
  grad->add_option("--d", gc.d, "embedding dimension");
  grad->add_option("--k", gc.k, "mixture components");
  grad->add_option("--seed", gc.seed, "seed for inputs and parameters");
  grad->add_option("--tolerance", gc.tolerance, "maximum relative error");

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "render a metrics JSON");
  report->add_option("--metrics", ra.metrics, "metrics JSON from eval")->required();
  report->add_option("--format", ra.format, "csv | json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  try {
    if (*split) return run_split(sa);
    if (*generate) return run_generate(ga, threads);
    if (*trainc) return run_train(ta, threads);
    if (*eval) return run_eval(ea, threads);
    if (*answer) return run_answer(aa);
    if (*grad) return run_gradcheck(gc);
    if (*report) return run_report(ra);
  } catch (const InputError& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return 1;
}
