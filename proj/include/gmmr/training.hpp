#pragma once

// Cross-entropy over the full entity vocabulary with similarity 1/D as the
// logit, AdamW updates, validation-driven checkpointing and early stopping.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "gmmr/checkpoint.hpp"
#include "gmmr/evaluation.hpp"
#include "gmmr/logging.hpp"
#include "gmmr/model.hpp"
#include "gmmr/oracle_sampler.hpp"
#include "gmmr/rng.hpp"

namespace gmmr {

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  std::size_t d = 32;
  std::size_t k = 3;
  double learning_rate = 5e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  double weight_decay = 1e-2;
  Ablation ablation;
  std::size_t eval_every = 1;  // epochs between validation passes
  std::size_t patience = 20;   // validation passes without improvement before stopping

  void validate() const {
    if (d == 0 || k == 0 || batch_size == 0 || eval_every == 0 || patience == 0) {
      throw InputError("config: d, k, batch_size, eval_every and patience must be positive");
    }
    if (!(learning_rate >= 1e-4 && learning_rate <= 1e-3)) {
      throw InputError("config: learning_rate must lie in [1e-4, 1e-3]");
    }
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
      throw InputError("config: weight_decay must be a nonnegative number");
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["d"] = d;
    j["k"] = k;
    j["learning_rate"] = learning_rate;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["seed"] = seed;
    j["weight_decay"] = weight_decay;
    j["ablation"] = {{"no_cardinality", ablation.no_cardinality},
                     {"no_dispersion", ablation.no_dispersion},
                     {"mwd_distance", ablation.mwd_distance}};
    j["eval_every"] = eval_every;
    j["patience"] = patience;
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"d",      "k",            "learning_rate", "batch_size",
                                                   "epochs", "seed",         "weight_decay",  "ablation",
                                                   "eval_every", "patience"};
    if (!j.is_object()) throw InputError("config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw InputError("config: unknown field " + key);
      }
    }
    TrainConfig c;
    try {
      c.d = j.value("d", c.d);
      c.k = j.value("k", c.k);
      c.learning_rate = j.value("learning_rate", c.learning_rate);
      c.batch_size = j.value("batch_size", c.batch_size);
      c.epochs = j.value("epochs", c.epochs);
      c.seed = j.value("seed", c.seed);
      c.weight_decay = j.value("weight_decay", c.weight_decay);
      c.eval_every = j.value("eval_every", c.eval_every);
      c.patience = j.value("patience", c.patience);
      if (j.contains("ablation")) {
        const auto& a = j.at("ablation");
        for (const auto& [key, _] : a.items()) {
          if (key != "no_cardinality" && key != "no_dispersion" && key != "mwd_distance") {
            throw InputError("config: unknown ablation flag " + key);
          }
        }
        c.ablation.no_cardinality = a.value("no_cardinality", false);
        c.ablation.no_dispersion = a.value("no_dispersion", false);
        c.ablation.mwd_distance = a.value("mwd_distance", false);
      }
    } catch (const nlohmann::json::exception& e) {
      throw InputError("config: " + std::string(e.what()));
    }
    c.validate();
    return c;
  }
};

inline Model& apply_ablation(Model& model, const Ablation& flags) {
  model.set_ablation(flags);
  return model;
}

// ---------------------------------------------------------------------------
// Loss

/// Entities the loss treats as correct for a training sample.
inline const EntitySet& training_answers(const QuerySample& s) {
  if (s.easy_answers.empty()) {
    throw InputError("training sample has zero answers: " + s.query.dag->text());
  }
  return s.easy_answers;
}

inline std::size_t count_answers(std::span<const QuerySample> batch) {
  std::size_t m = 0;
  for (const auto& s : batch) m += training_answers(s).size();
  return m;
}

/// Sum over the sample's answers of -log softmax(1/D)[answer]; optionally
/// adds scale * gradient into `grads`.
inline double sample_nll(const Model& model, const QuerySample& s, GradStore* grads, double scale) {
  const EntitySet& answers = training_answers(s);
  Tape tape(grads != nullptr);
  Binder b(tape, grads);
  Var dist = model.query_distances(b, s.query.dag);
  Var nll = nll_logsumexp(reciprocal_clamped(dist, kDistanceFloor),
                          std::vector<std::size_t>(answers.begin(), answers.end()));
  const double value = nll.value().item();
  if (grads) tape.backward(nll, scale);
  return value;
}

/// Mean negative log-likelihood over all answers in the batch. When `grads`
/// is given, its contents are replaced by the gradient. With threads > 1 the
/// batch is split into contiguous chunks whose gradients are summed in order.
inline double batch_loss(const Model& model, std::span<const QuerySample> batch, GradStore* grads = nullptr,
                         std::size_t threads = 1) {
  if (batch.empty()) throw InputError("empty batch");
  const std::size_t m = count_answers(batch);
  const double scale = 1.0 / static_cast<double>(m);
  if (grads) grads->zero();
  threads = std::max<std::size_t>(1, std::min(threads, batch.size()));
  if (threads == 1) {
    double total = 0.0;
    for (const auto& s : batch) total += sample_nll(model, s, grads, scale);
    return total * scale;
  }
  const auto params = model.parameters().list();
  std::vector<GradStore> local;
  std::vector<double> partial(threads, 0.0);
  if (grads) local.assign(threads, GradStore(params));
  std::vector<std::thread> pool;
  const std::size_t chunk = (batch.size() + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      const std::size_t lo = w * chunk, hi = std::min(batch.size(), lo + chunk);
      for (std::size_t i = lo; i < hi; ++i) {
        partial[w] += sample_nll(model, batch[i], grads ? &local[w] : nullptr, scale);
      }
    });
  }
  for (auto& t : pool) t.join();
  double total = 0.0;
  for (std::size_t w = 0; w < threads; ++w) {
    total += partial[w];
    if (grads) *grads += local[w];
  }
  return total * scale;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-2;
};

/// Adam with decoupled weight decay: p <- p (1 - lr * wd), then the
/// bias-corrected moment step.
class AdamW {
 public:
  AdamW(const ParameterSet& params, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.rows(), p.value.cols());
      v_.emplace_back(p.value.rows(), p.value.cols());
    }
  }

  void step(ParameterSet& params, const GradStore& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double decay = 1.0 - cfg_.learning_rate * cfg_.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i].value;
      const Tensor& g = grads[i];
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        p[j] *= decay;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        p[j] -= cfg_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.epsilon);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainData {
  std::vector<QuerySample> train;
  std::vector<QuerySample> valid;
  std::size_t num_entities = 0;
  std::size_t num_relations = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> valid_ap;
  std::optional<double> valid_an;
  double wall_seconds = 0.0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.csv, best/last/state checkpoints
  bool resume = false;                           // continue from out_dir/state.ckpt
  std::size_t threads = 1;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  Model model;  // best-validation parameters (last epoch when nothing was validated)
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  std::optional<double> best_valid;
  bool early_stopped = false;
};

inline std::string metrics_csv(const std::vector<EpochLog>& log) {
  auto opt = [](const std::optional<double>& v) { return v ? fmt::format("{:.10f}", *v) : std::string(); };
  std::string out = "epoch,train_loss,valid_mrr_Ap,valid_mrr_An,wall_seconds\n";
  for (const auto& e : log) {
    out += fmt::format("{},{:.10f},{},{},{:.3f}\n", e.epoch, e.train_loss, opt(e.valid_ap), opt(e.valid_an),
                       e.wall_seconds);
  }
  return out;
}

namespace detail {

inline ModelConfig model_config_for(const TrainConfig& cfg, const TrainData& data) {
  ModelConfig mc;
  mc.num_entities = data.num_entities;
  mc.num_relations = data.num_relations;
  mc.d = cfg.d;
  mc.k = cfg.k;
  mc.seed = cfg.seed;
  mc.ablation = cfg.ablation;
  return mc;
}

struct LoopState {
  std::size_t epoch = 0;  // epochs completed
  std::optional<double> best_valid;
  std::size_t best_epoch = 0;
  std::size_t evals_since_best = 0;
  std::vector<Tensor> best_params;
  std::vector<EpochLog> log;
};

inline std::string rng_to_string(const Rng& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

inline Rng rng_from_string(const std::string& text) {
  Rng rng;
  std::istringstream s(text);
  s >> rng;
  if (!s) throw InputError("corrupt RNG state in training state file");
  return rng;
}

inline nlohmann::json log_to_json(const std::vector<EpochLog>& log) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : log) {
    out.push_back({{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"valid_ap", e.valid_ap ? nlohmann::json(*e.valid_ap) : nlohmann::json(nullptr)},
                   {"valid_an", e.valid_an ? nlohmann::json(*e.valid_an) : nlohmann::json(nullptr)}});
  }
  return out;
}

inline std::vector<EpochLog> log_from_json(const nlohmann::json& j) {
  std::vector<EpochLog> out;
  for (const auto& e : j) {
    EpochLog l;
    l.epoch = e.at("epoch").get<std::size_t>();
    l.train_loss = e.at("train_loss").get<double>();
    if (!e.at("valid_ap").is_null()) l.valid_ap = e.at("valid_ap").get<double>();
    if (!e.at("valid_an").is_null()) l.valid_an = e.at("valid_an").get<double>();
    out.push_back(l);
  }
  return out;
}

// Timings stay out of the state file so that it is byte-identical across
// runs; on resume they are recovered from the metrics.csv written alongside.
inline void restore_wall_seconds(const std::filesystem::path& csv, std::vector<EpochLog>& log) {
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  std::size_t row = 0;
  while (std::getline(in, line) && row < log.size()) {
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) break;
    try {
      log[row].wall_seconds = std::stod(line.substr(comma + 1));
    } catch (const std::exception&) {
      break;
    }
    ++row;
  }
}

inline void save_state(const std::filesystem::path& path, const TrainConfig& cfg, const Model& model,
                       const AdamW& opt, const Rng& rng, const LoopState& st) {
  std::vector<NamedTensor> tensors;
  const auto& ps = model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) tensors.push_back({"param/" + ps[i].name, &ps[i].value});
  for (std::size_t i = 0; i < ps.size(); ++i) tensors.push_back({"adam.m/" + ps[i].name, &opt.first_moments()[i]});
  for (std::size_t i = 0; i < ps.size(); ++i) tensors.push_back({"adam.v/" + ps[i].name, &opt.second_moments()[i]});
  for (std::size_t i = 0; i < st.best_params.size(); ++i) tensors.push_back({"best/" + ps[i].name, &st.best_params[i]});
  nlohmann::json meta;
  meta["train_config"] = cfg.to_json();
  meta["model"] = model.config().to_json();
  meta["step"] = opt.steps();
  meta["epoch"] = st.epoch;
  meta["rng"] = rng_to_string(rng);
  meta["best_valid"] = st.best_valid ? nlohmann::json(*st.best_valid) : nlohmann::json(nullptr);
  meta["best_epoch"] = st.best_epoch;
  meta["evals_since_best"] = st.evals_since_best;
  meta["log"] = log_to_json(st.log);
  write_checkpoint(path, tensors, meta);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

inline std::vector<Tensor> snapshot(const Model& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.value);
  return out;
}

inline void restore(Model& m, const std::vector<Tensor>& values) {
  auto& ps = m.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].value = values[i];
}

}  // namespace detail

inline TrainResult train(const TrainConfig& cfg, const TrainData& data, const TrainOptions& opts = {}) {
  cfg.validate();
  if (data.train.empty() && cfg.epochs > 0) throw InputError("training split is empty");
  for (const auto& s : data.train) training_answers(s);

  Model model(detail::model_config_for(cfg, data));
  AdamW opt(model.parameters(), {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(derive_seed(cfg.seed, "batches"));
  detail::LoopState st;

  const auto& out_dir = opts.out_dir;
  if (out_dir) std::filesystem::create_directories(*out_dir);
  if (opts.resume) {
    if (!out_dir) throw InputError("resume needs an output directory");
    const Checkpoint ck = read_checkpoint(*out_dir / "state.ckpt");
    const TrainConfig saved = TrainConfig::from_json(ck.meta.at("train_config"));
    if (saved.d != cfg.d || saved.k != cfg.k) throw InputError("resume: d/k differ from the saved state");
    auto& ps = model.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      ps[i].value = ck.at("param/" + ps[i].name);
      opt.first_moments()[i] = ck.at("adam.m/" + ps[i].name);
      opt.second_moments()[i] = ck.at("adam.v/" + ps[i].name);
      if (ck.tensors.count("best/" + ps[i].name)) st.best_params.push_back(ck.at("best/" + ps[i].name));
    }
    opt.set_steps(ck.meta.at("step").get<std::uint64_t>());
    rng = detail::rng_from_string(ck.meta.at("rng").get<std::string>());
    st.epoch = ck.meta.at("epoch").get<std::size_t>();
    if (!ck.meta.at("best_valid").is_null()) st.best_valid = ck.meta.at("best_valid").get<double>();
    st.best_epoch = ck.meta.at("best_epoch").get<std::size_t>();
    st.evals_since_best = ck.meta.at("evals_since_best").get<std::size_t>();
    st.log = detail::log_from_json(ck.meta.at("log"));
    detail::restore_wall_seconds(*out_dir / "metrics.csv", st.log);
  }

  const auto params = model.parameters().list();
  GradStore grads(params);
  std::vector<std::size_t> order(data.train.size());
  std::vector<QuerySample> batch;
  const auto started = std::chrono::steady_clock::now();
  const double wall_offset = st.log.empty() ? 0.0 : st.log.back().wall_seconds;
  bool early_stopped = false;

  while (st.epoch < cfg.epochs && !early_stopped) {
    const std::size_t epoch = st.epoch + 1;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, rng);
    double nll_sum = 0.0;
    std::size_t answer_sum = 0;
    for (std::size_t lo = 0, batch_id = 0; lo < order.size(); lo += cfg.batch_size, ++batch_id) {
      batch.clear();
      for (std::size_t i = lo; i < std::min(order.size(), lo + cfg.batch_size); ++i) {
        batch.push_back(data.train[order[i]]);
      }
      const double loss = batch_loss(model, batch, &grads, opts.threads);
      if (!std::isfinite(loss)) {
        double gmax = 0.0;
        for (std::size_t i = 0; i < grads.size(); ++i)
          for (double g : grads[i].values()) gmax = std::max(gmax, std::abs(g));
        throw TrainingError(fmt::format("non-finite loss at epoch {} batch {} (max |gradient| {:.6g})", epoch,
                                        batch_id, gmax));
      }
      opt.step(model.parameters(), grads);
      const std::size_t m = count_answers(batch);
      nll_sum += loss * static_cast<double>(m);
      answer_sum += m;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = answer_sum ? nll_sum / static_cast<double>(answer_sum) : 0.0;
    const bool validate_now = !data.valid.empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
    if (validate_now) {
      const MetricsReport rep = evaluate(data.valid, model_scorer(model), opts.threads);
      entry.valid_ap = rep.A_p;
      entry.valid_an = rep.A_n;
      const std::optional<double> score = rep.A_p ? rep.A_p : rep.A_n;
      if (score && (!st.best_valid || *score > *st.best_valid)) {
        st.best_valid = score;
        st.best_epoch = epoch;
        st.evals_since_best = 0;
        st.best_params = detail::snapshot(model);
      } else if (++st.evals_since_best >= cfg.patience) {
        early_stopped = true;
      }
    }
    entry.wall_seconds =
        wall_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    st.log.push_back(entry);
    st.epoch = epoch;
    logging::info("epoch {} loss {:.6f} valid A_p {}", epoch, entry.train_loss,
                  entry.valid_ap ? fmt::format("{:.4f}", *entry.valid_ap) : std::string("-"));
    if (opts.on_epoch) opts.on_epoch(entry);
    if (out_dir) {
      detail::write_text(*out_dir / "metrics.csv", metrics_csv(st.log));
      detail::save_state(*out_dir / "state.ckpt", cfg, model, opt, rng, st);
    }
  }

  if (out_dir) {
    model.save(*out_dir / "last.ckpt", {{"epoch", st.epoch}});
    detail::write_text(*out_dir / "metrics.csv", metrics_csv(st.log));
  }
  TrainResult result{std::move(model), st.log, st.best_epoch, st.best_valid, early_stopped};
  if (!st.best_params.empty()) detail::restore(result.model, st.best_params);
  else result.best_epoch = st.epoch;
  if (out_dir) result.model.save(*out_dir / "best.ckpt", {{"epoch", result.best_epoch}});
  return result;
}

}  // namespace gmmr
