// chance_mpc: corpus generation, training, prediction evaluation and closed-loop runs.
//
// Exit codes: 0 ok, 1 validation or usage error, 2 runtime failure, 3 strictness violation.

#include "ccmpc/io.hpp"
#include "ccmpc/run_config.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <optional>

using namespace ccmpc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitStrict = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool strict = false;
};

RunConfig load_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? run_config_from_json(Json::object()) : load_run_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.scenario.seed = *c.seed;
  }
  if (!c.out.empty()) cfg.out = c.out;
  cfg.strict = cfg.strict || c.strict;
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

int cmd_gen_data(const Common& c) {
  RunConfig cfg = load_config(c);
  if (c.seed) cfg.corpus.seed = *c.seed;
  cfg.corpus.validate();
  const Corpus corpus = generate_corpus(cfg.corpus);
  const CorpusManifest m = write_corpus(cfg.out, corpus, cfg.corpus.seed);
  std::printf("wrote %zu trajectories (%zu train, %zu test) to %s, digest %s\n", m.count, m.n_train, m.n_test,
              cfg.out.c_str(), m.digest.c_str());
  return kExitOk;
}

int cmd_train(const Common& c, const std::string& corpus_dir, const std::string& model_path) {
  const RunConfig cfg = load_config(c);
  const Corpus corpus = read_corpus(corpus_dir);
  const FeatureWindow w = cfg.feature_window();
  const Mat X = training_matrix(corpus.train, w);
  const auto t0 = std::chrono::steady_clock::now();
  const VbgmmPosterior q = fit(X, make_prior(X, cfg.prior), make_fit_options(cfg.prior, cfg.seed));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const fs::path mp = model_path.empty() ? fs::path(cfg.out) / "model.json" : fs::path(model_path);
  Json rep = training_report(q);
  rep["seconds"] = secs;
  rep["corpus"] = corpus_dir;
  write_json(mp.parent_path() / "training_report.json", rep);
  if (!q.converged) {
    std::fprintf(stderr, "training did not converge in %d iterations; report kept, no model written\n", q.iterations);
    return kExitRuntime;
  }
  save_model(mp, q);
  std::printf("K_init %d -> %d dominant components, %d iterations, %.1f s; model %s\n", q.prior.K_init,
              q.dominant_count(), q.iterations, secs, mp.string().c_str());
  return kExitOk;
}

int cmd_predict_eval(const Common& c, const std::string& corpus_dir, const std::string& model_path) {
  const RunConfig cfg = load_config(c);
  if (model_path.empty()) throw InputError("predict-eval needs --model");
  const Corpus corpus = read_corpus(corpus_dir);
  const VbgmmPosterior q = load_model(model_path);
  const FeatureWindow w = cfg.feature_window();
  const ObstaclePredictor pr(q, w);
  const int steps = static_cast<int>(std::llround((w.length - w.history_len()) / w.dt));
  double se_end = 0.0, se_all = 0.0;
  std::size_t n_all = 0;
  std::string tube = tube_csv_header();
  for (std::size_t i = 0; i < corpus.test.size(); ++i) {
    const auto& tr = corpus.test[i];
    const double tn = tr.times.front() + w.history_len();
    const auto r = pr.predict(tr.slice(tr.times.front(), tn), tn, steps);
    for (std::size_t k = 0; k < r.times.size(); ++k) {
      const double e2 = (r.means[k] - tr.position_at(r.times[k])).squaredNorm();
      se_all += e2;
      ++n_all;
      if (k + 1 == r.times.size()) se_end += e2;
    }
    if (i < 10) tube += tube_csv_rows(i, tn, r, tr);
  }
  const double n = static_cast<double>(corpus.test.size());
  const Json j = {{"test_trajectories", corpus.test.size()},
                  {"horizon_steps", steps},
                  {"rms_horizon_end", std::sqrt(se_end / n)},
                  {"rms_all_steps", std::sqrt(se_all / static_cast<double>(n_all))}};
  const fs::path out(cfg.out);
  write_json(out / "predict_eval.json", j);
  write_text(out / "prediction_tube.csv", tube);
  std::printf("test RMS at horizon end %.4f m, over all steps %.4f m\n", j["rms_horizon_end"].get<double>(),
              j["rms_all_steps"].get<double>());
  return kExitOk;
}

struct SimResult {
  RunLog log;
  RunMetrics metrics;
  Json summary;
};

SimResult simulate(const RunConfig& cfg, const Scenario& sc, const VbgmmPosterior* q, PredictionMode mode,
                   const fs::path& out) {
  SimResult r;
  r.log = run_closed_loop(sc, cfg.mpc.to_config(), q, mode, cfg.run_options());
  const auto enc = find_encounters(sc, cfg.quad.dt, sc.detection_radius);
  r.metrics = compute_metrics(r.log, enc);
  r.summary = summary_json(r.metrics, r.log, enc);
  r.summary["scenario_digest"] = scenario_digest(sc);
  r.summary["seed"] = cfg.seed;
  const std::string stem = std::string("run_") + to_string(mode);
  write_text(out / (stem + ".csv"), runlog_csv(r.log));
  write_json(out / (stem + "_summary.json"), r.summary);
  return r;
}

std::optional<VbgmmPosterior> model_for(PredictionMode mode, const std::string& model_path) {
  if (mode != PredictionMode::with_prediction) return std::nullopt;
  if (model_path.empty()) throw InputError("with-prediction mode needs --model");
  return load_model(model_path);
}

int cmd_simulate(const Common& c, const std::string& model_path, const std::string& mode_s) {
  const RunConfig cfg = load_config(c);
  const PredictionMode mode = parse_mode(mode_s);
  const auto q = model_for(mode, model_path);
  const Scenario sc = cfg.make_scenario();
  const SimResult r = simulate(cfg, sc, q ? &*q : nullptr, mode, cfg.out);
  const auto& m = r.metrics;
  std::printf("%s: %zu steps, RMS %.3f m, min static %.3f m, mean solve %.4f s, relaxed %zu, fallback %zu\n",
              to_string(mode), m.steps, m.rms_error, m.min_static_distance, m.mean_solve_time, m.relaxed_steps,
              m.fallback_steps);
  if (m.aborted) {
    std::fprintf(stderr, "run aborted: %s\n", r.log.error.c_str());
    return kExitRuntime;
  }
  if (cfg.strict && m.fallback_steps > 0) {
    std::fprintf(stderr, "strict: %zu fallback steps\n", m.fallback_steps);
    return kExitStrict;
  }
  return kExitOk;
}

int cmd_compare(const Common& c, const std::string& model_path) {
  const RunConfig cfg = load_config(c);
  const auto q = model_for(PredictionMode::with_prediction, model_path);
  const Scenario sc = cfg.make_scenario();
  const fs::path out(cfg.out);
  const SimResult w = simulate(cfg, sc, &*q, PredictionMode::with_prediction, out);
  const SimResult wo = simulate(cfg, sc, nullptr, PredictionMode::without_prediction, out);

  Json enc = Json::array();
  bool onset_ok = true, any_earlier = false;
  for (std::size_t i = 0; i < w.metrics.onset.size(); ++i) {
    const double a = w.metrics.onset[i], b = wo.metrics.onset[i];
    // an encounter the run never reacts to counts as onset at infinity
    const double ai = std::isnan(a) ? kInf : a, bi = std::isnan(b) ? kInf : b;
    onset_ok &= ai <= bi;
    any_earlier |= ai < bi;
    enc.push_back({{"obstacle", i + 1}, {"onset_with", nan_to_null(a)}, {"onset_without", nan_to_null(b)}});
  }
  const bool rms_ok = w.metrics.rms_error <= wo.metrics.rms_error;
  const Json j = {{"seed", cfg.seed},
                  {"scenario_digest", {{"with_prediction", w.summary["scenario_digest"]},
                                       {"without_prediction", wo.summary["scenario_digest"]}}},
                  {"encounters", enc},
                  {"onset_with_le_without", onset_ok},
                  {"onset_with_earlier_somewhere", any_earlier},
                  {"rms_with", w.metrics.rms_error},
                  {"rms_without", wo.metrics.rms_error},
                  {"rms_with_le_without", rms_ok},
                  {"min_static_with", w.metrics.min_static_distance},
                  {"min_static_without", wo.metrics.min_static_distance},
                  {"min_moving_with", w.metrics.min_moving_distance},
                  {"min_moving_without", wo.metrics.min_moving_distance}};
  write_json(out / "comparison.json", j);
  std::printf("RMS with %.3f / without %.3f; onset no later with prediction: %s\n", w.metrics.rms_error,
              wo.metrics.rms_error, onset_ok ? "yes" : "no");
  if (w.metrics.aborted || wo.metrics.aborted) return kExitRuntime;
  if (cfg.strict && (!onset_ok || !rms_ok || w.metrics.fallback_steps > 0)) return kExitStrict;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chance-constrained MPC with learned obstacle prediction"};
  app.require_subcommand(1);
  Common common;
  std::string corpus_dir, model_path, mode = "with-prediction";

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run configuration (defaults when omitted)");
    sub->add_option("--seed", common.seed, "override the configured seed");
    sub->add_option("--out", common.out, "output directory");
    sub->add_flag("--strict", common.strict, "nonzero exit on fallback steps or failed comparisons");
  };
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic trajectory corpus");
  add_common(gen);
  auto* train = app.add_subcommand("train", "fit the mixture model to a corpus");
  add_common(train);
  train->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train->add_option("--model", model_path, "model file to write (default <out>/model.json)");
  auto* peval = app.add_subcommand("predict-eval", "prediction RMS on the test split");
  add_common(peval);
  peval->add_option("--corpus", corpus_dir, "corpus directory")->required();
  peval->add_option("--model", model_path, "trained model")->required();
  auto* sim = app.add_subcommand("simulate", "closed-loop run on the acceptance scenario");
  add_common(sim);
  sim->add_option("--model", model_path, "trained model (needed with prediction)");
  sim->add_option("--mode", mode, "with-prediction | without-prediction");
  auto* cmp = app.add_subcommand("compare", "run both modes on the same scenario");
  add_common(cmp);
  cmp->add_option("--model", model_path, "trained model")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*train) return cmd_train(common, corpus_dir, model_path);
    if (*peval) return cmd_predict_eval(common, corpus_dir, model_path);
    if (*sim) return cmd_simulate(common, model_path, mode);
    if (*cmp) return cmd_compare(common, model_path);
  } catch (const InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitValidation;
}
