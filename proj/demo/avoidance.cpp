// Short closed-loop demo: train a small mixture, fly one crossing scenario in both modes
// and print where each run starts to deviate and how close things got.
//
//   demo_avoidance [duration_s]

#include "ccmpc/sim_harness.hpp"
#include "ccmpc/vbgmm.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>

using namespace ccmpc;

int main(int argc, char** argv) {
  const double duration = argc > 1 ? std::atof(argv[1]) : 7.0;

  CorpusSpec cs;
  cs.n_traj = 320;
  const Corpus corpus = generate_corpus(cs);
  const Mat X = training_matrix(corpus.train, FeatureWindow{});
  FitOptions fo;
  fo.max_deletion_attempts = 3;
  const VbgmmPosterior q = fit(X, default_prior(X, 8), fo);
  std::printf("mixture: %d dominant of 8, %d iterations\n", q.dominant_count(), q.iterations);

  AcceptanceScenarioSpec spec;
  spec.duration = duration;
  spec.crossing_times = {4.0};
  spec.n_static = 4;
  Scenario sc = acceptance_scenario(spec);
  sc.duration = duration;
  const auto enc = find_encounters(sc, spec.dt, sc.detection_radius);

  const MpcConfig cfg;
  for (const PredictionMode mode : {PredictionMode::with_prediction, PredictionMode::without_prediction}) {
    const RunLog log = run_closed_loop(sc, cfg, mode == PredictionMode::with_prediction ? &q : nullptr, mode);
    if (log.aborted) {
      std::printf("%s: aborted (%s)\n", to_string(mode), log.error.c_str());
      return 1;
    }
    const RunMetrics m = compute_metrics(log, enc);
    std::printf("%-19s rms %.3f m  min static %.3f m  min moving %.3f m  onset %s  solve %.1f ms\n",
                to_string(mode), m.rms_error, m.min_static_distance,
                m.min_moving_distance.empty() ? NAN : m.min_moving_distance.front(),
                m.onset.empty() || std::isnan(m.onset.front()) ? "never" : std::to_string(m.onset.front()).c_str(),
                1e3 * m.mean_solve_time);
  }
  return 0;
}
