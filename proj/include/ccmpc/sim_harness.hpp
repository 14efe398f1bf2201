#pragma once

// Closed-loop experiments: scripted obstacles, reference tracking with the
// chance-constrained controller on the nonlinear plant, per-step logging.

#include "ccmpc/corpus.hpp"
#include "ccmpc/nmpc.hpp"
#include "ccmpc/prediction.hpp"
#include "ccmpc/quad_model.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ccmpc {

inline constexpr double kDistanceCap = 10.0;
inline constexpr std::size_t kMaxLoggedMoving = 10;

struct Scenario {
  std::vector<Vec3> static_obstacles;
  std::vector<TrajectorySeries> moving_obstacles;  // scripts start early enough to supply history at t = 0
  TrajectorySeries reference;
  double duration = 20.0;
  double detection_radius = 10.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(duration > 0.0)) throw InputError("scenario: duration must be positive");
    if (!(detection_radius > 0.0)) throw InputError("scenario: detection_radius must be positive");
    reference.validate();
    for (const auto& m : moving_obstacles) m.validate();
    for (const auto& o : static_obstacles)
      if (!o.allFinite()) throw InputError("scenario: non-finite static obstacle");
  }
};

enum class PredictionMode { with_prediction, without_prediction };

inline const char* to_string(PredictionMode m) {
  return m == PredictionMode::with_prediction ? "with-prediction" : "without-prediction";
}

inline PredictionMode parse_mode(const std::string& s) {
  if (s == "with-prediction" || s == "with_prediction") return PredictionMode::with_prediction;
  if (s == "without-prediction" || s == "without_prediction") return PredictionMode::without_prediction;
  throw InputError("unknown mode '" + s + "' (expected with-prediction or without-prediction)");
}

struct StepRecord {
  double t = 0.0;
  Vec state;    // 12, at t
  Vec control;  // 4, applied deviation from hover thrust over [t, t + dt)
  Vec3 error = Vec3::Zero();  // position minus reference at t
  double d_static = kDistanceCap;
  std::vector<double> d_moving;  // capped at kDistanceCap
  SolveStatus status = SolveStatus::optimal;
  int relax_level = 0;
  double t_comp = 0.0;
  double value_function = 0.0;
  StabilityMode stability_mode = StabilityMode::absent;
  double chance_residual = kInf;  // worst halfspace residual of the realized next position, detected obstacles only
};

struct RunLog {
  std::vector<StepRecord> records;
  PredictionMode mode = PredictionMode::with_prediction;
  double dt = 0.05;
  std::size_t n_moving = 0;
  bool aborted = false;
  std::string error;
};

/// Reference position and velocity at time t, as a 12-vector with level attitude.
inline Vec reference_state(const TrajectorySeries& ref, double t, double dt) {
  Vec r = Vec::Zero(kNx);
  r.head(3) = ref.position_at(t);
  const double t_end = ref.times.back();
  if (t < t_end) r.segment(3, 3) = (ref.position_at(std::min(t + dt, t_end)) - ref.position_at(t)) / dt;
  return r;
}

/// Straight constant-speed line sampled at dt.
inline TrajectorySeries straight_reference(const Vec3& start, const Vec3& velocity, double duration, double dt) {
  TrajectorySeries tr;
  const int n = static_cast<int>(std::llround(duration / dt));
  for (int k = 0; k <= n; ++k) {
    tr.times.push_back(k * dt);
    tr.positions.push_back(start + (k * dt) * velocity);
  }
  return tr;
}

struct RunOptions {
  QuadParams params{};
  Integrator plant = Integrator::rk4;
  FeatureWindow window{};
};

class ClosedLoop {
 public:
  ClosedLoop(const Scenario& sc, const MpcConfig& cfg, const VbgmmPosterior* posterior, PredictionMode mode,
             RunOptions opt = {})
      : sc_(sc), cfg_(cfg), mode_(mode), opt_(opt) {
    sc_.validate();
    opt_.params.validate();
    opt_.window.dt = opt_.params.dt;
    if (mode_ == PredictionMode::with_prediction) {
      if (!posterior) throw InputError("closed loop: with-prediction mode needs a trained model");
      predictor_.emplace(*posterior, opt_.window);
    }
    const QuadState hover{};
    const auto dm = discretize(sdc_linearize(hover, opt_.params), opt_.params);
    cfg_.complete(kNx, kNu);
    if (cfg_.P.size() == 0) cfg_.P = solve_dare(dm.Ad, dm.Bd, cfg_.Q, cfg_.R);
    cfg_.validate(kNx, kNu);
  }

  const MpcConfig& config() const { return cfg_; }

  /// Obstacle regions seen by the controller at time t from the host position.
  std::vector<PredictedRegionSequence> moving_regions(double t, const Vec3& host) const {
    std::vector<PredictedRegionSequence> out;
    const double dt = opt_.params.dt;
    for (const auto& m : sc_.moving_obstacles) {
      const Vec3 now = m.position_at(t);
      if ((now - host).norm() > sc_.detection_radius) continue;
      if (predictor_) {
        const double h0 = t - opt_.window.history_len() - dt;
        out.push_back(predictor_->predict(m.slice(h0, t), t, cfg_.N));
      } else {
        PredictedRegionSequence r;
        for (int k = 1; k <= cfg_.N; ++k) {
          r.times.push_back(t + k * dt);
          r.means.push_back(now);
          r.covs.push_back(Mat3::Zero());
        }
        out.push_back(std::move(r));
      }
    }
    return out;
  }

  RunLog run() const {
    RunLog log;
    log.mode = mode_;
    const double dt = opt_.params.dt;
    log.dt = dt;
    log.n_moving = std::min(sc_.moving_obstacles.size(), kMaxLoggedMoving);
    const int steps = static_cast<int>(std::llround(sc_.duration / dt));
    const Vec4 u_eq = opt_.params.u_eq();

    QuadState s;
    {
      const Vec r0 = reference_state(sc_.reference, 0.0, dt);
      s.p = r0.head(3);
      s.v = r0.segment(3, 3);
    }
    Vec u_prev = Vec::Zero(kNu);
    std::optional<NmpcSolution> prev;
    for (int i = 0; i < steps; ++i) {
      const double t = i * dt;
      StepRecord rec;
      rec.t = t;
      rec.state = s.to_vector();
      rec.error = s.p - sc_.reference.position_at(t);
      rec.d_static = kDistanceCap;
      for (const auto& o : sc_.static_obstacles) rec.d_static = std::min(rec.d_static, (s.p - o).norm());
      for (std::size_t j = 0; j < log.n_moving; ++j)
        rec.d_moving.push_back(std::min(kDistanceCap, (s.p - sc_.moving_obstacles[j].position_at(t)).norm()));
      try {
        NmpcProblem prob;
        prob.x0 = rec.state;
        for (int k = 0; k <= cfg_.N; ++k) prob.reference.push_back(reference_state(sc_.reference, t + k * dt, dt));
        const auto dm = discretize(sdc_linearize(s, opt_.params), opt_.params);
        prob.model = {dm.Ad, dm.Bd, dm.d};
        prob.u_prev = u_prev;
        for (const auto& o : sc_.static_obstacles)
          if ((o - s.p).norm() <= sc_.detection_radius) prob.static_obstacles.push_back(o);
        prob.moving_regions = moving_regions(t, s.p);
        if (prev) prob.prev = &*prev;
        NmpcSolution sol = solve_step(prob, cfg_);
        if (log_level() >= LogLevel::debug)
          ccmpc::log(LogLevel::debug, "t=" + std::to_string(t) + " status=" + to_string(sol.status) + " level=" +
                                   std::to_string(sol.relax_level) + " attempts=" + std::to_string(sol.attempts) +
                                   " sqp=" + std::to_string(sol.sqp_iterations) + " t_comp=" + std::to_string(sol.solve_time) +
                                   " moving=" + std::to_string(prob.moving_regions.size()) +
                                   " static=" + std::to_string(prob.static_obstacles.size()));

        rec.control = sol.controls.front();
        rec.status = sol.status;
        rec.relax_level = sol.relax_level;
        rec.t_comp = sol.solve_time;
        rec.value_function = sol.value_function;
        rec.stability_mode = sol.stability_mode;

        s = step(s, u_eq + Vec4(rec.control), opt_.params, opt_.plant, dt);
        for (const auto& reg : prob.moving_regions) {
          const auto ell = ellipsoid_from_gaussian(reg.means[0], reg.covs[0], cfg_.confidence,
                                                   cfg_.inflate_moving ? cfg_.d_safe : 0.0);
          const auto hs = chance_to_halfspace(s.p, ell, cfg_.phi);
          rec.chance_residual = std::min(rec.chance_residual, hs.inside ? -kInf : hs.residual(s.p));
        }
        u_prev = rec.control;
        if (sol.status == SolveStatus::fallback) {
          prev.reset();  // the held input has no optimal plan to compare against
        } else {
          prev = std::move(sol);
        }
        log.records.push_back(std::move(rec));
      } catch (const std::exception& e) {
        if (!rec.control.size()) rec.control = Vec::Zero(kNu);
        log.records.push_back(std::move(rec));
        log.aborted = true;
        log.error = e.what();
        warn(std::string("closed loop aborted at t = ") + std::to_string(t) + ": " + e.what());
        break;
      }
    }
    return log;
  }

 private:
  Scenario sc_;
  MpcConfig cfg_;
  PredictionMode mode_;
  RunOptions opt_;
  std::optional<ObstaclePredictor> predictor_;
};

inline RunLog run_closed_loop(const Scenario& sc, const MpcConfig& cfg, const VbgmmPosterior* posterior,
                              PredictionMode mode, const RunOptions& opt = {}) {
  return ClosedLoop(sc, cfg, posterior, mode, opt).run();
}

// ---------------------------------------------------------------------------
// Metrics

struct Encounter {
  std::size_t obstacle = 0;
  double t_begin = 0.0;   // obstacle enters the detection radius of the reference
  double t_closest = 0.0;  // closest approach to the reference
  double d_closest = kInf;
};

/// One encounter per moving obstacle that comes within `radius` of the reference.
inline std::vector<Encounter> find_encounters(const Scenario& sc, double dt, double radius = 10.0,
                                              double hit_distance = 4.0) {
  std::vector<Encounter> out;
  const int steps = static_cast<int>(std::llround(sc.duration / dt));
  for (std::size_t j = 0; j < sc.moving_obstacles.size(); ++j) {
    Encounter e;
    e.obstacle = j;
    for (int i = 0; i < steps; ++i) {
      const double t = i * dt;
      const double d = (sc.moving_obstacles[j].position_at(t) - sc.reference.position_at(t)).norm();
      if (d < e.d_closest) {
        e.d_closest = d;
        e.t_closest = t;
      }
    }
    if (e.d_closest > hit_distance) continue;
    e.t_begin = e.t_closest;
    for (int i = static_cast<int>(std::llround(e.t_closest / dt)); i >= 0; --i) {
      const double t = i * dt;
      if ((sc.moving_obstacles[j].position_at(t) - sc.reference.position_at(t)).norm() > radius) break;
      e.t_begin = t;
    }
    out.push_back(e);
  }
  return out;
}

struct RunMetrics {
  std::size_t steps = 0;
  double rms_error = 0.0;
  double max_error = 0.0;
  double min_static_distance = kDistanceCap;
  std::vector<double> min_moving_distance;
  double mean_solve_time = 0.0;
  double max_solve_time = 0.0;
  std::size_t relaxed_steps = 0;
  std::size_t fallback_steps = 0;
  double max_abs_velocity = 0.0;
  double max_abs_input = 0.0;
  std::vector<double> onset;  // per encounter; NaN when the error never exceeds the threshold
  std::size_t hard_stability_steps = 0;
  std::size_t value_decrease_violations = 0;
  bool aborted = false;
};

/// Time of the first record inside [t_begin, t_closest] with tracking error above threshold.
inline double onset_time(const RunLog& log, const Encounter& e, double threshold = 0.05) {
  for (const auto& r : log.records)
    if (r.t >= e.t_begin - 1e-9 && r.t <= e.t_closest + 1e-9 && r.error.norm() > threshold) return r.t;
  return std::numeric_limits<double>::quiet_NaN();
}

/// The stability row was part of the hard problem that produced this step.
inline bool hard_stability_step(const StepRecord& r) {
  return r.stability_mode == StabilityMode::hard && r.status == SolveStatus::optimal;
}

inline RunMetrics compute_metrics(const RunLog& log, const std::vector<Encounter>& encounters = {}) {
  if (log.records.empty()) throw InputError("metrics: empty log");
  RunMetrics m;
  m.steps = log.records.size();
  m.aborted = log.aborted;
  m.min_moving_distance.assign(log.n_moving, kDistanceCap);
  double se = 0.0, st = 0.0;
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    const double e = r.error.norm();
    se += e * e;
    m.max_error = std::max(m.max_error, e);
    m.min_static_distance = std::min(m.min_static_distance, r.d_static);
    for (std::size_t j = 0; j < r.d_moving.size() && j < m.min_moving_distance.size(); ++j)
      m.min_moving_distance[j] = std::min(m.min_moving_distance[j], r.d_moving[j]);
    st += r.t_comp;
    m.max_solve_time = std::max(m.max_solve_time, r.t_comp);
    m.relaxed_steps += r.status == SolveStatus::relaxed ? 1 : 0;
    m.fallback_steps += r.status == SolveStatus::fallback ? 1 : 0;
    if (r.state.size() == kNx) m.max_abs_velocity = std::max(m.max_abs_velocity, r.state.segment(3, 3).cwiseAbs().maxCoeff());
    if (r.control.size()) m.max_abs_input = std::max(m.max_abs_input, r.control.cwiseAbs().maxCoeff());
    if (i > 0 && hard_stability_step(r)) {
      ++m.hard_stability_steps;
      if (!(r.value_function < log.records[i - 1].value_function)) ++m.value_decrease_violations;
    }
  }
  const double n = static_cast<double>(m.steps);
  m.rms_error = std::sqrt(se / n);
  m.mean_solve_time = st / n;
  for (const auto& e : encounters) m.onset.push_back(onset_time(log, e));
  return m;
}

// ---------------------------------------------------------------------------
// Scenario construction

struct AcceptanceScenarioSpec {
  std::uint64_t seed = 2024;
  double duration = 20.0;
  double speed = 1.0;
  double dt = 0.05;
  int n_static = 10;
  double static_lateral_min = 3.0;
  double static_lateral_max = 7.0;
  std::vector<double> crossing_times{5.0, 10.0, 15.0};  // host reaches the crossing point
  double crossing_lead = 2.0;  // obstacle passes that point this much earlier
  double pre_roll = 3.6;  // script history before t = 0
  double detection_radius = 10.0;
};

/// Rotate and translate a trajectory about the z axis so it passes through `at`
/// at time t_cross with its horizontal heading along `heading`.
inline TrajectorySeries place_crossing(const TrajectorySeries& tr, double t_cross, const Vec3& at, double heading) {
  const Vec3 p0 = tr.position_at(t_cross - 0.5), p1 = tr.position_at(t_cross + 0.5);
  const double current = std::atan2(p1.y() - p0.y(), p1.x() - p0.x());
  const Eigen::AngleAxisd rot(heading - current, Vec3::UnitZ());
  const Vec3 c = tr.position_at(t_cross);
  TrajectorySeries out;
  out.times = tr.times;
  for (const auto& p : tr.positions) out.positions.push_back(at + rot * (p - c));
  return out;
}

/// 10 static obstacles beside a straight 1 m/s path and 3 moving obstacles,
/// drawn from the corpus generator, that cut across the path shortly before
/// the host gets there.
inline Scenario acceptance_scenario(const AcceptanceScenarioSpec& spec = {}, const CorpusSpec& gen_spec = {}) {
  Scenario sc;
  sc.duration = spec.duration;
  sc.detection_radius = spec.detection_radius;
  sc.seed = spec.seed;
  const Vec3 vel(spec.speed, 0, 0);
  sc.reference = straight_reference(Vec3::Zero(), vel, spec.duration + 2.0, spec.dt);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const double length = spec.speed * spec.duration;
  for (int i = 0; i < spec.n_static; ++i) {
    const double x = (i + U(rng)) * length / spec.n_static;
    const double side = i % 2 == 0 ? 1.0 : -1.0;
    const double y = side * (spec.static_lateral_min + U(rng) * (spec.static_lateral_max - spec.static_lateral_min));
    const double z = 2.0 * (U(rng) - 0.5);
    sc.static_obstacles.emplace_back(x, y, z);
  }
  CorpusSpec gs = gen_spec;
  gs.dt = spec.dt;
  TrajectoryGenerator gen(gs, {});
  for (std::size_t j = 0; j < spec.crossing_times.size(); ++j) {
    const double tc = spec.crossing_times[j];
    const auto raw = gen.generate(rng, spec.pre_roll + spec.duration + 2.0, -spec.pre_roll);
    const double heading = j % 2 == 0 ? kPi / 2 : -kPi / 2;
    sc.moving_obstacles.push_back(place_crossing(raw, tc - spec.crossing_lead, sc.reference.position_at(tc), heading));
  }
  return sc;
}

}  // namespace ccmpc
