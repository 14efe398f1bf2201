#pragma once

// Synthetic trajectory corpus: Catmull-Rom splines through random waypoints
// that keep clear of a random obstacle field.

#include "ccmpc/cheb_features.hpp"
#include "ccmpc/common.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace ccmpc {

struct CorpusSpec {
  int n_traj = 1000;
  std::uint64_t seed = 7;
  double duration = 5.0;
  double dt = 0.05;
  double segment_time = 1.0;  // time between waypoints
  double speed_min = 0.6;
  double speed_max = 1.4;
  double turn_std = 0.3;   // heading change per segment, rad
  double turn_max = 0.7;
  double climb_std = 0.1;  // vertical speed, m/s
  double max_accel = 3.0;  // bound on the finite-difference acceleration, rejected above
  Vec3 box_lo = Vec3(-20, -20, -5);
  Vec3 box_hi = Vec3(20, 20, 5);
  int n_env_obstacles = 10;
  double clearance = 1.5;
  double train_fraction = 0.875;

  void validate() const {
    if (n_traj < 1) throw InputError("corpus: n_traj must be >= 1");
    if (!(duration > 0.0 && dt > 0.0 && segment_time > 0.0)) throw InputError("corpus: times must be positive");
    if (!(speed_min > 0.0 && speed_max >= speed_min)) throw InputError("corpus: bad speed range");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw InputError("corpus: bad train fraction");
    if (!(max_accel > 0.0)) throw InputError("corpus: max_accel must be positive");
  }
};

struct Corpus {
  std::vector<TrajectorySeries> train;
  std::vector<TrajectorySeries> test;
  std::vector<Vec3> env_obstacles;
};

/// Uniform Catmull-Rom position on segment i at fraction u, with end tangents from reflected points.
inline Vec3 catmull_rom(const std::vector<Vec3>& w, std::size_t i, double u) {
  const std::size_t n = w.size();
  const Vec3 p1 = w[i], p2 = w[i + 1];
  const Vec3 p0 = i == 0 ? Vec3(2 * p1 - p2) : w[i - 1];
  const Vec3 p3 = i + 2 < n ? w[i + 2] : Vec3(2 * p2 - p1);
  const double u2 = u * u, u3 = u2 * u;
  return 0.5 * ((2 * p1) + (-p0 + p2) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u2 + (-p0 + 3 * p1 - 3 * p2 + p3) * u3);
}

/// Sample the spline through `w` (one segment per segment_time) at dt over
/// [t0, t0 + duration]. The first sample sits `phase` seconds past w[0].
inline TrajectorySeries sample_spline(const std::vector<Vec3>& w, double segment_time, double dt, double duration,
                                      double t0 = 0.0, double phase = 0.0) {
  TrajectorySeries tr;
  const int n = static_cast<int>(std::llround(duration / dt));
  for (int k = 0; k <= n; ++k) {
    const double s = (phase + k * dt) / segment_time;
    std::size_t i = static_cast<std::size_t>(std::floor(s));
    if (i + 1 >= w.size()) i = w.size() - 2;
    tr.times.push_back(t0 + k * dt);
    tr.positions.push_back(catmull_rom(w, i, s - static_cast<double>(i)));
  }
  return tr;
}

/// Largest finite-difference acceleration of a uniformly sampled trajectory.
inline double max_fd_accel(const TrajectorySeries& tr) {
  double a = 0.0;
  for (std::size_t k = 1; k + 1 < tr.size(); ++k) {
    const double h0 = tr.times[k] - tr.times[k - 1], h1 = tr.times[k + 1] - tr.times[k];
    const Vec3 v0 = (tr.positions[k] - tr.positions[k - 1]) / h0;
    const Vec3 v1 = (tr.positions[k + 1] - tr.positions[k]) / h1;
    a = std::max(a, (v1 - v0).norm() / (0.5 * (h0 + h1)));
  }
  return a;
}

class TrajectoryGenerator {
 public:
  TrajectoryGenerator(const CorpusSpec& spec, std::vector<Vec3> obstacles)
      : spec_(spec), obstacles_(std::move(obstacles)) {
    spec_.validate();
  }

  /// One trajectory of the given duration starting at t0. Retries from fresh
  /// draws until the acceleration bound holds. Sampling starts at a random
  /// point of the first segment; otherwise every trajectory would begin on a
  /// waypoint and the interpolation ripple would always have the same phase.
  TrajectorySeries generate(std::mt19937_64& rng, double duration, double t0 = 0.0) const {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::normal_distribution<double> Nd(0.0, 1.0);
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double phase = U(rng) * spec_.segment_time;
      const int segments = static_cast<int>(std::ceil((duration + phase) / spec_.segment_time - 1e-9));
      Vec3 p;
      for (int tries = 0; tries < 100; ++tries) {
        for (int d = 0; d < 3; ++d) p(d) = spec_.box_lo(d) + U(rng) * (spec_.box_hi(d) - spec_.box_lo(d));
        if (clear(p)) break;
      }
      const double speed = spec_.speed_min + U(rng) * (spec_.speed_max - spec_.speed_min);
      double heading = (2.0 * U(rng) - 1.0) * kPi;
      const double climb = spec_.climb_std * Nd(rng);
      std::vector<Vec3> w{p};
      for (int s = 0; s < segments; ++s) {
        Vec3 next;
        for (int tries = 0; tries < 20; ++tries) {
          const double turn = std::clamp(spec_.turn_std * Nd(rng), -spec_.turn_max, spec_.turn_max);
          const double h = heading + turn;
          next = w.back() + spec_.segment_time * Vec3(speed * std::cos(h), speed * std::sin(h), climb);
          if (clear(next) || tries == 19) {
            heading = h;
            break;
          }
        }
        w.push_back(next);
      }
      TrajectorySeries tr = sample_spline(w, spec_.segment_time, spec_.dt, duration, t0, phase);
      if (max_fd_accel(tr) <= spec_.max_accel) return tr;
    }
    throw NumericalError("trajectory generator: acceleration bound unreachable");
  }

  const std::vector<Vec3>& obstacles() const { return obstacles_; }

 private:
  bool clear(const Vec3& p) const {
    for (const auto& o : obstacles_)
      if ((p - o).norm() < spec_.clearance) return false;
    return true;
  }

  CorpusSpec spec_;
  std::vector<Vec3> obstacles_;
};

inline std::vector<Vec3> random_obstacle_field(const CorpusSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<Vec3> obs;
  for (int i = 0; i < spec.n_env_obstacles; ++i) {
    Vec3 p;
    for (int d = 0; d < 3; ++d) p(d) = spec.box_lo(d) + U(rng) * (spec.box_hi(d) - spec.box_lo(d));
    obs.push_back(p);
  }
  return obs;
}

/// Deterministic for a fixed spec (including seed). Split is train first.
inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  Corpus c;
  c.env_obstacles = random_obstacle_field(spec, rng);
  TrajectoryGenerator gen(spec, c.env_obstacles);
  const int n_train = static_cast<int>(std::llround(spec.train_fraction * spec.n_traj));
  for (int i = 0; i < spec.n_traj; ++i) {
    auto tr = gen.generate(rng, spec.duration);
    (i < n_train ? c.train : c.test).push_back(std::move(tr));
  }
  return c;
}

}  // namespace ccmpc
