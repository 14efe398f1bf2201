#pragma once

// Obstacle trajectory prediction: snippet features, training matrices, and the
// propagation of a conditional coefficient distribution into positions.

#include "ccmpc/chance_geometry.hpp"
#include "ccmpc/cheb_features.hpp"
#include "ccmpc/common.hpp"
#include "ccmpc/vbgmm.hpp"

#include <cmath>
#include <vector>

namespace ccmpc {

/// Layout of a feature snippet. History covers [0, history_len], future covers
/// [history_len - overlap, length], both relative to the snippet start.
struct FeatureWindow {
  double length = 5.0;
  double history_frac = 0.7;
  double future_frac = 0.4;
  int degree = 4;
  int nodes = 20;
  double dt = 0.05;

  double history_len() const { return history_frac * length; }
  double future_len() const { return future_frac * length; }
  double overlap() const { return history_len() + future_len() - length; }
  int channel_dim() const { return degree + 1; }
  int part_dim() const { return 3 * channel_dim(); }
  int joint_dim() const { return 2 * part_dim(); }

  void validate() const {
    if (!(length > 0.0) || !(dt > 0.0)) throw InputError("feature window: length and dt must be positive");
    if (!(history_frac > 0.0 && history_frac < 1.0 && future_frac > 0.0 && future_frac <= 1.0))
      throw InputError("feature window: fractions must lie in (0, 1)");
    if (overlap() < 0.0) throw InputError("feature window: history and future must overlap or touch");
    if (degree < 0 || nodes <= degree) throw InputError("feature window: need nodes > degree >= 0");
  }
};

namespace detail {

/// Channel k describes the step from sample k to k + 1; it is attributed to the step midpoint.
inline std::vector<double> channel_times(const TrajectorySeries& tr) {
  std::vector<double> t(tr.size());
  for (std::size_t k = 0; k + 1 < tr.size(); ++k) t[k] = 0.5 * (tr.times[k] + tr.times[k + 1]);
  t.back() = tr.times.back() + 0.5 * (tr.times.back() - tr.times[tr.size() - 2]);
  return t;
}

inline Vec fit_channels(const std::vector<double>& times, const SphericalChannels& ch, double t0, double t1,
                        const FeatureWindow& w) {
  const int n1 = w.channel_dim();
  Vec out(3 * n1);
  const std::vector<double>* chans[3] = {&ch.v, &ch.theta, &ch.phi};
  for (int c = 0; c < 3; ++c) {
    const auto samples = sample_at_nodes(times, *chans[c], t0, t1, w.nodes);
    out.segment(c * n1, n1) = cheb_fit(samples, w.degree);
  }
  return out;
}

}  // namespace detail

/// History coefficients from the samples of `history` within [t_end - history_len, t_end].
inline Vec history_features(const TrajectorySeries& history, double t_end, const FeatureWindow& w) {
  const double t0 = t_end - w.history_len();
  const TrajectorySeries h = history.slice(t0, t_end);
  if (h.size() < 2 || h.times.front() > t0 + 0.5 * w.dt || h.times.back() < t_end - 0.5 * w.dt)
    throw InputError("history does not cover the history window");
  h.validate();
  return detail::fit_channels(detail::channel_times(h), cartesian_to_spherical(h), t0, t_end, w);
}

/// Joint [history, future] feature vector of a snippet starting at t_start.
inline Vec snippet_features(const TrajectorySeries& traj, double t_start, const FeatureWindow& w) {
  const double t_h = t_start + w.history_len();
  const TrajectorySeries full = traj.slice(t_start, t_start + w.length);
  if (full.size() < 2 || full.times.back() < t_start + w.length - 0.5 * w.dt)
    throw InputError("trajectory shorter than the feature window");
  Vec out(w.joint_dim());
  out.head(w.part_dim()) = history_features(traj, t_h, w);
  // The full snippet and the history slice share their first samples, so the
  // azimuth unwrapping lands on the same branch in both.
  out.tail(w.part_dim()) = detail::fit_channels(detail::channel_times(full), cartesian_to_spherical(full),
                                                t_h - w.overlap(), t_start + w.length, w);
  return out;
}

/// One snippet per trajectory, taken from its start.
inline Mat training_matrix(const std::vector<TrajectorySeries>& corpus, const FeatureWindow& w) {
  w.validate();
  Mat X(static_cast<Eigen::Index>(corpus.size()), w.joint_dim());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    X.row(static_cast<Eigen::Index>(i)) = snippet_features(corpus[i], corpus[i].times.front(), w).transpose();
  return X;
}

/// Positions reached by integrating reconstructed future channels, with a
/// first-order covariance of the coefficient uncertainty.
struct ChannelPropagation {
  std::vector<Vec3> means;  // positions at t_now + k dt, k = 1..steps
  std::vector<Mat3> covs;
  std::vector<Mat> jacobians;  // d position_k / d coefficients (3 x part_dim)
};

/// Integrate channels of the future window [tf0, tf1] from `start` at t_now.
/// Step j uses the channels at its midpoint t_now + (j + 1/2) dt.
inline ChannelPropagation propagate_channels(const Vec& mu_a, const Mat& sigma_a, const Vec3& start, double t_now,
                                             double tf0, double tf1, int steps, const FeatureWindow& w) {
  const int n1 = w.channel_dim();
  if (mu_a.size() != 3 * n1 || sigma_a.rows() != 3 * n1 || sigma_a.cols() != 3 * n1)
    throw InputError("propagate_channels: coefficient dimension mismatch");
  if (steps < 1) throw InputError("propagate_channels: need at least one step");
  ChannelPropagation out;
  Vec3 p = start;
  Mat J = Mat::Zero(3, 3 * n1);
  bool clipped = false;
  for (int j = 0; j < steps; ++j) {
    double x = to_unit_interval(t_now + (j + 0.5) * w.dt, tf0, tf1);
    x = std::clamp(x, -1.0, 1.0);
    const Vec b = cheb_basis_row(w.degree, x);
    const double v = b.dot(mu_a.segment(0, n1));
    const double th = b.dot(mu_a.segment(n1, n1));
    const double ph = b.dot(mu_a.segment(2 * n1, n1));
    const Vec3 dir = spherical_direction(th, ph);
    const Vec3 d_th(std::cos(th) * std::cos(ph), std::cos(th) * std::sin(ph), -std::sin(th));
    const Vec3 d_ph(-std::sin(th) * std::sin(ph), std::sin(th) * std::cos(ph), 0.0);
    p += w.dt * v * dir;
    J.middleCols(0, n1) += w.dt * dir * b.transpose();
    J.middleCols(n1, n1) += w.dt * v * d_th * b.transpose();
    J.middleCols(2 * n1, n1) += w.dt * v * d_ph * b.transpose();
    Mat C = J * sigma_a * J.transpose();
    clipped |= clip_to_psd(C, -1e-12);
    out.means.push_back(p);
    out.covs.push_back(C);
    out.jacobians.push_back(J);
  }
  if (clipped) warn("propagate_channels: clipped a non-PSD position covariance");
  return out;
}

/// Predictor bound to a fitted model. Dormant components are left out of the
/// predictive mixture.
class ObstaclePredictor {
 public:
  ObstaclePredictor(const VbgmmPosterior& posterior, FeatureWindow window)
      : window_(window),
        mix_(predictive_joint(posterior, false)),
        split_(FeatureSplit::leading(window.part_dim(), window.joint_dim())) {
    window_.validate();
    if (posterior.D != window_.joint_dim()) throw InputError("predictor: model dimension does not match window");
  }

  const FeatureWindow& window() const { return window_; }

  /// Conditional future-coefficient distribution given history up to t_now.
  ConditionalPrediction condition(const TrajectorySeries& history, double t_now) const {
    return condition_on_history(mix_, history_features(history, t_now, window_), split_);
  }

  /// Regions at t_now + k dt for k = 1..horizon_steps. The start point is the
  /// latest observed position.
  PredictedRegionSequence predict(const TrajectorySeries& history, double t_now, int horizon_steps) const {
    const ConditionalPrediction cp = condition(history, t_now);
    const double tf0 = t_now - window_.overlap();
    const double tf1 = tf0 + window_.future_len();
    if (t_now + horizon_steps * window_.dt > tf1 + 1e-9)
      warn("predictor: horizon extends past the future window; channels are held at the window end");
    const auto prop = propagate_channels(cp.pooled_mean, cp.pooled_cov, history.position_at(t_now), t_now, tf0,
                                         tf1, horizon_steps, window_);
    PredictedRegionSequence out;
    for (int k = 0; k < horizon_steps; ++k) {
      out.times.push_back(t_now + (k + 1) * window_.dt);
      out.means.push_back(prop.means[static_cast<std::size_t>(k)]);
      out.covs.push_back(prop.covs[static_cast<std::size_t>(k)]);
    }
    return out;
  }

 private:
  FeatureWindow window_;
  StudentMixture mix_;
  FeatureSplit split_;
};

/// Convenience wrapper over ObstaclePredictor.
inline PredictedRegionSequence predict_obstacle(const VbgmmPosterior& posterior, const TrajectorySeries& history,
                                                int horizon_steps, double dt, const FeatureWindow& window = {}) {
  FeatureWindow w = window;
  w.dt = dt;
  return ObstaclePredictor(posterior, w).predict(history, history.times.back(), horizon_steps);
}

}  // namespace ccmpc
