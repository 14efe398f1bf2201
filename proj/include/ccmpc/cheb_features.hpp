#pragma once

// Chebyshev trajectory features: spherical velocity channels and their
// coefficient encoding / reconstruction.

#include "ccmpc/common.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace ccmpc {

/// Timestamped 3D positions of one agent.
struct TrajectorySeries {
  std::vector<double> times;
  std::vector<Vec3> positions;

  std::size_t size() const { return times.size(); }

  void validate() const {
    if (times.size() != positions.size()) throw InputError("trajectory: times/positions length mismatch");
    if (times.size() < 2) throw InputError("trajectory: need at least 2 samples");
    for (std::size_t i = 1; i < times.size(); ++i)
      if (!(times[i] > times[i - 1])) throw InputError("trajectory: timestamps not strictly increasing");
    for (const auto& p : positions)
      if (!p.allFinite()) throw InputError("trajectory: non-finite position");
  }

  /// Linear interpolation of the position at time t (clamped to the ends).
  Vec3 position_at(double t) const {
    if (t <= times.front()) return positions.front();
    if (t >= times.back()) return positions.back();
    auto it = std::upper_bound(times.begin(), times.end(), t);
    std::size_t i = static_cast<std::size_t>(it - times.begin());
    double w = (t - times[i - 1]) / (times[i] - times[i - 1]);
    return (1.0 - w) * positions[i - 1] + w * positions[i];
  }

  /// Samples with times in [t0, t1] (inclusive, with a small tolerance).
  TrajectorySeries slice(double t0, double t1) const {
    TrajectorySeries out;
    for (std::size_t i = 0; i < times.size(); ++i) {
      if (times[i] >= t0 - 1e-9 && times[i] <= t1 + 1e-9) {
        out.times.push_back(times[i]);
        out.positions.push_back(positions[i]);
      }
    }
    return out;
  }
};

/// Speed magnitude, polar angle from +z, and (unwrapped) azimuth per step.
struct SphericalChannels {
  std::vector<double> v;
  std::vector<double> theta;
  std::vector<double> phi;

  std::size_t size() const { return v.size(); }

  void validate() const {
    if (theta.size() != v.size() || phi.size() != v.size())
      throw InputError("spherical channels: length mismatch");
    for (double s : v)
      if (!(s >= 0.0)) throw InputError("spherical channels: negative or non-finite speed");
  }
};

/// Coefficients of the three channels, each of length degree + 1.
struct ChebCoeffs {
  Vec a_v;
  Vec a_theta;
  Vec a_phi;
  int degree = 0;

  /// [a_v; a_theta; a_phi]
  Vec flatten() const {
    Vec out(3 * (degree + 1));
    out << a_v, a_theta, a_phi;
    return out;
  }

  static ChebCoeffs unflatten(const Eigen::Ref<const Vec>& flat, int degree) {
    const Eigen::Index m = degree + 1;
    if (flat.size() != 3 * m) throw InputError("ChebCoeffs::unflatten: size mismatch");
    return {flat.segment(0, m), flat.segment(m, m), flat.segment(2 * m, m), degree};
  }
};

namespace detail {
inline double check_unit_interval(double x) {
  if (!(std::abs(x) <= 1.0 + 1e-12)) throw DomainError("Chebyshev argument outside [-1, 1]");
  return std::clamp(x, -1.0, 1.0);
}
}  // namespace detail

/// T_degree(x) by the three-term recurrence.
inline double cheb_eval(int degree, double x) {
  if (degree < 0) throw InputError("cheb_eval: negative degree");
  x = detail::check_unit_interval(x);
  if (degree == 0) return 1.0;
  double prev = 1.0, cur = x;
  for (int n = 1; n < degree; ++n) {
    double next = 2.0 * x * cur - prev;
    prev = cur;
    cur = next;
  }
  return cur;
}

/// The N zeros of T_N, x_k = cos(pi (k + 1/2) / N), k = 0..N-1 (descending).
inline std::vector<double> cheb_nodes(int count) {
  if (count < 1) throw InputError("cheb_nodes: need at least one node");
  std::vector<double> x(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) x[static_cast<std::size_t>(k)] = std::cos(kPi * (k + 0.5) / count);
  return x;
}

/// a_j = (2/N) sum_k f(x_k) T_j(x_k), samples taken at cheb_nodes(N).
inline Vec cheb_fit(std::span<const double> samples, int degree) {
  const int count = static_cast<int>(samples.size());
  if (degree < 0) throw InputError("cheb_fit: negative degree");
  if (degree >= count) throw InputError("cheb_fit: degree must be smaller than the number of samples");
  const auto nodes = cheb_nodes(count);
  Vec a = Vec::Zero(degree + 1);
  for (int k = 0; k < count; ++k) {
    const double x = nodes[static_cast<std::size_t>(k)];
    const double f = samples[static_cast<std::size_t>(k)];
    double prev = 1.0, cur = x;
    a(0) += f;
    if (degree >= 1) a(1) += f * x;
    for (int j = 2; j <= degree; ++j) {
      double next = 2.0 * x * cur - prev;
      prev = cur;
      cur = next;
      a(j) += f * cur;
    }
  }
  return a * (2.0 / count);
}

/// Basis row b(x) with b_0 = 1/2 so that b(x) . a reconstructs the fitted function.
inline Vec cheb_basis_row(int degree, double x) {
  x = detail::check_unit_interval(x);
  Vec b(degree + 1);
  b(0) = 0.5;
  if (degree >= 1) b(1) = x;
  double prev = 1.0, cur = x;
  for (int j = 2; j <= degree; ++j) {
    double next = 2.0 * x * cur - prev;
    prev = cur;
    cur = next;
    b(j) = cur;
  }
  return b;
}

/// sum_j a_j T_j(x) - a_0 / 2, evaluated by Clenshaw's recurrence.
inline double cheb_reconstruct(const Eigen::Ref<const Vec>& coeffs, double x) {
  if (coeffs.size() == 0) throw InputError("cheb_reconstruct: empty coefficients");
  x = detail::check_unit_interval(x);
  double b1 = 0.0, b2 = 0.0;
  for (Eigen::Index j = coeffs.size() - 1; j >= 1; --j) {
    double b0 = 2.0 * x * b1 - b2 + coeffs(j);
    b2 = b1;
    b1 = b0;
  }
  return x * b1 - b2 + 0.5 * coeffs(0);
}

inline std::vector<double> cheb_reconstruct(const Eigen::Ref<const Vec>& coeffs, std::span<const double> xs) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (double x : xs) out.push_back(cheb_reconstruct(coeffs, x));
  return out;
}

/// Affine map of t in [t0, t1] onto [-1, 1].
inline double to_unit_interval(double t, double t0, double t1) { return 2.0 * (t - t0) / (t1 - t0) - 1.0; }

/// Linearly interpolate a uniformly or non-uniformly sampled channel at the
/// Chebyshev nodes of the window [t0, t1].
inline std::vector<double> sample_at_nodes(std::span<const double> times, std::span<const double> values,
                                           double t0, double t1, int count) {
  if (times.size() != values.size() || times.size() < 2) throw InputError("sample_at_nodes: bad input");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(count));
  for (double x : cheb_nodes(count)) {
    const double t = t0 + 0.5 * (x + 1.0) * (t1 - t0);
    if (t <= times.front()) {
      out.push_back(values.front());
      continue;
    }
    if (t >= times.back()) {
      out.push_back(values.back());
      continue;
    }
    auto it = std::upper_bound(times.begin(), times.end(), t);
    const std::size_t i = static_cast<std::size_t>(it - times.begin());
    const double w = (t - times[i - 1]) / (times[i] - times[i - 1]);
    out.push_back((1.0 - w) * values[i - 1] + w * values[i]);
  }
  return out;
}

/// Unit direction for polar angle theta (from +z) and azimuth phi.
inline Vec3 spherical_direction(double theta, double phi) {
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

/// Forward-difference velocity of each step mapped to (v, theta, phi). Channel k
/// describes the motion from sample k to k + 1; the last channel repeats the
/// previous one so lengths match. Azimuth is unwrapped to be continuous.
inline SphericalChannels cartesian_to_spherical(const TrajectorySeries& traj) {
  traj.validate();
  const std::size_t n = traj.size();
  SphericalChannels ch;
  ch.v.resize(n);
  ch.theta.resize(n);
  ch.phi.resize(n);

  constexpr double kDegenerate = 1e-9;
  std::vector<bool> has_angle(n - 1, false);
  for (std::size_t k = 0; k + 1 < n; ++k) {
    const Vec3 dp = traj.positions[k + 1] - traj.positions[k];
    const double dt = traj.times[k + 1] - traj.times[k];
    const double dist = dp.norm();
    ch.v[k] = dist / dt;
    if (dist >= kDegenerate) {
      ch.theta[k] = std::acos(std::clamp(dp.z() / dist, -1.0, 1.0));
      const double horiz = std::hypot(dp.x(), dp.y());
      ch.phi[k] = horiz >= kDegenerate ? std::atan2(dp.y(), dp.x()) : std::nan("");
      has_angle[k] = true;
    }
  }
  // Degenerate steps carry the previous angles; leading degenerate steps take the first valid ones.
  std::size_t first_valid = 0;
  while (first_valid + 1 < n && !has_angle[first_valid]) ++first_valid;
  double theta_prev = first_valid + 1 < n ? ch.theta[first_valid] : kPi / 2;
  double phi_prev = 0.0;
  for (std::size_t k = first_valid; k + 1 < n; ++k) {
    if (has_angle[k] && !std::isnan(ch.phi[k])) {
      phi_prev = ch.phi[k];
      break;
    }
  }
  bool seen = false;
  for (std::size_t k = 0; k + 1 < n; ++k) {
    if (!has_angle[k]) {
      ch.theta[k] = theta_prev;
      ch.phi[k] = phi_prev;
      continue;
    }
    theta_prev = ch.theta[k];
    if (std::isnan(ch.phi[k])) {
      ch.phi[k] = phi_prev;
    } else if (seen) {
      // unwrap relative to the previous azimuth
      double d = ch.phi[k] - phi_prev;
      d -= 2.0 * kPi * std::round(d / (2.0 * kPi));
      ch.phi[k] = phi_prev + d;
    }
    phi_prev = ch.phi[k];
    seen = true;
  }
  if (!seen) {
    for (std::size_t k = 0; k + 1 < n; ++k) ch.phi[k] = 0.0;
  }
  ch.v[n - 1] = ch.v[n - 2];
  ch.theta[n - 1] = ch.theta[n - 2];
  ch.phi[n - 1] = ch.phi[n - 2];
  return ch;
}

/// p_{k+1} = p_k + dt v_k dir(theta_k, phi_k). Returns size() + 1 samples at t0 + k dt.
inline TrajectorySeries spherical_to_cartesian(const SphericalChannels& channels, const Vec3& start, double dt,
                                               double t0 = 0.0) {
  channels.validate();
  if (!(dt > 0.0)) throw InputError("spherical_to_cartesian: dt must be positive");
  TrajectorySeries out;
  const std::size_t n = channels.size();
  out.times.reserve(n + 1);
  out.positions.reserve(n + 1);
  out.times.push_back(t0);
  out.positions.push_back(start);
  Vec3 p = start;
  for (std::size_t k = 0; k < n; ++k) {
    p += dt * channels.v[k] * spherical_direction(channels.theta[k], channels.phi[k]);
    out.times.push_back(t0 + static_cast<double>(k + 1) * dt);
    out.positions.push_back(p);
  }
  return out;
}

}  // namespace ccmpc
