#pragma once

// Confidence ellipsoids of Gaussian position predictions, point projection,
// and the deterministic halfspace form of the collision chance constraint.

#include "ccmpc/common.hpp"

#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

namespace ccmpc {

/// Per-step mean/covariance of one moving obstacle.
struct PredictedRegionSequence {
  std::vector<double> times;
  std::vector<Vec3> means;
  std::vector<Mat3> covs;

  std::size_t size() const { return means.size(); }

  void validate() const {
    if (times.size() != means.size() || covs.size() != means.size())
      throw InputError("PredictedRegionSequence: length mismatch");
    for (const auto& S : covs) {
      if (!S.allFinite() || (S - S.transpose()).cwiseAbs().maxCoeff() > 1e-9)
        throw InputError("PredictedRegionSequence: covariance not symmetric");
      if (Eigen::SelfAdjointEigenSolver<Mat3>(S).eigenvalues().minCoeff() < -1e-10)
        throw InputError("PredictedRegionSequence: covariance not PSD");
    }
  }
};

struct ConfidenceEllipsoid {
  Vec3 center = Vec3::Zero();
  Mat3 shape = Mat3::Identity();  // Q diag(lambda) Q^T, after flooring
  double scale = 1.0;             // r
  Mat3 eig_q = Mat3::Identity();
  Vec3 eig_lambda = Vec3::Ones();  // descending
  Mat3 cov = Mat3::Identity();     // Gaussian covariance before any safety inflation

  Vec3 semi_axes() const { return scale * eig_lambda.cwiseSqrt(); }

  /// (p - c)^T shape^{-1} (p - c) / r^2; <= 1 means inside.
  double normalized_radius2(const Vec3& p) const {
    const Vec3 z = eig_q.transpose() * (p - center);
    return (z.array().square() / eig_lambda.array()).sum() / (scale * scale);
  }

  bool contains(const Vec3& p, double tol = 0.0) const { return normalized_radius2(p) <= 1.0 + tol; }
};

struct HalfspaceConstraint {
  Vec3 normal = Vec3::UnitX();  // kappa
  Vec3 anchor = Vec3::Zero();   // projection of the linearization point
  double margin = 0.0;
  bool inside = false;  // linearization point was inside the ellipsoid

  /// kappa^T (x - anchor) - margin; >= 0 when satisfied.
  double residual(const Vec3& x) const { return normal.dot(x - anchor) - margin; }
};

inline constexpr double kEigenFloor = 1e-12;

/// CDF of the radius of a 3D standard normal: P(|Z| <= r).
inline double chi3_radius_cdf(double r) {
  const double a = r / std::sqrt(2.0);
  return std::erf(a) - a * std::exp(-0.5 * r * r) / std::tgamma(1.5);
}

inline double chi3_radius_pdf(double r) {
  return std::sqrt(2.0 / kPi) * r * r * std::exp(-0.5 * r * r);
}

/// Radius r with P(|Z| <= r) = confidence for Z ~ N(0, I_3).
inline double scaling_factor(double confidence) {
  if (!(confidence > 0.0 && confidence < 1.0)) throw InputError("scaling_factor: confidence must be in (0, 1)");
  double r = 1.5;
  for (int it = 0; it < 100; ++it) {
    const double res = chi3_radius_cdf(r) - confidence;
    if (std::abs(res) < 1e-13) return r;
    const double d = chi3_radius_pdf(r);
    const double rn = r - res / d;
    if (!(rn > 0.0 && rn < 20.0) || !std::isfinite(rn)) break;
    r = rn;
  }
  if (std::abs(chi3_radius_cdf(r) - confidence) < 1e-10) return r;
  // bisection fallback
  double lo = 0.0, hi = 20.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (chi3_radius_cdf(mid) < confidence ? lo : hi) = mid;
  }
  r = 0.5 * (lo + hi);
  if (std::abs(chi3_radius_cdf(r) - confidence) > 1e-10) throw NumericalError("scaling_factor: no convergence");
  return r;
}

/// Ellipsoid {p : (p - mean)^T cov^{-1} (p - mean) <= r^2}. A positive d_safe grows each
/// semi-axis by d_safe.
inline ConfidenceEllipsoid ellipsoid_from_gaussian(const Vec3& mean, const Mat3& cov, double confidence,
                                                   double d_safe = 0.0) {
  if (!mean.allFinite() || !cov.allFinite()) throw InputError("ellipsoid_from_gaussian: non-finite input");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-9)
    throw InputError("ellipsoid_from_gaussian: covariance not symmetric");
  ConfidenceEllipsoid ell;
  ell.center = mean;
  ell.scale = scaling_factor(confidence);
  Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (cov + cov.transpose()));
  // ascending from Eigen; store descending
  for (int j = 0; j < 3; ++j) {
    ell.eig_lambda(j) = std::max(es.eigenvalues()(2 - j), kEigenFloor);
    ell.eig_q.col(j) = es.eigenvectors().col(2 - j);
  }
  ell.cov = ell.eig_q * ell.eig_lambda.asDiagonal() * ell.eig_q.transpose();
  if (d_safe > 0.0) {
    for (int j = 0; j < 3; ++j) {
      const double a = std::sqrt(ell.eig_lambda(j)) + d_safe / ell.scale;
      ell.eig_lambda(j) = a * a;
    }
  }
  ell.shape = ell.eig_q * ell.eig_lambda.asDiagonal() * ell.eig_q.transpose();
  return ell;
}

struct Projection {
  Vec3 point;
  double lambda = 0.0;  // KKT multiplier of (y-c)^T S^{-1} (y-c) <= r^2 with Lagrangian 1/2|y-p|^2
  bool inside = false;
};

/// Closest point of the ellipsoid to p. Solved as a 1D root find in the multiplier.
inline Projection project_onto_ellipsoid_kkt(const Vec3& p, const ConfidenceEllipsoid& ell) {
  const Vec3 z = ell.eig_q.transpose() * (p - ell.center);
  const Vec3 lam = ell.eig_lambda;
  const double r2 = ell.scale * ell.scale;
  Projection out;
  if ((z.array().square() / lam.array()).sum() <= r2) {
    out.point = p;
    out.inside = true;
    return out;
  }
  // F(mu) = sum lam_j z_j^2 / (lam_j + mu)^2 - r^2, convex decreasing on mu >= 0
  auto F = [&](double mu, double* dF) {
    double f = -r2, d = 0.0;
    for (int j = 0; j < 3; ++j) {
      const double den = lam(j) + mu;
      const double t = lam(j) * z(j) * z(j) / (den * den);
      f += t;
      d += -2.0 * t / den;
    }
    if (dF) *dF = d;
    return f;
  };
  double lo = 0.0;
  double hi = std::sqrt((lam.array() * z.array().square()).sum() / r2);
  double mu = 0.0;
  for (int it = 0; it < 200; ++it) {
    double dF = 0.0;
    const double f = F(mu, &dF);
    if (f > 0) lo = mu; else hi = mu;
    double next = mu - f / dF;
    if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
    if (std::abs(next - mu) <= 1e-15 * std::max(1.0, mu)) {
      mu = next;
      break;
    }
    mu = next;
  }
  Vec3 y;
  for (int j = 0; j < 3; ++j) y(j) = lam(j) * z(j) / (lam(j) + mu);
  // polish: put y exactly on the boundary along the same ray from the center
  const double s = std::sqrt(r2 / (y.array().square() / lam.array()).sum());
  y *= s;
  out.point = ell.center + ell.eig_q * y;
  out.lambda = mu;
  return out;
}

inline Vec3 project_onto_ellipsoid(const Vec3& p, const ConfidenceEllipsoid& ell) {
  return project_onto_ellipsoid_kkt(p, ell).point;
}

/// |(y - p) + lambda S^{-1} (y - c)| for a projection result.
inline double kkt_residual(const Vec3& p, const ConfidenceEllipsoid& ell, const Projection& proj) {
  const Vec3 zy = ell.eig_q.transpose() * (proj.point - ell.center);
  const Vec3 grad = ell.eig_q * (zy.array() / ell.eig_lambda.array()).matrix();
  return ((proj.point - p) + proj.lambda * grad).norm();
}

inline double min_distance_to_region(const Vec3& point, const ConfidenceEllipsoid& ell) {
  return (point - project_onto_ellipsoid(point, ell)).norm();
}

/// Deterministic halfspace kappa^T (x - Pi(p)) >= sqrt(2 kappa^T S kappa) erfinv(1 - 2 phi)
/// built at the linearization point p.
inline HalfspaceConstraint chance_to_halfspace(const Vec3& point, const ConfidenceEllipsoid& ell, double phi) {
  if (!(phi > 0.0 && phi <= 0.5)) throw InputError("chance_to_halfspace: phi must be in (0, 0.5]");
  HalfspaceConstraint h;
  const Projection proj = project_onto_ellipsoid_kkt(point, ell);
  Vec3 diff = point - proj.point;
  if (proj.inside || diff.norm() < 1e-12) {
    // direction undefined; use the ray from the center, anchored on the boundary
    h.inside = true;
    Vec3 dir = point - ell.center;
    if (dir.norm() < 1e-12) dir = ell.eig_q.col(2);
    const Vec3 zd = ell.eig_q.transpose() * dir;
    const double s = ell.scale / std::sqrt((zd.array().square() / ell.eig_lambda.array()).sum());
    h.anchor = ell.center + s * dir;
    // outward normal of the ellipsoid at the anchor
    const Vec3 za = ell.eig_q.transpose() * (h.anchor - ell.center);
    diff = ell.eig_q * (za.array() / ell.eig_lambda.array()).matrix();
  } else {
    h.anchor = proj.point;
  }
  h.normal = diff.normalized();
  const double sigma2 = h.normal.dot(ell.cov * h.normal);
  h.margin = std::sqrt(2.0 * std::max(sigma2, 0.0)) * boost::math::erf_inv(1.0 - 2.0 * phi);
  return h;
}

inline HalfspaceConstraint chance_to_halfspace(const Vec3& point, const Vec3& region_mean, const Mat3& region_cov,
                                               double confidence, double phi, double d_safe = 0.0) {
  return chance_to_halfspace(point, ellipsoid_from_gaussian(region_mean, region_cov, confidence, d_safe), phi);
}

}  // namespace ccmpc
