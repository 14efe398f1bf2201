#pragma once

// 12-state quadcopter: nonlinear dynamics, rotor mixing, SDC pseudo-linearization.
// State layout: p(0..2) world, v(3..5) body, zeta = (roll, pitch, yaw)(6..8), omega(9..11).
// z axis points down; gravity enters v through g R e with e = (0, 0, 1).

#include "ccmpc/common.hpp"

#include <cmath>

namespace ccmpc {

inline constexpr int kNx = 12;
inline constexpr int kNu = 4;

using Vec12 = Eigen::Matrix<double, 12, 1>;
using Mat12 = Eigen::Matrix<double, 12, 12>;
using Mat12x4 = Eigen::Matrix<double, 12, 4>;
using Mat4 = Eigen::Matrix4d;

struct QuadState {
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec3 zeta = Vec3::Zero();  // roll, pitch, yaw
  Vec3 omega = Vec3::Zero();

  Vec12 to_vector() const {
    Vec12 x;
    x << p, v, zeta, omega;
    return x;
  }

  static QuadState from_vector(const Eigen::Ref<const Vec>& x) {
    if (x.size() != kNx) throw InputError("QuadState: expected 12 entries");
    QuadState s;
    s.p = x.segment<3>(0);
    s.v = x.segment<3>(3);
    s.zeta = x.segment<3>(6);
    s.omega = x.segment<3>(9);
    return s;
  }

  void validate() const {
    if (!p.allFinite() || !v.allFinite() || !zeta.allFinite() || !omega.allFinite())
      throw InputError("QuadState: non-finite entry");
    if (std::abs(std::abs(zeta(1)) - kPi / 2) < 1e-6 || std::abs(zeta(1)) > kPi / 2)
      throw DomainError("QuadState: pitch at the +-pi/2 singularity");
  }
};

struct QuadParams {
  double m = 0.8;
  double g = 9.81;
  Vec3 J = Vec3(0.0244, 0.0244, 0.0436);  // diagonal inertia
  double L = 0.162;
  double c = 2.17e-3;
  double dt = 0.05;

  Vec4 u_eq() const { return Vec4::Constant(m * g / 4.0); }

  void validate() const {
    if (!(m > 0 && g > 0 && L > 0 && c > 0 && dt > 0) || !(J.minCoeff() > 0))
      throw InputError("QuadParams: all parameters must be positive");
  }
};

/// Body-to-world rotation R^T = Rz(psi) Ry(theta) Rx(phi).
inline Mat3 rotation_body_to_world(const Vec3& zeta) {
  const double cf = std::cos(zeta(0)), sf = std::sin(zeta(0));
  const double ct = std::cos(zeta(1)), st = std::sin(zeta(1));
  const double cp = std::cos(zeta(2)), sp = std::sin(zeta(2));
  Mat3 Rt;
  Rt << cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf,
        sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf,
        -st, ct * sf, ct * cf;
  return Rt;
}

/// World-to-body rotation R.
inline Mat3 rotation_world_to_body(const Vec3& zeta) { return rotation_body_to_world(zeta).transpose(); }

/// Euler-rate map: zeta_dot = W omega.
inline Mat3 euler_rate_matrix(const Vec3& zeta) {
  const double cf = std::cos(zeta(0)), sf = std::sin(zeta(0));
  const double ct = std::cos(zeta(1)), tt = std::tan(zeta(1));
  if (std::abs(ct) < 1e-6) throw DomainError("euler_rate_matrix: pitch singularity");
  Mat3 W;
  W << 1.0, sf * tt, cf * tt,
       0.0, cf, -sf,
       0.0, sf / ct, cf / ct;
  return W;
}

/// Rows: T, tau_x, tau_y, tau_z.
inline Mat4 mixing_matrix(const QuadParams& params) {
  const double L = params.L, c = params.c;
  Mat4 M;
  M << -1, -1, -1, -1,
       0, -L, 0, L,
       L, 0, -L, 0,
       -c, c, -c, c;
  return M;
}

struct ThrustTorque {
  double T;
  Vec3 tau;
};

inline ThrustTorque mix_thrusts(const Vec4& thrusts, const QuadParams& params) {
  const Vec4 w = mixing_matrix(params) * thrusts;
  return {w(0), w.tail<3>()};
}

inline Vec4 unmix_thrusts(double T, const Vec3& tau, const QuadParams& params) {
  Vec4 w;
  w << T, tau;
  return mixing_matrix(params).partialPivLu().solve(w);
}

/// Full nonlinear state derivative for absolute rotor thrusts.
inline Vec12 dynamics_rhs(const QuadState& s, const Vec4& thrusts, const QuadParams& params) {
  s.validate();
  if (!thrusts.allFinite()) throw InputError("dynamics_rhs: non-finite thrusts");
  const auto [T, tau] = mix_thrusts(thrusts, params);
  const Mat3 Rt = rotation_body_to_world(s.zeta);
  const Vec3 e(0, 0, 1);
  const Vec3 J = params.J;
  Vec12 dx;
  dx.segment<3>(0) = Rt * s.v;
  dx.segment<3>(3) = -s.omega.cross(s.v) + params.g * Rt.transpose() * e + e * T / params.m;
  dx.segment<3>(6) = euler_rate_matrix(s.zeta) * s.omega;
  const Vec3 Jw = J.cwiseProduct(s.omega);
  dx.segment<3>(9) = (-s.omega.cross(Jw) + tau).cwiseQuotient(J);
  return dx;
}

namespace detail {
// sin(x)/x
inline double sinc(double x) { return std::abs(x) < 1e-8 ? 1.0 : std::sin(x) / x; }
// (cos(x) - 1)/x, written without cancellation
inline double cosm1_over(double x) {
  if (std::abs(x) < 1e-8) return 0.0;
  const double s = std::sin(0.5 * x);
  return -2.0 * s * s / x;
}
}  // namespace detail

/// Continuous pseudo-linear model x_dot = A x + B u_hat + c, exact for any state.
/// c carries the part of gravity that the attitude block cannot absorb (g e on v_z).
struct SdcModel {
  Mat12 A;
  Mat12x4 B;
  Vec12 c;
};

inline Mat12x4 input_matrix(const QuadParams& params) {
  Mat12x4 B = Mat12x4::Zero();
  const Mat4 M = mixing_matrix(params);
  B.row(5) = M.row(0) / params.m;
  for (int i = 0; i < 3; ++i) B.row(9 + i) = M.row(1 + i) / params.J(i);
  return B;
}

inline SdcModel sdc_linearize(const QuadState& s, const QuadParams& params) {
  s.validate();
  const double g = params.g;
  const double f = s.zeta(0), th = s.zeta(1);
  const double cf = std::cos(f), ct = std::cos(th);
  const Vec3 w = s.omega, v = s.v, J = params.J;

  Mat3 Ablk;  // -omega x v, half of it through v
  Ablk << 0, w.z() / 2, -w.y() / 2,
          -w.z() / 2, 0, w.x() / 2,
          w.y() / 2, -w.x() / 2, 0;
  Mat3 Cblk;  // the other half through omega
  Cblk << 0, -v.z() / 2, v.y() / 2,
          v.z() / 2, 0, -v.x() / 2,
          -v.y() / 2, v.x() / 2, 0;
  Mat3 Bblk = Mat3::Zero();  // g (R e - e) = Bblk zeta
  Bblk(0, 1) = -g * detail::sinc(th);
  Bblk(1, 0) = g * ct * detail::sinc(f);
  Bblk(2, 0) = g * (ct + 1.0) * detail::cosm1_over(f) / 2.0;
  Bblk(2, 1) = g * (cf + 1.0) * detail::cosm1_over(th) / 2.0;
  Mat3 Dblk;
  Dblk << 0, (J.y() - J.z()) * w.z() / (2 * J.x()), (J.y() - J.z()) * w.y() / (2 * J.x()),
          (J.z() - J.x()) * w.z() / (2 * J.y()), 0, (J.z() - J.x()) * w.x() / (2 * J.y()),
          (J.x() - J.y()) * w.y() / (2 * J.z()), (J.x() - J.y()) * w.x() / (2 * J.z()), 0;

  SdcModel out;
  out.A.setZero();
  out.A.block<3, 3>(0, 3) = rotation_body_to_world(s.zeta);
  out.A.block<3, 3>(3, 3) = Ablk;
  out.A.block<3, 3>(3, 6) = Bblk;
  out.A.block<3, 3>(3, 9) = Cblk;
  out.A.block<3, 3>(6, 9) = euler_rate_matrix(s.zeta);
  out.A.block<3, 3>(9, 9) = Dblk;
  out.B = input_matrix(params);
  out.c.setZero();
  out.c(5) = g;
  return out;
}

/// Discrete affine model in the deviation input u = u_hat - u_eq:
/// x+ = Ad x + Bd u + d.
struct DiscreteModel {
  Mat Ad;
  Mat Bd;
  Vec d;
};

inline DiscreteModel discretize(const SdcModel& sdc, const QuadParams& params) {
  const double dt = params.dt;
  DiscreteModel dm;
  dm.Ad = Mat::Identity(kNx, kNx) + dt * Mat(sdc.A);
  dm.Bd = dt * Mat(sdc.B);
  dm.d = dt * (Vec(sdc.c) + Vec(sdc.B * params.u_eq()));
  return dm;
}

enum class Integrator { euler, rk4 };

/// One plant step of the nonlinear model with absolute thrusts held over dt.
inline QuadState step(const QuadState& s, const Vec4& thrusts, const QuadParams& params,
                      Integrator integrator = Integrator::rk4, double dt = -1.0) {
  if (dt <= 0) dt = params.dt;
  const Vec12 x = s.to_vector();
  auto f = [&](const Vec12& xs) { return dynamics_rhs(QuadState::from_vector(xs), thrusts, params); };
  Vec12 xn;
  if (integrator == Integrator::euler) {
    xn = x + dt * f(x);
  } else {
    const Vec12 k1 = f(x);
    const Vec12 k2 = f(x + 0.5 * dt * k1);
    const Vec12 k3 = f(x + 0.5 * dt * k2);
    const Vec12 k4 = f(x + dt * k3);
    xn = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  QuadState out = QuadState::from_vector(xn);
  out.validate();
  return out;
}

}  // namespace ccmpc
