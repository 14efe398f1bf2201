#pragma once

// Chance-constrained MPC over a frozen affine model x+ = A x + B u + d.
// States are condensed out; the decision vector is z = [U, W, S] with W the
// level-2 model disturbances and S the per-row slacks. Obstacle rows are
// re-linearized each SQP iteration.

#include "ccmpc/chance_geometry.hpp"
#include "ccmpc/common.hpp"
#include "ccmpc/qp.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

namespace ccmpc {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct LinearModel {
  Mat A;
  Mat B;
  Vec d;

  int nx() const { return static_cast<int>(A.rows()); }
  int nu() const { return static_cast<int>(B.cols()); }
};

// How t_max is measured. work converts an operation count of the QP solves into
// seconds, so escalation and fallback do not depend on machine load; wall uses a clock.
enum class BudgetClock { work, wall };

struct MpcConfig {
  int N = 25;
  Mat Q;  // empty: identity
  Mat R;  // empty: identity
  Mat P;  // empty: DARE solution for the model the controller is built around
  double phi = 0.05;
  double confidence = 0.95;
  double d_safe = 2.0;
  bool inflate_moving = true;  // add d_safe to the predicted ellipsoid axes
  double static_backoff = 0.05;
  Vec x_lo, x_hi;  // state box, +-inf where free
  Vec u_lo, u_hi;  // input deviation box
  Vec du_lo, du_hi;  // per-step input change
  double t_max = 0.2;
  BudgetClock budget_clock = BudgetClock::work;
  double work_unit_time = 3.5e-9;  // seconds per work unit, see qp_work
  int n_set = 3;
  double rho = 1e5;
  double rho_w = 1e5;
  double e_margin = 1e-4;
  bool use_stability = true;
  bool value_decrease = true;  // also require V_N(z) <= V_N(t-1) - e alongside the stability row
  int sqp_max_iter = 50;
  double sqp_tol = 1e-6;
  int pos_index = 0;  // position occupies states pos_index..pos_index+2

  /// Bounds and weights for the 12-state quadcopter.
  static MpcConfig quad_defaults() {
    MpcConfig c;
    c.Q = Mat::Identity(12, 12);
    c.R = Mat::Identity(4, 4);
    c.x_lo = Vec::Constant(12, -kInf);
    c.x_hi = Vec::Constant(12, kInf);
    for (int i = 3; i < 6; ++i) {
      c.x_lo(i) = -5.0;
      c.x_hi(i) = 5.0;
    }
    c.x_lo(6) = -kPi;
    c.x_hi(6) = kPi;
    c.x_lo(7) = -kPi / 2;
    c.x_hi(7) = kPi / 2;
    c.x_lo(8) = -kPi;
    c.x_hi(8) = kPi;
    c.u_lo = Vec::Constant(4, -2.0);
    c.u_hi = Vec::Constant(4, 2.0);
    c.du_lo = Vec::Constant(4, -1.96);
    c.du_hi = Vec::Constant(4, 1.96);
    return c;
  }

  /// Fill empty weights and bounds for the given dimensions.
  void complete(int nx, int nu) {
    if (Q.size() == 0) Q = Mat::Identity(nx, nx);
    if (R.size() == 0) R = Mat::Identity(nu, nu);
    if (x_lo.size() == 0) x_lo = Vec::Constant(nx, -kInf);
    if (x_hi.size() == 0) x_hi = Vec::Constant(nx, kInf);
    if (u_lo.size() == 0) u_lo = Vec::Constant(nu, -kInf);
    if (u_hi.size() == 0) u_hi = Vec::Constant(nu, kInf);
    if (du_lo.size() == 0) du_lo = Vec::Constant(nu, -kInf);
    if (du_hi.size() == 0) du_hi = Vec::Constant(nu, kInf);
  }

  void validate(int nx, int nu) const {
    if (N < 2) throw InputError("mpc config: N must be >= 2");
    if (!(phi > 0.0 && phi < 0.5)) throw InputError("mpc config: phi must lie in (0, 0.5)");
    if (!(confidence > 0.0 && confidence < 1.0)) throw InputError("mpc config: confidence must lie in (0, 1)");
    if (Q.rows() != nx || Q.cols() != nx || R.rows() != nu || R.cols() != nu)
      throw InputError("mpc config: weight dimensions");
    if (P.size() != 0 && (P.rows() != nx || P.cols() != nx)) throw InputError("mpc config: P dimensions");
    if (Eigen::SelfAdjointEigenSolver<Mat>(Q).eigenvalues().minCoeff() < -1e-12)
      throw InputError("mpc config: Q must be PSD");
    if (Eigen::LLT<Mat>(R).info() != Eigen::Success) throw InputError("mpc config: R must be PD");
    if (P.size() != 0 && Eigen::LLT<Mat>(P).info() != Eigen::Success) throw InputError("mpc config: P must be PD");
    if (x_lo.size() != nx || x_hi.size() != nx || u_lo.size() != nu || u_hi.size() != nu || du_lo.size() != nu ||
        du_hi.size() != nu)
      throw InputError("mpc config: bound dimensions");
    if ((u_lo.array() > u_hi.array()).any() || (du_lo.array() > du_hi.array()).any() ||
        (x_lo.array() > x_hi.array()).any())
      throw InputError("mpc config: empty bound interval");
    if (!(rho > 0.0 && rho_w > 0.0 && e_margin > 0.0)) throw InputError("mpc config: penalties must be positive");
    if (n_set < 0 || sqp_max_iter < 1) throw InputError("mpc config: bad iteration limits");
    if (!(work_unit_time > 0.0)) throw InputError("mpc config: work_unit_time must be positive");
  }
};

/// Discrete algebraic Riccati solution by the structured doubling algorithm.
inline Mat solve_dare(const Mat& A, const Mat& B, const Mat& Q, const Mat& R) {
  const Eigen::Index n = A.rows();
  Mat Ak = A;
  Mat Gk = B * R.llt().solve(B.transpose());
  Mat Hk = Q;
  const Mat I = Mat::Identity(n, n);
  for (int it = 0; it < 100; ++it) {
    const Eigen::PartialPivLU<Mat> lu(I + Gk * Hk);
    const Mat W1 = lu.solve(Ak);   // (I + G H)^{-1} A
    const Mat W2 = lu.solve(Gk);   // (I + G H)^{-1} G
    const Mat Hn = symmetrize(Hk + Ak.transpose() * Hk * W1);
    Gk = symmetrize(Gk + Ak * W2 * Ak.transpose());
    Ak = Ak * W1;
    const double change = (Hn - Hk).norm();
    Hk = Hn;
    if (change <= 1e-13 * Hk.norm()) return Hk;
  }
  throw NumericalError("dare: doubling did not converge");
}

enum class SolveStatus { optimal, relaxed, fallback };
enum class StabilityMode { absent, hard, soft };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::relaxed: return "relaxed";
    case SolveStatus::fallback: return "fallback";
  }
  return "?";
}

inline const char* to_string(StabilityMode s) {
  switch (s) {
    case StabilityMode::absent: return "absent";
    case StabilityMode::hard: return "hard";
    case StabilityMode::soft: return "soft";
  }
  return "?";
}

struct NmpcSolution {
  std::vector<Vec> controls;  // N
  std::vector<Vec> states;    // N + 1, starting at the initial state
  double cost = kInf;         // objective including slack penalties
  double value_function = kInf;  // tracking cost only
  double first_stage_cost = 0.0;
  SolveStatus status = SolveStatus::fallback;
  int relax_level = 0;
  double slacks = 0.0;  // largest slack
  double slack_state = 0.0, slack_obstacle = 0.0, slack_stability = 0.0;
  double disturbance = 0.0;  // largest level-2 model disturbance
  StabilityMode stability_mode = StabilityMode::absent;
  double varpi0 = std::numeric_limits<double>::quiet_NaN();  // l_prev - e
  int sqp_iterations = 0;
  double kkt_residual = kInf;
  double solve_time = 0.0;
  int attempts = 0;
};

struct NmpcProblem {
  Vec x0;
  std::vector<Vec> reference;  // N + 1
  LinearModel model;
  Vec u_prev;  // last applied input deviation; empty means zero
  std::vector<Vec3> static_obstacles;
  std::vector<PredictedRegionSequence> moving_regions;  // region k constrains state k + 1
  const NmpcSolution* prev = nullptr;
  const NmpcSolution* warm_start = nullptr;  // defaults to prev

  void validate(const MpcConfig& cfg) const {
    const int nx = model.nx(), nu = model.nu();
    if (model.B.rows() != nx || model.A.cols() != nx || model.d.size() != nx || x0.size() != nx)
      throw InputError("nmpc problem: model/state dimensions");
    if (static_cast<int>(reference.size()) != cfg.N + 1) throw InputError("nmpc problem: reference length != N + 1");
    for (const auto& r : reference)
      if (r.size() != nx) throw InputError("nmpc problem: reference dimension");
    if (u_prev.size() != 0 && u_prev.size() != nu) throw InputError("nmpc problem: u_prev dimension");
    for (const auto& reg : moving_regions) {
      reg.validate();
      if (static_cast<int>(reg.size()) < cfg.N) throw InputError("nmpc problem: region sequence shorter than N");
    }
    if ((!static_obstacles.empty() || !moving_regions.empty()) && nx < cfg.pos_index + 3)
      throw InputError("nmpc problem: obstacles need a position block");
    if (!x0.allFinite()) throw InputError("nmpc problem: non-finite state");
  }
};

/// Supporting halfspace n'(p - o) >= dist of the ball |p - o| >= dist, linearized at p_lin.
struct StaticHalfspace {
  Vec3 normal;
  double rhs;  // n'p >= rhs
};

inline StaticHalfspace static_obstacle_halfspace(const Vec3& p_lin, const Vec3& obstacle, double dist,
                                                 const Vec3& fallback_dir = Vec3::UnitX()) {
  Vec3 n = p_lin - obstacle;
  if (n.norm() < 1e-9) n = fallback_dir;
  n.normalize();
  return {n, n.dot(obstacle) + dist};
}

enum class RowKind { input, rate, state, static_obstacle, moving_obstacle, stability, value_decrease };

struct ConstraintSet {
  Mat A;  // rows over z: A z >= b
  Vec b;
  std::vector<RowKind> kind;
  std::vector<int> slack;  // slack column or -1
  std::vector<int> quadratic;  // row index of each linearized quadratic row, in order

  int count(RowKind k) const {
    int c = 0;
    for (auto r : kind) c += r == k ? 1 : 0;
    return c;
  }
};

/// Condensed transcription of one problem at one relaxation level.
class MpcTranscription {
 public:
  MpcTranscription(const NmpcProblem& prob, const MpcConfig& cfg, int level, StabilityMode stab)
      : prob_(prob), cfg_(cfg), level_(level), stab_(stab) {
    nx_ = prob.model.nx();
    nu_ = prob.model.nu();
    N_ = cfg.N;
    const Mat& A = prob.model.A;
    const Mat& B = prob.model.B;
    const int nX = (N_ + 1) * nx_;
    Su_ = Mat::Zero(nX, N_ * nu_);
    Sw_ = Mat::Zero(nX, N_ * nx_);
    c_ = Vec::Zero(nX);
    c_.head(nx_) = prob.x0;
    for (int k = 1; k <= N_; ++k) {
      c_.segment(k * nx_, nx_) = A * c_.segment((k - 1) * nx_, nx_) + prob.model.d;
      Su_.block(k * nx_, 0, nx_, N_ * nu_) = A * Su_.block((k - 1) * nx_, 0, nx_, N_ * nu_);
      Su_.block(k * nx_, (k - 1) * nu_, nx_, nu_) = B;
      Sw_.block(k * nx_, 0, nx_, N_ * nx_) = A * Sw_.block((k - 1) * nx_, 0, nx_, N_ * nx_);
      Sw_.block(k * nx_, (k - 1) * nx_, nx_, nx_) = Mat::Identity(nx_, nx_);
    }
    ref_ = Vec(nX);
    for (int k = 0; k <= N_; ++k) ref_.segment(k * nx_, nx_) = prob.reference[static_cast<std::size_t>(k)];

    nU_ = N_ * nu_;
    nW_ = level_ >= 2 ? N_ * nx_ : 0;
    // slack columns, one per softened row
    const int n_state_rows = finite_bound_count() * N_;
    const int n_static_rows = static_cast<int>(prob.static_obstacles.size()) * N_;
    const int n_moving_rows = static_cast<int>(prob.moving_regions.size()) * N_;
    soft_state_ = level_ >= 1;
    soft_obstacle_ = level_ >= 1;
    soft_stability_ = stab_ == StabilityMode::soft || (stab_ == StabilityMode::hard && level_ >= 1);
    // state bounds share one slack per step; obstacle and stability rows get their own
    n_state_slacks_ = soft_state_ && n_state_rows > 0 ? N_ : 0;
    nS_ = n_state_slacks_ + (soft_obstacle_ ? n_static_rows + n_moving_rows : 0) +
          (stab_ != StabilityMode::absent && soft_stability_ ? (cfg.value_decrease ? 2 : 1) : 0);
    nz_ = nU_ + nW_ + nS_;

    build_cost();
    if (stab_ != StabilityMode::absent) build_stability();
  }

  /// Convex quadratic row |G z + g0|^2 <= rhs.
  struct QuadraticRow {
    RowKind kind;
    Mat G;
    Vec g0;
    Mat H;  // Hessian 2 G'G
    double rhs;

    double value(const Vec& z) const { return (G * z + g0).squaredNorm(); }
    Vec gradient(const Vec& z) const { return 2.0 * G.transpose() * (G * z + g0); }
  };

  const std::vector<QuadraticRow>& quadratic_rows() const { return qrows_; }

  int nz() const { return nz_; }
  int nU() const { return nU_; }
  int nW() const { return nW_; }
  int nS() const { return nS_; }
  int level() const { return level_; }
  /// No rows depend on the linearization point, so one QP solves the problem.
  bool is_linear() const {
    return prob_.static_obstacles.empty() && prob_.moving_regions.empty() && stab_ == StabilityMode::absent;
  }

  Vec states_stacked(const Vec& z) const {
    Vec X = c_ + Su_ * z.head(nU_);
    if (nW_ > 0) X += Sw_ * z.segment(nU_, nW_);
    return X;
  }

  std::vector<Vec> states(const Vec& z) const {
    const Vec X = states_stacked(z);
    std::vector<Vec> out;
    for (int k = 0; k <= N_; ++k) out.push_back(X.segment(k * nx_, nx_));
    return out;
  }

  std::vector<Vec> controls(const Vec& z) const {
    std::vector<Vec> out;
    for (int k = 0; k < N_; ++k) out.push_back(z.segment(k * nu_, nu_));
    return out;
  }

  /// Full objective, including slack and disturbance penalties.
  double cost(const Vec& z) const { return 0.5 * z.dot(H_ * z) + f_.dot(z) + const_; }

  Vec cost_gradient(const Vec& z) const { return H_ * z + f_; }

  /// Tracking part only: sum ||x_k - r_k||_Q^2 + ||u_k||_R^2 + ||x_N - r_N||_P^2.
  double tracking_cost(const Vec& z) const {
    const Vec X = states_stacked(z);
    double J = 0.0;
    for (int k = 0; k < N_; ++k) {
      const Vec e = X.segment(k * nx_, nx_) - ref_.segment(k * nx_, nx_);
      const Vec u = z.segment(k * nu_, nu_);
      J += e.dot(cfg_.Q * e) + u.dot(cfg_.R * u);
    }
    const Vec eN = X.segment(N_ * nx_, nx_) - ref_.segment(N_ * nx_, nx_);
    return J + eN.dot(P_ * eN);
  }

  double first_stage_cost(const Vec& z) const {
    const Vec e = prob_.x0 - ref_.head(nx_);
    const Vec u = z.head(nu_);
    return e.dot(cfg_.Q * e) + u.dot(cfg_.R * u);
  }

  /// g(z) = l(x_{N-1}, u_{N-1}) + sum_{i=0}^{N-2} ||x_i - x_i^prev||_Q^2; the stability row is g(z) <= rhs.
  double stability_lhs(const Vec& z) const { return qrows_.empty() ? 0.0 : qrows_[0].value(z); }
  double stability_rhs() const { return qrows_.empty() ? kInf : qrows_[0].rhs; }

  /// varpi of the stability inequality evaluated at z: l_prev - sum ||x_i - x_i^prev||_Q^2 - e.
  double varpi(const Vec& z) const {
    const Vec X = states_stacked(z);
    double s = 0.0;
    const auto& ps = prob_.prev->states;
    for (int i = 0; i <= N_ - 2; ++i) {
      const Vec dlt = X.segment(i * nx_, nx_) - ps[static_cast<std::size_t>(i + 1)];
      s += dlt.dot(cfg_.Q * dlt);
    }
    return prob_.prev->first_stage_cost - s - cfg_.e_margin;
  }

  /// Linear rows at linearization point z_lin.
  ConstraintSet constraints(const Vec& z_lin) const {
    const Vec Xl = states_stacked(z_lin);
    RowBuilder rb(*this);
    // input box and rate bounds, never slacked
    const Vec u_prev = prob_.u_prev.size() ? prob_.u_prev : Vec::Zero(nu_);
    for (int k = 0; k < N_; ++k) {
      for (int i = 0; i < nu_; ++i) {
        const int c = k * nu_ + i;
        if (std::isfinite(cfg_.u_lo(i))) rb.add_u(c, 1.0, cfg_.u_lo(i), RowKind::input);
        if (std::isfinite(cfg_.u_hi(i))) rb.add_u(c, -1.0, -cfg_.u_hi(i), RowKind::input);
        // u_k - u_{k-1} within [du_lo, du_hi]
        if (k == 0) {
          if (std::isfinite(cfg_.du_lo(i))) rb.add_u(c, 1.0, cfg_.du_lo(i) + u_prev(i), RowKind::rate);
          if (std::isfinite(cfg_.du_hi(i))) rb.add_u(c, -1.0, -cfg_.du_hi(i) - u_prev(i), RowKind::rate);
        } else {
          const int cp = (k - 1) * nu_ + i;
          if (std::isfinite(cfg_.du_lo(i))) rb.add_u2(c, cp, 1.0, cfg_.du_lo(i), RowKind::rate);
          if (std::isfinite(cfg_.du_hi(i))) rb.add_u2(c, cp, -1.0, -cfg_.du_hi(i), RowKind::rate);
        }
      }
    }
    // state box on x_1..x_N
    for (int k = 1; k <= N_; ++k) {
      for (int i = 0; i < nx_; ++i) {
        Vec w = Vec::Zero(nx_);
        w(i) = 1.0;
        const int sl = n_state_slacks_ ? k - 1 : RowBuilder::kHard;
        if (std::isfinite(cfg_.x_lo(i))) rb.add_x(k, w, cfg_.x_lo(i), RowKind::state, sl);
        if (std::isfinite(cfg_.x_hi(i))) rb.add_x(k, -w, -cfg_.x_hi(i), RowKind::state, sl);
      }
    }
    const int pi = cfg_.pos_index;
    // static obstacles, linearized at the current iterate
    for (const auto& o : prob_.static_obstacles) {
      for (int k = 1; k <= N_; ++k) {
        const Vec3 pl = Xl.segment(k * nx_ + pi, 3);
        const Vec3 dir0 = Vec3(prob_.x0.segment(pi, 3)) - o;
        const auto hs = static_obstacle_halfspace(pl, o, cfg_.d_safe + cfg_.static_backoff, dir0.norm() > 1e-9 ? dir0 : Vec3::UnitX());
        Vec w = Vec::Zero(nx_);
        w.segment(pi, 3) = hs.normal;
        rb.add_x(k, w, hs.rhs, RowKind::static_obstacle, soft_obstacle_ ? RowBuilder::kNew : RowBuilder::kHard);
      }
    }
    // moving obstacles: chance halfspace per horizon step
    for (const auto& reg : prob_.moving_regions) {
      for (int k = 1; k <= N_; ++k) {
        const auto ku = static_cast<std::size_t>(k - 1);
        const auto ell = ellipsoid_from_gaussian(reg.means[ku], reg.covs[ku], cfg_.confidence,
                                                 cfg_.inflate_moving ? cfg_.d_safe : 0.0);
        const Vec3 pl = Xl.segment(k * nx_ + pi, 3);
        const auto hs = chance_to_halfspace(pl, ell, cfg_.phi);
        Vec w = Vec::Zero(nx_);
        w.segment(pi, 3) = hs.normal;
        rb.add_x(k, w, hs.normal.dot(hs.anchor) + hs.margin, RowKind::moving_obstacle,
                 soft_obstacle_ ? RowBuilder::kNew : RowBuilder::kHard);
      }
    }
    // stability group: tangent planes of the convex quadratics g(z) <= rhs
    std::vector<int> qidx;
    for (const auto& q : qrows_) {
      const double g = q.value(z_lin);
      const Vec grad = q.gradient(z_lin);
      qidx.push_back(rb.size());
      rb.add_row(-grad, -(q.rhs - g + grad.dot(z_lin)), q.kind, soft_stability_ ? RowBuilder::kNew : RowBuilder::kHard);
    }
    ConstraintSet cs = rb.finish();
    cs.quadratic = std::move(qidx);
    return cs;
  }

  /// QP at z_lin; the multipliers add the curvature of the quadratic rows to the Hessian.
  QpProblem qp(const Vec& z_lin, const std::vector<double>& lambdas, ConstraintSet* rows_out = nullptr) const {
    QpProblem q;
    q.H = H_;
    q.g = f_;
    for (std::size_t i = 0; i < qrows_.size() && i < lambdas.size(); ++i) {
      if (lambdas[i] <= 0.0) continue;
      q.H += lambdas[i] * qrows_[i].H;
      q.g -= lambdas[i] * (qrows_[i].H * z_lin);
    }
    ConstraintSet cs = constraints(z_lin);
    q.Ain = cs.A;
    q.bin = cs.b;
    q.Aeq = Mat(0, nz_);
    q.beq = Vec(0);
    if (rows_out) *rows_out = std::move(cs);
    return q;
  }

  /// Phase-1 test for the hard quadratic rows: for each, the least value over
  /// the linear rows linearized at z_lin, minus its bound. Positive means that
  /// row cannot be met.
  double stability_infeasibility(const Vec& z_lin) const {
    if (qrows_.empty() || soft_stability_) return -kInf;
    ConstraintSet cs = constraints(z_lin);
    std::vector<int> keep;
    for (std::size_t r = 0; r < cs.kind.size(); ++r)
      if (cs.kind[r] != RowKind::stability && cs.kind[r] != RowKind::value_decrease) keep.push_back(static_cast<int>(r));
    double worst = -kInf;
    for (const auto& qr : qrows_) {
      QpProblem q;
      q.H = qr.H + 1e-9 * Mat::Identity(nz_, nz_);
      q.g = 2.0 * qr.G.transpose() * qr.g0;
      q.Aeq = Mat(0, nz_);
      q.beq = Vec(0);
      q.Ain = cs.A(keep, Eigen::all);
      q.bin = cs.b(keep);
      const QpResult r = solve_qp(q);
      worst = std::max(worst, r.status == QpStatus::optimal ? qr.value(r.x) - qr.rhs : kInf);
    }
    return worst;
  }

  /// Largest violation of the hard rows in their nonlinear form at z.
  double hard_violation(const Vec& z) const {
    const Vec X = states_stacked(z);
    double v = 0.0;
    const int pi = cfg_.pos_index;
    if (!soft_state_) {
      for (int k = 1; k <= N_; ++k) {
        const Vec x = X.segment(k * nx_, nx_);
        v = std::max(v, (cfg_.x_lo - x).cwiseMax(0.0).maxCoeff());
        v = std::max(v, (x - cfg_.x_hi).cwiseMax(0.0).maxCoeff());
      }
    }
    if (!soft_obstacle_) {
      for (const auto& o : prob_.static_obstacles)
        for (int k = 1; k <= N_; ++k) v = std::max(v, cfg_.d_safe - (Vec3(X.segment(k * nx_ + pi, 3)) - o).norm());
      for (const auto& reg : prob_.moving_regions) {
        for (int k = 1; k <= N_; ++k) {
          const auto ku = static_cast<std::size_t>(k - 1);
          const auto ell = ellipsoid_from_gaussian(reg.means[ku], reg.covs[ku], cfg_.confidence,
                                                   cfg_.inflate_moving ? cfg_.d_safe : 0.0);
          const Vec3 p = X.segment(k * nx_ + pi, 3);
          const auto hs = chance_to_halfspace(p, ell, cfg_.phi);
          v = std::max(v, hs.inside ? kInf : -hs.residual(p));
        }
      }
    }
    if (!soft_stability_)
      for (const auto& q : qrows_) v = std::max(v, q.value(z) - q.rhs);
    return v;
  }

  /// Per-category largest slack at z.
  void slack_summary(const Vec& z, const ConstraintSet& cs, NmpcSolution& sol) const {
    sol.slack_state = sol.slack_obstacle = sol.slack_stability = 0.0;
    for (std::size_t r = 0; r < cs.kind.size(); ++r) {
      if (cs.slack[r] < 0) continue;
      const double s = z(cs.slack[r]);
      switch (cs.kind[r]) {
        case RowKind::state: sol.slack_state = std::max(sol.slack_state, s); break;
        case RowKind::static_obstacle:
        case RowKind::moving_obstacle: sol.slack_obstacle = std::max(sol.slack_obstacle, s); break;
        case RowKind::stability:
        case RowKind::value_decrease: sol.slack_stability = std::max(sol.slack_stability, s); break;
        default: break;
      }
    }
    sol.slacks = std::max({sol.slack_state, sol.slack_obstacle, sol.slack_stability});
    sol.disturbance = nW_ > 0 ? z.segment(nU_, nW_).cwiseAbs().maxCoeff() : 0.0;
  }

  /// Warm start from a previous solution: controls shifted by one step.
  Vec warm_start(const NmpcSolution* ws) const {
    Vec z = Vec::Zero(nz_);
    if (ws && static_cast<int>(ws->controls.size()) == N_) {
      for (int k = 0; k < N_; ++k) {
        const int src = std::min(k + 1, N_ - 1);
        z.segment(k * nu_, nu_) = ws->controls[static_cast<std::size_t>(src)];
      }
    }
    return z;
  }

 private:
  int finite_bound_count() const {
    int c = 0;
    for (int i = 0; i < nx_; ++i) c += (std::isfinite(cfg_.x_lo(i)) ? 1 : 0) + (std::isfinite(cfg_.x_hi(i)) ? 1 : 0);
    return c;
  }

  void build_cost() {
    const int nX = (N_ + 1) * nx_;
    P_ = cfg_.P.size() ? cfg_.P : cfg_.Q;
    Mat Qb = Mat::Zero(nX, nX);
    for (int k = 0; k < N_; ++k) Qb.block(k * nx_, k * nx_, nx_, nx_) = cfg_.Q;
    Qb.block(N_ * nx_, N_ * nx_, nx_, nx_) = P_;
    const Vec e0 = c_ - ref_;
    H_ = Mat::Zero(nz_, nz_);
    f_ = Vec::Zero(nz_);
    const Mat QSu = Qb * Su_;
    H_.topLeftCorner(nU_, nU_) = 2.0 * Su_.transpose() * QSu;
    for (int k = 0; k < N_; ++k) H_.block(k * nu_, k * nu_, nu_, nu_) += 2.0 * cfg_.R;
    f_.head(nU_) = 2.0 * QSu.transpose() * e0;
    if (nW_ > 0) {
      const Mat QSw = Qb * Sw_;
      H_.block(0, nU_, nU_, nW_) = 2.0 * Su_.transpose() * QSw;
      H_.block(nU_, 0, nW_, nU_) = H_.block(0, nU_, nU_, nW_).transpose();
      H_.block(nU_, nU_, nW_, nW_) = 2.0 * Sw_.transpose() * QSw + 2.0 * cfg_.rho_w * Mat::Identity(nW_, nW_);
      f_.segment(nU_, nW_) = 2.0 * QSw.transpose() * e0;
    }
    // quadratic penalty only: the optimal slack is y / (2 rho) >= 0, so no sign rows are needed
    if (nS_ > 0) H_.bottomRightCorner(nS_, nS_) = 2.0 * cfg_.rho * Mat::Identity(nS_, nS_);
    H_ = symmetrize(H_);
    const_ = e0.dot(Qb * e0);
  }

  // Rows written as |G z + g0|^2 with whitening by square roots of Q, R and P.
  void build_stability() {
    const auto& prev = *prob_.prev;
    if (static_cast<int>(prev.states.size()) != N_ + 1) throw InputError("nmpc: previous solution has wrong length");
    const Mat Lq = sqrt_psd(cfg_.Q);
    const Mat Lr = Eigen::LLT<Mat>(cfg_.R).matrixU();
    auto state_rows = [&](int k) {
      Mat M = Mat::Zero(nx_, nz_);
      M.leftCols(nU_) = Su_.middleRows(k * nx_, nx_);
      if (nW_ > 0) M.middleCols(nU_, nW_) = Sw_.middleRows(k * nx_, nx_);
      return M;
    };
    // tail stage cost at N-1 plus coupling to the previous plan, i = 0..N-2
    {
      QuadraticRow q{RowKind::stability, Mat::Zero(N_ * nx_ + nu_, nz_), Vec::Zero(N_ * nx_ + nu_), Mat(), 0.0};
      for (int i = 0; i <= N_ - 2; ++i) {
        q.G.middleRows(i * nx_, nx_) = Lq * state_rows(i);
        q.g0.segment(i * nx_, nx_) = Lq * (c_.segment(i * nx_, nx_) - prev.states[static_cast<std::size_t>(i + 1)]);
      }
      const int r0 = (N_ - 1) * nx_;
      q.G.middleRows(r0, nx_) = Lq * state_rows(N_ - 1);
      q.g0.segment(r0, nx_) = Lq * (c_.segment(r0, nx_) - ref_.segment(r0, nx_));
      q.G.block(N_ * nx_, (N_ - 1) * nu_, nu_, nu_) = Lr;
      q.H = 2.0 * q.G.transpose() * q.G;
      q.rhs = prev.first_stage_cost - cfg_.e_margin;
      qrows_.push_back(std::move(q));
    }
    // tracking value below the previous one
    if (cfg_.value_decrease) {
      const Mat Lp = sqrt_psd(P_);
      const int rows = (N_ + 1) * nx_ + N_ * nu_;
      QuadraticRow q{RowKind::value_decrease, Mat::Zero(rows, nz_), Vec::Zero(rows), Mat(), 0.0};
      for (int k = 0; k <= N_; ++k) {
        const Mat& L = k < N_ ? Lq : Lp;
        q.G.middleRows(k * nx_, nx_) = L * state_rows(k);
        q.g0.segment(k * nx_, nx_) = L * (c_.segment(k * nx_, nx_) - ref_.segment(k * nx_, nx_));
      }
      for (int k = 0; k < N_; ++k) q.G.block((N_ + 1) * nx_ + k * nu_, k * nu_, nu_, nu_) = Lr;
      q.H = 2.0 * q.G.transpose() * q.G;
      q.rhs = prev.value_function - cfg_.e_margin;
      qrows_.push_back(std::move(q));
    }
  }

  static Mat sqrt_psd(const Mat& Q) {
    Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(Q));
    return es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
  }

  class RowBuilder {
   public:
    static constexpr int kHard = -1;
    static constexpr int kNew = -2;  // allocate the next free slack

    explicit RowBuilder(const MpcTranscription& t) : t_(t), next_slack_(t.n_state_slacks_) {}

    // slack: kHard, kNew, or an index into the slack block
    void add_row(const Vec& a, double b, RowKind kind, int slack) {
      rows_.push_back(a);
      b_.push_back(b);
      kind_.push_back(kind);
      if (slack == kNew) slack = next_slack_++;
      slack_.push_back(slack >= 0 ? t_.nU_ + t_.nW_ + slack : -1);
    }
    void add_u(int c, double coef, double b, RowKind kind) {
      Vec a = Vec::Zero(t_.nz_);
      a(c) = coef;
      add_row(a, b, kind, kHard);
    }
    void add_u2(int c, int cp, double coef, double b, RowKind kind) {
      Vec a = Vec::Zero(t_.nz_);
      a(c) = coef;
      a(cp) = -coef;
      add_row(a, b, kind, kHard);
    }
    // w' x_k >= b
    void add_x(int k, const Vec& w, double b, RowKind kind, int slack) {
      Vec a = Vec::Zero(t_.nz_);
      a.head(t_.nU_) = t_.Su_.middleRows(k * t_.nx_, t_.nx_).transpose() * w;
      if (t_.nW_ > 0) a.segment(t_.nU_, t_.nW_) = t_.Sw_.middleRows(k * t_.nx_, t_.nx_).transpose() * w;
      add_row(a, b - w.dot(t_.c_.segment(k * t_.nx_, t_.nx_)), kind, slack);
    }

    int size() const { return static_cast<int>(rows_.size()); }

    ConstraintSet finish() {
      if (next_slack_ != t_.nS_) throw NumericalError("nmpc: slack bookkeeping mismatch");
      const int m = static_cast<int>(rows_.size());
      ConstraintSet cs;
      cs.A = Mat::Zero(m, t_.nz_);
      cs.b = Vec::Zero(m);
      for (int r = 0; r < m; ++r) {
        cs.A.row(r) = rows_[static_cast<std::size_t>(r)].transpose();
        cs.b(r) = b_[static_cast<std::size_t>(r)];
        if (slack_[static_cast<std::size_t>(r)] >= 0) cs.A(r, slack_[static_cast<std::size_t>(r)]) = 1.0;
      }
      cs.kind = kind_;
      cs.slack = slack_;
      return cs;
    }

   private:
    const MpcTranscription& t_;
    std::vector<Vec> rows_;
    std::vector<double> b_;
    std::vector<RowKind> kind_;
    std::vector<int> slack_;
    int next_slack_ = 0;
  };

  const NmpcProblem& prob_;
  const MpcConfig& cfg_;
  int level_;
  StabilityMode stab_;
  int nx_ = 0, nu_ = 0, N_ = 0, nU_ = 0, nW_ = 0, nS_ = 0, nz_ = 0, n_state_slacks_ = 0;
  bool soft_state_ = false, soft_obstacle_ = false, soft_stability_ = false;
  Mat Su_, Sw_, P_;
  Vec c_, ref_;
  Mat H_;
  Vec f_;
  double const_ = 0.0;
  std::vector<QuadraticRow> qrows_;
};

/// Operation count of one dense QP solve: assembling and scanning the constraint
/// rows, then one n^2 update per active-set change. Calibrated against wall time.
inline double qp_work(const QpProblem& qp, int qp_iterations) {
  const double n = qp.n(), m = qp.m();
  return 8.0 * n * m + n * n * std::max(qp_iterations, 1);
}

struct SqpResult {
  bool feasible = false;
  double work = 0.0;  // summed qp_work
  Vec z;
  int iterations = 0;
  double kkt_residual = kInf;
  bool timed_out = false;
  ConstraintSet rows;
};

/// SQP on one transcription: QP subproblems with re-linearized obstacle and
/// stability rows until the step and hard violation fall below tol. Returns the
/// best hard-feasible iterate.
inline SqpResult solve_sqp(const MpcTranscription& tr, const Vec& z0, int max_iter, double tol,
                           const std::function<bool(double)>& out_of_time = {}) {
  SqpResult out;
  Vec z = z0;
  std::vector<double> lambdas(tr.quadratic_rows().size(), 0.0);
  double best = kInf;
  constexpr int kStallIterations = 15;
  for (int it = 1; it <= max_iter; ++it) {
    ConstraintSet rows;
    const QpProblem qp = tr.qp(z, lambdas, &rows);
    const QpResult r = solve_qp(qp);
    out.iterations = it;
    out.work += qp_work(qp, r.iterations);
    if (log_level() >= LogLevel::debug)
      log(LogLevel::debug, "sqp level=" + std::to_string(tr.level()) + " it=" + std::to_string(it) + " qp=" +
                               to_string(r.status) + " qp_iter=" + std::to_string(r.iterations) +
                               " rows=" + std::to_string(qp.m()) + " n=" + std::to_string(qp.n()));
    if (r.status != QpStatus::optimal) break;
    for (std::size_t i = 0; i < rows.quadratic.size(); ++i) lambdas[i] = r.y_in(rows.quadratic[i]);
    const double step = (r.x - z).cwiseAbs().maxCoeff();
    z = r.x;
    const double viol = tr.hard_violation(z);
    // a linear problem is solved exactly by its single QP
    const double kkt = tr.is_linear() ? std::max(0.0, viol) : std::max(step, std::max(0.0, viol));
    if (viol <= 1e-6) {
      const double c = tr.cost(z);
      if (c < best || kkt <= tol || tr.is_linear()) {
        best = c;
        out.feasible = true;
        out.z = z;
        out.kkt_residual = kkt;
        out.rows = std::move(rows);
      }
    }
    if (kkt <= tol || (tr.is_linear() && viol <= 1e-6)) break;
    // no hard-feasible iterate after many tries: report infeasible and let the caller relax
    if (!out.feasible && it >= kStallIterations) break;
    if (out_of_time && out_of_time(out.work)) {
      out.timed_out = true;
      break;
    }
  }
  return out;
}

/// One receding-horizon step with escalating relaxation and clamp-and-hold fallback.
inline NmpcSolution solve_step(const NmpcProblem& prob, const MpcConfig& cfg_in) {
  MpcConfig cfg = cfg_in;
  cfg.complete(prob.model.nx(), prob.model.nu());
  cfg.validate(prob.model.nx(), prob.model.nu());
  prob.validate(cfg);
  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count(); };
  double work_done = 0.0;  // finished SQP runs, for the work clock
  auto budget_used = [&](double running) {
    return cfg.budget_clock == BudgetClock::wall ? elapsed() : cfg.work_unit_time * (work_done + running);
  };
  const int nu = prob.model.nu();

  StabilityMode stab0 = StabilityMode::absent;
  double varpi0 = std::numeric_limits<double>::quiet_NaN();
  if (cfg.use_stability && prob.prev && !prob.prev->states.empty()) {
    varpi0 = prob.prev->first_stage_cost - cfg.e_margin;
    if (varpi0 > 0.0) {
      stab0 = StabilityMode::hard;
    } else {
      stab0 = StabilityMode::soft;
      log(LogLevel::info, "nmpc: stability bound non-positive, demoted to a slacked row");
    }
  }

  int level = 0;
  int attempts = 0;
  while (attempts <= cfg.n_set && budget_used(0.0) < cfg.t_max) {
    ++attempts;
    const MpcTranscription tr(prob, cfg, level, stab0);
    const Vec z0 = tr.warm_start(prob.warm_start ? prob.warm_start : prob.prev);
    if (level == 0 && stab0 == StabilityMode::hard && tr.stability_infeasibility(z0) > 1e-6) {
      level = 1;
      continue;
    }
    // out of time mid-SQP: keep the best hard-feasible iterate if there is one
    SqpResult r =
        solve_sqp(tr, z0, cfg.sqp_max_iter, cfg.sqp_tol, [&](double w) { return budget_used(w) >= cfg.t_max; });
    work_done += r.work;
    if (r.feasible) {
      NmpcSolution sol;
      sol.controls = tr.controls(r.z);
      sol.states = tr.states(r.z);
      sol.cost = tr.cost(r.z);
      sol.value_function = tr.tracking_cost(r.z);
      sol.first_stage_cost = tr.first_stage_cost(r.z);
      sol.relax_level = level;
      sol.status = level == 0 ? SolveStatus::optimal : SolveStatus::relaxed;
      tr.slack_summary(r.z, r.rows, sol);
      if (sol.status == SolveStatus::optimal && stab0 == StabilityMode::soft && sol.slack_stability > 1e-9)
        sol.status = SolveStatus::relaxed;
      sol.stability_mode = stab0 == StabilityMode::hard && level >= 1 ? StabilityMode::soft : stab0;
      sol.varpi0 = varpi0;
      sol.sqp_iterations = r.iterations;
      sol.kkt_residual = r.kkt_residual;
      sol.attempts = attempts;
      sol.solve_time = elapsed();
      return sol;
    }
    level = std::min(level + 1, 2);
  }

  // fallback: hold the last applied input, clamped to the bounds
  NmpcSolution sol;
  const Vec up = prob.u_prev.size() ? prob.u_prev : Vec::Zero(nu);
  const Vec u = up.cwiseMax(cfg.u_lo).cwiseMin(cfg.u_hi);
  sol.controls.assign(static_cast<std::size_t>(cfg.N), u);
  Vec x = prob.x0;
  sol.states.push_back(x);
  double J = 0.0;
  for (int k = 0; k < cfg.N; ++k) {
    const Vec e = x - prob.reference[static_cast<std::size_t>(k)];
    J += e.dot(cfg.Q * e) + u.dot(cfg.R * u);
    x = prob.model.A * x + prob.model.B * u + prob.model.d;
    sol.states.push_back(x);
  }
  const Vec eN = x - prob.reference.back();
  const Mat& P = cfg.P.size() ? cfg.P : cfg.Q;
  sol.value_function = sol.cost = J + eN.dot(P * eN);
  const Vec e0 = prob.x0 - prob.reference.front();
  sol.first_stage_cost = e0.dot(cfg.Q * e0) + u.dot(cfg.R * u);
  sol.status = SolveStatus::fallback;
  sol.relax_level = level;
  sol.stability_mode = stab0;
  sol.varpi0 = varpi0;
  sol.attempts = attempts;
  sol.solve_time = elapsed();
  return sol;
}

}  // namespace ccmpc
