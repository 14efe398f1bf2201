#include "ccmpc/nmpc.hpp"
#include "ccmpc/quad_model.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace ccmpc;

namespace {

LinearModel hover_model() {
  QuadParams qp;
  const auto dm = discretize(sdc_linearize(QuadState{}, qp), qp);
  return {dm.Ad, dm.Bd, dm.d};
}

MpcConfig quad_config() {
  MpcConfig c = MpcConfig::quad_defaults();
  const auto m = hover_model();
  c.P = solve_dare(m.A, m.B, c.Q, c.R);
  c.t_max = 1e9;  // keep the tests independent of machine speed
  return c;
}

NmpcProblem hover_problem(const MpcConfig& c, const Vec& x0, const Vec3& target) {
  NmpcProblem p;
  p.model = hover_model();
  p.x0 = x0;
  Vec r = Vec::Zero(kNx);
  r.head(3) = target;
  p.reference.assign(static_cast<std::size_t>(c.N + 1), r);
  return p;
}

PredictedRegionSequence static_blob(const Vec3& c, int n, double var = 0.01) {
  PredictedRegionSequence r;
  for (int k = 0; k < n; ++k) {
    r.times.push_back(0.05 * (k + 1));
    r.means.push_back(c);
    r.covs.push_back(var * Mat3::Identity());
  }
  return r;
}

}  // namespace

TEST(Dare, SatisfiesRiccatiEquation) {
  const auto m = hover_model();
  const Mat Q = Mat::Identity(12, 12), R = Mat::Identity(4, 4);
  const Mat P = solve_dare(m.A, m.B, Q, R);
  const Mat K = (R + m.B.transpose() * P * m.B).ldlt().solve(m.B.transpose() * P * m.A);
  const Mat res = m.A.transpose() * P * m.A - P + Q - m.A.transpose() * P * m.B * K;
  EXPECT_LT(res.norm(), 1e-8 * P.norm());
  // closed loop is stable
  const Eigen::EigenSolver<Mat> es(m.A - m.B * K);
  EXPECT_LT(es.eigenvalues().cwiseAbs().maxCoeff(), 1.0);
}

TEST(Cost, ZeroAtReference) {
  const MpcConfig c = quad_config();
  const auto p = hover_problem(c, Vec::Zero(kNx), Vec3::Zero());
  ASSERT_LT(p.model.d.norm(), 1e-12);  // hover is an equilibrium
  const MpcTranscription tr(p, c, 0, StabilityMode::absent);
  EXPECT_EQ(tr.cost(Vec::Zero(tr.nz())), 0.0);
  EXPECT_EQ(tr.tracking_cost(Vec::Zero(tr.nz())), 0.0);
}

TEST(Cost, UnitDeviationContributesOne) {
  MpcConfig c;
  c.N = 2;
  c.complete(3, 1);
  NmpcProblem p;
  p.model = {Mat::Zero(3, 3), Mat::Zero(3, 1), Vec::Zero(3)};
  p.x0 = Vec::Unit(3, 1);
  p.reference.assign(3, Vec::Zero(3));
  const MpcTranscription tr(p, c, 0, StabilityMode::absent);
  EXPECT_DOUBLE_EQ(tr.cost(Vec::Zero(tr.nz())), 1.0);
}

TEST(Cost, GradientMatchesFiniteDifference) {
  MpcConfig c = quad_config();
  c.N = 6;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Vec x0(kNx);
  for (int i = 0; i < kNx; ++i) x0(i) = 0.1 * nd(rng);
  auto p = hover_problem(c, x0, Vec3(1, -1, 0.5));
  p.static_obstacles.push_back(Vec3(3, 0, 0));
  const MpcTranscription tr(p, c, 2, StabilityMode::absent);
  Vec z(tr.nz());
  for (int i = 0; i < z.size(); ++i) z(i) = 0.1 * nd(rng);
  const Vec g = tr.cost_gradient(z);
  for (int i = 0; i < z.size(); ++i) {
    const double h = 1e-3;  // exact for a quadratic up to rounding
    Vec zp = z, zm = z;
    zp(i) += h;
    zm(i) -= h;
    const double fd = (tr.cost(zp) - tr.cost(zm)) / (2 * h);
    EXPECT_NEAR(fd, g(i), 1e-6 * std::max(1.0, std::abs(g(i)))) << i;
  }
}

TEST(Constraints, RowInventory) {
  const MpcConfig c = quad_config();
  auto p = hover_problem(c, Vec::Zero(kNx), Vec3(1, 0, 0));
  {
    const MpcTranscription tr(p, c, 0, StabilityMode::absent);
    const auto cs = tr.constraints(Vec::Zero(tr.nz()));
    for (auto k : cs.kind) EXPECT_TRUE(k == RowKind::input || k == RowKind::rate || k == RowKind::state);
    EXPECT_EQ(tr.nS(), 0);
  }
  p.moving_regions.push_back(static_blob(Vec3(5, 0, 0), 25));
  const MpcTranscription tr(p, c, 0, StabilityMode::absent);
  const auto cs = tr.constraints(Vec::Zero(tr.nz()));
  EXPECT_EQ(cs.count(RowKind::moving_obstacle), 25);
  // level 1: one slack per obstacle row, one per step shared by the state bounds, none on inputs
  const MpcTranscription t1(p, c, 1, StabilityMode::absent);
  const auto c1 = t1.constraints(Vec::Zero(t1.nz()));
  EXPECT_EQ(t1.nS(), c.N + c1.count(RowKind::moving_obstacle));
  for (std::size_t r = 0; r < c1.kind.size(); ++r)
    if (c1.kind[r] == RowKind::input || c1.kind[r] == RowKind::rate) {
      EXPECT_EQ(c1.slack[r], -1);
    }
}

TEST(Constraints, StaticLinearizationIsConservative) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  const double d = 2.0;
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Vec3 o(nd(rng), nd(rng), nd(rng));
    const Vec3 pl = o + 4.0 * Vec3(nd(rng), nd(rng), nd(rng));
    const auto hs = static_obstacle_halfspace(pl, o, d);
    for (int s = 0; s < 200; ++s) {
      const Vec3 q = pl + d * Vec3(U(rng), U(rng), U(rng));
      if (hs.normal.dot(q) < hs.rhs) continue;
      ++checked;
      EXPECT_GE((q - o).norm(), d - 1e-12);
    }
  }
  EXPECT_GT(checked, 1000);
}

TEST(Stability, ZeroPreviousDemotes) {
  const MpcConfig c = quad_config();
  auto p = hover_problem(c, Vec::Zero(kNx), Vec3::Zero());
  NmpcSolution prev;
  prev.states.assign(static_cast<std::size_t>(c.N + 1), Vec::Zero(kNx));
  prev.controls.assign(static_cast<std::size_t>(c.N), Vec::Zero(kNu));
  prev.first_stage_cost = 0.0;
  p.prev = &prev;
  const MpcTranscription tr(p, c, 0, StabilityMode::soft);
  EXPECT_DOUBLE_EQ(tr.varpi(Vec::Zero(tr.nz())), -c.e_margin);
  const auto sol = solve_step(p, c);
  EXPECT_EQ(sol.stability_mode, StabilityMode::soft);
  EXPECT_DOUBLE_EQ(sol.varpi0, -c.e_margin);
}

TEST(Stability, IdenticalTrajectoriesDropCoupling) {
  MpcConfig c = quad_config();
  Vec x0 = Vec::Zero(kNx);
  x0(0) = 0.5;
  auto p = hover_problem(c, x0, Vec3::Zero());
  // previous prediction equal to the open-loop states of z = 0, shifted by one
  const MpcTranscription t0(p, c, 0, StabilityMode::absent);
  const auto X = t0.states(Vec::Zero(t0.nz()));
  NmpcSolution prev;
  prev.states.push_back(x0);
  for (int k = 0; k < c.N; ++k) prev.states.push_back(X[static_cast<std::size_t>(k)]);
  prev.controls.assign(static_cast<std::size_t>(c.N), Vec::Zero(kNu));
  prev.first_stage_cost = 0.7;
  p.prev = &prev;
  const MpcTranscription tr(p, c, 0, StabilityMode::hard);
  EXPECT_NEAR(tr.varpi(Vec::Zero(tr.nz())), 0.7 - c.e_margin, 1e-15);
}

TEST(SolveStep, ObstacleFreeIsOptimal) {
  const MpcConfig c = quad_config();
  const auto p = hover_problem(c, Vec::Zero(kNx), Vec3(1, 0.5, -0.3));
  const auto sol = solve_step(p, c);
  EXPECT_EQ(sol.status, SolveStatus::optimal);
  EXPECT_EQ(sol.slacks, 0.0);
  EXPECT_LE(sol.kkt_residual, 1e-6);
  ASSERT_EQ(sol.controls.size(), 25u);
  ASSERT_EQ(sol.states.size(), 26u);
  for (const auto& u : sol.controls) {
    EXPECT_TRUE((u.array() >= c.u_lo.array() - 1e-9).all());
    EXPECT_TRUE((u.array() <= c.u_hi.array() + 1e-9).all());
  }
  // the plan moves toward the target
  EXPECT_LT((sol.states.back().head(3) - Vec3(1, 0.5, -0.3)).norm(), Vec3(1, 0.5, -0.3).norm());
}

TEST(SolveStep, TargetInsideObstacleRelaxesObstacleRowsOnly) {
  const MpcConfig c = quad_config();
  auto p = hover_problem(c, Vec::Zero(kNx), Vec3::Zero());
  p.static_obstacles.push_back(Vec3(1.9, 0, 0));  // the host starts inside the safety ball
  const auto sol = solve_step(p, c);
  EXPECT_EQ(sol.status, SolveStatus::relaxed);
  EXPECT_EQ(sol.relax_level, 1);
  EXPECT_GT(sol.slack_obstacle, 0.0);
  EXPECT_EQ(sol.slack_state, 0.0);
  EXPECT_EQ(sol.disturbance, 0.0);
}

TEST(SolveStep, ZeroTimeBudgetFallsBack) {
  MpcConfig c = quad_config();
  c.t_max = 0.0;
  auto p = hover_problem(c, Vec::Zero(kNx), Vec3(1, 0, 0));
  p.u_prev = Vec::Constant(kNu, 5.0);
  const auto sol = solve_step(p, c);
  EXPECT_EQ(sol.status, SolveStatus::fallback);
  EXPECT_EQ(sol.attempts, 0);
  for (const auto& u : sol.controls) EXPECT_TRUE(u.isApprox(c.u_hi));
}

TEST(SolveStep, WorkClockCutsAfterOneIteration) {
  MpcConfig c = quad_config();
  Vec x0 = Vec::Zero(kNx);
  x0(3) = 1.0;
  auto p = hover_problem(c, x0, Vec3(2.5, 0, 0));
  p.static_obstacles.push_back(Vec3(5, 0.4, 0));
  const auto full = solve_step(p, c);
  ASSERT_GT(full.sqp_iterations, 1);
  // budget smaller than one QP: a single SQP iteration runs, every time
  c.t_max = 1e-6;
  const auto a = solve_step(p, c), b = solve_step(p, c);
  EXPECT_EQ(a.attempts, 1);
  EXPECT_EQ(a.status, b.status);
  if (a.status != SolveStatus::fallback) {
    EXPECT_EQ(a.sqp_iterations, 1);
  }
  for (std::size_t k = 0; k < a.controls.size(); ++k) EXPECT_EQ(a.controls[k], b.controls[k]);
}

TEST(SolveStep, RelaxationDoesNotRaiseCost) {
  const MpcConfig c = quad_config();
  Vec x0 = Vec::Zero(kNx);
  x0(3) = 1.0;
  auto p = hover_problem(c, x0, Vec3(2.5, 0, 0));
  p.static_obstacles.push_back(Vec3(5, 0.4, 0));
  p.moving_regions.push_back(static_blob(Vec3(3, -3.5, 0), 25));
  const MpcTranscription t0(p, c, 0, StabilityMode::absent);
  const MpcTranscription t1(p, c, 1, StabilityMode::absent);
  const auto r0 = solve_sqp(t0, Vec::Zero(t0.nz()), 50, 1e-6);
  const auto r1 = solve_sqp(t1, Vec::Zero(t1.nz()), 50, 1e-6);
  ASSERT_TRUE(r0.feasible);
  ASSERT_TRUE(r1.feasible);
  EXPECT_LE(t1.cost(r1.z), t0.cost(r0.z) + 1e-8);
}

TEST(SolveStep, ShiftProperty) {
  MpcConfig c = quad_config();
  c.use_stability = false;
  Vec x0 = Vec::Zero(kNx);
  x0.head(3) = Vec3(0.2, -0.1, 0.05);
  const auto p0 = hover_problem(c, x0, Vec3::Zero());
  const auto s0 = solve_step(p0, c);
  ASSERT_EQ(s0.status, SolveStatus::optimal);
  // the plant is the model itself
  auto p1 = hover_problem(c, s0.states[1], Vec3::Zero());
  p1.u_prev = s0.controls[0];
  p1.prev = &s0;
  const auto s1 = solve_step(p1, c);
  ASSERT_EQ(s1.status, SolveStatus::optimal);
  for (int k = 0; k + 1 < c.N; ++k) {
    EXPECT_LT((s1.controls[static_cast<std::size_t>(k)] - s0.controls[static_cast<std::size_t>(k + 1)]).cwiseAbs().maxCoeff(), 1e-4);
    EXPECT_LT((s1.states[static_cast<std::size_t>(k)] - s0.states[static_cast<std::size_t>(k + 1)]).cwiseAbs().maxCoeff(), 1e-4);
  }
}

TEST(SolveStep, MatchesGridOnDoubleIntegrator) {
  MpcConfig c;
  c.N = 3;
  c.complete(2, 1);
  c.P = Mat::Identity(2, 2);
  c.u_lo = Vec::Constant(1, -1.0);
  c.u_hi = Vec::Constant(1, 1.0);
  c.t_max = 1e9;
  NmpcProblem p;
  const double dt = 0.5;
  Mat A(2, 2);
  A << 1, dt, 0, 1;
  Mat B(2, 1);
  B << 0.5 * dt * dt, dt;
  p.model = {A, B, Vec::Zero(2)};
  p.x0 = Eigen::Vector2d(2.0, 0.5);
  p.reference.assign(4, Vec::Zero(2));
  const auto sol = solve_step(p, c);
  ASSERT_EQ(sol.status, SolveStatus::optimal);
  EXPECT_EQ(sol.sqp_iterations, 1);
  const MpcTranscription tr(p, c, 0, StabilityMode::absent);
  double grid_best = kInf;
  const double h = 0.2;
  for (int i = 0; i <= 10; ++i)
    for (int j = 0; j <= 10; ++j)
      for (int k = 0; k <= 10; ++k) grid_best = std::min(grid_best, tr.cost(Vec3(-1 + i * h, -1 + j * h, -1 + k * h)));
  Vec zs(3);
  for (int k = 0; k < 3; ++k) zs(k) = sol.controls[static_cast<std::size_t>(k)](0);
  const double Js = tr.cost(zs);
  EXPECT_LE(Js, grid_best + 1e-12);
  // worst-case increase over a half-cell displacement from the optimum
  const Vec g = tr.cost_gradient(zs);
  const Mat H = [&] {
    Mat Hm(3, 3);
    for (int a = 0; a < 3; ++a) Hm.col(a) = tr.cost_gradient(Vec::Unit(3, a)) - tr.cost_gradient(Vec::Zero(3));
    return Hm;
  }();
  const double lmax = Eigen::SelfAdjointEigenSolver<Mat>(H).eigenvalues().maxCoeff();
  const double bound = g.cwiseAbs().sum() * h / 2 + 0.5 * lmax * 3 * (h / 2) * (h / 2);
  EXPECT_LE(grid_best - Js, bound);
}

TEST(SolveStep, Deterministic) {
  const MpcConfig c = quad_config();
  Vec x0 = Vec::Zero(kNx);
  x0(3) = 1.0;
  auto p = hover_problem(c, x0, Vec3(2.5, 0, 0));
  p.static_obstacles.push_back(Vec3(4, 0.4, 0));
  p.moving_regions.push_back(static_blob(Vec3(3, -3.0, 0), 25));
  const auto a = solve_step(p, c);
  const auto b = solve_step(p, c);
  ASSERT_EQ(a.controls.size(), b.controls.size());
  for (std::size_t k = 0; k < a.controls.size(); ++k) EXPECT_TRUE(a.controls[k] == b.controls[k]);
  EXPECT_EQ(a.cost, b.cost);
  EXPECT_EQ(a.status, b.status);
}

TEST(SolveStep, ObstacleIsAvoided) {
  const MpcConfig c = quad_config();
  Vec x0 = Vec::Zero(kNx);
  x0(3) = 1.0;
  auto p = hover_problem(c, x0, Vec3(2.5, 0, 0));
  p.moving_regions.push_back(static_blob(Vec3(4.5, 0.3, 0), 25));
  const auto sol = solve_step(p, c);
  ASSERT_EQ(sol.status, SolveStatus::optimal);
  const auto ell = ellipsoid_from_gaussian(Vec3(4.5, 0.3, 0), 0.01 * Mat3::Identity(), c.confidence, c.d_safe);
  for (std::size_t k = 1; k < sol.states.size(); ++k) {
    const Vec3 pk = sol.states[k].head(3);
    const auto hs = chance_to_halfspace(pk, ell, c.phi);
    EXPECT_FALSE(hs.inside);
    EXPECT_GE(hs.residual(pk), -1e-6);
  }
}

TEST(Config, Validation) {
  MpcConfig c = quad_config();
  c.phi = 0.6;
  EXPECT_THROW(c.validate(12, 4), InputError);
  c = quad_config();
  c.R = -Mat::Identity(4, 4);
  EXPECT_THROW(c.validate(12, 4), InputError);
  c = quad_config();
  auto p = hover_problem(c, Vec::Zero(kNx), Vec3::Zero());
  p.reference.pop_back();
  EXPECT_THROW(solve_step(p, c), InputError);
}
