#include "ccmpc/qp.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace ccmpc;

namespace {

QpProblem random_qp(std::mt19937_64& rng, int n, int p, int m) {
  std::normal_distribution<double> nd;
  QpProblem qp;
  Mat G(n, n);
  for (int i = 0; i < G.size(); ++i) G(i) = nd(rng);
  qp.H = G * G.transpose() + 0.1 * Mat::Identity(n, n);
  qp.g = Vec(n);
  for (int i = 0; i < n; ++i) qp.g(i) = 3 * nd(rng);
  // constraints through a known feasible point keep the problem feasible
  Vec xf(n);
  for (int i = 0; i < n; ++i) xf(i) = nd(rng);
  qp.Aeq = Mat(p, n);
  for (int i = 0; i < qp.Aeq.size(); ++i) qp.Aeq(i) = nd(rng);
  qp.beq = qp.Aeq * xf;
  qp.Ain = Mat(m, n);
  for (int i = 0; i < qp.Ain.size(); ++i) qp.Ain(i) = nd(rng);
  qp.bin = qp.Ain * xf;
  for (int i = 0; i < m; ++i) qp.bin(i) -= std::abs(nd(rng));
  return qp;
}

// exhaustive active-set enumeration for tiny problems
double brute_force(const QpProblem& qp, Vec* best_x) {
  const int n = qp.n(), p = qp.p(), m = qp.m();
  double best = std::numeric_limits<double>::infinity();
  for (int mask = 0; mask < (1 << m); ++mask) {
    std::vector<int> rows;
    for (int i = 0; i < m; ++i)
      if (mask & (1 << i)) rows.push_back(i);
    const int a = p + static_cast<int>(rows.size());
    if (a > n) continue;
    Mat K = Mat::Zero(n + a, n + a);
    Vec rhs = Vec::Zero(n + a);
    K.topLeftCorner(n, n) = qp.H;
    rhs.head(n) = -qp.g;
    for (int i = 0; i < p; ++i) {
      K.block(0, n + i, n, 1) = qp.Aeq.row(i).transpose();
      K.block(n + i, 0, 1, n) = qp.Aeq.row(i);
      rhs(n + i) = qp.beq(i);
    }
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const int r = p + static_cast<int>(j);
      K.block(0, n + r, n, 1) = qp.Ain.row(rows[j]).transpose();
      K.block(n + r, 0, 1, n) = qp.Ain.row(rows[j]);
      rhs(n + r) = qp.bin(rows[j]);
    }
    Eigen::FullPivLU<Mat> lu(K);
    if (lu.rank() < n + a) continue;
    const Vec sol = lu.solve(rhs);
    const Vec x = sol.head(n);
    if (((qp.Ain * x - qp.bin).array() < -1e-9).any()) continue;
    const double f = 0.5 * x.dot(qp.H * x) + qp.g.dot(x);
    if (f < best) {
      best = f;
      *best_x = x;
    }
  }
  return best;
}

}  // namespace

TEST(Qp, UnconstrainedIsNewtonStep) {
  QpProblem qp;
  qp.H = Mat(2, 2);
  qp.H << 4, 1, 1, 3;
  qp.g = Vec(2);
  qp.g << 1, 2;
  qp.Aeq = Mat(0, 2);
  qp.beq = Vec(0);
  qp.Ain = Mat(0, 2);
  qp.bin = Vec(0);
  const auto r = solve_qp(qp);
  ASSERT_EQ(r.status, QpStatus::optimal);
  EXPECT_LT((r.x - qp.H.ldlt().solve(-qp.g)).norm(), 1e-14);
}

TEST(Qp, BoxedScalarReturnsNearerBound) {
  // min (x - 3)^2 s.t. -1 <= x <= 1
  QpProblem qp;
  qp.H = Mat::Constant(1, 1, 2.0);
  qp.g = Vec::Constant(1, -6.0);
  qp.Aeq = Mat(0, 1);
  qp.beq = Vec(0);
  qp.Ain = Mat(2, 1);
  qp.Ain << 1, -1;
  qp.bin = Vec(2);
  qp.bin << -1, -1;
  auto r = solve_qp(qp);
  ASSERT_EQ(r.status, QpStatus::optimal);
  EXPECT_NEAR(r.x(0), 1.0, 1e-14);
  EXPECT_NEAR(r.y_in(1), 4.0, 1e-12);
  qp.g(0) = 10.0;  // minimizer at -5
  r = solve_qp(qp);
  EXPECT_NEAR(r.x(0), -1.0, 1e-14);
}

TEST(Qp, DetectsInfeasibility) {
  QpProblem qp;
  qp.H = Mat::Identity(1, 1);
  qp.g = Vec::Zero(1);
  qp.Aeq = Mat(0, 1);
  qp.beq = Vec(0);
  qp.Ain = Mat(2, 1);
  qp.Ain << 1, -1;
  qp.bin = Vec(2);
  qp.bin << 1, 0;  // x >= 1 and x <= 0
  EXPECT_EQ(solve_qp(qp).status, QpStatus::infeasible);
  qp.Ain = Mat(0, 1);
  qp.bin = Vec(0);
  qp.Aeq = Mat(2, 1);
  qp.Aeq << 1, 2;
  qp.beq = Vec(2);
  qp.beq << 1, 1;
  EXPECT_EQ(solve_qp(qp).status, QpStatus::infeasible);
}

TEST(Qp, NotConvex) {
  QpProblem qp;
  qp.H = -Mat::Identity(2, 2);
  qp.g = Vec::Zero(2);
  qp.Aeq = Mat(0, 2);
  qp.beq = Vec(0);
  qp.Ain = Mat(0, 2);
  qp.bin = Vec(0);
  EXPECT_EQ(solve_qp(qp).status, QpStatus::not_convex);
}

TEST(Qp, MatchesActiveSetEnumeration) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + trial % 3, p = trial % 2, m = 3 + trial % 5;
    const QpProblem qp = random_qp(rng, n, p, m);
    const auto r = solve_qp(qp);
    ASSERT_EQ(r.status, QpStatus::optimal) << trial;
    Vec xb;
    const double fb = brute_force(qp, &xb);
    EXPECT_NEAR(r.objective, fb, 1e-8 * (1 + std::abs(fb))) << trial;
    EXPECT_LT((r.x - xb).norm(), 1e-6) << trial;
    EXPECT_LT(qp_kkt_residual(qp, r), 1e-8) << trial;
  }
}

TEST(Qp, LargerRandomKkt) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const QpProblem qp = random_qp(rng, 40, 5, 120);
    const auto r = solve_qp(qp);
    ASSERT_EQ(r.status, QpStatus::optimal);
    EXPECT_LT(qp_kkt_residual(qp, r), 1e-7);
  }
}

TEST(Qp, DegenerateDuplicateRows) {
  // the same bound listed three times
  QpProblem qp;
  qp.H = Mat::Identity(2, 2);
  qp.g = Vec(2);
  qp.g << -4, -4;
  qp.Aeq = Mat(0, 2);
  qp.beq = Vec(0);
  qp.Ain = Mat(4, 2);
  qp.Ain << -1, 0, -1, 0, -2, 0, 0, -1;
  qp.bin = Vec(4);
  qp.bin << -1, -1, -2, -1;
  const auto r = solve_qp(qp);
  ASSERT_EQ(r.status, QpStatus::optimal);
  EXPECT_NEAR(r.x(0), 1.0, 1e-12);
  EXPECT_NEAR(r.x(1), 1.0, 1e-12);
}
