#pragma once

// Dense strictly convex QP by the Goldfarb-Idnani dual active-set method:
//   min 1/2 x'Hx + g'x   s.t.  Aeq x = beq,  Ain x >= bin.
// The dual method starts from the unconstrained minimizer and adds violated
// constraints one at a time, so only the rows that matter ever enter.

#include "ccmpc/common.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace ccmpc {

enum class QpStatus { optimal, infeasible, max_iterations, not_convex };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal: return "optimal";
    case QpStatus::infeasible: return "infeasible";
    case QpStatus::max_iterations: return "max_iterations";
    case QpStatus::not_convex: return "not_convex";
  }
  return "?";
}

struct QpProblem {
  Mat H;
  Vec g;
  Mat Aeq;  // p x n
  Vec beq;
  Mat Ain;  // m x n
  Vec bin;

  int n() const { return static_cast<int>(H.rows()); }
  int p() const { return static_cast<int>(Aeq.rows()); }
  int m() const { return static_cast<int>(Ain.rows()); }
};

struct QpResult {
  QpStatus status = QpStatus::infeasible;
  Vec x;
  double objective = std::numeric_limits<double>::infinity();
  Vec y_eq;  // multipliers: H x + g = Aeq' y_eq + Ain' y_in, y_in >= 0
  Vec y_in;
  std::vector<int> active;  // inequality rows active at the solution
  int iterations = 0;
};

struct QpOptions {
  double feas_tol = 1e-9;  // relative to the row scale
  int max_iter = 0;        // 0: 10 (n + m)
};

class GoldfarbIdnani {
 public:
  explicit GoldfarbIdnani(const QpProblem& qp, const QpOptions& opt = {}) : qp_(qp), opt_(opt) {}

  QpResult solve() {
    const int n = qp_.n(), p = qp_.p(), m = qp_.m();
    QpResult res;
    if (qp_.g.size() != n || (p > 0 && qp_.Aeq.cols() != n) || (m > 0 && qp_.Ain.cols() != n) ||
        qp_.beq.size() != p || qp_.bin.size() != m)
      throw InputError("qp: dimension mismatch");
    Eigen::LLT<Mat> llt(qp_.H);
    if (llt.info() != Eigen::Success) {
      res.status = QpStatus::not_convex;
      return res;
    }
    // J = L^{-T}, so J' H J = I
    J_ = llt.matrixU().solve(Mat::Identity(n, n));
    R_ = Mat::Zero(n, n);
    iq_ = 0;
    r_norm_ = 1.0;
    active_.clear();
    u_.clear();
    x_ = -llt.solve(qp_.g);
    const int max_iter = opt_.max_iter > 0 ? opt_.max_iter : 10 * (n + m) + 10;
    int iter = 0;

    for (int i = 0; i < p; ++i) {
      const Vec np = qp_.Aeq.row(i).transpose();
      compute_direction(np);
      const double s = np.dot(x_) - qp_.beq(i);
      const double zn = z_.dot(np);
      if (z_.norm() <= 1e-14 * (1.0 + np.norm())) {
        if (std::abs(s) > opt_.feas_tol * (1.0 + std::abs(qp_.beq(i)))) return finish(QpStatus::infeasible, iter);
        continue;  // dependent and consistent
      }
      const double t = -s / zn;
      x_ += t * z_;
      for (int j = 0; j < iq_; ++j) u_[static_cast<std::size_t>(j)] -= t * r_(j);
      if (!add_constraint(i, t)) return finish(QpStatus::infeasible, iter);
    }

    std::vector<char> is_active(static_cast<std::size_t>(m), 0);
    while (true) {
      if (++iter > max_iter) return finish(QpStatus::max_iterations, iter);
      // most violated inequality, scaled by the row norm
      int ip = -1;
      double worst = 0.0;
      for (int i = 0; i < m; ++i) {
        if (is_active[static_cast<std::size_t>(i)]) continue;
        const double rn = row_norm(i);
        const double s = (qp_.Ain.row(i).dot(x_) - qp_.bin(i)) / rn;
        if (s < -opt_.feas_tol * (1.0 + std::abs(qp_.bin(i)) / rn) && s < worst) {
          worst = s;
          ip = i;
        }
      }
      if (ip < 0) return finish(QpStatus::optimal, iter);

      const Vec np = qp_.Ain.row(ip).transpose();
      double u_new = 0.0;
      while (true) {
        if (++iter > max_iter) return finish(QpStatus::max_iterations, iter);
        compute_direction(np);
        const double s = np.dot(x_) - qp_.bin(ip);
        // dual step length: first active inequality whose multiplier would hit zero
        double t1 = std::numeric_limits<double>::infinity();
        int l = -1;
        for (int j = 0; j < iq_; ++j) {
          const int c = active_[static_cast<std::size_t>(j)];
          if (c < p) continue;
          if (r_(j) > 0.0) {
            const double ratio = u_[static_cast<std::size_t>(j)] / r_(j);
            if (ratio < t1) {
              t1 = ratio;
              l = j;
            }
          }
        }
        // primal step length
        double t2 = std::numeric_limits<double>::infinity();
        const double zz = z_.squaredNorm();
        if (zz > 1e-28 * (1.0 + np.squaredNorm())) t2 = -s / z_.dot(np);
        const double t = std::min(t1, t2);
        if (!std::isfinite(t)) return finish(QpStatus::infeasible, iter);
        if (!std::isfinite(t2)) {
          // no primal progress possible; move in the dual space and drop the blocking row
          for (int j = 0; j < iq_; ++j) u_[static_cast<std::size_t>(j)] -= t * r_(j);
          u_new += t;
          is_active[static_cast<std::size_t>(active_[static_cast<std::size_t>(l)] - p)] = 0;
          drop_constraint(l);
          continue;
        }
        x_ += t * z_;
        for (int j = 0; j < iq_; ++j) u_[static_cast<std::size_t>(j)] -= t * r_(j);
        u_new += t;
        if (t == t2) {
          if (!add_constraint(p + ip, u_new)) {
            // numerically dependent; treat as satisfied to avoid cycling
            warn("qp: dependent constraint skipped");
          } else {
            is_active[static_cast<std::size_t>(ip)] = 1;
          }
          break;
        }
        is_active[static_cast<std::size_t>(active_[static_cast<std::size_t>(l)] - p)] = 0;
        drop_constraint(l);
      }
    }
  }

 private:
  double row_norm(int i) const {
    const double r = qp_.Ain.row(i).norm();
    return r > 0.0 ? r : 1.0;
  }

  void compute_direction(const Vec& np) {
    const int n = qp_.n();
    d_ = J_.transpose() * np;
    z_ = J_.rightCols(n - iq_) * d_.tail(n - iq_);
    r_ = Vec(iq_);
    if (iq_ > 0)
      r_ = R_.topLeftCorner(iq_, iq_).triangularView<Eigen::Upper>().solve(d_.head(iq_));
  }

  // Givens rotations zero d below position iq, updating J; R gains column d(0:iq).
  bool add_constraint(int id, double u) {
    const int n = qp_.n();
    for (int j = n - 1; j > iq_; --j) {
      double cc = d_(j - 1), ss = d_(j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      d_(j) = 0.0;
      ss /= h;
      cc /= h;
      if (cc < 0.0) {
        cc = -cc;
        ss = -ss;
        d_(j - 1) = -h;
      } else {
        d_(j - 1) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = 0; k < n; ++k) {
        const double a = J_(k, j - 1), b = J_(k, j);
        J_(k, j - 1) = a * cc + b * ss;
        J_(k, j) = xny * (a + J_(k, j - 1)) - b;
      }
    }
    if (std::abs(d_(iq_)) <= 1e-14 * r_norm_) return false;
    R_.col(iq_).head(iq_ + 1) = d_.head(iq_ + 1);
    r_norm_ = std::max(r_norm_, std::abs(d_(iq_)));
    ++iq_;
    active_.push_back(id);
    u_.push_back(u);
    return true;
  }

  void drop_constraint(int pos) {
    const int n = qp_.n();
    active_.erase(active_.begin() + pos);
    u_.erase(u_.begin() + pos);
    for (int j = pos; j < iq_ - 1; ++j) R_.col(j) = R_.col(j + 1);
    R_.col(iq_ - 1).setZero();
    --iq_;
    // restore upper-triangular R with rotations that also act on J
    for (int j = pos; j < iq_; ++j) {
      double cc = R_(j, j), ss = R_(j + 1, j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      cc /= h;
      ss /= h;
      R_(j + 1, j) = 0.0;
      if (cc < 0.0) {
        R_(j, j) = -h;
        cc = -cc;
        ss = -ss;
      } else {
        R_(j, j) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = j + 1; k < iq_; ++k) {
        const double a = R_(j, k), b = R_(j + 1, k);
        R_(j, k) = a * cc + b * ss;
        R_(j + 1, k) = xny * (a + R_(j, k)) - b;
      }
      for (int k = 0; k < n; ++k) {
        const double a = J_(k, j), b = J_(k, j + 1);
        J_(k, j) = a * cc + b * ss;
        J_(k, j + 1) = xny * (J_(k, j) + a) - b;
      }
    }
  }

  QpResult finish(QpStatus st, int iter) const {
    QpResult res;
    res.status = st;
    res.iterations = iter;
    res.x = x_;
    res.objective = 0.5 * x_.dot(qp_.H * x_) + qp_.g.dot(x_);
    res.y_eq = Vec::Zero(qp_.p());
    res.y_in = Vec::Zero(qp_.m());
    for (std::size_t j = 0; j < active_.size(); ++j) {
      const int c = active_[j];
      if (c < qp_.p()) {
        res.y_eq(c) = u_[j];
      } else {
        res.y_in(c - qp_.p()) = u_[j];
        res.active.push_back(c - qp_.p());
      }
    }
    return res;
  }

  const QpProblem& qp_;
  QpOptions opt_;
  Mat J_, R_;
  Vec x_, d_, z_, r_;
  int iq_ = 0;
  double r_norm_ = 1.0;
  std::vector<int> active_;
  std::vector<double> u_;
};

inline QpResult solve_qp(const QpProblem& qp, const QpOptions& opt = {}) { return GoldfarbIdnani(qp, opt).solve(); }

/// Largest violation of the first-order optimality conditions of a QP result.
inline double qp_kkt_residual(const QpProblem& qp, const QpResult& r) {
  Vec grad = qp.H * r.x + qp.g;
  if (qp.p() > 0) grad -= qp.Aeq.transpose() * r.y_eq;
  if (qp.m() > 0) grad -= qp.Ain.transpose() * r.y_in;
  double res = grad.cwiseAbs().maxCoeff();
  for (int i = 0; i < qp.p(); ++i) res = std::max(res, std::abs(qp.Aeq.row(i).dot(r.x) - qp.beq(i)));
  for (int i = 0; i < qp.m(); ++i) {
    const double s = qp.Ain.row(i).dot(r.x) - qp.bin(i);
    res = std::max(res, std::max(0.0, -s));
    res = std::max(res, std::max(0.0, -r.y_in(i)));
    res = std::max(res, std::abs(r.y_in(i) * s));
  }
  return res;
}

}  // namespace ccmpc
