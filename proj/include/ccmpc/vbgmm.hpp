#pragma once

// Variational Bayesian Gaussian mixture (Dirichlet + Normal-Wishart priors),
// its Student-t predictive mixture, and conditioning on a history block.

#include "ccmpc/common.hpp"

#include <boost/math/special_functions/digamma.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace ccmpc {

struct VbgmmPrior {
  double alpha0 = 1.0;
  double beta0 = 1.0;
  double nu0 = 0.0;  // <= 0 means "D - 1 + 5", see default_prior
  Vec m0;
  Mat W0;
  int K_init = 30;

  void validate(int D) const {
    if (!(alpha0 > 0 && beta0 > 0)) throw InputError("VbgmmPrior: alpha0 and beta0 must be positive");
    if (!(nu0 > D - 1)) throw InputError("VbgmmPrior: nu0 must exceed D - 1");
    if (m0.size() != D || W0.rows() != D || W0.cols() != D) throw InputError("VbgmmPrior: dimension mismatch");
    if (K_init < 1) throw InputError("VbgmmPrior: K_init must be positive");
    Eigen::LLT<Mat> llt(W0);
    if (llt.info() != Eigen::Success || (W0 - W0.transpose()).cwiseAbs().maxCoeff() > 1e-9 * W0.norm())
      throw InputError("VbgmmPrior: W0 must be symmetric positive definite");
  }
};

/// Data-driven prior: m0 = sample mean, W0 = inverse sample covariance (ridge 1e-6 I),
/// nu0 = D - 1 + nu_extra.
inline VbgmmPrior default_prior(const Eigen::Ref<const Mat>& X, int K_init = 30, double alpha0 = 1.0,
                                double beta0 = 1.0, double nu_extra = 5.0) {
  const Eigen::Index D = X.cols();
  if (X.rows() < 2) throw InputError("default_prior: need at least two samples");
  VbgmmPrior p;
  p.alpha0 = alpha0;
  p.beta0 = beta0;
  p.nu0 = static_cast<double>(D) - 1.0 + nu_extra;
  p.K_init = K_init;
  p.m0 = X.colwise().mean().transpose();
  const Mat C = X.rowwise() - p.m0.transpose();
  Mat cov = (C.transpose() * C) / static_cast<double>(X.rows() - 1);
  cov.diagonal().array() += 1e-6;
  p.W0 = symmetrize(cov.llt().solve(Mat::Identity(D, D)));
  return p;
}

struct VbgmmPosterior {
  int D = 0;
  VbgmmPrior prior;
  std::vector<double> alpha, beta, nu;
  std::vector<Vec> m;
  std::vector<Mat> W;
  // W_k^{-1} as produced by the update. The scales are badly conditioned on
  // smooth-trajectory features, so the bound is evaluated from this factor
  // rather than from a re-inverted W_k. Filled from W when absent.
  std::vector<Mat> W_inv;
  std::vector<double> elbo_trace;
  int iterations = 0;
  bool converged = false;
  std::size_t n_samples = 0;

  int K() const { return static_cast<int>(alpha.size()); }

  Eigen::LLT<Mat> scale_inverse_llt(int k) const {
    const auto ku = static_cast<std::size_t>(k);
    Eigen::LLT<Mat> llt(ku < W_inv.size() ? W_inv[ku] : Mat(W[ku].llt().solve(Mat::Identity(D, D))));
    if (llt.info() != Eigen::Success) throw NumericalError("vbgmm: W_k not positive definite");
    return llt;
  }

  bool dormant(int k) const {
    return alpha[static_cast<std::size_t>(k)] - prior.alpha0 < 1e-3 * static_cast<double>(n_samples);
  }

  int dominant_count() const {
    int c = 0;
    for (int k = 0; k < K(); ++k) c += dormant(k) ? 0 : 1;
    return c;
  }

  /// E[pi_k] = alpha_k / sum alpha
  std::vector<double> expected_weights() const {
    const double s = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    std::vector<double> w(alpha.size());
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = alpha[k] / s;
    return w;
  }
};

namespace detail {

inline double log_sum_exp(const Eigen::Ref<const Vec>& v) {
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.array() - mx).exp().sum());
}

/// Cholesky with escalating jitter. Returns the factor of A + jitter I.
inline Eigen::LLT<Mat> robust_llt(const Mat& A, const char* what) {
  Eigen::LLT<Mat> llt(A);
  if (llt.info() == Eigen::Success) return llt;
  const double scale = std::max(1.0, A.diagonal().cwiseAbs().maxCoeff());
  for (double jit = 1e-8; jit < 1e-2; jit *= 10.0) {
    Mat Aj = A;
    Aj.diagonal().array() += jit * scale;
    llt.compute(Aj);
    if (llt.info() == Eigen::Success) {
      warn(std::string(what) + ": Cholesky needed jitter");
      return llt;
    }
  }
  throw NumericalError(std::string(what) + ": matrix not positive definite");
}

inline double log_det_llt(const Eigen::LLT<Mat>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

/// ln Gamma_D(a), multivariate gamma
inline double lmvgamma(int D, double a) {
  double s = 0.25 * D * (D - 1) * std::log(kPi);
  for (int i = 1; i <= D; ++i) s += std::lgamma(a + 0.5 * (1 - i));
  return s;
}

inline double digamma(double x) { return boost::math::digamma(x); }

/// E[ln |Lambda|] under Wishart(W, nu) given ln|W|.
inline double expected_log_det(int D, double nu, double log_det_W) {
  double s = D * std::log(2.0) + log_det_W;
  for (int i = 1; i <= D; ++i) s += digamma(0.5 * (nu + 1 - i));
  return s;
}

/// ln B(W, nu), the Wishart normalizer.
inline double log_wishart_norm(int D, double nu, double log_det_W) {
  return -0.5 * nu * log_det_W - 0.5 * nu * D * std::log(2.0) - lmvgamma(D, 0.5 * nu);
}

}  // namespace detail

/// Variational coordinate ascent. Data rows are samples.
class VbgmmFitter {
 public:
  VbgmmFitter(const Eigen::Ref<const Mat>& X, VbgmmPrior prior) : X_(X), prior_(std::move(prior)) {
    D_ = static_cast<int>(X_.cols());
    N_ = static_cast<int>(X_.rows());
    if (N_ <= D_) throw InputError("vbgmm fit: need more samples than dimensions");
    if (!X_.allFinite()) throw InputError("vbgmm fit: non-finite data");
    if (prior_.nu0 <= 0) prior_.nu0 = D_ - 1 + 5.0;
    prior_.validate(D_);
    K_ = std::min(prior_.K_init, N_);
    W0inv_ = symmetrize(prior_.W0.llt().solve(Mat::Identity(D_, D_)));
  }

  /// Responsibilities by farthest-point hard assignment; the first center is drawn with `seed`.
  Mat initial_responsibilities(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, N_ - 1);
    std::vector<int> centers{pick(rng)};
    Vec mind = (X_.rowwise() - X_.row(centers[0])).rowwise().squaredNorm();
    while (static_cast<int>(centers.size()) < K_) {
      Eigen::Index idx;
      mind.maxCoeff(&idx);
      centers.push_back(static_cast<int>(idx));
      mind = mind.cwiseMin((X_.rowwise() - X_.row(idx)).rowwise().squaredNorm());
    }
    Mat R = Mat::Zero(N_, K_);
    for (int n = 0; n < N_; ++n) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int k = 0; k < K_; ++k) {
        const double d = (X_.row(n) - X_.row(centers[static_cast<std::size_t>(k)])).squaredNorm();
        if (d < bd) {
          bd = d;
          best = k;
        }
      }
      R(n, best) = 1.0;
    }
    return R;
  }

  /// Posterior parameters from responsibilities.
  VbgmmPosterior m_step(const Mat& R) const {
    VbgmmPosterior q;
    q.D = D_;
    q.prior = prior_;
    q.n_samples = static_cast<std::size_t>(N_);
    for (int k = 0; k < K_; ++k) {
      const Vec r = R.col(k);
      const double Nk = r.sum();
      Vec xbar = prior_.m0;
      Mat S = Mat::Zero(D_, D_);  // Nk * S_k
      if (Nk > 1e-12) {
        xbar = (X_.transpose() * r) / Nk;
        const Mat C = X_.rowwise() - xbar.transpose();
        S = C.transpose() * r.asDiagonal() * C;
      }
      const double bk = prior_.beta0 + Nk;
      const Vec d = xbar - prior_.m0;
      Mat Winv = W0inv_ + S + (prior_.beta0 * Nk / bk) * d * d.transpose();
      Winv = symmetrize(Winv);
      auto llt = detail::robust_llt(Winv, "vbgmm m-step");
      q.alpha.push_back(prior_.alpha0 + Nk);
      q.beta.push_back(bk);
      q.nu.push_back(prior_.nu0 + Nk);
      q.m.push_back((prior_.beta0 * prior_.m0 + Nk * xbar) / bk);
      q.W.push_back(symmetrize(llt.solve(Mat::Identity(D_, D_))));
      q.W_inv.push_back(Winv);
    }
    return q;
  }

  /// ln rho_nk (N x K), the expected complete-data log-likelihood per datum and component.
  Mat log_rho(const VbgmmPosterior& q) const { return log_rho(q, X_); }

  static Mat log_rho(const VbgmmPosterior& q, const Eigen::Ref<const Mat>& X) {
    const int K = q.K(), D = q.D;
    const Eigen::Index N = X.rows();
    const double asum = std::accumulate(q.alpha.begin(), q.alpha.end(), 0.0);
    const double dg_sum = detail::digamma(asum);
    Mat L(N, K);
    for (int k = 0; k < K; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      const auto llt = q.scale_inverse_llt(k);
      const double elogdet = detail::expected_log_det(D, q.nu[ku], -detail::log_det_llt(llt));
      const double elogpi = detail::digamma(q.alpha[ku]) - dg_sum;
      // (x - m)^T W (x - m) = |L^{-1} (x - m)|^2 with W^{-1} = L L^T
      const Mat C = (X.rowwise() - q.m[ku].transpose()).transpose();
      const Vec quad = llt.matrixL().solve(C).colwise().squaredNorm().transpose();
      L.col(k) = (elogpi + 0.5 * elogdet - 0.5 * D * std::log(2.0 * kPi) - 0.5 * D / q.beta[ku]) -
                 0.5 * q.nu[ku] * quad.array();
    }
    return L;
  }

  static Mat responsibilities_from_log_rho(const Mat& L) {
    Mat R(L.rows(), L.cols());
    for (Eigen::Index n = 0; n < L.rows(); ++n) {
      const double lse = detail::log_sum_exp(L.row(n).transpose());
      R.row(n) = (L.row(n).array() - lse).exp();
    }
    return R;
  }

  /// Bound at q with optimal responsibilities: sum_n lse_k ln rho_nk - KL(q(pi)) - sum_k KL(q(mu_k, Lambda_k)).
  static double elbo(const VbgmmPosterior& q, const Eigen::Ref<const Mat>& X) {
    const Mat L = log_rho(q, X);
    double data = 0.0;
    for (Eigen::Index n = 0; n < L.rows(); ++n) data += detail::log_sum_exp(L.row(n).transpose());
    return data - kl_terms(q);
  }

  static double kl_terms(const VbgmmPosterior& q) {
    const int K = q.K(), D = q.D;
    const auto& pr = q.prior;
    const double asum = std::accumulate(q.alpha.begin(), q.alpha.end(), 0.0);
    const double dg_sum = detail::digamma(asum);
    double kl_dir = std::lgamma(asum) - std::lgamma(K * pr.alpha0) + K * std::lgamma(pr.alpha0);
    for (int k = 0; k < K; ++k) {
      const double a = q.alpha[static_cast<std::size_t>(k)];
      kl_dir += -std::lgamma(a) + (a - pr.alpha0) * (detail::digamma(a) - dg_sum);
    }
    Eigen::LLT<Mat> llt0(pr.W0);
    const double ld0 = detail::log_det_llt(llt0);
    const Mat W0inv = symmetrize(llt0.solve(Mat::Identity(D, D)));
    const Mat G0 = Eigen::LLT<Mat>(W0inv).matrixL();
    double kl_nw = 0.0;
    for (int k = 0; k < K; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      const auto llt = q.scale_inverse_llt(k);
      const double ldk = -detail::log_det_llt(llt);
      const double nuk = q.nu[ku], bk = q.beta[ku];
      const double elogdet = detail::expected_log_det(D, nuk, ldk);
      const Vec d = q.m[ku] - pr.m0;
      const double kl_normal =
          0.5 * (D * pr.beta0 / bk + pr.beta0 * nuk * llt.matrixL().solve(d).squaredNorm() - D + D * std::log(bk / pr.beta0));
      const double kl_wish = detail::log_wishart_norm(D, nuk, ldk) - detail::log_wishart_norm(D, pr.nu0, ld0) +
                             0.5 * (nuk - pr.nu0) * elogdet - 0.5 * nuk * D +
                             0.5 * nuk * llt.matrixL().solve(G0).squaredNorm();
      kl_nw += kl_normal + kl_wish;
    }
    return kl_dir + kl_nw;
  }

  int K() const { return K_; }
  const VbgmmPrior& prior() const { return prior_; }

 private:
  Mat X_;
  VbgmmPrior prior_;
  int D_ = 0, N_ = 0, K_ = 0;
  Mat W0inv_;
};

struct FitOptions {
  int max_iter = 2000;
  double tol = 1e-12;
  std::uint64_t seed = 0;
  /// Try removing weak components after convergence and keep the removal if the bound improves.
  bool deletion_moves = true;
  int max_deletion_attempts = 12;
  /// Optional per-iteration hook, receives responsibilities (used by tests).
  std::function<void(const Mat&)> on_responsibilities;
};

namespace detail {

/// Coordinate ascent from responsibilities R until |delta bound| < tol or max_iter bounds.
inline VbgmmPosterior ascend(const VbgmmFitter& fitter, Mat R, const FitOptions& opt) {
  VbgmmPosterior q = fitter.m_step(R);
  std::vector<double> trace;
  for (int it = 0;; ++it) {
    const Mat L = fitter.log_rho(q);
    double data = 0.0;
    for (Eigen::Index n = 0; n < L.rows(); ++n) data += log_sum_exp(L.row(n).transpose());
    const double bound = data - VbgmmFitter::kl_terms(q);
    if (!std::isfinite(bound)) throw NumericalError("vbgmm fit: non-finite bound");
    trace.push_back(bound);
    if (trace.size() >= 2 && std::abs(trace.back() - trace[trace.size() - 2]) < opt.tol) {
      q.converged = true;
      break;
    }
    if (it + 1 >= opt.max_iter) break;
    R = VbgmmFitter::responsibilities_from_log_rho(L);
    if (opt.on_responsibilities) opt.on_responsibilities(R);
    q = fitter.m_step(R);
  }
  q.iterations = static_cast<int>(trace.size());
  q.elbo_trace = std::move(trace);
  return q;
}

}  // namespace detail

/// Fit by coordinate ascent. elbo_trace is the bound sequence of the run that produced the
/// returned posterior; run_traces (if given) receives every accepted run in order.
inline VbgmmPosterior fit(const Eigen::Ref<const Mat>& X, const VbgmmPrior& prior, const FitOptions& opt = {},
                          std::vector<std::vector<double>>* run_traces = nullptr) {
  VbgmmFitter fitter(X, prior);
  VbgmmPosterior best = detail::ascend(fitter, fitter.initial_responsibilities(opt.seed), opt);
  if (run_traces) run_traces->push_back(best.elbo_trace);
  if (!opt.deletion_moves) return best;

  // Components stuck splitting one cluster are a local optimum of the bound; removing the
  // weakest and re-ascending escapes it when that raises the bound.
  int attempts = 0;
  std::vector<bool> tried(static_cast<std::size_t>(best.K()), false);
  while (attempts < opt.max_deletion_attempts) {
    int victim = -1;
    for (int k = 0; k < best.K(); ++k) {
      if (best.dormant(k) || tried[static_cast<std::size_t>(k)]) continue;
      if (victim < 0 || best.alpha[static_cast<std::size_t>(k)] < best.alpha[static_cast<std::size_t>(victim)])
        victim = k;
    }
    if (victim < 0 || best.dominant_count() <= 1) break;
    ++attempts;
    tried[static_cast<std::size_t>(victim)] = true;
    Mat L = fitter.log_rho(best);
    L.col(victim).setConstant(-std::numeric_limits<double>::infinity());
    VbgmmPosterior cand = detail::ascend(fitter, VbgmmFitter::responsibilities_from_log_rho(L), opt);
    if (cand.elbo_trace.back() > best.elbo_trace.back()) {
      best = std::move(cand);
      if (run_traces) run_traces->push_back(best.elbo_trace);
      std::fill(tried.begin(), tried.end(), false);
    }
  }
  return best;
}

inline double elbo(const VbgmmPosterior& q, const Eigen::Ref<const Mat>& X) {
  if (X.cols() != q.D) throw InputError("elbo: dimension mismatch");
  return VbgmmFitter::elbo(q, X);
}

// ---------------------------------------------------------------------------
// Predictive Student-t mixture

struct StudentMixture {
  std::vector<double> weights;
  std::vector<Vec> means;
  std::vector<Mat> precisions;
  std::vector<double> dofs;

  int K() const { return static_cast<int>(weights.size()); }
  int D() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
};

/// ln St(x | mu, Lambda, nu) with the scale given as a covariance-like matrix S = Lambda^{-1}.
inline double log_student_t_scale(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& mu,
                                  const Eigen::LLT<Mat>& scale_llt, double nu) {
  const double D = static_cast<double>(x.size());
  const Vec d = x - mu;
  const double delta2 = scale_llt.matrixL().solve(d).squaredNorm();
  return std::lgamma(0.5 * (nu + D)) - std::lgamma(0.5 * nu) - 0.5 * detail::log_det_llt(scale_llt) -
         0.5 * D * std::log(nu * kPi) - 0.5 * (nu + D) * std::log1p(delta2 / nu);
}

inline double student_mixture_density(const StudentMixture& mix, const Eigen::Ref<const Vec>& x) {
  double s = 0.0;
  for (int k = 0; k < mix.K(); ++k) {
    const auto ku = static_cast<std::size_t>(k);
    Eigen::LLT<Mat> llt(mix.precisions[ku].inverse());
    s += mix.weights[ku] * std::exp(log_student_t_scale(x, mix.means[ku], llt, mix.dofs[ku]));
  }
  return s;
}

inline StudentMixture predictive_joint(const VbgmmPosterior& q, bool include_dormant = true) {
  StudentMixture mix;
  double wsum = 0.0;
  for (int k = 0; k < q.K(); ++k) {
    if (!include_dormant && q.dormant(k) && q.dominant_count() > 0) continue;
    const auto ku = static_cast<std::size_t>(k);
    const double dof = q.nu[ku] + 1.0 - q.D;
    if (!(dof > 0.0)) throw DomainError("predictive_joint: insufficient degrees of freedom");
    mix.weights.push_back(q.alpha[ku]);
    mix.means.push_back(q.m[ku]);
    mix.precisions.push_back((dof * q.beta[ku] / (1.0 + q.beta[ku])) * q.W[ku]);
    mix.dofs.push_back(dof);
    wsum += q.alpha[ku];
  }
  for (auto& w : mix.weights) w /= wsum;
  return mix;
}

/// Index partition of the joint feature vector.
struct FeatureSplit {
  std::vector<int> history;
  std::vector<int> future;

  static FeatureSplit leading(int D_h, int D) {
    FeatureSplit s;
    for (int i = 0; i < D; ++i) (i < D_h ? s.history : s.future).push_back(i);
    return s;
  }
};

struct ConditionalPrediction {
  std::vector<double> weights;
  std::vector<Vec> cond_means;
  std::vector<Mat> cond_covs;    // covariance of each conditional component
  std::vector<Mat> cond_scales;  // Student-t scale (inverse precision)
  std::vector<double> cond_dofs;
  Vec pooled_mean;
  Mat pooled_cov;

  double density(const Eigen::Ref<const Vec>& a_f) const {
    double s = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      Eigen::LLT<Mat> llt(cond_scales[k]);
      s += weights[k] * std::exp(log_student_t_scale(a_f, cond_means[k], llt, cond_dofs[k]));
    }
    return s;
  }
};

namespace detail {
inline Mat select(const Mat& M, const std::vector<int>& r, const std::vector<int>& c) {
  Mat out(r.size(), c.size());
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < c.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = M(r[i], c[j]);
  return out;
}
inline Vec select(const Vec& v, const std::vector<int>& r) {
  Vec out(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(r[i]);
  return out;
}
}  // namespace detail

/// Student-t conditional of the future block given the history block, per component,
/// with the pooled first and second moments of the resulting mixture.
inline ConditionalPrediction condition_on_history(const StudentMixture& mix, const Eigen::Ref<const Vec>& a_h,
                                                  const FeatureSplit& split) {
  const int D = mix.D();
  const int Dh = static_cast<int>(split.history.size());
  const int Df = static_cast<int>(split.future.size());
  if (Dh + Df != D || a_h.size() != Dh || Df == 0) throw InputError("condition_on_history: bad partition");
  ConditionalPrediction out;
  std::vector<double> logw;
  for (int k = 0; k < mix.K(); ++k) {
    const auto ku = static_cast<std::size_t>(k);
    const Mat S = symmetrize(mix.precisions[ku].llt().solve(Mat::Identity(D, D)));
    const Vec mh = detail::select(mix.means[ku], split.history);
    const Vec mf = detail::select(mix.means[ku], split.future);
    Mat Shh = detail::select(S, split.history, split.history);
    const Mat Sfh = detail::select(S, split.future, split.history);
    const Mat Sff = detail::select(S, split.future, split.future);
    Eigen::LLT<Mat> hh(Shh);
    if (hh.info() != Eigen::Success) {
      warn("condition_on_history: singular history block, regularizing");
      Shh.diagonal().array() += 1e-9;
      hh.compute(Shh);
      if (hh.info() != Eigen::Success) throw NumericalError("condition_on_history: history block not invertible");
    }
    const double nu = mix.dofs[ku];
    const Vec dh = a_h - mh;
    const double delta2 = hh.matrixL().solve(dh).squaredNorm();
    const Mat G = hh.solve(Sfh.transpose()).transpose();  // Sfh Shh^{-1}
    const double nu_c = nu + Dh;
    Mat scale = symmetrize(((nu + delta2) / nu_c) * (Sff - G * Sfh.transpose()));
    Mat cov = scale;
    if (nu_c > 2.0) {
      cov *= nu_c / (nu_c - 2.0);
    } else {
      warn("condition_on_history: conditional dof <= 2, covariance undefined; using the scale");
    }
    out.cond_means.push_back(mf + G * dh);
    out.cond_scales.push_back(scale);
    out.cond_covs.push_back(cov);
    out.cond_dofs.push_back(nu_c);
    logw.push_back(std::log(mix.weights[ku]) + log_student_t_scale(a_h, mh, hh, nu));
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  double s = 0.0;
  for (double lw : logw) s += std::exp(lw - mx);
  for (double lw : logw) out.weights.push_back(std::exp(lw - mx) / s);
  out.pooled_mean = Vec::Zero(Df);
  for (std::size_t k = 0; k < out.weights.size(); ++k) out.pooled_mean += out.weights[k] * out.cond_means[k];
  out.pooled_cov = Mat::Zero(Df, Df);
  for (std::size_t k = 0; k < out.weights.size(); ++k) {
    const Vec d = out.cond_means[k] - out.pooled_mean;
    out.pooled_cov += out.weights[k] * (out.cond_covs[k] + d * d.transpose());
  }
  out.pooled_cov = symmetrize(out.pooled_cov);
  return out;
}

}  // namespace ccmpc
