#pragma once

#include "mbll/linalg.hpp"
#include "mbll/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mbll {

// Matrix-Normal MN(M, V, K): V is the p x p row covariance, K the n x n
// column covariance. vec(X) ~ N(vec(M), K (x) V).
struct MatNormal {
  Matrix M;
  Matrix V;
  Matrix K;

  MatNormal(Matrix mean, Matrix row_cov, Matrix col_cov)
      : M(std::move(mean)), V(std::move(row_cov)), K(std::move(col_cov)) {
    if (V.rows() != M.rows() || K.rows() != M.cols()) {
      throw std::invalid_argument("MatNormal: covariance dimensions do not match mean");
    }
    Chol cv(V, "MatNormal.V");
    Chol ck(K, "MatNormal.K");
  }

  Eigen::Index rows() const { return M.rows(); }
  Eigen::Index cols() const { return M.cols(); }
};

// Matrix-T MT(M, Sigma, Omega, nu): heavy-tailed law obtained by compounding
// MN(M, V, Omega) with V ~ IW(Sigma, nu + 2p). Second moments exist iff
// nu > 2, with E[(T-M) Q (T-M)^T] = tr(Q^T Omega) Sigma / (nu - 2).
struct MatT {
  Matrix M;
  Matrix Sigma;
  Matrix Omega;
  double nu = 0.0;

  MatT(Matrix mean, Matrix row_scale, Matrix col_scale, double dof)
      : M(std::move(mean)),
        Sigma(std::move(row_scale)),
        Omega(std::move(col_scale)),
        nu(dof) {
    if (Sigma.rows() != M.rows() || Omega.rows() != M.cols()) {
      throw std::invalid_argument("MatT: scale dimensions do not match mean");
    }
    if (!(nu > 0)) throw std::invalid_argument("MatT: nu must be > 0");
    Chol cs(Sigma, "MatT.Sigma");
    Chol co(Omega, "MatT.Omega");
  }

  Eigen::Index rows() const { return M.rows(); }
  Eigen::Index cols() const { return M.cols(); }
};

// Inverse Wishart IW(Psi, nu) in the convention with density
//   |Psi|^{(nu-p-1)/2} |V|^{-nu/2} exptr(-1/2 V^-1 Psi) / (2^{(nu-p-1)p/2} Gamma_p((nu-p-1)/2)),
// i.e. nu relates to the more common degrees-of-freedom m by m = nu - p - 1.
// Mean Psi/(nu-2p-2), mode Psi/nu, E[V^-1] = (nu-p-1) Psi^-1.
struct InvWishart {
  Matrix Psi;
  double nu = 0.0;

  InvWishart(Matrix location, double dof) : Psi(std::move(location)), nu(dof) {
    const double p = static_cast<double>(Psi.rows());
    if (!(nu > 2.0 * p)) {
      throw std::invalid_argument("InvWishart: nu must exceed 2p");
    }
    Chol c(Psi, "InvWishart.Psi");
  }

  Eigen::Index dim() const { return Psi.rows(); }
};

// Joint law of (A, V) with V ~ IW(Psi, nu) and A | V ~ MN(M, V, K);
// the parameter set of the matrix-T regression prior.
struct NormalInvWishart {
  Matrix M;
  Matrix K;
  Matrix Psi;
  double nu = 0.0;
};

inline double log_pdf(const MatNormal& d, const Matrix& x) {
  if (x.rows() != d.rows() || x.cols() != d.cols()) {
    throw std::invalid_argument("matnormal log_pdf: dimension mismatch");
  }
  const double p = static_cast<double>(d.rows());
  const double n = static_cast<double>(d.cols());
  Chol cv(d.V, "MatNormal.V");
  Chol ck(d.K, "MatNormal.K");
  const double quad = cv.inv_quad_both(x - d.M, ck);
  return -0.5 * (n * p * kLogTwoPi + n * cv.log_det() + p * ck.log_det() + quad);
}

// X = M + Lv Z Lk^T with Z i.i.d. standard Normal.
inline Matrix sample(const MatNormal& d, Rng& rng) {
  Chol cv(d.V, "MatNormal.V");
  Chol ck(d.K, "MatNormal.K");
  Matrix z(d.rows(), d.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = rng.normal();
  }
  return d.M + cv.matrix_l() * z * ck.matrix_l().transpose();
}

inline double log_pdf(const MatT& d, const Matrix& x) {
  if (x.rows() != d.rows() || x.cols() != d.cols()) {
    throw std::invalid_argument("matt log_pdf: dimension mismatch");
  }
  const int p = static_cast<int>(d.rows());
  const double n = static_cast<double>(d.cols());
  const double expo = 0.5 * (d.nu + n + p - 1);
  Chol cs(d.Sigma, "MatT.Sigma");
  Chol co(d.Omega, "MatT.Omega");
  // |I_p + Sigma^-1 R Omega^-1 R^T| = |I_p + C C^T| with C = Ls^-1 R Lo^-T.
  const Matrix c = co.solve_l((cs.solve_l(x - d.M)).transpose()).transpose();
  Chol cq(Matrix::Identity(p, p) + c * c.transpose(), "MatT quadratic");
  return lmvgamma(p, expo) - lmvgamma(p, 0.5 * (d.nu + p - 1)) -
         0.5 * n * p * std::log(std::numbers::pi) - 0.5 * n * cs.log_det() -
         0.5 * p * co.log_det() - expo * cq.log_det();
}

inline double log_pdf(const InvWishart& d, const Matrix& v) {
  if (v.rows() != d.dim() || v.cols() != d.dim()) {
    throw std::invalid_argument("invwishart log_pdf: dimension mismatch");
  }
  const double p = static_cast<double>(d.dim());
  const double m = d.nu - p - 1.0;  // common-convention degrees of freedom
  Chol cp(d.Psi, "InvWishart.Psi");
  Chol cvv(v, "InvWishart argument");
  return 0.5 * m * cp.log_det() - 0.5 * d.nu * cvv.log_det() -
         0.5 * cvv.trace_solve(d.Psi) - 0.5 * m * p * std::numbers::ln2 -
         lmvgamma(static_cast<int>(p), 0.5 * m);
}

inline Matrix mean(const InvWishart& d) {
  const double p = static_cast<double>(d.dim());
  if (!(d.nu > 2.0 * p + 2.0)) {
    throw std::invalid_argument("invwishart mean: requires nu > 2p + 2");
  }
  return d.Psi / (d.nu - 2.0 * p - 2.0);
}

inline Matrix mode(const InvWishart& d) { return d.Psi / d.nu; }

// E[V^-1] = (nu - p - 1) Psi^-1, the quantity the matrix-T E-step consumes.
inline Matrix mean_inverse(const InvWishart& d) {
  const double p = static_cast<double>(d.dim());
  Chol cp(d.Psi, "InvWishart.Psi");
  return (d.nu - p - 1.0) * cp.inverse();
}

// Bartlett decomposition of the Wishart for V^-1, then inversion:
// V = (A^-1 L^T)^T (A^-1 L^T) with L L^T = Psi and A the Bartlett factor.
inline Matrix sample(const InvWishart& d, Rng& rng) {
  const int p = static_cast<int>(d.dim());
  const double m = d.nu - p - 1.0;
  Chol cp(d.Psi, "InvWishart.Psi");
  Matrix a = Matrix::Zero(p, p);
  for (int i = 0; i < p; ++i) {
    a(i, i) = std::sqrt(rng.chi_squared(m - i));
    for (int j = 0; j < i; ++j) a(i, j) = rng.normal();
  }
  const Matrix w =
      a.triangularView<Eigen::Lower>().solve(Matrix(cp.matrix_l().transpose()));
  return symmetrize(w.transpose() * w);
}

// Draw from the Normal-Inverse-Wishart compound that defines the matrix-T.
inline Matrix sample(const MatT& d, Rng& rng) {
  const double p = static_cast<double>(d.rows());
  const Matrix v = sample(InvWishart(d.Sigma, d.nu + 2.0 * p), rng);
  return sample(MatNormal(d.M, v, d.Omega), rng);
}

// Exact KL(q || p) between matrix-Normal laws, through the vectorized form
// with covariance K (x) V.
inline double kl_divergence(const MatNormal& q, const MatNormal& p) {
  if (q.rows() != p.rows() || q.cols() != p.cols()) {
    throw std::invalid_argument("kl_divergence: dimension mismatch");
  }
  const double pr = static_cast<double>(q.rows());
  const double n = static_cast<double>(q.cols());
  Chol cv(p.V, "MatNormal.V");
  Chol ck(p.K, "MatNormal.K");
  Chol cvq(q.V, "MatNormal.V");
  Chol ckq(q.K, "MatNormal.K");
  const double tr_term = cv.trace_solve(q.V) * ck.trace_solve(q.K);
  const double quad = cv.inv_quad_both(p.M - q.M, ck);
  const double logdets = n * (cv.log_det() - cvq.log_det()) +
                         pr * (ck.log_det() - ckq.log_det());
  return 0.5 * (tr_term + quad - pr * n + logdets);
}

// KL between two Normal-Inverse-Wishart joints, keeping only the part that
// depends on the second argument's parameters (M, K, Psi): the additive
// constant in the tilde parameters is dropped.
//
//   p/2 (ln|K| + tr(K^-1 Kt)) + (nut-p-1)/2 tr(Psit^-1 ((M-Mt) K^-1 (M-Mt)^T + Psi))
//     - (nu-p-1)/2 ln|Psi|
inline double kl_joint_xi_part(const NormalInvWishart& q,
                               const NormalInvWishart& p) {
  if (q.M.rows() != p.M.rows() || q.M.cols() != p.M.cols()) {
    throw std::invalid_argument("kl_joint_xi_part: dimension mismatch");
  }
  const double pr = static_cast<double>(q.M.rows());
  if (!(q.nu > 2.0 * pr) || !(p.nu > 2.0 * pr)) {
    throw std::invalid_argument("kl_joint_xi_part: nu must exceed 2p");
  }
  Chol ck(p.K, "NormalInvWishart.K");
  Chol cpsi(p.Psi, "NormalInvWishart.Psi");
  Chol cpsit(q.Psi, "NormalInvWishart.Psi");
  const Matrix f = p.M - q.M;
  const Matrix quad = f * ck.solve(f.transpose());
  const double m_tilde = q.nu - pr - 1.0;
  const double m = p.nu - pr - 1.0;
  return 0.5 * pr * (ck.log_det() + ck.trace_solve(q.K)) +
         0.5 * m_tilde * cpsit.trace_solve(quad + p.Psi) -
         0.5 * m * cpsi.log_det();
}

}  // namespace mbll
