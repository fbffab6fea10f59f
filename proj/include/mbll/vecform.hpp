#pragma once

#include "mbll/bll_normal.hpp"

#include <stdexcept>

namespace mbll {

// Dense vectorized Bayesian regression with unrelated noise covariance U and
// prior row covariance V. This is the independent cross-check for the
// matrix-variate routes and the host of the ELBO algebra; a size guard keeps
// the pN x pN matrices out of production-scale calls.

inline constexpr Eigen::Index kVecFormMaxDim = 64;

inline Vector vec(const Matrix& m) {
  return Eigen::Map<const Vector>(m.data(), m.size());
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

struct VecGaussian {
  Vector mean;
  Matrix cov;
};

inline double log_pdf(const VecGaussian& g, const Vector& x) {
  if (x.size() != g.mean.size()) {
    throw std::invalid_argument("VecGaussian log_pdf: dimension mismatch");
  }
  Chol c(g.cov, "VecGaussian.cov");
  const double n = static_cast<double>(x.size());
  return -0.5 * (n * kLogTwoPi + c.log_det() + c.inv_quad(x - g.mean));
}

namespace detail {

inline void vecform_guard(const DesignBlock& d) {
  if (d.p() * d.n() > kVecFormMaxDim) {
    throw std::invalid_argument("vecform: instance too large for the dense oracle");
  }
}

// S = D (x) U + (Phi^T K Phi) (x) V.
inline Matrix vecform_s(const DesignBlock& d, const NormalHyper& h, const Matrix& u) {
  return kron(Matrix(d.D_diag.asDiagonal()), u) +
         kron(Matrix(d.Phi.transpose() * h.K * d.Phi), d.V);
}

}  // namespace detail

// vec(Y) ~ N(vec(M Phi), S).
inline VecGaussian vec_evidence(const DesignBlock& d, const NormalHyper& h,
                                const Matrix& u) {
  d.validate();
  detail::vecform_guard(d);
  return {vec(h.M * d.Phi), detail::vecform_s(d, h, u)};
}

// vec(A) | Y ~ N(vec(M) + B^T S^-1 vec(E), K (x) V - B^T S^-1 B).
inline VecGaussian vec_posterior(const DesignBlock& d, const NormalHyper& h,
                                 const Matrix& u) {
  d.validate();
  detail::vecform_guard(d);
  const Matrix s = detail::vecform_s(d, h, u);
  const Matrix b = kron(Matrix(d.Phi.transpose() * h.K), d.V);
  Chol cs(s, "vecform.S");
  const Vector e = vec(Matrix(d.Y - h.M * d.Phi));
  VecGaussian out;
  out.mean = vec(h.M) + b.transpose() * cs.solve(e);
  out.cov = symmetrize(kron(h.K, d.V) - b.transpose() * cs.solve(b));
  return out;
}

inline VecGaussian vec_predictive(const DesignBlock& d, const NormalHyper& h,
                                  const Matrix& u, const Matrix& phi_star,
                                  const Vector& dstar_diag) {
  d.validate();
  detail::vecform_guard(d);
  if (d.p() * phi_star.cols() > kVecFormMaxDim) {
    throw std::invalid_argument("vecform: instance too large for the dense oracle");
  }
  const Matrix s = detail::vecform_s(d, h, u);
  Chol cs(s, "vecform.S");
  const Vector e = vec(Matrix(d.Y - h.M * d.Phi));
  const Matrix cross = kron(Matrix(phi_star.transpose() * h.K * d.Phi), d.V);
  VecGaussian out;
  out.mean = vec(Matrix(h.M * phi_star)) + cross * cs.solve(e);
  out.cov = symmetrize(kron(Matrix(dstar_diag.asDiagonal()), u) +
                       kron(Matrix(phi_star.transpose() * h.K * phi_star), d.V) -
                       cross * cs.solve(cross.transpose()));
  return out;
}

// Exact ELBO(Y; q, prior) for the variational posterior q = MN(Mt, V, Kt)
// and prior MN(M, V, K) sharing the row covariance V = d.V, under noise
// covariance U. Equals log evidence minus KL(q || posterior); tight at the
// exact posterior when U = V.
inline double elbo(const DesignBlock& d, const NormalHyper& prior,
                   const NormalHyper& varpost, const Matrix& u) {
  d.validate();
  const double p = static_cast<double>(d.p());
  const double np = static_cast<double>(d.n());
  Chol cu(u, "elbo.U");
  const Matrix et = d.Y - varpost.M * d.Phi;
  const Matrix phi_dinv = d.Phi * d.D_diag.cwiseInverse().asDiagonal();
  const double fit_quad = cu.trace_solve(
      et * d.D_diag.cwiseInverse().asDiagonal() * et.transpose());
  const double smear = (phi_dinv * d.Phi.transpose() * varpost.K).trace() *
                       cu.trace_solve(d.V);
  const double expected_loglik =
      -0.5 * (np * p * kLogTwoPi + np * cu.log_det() +
              p * d.D_diag.array().log().sum() + fit_quad + smear);
  const double kl = kl_divergence(MatNormal(varpost.M, d.V, varpost.K),
                                  MatNormal(prior.M, d.V, prior.K));
  return expected_loglik - kl;
}

// The two coordinate updates of the ELBO: the optimal variational posterior
// for a fixed prior (U = V case), and the optimal prior for a fixed
// variational posterior. Iterating the pair reproduces the degenerate joint
// scheme K_n^-1 = K_0^-1 + n Phi D^-1 Phi^T.
inline NormalHyper elbo_update_varpost(const DesignBlock& d, const NormalHyper& prior) {
  const SuffStats s = suffstats(d, prior);
  return NormalHyper{s.post_mean, s.Sxx_inv};
}

inline NormalHyper elbo_update_prior(const NormalHyper& varpost) {
  return NormalHyper{varpost.M, varpost.K};
}

}  // namespace mbll
