#pragma once

#include "mbll/bll_normal.hpp"
#include "mbll/matvar.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace mbll {

// Hyperparameters of the unknown-V model: A | V ~ MN(M, V, K), V ~ IW(Psi, nu).
// nu is held fixed (never optimized); nu' = nu - p - 1 must exceed p - 1 for
// the evidence normalization to be finite, which nu > 2p guarantees.
struct THyper {
  Matrix M;    // p x d_t
  Matrix K;    // d_t x d_t
  Matrix Psi;  // p x p
  double nu = 0.0;
  Constraint k_constraint = Constraint::full;
  Constraint psi_constraint = Constraint::full;

  void validate(Eigen::Index p, Eigen::Index dt) const {
    if (M.rows() != p || M.cols() != dt || K.rows() != dt || Psi.rows() != p) {
      throw std::invalid_argument("THyper: dimension mismatch");
    }
    if (!(nu > 2.0 * static_cast<double>(p))) {
      throw std::invalid_argument("THyper: nu must exceed 2p");
    }
  }
};

// Default degrees of freedom 2p + 3; results are robust to this choice.
inline double default_t_dof(Eigen::Index p) { return 2.0 * static_cast<double>(p) + 3.0; }

struct TSuffStats {
  SuffStats base;
  Matrix Syy;  // Y D^-1 Y^T + M K^-1 M^T
  Matrix H;    // Psi + Sycx
  double log_det_h = 0.0;
};

inline TSuffStats t_suffstats(const Design& d, const THyper& h) {
  d.validate();
  h.validate(d.p(), d.dt());
  TSuffStats s;
  s.base = suffstats(d, NormalHyper{h.M, h.K});
  Chol ck(h.K, "THyper.K");
  s.Syy = symmetrize(d.Y * d.D_diag.cwiseInverse().asDiagonal() * d.Y.transpose() +
                     h.M * ck.solve(h.M.transpose()));
  s.H = symmetrize(h.Psi + s.base.Sycx);
  Chol chh(s.H, "TSuffStats.H");
  s.log_det_h = chh.log_det();
  return s;
}

// ln Cn = ln Gamma_p((nu'+N)/2) - ln Gamma_p(nu'/2) - (Np/2) ln pi.
inline double t_log_cn(Eigen::Index p, Eigen::Index n, double nu_prime) {
  const int pi_ = static_cast<int>(p);
  return lmvgamma(pi_, 0.5 * (nu_prime + n)) - lmvgamma(pi_, 0.5 * nu_prime) -
         0.5 * static_cast<double>(n) * static_cast<double>(p) *
             std::log(std::numbers::pi);
}

// ln MT(Y; M Phi, Psi, Omega, nu - 2p) via the Woodbury route:
//   ln Cn + (nu'/2) ln|Psi| - (p/2) ln|Omega| - ((nu'+N)/2) ln|H|.
inline double t_log_evidence(const Design& d, const THyper& h) {
  const TSuffStats s = t_suffstats(d, h);
  const double nu_prime = h.nu - static_cast<double>(d.p()) - 1.0;
  Chol cpsi(h.Psi, "THyper.Psi");
  return t_log_cn(d.p(), d.n(), nu_prime) + 0.5 * nu_prime * cpsi.log_det() -
         0.5 * static_cast<double>(d.p()) * s.base.log_det_omega -
         0.5 * (nu_prime + static_cast<double>(d.n())) * s.log_det_h;
}

// Evidence as a distribution record; materializes the N x N Omega, so meant
// for small N (oracles, prior-predictive pushes).
inline MatT t_evidence(const Design& d, const THyper& h) {
  d.validate();
  h.validate(d.p(), d.dt());
  return MatT(h.M * d.Phi, h.Psi, omega(d, NormalHyper{h.M, h.K}),
              h.nu - 2.0 * static_cast<double>(d.p()));
}

// A | Y ~ MT(Syx Sxx^-1, Psi + Sycx, Sxx^-1, nu + N - 2p).
inline MatT t_posterior_a(const Design& d, const THyper& h) {
  const TSuffStats s = t_suffstats(d, h);
  return MatT(s.base.post_mean, s.H, s.base.Sxx_inv,
              h.nu + static_cast<double>(d.n()) - 2.0 * static_cast<double>(d.p()));
}

// V | Y ~ IW(Psi + Sycx, nu + N).
inline InvWishart t_posterior_v(const Design& d, const THyper& h) {
  const TSuffStats s = t_suffstats(d, h);
  return InvWishart(s.H, h.nu + static_cast<double>(d.n()));
}

// A | Y, V ~ MN(Syx Sxx^-1, V, Sxx^-1), identical to the known-V posterior.
inline MatNormal t_posterior_a_given_v(const Design& d, const THyper& h,
                                       const Matrix& v) {
  const TSuffStats s = t_suffstats(d, h);
  return MatNormal(s.base.post_mean, v, s.base.Sxx_inv);
}

// V | Y, A ~ IW(Psi + Sycx;A, nu + N + d_t). The added degrees of freedom
// count the columns of A (the feature dimension); the conditional-chain
// consistency test pins this bookkeeping.
inline InvWishart t_posterior_v_given_a(const Design& d, const THyper& h,
                                        const Matrix& a) {
  d.validate();
  h.validate(d.p(), d.dt());
  const Matrix resid = d.Y - a * d.Phi;
  Chol ck(h.K, "THyper.K");
  const Matrix da = a - h.M;
  const Matrix sycxa =
      symmetrize(resid * d.D_diag.cwiseInverse().asDiagonal() * resid.transpose() +
                 da * ck.solve(da.transpose()));
  return InvWishart(symmetrize(h.Psi + sycxa),
                    h.nu + static_cast<double>(d.n()) + static_cast<double>(d.dt()));
}

struct PredictiveT {
  Matrix mean;       // p x L
  Matrix row_scale;  // Psi + Sycx
  Matrix col_scale;  // D* + Phi*^T Sxx^-1 Phi*
  double dof = 0.0;  // nu + N - 2p
  // Second moments; NaN-filled when dof <= 2 (they do not exist).
  Matrix aleatoric;
  Matrix epistemic;

  bool has_moments() const { return dof > 2.0; }
  Matrix total() const { return aleatoric + epistemic; }
};

inline PredictiveT t_predict(const Design& d, const THyper& h,
                             const Matrix& phi_star, const Vector& dstar_diag) {
  d.validate();
  h.validate(d.p(), d.dt());
  if (phi_star.rows() != d.dt() || dstar_diag.size() != phi_star.cols() ||
      phi_star.cols() < 1) {
    throw std::invalid_argument("t_predict: prediction inputs mismatch");
  }
  const TSuffStats s = t_suffstats(d, h);
  PredictiveT out;
  out.mean = s.base.post_mean * phi_star;
  out.row_scale = s.H;
  const Matrix quad = symmetrize(phi_star.transpose() * s.base.Sxx_inv * phi_star);
  out.col_scale = Matrix(dstar_diag.asDiagonal()) + quad;
  out.dof = h.nu + static_cast<double>(d.n()) - 2.0 * static_cast<double>(d.p());
  if (out.dof > 2.0) {
    const double denom = out.dof - 2.0;
    out.aleatoric = (dstar_diag.sum() / denom) * s.H;
    out.epistemic = (quad.trace() / denom) * s.H;
  } else {
    out.aleatoric = Matrix::Constant(d.p(), d.p(),
                                     std::numeric_limits<double>::quiet_NaN());
    out.epistemic = out.aleatoric;
  }
  return out;
}

// Prop-6 decomposition with the shared factor (Psi + Sycx)/(nu + N - 2p - 2).
inline std::pair<Matrix, Matrix> t_uncertainties(const Design& d, const THyper& h,
                                                 const Matrix& phi_star,
                                                 const Vector& dstar_diag) {
  const double denom = h.nu + static_cast<double>(d.n()) -
                       2.0 * static_cast<double>(d.p()) - 2.0;
  if (!(denom > 0)) {
    throw std::invalid_argument(
        "t_uncertainties: nu + N - 2p - 2 <= 0, predictive variance undefined");
  }
  const PredictiveT pred = t_predict(d, h, phi_star, dstar_diag);
  return {pred.aleatoric, pred.epistemic};
}

// The four printed loss terms, evaluated independently of t_log_evidence:
//   -ln Cn - (nu'/2) ln|Psi| + (p/2) ln|Omega| + ((nu'+N)/2) ln|H|.
inline double t_evidential_loss(const Design& d, const THyper& h) {
  d.validate();
  h.validate(d.p(), d.dt());
  const double p = static_cast<double>(d.p());
  const double n = static_cast<double>(d.n());
  const double nu_prime = h.nu - p - 1.0;
  Chol cpsi(h.Psi, "THyper.Psi");
  const SuffStats base = suffstats(d, NormalHyper{h.M, h.K});
  Chol chh(symmetrize(h.Psi + base.Sycx), "H");
  return -t_log_cn(d.p(), d.n(), nu_prime) - 0.5 * nu_prime * cpsi.log_det() +
         0.5 * p * base.log_det_omega + 0.5 * (nu_prime + n) * chh.log_det();
}

// Joint minimizer of the unregularized loss (Theorem-6 analogue of the
// degenerate MLE): least-squares mean, Psi from the projector quadratic, and
// K = 0 flagged. The expectation of Psi_hat is bias_factor * Psi.
struct TDegenerateMle {
  Matrix M_hat;
  Matrix Psi_hat;
  Matrix K_hat;  // zero
  bool degenerate_k = true;
  bool degenerate_psi = false;  // set when Psi_hat itself collapses to zero
  double bias_factor = 0.0;     // ((N - d_t)/N) (nu'/(nu' - p - 1))
};

inline TDegenerateMle t_degenerate_mle(const Design& d, double nu) {
  d.validate();
  const double p = static_cast<double>(d.p());
  const double n = static_cast<double>(d.n());
  const double nu_prime = nu - p - 1.0;
  if (!(nu > 2.0 * p)) {
    throw std::invalid_argument("t_degenerate_mle: nu must exceed 2p");
  }
  TDegenerateMle out;
  out.M_hat = least_squares(d);
  const Matrix proj = projector_p(d);
  const Matrix yw = d.Y * d.D_diag.cwiseInverse().cwiseSqrt().asDiagonal();
  out.Psi_hat = symmetrize((nu_prime / n) * yw * proj * yw.transpose());
  out.K_hat = Matrix::Zero(d.dt(), d.dt());
  const double scale = std::max(out.Psi_hat.cwiseAbs().maxCoeff(), 0.0);
  out.degenerate_psi = scale < 1e-12 * std::max(1.0, d.Y.squaredNorm());
  out.bias_factor = ((n - static_cast<double>(d.dt())) / n) *
                    (nu_prime / (nu_prime - p - 1.0));
  return out;
}

}  // namespace mbll
