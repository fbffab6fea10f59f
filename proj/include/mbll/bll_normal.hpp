#pragma once

#include "mbll/linalg.hpp"
#include "mbll/matvar.hpp"

#include <optional>
#include <stdexcept>
#include <utility>

namespace mbll {

enum class Constraint { full, diagonal, isotropic };

// Project a symmetric matrix onto the requested structural family.
inline Matrix project_constraint(const Matrix& k, Constraint c) {
  switch (c) {
    case Constraint::full:
      return k;
    case Constraint::diagonal:
      return k.diagonal().asDiagonal();
    case Constraint::isotropic:
      return (k.trace() / static_cast<double>(k.rows())) *
             Matrix::Identity(k.rows(), k.cols());
  }
  return k;
}

// One regression dataset in design form: features as columns of Phi,
// targets as columns of Y, per-sample noise variances sigma^2(x_i) in D_diag.
struct Design {
  Matrix Phi;    // d_t x N
  Matrix Y;      // p x N
  Vector D_diag; // N

  Eigen::Index n() const { return Phi.cols(); }
  Eigen::Index p() const { return Y.rows(); }
  Eigen::Index dt() const { return Phi.rows(); }

  void validate() const {
    if (Y.cols() != Phi.cols() || D_diag.size() != Phi.cols()) {
      throw std::invalid_argument("Design: Phi, Y, D_diag column counts differ");
    }
    if (D_diag.size() > 0 && !(D_diag.minCoeff() > 0)) {
      throw std::invalid_argument("Design: noise variances must be positive");
    }
  }
};

// Design plus the known baseline noise covariance V.
struct DesignBlock : Design {
  Matrix V;  // p x p

  void validate() const {
    Design::validate();
    if (V.rows() != Y.rows() || V.cols() != Y.rows()) {
      throw std::invalid_argument("DesignBlock: V does not match output dimension");
    }
  }
};

struct NormalHyper {
  Matrix M;  // p x d_t
  Matrix K;  // d_t x d_t
  Constraint k_constraint = Constraint::full;
};

// Inverse-Wishart hyperprior IW(Lambda, kappa) on K. kappa may be small
// (even 1); only the MAP-relevant terms are ever evaluated.
struct HyperPrior {
  Matrix Lambda;
  double kappa = 1.0;
};

// Derived per-dataset matrices. Omega = D + Phi^T K Phi is N x N and is not
// stored; everything downstream routes through Sxx (d_t x d_t) via the
// Woodbury identities, keeping the cost at O(N d_t^2). Sycx = E Omega^-1 E^T
// is the one p x p contraction of Omega^-1 that the evidence and the
// matrix-T module need.
struct SuffStats {
  Matrix Syx;       // p x d_t, Y D^-1 Phi^T + M K^-1
  Matrix Sxx;       // d_t x d_t, K^-1 + Phi D^-1 Phi^T
  Matrix Sxx_inv;
  Matrix post_mean; // Syx Sxx^-1
  Matrix E;         // Y - M Phi
  Matrix G;         // E D^-1 Phi^T
  Matrix B;         // Phi D^-1 Phi^T
  Matrix Sycx;      // E Omega^-1 E^T
  double log_det_omega = 0.0;
  double log_det_k = 0.0;
};

inline SuffStats suffstats(const Design& d, const NormalHyper& h) {
  d.validate();
  if (h.M.rows() != d.p() || h.M.cols() != d.dt() || h.K.rows() != d.dt()) {
    throw std::invalid_argument("suffstats: hyperparameter dimensions mismatch");
  }
  SuffStats s;
  Chol ck(h.K, "NormalHyper.K");
  const Matrix k_inv = ck.inverse();
  const Matrix phi_dinv = d.Phi * d.D_diag.cwiseInverse().asDiagonal();
  s.B = symmetrize(phi_dinv * d.Phi.transpose());
  s.Sxx = symmetrize(k_inv + s.B);
  Chol cs(s.Sxx, "SuffStats.Sxx");
  s.Sxx_inv = symmetrize(cs.inverse());
  s.Syx = d.Y * phi_dinv.transpose() + h.M * k_inv;
  s.post_mean = cs.solve(s.Syx.transpose()).transpose();
  s.E = d.Y - h.M * d.Phi;
  s.G = s.E * phi_dinv.transpose();
  const Matrix e_dinv_et = s.E * d.D_diag.cwiseInverse().asDiagonal() * s.E.transpose();
  s.Sycx = symmetrize(e_dinv_et - s.G * cs.solve(s.G.transpose()));
  s.log_det_k = ck.log_det();
  s.log_det_omega = d.D_diag.array().log().sum() + ck.log_det() + cs.log_det();
  return s;
}

// N x N evidence column covariance, materialized. Only sensible for small N
// (oracles, tests); the library itself never forms it.
inline Matrix omega(const Design& d, const NormalHyper& h) {
  d.validate();
  return Matrix(d.D_diag.asDiagonal()) + d.Phi.transpose() * h.K * d.Phi;
}

// ln MN(Y; M Phi, V, Omega), Woodbury-routed.
inline double log_evidence(const DesignBlock& d, const NormalHyper& h) {
  d.validate();
  const SuffStats s = suffstats(d, h);
  Chol cv(d.V, "DesignBlock.V");
  const double np = static_cast<double>(d.n());
  const double p = static_cast<double>(d.p());
  return -0.5 * (np * p * kLogTwoPi + np * cv.log_det() + p * s.log_det_omega +
                 cv.trace_solve(s.Sycx));
}

inline MatNormal posterior(const DesignBlock& d, const NormalHyper& h) {
  const SuffStats s = suffstats(d, h);
  return MatNormal(s.post_mean, d.V, s.Sxx_inv);
}

struct PredictiveNormal {
  Matrix mean;      // p x L
  Matrix row_cov;   // V
  Matrix col_scale; // D* + Phi*^T Sxx^-1 Phi*
  Matrix aleatoric; // tr(D*) V
  Matrix epistemic; // tr(Phi*^T Sxx^-1 Phi*) V

  Matrix total() const { return aleatoric + epistemic; }
};

inline PredictiveNormal predict(const DesignBlock& d, const NormalHyper& h,
                                const Matrix& phi_star, const Vector& dstar_diag) {
  d.validate();
  if (phi_star.rows() != d.dt() || dstar_diag.size() != phi_star.cols() ||
      phi_star.cols() < 1) {
    throw std::invalid_argument("predict: prediction inputs mismatch");
  }
  if (!(dstar_diag.minCoeff() > 0)) {
    throw std::invalid_argument("predict: noise variances must be positive");
  }
  const SuffStats s = suffstats(d, h);
  PredictiveNormal out;
  out.mean = s.post_mean * phi_star;
  out.row_cov = d.V;
  const Matrix quad = symmetrize(phi_star.transpose() * s.Sxx_inv * phi_star);
  out.col_scale = Matrix(dstar_diag.asDiagonal()) + quad;
  out.aleatoric = dstar_diag.sum() * d.V;
  out.epistemic = quad.trace() * d.V;
  return out;
}

// Epistemic term split into the a-priori part tr(Phi*^T K Phi*) V and the
// data-driven reduction tr(Phi*^T K Phi Omega^-1 Phi^T K Phi*) V.
inline std::pair<Matrix, Matrix> epistemic_decomposition(const DesignBlock& d,
                                                         const NormalHyper& h,
                                                         const Matrix& phi_star) {
  d.validate();
  const SuffStats s = suffstats(d, h);
  const Matrix prior_part =
      (phi_star.transpose() * h.K * phi_star).trace() * d.V;
  // Phi Omega^-1 Phi^T = B - B Sxx^-1 B.
  const Matrix mid = symmetrize(s.B - s.B * s.Sxx_inv * s.B);
  const Matrix kphi = h.K * phi_star;
  const Matrix reduction = (kphi.transpose() * mid * kphi).trace() * d.V;
  return {prior_part, reduction};
}

// Weighted least squares A = Y D^-1 Phi^T (Phi D^-1 Phi^T)^-1, solved through
// a rank-revealing QR of D^-1/2 Phi^T.
inline Matrix least_squares(const Design& d) {
  d.validate();
  if (d.n() < std::max(d.dt(), d.p())) {
    throw std::invalid_argument("least_squares: requires N >= max(d_t, p)");
  }
  const Vector w = d.D_diag.cwiseInverse().cwiseSqrt();
  const Matrix xw = w.asDiagonal() * Matrix(d.Phi.transpose());  // N x d_t
  Eigen::ColPivHouseholderQR<Matrix> qr(xw);
  if (qr.rank() < d.dt()) {
    throw std::runtime_error("least_squares: Phi D^-1 Phi^T is rank deficient");
  }
  const Matrix yw = w.asDiagonal() * Matrix(d.Y.transpose());
  return qr.solve(yw).transpose();
}

// tr Var(y_hat_D) - tr Var(y_hat_*) at a prediction point; sigma2_star does
// not enter the closed form (estimator variances share the test noise) but is
// validated for interface consistency.
inline double variance_gap(const DesignBlock& d, const NormalHyper& h,
                           const Vector& phi_star, double sigma2_star) {
  d.validate();
  if (!(sigma2_star > 0)) {
    throw std::invalid_argument("variance_gap: sigma2_star must be > 0");
  }
  const SuffStats s = suffstats(d, h);
  Chol cb(s.B, "Phi D^-1 Phi^T");
  const double quad = cb.inv_quad(phi_star) +
                      phi_star.dot(s.Sxx_inv * phi_star);
  return quad * d.V.trace();
}

// Negative log evidence up to the (Np/2) ln 2pi + (N/2) ln|V| constant,
// optionally with the Inverse-Wishart hyperprior terms on K.
inline double evidential_loss(const DesignBlock& d, const NormalHyper& h,
                              const std::optional<HyperPrior>& hp = std::nullopt) {
  d.validate();
  const SuffStats s = suffstats(d, h);
  Chol cv(d.V, "DesignBlock.V");
  double loss = 0.5 * static_cast<double>(d.p()) * s.log_det_omega +
                0.5 * cv.trace_solve(s.Sycx);
  if (hp) {
    Chol ck(h.K, "NormalHyper.K");
    loss += 0.5 * hp->kappa * ck.log_det() + 0.5 * ck.trace_solve(hp->Lambda);
  }
  return loss;
}

// Global minimizer of the unregularized evidential loss: the least-squares
// mean and the degenerate K = 0, which is not a valid NormalHyper and is
// therefore returned flagged.
struct DegenerateMle {
  Matrix M_hat;
  Matrix K_hat;  // zero matrix
  bool degenerate = true;
};

inline DegenerateMle degenerate_mle(const Design& d) {
  DegenerateMle out;
  out.M_hat = least_squares(d);
  out.K_hat = Matrix::Zero(d.dt(), d.dt());
  return out;
}

// Orthogonal projector onto the kernel of Phi D^-1/2, P = I - B^+ B.
inline Matrix projector_p(const Design& d) {
  d.validate();
  const Eigen::Index n = d.n();
  if (n == 0) return Matrix(0, 0);
  const Matrix b = d.Phi * d.D_diag.cwiseInverse().cwiseSqrt().asDiagonal();
  Eigen::JacobiSVD<Matrix> svd(b, Eigen::ComputeThinV);
  const Vector sv = svd.singularValues();
  const double tol = std::max(b.rows(), b.cols()) * sv(0) *
                     std::numeric_limits<double>::epsilon();
  Eigen::Index rank = 0;
  while (rank < sv.size() && sv(rank) > tol) ++rank;
  const Matrix vr = svd.matrixV().leftCols(rank);
  return symmetrize(Matrix::Identity(n, n) - vr * vr.transpose());
}

}  // namespace mbll
