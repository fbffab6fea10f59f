#pragma once

#include "mbll/linalg.hpp"
#include "mbll/matvar.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace mbll {

// Per-point posterior predictive in its univariate-column form: the p x 1
// matrix-variate predictive with scalar column scale. dof == 0 marks the
// Normal case; dof > 0 a Student predictive with that many degrees of freedom.
struct PointPredictive {
  Vector mean;     // p
  Matrix row;      // V (Normal) or Psi + Sycx (T)
  double col = 1;  // d* + phi*^T Sxx^-1 phi*
  double dof = 0;
};

struct CalibrationPoint {
  double nominal = 0;
  double empirical = 0;
};

struct EvalReport {
  double rmse = 0;
  double nll = 0;
  double nlev = 0;
  double ece = 0;
  std::vector<CalibrationPoint> curve;
  Vector rmse_per_output;
};

// Root mean squared vector-norm error over columns.
inline double rmse(const Matrix& pred_means, const Matrix& targets) {
  if (pred_means.rows() != targets.rows() || pred_means.cols() != targets.cols()) {
    throw std::invalid_argument("rmse: shape mismatch");
  }
  if (targets.cols() == 0) throw std::invalid_argument("rmse: empty input");
  return std::sqrt((pred_means - targets).squaredNorm() /
                   static_cast<double>(targets.cols()));
}

inline Vector rmse_per_output(const Matrix& pred_means, const Matrix& targets) {
  Vector out(targets.rows());
  for (Eigen::Index i = 0; i < targets.rows(); ++i) {
    out(i) = std::sqrt((pred_means.row(i) - targets.row(i)).squaredNorm() /
                       static_cast<double>(targets.cols()));
  }
  return out;
}

inline double log_pdf(const PointPredictive& pred, const Vector& y) {
  const Matrix ym = y;
  const Matrix mm = pred.mean;
  const Matrix col = Matrix::Constant(1, 1, pred.col);
  if (pred.dof > 0) {
    return log_pdf(MatT(mm, pred.row, col, pred.dof), ym);
  }
  return log_pdf(MatNormal(mm, pred.row, col), ym);
}

// Mean negative log predictive density.
inline double nll(const std::vector<PointPredictive>& preds, const Matrix& targets) {
  if (static_cast<Eigen::Index>(preds.size()) != targets.cols()) {
    throw std::invalid_argument("nll: one predictive per test point required");
  }
  if (preds.empty()) throw std::invalid_argument("nll: empty test set");
  double total = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    total -= log_pdf(preds[i], targets.col(static_cast<Eigen::Index>(i)));
  }
  return total / static_cast<double>(preds.size());
}

inline std::vector<double> default_ece_levels() {
  std::vector<double> levels;
  for (int i = 1; i <= 19; ++i) levels.push_back(0.05 * i);
  return levels;
}

// Expected calibration error over central prediction intervals. Residuals are
// standardized by the per-output marginal of the total (aleatoric plus
// epistemic) predictive and pooled across outputs; coverage of the central
// interval at level a is the fraction with |2 F(z) - 1| <= a.
inline std::pair<double, std::vector<CalibrationPoint>> ece(
    const std::vector<PointPredictive>& preds, const Matrix& targets,
    const std::vector<double>& levels = default_ece_levels()) {
  if (static_cast<Eigen::Index>(preds.size()) != targets.cols() || preds.empty()) {
    throw std::invalid_argument("ece: empty test set or size mismatch");
  }
  std::vector<double> u;  // |2 F(z) - 1| per pooled residual
  u.reserve(preds.size() * targets.rows());
  for (size_t i = 0; i < preds.size(); ++i) {
    const auto& pr = preds[i];
    for (Eigen::Index j = 0; j < targets.rows(); ++j) {
      const double r = targets(j, static_cast<Eigen::Index>(i)) - pr.mean(j);
      double cdf;
      if (pr.dof > 0) {
        // column p x 1 matrix-T marginal: Student-t with dof degrees of
        // freedom and scale sqrt(col * row_jj / dof)
        const double s = std::sqrt(pr.col * pr.row(j, j) / pr.dof);
        cdf = student_t_cdf(r / s, pr.dof);
      } else {
        const double s = std::sqrt(pr.col * pr.row(j, j));
        cdf = normal_cdf(r / s);
      }
      u.push_back(std::abs(2.0 * cdf - 1.0));
    }
  }
  std::vector<CalibrationPoint> curve;
  double total = 0.0;
  for (double level : levels) {
    double hits = 0;
    for (double ui : u) {
      if (ui <= level) hits += 1.0;
    }
    const double emp = hits / static_cast<double>(u.size());
    curve.push_back({level, emp});
    total += std::abs(emp - level);
  }
  return {total / static_cast<double>(levels.size()), curve};
}

}  // namespace mbll
