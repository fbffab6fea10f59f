#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mbll {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kLogTwoPi = 1.8378770664093454836;  // ln(2*pi)

// Condition-number guards for Cholesky inputs. The estimate below is a lower
// bound, so a guard trip always means the true condition number is at least
// as bad.
inline constexpr double kCondWarn = 1e8;
inline constexpr double kCondError = 1e13;

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

namespace detail {
inline int& cond_warning_count() {
  thread_local int count = 0;
  return count;
}
}  // namespace detail

// Cholesky factorization of a symmetric positive definite matrix.
//
// On failure a single jitter of 1e-10 * trace/dim is added to the diagonal
// before giving up; ill-conditioned learned bases otherwise abort runs that
// are recoverable. Inputs with estimated condition number above kCondError
// are rejected.
class Chol {
 public:
  explicit Chol(const Matrix& a, const char* label = "matrix") {
    if (a.rows() != a.cols()) {
      throw std::invalid_argument(std::string(label) + ": matrix is not square");
    }
    const Eigen::Index n = a.rows();
    if (n == 0) {
      log_det_ = 0.0;
      return;
    }
    llt_.compute(a);
    if (llt_.info() != Eigen::Success) {
      const double jitter = 1e-10 * a.trace() / static_cast<double>(n);
      Matrix aj = a;
      aj.diagonal().array() += jitter;
      llt_.compute(aj);
      if (llt_.info() != Eigen::Success) {
        throw std::invalid_argument(std::string(label) +
                                    ": not positive definite (Cholesky failed)");
      }
    }
    const Vector d = llt_.matrixL().toDenseMatrix().diagonal();
    const double dmax = d.maxCoeff();
    const double dmin = d.minCoeff();
    const double cond = (dmax / dmin) * (dmax / dmin);
    if (cond > kCondError) {
      throw std::runtime_error(std::string(label) + ": condition number above " +
                               std::to_string(kCondError));
    }
    if (cond > kCondWarn && detail::cond_warning_count() < 8) {
      ++detail::cond_warning_count();
      std::fputs((std::string("mbll: warning: ") + label +
                  " is ill-conditioned (cond >~ 1e8)\n")
                     .c_str(),
                 stderr);
    }
    log_det_ = 2.0 * d.array().log().sum();
  }

  Eigen::Index dim() const { return llt_.matrixL().rows(); }
  double log_det() const { return log_det_; }
  Matrix matrix_l() const { return llt_.matrixL(); }

  template <typename Derived>
  Matrix solve(const Eigen::MatrixBase<Derived>& b) const {
    return llt_.solve(b.derived());
  }
  Matrix inverse() const {
    return llt_.solve(Matrix::Identity(dim(), dim()));
  }
  // L^-1 B and L^-T B, used to whiten quadratic forms.
  Matrix solve_l(const Matrix& b) const {
    return llt_.matrixL().solve(b);
  }
  Matrix solve_lt(const Matrix& b) const {
    return llt_.matrixU().solve(b);
  }
  // tr(A^-1 S) without forming the inverse.
  double trace_solve(const Matrix& s) const { return llt_.solve(s).trace(); }
  // x^T A^-1 x.
  double inv_quad(const Vector& x) const {
    return solve_l(x).squaredNorm();
  }
  // tr(V^-1 R K^-1 R^T) = |Lv^-1 R Lk^-T|_F^2 for this = chol(V), ck = chol(K).
  double inv_quad_both(const Matrix& r, const Chol& ck) const {
    return ck.solve_l(solve_l(r).transpose()).squaredNorm();
  }

 private:
  Eigen::LLT<Matrix> llt_;
  double log_det_ = 0.0;
};

// Log multivariate gamma, ln Gamma_p(a) = p(p-1)/4 ln(pi) + sum_j ln Gamma(a + (1-j)/2).
inline double lmvgamma(int p, double a) {
  if (p < 1) throw std::invalid_argument("lmvgamma: p must be >= 1");
  if (!(a > 0.5 * (p - 1))) {
    throw std::invalid_argument("lmvgamma: argument must exceed (p-1)/2");
  }
  double out = 0.25 * p * (p - 1) * std::log(std::numbers::pi);
  for (int j = 1; j <= p; ++j) {
    out += std::lgamma(a + 0.5 * (1 - j));
  }
  return out;
}

inline double normal_cdf(double z) {
  return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

namespace detail {

// Continued fraction for the regularized incomplete beta (Lentz's method).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kFpMin = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double betai(double a, double b, double x) {
  if (x < 0.0 || x > 1.0) throw std::invalid_argument("betai: x outside [0,1]");
  if (x == 0.0 || x == 1.0) return x;
  const double lbeta = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b);
  const double front = std::exp(lbeta + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * detail::betacf(a, b, x) / a;
  }
  return 1.0 - front * detail::betacf(b, a, 1.0 - x) / b;
}

// CDF of the standard Student-t with nu degrees of freedom.
inline double student_t_cdf(double t, double nu) {
  if (!(nu > 0)) throw std::invalid_argument("student_t_cdf: nu must be > 0");
  const double x = nu / (nu + t * t);
  const double tail = 0.5 * betai(0.5 * nu, 0.5, x);
  return t >= 0.0 ? 1.0 - tail : tail;
}

}  // namespace mbll
