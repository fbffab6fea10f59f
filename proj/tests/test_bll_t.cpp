#include "mbll/bll_t.hpp"

#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace mbll;
using test_util::random_matrix;
using test_util::random_positive;
using test_util::random_spd;
using test_util::rel_err;

namespace {

struct TInstance {
  Design d;
  THyper h;
};

TInstance random_t_instance(Rng& rng, int p, int dt, int n, double nu) {
  TInstance inst;
  inst.d.Phi = random_matrix(rng, dt, n);
  inst.d.Y = random_matrix(rng, p, n);
  inst.d.D_diag = random_positive(rng, n);
  inst.h.M = random_matrix(rng, p, dt);
  inst.h.K = random_spd(rng, dt);
  inst.h.Psi = random_spd(rng, p);
  inst.h.nu = nu;
  return inst;
}

TInstance scalar_t_instance() {
  TInstance inst;
  inst.d.Phi = Matrix::Constant(1, 1, 1.0);
  inst.d.Y = Matrix::Constant(1, 1, 2.0);
  inst.d.D_diag = Vector::Constant(1, 1.0);
  inst.h.M = Matrix::Zero(1, 1);
  inst.h.K = Matrix::Identity(1, 1);
  inst.h.Psi = Matrix::Identity(1, 1);
  inst.h.nu = 7.0;
  return inst;
}

}  // namespace

TEST_CASE("scalar Theorem-5 chain") {
  const TInstance inst = scalar_t_instance();
  const TSuffStats s = t_suffstats(inst.d, inst.h);
  REQUIRE(s.base.Sycx(0, 0) == Catch::Approx(2.0));
  REQUIRE(s.H(0, 0) == Catch::Approx(3.0));

  const MatT post_a = t_posterior_a(inst.d, inst.h);
  REQUIRE(post_a.M(0, 0) == Catch::Approx(1.0));
  REQUIRE(post_a.Sigma(0, 0) == Catch::Approx(3.0));
  REQUIRE(post_a.Omega(0, 0) == Catch::Approx(0.5));
  REQUIRE(post_a.nu == Catch::Approx(6.0));

  const InvWishart post_v = t_posterior_v(inst.d, inst.h);
  REQUIRE(post_v.Psi(0, 0) == Catch::Approx(3.0));
  REQUIRE(post_v.nu == Catch::Approx(8.0));

  const PredictiveT pred = t_predict(inst.d, inst.h, Matrix::Constant(1, 1, 1.0),
                                     Vector::Constant(1, 1.0));
  REQUIRE(pred.mean(0, 0) == Catch::Approx(1.0));
  REQUIRE(pred.row_scale(0, 0) == Catch::Approx(3.0));
  REQUIRE(pred.col_scale(0, 0) == Catch::Approx(1.5));
  REQUIRE(pred.dof == Catch::Approx(6.0));
}

TEST_CASE("no data: prior predictive") {
  Rng rng(1);
  const int p = 2, dt = 3;
  TInstance inst;
  inst.d.Phi = Matrix(dt, 0);
  inst.d.Y = Matrix(p, 0);
  inst.d.D_diag = Vector(0);
  inst.h.M = random_matrix(rng, p, dt);
  inst.h.K = random_spd(rng, dt);
  inst.h.Psi = random_spd(rng, p);
  inst.h.nu = 9.0;
  const Matrix phi_star = random_matrix(rng, dt, 2);
  const Vector dstar = random_positive(rng, 2);
  const PredictiveT pred = t_predict(inst.d, inst.h, phi_star, dstar);
  REQUIRE(rel_err(pred.mean, Matrix(inst.h.M * phi_star)) < 1e-12);
  REQUIRE(rel_err(pred.row_scale, inst.h.Psi) < 1e-12);
  const Matrix want_col = Matrix(dstar.asDiagonal()) +
                          phi_star.transpose() * inst.h.K * phi_star;
  REQUIRE(rel_err(pred.col_scale, want_col) < 1e-10);
  REQUIRE(pred.dof == Catch::Approx(inst.h.nu - 2.0 * p));
}

TEST_CASE("t evidence matches Monte Carlo compounding over V") {
  Rng rng(2);
  const TInstance inst = random_t_instance(rng, 1, 2, 2, 5.0);
  const double log_ev = t_log_evidence(inst.d, inst.h);
  // the record form agrees with the Woodbury route
  REQUIRE(log_pdf(t_evidence(inst.d, inst.h), inst.d.Y) ==
          Catch::Approx(log_ev).epsilon(1e-10));

  const InvWishart vprior(inst.h.Psi, inst.h.nu);
  Rng sampler(33);
  const int draws = 1000000;
  double acc = 0.0;
  const Matrix om = omega(inst.d, NormalHyper{inst.h.M, inst.h.K});
  for (int i = 0; i < draws; ++i) {
    const Matrix v = sample(vprior, sampler);
    acc += std::exp(log_pdf(MatNormal(inst.h.M * inst.d.Phi, v, om), inst.d.Y));
  }
  acc /= draws;
  REQUIRE(rel_err(acc, std::exp(log_ev)) < 0.02);
}

TEST_CASE("t uncertainties: scalar values, zero feature, MC total variance") {
  const TInstance inst = scalar_t_instance();
  auto [alea, epi] = t_uncertainties(inst.d, inst.h, Matrix::Constant(1, 1, 1.0),
                                     Vector::Constant(1, 1.0));
  REQUIRE(alea(0, 0) == Catch::Approx(0.75));
  REQUIRE(epi(0, 0) == Catch::Approx(0.375));

  auto [alea0, epi0] = t_uncertainties(inst.d, inst.h, Matrix::Zero(1, 1),
                                       Vector::Constant(1, 1.0));
  REQUIRE(epi0.cwiseAbs().maxCoeff() < 1e-14);

  Rng rng(3);
  const TInstance big = random_t_instance(rng, 2, 2, 6, 9.0);
  const Matrix phi_star = random_matrix(rng, 2, 1);
  const Vector dstar = random_positive(rng, 1);
  auto [a2, e2] = t_uncertainties(big.d, big.h, phi_star, dstar);

  const TSuffStats s = t_suffstats(big.d, big.h);
  const InvWishart post_v(s.H, big.h.nu + big.d.n());
  Rng sampler(404);
  const int draws = 100000;
  Vector mean_acc = Vector::Zero(2);
  std::vector<Vector> ys;
  ys.reserve(draws);
  for (int i = 0; i < draws; ++i) {
    const Matrix v = sample(post_v, sampler);
    const Matrix a = sample(MatNormal(s.base.post_mean, v, s.base.Sxx_inv), sampler);
    Chol cv(v);
    Vector z(2);
    z(0) = sampler.normal();
    z(1) = sampler.normal();
    const Vector y = a * phi_star.col(0) + std::sqrt(dstar(0)) * (cv.matrix_l() * z);
    ys.push_back(y);
    mean_acc += y;
  }
  mean_acc /= draws;
  double var = 0.0;
  for (const auto& y : ys) var += (y - mean_acc).squaredNorm();
  var /= draws;
  REQUIRE(rel_err(var, (a2 + e2).trace()) < 0.03);

  REQUIRE_THROWS_AS(
      t_uncertainties(inst.d, THyper{inst.h.M, inst.h.K, inst.h.Psi, 2.9},
                      Matrix::Constant(1, 1, 1.0), Vector::Constant(1, 1.0)),
      std::invalid_argument);
}

TEST_CASE("t evidential loss: evidence link, scalar terms, K-monotonicity") {
  Rng rng(4);
  const TInstance i1 = random_t_instance(rng, 2, 3, 7, 9.0);
  TInstance i2 = i1;
  i2.h.M = random_matrix(rng, 2, 3);
  i2.h.K = random_spd(rng, 3);
  i2.h.Psi = random_spd(rng, 2);
  const double d_loss = t_evidential_loss(i1.d, i1.h) - t_evidential_loss(i1.d, i2.h);
  const double d_ev = t_log_evidence(i1.d, i1.h) - t_log_evidence(i1.d, i2.h);
  REQUIRE(d_loss == Catch::Approx(-d_ev).margin(1e-10));

  const TInstance s = scalar_t_instance();
  const double nu_prime = s.h.nu - 2.0;  // p = 1
  const double want = -t_log_cn(1, 1, nu_prime) - 0.5 * nu_prime * std::log(1.0) +
                      0.5 * std::log(2.0) + 0.5 * (nu_prime + 1.0) * std::log(3.0);
  REQUIRE(t_evidential_loss(s.d, s.h) == Catch::Approx(want).margin(1e-12));

  // loss decreases along K = cI at the degenerate (M, Psi)
  TInstance shrink = random_t_instance(rng, 1, 2, 8, 5.0);
  const TDegenerateMle mle = t_degenerate_mle(shrink.d, shrink.h.nu);
  shrink.h.M = mle.M_hat;
  shrink.h.Psi = mle.Psi_hat + 1e-9 * Matrix::Identity(1, 1);
  double prev = std::numeric_limits<double>::infinity();
  for (double c : {1.0, 0.1, 0.01, 0.001}) {
    shrink.h.K = c * Matrix::Identity(2, 2);
    const double loss = t_evidential_loss(shrink.d, shrink.h);
    REQUIRE(loss < prev);
    prev = loss;
  }
}

TEST_CASE("t degenerate MLE: noiseless collapse, scalar formula, bias factor") {
  Rng rng(5);
  Design noiseless;
  const Matrix a_true = random_matrix(rng, 1, 2);
  noiseless.Phi = random_matrix(rng, 2, 6);
  noiseless.Y = a_true * noiseless.Phi;
  noiseless.D_diag = Vector::Ones(6);
  const TDegenerateMle collapsed = t_degenerate_mle(noiseless, 5.0);
  REQUIRE(collapsed.degenerate_psi);
  REQUIRE(collapsed.Psi_hat.cwiseAbs().maxCoeff() < 1e-10);

  Design d3;
  d3.Phi = Matrix::Ones(1, 3);
  d3.Y = random_matrix(rng, 1, 3);
  d3.D_diag = Vector::Ones(3);
  const double nu = 5.0;  // nu' = 3
  const TDegenerateMle mle3 = t_degenerate_mle(d3, nu);
  const double ybar = d3.Y.mean();
  double ss = 0.0;
  for (int i = 0; i < 3; ++i) ss += (d3.Y(0, i) - ybar) * (d3.Y(0, i) - ybar);
  REQUIRE(mle3.Psi_hat(0, 0) == Catch::Approx(3.0 / 3.0 * ss).epsilon(1e-10));
  REQUIRE(mle3.M_hat(0, 0) == Catch::Approx(ybar).epsilon(1e-10));

  // bias of Psi_hat over evidence replications
  const int p = 1, dt = 1, n = 8;
  const double nu_b = 5.0;  // nu' = 3, nu' - p - 1 = 1
  TInstance inst;
  inst.d.Phi = random_matrix(rng, dt, n);
  inst.d.Y = Matrix::Zero(p, n);
  inst.d.D_diag = random_positive(rng, n);
  inst.h.M = random_matrix(rng, p, dt);
  inst.h.K = random_spd(rng, dt);
  inst.h.Psi = Matrix::Constant(1, 1, 1.7);
  inst.h.nu = nu_b;
  const Matrix om = omega(inst.d, NormalHyper{inst.h.M, inst.h.K});
  const MatT ev(inst.h.M * inst.d.Phi, inst.h.Psi, om, nu_b - 2.0 * p);
  Rng sampler(606);
  double acc = 0.0;
  const int reps = 2000;
  for (int r = 0; r < reps; ++r) {
    Design dd{inst.d.Phi, sample(ev, sampler), inst.d.D_diag};
    acc += t_degenerate_mle(dd, nu_b).Psi_hat(0, 0);
  }
  acc /= reps;
  const double factor = t_degenerate_mle(inst.d, nu_b).bias_factor;
  REQUIRE(rel_err(acc / inst.h.Psi(0, 0), factor) < 0.05);
}

TEST_CASE("conditional-chain factorization is consistent") {
  Rng rng(6);
  const TInstance inst = random_t_instance(rng, 2, 2, 3, 9.0);
  const double log_ev = t_log_evidence(inst.d, inst.h);
  const MatT post_a = t_posterior_a(inst.d, inst.h);
  Rng sampler(707);
  for (int rep = 0; rep < 200; ++rep) {
    const Matrix v = random_spd(sampler, 2);
    const Matrix a = random_matrix(sampler, 2, 2);
    const double lhs = log_pdf(MatNormal(a * inst.d.Phi, v,
                                         Matrix(inst.d.D_diag.asDiagonal())),
                               inst.d.Y) +
                       log_pdf(MatNormal(inst.h.M, v, inst.h.K), a) +
                       log_pdf(InvWishart(inst.h.Psi, inst.h.nu), v);
    const double rhs = log_pdf(t_posterior_v_given_a(inst.d, inst.h, a), v) +
                       log_pdf(post_a, a) + log_ev;
    REQUIRE(lhs == Catch::Approx(rhs).margin(1e-8));
  }
}

TEST_CASE("degrees-of-freedom bookkeeping") {
  Rng rng(7);
  const int p = 2, dt = 3, n = 5;
  const TInstance inst = random_t_instance(rng, p, dt, n, 9.0);
  REQUIRE(t_evidence(inst.d, inst.h).nu == Catch::Approx(inst.h.nu - 2 * p));
  REQUIRE(t_posterior_a(inst.d, inst.h).nu == Catch::Approx(inst.h.nu + n - 2 * p));
  REQUIRE(t_posterior_v(inst.d, inst.h).nu == Catch::Approx(inst.h.nu + n));
  const Matrix a = random_matrix(rng, p, dt);
  REQUIRE(t_posterior_v_given_a(inst.d, inst.h, a).nu ==
          Catch::Approx(inst.h.nu + n + dt));
}

TEST_CASE("large nu recovers the known-V predictive") {
  Rng rng(8);
  const int p = 2, dt = 3, n = 6;
  TInstance inst = random_t_instance(rng, p, dt, n, 1e5);
  const Matrix v0 = random_spd(rng, p);
  inst.h.Psi = (inst.h.nu - 2.0 * p - 2.0) * v0;
  const Matrix phi_star = random_matrix(rng, dt, 2);
  const Vector dstar = random_positive(rng, 2);
  const PredictiveT pt = t_predict(inst.d, inst.h, phi_star, dstar);
  const PredictiveNormal pn = predict(DesignBlock{inst.d, v0},
                                      NormalHyper{inst.h.M, inst.h.K}, phi_star, dstar);
  REQUIRE(rel_err(pt.total(), pn.total()) < 0.01);
}

TEST_CASE("Sycx is positive semidefinite and matches the difference form") {
  Rng rng(9);
  for (int rep = 0; rep < 10; ++rep) {
    const TInstance inst = random_t_instance(rng, 2, 3, 7, 9.0);
    const TSuffStats s = t_suffstats(inst.d, inst.h);
    REQUIRE_NOTHROW(Chol(
        Matrix(s.base.Sycx + 1e-12 * Matrix::Identity(2, 2)), "Sycx"));
    const Matrix diff_form =
        s.Syy - s.base.Syx * s.base.Sxx_inv * s.base.Syx.transpose();
    REQUIRE(rel_err(s.base.Sycx, diff_form) < 1e-8);
  }
}
