#include "mbll/metrics.hpp"

#include "mbll/bll_normal.hpp"
#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

using namespace mbll;
using test_util::random_matrix;
using test_util::random_positive;
using test_util::random_spd;

TEST_CASE("rmse: zero, constant offset, brute-force agreement") {
  Rng rng(1);
  const Matrix y = random_matrix(rng, 3, 20);
  REQUIRE(rmse(y, y) == Catch::Approx(0.0).margin(1e-15));

  const Matrix off = y.array() + 2.0;
  REQUIRE(rmse(off, y) == Catch::Approx(2.0 * std::sqrt(3.0)).epsilon(1e-12));

  const Matrix pred = random_matrix(rng, 3, 20);
  double acc = 0.0;
  for (int j = 0; j < 20; ++j) acc += (pred.col(j) - y.col(j)).squaredNorm();
  REQUIRE(rmse(pred, y) == Catch::Approx(std::sqrt(acc / 20.0)).margin(1e-12));
  REQUIRE_THROWS_AS(rmse(pred, y.leftCols(5)), std::invalid_argument);
}

TEST_CASE("nll scalar Normal values and matrix-T agreement") {
  PointPredictive std_normal{Vector::Zero(1), Matrix::Identity(1, 1), 1.0, 0.0};
  Matrix t1 = Matrix::Zero(1, 1);
  REQUIRE(nll({std_normal}, t1) ==
          Catch::Approx(0.5 * std::log(2 * std::numbers::pi)).epsilon(1e-12));

  PointPredictive wide{Vector::Zero(1), Matrix::Identity(1, 1), 2.0, 0.0};
  Matrix t2 = Matrix::Constant(1, 1, 2.0);
  REQUIRE(nll({wide}, t2) ==
          Catch::Approx(0.5 * std::log(4 * std::numbers::pi) + 1.0).epsilon(1e-12));

  Rng rng(2);
  PointPredictive tp;
  tp.mean = test_util::random_vector(rng, 2);
  tp.row = random_spd(rng, 2);
  tp.col = 1.7;
  tp.dof = 6.0;
  const Matrix yt = random_matrix(rng, 2, 1);
  const double via_matt = -log_pdf(
      MatT(Matrix(tp.mean), tp.row, Matrix::Constant(1, 1, tp.col), tp.dof), yt);
  REQUIRE(nll({tp}, yt) == Catch::Approx(via_matt).margin(1e-12));
}

TEST_CASE("ece: self-consistency, all-at-mean, permutation invariance") {
  Rng rng(3);
  const int n = 10000;
  std::vector<PointPredictive> preds;
  Matrix targets(1, n);
  for (int i = 0; i < n; ++i) {
    PointPredictive p;
    p.mean = Vector::Constant(1, rng.normal());
    p.row = Matrix::Identity(1, 1);
    p.col = 0.5 + rng.uniform();
    p.dof = 0.0;
    targets(0, i) = p.mean(0) + std::sqrt(p.col) * rng.normal();
    preds.push_back(std::move(p));
  }
  auto [e, curve] = ece(preds, targets);
  REQUIRE(e < 0.02);
  REQUIRE(curve.size() == 19);

  // all targets at the mean: coverage 1 at every level
  Matrix at_mean(1, n);
  for (int i = 0; i < n; ++i) at_mean(0, i) = preds[i].mean(0);
  auto [e1, curve1] = ece(preds, at_mean);
  double want = 0.0;
  for (const auto& c : curve1) {
    REQUIRE(c.empirical == Catch::Approx(1.0));
    want += 1.0 - c.nominal;
  }
  REQUIRE(e1 == Catch::Approx(want / 19.0).epsilon(1e-12));

  // permutation invariance
  std::vector<PointPredictive> shuffled = preds;
  Matrix tsh = targets;
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.uniform_int(i + 1));
    std::swap(shuffled[i], shuffled[j]);
    tsh.col(i).swap(tsh.col(j));
  }
  auto [e2, curve2] = ece(shuffled, tsh);
  REQUIRE(e2 == Catch::Approx(e).margin(1e-12));
}

TEST_CASE("ece detects a doubled predictive standard deviation") {
  Rng rng(4);
  const int n = 10000;
  std::vector<PointPredictive> good, wide;
  Matrix targets(1, n);
  for (int i = 0; i < n; ++i) {
    PointPredictive p;
    p.mean = Vector::Constant(1, 0.0);
    p.row = Matrix::Identity(1, 1);
    p.col = 1.0;
    targets(0, i) = rng.normal();
    good.push_back(p);
    p.col = 4.0;  // doubled stddev
    wide.push_back(p);
  }
  const double e_good = ece(good, targets).first;
  const double e_wide = ece(wide, targets).first;
  REQUIRE(e_wide > e_good);
  REQUIRE(e_wide > 0.1);
}

TEST_CASE("ece covers the T predictive correctly") {
  Rng rng(5);
  const int n = 20000;
  const double dof = 5.0;
  std::vector<PointPredictive> preds;
  Matrix targets(1, n);
  for (int i = 0; i < n; ++i) {
    PointPredictive p;
    p.mean = Vector::Zero(1);
    p.row = Matrix::Constant(1, 1, 2.0);
    p.col = 1.5;
    p.dof = dof;
    // draw from the scaled Student-t: scale^2 = col * row / dof
    const double scale = std::sqrt(p.col * p.row(0, 0) / dof);
    const double z = rng.normal() / std::sqrt(rng.chi_squared(dof) / dof);
    targets(0, i) = scale * z;
    preds.push_back(std::move(p));
  }
  REQUIRE(ece(preds, targets).first < 0.02);
}

TEST_CASE("NLEV is invariant to the (cV, K/c) reparameterization") {
  Rng rng(6);
  DesignBlock d;
  d.Phi = random_matrix(rng, 3, 10);
  d.Y = random_matrix(rng, 2, 10);
  d.D_diag = random_positive(rng, 10);
  d.V = random_spd(rng, 2);
  const NormalHyper h{random_matrix(rng, 2, 3), random_spd(rng, 3)};
  const double nlev0 = -log_evidence(d, h) / d.n();
  for (double c : {0.1, 10.0}) {
    DesignBlock dc = d;
    dc.V = c * d.V;
    dc.D_diag = d.D_diag / c;  // the noise scale shares V
    REQUIRE(-log_evidence(dc, NormalHyper{h.M, h.K / c}) / d.n() ==
            Catch::Approx(nlev0).margin(1e-9));
  }
}
