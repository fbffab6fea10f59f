#include "mbll/data.hpp"

#include "mbll/model_io.hpp"
#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace mbll;
using test_util::rel_err;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const std::string path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream out(path);
  out << content;
  return path;
}

}  // namespace

TEST_CASE("interp1d samples live on the four unit intervals") {
  const Dataset ds = gen_interp1d(500, 1);
  REQUIRE(ds.n() == 500);
  for (Eigen::Index i = 0; i < ds.n(); ++i) {
    const double x = ds.X(0, i);
    const bool ok = (x >= -4.0 && x <= -3.0) || (x >= -2.0 && x <= -1.0) ||
                    (x >= 1.0 && x <= 2.0) || (x >= 3.0 && x <= 4.0);
    REQUIRE(ok);
  }
  const Dataset a = gen_interp1d(100, 7);
  const Dataset b = gen_interp1d(100, 7);
  REQUIRE(a.X == b.X);
  REQUIRE(a.Y == b.Y);
  REQUIRE_THROWS_AS(gen_interp1d(3, 1), std::invalid_argument);
}

TEST_CASE("interp ground truth is pure and matches the documented functions") {
  REQUIRE(interp_truth_mean(0.0) == Catch::Approx(0.5));
  REQUIRE(interp_truth_scale(0.0) == Catch::Approx(0.5));
  REQUIRE(interp_truth_scale(std::numbers::pi / 2) == Catch::Approx(0.1).margin(1e-12));
}

TEST_CASE("linear generator: noiseless exactness, noise covariance, homo flag") {
  const int p = 2, dt = 3;
  LinearMvnTruth truth;
  // noiseless: V -> 0 is not allowed, use tiny V
  const Dataset tiny = gen_linear_mvn(p, dt, 50, Matrix::Zero(p, dt),
                                      Matrix::Identity(dt, dt),
                                      1e-20 * Matrix::Identity(p, p), false, 3, &truth);
  REQUIRE((tiny.Y - truth.A * tiny.X).cwiseAbs().maxCoeff() < 1e-8);

  LinearMvnTruth t2;
  Rng spd_rng(5);
  const Matrix v = test_util::random_spd(spd_rng, p);
  const Dataset big = gen_linear_mvn(p, dt, 100000, Matrix::Zero(p, dt),
                                     Matrix::Identity(dt, dt), v, false, 4, &t2);
  REQUIRE(t2.d_diag.isOnes());
  const Matrix resid = big.Y - t2.A * big.X;
  const Matrix cov = resid * resid.transpose() / big.n();
  REQUIRE(rel_err(cov, v) < 0.03);
}

TEST_CASE("CSV split sizes, round-trip standardization, seed stability") {
  std::string csv = "a,b,y\n";
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    csv += std::to_string(rng.normal()) + "," + std::to_string(rng.normal()) + "," +
           std::to_string(rng.normal()) + "\n";
  }
  const std::string path = write_temp("mbll_test_split.csv", csv);
  const SplitDatasets s = load_csv_split(path, {"y"}, {0.72, 0.18, 0.10}, 9);
  REQUIRE(s.train.n() == 72);
  REQUIRE(s.val.n() == 18);
  REQUIRE(s.test.n() == 10);
  REQUIRE(s.train.X.rows() == 2);

  // standardization round-trip
  const Matrix back = s.train.y_std->invert(s.train.Y);
  const Matrix back2 = s.train.y_std->invert(s.train.y_std->apply(back));
  REQUIRE((back - back2).cwiseAbs().maxCoeff() < 1e-12);
  // train-only fit: standardized train has zero mean, unit variance
  REQUIRE(s.train.Y.rowwise().mean().cwiseAbs().maxCoeff() < 1e-12);

  const SplitDatasets s2 = load_csv_split(path, {"y"}, {0.72, 0.18, 0.10}, 9);
  REQUIRE(s.train.X == s2.train.X);
  REQUIRE(s.test.Y == s2.test.Y);

  // splits are disjoint and exhaustive: counts add up and columns differ
  REQUIRE(s.train.n() + s.val.n() + s.test.n() == 100);

  REQUIRE_THROWS_AS(load_csv_split(path, {"missing"}, {0.72, 0.18, 0.10}, 9),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(load_csv_split(path, {"y"}, {0.5, 0.4, 0.2}, 9),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(load_csv_split(path, {"y"}, {0.99, 0.005, 0.005}, 9),
                    std::invalid_argument);
}

TEST_CASE("CSV parsing errors") {
  const std::string bad_cell = write_temp("mbll_bad_cell.csv", "a,y\n1.0,oops\n");
  REQUIRE_THROWS_AS(read_csv(bad_cell), std::invalid_argument);
  const std::string ragged = write_temp("mbll_ragged.csv", "a,y\n1.0\n");
  REQUIRE_THROWS_AS(read_csv(ragged), std::invalid_argument);
  REQUIRE_THROWS_AS(read_csv("/nonexistent/file.csv"), std::invalid_argument);
}

TEST_CASE("VARX embedding: dimensions, constants, shift equivariance") {
  Rng rng(8);
  const int du = 5, p = 6, t_len = 40;
  const Matrix u = test_util::random_matrix(rng, du, t_len);
  const Matrix y = test_util::random_matrix(rng, p, t_len);
  const Dataset ds = varx_embed(u, y, VarxSpec{1, 2});
  REQUIRE(ds.X.rows() == 17);
  REQUIRE(ds.n() == t_len - 2);
  // sample 0 corresponds to t = 2: x~ = [u_2, y_1, y_0]
  REQUIRE(ds.X.block(0, 0, du, 1) == u.col(2));
  REQUIRE(ds.X.block(du, 0, p, 1) == y.col(1));
  REQUIRE(ds.X.block(du + p, 0, p, 1) == y.col(0));
  REQUIRE(ds.Y.col(0) == y.col(2));

  // constant series embed to constant rows
  const Matrix uc = Matrix::Ones(2, 10);
  const Matrix yc = Matrix::Constant(1, 10, 3.0);
  const Dataset dc = varx_embed(uc, yc, VarxSpec{1, 1});
  for (Eigen::Index j = 1; j < dc.n(); ++j) {
    REQUIRE(dc.X.col(j) == dc.X.col(0));
  }

  // shifting the series shifts the embedding
  const Dataset full = varx_embed(u, y, VarxSpec{2, 2});
  const Dataset shifted = varx_embed(u.rightCols(t_len - 1), y.rightCols(t_len - 1),
                                     VarxSpec{2, 2});
  REQUIRE(shifted.X.col(0) == full.X.col(1));
  REQUIRE_THROWS_AS(varx_embed(u.leftCols(2), y.leftCols(2), VarxSpec{1, 2}),
                    std::invalid_argument);
}

TEST_CASE("Beijing loader forward-fills short gaps and drops long ones") {
  std::string csv =
      "No,year,month,day,hour,PM2.5,PM10,SO2,NO2,CO,O3,TEMP,PRES,DEWP,RAIN,wd,WSPM,"
      "station\n";
  auto row = [&](int i, const std::string& pm25) {
    return std::to_string(i) + ",2013,3,1," + std::to_string(i) + "," + pm25 +
           ",10,2,3,100,50,5,1000,-5,0,N,2.0,Site\n";
  };
  csv += row(0, "7");
  csv += row(1, "NA");   // filled from 7
  csv += row(2, "NA");   // filled
  csv += row(3, "NA");   // filled (third consecutive)
  csv += row(4, "9");
  csv += row(5, "NA");
  csv += row(6, "NA");
  csv += row(7, "NA");
  csv += row(8, "NA");   // fourth consecutive: dropped
  csv += row(9, "4");
  const std::string path = write_temp("mbll_beijing.csv", csv);
  const Dataset ds = load_beijing_csv(path);
  REQUIRE(ds.Y.rows() == 6);
  REQUIRE(ds.X.rows() == 5);
  REQUIRE(ds.n() == 9);  // one row dropped
  REQUIRE(ds.Y(0, 1) == 7.0);
  REQUIRE(ds.Y(0, 3) == 7.0);
  REQUIRE(ds.Y(0, 5) == 9.0);
  REQUIRE(ds.Y(0, 8) == 4.0);
}

TEST_CASE("dataset JSON bundle round-trips") {
  Dataset ds = gen_interp1d(20, 2);
  ds.x_std = Standardizer::fit(ds.X);
  const json j = dataset_to_json(ds);
  const Dataset back = dataset_from_json(j);
  REQUIRE(back.X == ds.X);
  REQUIRE(back.Y == ds.Y);
  REQUIRE(back.x_names == ds.x_names);
  REQUIRE(back.x_std->mean == ds.x_std->mean);
}

TEST_CASE("gaussian basis shape and bias row") {
  Vector centers(3);
  centers << -1.0, 0.0, 1.0;
  const Matrix x = Matrix::Constant(1, 2, 0.0);
  const Matrix phi = gaussian_basis(centers, 0.5, x, true);
  REQUIRE(phi.rows() == 4);
  REQUIRE(phi(1, 0) == Catch::Approx(1.0));
  REQUIRE(phi(3, 0) == 1.0);
}
