#pragma once

#include "mbll/linalg.hpp"
#include "mbll/matvar.hpp"
#include "mbll/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mbll {

// Per-dimension affine standardization, fitted on a dims x N block.
struct Standardizer {
  Vector mean;
  Vector scale;

  static Standardizer fit(const Matrix& a) {
    Standardizer s;
    s.mean = a.rowwise().mean();
    s.scale.resize(a.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      const double var =
          (a.row(i).array() - s.mean(i)).square().sum() / std::max<double>(1, a.cols());
      const double sd = std::sqrt(var);
      s.scale(i) = sd > 0 ? sd : 1.0;
    }
    return s;
  }

  Matrix apply(const Matrix& a) const {
    return scale.cwiseInverse().asDiagonal() * (a.colwise() - mean);
  }
  Matrix invert(const Matrix& a) const {
    return (scale.asDiagonal() * a).colwise() + mean;
  }
};

struct Dataset {
  Matrix X;  // d_x x N
  Matrix Y;  // p x N
  std::vector<std::string> x_names;
  std::vector<std::string> y_names;
  std::optional<Standardizer> x_std;
  std::optional<Standardizer> y_std;

  Eigen::Index n() const { return X.cols(); }

  void validate() const {
    if (X.cols() != Y.cols()) {
      throw std::invalid_argument("Dataset: X and Y sample counts differ");
    }
    if (!X.allFinite() || !Y.allFinite()) {
      throw std::invalid_argument("Dataset: non-finite values");
    }
  }
};

// ---- 1-D interpolation benchmark ----
//
// Observations sampled uniformly on four unit intervals centered at
// +-1.5 and +-3.5. The trigonometric ground truth and the cos^2-based
// heteroscedastic scale are fixed, documented choices.

inline double interp_truth_mean(double x) {
  return std::sin(2.0 * x) + 0.5 * std::cos(3.0 * x);
}

inline double interp_truth_scale(double x) {
  const double c = std::cos(x);
  return 0.1 + 0.4 * c * c;
}

inline Dataset gen_interp1d(int n, std::uint64_t seed) {
  if (n < 4) throw std::invalid_argument("gen_interp1d: n must be >= 4");
  static constexpr std::array<double, 4> kCenters = {-3.5, -1.5, 1.5, 3.5};
  Rng rng(seed);
  Dataset ds;
  ds.X.resize(1, n);
  ds.Y.resize(1, n);
  for (int i = 0; i < n; ++i) {
    const double c = kCenters[rng.uniform_int(4)];
    const double x = c + rng.uniform(-0.5, 0.5);
    ds.X(0, i) = x;
    ds.Y(0, i) = interp_truth_mean(x) + interp_truth_scale(x) * rng.normal();
  }
  ds.x_names = {"x"};
  ds.y_names = {"y"};
  return ds;
}

// ---- synthetic linear model (oracle datasets) ----

struct LinearMvnTruth {
  Matrix A;       // the sampled coefficient matrix
  Vector d_diag;  // per-sample noise variances actually used
};

// Draws A ~ MN(M, V, K) once, features as standard-normal columns, and
// Y = A Phi + sigma(x) L_V z. With hetero off, sigma^2 is identically 1.
inline Dataset gen_linear_mvn(int p, int dt, int n, const Matrix& m, const Matrix& k,
                              const Matrix& v, bool hetero, std::uint64_t seed,
                              LinearMvnTruth* truth = nullptr) {
  if (m.rows() != p || m.cols() != dt) {
    throw std::invalid_argument("gen_linear_mvn: M must be p x d_t");
  }
  Rng rng(seed);
  const Matrix a = sample(MatNormal(m, v, k), rng);
  Dataset ds;
  ds.X.resize(dt, n);
  for (Eigen::Index j = 0; j < ds.X.cols(); ++j) {
    for (Eigen::Index i = 0; i < ds.X.rows(); ++i) ds.X(i, j) = rng.normal();
  }
  Vector d_diag(n);
  for (int i = 0; i < n; ++i) {
    const double s = hetero ? 0.25 + std::sin(ds.X(0, i)) * std::sin(ds.X(0, i)) : 1.0;
    d_diag(i) = s;
  }
  Chol cv(v, "gen_linear_mvn.V");
  const Matrix lv = cv.matrix_l();
  ds.Y.resize(p, n);
  for (int i = 0; i < n; ++i) {
    Vector z(p);
    for (int r = 0; r < p; ++r) z(r) = rng.normal();
    ds.Y.col(i) = a * ds.X.col(i) + std::sqrt(d_diag(i)) * (lv * z);
  }
  for (int i = 0; i < dt; ++i) ds.x_names.push_back("phi" + std::to_string(i));
  for (int i = 0; i < p; ++i) ds.y_names.push_back("y" + std::to_string(i));
  if (truth) *truth = LinearMvnTruth{a, d_diag};
  return ds;
}

// ---- CSV ingestion ----

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;  // NaN marks a missing cell
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline bool cell_missing(const std::string& s) {
  return s.empty() || s == "NA" || s == "nan" || s == "NaN";
}

}  // namespace detail

// Comma-separated, header row required, '.' decimal. allow_missing controls
// whether empty/NA cells become NaN or raise.
inline CsvTable read_csv(const std::string& path, bool allow_missing = false) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("read_csv: cannot open " + path);
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("read_csv: empty file");
  t.header = detail::split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != t.header.size()) {
      throw std::invalid_argument("read_csv: ragged row in " + path);
    }
    std::vector<double> row(cells.size());
    for (size_t i = 0; i < cells.size(); ++i) {
      if (detail::cell_missing(cells[i])) {
        if (!allow_missing) {
          throw std::invalid_argument("read_csv: missing value in column " +
                                      t.header[i]);
        }
        row[i] = std::numeric_limits<double>::quiet_NaN();
      } else {
        try {
          size_t pos = 0;
          row[i] = std::stod(cells[i], &pos);
          if (pos != cells[i].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
          if (allow_missing) {
            row[i] = std::numeric_limits<double>::quiet_NaN();
          } else {
            throw std::invalid_argument("read_csv: non-numeric cell '" + cells[i] +
                                        "' in column " + t.header[i]);
          }
        }
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline Dataset dataset_from_table(const CsvTable& t,
                                  const std::vector<std::string>& target_names) {
  std::vector<size_t> y_idx, x_idx;
  for (const auto& name : target_names) {
    const auto it = std::find(t.header.begin(), t.header.end(), name);
    if (it == t.header.end()) {
      throw std::invalid_argument("dataset_from_table: missing column " + name);
    }
    y_idx.push_back(static_cast<size_t>(it - t.header.begin()));
  }
  for (size_t i = 0; i < t.header.size(); ++i) {
    if (std::find(y_idx.begin(), y_idx.end(), i) == y_idx.end()) x_idx.push_back(i);
  }
  Dataset ds;
  const Eigen::Index n = static_cast<Eigen::Index>(t.rows.size());
  ds.X.resize(static_cast<Eigen::Index>(x_idx.size()), n);
  ds.Y.resize(static_cast<Eigen::Index>(y_idx.size()), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (size_t i = 0; i < x_idx.size(); ++i) ds.X(static_cast<Eigen::Index>(i), j) = t.rows[j][x_idx[i]];
    for (size_t i = 0; i < y_idx.size(); ++i) ds.Y(static_cast<Eigen::Index>(i), j) = t.rows[j][y_idx[i]];
  }
  for (size_t i : x_idx) ds.x_names.push_back(t.header[i]);
  for (size_t i : y_idx) ds.y_names.push_back(t.header[i]);
  ds.validate();
  return ds;
}

struct SplitDatasets {
  Dataset train, val, test;
};

// Random split into train/val/test per the given fractions; standardization
// is fitted on the training split only and applied to all three.
inline SplitDatasets split_standardize(const Dataset& full,
                                       const std::array<double, 3>& fractions,
                                       std::uint64_t seed) {
  const double fsum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(fsum - 1.0) > 1e-9) {
    throw std::invalid_argument("split_standardize: fractions must sum to 1");
  }
  const Eigen::Index n = full.n();
  std::vector<Eigen::Index> order(n);
  for (Eigen::Index i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const Eigen::Index n_train = static_cast<Eigen::Index>(fractions[0] * n);
  const Eigen::Index n_val = static_cast<Eigen::Index>(fractions[1] * n);
  const Eigen::Index n_test = n - n_train - n_val;
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw std::invalid_argument("split_standardize: a split is empty");
  }
  auto take = [&](Eigen::Index begin, Eigen::Index count) {
    Dataset d;
    d.X.resize(full.X.rows(), count);
    d.Y.resize(full.Y.rows(), count);
    for (Eigen::Index j = 0; j < count; ++j) {
      d.X.col(j) = full.X.col(order[begin + j]);
      d.Y.col(j) = full.Y.col(order[begin + j]);
    }
    d.x_names = full.x_names;
    d.y_names = full.y_names;
    return d;
  };
  SplitDatasets out{take(0, n_train), take(n_train, n_val),
                    take(n_train + n_val, n_test)};
  const Standardizer sx = Standardizer::fit(out.train.X);
  const Standardizer sy = Standardizer::fit(out.train.Y);
  for (Dataset* d : {&out.train, &out.val, &out.test}) {
    d->X = sx.apply(d->X);
    d->Y = sy.apply(d->Y);
    d->x_std = sx;
    d->y_std = sy;
  }
  return out;
}

inline SplitDatasets load_csv_split(const std::string& path,
                                    const std::vector<std::string>& target_names,
                                    const std::array<double, 3>& fractions,
                                    std::uint64_t seed) {
  return split_standardize(dataset_from_table(read_csv(path), target_names),
                           fractions, seed);
}

// Random two-way split without standardization (train/validation reserves).
inline std::pair<Dataset, Dataset> split_two(const Dataset& full, double train_frac,
                                             std::uint64_t seed) {
  const Eigen::Index n = full.n();
  std::vector<Eigen::Index> order(n);
  for (Eigen::Index i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const Eigen::Index n_train = static_cast<Eigen::Index>(train_frac * n);
  if (n_train == 0 || n_train == n) {
    throw std::invalid_argument("split_two: a split is empty");
  }
  auto take = [&](Eigen::Index begin, Eigen::Index count) {
    Dataset d;
    d.X.resize(full.X.rows(), count);
    d.Y.resize(full.Y.rows(), count);
    for (Eigen::Index j = 0; j < count; ++j) {
      d.X.col(j) = full.X.col(order[begin + j]);
      d.Y.col(j) = full.Y.col(order[begin + j]);
    }
    d.x_names = full.x_names;
    d.y_names = full.y_names;
    d.x_std = full.x_std;
    d.y_std = full.y_std;
    return d;
  };
  return {take(0, n_train), take(n_train, n - n_train)};
}

// Order-preserving split for time series, standardization fitted on the
// leading (training) block.
inline SplitDatasets split_sequential_standardize(const Dataset& full,
                                                  const std::array<double, 3>& fractions) {
  const double fsum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(fsum - 1.0) > 1e-9) {
    throw std::invalid_argument("split_sequential_standardize: fractions must sum to 1");
  }
  const Eigen::Index n = full.n();
  const Eigen::Index n_train = static_cast<Eigen::Index>(fractions[0] * n);
  const Eigen::Index n_val = static_cast<Eigen::Index>(fractions[1] * n);
  const Eigen::Index n_test = n - n_train - n_val;
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw std::invalid_argument("split_sequential_standardize: a split is empty");
  }
  auto take = [&](Eigen::Index begin, Eigen::Index count) {
    Dataset d;
    d.X = full.X.middleCols(begin, count);
    d.Y = full.Y.middleCols(begin, count);
    d.x_names = full.x_names;
    d.y_names = full.y_names;
    return d;
  };
  SplitDatasets out{take(0, n_train), take(n_train, n_val),
                    take(n_train + n_val, n_test)};
  const Standardizer sx = Standardizer::fit(out.train.X);
  const Standardizer sy = Standardizer::fit(out.train.Y);
  for (Dataset* d : {&out.train, &out.val, &out.test}) {
    d->X = sx.apply(d->X);
    d->Y = sy.apply(d->Y);
    d->x_std = sx;
    d->y_std = sy;
  }
  return out;
}

// ---- VARX lag embedding ----

struct VarxSpec {
  int P = 1;  // input lag order
  int Q = 2;  // output lag order
};

// Sample t carries x~_t = [x_t, ..., x_{t-P+1}, y_{t-1}, ..., y_{t-Q}] with
// target y_t; the first max(P-1, Q) time steps are dropped.
inline Dataset varx_embed(const Matrix& u, const Matrix& y, const VarxSpec& spec) {
  if (spec.P < 1 || spec.Q < 1) throw std::invalid_argument("varx_embed: P, Q >= 1");
  if (u.cols() != y.cols()) {
    throw std::invalid_argument("varx_embed: input/output lengths differ");
  }
  const Eigen::Index t_total = u.cols();
  const Eigen::Index t0 = std::max<Eigen::Index>(spec.P - 1, spec.Q);
  if (t_total <= t0) throw std::invalid_argument("varx_embed: series too short");
  const Eigen::Index du = u.rows();
  const Eigen::Index p = y.rows();
  const Eigen::Index dx = spec.P * du + spec.Q * p;
  Dataset ds;
  ds.X.resize(dx, t_total - t0);
  ds.Y.resize(p, t_total - t0);
  for (Eigen::Index t = t0; t < t_total; ++t) {
    Eigen::Index at = 0;
    for (int lag = 0; lag < spec.P; ++lag) {
      ds.X.block(at, t - t0, du, 1) = u.col(t - lag);
      at += du;
    }
    for (int lag = 1; lag <= spec.Q; ++lag) {
      ds.X.block(at, t - t0, p, 1) = y.col(t - lag);
      at += p;
    }
    ds.Y.col(t - t0) = y.col(t);
  }
  for (int lag = 0; lag < spec.P; ++lag) {
    for (Eigen::Index i = 0; i < du; ++i) {
      ds.x_names.push_back("u" + std::to_string(i) + "_lag" + std::to_string(lag));
    }
  }
  for (int lag = 1; lag <= spec.Q; ++lag) {
    for (Eigen::Index i = 0; i < p; ++i) {
      ds.x_names.push_back("y" + std::to_string(i) + "_lag" + std::to_string(lag));
    }
  }
  for (Eigen::Index i = 0; i < p; ++i) ds.y_names.push_back("y" + std::to_string(i));
  return ds;
}

// ---- Beijing multi-site air-quality schema ----

inline const std::vector<std::string>& beijing_input_columns() {
  static const std::vector<std::string> cols = {"TEMP", "PRES", "DEWP", "RAIN",
                                                "WSPM"};
  return cols;
}

inline const std::vector<std::string>& beijing_output_columns() {
  static const std::vector<std::string> cols = {"PM2.5", "PM10", "SO2",
                                                "NO2",   "CO",   "O3"};
  return cols;
}

// Hour-indexed pollutant/meteorology series. Missing cells are forward-filled
// up to 3 consecutive steps; longer gaps drop the rows.
inline Dataset load_beijing_csv(const std::string& path) {
  const CsvTable t = read_csv(path, /*allow_missing=*/true);
  const auto& in_cols = beijing_input_columns();
  const auto& out_cols = beijing_output_columns();
  std::vector<size_t> idx;
  for (const auto& name : in_cols) {
    const auto it = std::find(t.header.begin(), t.header.end(), name);
    if (it == t.header.end()) {
      throw std::invalid_argument("load_beijing_csv: missing column " + name);
    }
    idx.push_back(static_cast<size_t>(it - t.header.begin()));
  }
  for (const auto& name : out_cols) {
    const auto it = std::find(t.header.begin(), t.header.end(), name);
    if (it == t.header.end()) {
      throw std::invalid_argument("load_beijing_csv: missing column " + name);
    }
    idx.push_back(static_cast<size_t>(it - t.header.begin()));
  }
  const size_t dim = idx.size();
  std::vector<std::vector<double>> kept;
  std::vector<double> last(dim, std::numeric_limits<double>::quiet_NaN());
  std::vector<int> gap(dim, 1000);
  for (const auto& row : t.rows) {
    std::vector<double> vals(dim);
    bool ok = true;
    for (size_t i = 0; i < dim; ++i) {
      double v = row[idx[i]];
      if (std::isnan(v)) {
        if (gap[i] < 3 && !std::isnan(last[i])) {
          v = last[i];
          ++gap[i];
        } else {
          ok = false;
        }
      } else {
        gap[i] = 0;
      }
      vals[i] = v;
    }
    if (!ok) {
      for (size_t i = 0; i < dim; ++i) {
        if (std::isnan(row[idx[i]])) ++gap[i];
      }
      continue;
    }
    for (size_t i = 0; i < dim; ++i) last[i] = vals[i];
    kept.push_back(std::move(vals));
  }
  if (kept.empty()) throw std::invalid_argument("load_beijing_csv: no usable rows");
  Dataset ds;
  const Eigen::Index n = static_cast<Eigen::Index>(kept.size());
  ds.X.resize(static_cast<Eigen::Index>(in_cols.size()), n);
  ds.Y.resize(static_cast<Eigen::Index>(out_cols.size()), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (size_t i = 0; i < in_cols.size(); ++i) {
      ds.X(static_cast<Eigen::Index>(i), j) = kept[j][i];
    }
    for (size_t i = 0; i < out_cols.size(); ++i) {
      ds.Y(static_cast<Eigen::Index>(i), j) = kept[j][in_cols.size() + i];
    }
  }
  ds.x_names = in_cols;
  ds.y_names = out_cols;
  return ds;
}

// ---- fixed Gaussian interpolation basis ----

inline Matrix gaussian_basis(const Vector& centers, double width, const Matrix& x,
                             bool include_bias) {
  if (x.rows() != 1) throw std::invalid_argument("gaussian_basis: expects 1-D inputs");
  const Eigen::Index m = centers.size();
  Matrix phi(m + (include_bias ? 1 : 0), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const double d = x(0, j) - centers(i);
      phi(i, j) = std::exp(-0.5 * d * d / (width * width));
    }
  }
  if (include_bias) phi.bottomRows(1).setOnes();
  return phi;
}

}  // namespace mbll
