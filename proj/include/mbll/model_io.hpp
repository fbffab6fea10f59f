#pragma once

#include "mbll/bll_normal.hpp"
#include "mbll/bll_t.hpp"
#include "mbll/data.hpp"
#include "mbll/metrics.hpp"
#include "mbll/nn.hpp"

#include <json.hpp>

#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbll {

using json = nlohmann::ordered_json;

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const json& j) {
  if (!j.is_array()) throw std::invalid_argument("matrix_from_json: expected array");
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return Matrix(0, 0);
  const Eigen::Index cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j[i].size()) != cols) {
      throw std::invalid_argument("matrix_from_json: ragged rows");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

inline json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline Vector vector_from_json(const json& j) {
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j[i].get<double>();
  return v;
}

// ---- feature model weights (versioned document: shapes + row-major data) ----

inline json feature_model_to_json(const FeatureModel& m) {
  json j;
  j["format_version"] = 1;
  j["in_dim"] = m.in_dim;
  j["hidden"] = m.hidden;
  j["activation"] = m.act == Activation::softplus ? "softplus" : "leaky_relu";
  j["include_bias_feature"] = m.include_bias_feature;
  j["separate_sigma_backbone"] = m.separate_sigma_backbone;
  j["sigma_floor"] = m.sigma_floor;
  json tensors;
  for (size_t l = 0; l < m.W.size(); ++l) {
    tensors["W" + std::to_string(l)] = matrix_to_json(m.W[l]);
    tensors["b" + std::to_string(l)] = vector_to_json(m.b[l]);
  }
  for (size_t l = 0; l < m.Ws.size(); ++l) {
    tensors["Ws" + std::to_string(l)] = matrix_to_json(m.Ws[l]);
    tensors["bs" + std::to_string(l)] = vector_to_json(m.bs[l]);
  }
  tensors["w_sigma"] = vector_to_json(m.w_sigma);
  tensors["b_sigma"] = m.b_sigma;
  j["tensors"] = std::move(tensors);
  return j;
}

inline FeatureModel feature_model_from_json(const json& j) {
  if (j.at("format_version").get<int>() != 1) {
    throw std::invalid_argument("feature_model_from_json: unsupported version");
  }
  FeatureModel m;
  m.in_dim = j.at("in_dim").get<int>();
  m.hidden = j.at("hidden").get<std::vector<int>>();
  const std::string act = j.at("activation").get<std::string>();
  if (act == "softplus") {
    m.act = Activation::softplus;
  } else if (act == "leaky_relu") {
    m.act = Activation::leaky_relu;
  } else {
    throw std::invalid_argument("feature_model_from_json: unknown activation " + act);
  }
  m.include_bias_feature = j.at("include_bias_feature").get<bool>();
  m.separate_sigma_backbone = j.at("separate_sigma_backbone").get<bool>();
  m.sigma_floor = j.at("sigma_floor").get<double>();
  const json& tensors = j.at("tensors");
  for (size_t l = 0; l < m.hidden.size(); ++l) {
    m.W.push_back(matrix_from_json(tensors.at("W" + std::to_string(l))));
    m.b.push_back(vector_from_json(tensors.at("b" + std::to_string(l))));
  }
  if (m.separate_sigma_backbone) {
    for (size_t l = 0; l < m.hidden.size(); ++l) {
      m.Ws.push_back(matrix_from_json(tensors.at("Ws" + std::to_string(l))));
      m.bs.push_back(vector_from_json(tensors.at("bs" + std::to_string(l))));
    }
  }
  m.w_sigma = vector_from_json(tensors.at("w_sigma"));
  m.b_sigma = tensors.at("b_sigma").get<double>();
  return m;
}

inline json standardizer_to_json(const Standardizer& s) {
  json j;
  j["mean"] = vector_to_json(s.mean);
  j["scale"] = vector_to_json(s.scale);
  return j;
}

inline Standardizer standardizer_from_json(const json& j) {
  Standardizer s;
  s.mean = vector_from_json(j.at("mean"));
  s.scale = vector_from_json(j.at("scale"));
  return s;
}

// ---- dataset reproducibility bundle ----

inline json dataset_to_json(const Dataset& ds) {
  json j;
  j["format_version"] = 1;
  j["x_names"] = ds.x_names;
  j["y_names"] = ds.y_names;
  j["X"] = matrix_to_json(ds.X);
  j["Y"] = matrix_to_json(ds.Y);
  if (ds.x_std) j["x_std"] = standardizer_to_json(*ds.x_std);
  if (ds.y_std) j["y_std"] = standardizer_to_json(*ds.y_std);
  return j;
}

inline Dataset dataset_from_json(const json& j) {
  Dataset ds;
  ds.x_names = j.at("x_names").get<std::vector<std::string>>();
  ds.y_names = j.at("y_names").get<std::vector<std::string>>();
  ds.X = matrix_from_json(j.at("X"));
  ds.Y = matrix_from_json(j.at("Y"));
  if (j.contains("x_std")) ds.x_std = standardizer_from_json(j.at("x_std"));
  if (j.contains("y_std")) ds.y_std = standardizer_from_json(j.at("y_std"));
  return ds;
}

// ---- fitted model artifact ----

// Everything prediction and evaluation need: fitted hyperparameters, the
// posterior summary, the (frozen) feature map, the noise-scale source and the
// standardization fitted at training time.
struct FittedModel {
  std::string kind;  // "normal" | "t"
  Matrix M, K;
  Matrix Psi;
  double nu = 0.0;
  Matrix V;
  Matrix post_mean;
  Matrix Sxx_inv;
  Matrix H;              // T: Psi + Sycx at the training data
  double pred_dof = 0.0; // T: nu + N - 2p
  long n_train = 0;

  std::string feature_kind;  // "mlp" | "gaussian_basis" | "identity"
  std::optional<FeatureModel> model;
  Vector basis_centers;
  double basis_width = 0.0;
  bool basis_bias = true;
  bool mirror_augment = false;

  std::string sigma_mode;  // "head" | "constant"
  double sigma2 = 1.0;

  std::optional<Standardizer> x_std, y_std;
  std::vector<std::string> x_names, y_names;
  std::uint64_t seed = 0;

  Eigen::Index p() const { return M.rows(); }
  Eigen::Index dt() const { return M.cols(); }

  // Feature map and noise variances at raw (unstandardized) inputs.
  std::pair<Matrix, Vector> features(const Matrix& x_raw) const {
    const Matrix x = x_std ? x_std->apply(x_raw) : x_raw;
    Matrix phi;
    Vector sigma2_vec;
    if (feature_kind == "mlp") {
      auto [f, s2] = eval_features(*model, x, mirror_augment);
      phi = std::move(f);
      sigma2_vec = std::move(s2);
    } else if (feature_kind == "gaussian_basis") {
      phi = gaussian_basis(basis_centers, basis_width, x, basis_bias);
      sigma2_vec = Vector::Constant(x.cols(), sigma2);
    } else if (feature_kind == "identity") {
      phi = x;
      sigma2_vec = Vector::Constant(x.cols(), sigma2);
    } else {
      throw std::invalid_argument("FittedModel: unknown feature kind " + feature_kind);
    }
    if (sigma_mode == "constant") {
      sigma2_vec = Vector::Constant(x.cols(), sigma2);
    }
    return {std::move(phi), std::move(sigma2_vec)};
  }

  // Per-point posterior predictive in standardized target units.
  PointPredictive predict_point(const Vector& phi, double sigma2_star) const {
    PointPredictive pp;
    pp.mean = post_mean * phi;
    pp.col = sigma2_star + phi.dot(Sxx_inv * phi);
    if (kind == "t") {
      pp.row = H;
      pp.dof = pred_dof;
    } else {
      pp.row = V;
      pp.dof = 0.0;
    }
    return pp;
  }
};

inline json fitted_model_to_json(const FittedModel& fm) {
  json j;
  j["format_version"] = 1;
  j["kind"] = fm.kind;
  j["seed"] = fm.seed;
  j["n_train"] = fm.n_train;
  j["hyper"]["M"] = matrix_to_json(fm.M);
  j["hyper"]["K"] = matrix_to_json(fm.K);
  if (fm.kind == "t") {
    j["hyper"]["Psi"] = matrix_to_json(fm.Psi);
    j["hyper"]["nu"] = fm.nu;
    j["posterior"]["H"] = matrix_to_json(fm.H);
    j["posterior"]["dof"] = fm.pred_dof;
  } else {
    j["V"] = matrix_to_json(fm.V);
  }
  j["posterior"]["mean"] = matrix_to_json(fm.post_mean);
  j["posterior"]["col_cov"] = matrix_to_json(fm.Sxx_inv);
  j["features"]["kind"] = fm.feature_kind;
  if (fm.model) j["features"]["mlp"] = feature_model_to_json(*fm.model);
  if (fm.feature_kind == "gaussian_basis") {
    j["features"]["centers"] = vector_to_json(fm.basis_centers);
    j["features"]["width"] = fm.basis_width;
    j["features"]["bias"] = fm.basis_bias;
  }
  j["features"]["mirror_augment"] = fm.mirror_augment;
  j["sigma"]["mode"] = fm.sigma_mode;
  j["sigma"]["sigma2"] = fm.sigma2;
  if (fm.x_std) j["x_std"] = standardizer_to_json(*fm.x_std);
  if (fm.y_std) j["y_std"] = standardizer_to_json(*fm.y_std);
  j["x_names"] = fm.x_names;
  j["y_names"] = fm.y_names;
  return j;
}

inline FittedModel fitted_model_from_json(const json& j) {
  if (j.at("format_version").get<int>() != 1) {
    throw std::invalid_argument("fitted_model_from_json: unsupported version");
  }
  FittedModel fm;
  fm.kind = j.at("kind").get<std::string>();
  fm.seed = j.at("seed").get<std::uint64_t>();
  fm.n_train = j.at("n_train").get<long>();
  fm.M = matrix_from_json(j.at("hyper").at("M"));
  fm.K = matrix_from_json(j.at("hyper").at("K"));
  if (fm.kind == "t") {
    fm.Psi = matrix_from_json(j.at("hyper").at("Psi"));
    fm.nu = j.at("hyper").at("nu").get<double>();
    fm.H = matrix_from_json(j.at("posterior").at("H"));
    fm.pred_dof = j.at("posterior").at("dof").get<double>();
  } else {
    fm.V = matrix_from_json(j.at("V"));
  }
  fm.post_mean = matrix_from_json(j.at("posterior").at("mean"));
  fm.Sxx_inv = matrix_from_json(j.at("posterior").at("col_cov"));
  fm.feature_kind = j.at("features").at("kind").get<std::string>();
  if (j.at("features").contains("mlp")) {
    fm.model = feature_model_from_json(j.at("features").at("mlp"));
  }
  if (fm.feature_kind == "gaussian_basis") {
    fm.basis_centers = vector_from_json(j.at("features").at("centers"));
    fm.basis_width = j.at("features").at("width").get<double>();
    fm.basis_bias = j.at("features").at("bias").get<bool>();
  }
  fm.mirror_augment = j.at("features").at("mirror_augment").get<bool>();
  fm.sigma_mode = j.at("sigma").at("mode").get<std::string>();
  fm.sigma2 = j.at("sigma").at("sigma2").get<double>();
  if (j.contains("x_std")) fm.x_std = standardizer_from_json(j.at("x_std"));
  if (j.contains("y_std")) fm.y_std = standardizer_from_json(j.at("y_std"));
  fm.x_names = j.at("x_names").get<std::vector<std::string>>();
  fm.y_names = j.at("y_names").get<std::vector<std::string>>();
  return fm;
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_json_file: cannot open " + path);
  out << j.dump(2) << "\n";
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_json_file: cannot open " + path);
  return json::parse(in);
}

}  // namespace mbll
