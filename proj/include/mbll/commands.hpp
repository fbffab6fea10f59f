#pragma once

#include "mbll/em.hpp"
#include "mbll/metrics.hpp"
#include "mbll/model_io.hpp"
#include "mbll/vecform.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace mbll {

// Configuration problems exit with 2, numerical aborts with 3.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require_keys(const json& j, const std::string& ctx,
                         std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) {
      if (item.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError(ctx + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

}  // namespace detail

// ---- run configuration ----

struct DataConfig {
  std::string generator;  // "interp1d" | "linear_mvn" | ""
  int n = 500;
  int gen_p = 1, gen_dt = 2;
  std::string csv;
  std::string csv_beijing;
  std::vector<std::string> targets;
  std::array<double, 3> split = {0.72, 0.18, 0.10};
  bool sequential_split = false;
  int em_subsample = 0;  // 0 = off; EM stage runs on this many random points
};

struct FeatureConfig {
  std::string kind = "mlp";  // mlp | pretrained | gaussian_basis | identity
  std::vector<int> hidden = {64, 64, 64, 64};
  std::string activation = "softplus";
  bool include_bias_feature = true;
  bool separate_sigma = false;
  double sigma_floor = 1e-6;
  std::string weights;  // artifact path for kind == pretrained
  bool mirror_augment = false;
  int basis_count = 24;
  std::array<double, 2> basis_span = {-5.0, 5.0};
  double basis_width = 0.6;
};

struct PretrainConfig {
  bool enabled = false;
  SGDConfig sgd;
  double val_fraction = 0.2;
  int patience = 20;
};

struct EmRunConfig {
  EMConfig em;
  std::string init_m = "zero";  // zero | pretrained | ones
  double init_k = 1.0;
  double init_psi = 1.0;
  double nu = 0.0;  // 0 -> 2p + 3
  std::string lambda_kind = "identity";  // identity | scale_invariant
  double lambda_scale = 1.0;
  double kappa = 1.0;
};

struct RunConfig {
  int version = 1;
  std::string model_kind = "normal";  // normal | t
  std::uint64_t seed = 0;
  std::string out = "mbll_out";
  DataConfig data;
  std::optional<VarxSpec> varx;
  FeatureConfig features;
  PretrainConfig pretrain;
  EmRunConfig emrun;
  std::string v_mode = "identity";  // identity | empirical
};

inline SGDConfig parse_sgd(const json& j, const std::string& ctx) {
  detail::require_keys(j, ctx,
                       {"optimizer", "lr", "weight_decay", "grad_clip", "batch_size",
                        "epochs"});
  SGDConfig s;
  const std::string opt = detail::get_or<std::string>(j, "optimizer", "adamw");
  if (opt == "adamw") {
    s.optimizer = SGDConfig::Opt::adamw;
  } else if (opt == "sgd") {
    s.optimizer = SGDConfig::Opt::sgd;
  } else {
    throw ConfigError(ctx + ": unknown optimizer '" + opt + "'");
  }
  s.lr = detail::get_or<double>(j, "lr", 1e-3);
  s.weight_decay = detail::get_or<double>(j, "weight_decay", 0.0);
  s.grad_clip = detail::get_or<double>(j, "grad_clip", 1.0);
  s.batch_size = detail::get_or<int>(j, "batch_size", 32);
  s.epochs = detail::get_or<int>(j, "epochs", 5);
  if (s.lr <= 0 || s.batch_size <= 0 || s.epochs < 0) {
    throw ConfigError(ctx + ": lr, batch_size must be positive, epochs >= 0");
  }
  return s;
}

inline RunConfig parse_run_config(const json& j) {
  detail::require_keys(j, "config",
                       {"version", "model_kind", "seed", "out", "data", "varx",
                        "features", "pretrain", "em", "v"});
  RunConfig rc;
  rc.version = detail::get_or<int>(j, "version", 1);
  if (rc.version != 1) throw ConfigError("config: unsupported version");
  rc.model_kind = detail::get_or<std::string>(j, "model_kind", "normal");
  if (rc.model_kind != "normal" && rc.model_kind != "t") {
    throw ConfigError("config: model_kind must be 'normal' or 't'");
  }
  rc.seed = detail::get_or<std::uint64_t>(j, "seed", 0);
  rc.out = detail::get_or<std::string>(j, "out", "mbll_out");
  rc.v_mode = detail::get_or<std::string>(j, "v", "identity");
  if (rc.v_mode != "identity" && rc.v_mode != "empirical") {
    throw ConfigError("config: v must be 'identity' or 'empirical'");
  }

  if (!j.contains("data")) throw ConfigError("config: missing 'data'");
  const json& jd = j.at("data");
  detail::require_keys(jd, "data",
                       {"generator", "n", "p", "d_t", "csv", "csv_beijing", "targets",
                        "split", "sequential_split", "em_subsample"});
  rc.data.generator = detail::get_or<std::string>(jd, "generator", "");
  rc.data.n = detail::get_or<int>(jd, "n", 500);
  rc.data.gen_p = detail::get_or<int>(jd, "p", 1);
  rc.data.gen_dt = detail::get_or<int>(jd, "d_t", 2);
  rc.data.csv = detail::get_or<std::string>(jd, "csv", "");
  rc.data.csv_beijing = detail::get_or<std::string>(jd, "csv_beijing", "");
  if (jd.contains("targets")) {
    rc.data.targets = jd.at("targets").get<std::vector<std::string>>();
  }
  if (jd.contains("split")) {
    const auto v = jd.at("split").get<std::vector<double>>();
    if (v.size() != 3) throw ConfigError("data.split: expected three fractions");
    rc.data.split = {v[0], v[1], v[2]};
  }
  rc.data.sequential_split = detail::get_or<bool>(jd, "sequential_split", false);
  rc.data.em_subsample = detail::get_or<int>(jd, "em_subsample", 0);
  const int sources = (rc.data.generator.empty() ? 0 : 1) +
                      (rc.data.csv.empty() ? 0 : 1) +
                      (rc.data.csv_beijing.empty() ? 0 : 1);
  if (sources != 1) {
    throw ConfigError("data: exactly one of generator/csv/csv_beijing required");
  }

  if (j.contains("varx")) {
    detail::require_keys(j.at("varx"), "varx", {"P", "Q"});
    rc.varx = VarxSpec{detail::get_or<int>(j.at("varx"), "P", 1),
                       detail::get_or<int>(j.at("varx"), "Q", 2)};
  }

  if (j.contains("features")) {
    const json& jf = j.at("features");
    detail::require_keys(jf, "features",
                         {"kind", "hidden", "activation", "include_bias_feature",
                          "separate_sigma", "sigma_floor", "weights",
                          "mirror_augment", "centers", "span", "width"});
    rc.features.kind = detail::get_or<std::string>(jf, "kind", "mlp");
    if (jf.contains("hidden")) rc.features.hidden = jf.at("hidden").get<std::vector<int>>();
    rc.features.activation = detail::get_or<std::string>(jf, "activation", "softplus");
    rc.features.include_bias_feature =
        detail::get_or<bool>(jf, "include_bias_feature", true);
    rc.features.separate_sigma = detail::get_or<bool>(jf, "separate_sigma", false);
    rc.features.sigma_floor = detail::get_or<double>(jf, "sigma_floor", 1e-6);
    rc.features.weights = detail::get_or<std::string>(jf, "weights", "");
    rc.features.mirror_augment = detail::get_or<bool>(jf, "mirror_augment", false);
    rc.features.basis_count = detail::get_or<int>(jf, "centers", 24);
    if (jf.contains("span")) {
      const auto v = jf.at("span").get<std::vector<double>>();
      if (v.size() != 2) throw ConfigError("features.span: expected [lo, hi]");
      rc.features.basis_span = {v[0], v[1]};
    }
    rc.features.basis_width = detail::get_or<double>(jf, "width", 0.6);
    if (rc.features.kind != "mlp" && rc.features.kind != "pretrained" &&
        rc.features.kind != "gaussian_basis" && rc.features.kind != "identity") {
      throw ConfigError("features.kind: unknown kind '" + rc.features.kind + "'");
    }
    if (rc.features.kind == "pretrained" && rc.features.weights.empty()) {
      throw ConfigError("features: 'pretrained' requires 'weights'");
    }
  }

  if (j.contains("pretrain")) {
    const json& jp = j.at("pretrain");
    detail::require_keys(jp, "pretrain",
                         {"epochs", "batch_size", "lr", "weight_decay", "grad_clip",
                          "optimizer", "val_fraction", "patience"});
    rc.pretrain.enabled = true;
    json sgd_part = jp;
    sgd_part.erase("val_fraction");
    sgd_part.erase("patience");
    rc.pretrain.sgd = parse_sgd(sgd_part, "pretrain");
    if (!jp.contains("epochs")) rc.pretrain.sgd.epochs = 200;
    if (!jp.contains("weight_decay")) rc.pretrain.sgd.weight_decay = 0.01;
    rc.pretrain.val_fraction = detail::get_or<double>(jp, "val_fraction", 0.2);
    rc.pretrain.patience = detail::get_or<int>(jp, "patience", 20);
  }

  if (j.contains("em")) {
    const json& je = j.at("em");
    detail::require_keys(je, "em",
                         {"mode", "k_constraint", "psi_constraint", "sigma_mode",
                          "max_iter", "rel_tol", "hyperprior", "train_features",
                          "sgd", "init_m", "init_k", "init_psi", "nu"});
    const std::string mode = detail::get_or<std::string>(je, "mode", "fixed_M_hyperprior");
    auto parse_mode = [&](const std::string& s) {
      if (s == "fixed_M_hyperprior") return EMMode::fixed_M_hyperprior;
      if (s == "joint_hyperprior") return EMMode::joint_hyperprior;
      if (s == "fixed_M_only") return EMMode::fixed_M_only;
      if (s == "degenerate_joint") return EMMode::degenerate_joint;
      throw ConfigError("em.mode: unknown mode '" + s + "'");
    };
    rc.emrun.em.mode = parse_mode(mode);
    auto parse_constraint = [&](const std::string& s, const char* ctx) {
      if (s == "full") return Constraint::full;
      if (s == "diagonal") return Constraint::diagonal;
      if (s == "isotropic") return Constraint::isotropic;
      throw ConfigError(std::string(ctx) + ": unknown constraint '" + s + "'");
    };
    rc.emrun.em.k_constraint = parse_constraint(
        detail::get_or<std::string>(je, "k_constraint", "full"), "em.k_constraint");
    rc.emrun.em.psi_constraint = parse_constraint(
        detail::get_or<std::string>(je, "psi_constraint", "full"),
        "em.psi_constraint");
    const std::string smode = detail::get_or<std::string>(je, "sigma_mode", "head");
    if (smode == "head") {
      rc.emrun.em.sigma_mode = SigmaMode::head;
    } else if (smode == "constant") {
      rc.emrun.em.sigma_mode = SigmaMode::constant;
    } else {
      throw ConfigError("em.sigma_mode: unknown mode '" + smode + "'");
    }
    rc.emrun.em.max_iter = detail::get_or<int>(je, "max_iter", 200);
    rc.emrun.em.rel_tol = detail::get_or<double>(je, "rel_tol", 1e-3);
    rc.emrun.em.train_features = detail::get_or<bool>(je, "train_features", false);
    if (je.contains("sgd")) rc.emrun.em.sgd = parse_sgd(je.at("sgd"), "em.sgd");
    if (je.contains("hyperprior")) {
      const json& jh = je.at("hyperprior");
      detail::require_keys(jh, "em.hyperprior", {"lambda", "kappa", "scale"});
      rc.emrun.lambda_kind = detail::get_or<std::string>(jh, "lambda", "identity");
      if (rc.emrun.lambda_kind != "identity" &&
          rc.emrun.lambda_kind != "scale_invariant") {
        throw ConfigError("em.hyperprior.lambda: unknown kind");
      }
      rc.emrun.kappa = detail::get_or<double>(jh, "kappa", 1.0);
      rc.emrun.lambda_scale = detail::get_or<double>(jh, "scale", 1.0);
    }
    rc.emrun.init_m = detail::get_or<std::string>(je, "init_m", "zero");
    if (rc.emrun.init_m != "zero" && rc.emrun.init_m != "pretrained" &&
        rc.emrun.init_m != "ones") {
      throw ConfigError("em.init_m: must be zero, pretrained or ones");
    }
    rc.emrun.init_k = detail::get_or<double>(je, "init_k", 1.0);
    rc.emrun.init_psi = detail::get_or<double>(je, "init_psi", 1.0);
    rc.emrun.nu = detail::get_or<double>(je, "nu", 0.0);
  }
  return rc;
}

// ---- pipeline ----

struct FitBundle {
  FittedModel model;
  EMResult em;
  Dataset train, val, test;
  bool has_test = false;
  double pretrain_val_loss = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline Matrix empirical_cov(const Matrix& y) {
  const Vector mu = y.rowwise().mean();
  const Matrix c = y.colwise() - mu;
  Matrix v = (c * c.transpose()) / std::max<double>(1.0, static_cast<double>(y.cols()));
  v.diagonal().array() += 1e-6;
  return symmetrize(v);
}

inline std::string sigma_mode_name(SigmaMode m) {
  switch (m) {
    case SigmaMode::head: return "head";
    case SigmaMode::constant: return "constant";
    case SigmaMode::fixed: return "fixed";
  }
  return "head";
}

}  // namespace detail

inline FitBundle fit_pipeline_with_data(const RunConfig& rc, Dataset train,
                                        Dataset val, Dataset test, bool has_test) {
  FitBundle out;
  out.train = std::move(train);
  out.val = std::move(val);
  out.test = std::move(test);
  out.has_test = has_test;
  const Eigen::Index p = out.train.Y.rows();
  const Eigen::Index dx = out.train.X.rows();

  // 2. Baseline noise covariance.
  const Matrix v = rc.v_mode == "empirical" ? detail::empirical_cov(out.train.Y)
                                            : Matrix(Matrix::Identity(p, p));

  // 3. Features.
  Rng rng(rc.seed);
  std::optional<FeatureModel> model;
  std::optional<Matrix> phi_fixed;
  Vector basis_centers;
  std::string feature_kind = rc.features.kind;
  Matrix pretrained_last;  // mean-head weights when a PDN phase ran
  const Activation act = rc.features.activation == "softplus"
                             ? Activation::softplus
                             : Activation::leaky_relu;
  if (rc.features.kind == "mlp") {
    model = make_mlp(static_cast<int>(dx), rc.features.hidden, act,
                     rc.features.include_bias_feature, rc.features.separate_sigma,
                     rc.features.sigma_floor, rng);
    feature_kind = "mlp";
  } else if (rc.features.kind == "pretrained") {
    const FittedModel base = fitted_model_from_json(read_json_file(rc.features.weights));
    if (!base.model) {
      throw ConfigError("features: artifact has no MLP weights: " + rc.features.weights);
    }
    model = base.model;
    feature_kind = "mlp";
  } else if (rc.features.kind == "gaussian_basis") {
    basis_centers.resize(rc.features.basis_count);
    for (int i = 0; i < rc.features.basis_count; ++i) {
      basis_centers(i) =
          rc.features.basis_span[0] +
          (rc.features.basis_span[1] - rc.features.basis_span[0]) *
              (rc.features.basis_count == 1
                   ? 0.5
                   : static_cast<double>(i) / (rc.features.basis_count - 1));
    }
  }

  // 4. Optional density-network pretraining (phase 1 of the transfer pipeline).
  if (rc.pretrain.enabled) {
    if (!model) throw ConfigError("pretrain: requires MLP features");
    const Matrix v0 = detail::empirical_cov(out.train.Y);
    DensityNet net{*model, Matrix::Zero(p, model->phi_dim())};
    SGDConfig psgd = rc.pretrain.sgd;
    psgd.seed = rc.seed + 17;
    const PretrainResult pres =
        pretrain_pdn(net, out.train.X, out.train.Y, out.val.X, out.val.Y, psgd, v0,
                     rc.pretrain.patience);
    model = pres.net.features;
    pretrained_last = pres.net.A_mu;
    out.pretrain_val_loss = pres.best_val_loss;
  }

  // Thin the EM training block after pretraining, when asked to.
  if (rc.data.em_subsample > 0 && out.train.n() > rc.data.em_subsample) {
    auto [sub, rest] = split_two(
        out.train, static_cast<double>(rc.data.em_subsample) / out.train.n(),
        rc.seed + 3);
    (void)rest;
    out.train = std::move(sub);
  }
  if (rc.features.kind == "gaussian_basis") {
    phi_fixed = gaussian_basis(basis_centers, rc.features.basis_width, out.train.X,
                               rc.features.include_bias_feature);
  } else if (rc.features.kind == "identity") {
    phi_fixed = out.train.X;
  }

  // 5. Initial EM state.
  EMState state;
  const Eigen::Index dt =
      model ? static_cast<Eigen::Index>(model->phi_dim()) *
                  (rc.features.mirror_augment ? 2 : 1)
            : phi_fixed->rows();
  if (rc.emrun.init_m == "pretrained") {
    if (pretrained_last.size() == 0) {
      throw ConfigError("em.init_m: 'pretrained' requires a pretraining phase");
    }
    if (rc.features.mirror_augment) {
      state.M = Matrix::Zero(p, dt);
      state.M.leftCols(pretrained_last.cols()) = pretrained_last;
    } else {
      state.M = pretrained_last;
    }
  } else if (rc.emrun.init_m == "ones") {
    state.M = Matrix::Ones(p, dt);
  } else {
    state.M = Matrix::Zero(p, dt);
  }
  state.K = rc.emrun.init_k * Matrix::Identity(dt, dt);
  state.model = model;
  const ModelKind kind = rc.model_kind == "t" ? ModelKind::t : ModelKind::normal;
  if (kind == ModelKind::t) {
    state.nu = rc.emrun.nu > 0 ? rc.emrun.nu : default_t_dof(p);
    state.Psi = rc.emrun.init_psi * Matrix::Identity(p, p);
  }

  EMConfig em = rc.emrun.em;
  em.seed = rc.seed + 23;
  em.sgd.seed = rc.seed + 29;

  EMProblem prob;
  prob.X = out.train.X;
  prob.Y = out.train.Y;
  prob.V = v;
  prob.phi_fixed = phi_fixed;
  prob.mirror_augment = rc.features.mirror_augment;

  // Initial constant noise scale: pretrained head when available, else the
  // mean target variance.
  if (em.sigma_mode == SigmaMode::constant) {
    if (model && rc.pretrain.enabled) {
      auto [phi0, s20] = eval_features(*model, out.train.X, false);
      state.sigma2 = s20.mean();
    } else {
      const Vector mu = out.train.Y.rowwise().mean();
      state.sigma2 =
          (out.train.Y.colwise() - mu).squaredNorm() /
          static_cast<double>(out.train.Y.cols() * out.train.Y.rows());
    }
  } else if (em.sigma_mode == SigmaMode::head && !model) {
    // fixed bases have no sigma head; fall back to the constant scale
    em.sigma_mode = SigmaMode::constant;
    const Vector mu = out.train.Y.rowwise().mean();
    state.sigma2 = (out.train.Y.colwise() - mu).squaredNorm() /
                   static_cast<double>(out.train.Y.cols() * out.train.Y.rows());
  }

  // 6. Hyperprior location.
  if (detail::uses_hyperprior(em.mode)) {
    HyperPrior hp;
    hp.kappa = rc.emrun.kappa;
    if (rc.emrun.lambda_kind == "scale_invariant") {
      const detail::FeatureEval fe = detail::em_features(prob, state, em);
      const Matrix b = fe.phi * fe.d_diag.cwiseInverse().asDiagonal() * fe.phi.transpose();
      Chol cb(Matrix(1e-3 * Matrix::Identity(dt, dt) + b), "hyperprior.Lambda");
      hp.Lambda = symmetrize(cb.inverse()) * rc.emrun.lambda_scale;
    } else {
      hp.Lambda = rc.emrun.lambda_scale * Matrix::Identity(dt, dt);
    }
    em.hyperprior = hp;
  }

  // 7. Run.
  out.em = run_em(prob, state, em, kind);

  // 8. Artifact.
  const EMState& fin = out.em.state;
  FittedModel fm;
  fm.kind = rc.model_kind;
  fm.M = fin.M;
  fm.K = fin.K;
  fm.V = v;
  fm.seed = rc.seed;
  fm.n_train = static_cast<long>(out.train.n());
  fm.feature_kind = feature_kind;
  fm.model = fin.model;
  fm.basis_centers = basis_centers;
  fm.basis_width = rc.features.basis_width;
  fm.basis_bias = rc.features.include_bias_feature;
  fm.mirror_augment = rc.features.mirror_augment;
  fm.sigma_mode = detail::sigma_mode_name(em.sigma_mode);
  fm.sigma2 = fin.sigma2;
  fm.x_std = out.train.x_std;
  fm.y_std = out.train.y_std;
  fm.x_names = out.train.x_names;
  fm.y_names = out.train.y_names;
  const detail::FeatureEval fe = detail::em_features(prob, fin, em);
  const Design train_design{fe.phi, out.train.Y, fe.d_diag};
  if (kind == ModelKind::normal) {
    const SuffStats s = suffstats(train_design, NormalHyper{fin.M, fin.K});
    fm.post_mean = s.post_mean;
    fm.Sxx_inv = s.Sxx_inv;
  } else {
    fm.Psi = fin.Psi;
    fm.nu = fin.nu;
    const TSuffStats s = t_suffstats(train_design, THyper{fin.M, fin.K, fin.Psi, fin.nu});
    fm.post_mean = s.base.post_mean;
    fm.Sxx_inv = s.base.Sxx_inv;
    fm.H = s.H;
    fm.pred_dof = fin.nu + static_cast<double>(out.train.n()) -
                  2.0 * static_cast<double>(p);
  }
  out.model = std::move(fm);
  return out;
}

inline FitBundle fit_pipeline(const RunConfig& rc) {
  Dataset train, val, test;
  bool has_test = false;
  if (rc.data.generator == "interp1d") {
    const Dataset full = gen_interp1d(rc.data.n, rc.seed);
    auto [tr, va] = split_two(full, 0.8, rc.seed + 1);
    train = std::move(tr);
    val = std::move(va);
  } else if (rc.data.generator == "linear_mvn") {
    const int p = rc.data.gen_p, dt = rc.data.gen_dt;
    const Dataset full = gen_linear_mvn(p, dt, rc.data.n, Matrix::Zero(p, dt),
                                        Matrix::Identity(dt, dt),
                                        Matrix::Identity(p, p), false, rc.seed);
    auto [tr, va] = split_two(full, 0.8, rc.seed + 1);
    train = std::move(tr);
    val = std::move(va);
  } else if (!rc.data.csv.empty()) {
    if (rc.data.targets.empty()) throw ConfigError("data: csv requires 'targets'");
    Dataset full = dataset_from_table(read_csv(rc.data.csv), rc.data.targets);
    if (rc.varx) full = varx_embed(full.X, full.Y, *rc.varx);
    SplitDatasets s = rc.data.sequential_split
                          ? split_sequential_standardize(full, rc.data.split)
                          : split_standardize(full, rc.data.split, rc.seed);
    train = std::move(s.train);
    val = std::move(s.val);
    test = std::move(s.test);
    has_test = true;
  } else {
    Dataset raw = load_beijing_csv(rc.data.csv_beijing);
    const VarxSpec spec = rc.varx.value_or(VarxSpec{1, 2});
    Dataset full = varx_embed(raw.X, raw.Y, spec);
    SplitDatasets s = split_sequential_standardize(full, rc.data.split);
    train = std::move(s.train);
    val = std::move(s.val);
    test = std::move(s.test);
    has_test = true;
  }
  return fit_pipeline_with_data(rc, std::move(train), std::move(val), std::move(test),
                                has_test);
}

// ---- evaluation helpers ----

// NLEV: per-sample negative log evidence of the fitted hyperparameters on a
// raw dataset; reported in original target units.
inline double model_nlev(const FittedModel& fm, const Dataset& raw) {
  auto [phi, s2] = fm.features(raw.X);
  const Matrix y = fm.y_std ? fm.y_std->apply(raw.Y) : raw.Y;
  const Design d{phi, y, s2};
  double logev;
  if (fm.kind == "t") {
    logev = t_log_evidence(d, THyper{fm.M, fm.K, fm.Psi, fm.nu});
  } else {
    logev = log_evidence(DesignBlock{d, fm.V}, NormalHyper{fm.M, fm.K});
  }
  double jac = 0.0;
  if (fm.y_std) jac = fm.y_std->scale.array().log().sum();
  return -logev / static_cast<double>(raw.n()) + jac;
}

inline EvalReport evaluate_model(const FittedModel& fm, const Dataset& raw_test) {
  auto [phi, s2] = fm.features(raw_test.X);
  const Matrix y_std_units = fm.y_std ? fm.y_std->apply(raw_test.Y) : raw_test.Y;
  std::vector<PointPredictive> preds;
  preds.reserve(raw_test.n());
  Matrix means_std(fm.p(), raw_test.n());
  for (Eigen::Index i = 0; i < raw_test.n(); ++i) {
    PointPredictive pp = fm.predict_point(phi.col(i), s2(i));
    means_std.col(i) = pp.mean;
    preds.push_back(std::move(pp));
  }
  EvalReport rep;
  const Matrix means_raw = fm.y_std ? fm.y_std->invert(means_std) : means_std;
  rep.rmse = rmse(means_raw, raw_test.Y);
  rep.rmse_per_output = rmse_per_output(means_raw, raw_test.Y);
  const double jac = fm.y_std ? fm.y_std->scale.array().log().sum() : 0.0;
  rep.nll = nll(preds, y_std_units) + jac;
  rep.nlev = model_nlev(fm, raw_test);
  auto [e, curve] = ece(preds, y_std_units);
  rep.ece = e;
  rep.curve = std::move(curve);
  return rep;
}

// ---- file emission ----

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::filesystem::create_directories(dir);
}

inline std::string fp(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_trace_csv(const std::string& path, const EMTrace& trace) {
  std::ofstream out(path);
  out << "iter,log_evidence,log_map,trace_k,m_rel_err,neg_q1,sigma2_mean,wall_ms\n";
  for (const auto& r : trace.rows) {
    out << r.iter << ',' << fp(r.log_evidence) << ',' << fp(r.log_map) << ','
        << fp(r.trace_k) << ',' << fp(r.m_rel_err) << ',' << fp(r.neg_q1) << ','
        << fp(r.sigma2_mean) << ',' << fp(r.wall_ms) << "\n";
  }
}

inline void write_calibration_csv(const std::string& path,
                                  const std::vector<CalibrationPoint>& curve) {
  std::ofstream out(path);
  out << "nominal,empirical\n";
  for (const auto& c : curve) out << fp(c.nominal) << ',' << fp(c.empirical) << "\n";
}

inline json report_to_json(const EvalReport& rep) {
  json j;
  j["rmse"] = rep.rmse;
  j["nll"] = rep.nll;
  j["nlev"] = rep.nlev;
  j["ece"] = rep.ece;
  j["rmse_per_output"] = vector_to_json(rep.rmse_per_output);
  json curve = json::array();
  for (const auto& c : rep.curve) {
    curve.push_back(json{{"nominal", c.nominal}, {"empirical", c.empirical}});
  }
  j["calibration"] = std::move(curve);
  return j;
}

// Minimal SVG line plot; the CSV files are the primary artifact.
struct SvgSeries {
  std::vector<double> x, y;
  std::string color = "#1f77b4";
};

inline void write_svg_lines(const std::string& path,
                            const std::vector<SvgSeries>& series,
                            const std::string& title) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    for (double v : s.x) {
      xmin = std::min(xmin, v);
      xmax = std::max(xmax, v);
    }
    for (double v : s.y) {
      if (std::isfinite(v)) {
        ymin = std::min(ymin, v);
        ymax = std::max(ymax, v);
      }
    }
  }
  if (!(xmax > xmin)) xmax = xmin + 1;
  if (!(ymax > ymin)) ymax = ymin + 1;
  const double w = 800, h = 400, pad = 40;
  auto sx = [&](double v) { return pad + (v - xmin) / (xmax - xmin) * (w - 2 * pad); };
  auto sy = [&](double v) { return h - pad - (v - ymin) / (ymax - ymin) * (h - 2 * pad); };
  std::ofstream out(path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h
      << "' viewBox='0 0 " << w << ' ' << h << "'>\n";
  out << "<rect x='0' y='0' width='" << w << "' height='" << h
      << "' fill='white' stroke='#888'/>\n";
  out << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='14'>"
      << title << "</text>\n";
  for (const auto& s : series) {
    out << "<polyline fill='none' stroke='" << s.color << "' stroke-width='1.5' points='";
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      out << sx(s.x[i]) << ',' << sy(s.y[i]) << ' ';
    }
    out << "'/>\n";
  }
  out << "</svg>\n";
}

}  // namespace detail

// ---- commands ----

inline int cmd_fit(const RunConfig& rc) {
  detail::ensure_dir(rc.out);
  const FitBundle bundle = fit_pipeline(rc);
  write_json_file(rc.out + "/model.json", fitted_model_to_json(bundle.model));
  detail::write_trace_csv(rc.out + "/trace.csv", bundle.em.trace);
  json summary;
  summary["converged"] = bundle.em.converged;
  summary["iterations"] = bundle.em.iterations;
  summary["final_log_evidence"] =
      bundle.em.trace.rows.empty() ? 0.0 : bundle.em.trace.rows.back().log_evidence;
  summary["train_nlev"] = model_nlev(bundle.model, [&] {
    Dataset raw = bundle.train;
    if (bundle.train.x_std) raw.X = bundle.train.x_std->invert(bundle.train.X);
    if (bundle.train.y_std) raw.Y = bundle.train.y_std->invert(bundle.train.Y);
    return raw;
  }());
  double wall = 0;
  for (const auto& r : bundle.em.trace.rows) wall += r.wall_ms;
  summary["wall_ms_total"] = wall;
  if (!std::isnan(bundle.pretrain_val_loss)) {
    summary["pretrain_val_loss"] = bundle.pretrain_val_loss;
  }
  write_json_file(rc.out + "/summary.json", summary);
  return 0;
}

// Prediction CSV: per-point mean per output plus the trace scalars of the
// decomposed predictive covariance, in original target units.
inline int cmd_predict(const std::string& model_path, const std::string& data_csv,
                       const std::string& out_csv) {
  const FittedModel fm = fitted_model_from_json(read_json_file(model_path));
  const CsvTable t = read_csv(data_csv);
  // Columns: by name when the artifact's inputs are all present, else by
  // position when the width matches.
  std::vector<size_t> idx;
  bool by_name = true;
  for (const auto& name : fm.x_names) {
    const auto it = std::find(t.header.begin(), t.header.end(), name);
    if (it == t.header.end()) {
      by_name = false;
      break;
    }
    idx.push_back(static_cast<size_t>(it - t.header.begin()));
  }
  if (!by_name) {
    if (static_cast<Eigen::Index>(t.header.size()) <
        static_cast<Eigen::Index>(fm.x_names.size())) {
      throw ConfigError("predict: input columns do not match the model");
    }
    idx.clear();
    for (size_t i = 0; i < fm.x_names.size(); ++i) idx.push_back(i);
  }
  std::ofstream out(out_csv);
  if (!out) throw NumericError("predict: cannot open output " + out_csv);
  out << "";
  std::string header;
  for (const auto& n : fm.y_names) header += "mean_" + n + ",";
  header += "aleatoric,epistemic,total";
  if (fm.kind == "t") header += ",dof";
  out << header << "\n";
  if (t.rows.empty()) return 0;
  Matrix x(fm.x_names.size(), t.rows.size());
  for (size_t r = 0; r < t.rows.size(); ++r) {
    for (size_t i = 0; i < idx.size(); ++i) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)) = t.rows[r][idx[i]];
    }
  }
  auto [phi, s2] = fm.features(x);
  // Per-output variance weights for the original-units trace.
  Vector w(fm.p());
  for (Eigen::Index j = 0; j < fm.p(); ++j) {
    const double s = fm.y_std ? fm.y_std->scale(j) : 1.0;
    w(j) = s * s;
  }
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    const PointPredictive pp = fm.predict_point(phi.col(i), s2(i));
    const Vector mean_raw =
        fm.y_std ? Vector(fm.y_std->invert(Matrix(pp.mean)).col(0)) : pp.mean;
    double alea, epi;
    const double quad = pp.col - s2(i);  // phi^T Sxx^-1 phi
    if (fm.kind == "t") {
      const double denom = pp.dof - 2.0;
      const double base = denom > 0 ? (pp.row.diagonal().array() * w.array()).sum() / denom
                                    : std::numeric_limits<double>::quiet_NaN();
      alea = s2(i) * base;
      epi = quad * base;
    } else {
      const double base = (pp.row.diagonal().array() * w.array()).sum();
      alea = s2(i) * base;
      epi = quad * base;
    }
    for (Eigen::Index j = 0; j < fm.p(); ++j) out << detail::fp(mean_raw(j)) << ',';
    out << detail::fp(alea) << ',' << detail::fp(epi) << ',' << detail::fp(alea + epi);
    if (fm.kind == "t") out << ',' << detail::fp(pp.dof);
    out << "\n";
  }
  return 0;
}

inline int cmd_eval(const std::string& model_path, const std::string& data_csv,
                    const std::string& out_dir) {
  const FittedModel fm = fitted_model_from_json(read_json_file(model_path));
  const CsvTable t = read_csv(data_csv);
  std::vector<std::string> targets;
  for (const auto& n : fm.y_names) targets.push_back(n);
  const Dataset test = dataset_from_table(t, targets);
  const EvalReport rep = evaluate_model(fm, test);
  detail::ensure_dir(out_dir);
  write_json_file(out_dir + "/report.json", detail::report_to_json(rep));
  detail::write_calibration_csv(out_dir + "/calibration.csv", rep.curve);
  return 0;
}

// Refit-and-evaluate over a batch of seeds; per-seed rows plus mean and
// standard deviation per metric, the paper's reporting shape.
inline int cmd_eval_seeds(const RunConfig& rc, int n_seeds, int jobs) {
  if (n_seeds < 1) throw ConfigError("eval: seeds must be >= 1");
  std::vector<EvalReport> reports(n_seeds);
  std::vector<std::string> errors(n_seeds);
  std::atomic<int> next{0};
  const int workers = std::max(1, std::min(jobs, n_seeds));
  auto work = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n_seeds) return;
      try {
        RunConfig rci = rc;
        rci.seed = rc.seed + static_cast<std::uint64_t>(i);
        const FitBundle bundle = fit_pipeline(rci);
        if (!bundle.has_test) {
          throw ConfigError("eval --seeds: config has no test split");
        }
        Dataset raw = bundle.test;
        if (raw.x_std) raw.X = raw.x_std->invert(raw.X);
        if (raw.y_std) raw.Y = raw.y_std->invert(raw.Y);
        reports[i] = evaluate_model(bundle.model, raw);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int i = 0; i < workers; ++i) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  for (int i = 0; i < n_seeds; ++i) {
    if (!errors[i].empty()) throw NumericError("eval seed " + std::to_string(i) + ": " + errors[i]);
  }
  auto stats = [&](auto getter) {
    double mean = 0;
    for (const auto& r : reports) mean += getter(r);
    mean /= n_seeds;
    double var = 0;
    for (const auto& r : reports) var += (getter(r) - mean) * (getter(r) - mean);
    var = n_seeds > 1 ? var / (n_seeds - 1) : 0.0;
    return std::pair<double, double>{mean, std::sqrt(var)};
  };
  json j;
  j["seeds"] = n_seeds;
  auto put = [&](const char* name, auto getter) {
    auto [m, s] = stats(getter);
    j[name]["mean"] = m;
    j[name]["std"] = s;
  };
  put("rmse", [](const EvalReport& r) { return r.rmse; });
  put("nll", [](const EvalReport& r) { return r.nll; });
  put("nlev", [](const EvalReport& r) { return r.nlev; });
  put("ece", [](const EvalReport& r) { return r.ece; });
  json rows = json::array();
  for (const auto& r : reports) {
    rows.push_back(json{{"rmse", r.rmse}, {"nll", r.nll}, {"nlev", r.nlev}, {"ece", r.ece}});
  }
  j["per_seed"] = std::move(rows);
  detail::ensure_dir(rc.out);
  write_json_file(rc.out + "/metrics.json", j);
  return 0;
}

}  // namespace mbll
