#pragma once

#include "mbll/commands.hpp"

namespace mbll {

namespace detail {

// Dense prediction grid emission shared by the interpolation demos: band CSV
// (mean with 1/2/3-sigma total bands), uncertainty profile CSV, and a small
// SVG rendering.
inline void emit_interp_figures(const FittedModel& fm, const Dataset& train,
                                const std::string& out_dir) {
  const int grid_n = 400;
  Matrix grid(1, grid_n);
  for (int i = 0; i < grid_n; ++i) {
    grid(0, i) = -8.0 + 16.0 * static_cast<double>(i) / (grid_n - 1);
  }
  auto [phi, s2] = fm.features(grid);
  std::ofstream band(out_dir + "/band.csv");
  band << "x,mean,lo1,hi1,lo2,hi2,lo3,hi3\n";
  std::ofstream prof(out_dir + "/uncertainty.csv");
  prof << "x,aleatoric,epistemic,total\n";
  std::vector<double> gx(grid_n), gmean(grid_n), glo(grid_n), ghi(grid_n);
  for (int i = 0; i < grid_n; ++i) {
    const PointPredictive pp = fm.predict_point(phi.col(i), s2(i));
    double alea, epi;
    if (fm.kind == "t") {
      const double denom = pp.dof - 2.0;
      alea = s2(i) * pp.row.trace() / denom;
      epi = (pp.col - s2(i)) * pp.row.trace() / denom;
    } else {
      alea = s2(i) * pp.row.trace();
      epi = (pp.col - s2(i)) * pp.row.trace();
    }
    const double sd = std::sqrt(alea + epi);
    const double m = pp.mean(0);
    band << fp(grid(0, i)) << ',' << fp(m);
    for (int k = 1; k <= 3; ++k) band << ',' << fp(m - k * sd) << ',' << fp(m + k * sd);
    band << "\n";
    prof << fp(grid(0, i)) << ',' << fp(alea) << ',' << fp(epi) << ',' << fp(alea + epi)
         << "\n";
    gx[i] = grid(0, i);
    gmean[i] = m;
    glo[i] = m - 2 * sd;
    ghi[i] = m + 2 * sd;
  }
  std::vector<SvgSeries> series;
  series.push_back({gx, gmean, "#1f77b4"});
  series.push_back({gx, glo, "#aec7e8"});
  series.push_back({gx, ghi, "#aec7e8"});
  SvgSeries pts;
  for (Eigen::Index i = 0; i < train.n(); ++i) {
    pts.x.push_back(train.X(0, i));
    pts.y.push_back(train.Y(0, i));
  }
  pts.color = "#d62728";
  series.push_back(pts);
  write_svg_lines(out_dir + "/band.svg", series, "posterior predictive");
}

}  // namespace detail

// 1-D heteroscedastic interpolation learned end to end: MLP features and
// noise head, M = 0 held fixed, isotropic K.
inline RunConfig demo_interp_config(std::uint64_t seed, const std::string& out) {
  RunConfig rc;
  rc.model_kind = "normal";
  rc.seed = seed;
  rc.out = out;
  rc.data.generator = "interp1d";
  rc.data.n = 500;
  rc.features.kind = "mlp";
  rc.features.hidden = {64, 64, 64, 64};
  rc.features.activation = "softplus";
  rc.emrun.em.mode = EMMode::fixed_M_only;
  rc.emrun.em.k_constraint = Constraint::isotropic;
  rc.emrun.em.sigma_mode = SigmaMode::head;
  rc.emrun.em.train_features = true;
  rc.emrun.em.max_iter = 60;
  rc.emrun.em.rel_tol = 1e-3;
  rc.emrun.em.sgd.epochs = 5;
  rc.emrun.em.sgd.lr = 2e-3;
  rc.emrun.em.sgd.batch_size = 50;
  rc.emrun.em.sgd.grad_clip = 1.0;
  return rc;
}

inline int cmd_demo_interp(std::uint64_t seed, const std::string& out) {
  const RunConfig rc = demo_interp_config(seed, out);
  detail::ensure_dir(out);
  const FitBundle bundle = fit_pipeline(rc);
  write_json_file(out + "/model.json", fitted_model_to_json(bundle.model));
  detail::write_trace_csv(out + "/trace.csv", bundle.em.trace);
  detail::emit_interp_figures(bundle.model, bundle.train, out);
  return 0;
}

// Two-phase transfer pipeline on the same task: pretrain a density network,
// freeze its features (mirror-augmented), then adapt the last layer under the
// scale-invariant Inverse-Wishart hyperprior.
inline RunConfig demo_transfer_config(std::uint64_t seed, const std::string& out) {
  RunConfig rc = demo_interp_config(seed, out);
  rc.pretrain.enabled = true;
  rc.pretrain.sgd.epochs = 400;
  rc.pretrain.sgd.lr = 2e-3;
  rc.pretrain.sgd.weight_decay = 0.01;
  rc.pretrain.sgd.grad_clip = 1.0;
  rc.pretrain.sgd.batch_size = 50;
  rc.pretrain.patience = 40;
  rc.features.mirror_augment = true;
  rc.emrun.em.mode = EMMode::joint_hyperprior;
  rc.emrun.em.k_constraint = Constraint::diagonal;
  rc.emrun.em.train_features = false;
  rc.emrun.em.max_iter = 200;
  rc.emrun.lambda_kind = "scale_invariant";
  rc.emrun.kappa = 1.0;
  rc.emrun.init_m = "zero";
  return rc;
}

inline int cmd_demo_transfer(std::uint64_t seed, const std::string& out) {
  const RunConfig rc = demo_transfer_config(seed, out);
  detail::ensure_dir(out);
  const FitBundle bundle = fit_pipeline(rc);
  write_json_file(out + "/model.json", fitted_model_to_json(bundle.model));
  detail::write_trace_csv(out + "/trace.csv", bundle.em.trace);
  detail::emit_interp_figures(bundle.model, bundle.train, out);
  return 0;
}

// Degenerate-versus-regularized joint EM on simulated linear data: the
// unregularized joint scheme collapses trace(K) at the 1/n rate while the
// hyperprior keeps it bounded away from zero.
inline int cmd_demo_degenerate(std::uint64_t seed, const std::string& out) {
  detail::ensure_dir(out);
  const int p = 2, dt = 3, n = 200;
  Rng rng(seed);
  Matrix m_true(p, dt);
  for (Eigen::Index j = 0; j < m_true.cols(); ++j) {
    for (Eigen::Index i = 0; i < m_true.rows(); ++i) m_true(i, j) = rng.normal();
  }
  const Dataset ds = gen_linear_mvn(p, dt, n, m_true, Matrix::Identity(dt, dt),
                                    Matrix::Identity(p, p), false, seed + 1);
  EMProblem prob;
  prob.X = ds.X;
  prob.Y = ds.Y;
  prob.V = Matrix::Identity(p, p);
  prob.phi_fixed = ds.X;
  prob.d_fixed = Vector::Ones(n);

  auto run_mode = [&](EMMode mode, int iters) {
    EMConfig cfg;
    cfg.mode = mode;
    cfg.sigma_mode = SigmaMode::fixed;
    cfg.max_iter = iters;
    cfg.rel_tol = 1e-14;  // run the full horizon, the trace is the point
    if (mode == EMMode::joint_hyperprior) {
      cfg.hyperprior = HyperPrior{Matrix::Identity(dt, dt), 1.0};
    }
    EMState st;
    st.M = Matrix::Zero(p, dt) + Matrix::Constant(p, dt, 0.5);
    st.K = Matrix::Identity(dt, dt);
    return run_em(prob, st, cfg, ModelKind::normal);
  };
  const EMResult deg = run_mode(EMMode::degenerate_joint, 200);
  const EMResult reg = run_mode(EMMode::joint_hyperprior, 200);
  detail::write_trace_csv(out + "/degenerate_trace.csv", deg.trace);
  detail::write_trace_csv(out + "/hyperprior_trace.csv", reg.trace);

  std::vector<detail::SvgSeries> series(2);
  for (const auto& r : deg.trace.rows) {
    series[0].x.push_back(r.iter);
    series[0].y.push_back(r.trace_k);
  }
  series[0].color = "#d62728";
  for (const auto& r : reg.trace.rows) {
    series[1].x.push_back(r.iter);
    series[1].y.push_back(r.trace_k);
  }
  series[1].color = "#2ca02c";
  detail::write_svg_lines(out + "/trace_k.svg", series,
                          "trace(K): unregularized vs hyperprior");
  json summary;
  summary["final_trace_k_degenerate"] = deg.trace.rows.back().trace_k;
  summary["final_trace_k_hyperprior"] = reg.trace.rows.back().trace_k;
  summary["final_m_rel_err_degenerate"] = deg.trace.rows.back().m_rel_err;
  write_json_file(out + "/summary.json", summary);
  return 0;
}

// Beijing air-quality VARX forecasting with the matrix-T model and the
// two-phase pipeline; needs the published multi-site CSV.
inline int cmd_demo_varx(const std::string& data_csv, std::uint64_t seed,
                         const std::string& out) {
  if (data_csv.empty()) throw ConfigError("demo varx_beijing: --data CSV required");
  RunConfig rc;
  rc.model_kind = "t";
  rc.seed = seed;
  rc.out = out;
  rc.data.csv_beijing = data_csv;
  rc.data.split = {0.75, 0.125, 0.125};
  rc.varx = VarxSpec{1, 2};
  rc.features.kind = "mlp";
  rc.features.hidden = {128, 128, 128, 128};
  rc.features.activation = "softplus";
  rc.pretrain.enabled = true;
  rc.pretrain.sgd.epochs = 60;
  rc.pretrain.sgd.lr = 1e-3;
  rc.pretrain.sgd.weight_decay = 0.01;
  rc.pretrain.sgd.grad_clip = 1.0;
  rc.pretrain.sgd.batch_size = 128;
  rc.pretrain.patience = 10;
  rc.emrun.em.mode = EMMode::fixed_M_only;
  rc.emrun.em.k_constraint = Constraint::isotropic;
  rc.emrun.em.psi_constraint = Constraint::isotropic;
  rc.emrun.em.sigma_mode = SigmaMode::head;
  rc.emrun.em.train_features = false;
  rc.emrun.em.max_iter = 200;
  rc.emrun.em.rel_tol = 1e-4;
  rc.emrun.init_m = "ones";
  detail::ensure_dir(out);

  rc.data.em_subsample = 1000;
  const FitBundle bundle = fit_pipeline(rc);

  write_json_file(out + "/model.json", fitted_model_to_json(bundle.model));
  detail::write_trace_csv(out + "/trace.csv", bundle.em.trace);

  // Test-window forecast with uncertainty profiles.
  const FittedModel& fm = bundle.model;
  Dataset test_raw = bundle.test;
  if (test_raw.x_std) test_raw.X = test_raw.x_std->invert(test_raw.X);
  if (test_raw.y_std) test_raw.Y = test_raw.y_std->invert(test_raw.Y);
  auto [phi, s2] = fm.features(test_raw.X);
  std::ofstream pred(out + "/predictions.csv");
  pred << "t";
  for (const auto& n : fm.y_names) pred << ",mean_" << n << ",target_" << n;
  pred << ",aleatoric,epistemic,total\n";
  for (Eigen::Index i = 0; i < test_raw.n(); ++i) {
    const PointPredictive pp = fm.predict_point(phi.col(i), s2(i));
    const Vector mean_raw =
        fm.y_std ? Vector(fm.y_std->invert(Matrix(pp.mean)).col(0)) : pp.mean;
    const double denom = pp.dof - 2.0;
    const double alea = s2(i) * pp.row.trace() / denom;
    const double epi = (pp.col - s2(i)) * pp.row.trace() / denom;
    pred << i;
    for (Eigen::Index j = 0; j < fm.p(); ++j) {
      pred << ',' << detail::fp(mean_raw(j)) << ',' << detail::fp(test_raw.Y(j, i));
    }
    pred << ',' << detail::fp(alea) << ',' << detail::fp(epi) << ','
         << detail::fp(alea + epi) << "\n";
  }
  json summary;
  summary["embedded_dim"] = static_cast<int>(bundle.train.X.rows());
  summary["nu"] = fm.nu;
  summary["n_em_train"] = static_cast<int>(bundle.train.n());
  summary["iterations"] = bundle.em.iterations;
  write_json_file(out + "/summary.json", summary);
  return 0;
}

}  // namespace mbll
