#pragma once

#include "mbll/bll_normal.hpp"
#include "mbll/bll_t.hpp"
#include "mbll/nn.hpp"

#include <chrono>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbll {

enum class ModelKind { normal, t };

enum class EMMode {
  fixed_M_hyperprior,  // hold M, update K with the IW(Lambda, kappa) prior
  joint_hyperprior,    // update M and K, hyperprior on K
  fixed_M_only,        // hold M, unregularized K update
  degenerate_joint     // the pathological joint scheme; verification only
};

enum class SigmaMode {
  head,      // sigma(x) from the feature model's head
  constant,  // single sigma^2, closed-form M-step update
  fixed      // externally supplied per-sample variances
};

struct EMConfig {
  EMMode mode = EMMode::fixed_M_hyperprior;
  std::optional<HyperPrior> hyperprior;  // defaults to IW(I, 1) when a mode needs it
  Constraint k_constraint = Constraint::full;
  Constraint psi_constraint = Constraint::full;
  SigmaMode sigma_mode = SigmaMode::head;
  int max_iter = 200;
  double rel_tol = 1e-3;
  bool train_features = false;
  SGDConfig sgd;
  std::uint64_t seed = 0;
};

struct EMProblem {
  Matrix X;  // d_x x N; unused when phi_fixed is set
  Matrix Y;  // p x N
  Matrix V;  // p x p (Normal kind)
  std::optional<Matrix> phi_fixed;
  std::optional<Vector> d_fixed;  // with SigmaMode::fixed
  bool mirror_augment = false;
};

struct EMState {
  Matrix M;
  Matrix K;
  Matrix Psi;       // T kind
  double nu = 0.0;  // T kind, held fixed
  double sigma2 = 1.0;
  std::optional<FeatureModel> model;
};

// Frozen snapshot of the tilde statistics entering Q1 and Q2 for one EM
// iteration. Wq is the per-residual quadratic weight: V^-1 in the Normal
// case, (nu' + N)(Psi~ + Sycx~)^-1 in the T case.
struct QContext {
  Matrix post_mean;  // p x d_t
  Matrix Sxx_inv;    // d_t x d_t
  Matrix Wq;         // p x p
  Matrix H;          // Psi~ + Sycx~ (T kind only)
  Eigen::Index n = 0;
  Eigen::Index p = 0;
};

inline QContext make_qcontext_normal(const Design& d, const NormalHyper& h,
                                     const Matrix& v) {
  const SuffStats s = suffstats(d, h);
  QContext ctx;
  ctx.post_mean = s.post_mean;
  ctx.Sxx_inv = s.Sxx_inv;
  Chol cv(v, "V");
  ctx.Wq = symmetrize(cv.inverse());
  ctx.n = d.n();
  ctx.p = d.p();
  return ctx;
}

inline QContext make_qcontext_t(const Design& d, const THyper& h) {
  const TSuffStats s = t_suffstats(d, h);
  QContext ctx;
  ctx.post_mean = s.base.post_mean;
  ctx.Sxx_inv = s.base.Sxx_inv;
  ctx.H = s.H;
  Chol ch(s.H, "H");
  const double nu_prime = h.nu - static_cast<double>(d.p()) - 1.0;
  ctx.Wq = symmetrize((nu_prime + static_cast<double>(d.n())) * ch.inverse());
  ctx.n = d.n();
  ctx.p = d.p();
  return ctx;
}

inline Q1Terms q1_terms(const QContext& ctx) {
  return Q1Terms{ctx.post_mean, ctx.Wq, ctx.Sxx_inv};
}

// Mean per-sample -Q1 over a batch of forwarded features.
inline double q1_loss_normal(const QContext& ctx, const Matrix& phi,
                             const Vector& sigma2, const Matrix& y) {
  return q1_loss_value(q1_terms(ctx), phi, sigma2, y);
}

inline double q1_loss_t(const QContext& ctx, const Matrix& phi,
                        const Vector& sigma2, const Matrix& y) {
  return q1_loss_value(q1_terms(ctx), phi, sigma2, y);
}

namespace detail {

inline HyperPrior effective_hyperprior(const EMConfig& cfg, Eigen::Index dt) {
  if (cfg.hyperprior) return *cfg.hyperprior;
  return HyperPrior{Matrix::Identity(dt, dt), 1.0};
}

// The K minimizer of Q2 (plus hyperprior when the mode carries one). The
// diagonal / isotropic projections coincide with the exact constrained
// minimizers for this objective.
inline Matrix update_k(const QContext& ctx, const EMConfig& cfg,
                       const Matrix& f_tilde) {
  const double p = static_cast<double>(ctx.p);
  Matrix k;
  switch (cfg.mode) {
    case EMMode::fixed_M_hyperprior: {
      const HyperPrior hp = effective_hyperprior(cfg, ctx.Sxx_inv.rows());
      k = (p * ctx.Sxx_inv + f_tilde.transpose() * ctx.Wq * f_tilde + hp.Lambda) /
          (p + hp.kappa);
      break;
    }
    case EMMode::joint_hyperprior: {
      const HyperPrior hp = effective_hyperprior(cfg, ctx.Sxx_inv.rows());
      k = (p * ctx.Sxx_inv + hp.Lambda) / (p + hp.kappa);
      break;
    }
    case EMMode::fixed_M_only:
      k = ctx.Sxx_inv + (f_tilde.transpose() * ctx.Wq * f_tilde) / p;
      break;
    case EMMode::degenerate_joint:
      k = ctx.Sxx_inv;
      break;
  }
  return project_constraint(symmetrize(k), cfg.k_constraint);
}

inline bool mode_updates_m(EMMode mode) {
  return mode == EMMode::joint_hyperprior || mode == EMMode::degenerate_joint;
}

}  // namespace detail

// Closed-form M-step for (M, K) in the Normal model, from the frozen context.
// m_fixed is the held mean for the fixed-M modes.
inline NormalHyper update_hyper_normal(const QContext& ctx, const EMConfig& cfg,
                                       const Matrix& m_fixed) {
  NormalHyper out;
  out.M = detail::mode_updates_m(cfg.mode) ? ctx.post_mean : m_fixed;
  const Matrix f_tilde = out.M - ctx.post_mean;
  out.K = detail::update_k(ctx, cfg, f_tilde);
  out.k_constraint = cfg.k_constraint;
  return out;
}

// Closed-form M-step for (M, K, Psi) in the T model. The Psi update under a
// structural constraint uses the exact constrained minimizer of Q2 (not a
// projection), which keeps the EM ascent property intact.
inline THyper update_hyper_t(const QContext& ctx, const EMConfig& cfg,
                             const Matrix& m_fixed, double nu) {
  THyper out;
  out.nu = nu;
  out.M = detail::mode_updates_m(cfg.mode) ? ctx.post_mean : m_fixed;
  const Matrix f_tilde = out.M - ctx.post_mean;
  out.K = detail::update_k(ctx, cfg, f_tilde);
  out.k_constraint = cfg.k_constraint;
  out.psi_constraint = cfg.psi_constraint;

  const double p = static_cast<double>(ctx.p);
  const double nu_prime = nu - p - 1.0;
  const double ratio = nu_prime / (nu_prime + static_cast<double>(ctx.n));
  Chol ch(ctx.H, "H");
  switch (cfg.psi_constraint) {
    case Constraint::full:
      out.Psi = symmetrize(ratio * ctx.H);
      break;
    case Constraint::diagonal: {
      const Vector hinv_diag = ch.inverse().diagonal();
      out.Psi = Matrix((ratio * hinv_diag.cwiseInverse()).asDiagonal());
      break;
    }
    case Constraint::isotropic: {
      const double psi = ratio * p / ch.inverse().trace();
      out.Psi = psi * Matrix::Identity(ctx.p, ctx.p);
      break;
    }
  }
  return out;
}

// Homoscedastic closed form: sigma^2 = (1/(pN)) sum_i (e_i^T Wq e_i + p phi_i^T Sxx~^-1 phi_i).
inline double update_sigma_const(const QContext& ctx, const Matrix& phi,
                                 const Matrix& y) {
  if (ctx.n == 0) throw std::invalid_argument("update_sigma_const: N = 0");
  const Matrix e = y - ctx.post_mean * phi;
  const double p = static_cast<double>(ctx.p);
  double total = (e.transpose() * ctx.Wq * e).trace() +
                 p * (phi.transpose() * ctx.Sxx_inv * phi).trace();
  return total / (p * static_cast<double>(ctx.n));
}

struct EMIterRow {
  int iter = 0;
  double log_evidence = 0.0;
  double log_map = 0.0;
  double trace_k = 0.0;
  double m_rel_err = 0.0;  // |M - M_hat| / |M_hat|, NaN when M_hat undefined
  double neg_q1 = 0.0;
  double sigma2_mean = 0.0;
  double wall_ms = 0.0;
};

struct EMTrace {
  std::vector<EMIterRow> rows;
};

struct EMResult {
  EMState state;
  EMTrace trace;
  bool converged = false;
  int iterations = 0;
};

// ln pi(K) up to the normalization constant; kappa may be below the proper
// range, the MAP objective only needs these two terms.
inline double hyperprior_log_unnorm(const Matrix& k, const HyperPrior& hp) {
  Chol ck(k, "K");
  return -0.5 * hp.kappa * ck.log_det() - 0.5 * ck.trace_solve(hp.Lambda);
}

namespace detail {

struct FeatureEval {
  Matrix phi;
  Vector d_diag;
};

inline FeatureEval em_features(const EMProblem& prob, const EMState& state,
                               const EMConfig& cfg) {
  FeatureEval fe;
  Vector head_sigma2;
  if (prob.phi_fixed) {
    fe.phi = *prob.phi_fixed;
  } else {
    if (!state.model) {
      throw std::invalid_argument("run_em: no feature model and no fixed basis");
    }
    auto [phi, s2] = eval_features(*state.model, prob.X, prob.mirror_augment);
    fe.phi = std::move(phi);
    head_sigma2 = std::move(s2);
  }
  const Eigen::Index n = fe.phi.cols();
  switch (cfg.sigma_mode) {
    case SigmaMode::head:
      if (head_sigma2.size() != n) {
        throw std::invalid_argument("run_em: sigma head unavailable for fixed basis");
      }
      fe.d_diag = head_sigma2;
      break;
    case SigmaMode::constant:
      fe.d_diag = Vector::Constant(n, state.sigma2);
      break;
    case SigmaMode::fixed:
      if (!prob.d_fixed || prob.d_fixed->size() != n) {
        throw std::invalid_argument("run_em: SigmaMode::fixed requires d_fixed");
      }
      fe.d_diag = *prob.d_fixed;
      break;
  }
  return fe;
}

inline bool uses_hyperprior(EMMode mode) {
  return mode == EMMode::fixed_M_hyperprior || mode == EMMode::joint_hyperprior;
}

}  // namespace detail

// Log posterior of the parameters (evidence plus the K hyperprior when the
// mode carries one), evaluated at the state's current features.
inline double em_log_map(const EMProblem& prob, const EMState& state,
                         const EMConfig& cfg, ModelKind kind) {
  const detail::FeatureEval fe = detail::em_features(prob, state, cfg);
  const Design design{fe.phi, prob.Y, fe.d_diag};
  double logev;
  if (kind == ModelKind::normal) {
    logev = log_evidence(DesignBlock{design, prob.V}, NormalHyper{state.M, state.K});
  } else {
    logev = t_log_evidence(design, THyper{state.M, state.K, state.Psi, state.nu});
  }
  if (detail::uses_hyperprior(cfg.mode)) {
    logev += hyperprior_log_unnorm(
        state.K, detail::effective_hyperprior(cfg, state.K.rows()));
  }
  return logev;
}

// Algorithm skeleton shared by the Normal and T models: freeze the tilde
// statistics, run the SGD sub-step on Q1 (accepted only if the full-batch Q1
// does not get worse; retried at halved learning rate, then dropped or
// aborted), apply the closed-form sigma^2 / hyperparameter updates, repeat
// until the relative changes in K and log-evidence fall below rel_tol.
inline EMResult run_em(const EMProblem& prob, EMState state, const EMConfig& cfg,
                       ModelKind kind) {
  using clock = std::chrono::steady_clock;
  if (kind == ModelKind::t && !(state.nu > 2.0 * static_cast<double>(prob.Y.rows()))) {
    throw std::invalid_argument("run_em: T kind requires nu > 2p");
  }
  if (!(cfg.rel_tol > 0)) throw std::invalid_argument("run_em: rel_tol must be > 0");
  const Matrix m_fixed = state.M;
  const bool train = cfg.train_features && state.model && cfg.sgd.epochs > 0;
  if (train && prob.mirror_augment) {
    throw std::invalid_argument("run_em: mirrored features are frozen-only");
  }

  EMResult res;
  double prev_log_map = em_log_map(prob, state, cfg, kind);
  double prev_log_ev = 0.0;
  Matrix prev_k = state.K;
  bool have_prev = false;

  for (int iter = 1; iter <= cfg.max_iter; ++iter) {
    const auto t0 = clock::now();
    const detail::FeatureEval fe = detail::em_features(prob, state, cfg);
    const Design tilde_design{fe.phi, prob.Y, fe.d_diag};
    const QContext ctx =
        kind == ModelKind::normal
            ? make_qcontext_normal(tilde_design, NormalHyper{state.M, state.K}, prob.V)
            : make_qcontext_t(tilde_design,
                              THyper{state.M, state.K, state.Psi, state.nu});

    // M-step for the DNN weights.
    if (train) {
      const double q1_before =
          q1_loss_value(q1_terms(ctx), fe.phi, fe.d_diag, prob.Y);
      const Vector snapshot = pack_params(*state.model);
      double lr = cfg.sgd.lr;
      bool accepted = false;
      double best_after = std::numeric_limits<double>::infinity();
      for (int attempt = 0; attempt <= 3 && !accepted; ++attempt) {
        SGDConfig sgd = cfg.sgd;
        sgd.lr = lr;
        Rng rng(cfg.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(iter));
        Vector params = snapshot;
        unpack_params(params, *state.model);
        Optimizer opt(sgd, params.size());
        std::vector<Eigen::Index> order(prob.X.cols());
        for (Eigen::Index i = 0; i < prob.X.cols(); ++i) order[i] = i;
        const int bsz = std::max(1, sgd.batch_size);
        for (int epoch = 0; epoch < sgd.epochs; ++epoch) {
          rng.shuffle(order.begin(), order.end());
          for (Eigen::Index start = 0; start < prob.X.cols(); start += bsz) {
            const Eigen::Index len =
                std::min<Eigen::Index>(bsz, prob.X.cols() - start);
            Matrix xb(prob.X.rows(), len), yb(prob.Y.rows(), len);
            for (Eigen::Index j = 0; j < len; ++j) {
              xb.col(j) = prob.X.col(order[start + j]);
              yb.col(j) = prob.Y.col(order[start + j]);
            }
            const LossEval le = eval_q1(*state.model, q1_terms(ctx), xb, yb);
            if (!std::isfinite(le.value)) {
              throw std::runtime_error("run_em: non-finite Q1 loss in SGD sub-step");
            }
            opt.step(params, le.grad);
            unpack_params(params, *state.model);
          }
        }
        auto [phi_new, s2_new] = eval_features(*state.model, prob.X, false);
        Vector d_new = cfg.sigma_mode == SigmaMode::head
                           ? s2_new
                           : Vector(Vector::Constant(phi_new.cols(), state.sigma2));
        if (cfg.sigma_mode == SigmaMode::fixed) d_new = *prob.d_fixed;
        const double q1_after =
            q1_loss_value(q1_terms(ctx), phi_new, d_new, prob.Y);
        best_after = std::min(best_after, q1_after);
        if (q1_after <= q1_before + 1e-12) {
          accepted = true;
        } else {
          unpack_params(snapshot, *state.model);  // restore and retry slower
          lr *= 0.5;
        }
      }
      if (!accepted) {
        // Keep the previous weights for this iteration; the closed-form
        // updates alone still ascend, and the next iteration retries with a
        // fresh batch order. Only a non-finite loss is an unrecoverable abort.
        if (!std::isfinite(best_after)) {
          throw std::runtime_error(
              "run_em: SGD sub-step produced a non-finite Q1 (was " +
              std::to_string(q1_before) + ") at iteration " +
              std::to_string(res.iterations + 1));
        }
      }
    }

    // M-step for the constant noise scale, against the frozen context.
    if (cfg.sigma_mode == SigmaMode::constant) {
      state.sigma2 = update_sigma_const(ctx, fe.phi, prob.Y);
    }

    // M-step for the hyperparameters.
    if (kind == ModelKind::normal) {
      const NormalHyper h = update_hyper_normal(ctx, cfg, m_fixed);
      state.M = h.M;
      state.K = h.K;
    } else {
      const THyper h = update_hyper_t(ctx, cfg, m_fixed, state.nu);
      state.M = h.M;
      state.K = h.K;
      state.Psi = h.Psi;
    }

    // Diagnostics at the updated state.
    const detail::FeatureEval fe_new = detail::em_features(prob, state, cfg);
    const Design new_design{fe_new.phi, prob.Y, fe_new.d_diag};
    double logev;
    if (kind == ModelKind::normal) {
      logev = log_evidence(DesignBlock{new_design, prob.V},
                           NormalHyper{state.M, state.K});
    } else {
      logev = t_log_evidence(new_design, THyper{state.M, state.K, state.Psi, state.nu});
    }
    double logmap = logev;
    if (detail::uses_hyperprior(cfg.mode)) {
      logmap += hyperprior_log_unnorm(
          state.K, detail::effective_hyperprior(cfg, state.K.rows()));
    }
    if (logmap < prev_log_map - 1e-6) {
      throw std::runtime_error("run_em: log-MAP decreased by " +
                               std::to_string(prev_log_map - logmap) +
                               " at iteration " + std::to_string(iter));
    }

    EMIterRow row;
    row.iter = iter;
    row.log_evidence = logev;
    row.log_map = logmap;
    row.trace_k = state.K.trace();
    row.m_rel_err = std::numeric_limits<double>::quiet_NaN();
    try {
      const Matrix m_hat = least_squares(new_design);
      row.m_rel_err = (state.M - m_hat).norm() / std::max(m_hat.norm(), 1e-300);
    } catch (const std::exception&) {
      // rank-deficient or undersized designs simply skip the diagnostic
    }
    row.neg_q1 = q1_loss_value(q1_terms(ctx), fe_new.phi, fe_new.d_diag, prob.Y);
    row.sigma2_mean = fe_new.d_diag.mean();
    row.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    res.trace.rows.push_back(row);
    res.iterations = iter;

    if (have_prev) {
      const double dk = (state.K - prev_k).norm() / std::max(prev_k.norm(), 1e-300);
      const double dl = std::abs(logev - prev_log_ev) / std::max(1.0, std::abs(prev_log_ev));
      if (dk < cfg.rel_tol && dl < cfg.rel_tol) {
        res.converged = true;
      }
    }
    prev_k = state.K;
    prev_log_ev = logev;
    prev_log_map = logmap;
    have_prev = true;
    if (res.converged) break;
  }
  res.state = std::move(state);
  return res;
}

}  // namespace mbll
