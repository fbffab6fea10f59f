#pragma once

#include "mbll/linalg.hpp"
#include "mbll/rng.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

namespace mbll {

enum class Activation { softplus, leaky_relu };

namespace detail {

inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double act(double z, Activation a) {
  return a == Activation::softplus ? softplus(z) : (z > 0 ? z : 0.01 * z);
}
inline double act_prime(double z, Activation a) {
  return a == Activation::softplus ? sigmoid(z) : (z > 0 ? 1.0 : 0.01);
}

}  // namespace detail

// MLP realizing the feature map phi(.) and the positive noise scale sigma(.).
// phi is the last backbone activation, with a constant-1 coordinate appended
// when include_bias_feature is set. The sigma head is an affine map from the
// backbone output through softplus plus a positive floor; a separate sigma
// backbone (same architecture, own weights) can be enabled instead of the
// shared one.
struct FeatureModel {
  int in_dim = 0;
  std::vector<int> hidden;
  Activation act = Activation::softplus;
  bool include_bias_feature = true;
  bool separate_sigma_backbone = false;
  double sigma_floor = 1e-6;

  std::vector<Matrix> W;
  std::vector<Vector> b;
  std::vector<Matrix> Ws;  // sigma backbone, used iff separate_sigma_backbone
  std::vector<Vector> bs;
  Vector w_sigma;
  double b_sigma = 0.0;

  int phi_dim() const { return hidden.back() + (include_bias_feature ? 1 : 0); }
  int backbone_dim() const { return hidden.back(); }
};

inline FeatureModel make_mlp(int in_dim, std::vector<int> hidden, Activation act,
                             bool include_bias_feature, bool separate_sigma,
                             double sigma_floor, Rng& rng) {
  if (in_dim < 1 || hidden.empty()) {
    throw std::invalid_argument("make_mlp: need an input dimension and hidden layers");
  }
  FeatureModel m;
  m.in_dim = in_dim;
  m.hidden = std::move(hidden);
  m.act = act;
  m.include_bias_feature = include_bias_feature;
  m.separate_sigma_backbone = separate_sigma;
  m.sigma_floor = sigma_floor;
  auto init_stack = [&](std::vector<Matrix>& w, std::vector<Vector>& bias) {
    int prev = in_dim;
    for (int h : m.hidden) {
      Matrix wl(h, prev);
      const double scale = std::sqrt(2.0 / static_cast<double>(prev));  // fan-in
      for (Eigen::Index j = 0; j < wl.cols(); ++j) {
        for (Eigen::Index i = 0; i < wl.rows(); ++i) wl(i, j) = scale * rng.normal();
      }
      w.push_back(std::move(wl));
      bias.push_back(Vector::Zero(h));
      prev = h;
    }
  };
  init_stack(m.W, m.b);
  if (separate_sigma) init_stack(m.Ws, m.bs);
  const int hlast = m.hidden.back();
  m.w_sigma = Vector::Zero(hlast);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hlast));
  for (Eigen::Index i = 0; i < m.w_sigma.size(); ++i) {
    m.w_sigma(i) = scale * rng.normal();
  }
  m.b_sigma = std::log(std::expm1(1.0));  // softplus(b) = 1, so sigma starts near 1
  return m;
}

// A probability density network: mu(x) = A_mu phi(x) on top of the shared
// feature model. Dropping A_mu leaves exactly the penultimate representation
// that the Bayesian last layer replaces.
struct DensityNet {
  FeatureModel features;
  Matrix A_mu;  // p x phi_dim
};

struct ForwardCache {
  std::vector<Matrix> z, a;    // backbone pre/post activations; a[0] is the input
  std::vector<Matrix> zs, as;  // sigma backbone (when separate)
  Matrix phi;                  // phi_dim x B
  Vector a_sig;                // sigma-head pre-activation
  Vector sigma;                // softplus(a_sig) + floor
  Vector sigma2;
};

inline ForwardCache forward(const FeatureModel& m, const Matrix& x) {
  if (x.rows() != m.in_dim) {
    throw std::invalid_argument("forward: input dimension mismatch");
  }
  ForwardCache c;
  const Eigen::Index bsz = x.cols();
  auto run_stack = [&](const std::vector<Matrix>& w, const std::vector<Vector>& bias,
                       std::vector<Matrix>& zs, std::vector<Matrix>& as) {
    as.push_back(x);
    for (size_t l = 0; l < w.size(); ++l) {
      Matrix z = (w[l] * as.back()).colwise() + bias[l];
      Matrix a(z.rows(), z.cols());
      for (Eigen::Index j = 0; j < z.cols(); ++j) {
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
          a(i, j) = detail::act(z(i, j), m.act);
        }
      }
      zs.push_back(std::move(z));
      as.push_back(std::move(a));
    }
  };
  run_stack(m.W, m.b, c.z, c.a);
  const Matrix& h = c.a.back();
  if (m.include_bias_feature) {
    c.phi.resize(h.rows() + 1, bsz);
    c.phi.topRows(h.rows()) = h;
    c.phi.bottomRows(1).setOnes();
  } else {
    c.phi = h;
  }
  const Matrix* hs = &h;
  if (m.separate_sigma_backbone) {
    run_stack(m.Ws, m.bs, c.zs, c.as);
    hs = &c.as.back();
  }
  // per-column dot keeps batched and single-input calls bit-identical
  c.a_sig.resize(bsz);
  c.sigma.resize(bsz);
  for (Eigen::Index j = 0; j < bsz; ++j) {
    c.a_sig(j) = m.w_sigma.dot(hs->col(j)) + m.b_sigma;
    c.sigma(j) = detail::softplus(c.a_sig(j)) + m.sigma_floor;
  }
  c.sigma2 = c.sigma.cwiseProduct(c.sigma);
  return c;
}

// Features only; with mirror set the map is doubled to [phi(x); phi(-x)].
inline std::pair<Matrix, Vector> eval_features(const FeatureModel& m, const Matrix& x,
                                               bool mirror = false) {
  ForwardCache c = forward(m, x);
  if (!mirror) return {std::move(c.phi), std::move(c.sigma2)};
  ForwardCache cm = forward(m, Matrix(-x));
  Matrix phi(c.phi.rows() * 2, c.phi.cols());
  phi.topRows(c.phi.rows()) = c.phi;
  phi.bottomRows(c.phi.rows()) = cm.phi;
  return {std::move(phi), std::move(c.sigma2)};
}

struct Gradients {
  std::vector<Matrix> dW;
  std::vector<Vector> db;
  std::vector<Matrix> dWs;
  std::vector<Vector> dbs;
  Vector dw_sigma;
  double db_sigma = 0.0;
  Matrix dA_mu;  // filled by the pretraining loss only
};

inline Gradients zero_gradients(const FeatureModel& m) {
  Gradients g;
  for (const auto& w : m.W) g.dW.push_back(Matrix::Zero(w.rows(), w.cols()));
  for (const auto& bv : m.b) g.db.push_back(Vector::Zero(bv.size()));
  for (const auto& w : m.Ws) g.dWs.push_back(Matrix::Zero(w.rows(), w.cols()));
  for (const auto& bv : m.bs) g.dbs.push_back(Vector::Zero(bv.size()));
  g.dw_sigma = Vector::Zero(m.w_sigma.size());
  return g;
}

// Reverse pass. d_phi is phi_dim x B (the bias row, if present, carries no
// parameters and is dropped); d_sigma2 is length B.
inline void backward(const FeatureModel& m, const ForwardCache& c,
                     const Matrix& d_phi, const Vector& d_sigma2, Gradients& g) {
  const Eigen::Index bsz = c.phi.cols();
  Vector d_asig(bsz);
  for (Eigen::Index j = 0; j < bsz; ++j) {
    const double dsig = d_sigma2(j) * 2.0 * c.sigma(j);
    d_asig(j) = dsig * detail::sigmoid(c.a_sig(j));
  }
  const Matrix& hs = m.separate_sigma_backbone ? c.as.back() : c.a.back();
  g.dw_sigma += hs * d_asig;
  g.db_sigma += d_asig.sum();

  auto run_back = [&](const std::vector<Matrix>& w, const std::vector<Matrix>& zs,
                      const std::vector<Matrix>& as, Matrix d_top,
                      std::vector<Matrix>& dW, std::vector<Vector>& db) {
    for (int l = static_cast<int>(w.size()) - 1; l >= 0; --l) {
      Matrix dz(d_top.rows(), d_top.cols());
      for (Eigen::Index j = 0; j < dz.cols(); ++j) {
        for (Eigen::Index i = 0; i < dz.rows(); ++i) {
          dz(i, j) = d_top(i, j) * detail::act_prime(zs[l](i, j), m.act);
        }
      }
      dW[l] += dz * as[l].transpose();
      db[l] += dz.rowwise().sum();
      if (l > 0) d_top = w[l].transpose() * dz;
    }
  };

  Matrix d_h = d_phi.topRows(m.backbone_dim());
  if (!m.separate_sigma_backbone) d_h += m.w_sigma * d_asig.transpose();
  run_back(m.W, c.z, c.a, std::move(d_h), g.dW, g.db);
  if (m.separate_sigma_backbone) {
    run_back(m.Ws, c.zs, c.as, m.w_sigma * d_asig.transpose(), g.dWs, g.dbs);
  }
}

// ---- flat parameter packing (optimizers and finite-difference checks) ----

inline Eigen::Index param_count(const FeatureModel& m, const Matrix* a_mu = nullptr) {
  Eigen::Index n = 0;
  for (const auto& w : m.W) n += w.size();
  for (const auto& bv : m.b) n += bv.size();
  for (const auto& w : m.Ws) n += w.size();
  for (const auto& bv : m.bs) n += bv.size();
  n += m.w_sigma.size() + 1;
  if (a_mu) n += a_mu->size();
  return n;
}

namespace detail {
inline void pack_block(Vector& out, Eigen::Index& at, const Matrix& src) {
  out.segment(at, src.size()) = Eigen::Map<const Vector>(src.data(), src.size());
  at += src.size();
}
inline void unpack_block(const Vector& in, Eigen::Index& at, Matrix& dst) {
  dst = Eigen::Map<const Matrix>(in.data() + at, dst.rows(), dst.cols());
  at += dst.size();
}
inline void pack_block(Vector& out, Eigen::Index& at, const Vector& src) {
  out.segment(at, src.size()) = src;
  at += src.size();
}
inline void unpack_block(const Vector& in, Eigen::Index& at, Vector& dst) {
  dst = in.segment(at, dst.size());
  at += dst.size();
}
}  // namespace detail

inline Vector pack_params(const FeatureModel& m, const Matrix* a_mu = nullptr) {
  Vector out(param_count(m, a_mu));
  Eigen::Index at = 0;
  for (const auto& w : m.W) detail::pack_block(out, at, w);
  for (const auto& bv : m.b) detail::pack_block(out, at, bv);
  for (const auto& w : m.Ws) detail::pack_block(out, at, w);
  for (const auto& bv : m.bs) detail::pack_block(out, at, bv);
  detail::pack_block(out, at, m.w_sigma);
  out(at++) = m.b_sigma;
  if (a_mu) detail::pack_block(out, at, *a_mu);
  return out;
}

inline void unpack_params(const Vector& v, FeatureModel& m, Matrix* a_mu = nullptr) {
  Eigen::Index at = 0;
  for (auto& w : m.W) detail::unpack_block(v, at, w);
  for (auto& bv : m.b) detail::unpack_block(v, at, bv);
  for (auto& w : m.Ws) detail::unpack_block(v, at, w);
  for (auto& bv : m.bs) detail::unpack_block(v, at, bv);
  detail::unpack_block(v, at, m.w_sigma);
  m.b_sigma = v(at++);
  if (a_mu) detail::unpack_block(v, at, *a_mu);
}

inline Vector pack_gradients(const FeatureModel& m, const Gradients& g,
                             bool with_a_mu = false) {
  Vector out(param_count(m, with_a_mu ? &g.dA_mu : nullptr));
  Eigen::Index at = 0;
  for (const auto& w : g.dW) detail::pack_block(out, at, w);
  for (const auto& bv : g.db) detail::pack_block(out, at, bv);
  for (const auto& w : g.dWs) detail::pack_block(out, at, w);
  for (const auto& bv : g.dbs) detail::pack_block(out, at, bv);
  detail::pack_block(out, at, g.dw_sigma);
  out(at++) = g.db_sigma;
  if (with_a_mu) detail::pack_block(out, at, g.dA_mu);
  return out;
}

// ---- losses ----

// Frozen quantities of the Q1 surrogate: per-sample loss
//   1/2 (p ln sigma^2 + sigma^-2 (e^T Wq e + p phi^T S phi)),   e = y - C phi.
// Wq is V^-1 in the Normal case, (nu'+N)(Psi~ + Sycx~)^-1 in the T case.
struct Q1Terms {
  Matrix C;   // p x phi_dim
  Matrix Wq;  // p x p, symmetric
  Matrix S;   // phi_dim x phi_dim, symmetric
};

inline double q1_loss_value(const Q1Terms& t, const Matrix& phi,
                            const Vector& sigma2, const Matrix& y) {
  const double p = static_cast<double>(y.rows());
  const Eigen::Index bsz = phi.cols();
  if (bsz == 0) throw std::invalid_argument("q1_loss_value: empty batch");
  const Matrix e = y - t.C * phi;
  double total = 0.0;
  for (Eigen::Index j = 0; j < bsz; ++j) {
    const double quad = e.col(j).dot(t.Wq * e.col(j)) +
                        p * phi.col(j).dot(t.S * phi.col(j));
    total += 0.5 * (p * std::log(sigma2(j)) + quad / sigma2(j));
  }
  return total / static_cast<double>(bsz);
}

inline void q1_loss_backward(const Q1Terms& t, const Matrix& phi,
                             const Vector& sigma2, const Matrix& y, Matrix& d_phi,
                             Vector& d_sigma2) {
  const double p = static_cast<double>(y.rows());
  const Eigen::Index bsz = phi.cols();
  const double inv_b = 1.0 / static_cast<double>(bsz);
  const Matrix e = y - t.C * phi;
  d_phi.setZero(phi.rows(), bsz);
  d_sigma2.setZero(bsz);
  for (Eigen::Index j = 0; j < bsz; ++j) {
    const Vector we = t.Wq * e.col(j);
    const Vector sphi = t.S * phi.col(j);
    const double quad = e.col(j).dot(we) + p * phi.col(j).dot(sphi);
    const double is2 = 1.0 / sigma2(j);
    d_phi.col(j) = inv_b * is2 * (-t.C.transpose() * we + p * sphi);
    d_sigma2(j) = inv_b * 0.5 * (p * is2 - quad * is2 * is2);
  }
}

struct LossEval {
  double value = 0.0;
  Vector grad;
};

// Q1 loss and gradient over the packed feature-model parameters.
inline LossEval eval_q1(const FeatureModel& m, const Q1Terms& t, const Matrix& x,
                        const Matrix& y) {
  ForwardCache c = forward(m, x);
  LossEval out;
  out.value = q1_loss_value(t, c.phi, c.sigma2, y);
  Matrix d_phi;
  Vector d_sigma2;
  q1_loss_backward(t, c.phi, c.sigma2, y, d_phi, d_sigma2);
  Gradients g = zero_gradients(m);
  backward(m, c, d_phi, d_sigma2, g);
  out.grad = pack_gradients(m, g);
  return out;
}

// Density-network pretraining loss, mean over the batch of
//   sigma^-2(x) (y - mu(x))^T V0^-1 (y - mu(x)) + ln sigma^2(x).
inline LossEval eval_pdn(const DensityNet& net, const Matrix& x, const Matrix& y,
                         const Matrix& v0_inv) {
  ForwardCache c = forward(net.features, x);
  const Eigen::Index bsz = x.cols();
  if (bsz == 0) throw std::invalid_argument("eval_pdn: empty batch");
  const double inv_b = 1.0 / static_cast<double>(bsz);
  const Matrix r = y - net.A_mu * c.phi;
  Gradients g = zero_gradients(net.features);
  g.dA_mu = Matrix::Zero(net.A_mu.rows(), net.A_mu.cols());
  Matrix d_phi = Matrix::Zero(c.phi.rows(), bsz);
  Vector d_sigma2 = Vector::Zero(bsz);
  double total = 0.0;
  for (Eigen::Index j = 0; j < bsz; ++j) {
    const Vector vr = v0_inv * r.col(j);
    const double quad = r.col(j).dot(vr);
    const double is2 = 1.0 / c.sigma2(j);
    total += quad * is2 + std::log(c.sigma2(j));
    g.dA_mu += inv_b * (-2.0 * is2) * vr * c.phi.col(j).transpose();
    d_phi.col(j) = inv_b * (-2.0 * is2) * net.A_mu.transpose() * vr;
    d_sigma2(j) = inv_b * (is2 - quad * is2 * is2);
  }
  backward(net.features, c, d_phi, d_sigma2, g);
  LossEval out;
  out.value = total * inv_b;
  out.grad = pack_gradients(net.features, g, /*with_a_mu=*/true);
  return out;
}

// ---- optimizers ----

struct SGDConfig {
  enum class Opt { sgd, adamw };
  Opt optimizer = Opt::adamw;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // 0 disables; otherwise global-norm clipping
  int batch_size = 32;
  int epochs = 5;
  std::uint64_t seed = 0;
};

class Optimizer {
 public:
  Optimizer(SGDConfig cfg, Eigen::Index n) : cfg_(cfg) {
    if (cfg_.optimizer == SGDConfig::Opt::adamw) {
      m_ = Vector::Zero(n);
      v_ = Vector::Zero(n);
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

  void step(Vector& params, Vector grad) {
    if (cfg_.grad_clip > 0.0) {
      const double norm = grad.norm();
      if (norm > cfg_.grad_clip) grad *= cfg_.grad_clip / norm;
    }
    if (cfg_.optimizer == SGDConfig::Opt::sgd) {
      if (cfg_.weight_decay > 0.0) params -= cfg_.lr * cfg_.weight_decay * params;
      params -= cfg_.lr * grad;
      return;
    }
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    if (cfg_.weight_decay > 0.0) params -= cfg_.lr * cfg_.weight_decay * params;
    params -= (cfg_.lr / bc1) *
              (m_.array() / ((v_.array() / bc2).sqrt() + eps_)).matrix();
  }

 private:
  SGDConfig cfg_;
  Vector m_, v_;
  long t_ = 0;
  static constexpr double beta1_ = 0.9;
  static constexpr double beta2_ = 0.999;
  static constexpr double eps_ = 1e-8;
};

// ---- pretraining ----

struct PretrainResult {
  DensityNet net;
  double best_val_loss = 0.0;
  int best_epoch = -1;
  double final_val_loss = 0.0;
  std::vector<double> val_curve;
};

// Train the density network by minibatch descent on the pretraining loss,
// with reduce-on-plateau learning rate (factor 0.5, patience 10) and early
// stopping on the validation loss; returns the best-validation weights.
inline PretrainResult pretrain_pdn(DensityNet net, const Matrix& x_train,
                                   const Matrix& y_train, const Matrix& x_val,
                                   const Matrix& y_val, const SGDConfig& cfg,
                                   const Matrix& v0, int early_stop_patience = 20,
                                   int plateau_patience = 10) {
  if (x_train.cols() == 0 || x_val.cols() == 0) {
    throw std::invalid_argument("pretrain_pdn: train and validation splits required");
  }
  Chol cv0(v0, "pretrain.V0");
  const Matrix v0_inv = cv0.inverse();
  Rng rng(cfg.seed);
  Vector params = pack_params(net.features, &net.A_mu);
  Optimizer opt(cfg, params.size());
  std::vector<Eigen::Index> order(x_train.cols());
  for (Eigen::Index i = 0; i < x_train.cols(); ++i) order[i] = i;

  PretrainResult res;
  res.net = net;
  res.best_val_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  int since_plateau = 0;
  const int bsz = std::max(1, cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (Eigen::Index start = 0; start < x_train.cols(); start += bsz) {
      const Eigen::Index len = std::min<Eigen::Index>(bsz, x_train.cols() - start);
      Matrix xb(x_train.rows(), len), yb(y_train.rows(), len);
      for (Eigen::Index j = 0; j < len; ++j) {
        xb.col(j) = x_train.col(order[start + j]);
        yb.col(j) = y_train.col(order[start + j]);
      }
      const LossEval le = eval_pdn(net, xb, yb, v0_inv);
      if (!std::isfinite(le.value)) {
        throw std::runtime_error("pretrain_pdn: non-finite loss at epoch " +
                                 std::to_string(epoch));
      }
      opt.step(params, le.grad);
      unpack_params(params, net.features, &net.A_mu);
    }
    ForwardCache cval = forward(net.features, x_val);
    const Matrix rv = y_val - net.A_mu * cval.phi;
    double val = 0.0;
    for (Eigen::Index j = 0; j < x_val.cols(); ++j) {
      val += rv.col(j).dot(v0_inv * rv.col(j)) / cval.sigma2(j) +
             std::log(cval.sigma2(j));
    }
    val /= static_cast<double>(x_val.cols());
    res.val_curve.push_back(val);
    res.final_val_loss = val;
    if (val < res.best_val_loss - 1e-12) {
      res.best_val_loss = val;
      res.best_epoch = epoch;
      res.net = net;
      since_best = 0;
      since_plateau = 0;
    } else {
      ++since_best;
      ++since_plateau;
      if (since_plateau >= plateau_patience) {
        opt.set_lr(opt.lr() * 0.5);
        since_plateau = 0;
      }
      if (since_best >= early_stop_patience) break;
    }
  }
  return res;
}

}  // namespace mbll
