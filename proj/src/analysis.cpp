// SPDX-License-Identifier: Apache-2.0
#include "tlora/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tlora/rng.hpp"
#include "tlora/train.hpp"

namespace tlora::analysis {

namespace {

Matrix regularized(const Matrix& c, double eps) {
  return c + eps * Matrix::Identity(c.rows(), c.cols());
}

// A C A^T must be safely invertible; returns its LDLT factorization.
Eigen::LDLT<Eigen::MatrixXd> gram_factor(const Matrix& a, const Matrix& c) {
  if (a.cols() != c.rows() || c.rows() != c.cols()) {
    throw Error(ErrorCode::kInvalidInput, "A and C shapes do not chain");
  }
  const Eigen::MatrixXd gram = a * c * a.transpose();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(0.5 * (gram + gram.transpose()));
  const Eigen::VectorXd d = ldlt.vectorD();
  const double mx = d.cwiseAbs().maxCoeff();
  if (ldlt.info() != Eigen::Success || !(mx > 0.0) || d.minCoeff() <= 1e-13 * mx) {
    throw Error(ErrorCode::kSingularGram, "A C A^T is singular");
  }
  return ldlt;
}

}  // namespace

TargetMatrix target_matrix(TargetKind kind, const Matrix& x, const Matrix& c, double eps,
                           std::string layer) {
  if (x.cols() != c.rows()) throw Error(ErrorCode::kInvalidInput, "X and C do not chain");
  const Matrix half = x * linalg::psd_sqrt(regularized(c, eps));
  Matrix m = half.transpose() * half;
  return {kind, 0.5 * (m + m.transpose()), std::move(layer)};
}

Matrix top_eigvecs(const Matrix& m, std::size_t r) {
  const EighResult e = linalg::eigh_psd(m);
  if (r < 1 || r > static_cast<std::size_t>(m.rows())) {
    throw Error(ErrorCode::kInvalidRank, "eigenvector count out of range");
  }
  return e.eigvecs.leftCols(static_cast<Eigen::Index>(r)).transpose();
}

double objective_J(const Matrix& a, const Matrix& c, const Matrix& delta) {
  const auto ldlt = gram_factor(a, c);
  const Eigen::MatrixXd dca = delta * c * a.transpose();  // d_out x r
  // Tr[(D C A^T)^T (D C A^T) G^{-1}]
  const Eigen::MatrixXd lhs = dca.transpose() * dca;
  const double j = ldlt.solve(lhs).trace();
  return std::max(0.0, j);
}

OptimalB optimal_B_and_loss(const Matrix& a, const Matrix& c, const Matrix& delta,
                            double noise_var, std::size_t d_out, double scale) {
  if (!(scale != 0.0)) throw Error(ErrorCode::kInvalidInput, "scale must be non-zero");
  if (static_cast<std::size_t>(delta.rows()) != d_out) {
    throw Error(ErrorCode::kInvalidInput, "delta rows != d_out");
  }
  const auto ldlt = gram_factor(a, c);
  const Eigen::MatrixXd dca = delta * c * a.transpose();
  // B* = (1/s) D C A^T G^{-1}; G symmetric so solve G X = (D C A^T)^T.
  const Eigen::MatrixXd bt = ldlt.solve(dca.transpose());
  OptimalB out;
  out.b = bt.transpose() / scale;
  const double j = std::max(0.0, ldlt.solve(dca.transpose() * dca).trace());
  out.expected_loss = static_cast<double>(d_out) * noise_var + (delta * c * delta.transpose()).trace() - j;
  return out;
}

Matrix optimal_projection(const Matrix& c, const Matrix& delta, std::size_t r) {
  const EighResult e = linalg::eigh_psd(c);
  const Vector& ev = e.spectrum.eigenvalues;
  if (ev(ev.size() - 1) <= 0.0) {
    throw Error(ErrorCode::kSingularGram, "covariance must be positive definite");
  }
  const Matrix half = e.eigvecs * ev.cwiseSqrt().asDiagonal() * e.eigvecs.transpose();
  const Matrix inv_half = e.eigvecs * ev.cwiseSqrt().cwiseInverse().asDiagonal() * e.eigvecs.transpose();
  const Matrix m = (delta * half).transpose() * (delta * half);
  return top_eigvecs(0.5 * (m + m.transpose()), r) * inv_half;
}

AlignmentReport alignment_report(const Network& net, const CalibrationStats& stats,
                                 const std::vector<Matrix>& deltas, std::size_t r, double eps) {
  if (deltas.size() != net.layers.size()) {
    throw Error(ErrorCode::kInvalidInput, "need one delta per layer");
  }
  AlignmentReport report;
  report.eps = eps;
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const LinearLayer& layer = net.layers[k];
    if (!layer.adaptable) continue;
    const Matrix& c = stats.module(layer.name).covariance;
    const std::size_t rr = std::min({r, layer.d_in(), layer.d_out()});

    LayerAlignment la;
    la.layer = layer.name;
    la.r = rr;
    const TargetMatrix proxy = target_matrix(TargetKind::kMProxy, layer.w, c, eps, layer.name);
    const TargetMatrix mdelta = target_matrix(TargetKind::kMDelta, deltas[k], c, eps, layer.name);
    const EighResult ep = linalg::eigh_psd(proxy.matrix);
    const EighResult ed = linalg::eigh_psd(mdelta.matrix);
    const Matrix up = ep.eigvecs.leftCols(static_cast<Eigen::Index>(rr)).transpose();
    const Matrix ud = ed.eigvecs.leftCols(static_cast<Eigen::Index>(rr)).transpose();
    la.phi_proxy_delta = linalg::subspace_similarity(up, ud);

    const Matrix approx = linalg::top_r_right(layer.w * c, rr);
    const Matrix theory = linalg::top_r_right(layer.w * linalg::psd_sqrt(regularized(c, eps)), rr);
    la.phi_approx_theory = linalg::subspace_similarity(approx, theory);

    for (std::size_t i = 0; i < rr; ++i) {
      la.top_eig_proxy.push_back(ep.spectrum.eigenvalues(static_cast<Eigen::Index>(i)));
      la.top_eig_delta.push_back(ed.spectrum.eigenvalues(static_cast<Eigen::Index>(i)));
    }
    const EighResult ec = linalg::eigh_psd(c);
    for (Eigen::Index i = 0; i < ec.spectrum.eigenvalues.size(); ++i) {
      la.covariance_spectrum.push_back(ec.spectrum.eigenvalues(i));
    }
    la.cond_c = (ec.spectrum.eigenvalues(0) + eps) /
                (ec.spectrum.eigenvalues(ec.spectrum.eigenvalues.size() - 1) + eps);

    auto degenerate_cut = [rr](const Vector& ev) {
      const auto cut = static_cast<Eigen::Index>(rr);
      if (cut >= ev.size()) return false;
      const double top = ev(cut - 1);
      if (top <= 1e-12 * std::max(1.0, ev(0))) return true;
      return ev(cut) / top > 0.999;
    };
    la.near_degenerate = degenerate_cut(ep.spectrum.eigenvalues) || degenerate_cut(ed.spectrum.eigenvalues);
    report.layers.push_back(std::move(la));
  }
  return report;
}

std::vector<std::pair<std::string, double>> importance_diff(const CalibrationStats& a,
                                                            const CalibrationStats& b) {
  if (a.modules.size() != b.modules.size()) {
    throw Error(ErrorCode::kInvalidInput, "module lists differ in length");
  }
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < a.modules.size(); ++i) {
    if (a.modules[i].name != b.modules[i].name) {
      throw Error(ErrorCode::kInvalidInput, "module mismatch: '" + a.modules[i].name + "' vs '" +
                                                b.modules[i].name + "'");
    }
    out.emplace_back(a.modules[i].name, a.modules[i].importance - b.modules[i].importance);
  }
  return out;
}

double inv_sqrt_condition(double lambda_max, double lambda_min, double eps) {
  return std::sqrt((lambda_max + eps) / (lambda_min + eps));
}

StabilityReport stability_probe(const Matrix& w0, const Matrix& c, std::size_t r, double eps,
                                const ProbeConfig& cfg) {
  if (w0.cols() != c.rows()) throw Error(ErrorCode::kInvalidInput, "w0 and c do not chain");
  const auto d_out = static_cast<std::size_t>(w0.rows());
  const auto d_in = static_cast<std::size_t>(w0.cols());

  Network net;
  net.activation = Activation::kIdentity;
  net.loss = LossKind::kMse;
  net.layers.push_back({"probe", w0, std::nullopt, true});

  Rng rng(cfg.seed);
  const Matrix z = rng.gaussian(cfg.n_samples, d_in);
  const Matrix half = linalg::psd_sqrt(c);
  Batch data;
  data.x = z * half;
  const Matrix teacher = rng.gaussian(d_out, d_in, cfg.teacher_scale / std::sqrt(static_cast<double>(d_in)));
  data.y = data.x * (w0 + teacher).transpose();

  StabilityReport report;
  const EighResult inv_spec = linalg::eigh_psd(linalg::psd_inv_sqrt_reg(c, eps));
  report.cond_inv_sqrt_factor = inv_spec.spectrum.condition_number;

  TrainConfig tc;
  tc.lr = cfg.lr;
  tc.steps = cfg.steps;
  tc.batch_size = cfg.n_samples;
  tc.optimizer.kind = OptimizerKind::kSgd;
  tc.mode = TrainMode::kBOnly;
  tc.seed = cfg.seed;

  auto run = [&](InitKind kind, double& first_norm, double& cond_a, std::vector<double>& losses,
                 bool& diverged) {
    InitOptions init;
    init.kind = kind;
    AdapterSet set{init_adapter(net.layers[0], r, static_cast<double>(r), init, &c, eps)};
    cond_a = linalg::condition_number(set[0].a);
    Network copy = net;
    const TrainResult res = train_loop(copy, set, data, tc);
    first_norm = res.history.empty() ? std::nan("") : res.history.front().grad_norm_b;
    for (const auto& row : res.history) losses.push_back(row.loss);
    diverged = res.failure.has_value() ||
               std::any_of(losses.begin(), losses.end(), [](double l) { return !std::isfinite(l); });
  };
  run(InitKind::kTheoretical, report.grad_norm_theoretical, report.cond_theoretical_A,
      report.loss_theoretical, report.diverged_theoretical);
  run(InitKind::kWcSvd, report.grad_norm_approx, report.cond_approx_A, report.loss_approx,
      report.diverged_approx);
  return report;
}

}  // namespace tlora::analysis
