// SPDX-License-Identifier: Apache-2.0
//
// Executable forms of the frozen-A least-squares analysis: target matrices,
// the row-space objective J(A), the closed-form optimal B, subspace alignment
// between the practical and theoretical initializations, and a gradient
// stability probe on ill-conditioned covariances.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tlora/calibrate.hpp"
#include "tlora/model.hpp"

namespace tlora::analysis {

enum class TargetKind { kMDelta, kMProxy };

struct TargetMatrix {
  TargetKind kind = TargetKind::kMProxy;
  Matrix matrix;  // n x n, symmetric PSD
  std::string layer;
};

/// (X S)^T (X S) with S = (C + eps I)^{1/2}; X is the update for kMDelta and
/// the pretrained weight for kMProxy.
TargetMatrix target_matrix(TargetKind kind, const Matrix& x, const Matrix& c, double eps,
                           std::string layer = {});

/// Top-r eigenvectors of a symmetric PSD matrix as rows (r x n).
Matrix top_eigvecs(const Matrix& m, std::size_t r);

/// J(A) = Tr[A C D^T D C A^T (A C A^T)^{-1}]. Throws kSingularGram when
/// A C A^T is not numerically invertible.
double objective_J(const Matrix& a, const Matrix& c, const Matrix& delta);

struct OptimalB {
  Matrix b;
  double expected_loss = 0.0;
};

/// Population least-squares B for frozen A under W' = W0 + s B A and target
/// W0 + D with noise variance sigma2 per output:
///   B* = (1/s) D C A^T (A C A^T)^{-1}
///   loss = d_out sigma2 + Tr(D C D^T) - J(A)
OptimalB optimal_B_and_loss(const Matrix& a, const Matrix& c, const Matrix& delta,
                            double noise_var, std::size_t d_out, double scale);

/// A* = V_r^T C^{-1/2} with V_r the top-r eigenvectors of
/// (D C^{1/2})^T (D C^{1/2}); attains J(A*) = sum of the top-r eigenvalues.
/// C must already be positive definite (regularize first).
Matrix optimal_projection(const Matrix& c, const Matrix& delta, std::size_t r);

struct LayerAlignment {
  std::string layer;
  std::size_t r = 0;
  double phi_proxy_delta = 0.0;
  double phi_approx_theory = 0.0;
  std::vector<double> top_eig_proxy;
  std::vector<double> top_eig_delta;
  std::vector<double> covariance_spectrum;  // eigenvalues of C, descending
  double cond_c = 0.0;                      // of C + eps I
  bool near_degenerate = false;             // eigen-gap at index r too small to trust phi
};

struct AlignmentReport {
  std::vector<LayerAlignment> layers;
  double eps = 0.0;
  /// Free-form provenance of the deltas (which data/steps produced them).
  std::string delta_source;
};

/// `deltas` is indexed like net.layers (the full fine-tune output).
AlignmentReport alignment_report(const Network& net, const CalibrationStats& stats,
                                 const std::vector<Matrix>& deltas, std::size_t r, double eps);

/// d_i = s_i(a) - s_i(b) per module; module lists must match.
std::vector<std::pair<std::string, double>> importance_diff(const CalibrationStats& a,
                                                            const CalibrationStats& b);

struct ProbeConfig {
  std::size_t steps = 10;
  double lr = 1e-2;
  std::size_t n_samples = 256;
  double teacher_scale = 0.5;
  std::uint64_t seed = 42;
};

struct StabilityReport {
  double grad_norm_theoretical = 0.0;  // first step
  double grad_norm_approx = 0.0;       // first step
  double cond_theoretical_A = 0.0;
  double cond_approx_A = 0.0;
  double cond_inv_sqrt_factor = 0.0;   // cond of (C + eps I)^{-1/2}
  std::vector<double> loss_theoretical;
  std::vector<double> loss_approx;
  bool diverged_theoretical = false;
  bool diverged_approx = false;
};

/// Builds theoretical and wc_svd adapters for the single layer w0 under input
/// covariance c, then runs B-only SGD on a seeded teacher task whose inputs
/// are drawn from N(0, c).
StabilityReport stability_probe(const Matrix& w0, const Matrix& c, std::size_t r, double eps,
                                const ProbeConfig& cfg = {});

/// sqrt((l_max + eps) / (l_min + eps)): condition number of (C + eps I)^{-1/2}
/// for a spectrum with the given extremes.
double inv_sqrt_condition(double lambda_max, double lambda_min, double eps);

}  // namespace tlora::analysis
