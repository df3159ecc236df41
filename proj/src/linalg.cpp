// SPDX-License-Identifier: Apache-2.0
#include "tlora/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tlora/rng.hpp"

namespace tlora {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidInput: return "InvalidInput";
    case ErrorCode::kNumericalFailure: return "NumericalFailure";
    case ErrorCode::kInvalidRank: return "InvalidRank";
    case ErrorCode::kNotPsd: return "NotPSD";
    case ErrorCode::kMissingCovariance: return "MissingCovariance";
    case ErrorCode::kInfeasibleBudget: return "InfeasibleBudget";
    case ErrorCode::kDegenerateImportance: return "DegenerateImportance";
    case ErrorCode::kSingularGram: return "SingularGram";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

namespace linalg {
namespace {

using ColMajor = Eigen::MatrixXd;

Matrix symmetrize_checked(const Matrix& c) {
  if (c.rows() != c.cols() || c.rows() == 0) {
    throw Error(ErrorCode::kInvalidInput, "expected a non-empty square matrix, got " +
                                              std::to_string(c.rows()) + "x" +
                                              std::to_string(c.cols()));
  }
  require_finite(c, "symmetric input");
  const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
  const double asym = (c - c.transpose()).cwiseAbs().maxCoeff();
  if (asym > kSymmetryTol * scale) {
    throw Error(ErrorCode::kInvalidInput,
                "matrix not symmetric (max |C - C^T| = " + std::to_string(asym) + ")");
  }
  return 0.5 * (c + c.transpose());
}

// Eigen-decomposition with a clear NotPSD signal; eigenvalues returned
// descending and clamped.
EighResult eigh_impl(const Matrix& c, bool require_psd) {
  const Matrix sym = symmetrize_checked(c);
  Eigen::SelfAdjointEigenSolver<ColMajor> solver(ColMajor(sym), Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorCode::kNumericalFailure, "symmetric eigensolver did not converge");
  }
  const Eigen::Index n = sym.rows();
  const Vector asc = solver.eigenvalues();
  const double tol = kPsdClampTol * std::max(1.0, asc.cwiseAbs().maxCoeff());

  EighResult out;
  out.spectrum.eigenvalues.resize(n);
  out.eigvecs.resize(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index src = n - 1 - j;
    double lambda = asc(src);
    if (lambda < 0.0) {
      if (lambda >= -tol) {
        lambda = 0.0;
      } else if (require_psd) {
        throw Error(ErrorCode::kNotPsd,
                    "negative eigenvalue " + std::to_string(lambda) + " beyond tolerance");
      }
    }
    out.spectrum.eigenvalues(j) = lambda;
    out.eigvecs.col(j) = solver.eigenvectors().col(src);
  }
  // Fixed sign per eigenvector, same rule as the SVD.
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double a = std::abs(out.eigvecs(i, j));
      if (a > best) {
        best = a;
        arg = i;
      }
    }
    if (out.eigvecs(arg, j) < 0.0) out.eigvecs.col(j) *= -1.0;
  }
  const double top = out.spectrum.eigenvalues(0);
  const double bottom = out.spectrum.eigenvalues(n - 1);
  if (bottom > 0.0) {
    out.spectrum.condition_number = top / bottom;
  } else {
    out.spectrum.condition_number =
        top > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  }
  return out;
}

Matrix spectral_map(const EighResult& e, double (*f)(double, double), double param) {
  const Eigen::Index n = e.eigvecs.rows();
  Vector mapped(n);
  for (Eigen::Index j = 0; j < n; ++j) mapped(j) = f(e.spectrum.eigenvalues(j), param);
  Matrix out = e.eigvecs * mapped.asDiagonal() * e.eigvecs.transpose();
  return 0.5 * (out + out.transpose());
}

}  // namespace

bool all_finite(const Matrix& m) { return m.allFinite(); }

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw Error(ErrorCode::kInvalidInput, std::string(what) + " contains NaN or Inf");
  }
}

SvdResult svd_thin(const Matrix& m) {
  if (m.rows() < 1 || m.cols() < 1) {
    throw Error(ErrorCode::kInvalidInput, "svd_thin needs a non-empty matrix");
  }
  require_finite(m, "svd_thin input");
  Eigen::JacobiSVD<ColMajor, Eigen::ColPivHouseholderQRPreconditioner> svd(
      ColMajor(m), Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) {
    throw Error(ErrorCode::kNumericalFailure, "Jacobi SVD did not converge");
  }
  SvdResult out;
  out.u = svd.matrixU();
  out.s = svd.singularValues();
  Matrix v = svd.matrixV();
  const Eigen::Index k = out.s.size();
  for (Eigen::Index j = 0; j < k; ++j) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      const double a = std::abs(v(i, j));
      if (a > best) {
        best = a;
        arg = i;
      }
    }
    if (v(arg, j) < 0.0) {
      v.col(j) *= -1.0;
      out.u.col(j) *= -1.0;
    }
  }
  out.vt = v.transpose();
  if (!out.u.allFinite() || !out.vt.allFinite() || !out.s.allFinite()) {
    throw Error(ErrorCode::kNumericalFailure, "SVD produced non-finite factors");
  }
  return out;
}

Matrix top_r_right(const Matrix& m, std::size_t r) {
  const auto k = static_cast<std::size_t>(std::min(m.rows(), m.cols()));
  if (r < 1 || r > k) {
    throw Error(ErrorCode::kInvalidRank, "rank " + std::to_string(r) + " outside [1, " +
                                             std::to_string(k) + "]");
  }
  return svd_thin(m).vt.topRows(static_cast<Eigen::Index>(r));
}

EighResult eigh_psd(const Matrix& c) { return eigh_impl(c, /*require_psd=*/false); }

Matrix psd_sqrt(const Matrix& c) {
  return spectral_map(
      eigh_impl(c, /*require_psd=*/true), [](double l, double) { return std::sqrt(l); }, 0.0);
}

Matrix psd_inv_sqrt_reg(const Matrix& c, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorCode::kInvalidInput, "eps must be positive");
  return spectral_map(
      eigh_impl(c, /*require_psd=*/true),
      [](double l, double e) { return 1.0 / std::sqrt(l + e); }, eps);
}

double subspace_similarity(const Matrix& u1, const Matrix& u2) {
  if (u1.rows() != u2.rows() || u1.cols() != u2.cols() || u1.rows() == 0) {
    throw Error(ErrorCode::kInvalidInput, "subspace_similarity shape mismatch");
  }
  if (row_orthonormality_error(u1) > kOrthonormalTol ||
      row_orthonormality_error(u2) > kOrthonormalTol) {
    throw Error(ErrorCode::kInvalidInput, "subspace_similarity needs orthonormal rows");
  }
  const double phi = (u1 * u2.transpose()).squaredNorm() / static_cast<double>(u1.rows());
  return std::clamp(phi, 0.0, 1.0);
}

Matrix rowspace_projector(const Matrix& a, double rel_tol) {
  const SvdResult svd = svd_thin(a);
  const double smax = svd.s.size() ? svd.s(0) : 0.0;
  Eigen::Index rank = 0;
  while (rank < svd.s.size() && svd.s(rank) > rel_tol * smax && svd.s(rank) > 0.0) ++rank;
  const Matrix v = svd.vt.topRows(rank);
  return v.transpose() * v;
}

double condition_number(const Matrix& m) {
  const Vector s = svd_thin(m).s;
  const double lo = s(s.size() - 1);
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return s(0) / lo;
}

double row_orthonormality_error(const Matrix& a) {
  const Matrix gram = a * a.transpose();
  return (gram - Matrix::Identity(a.rows(), a.rows())).cwiseAbs().maxCoeff();
}

Matrix logspace_covariance(std::size_t n, double lambda_max, double lambda_min,
                           std::uint64_t rotation_seed) {
  if (n == 0 || !(lambda_max >= lambda_min) || !(lambda_min > 0.0)) {
    throw Error(ErrorCode::kInvalidInput, "logspace spectrum needs lambda_max >= lambda_min > 0");
  }
  Vector spectrum(static_cast<Eigen::Index>(n));
  const double hi = std::log10(lambda_max);
  const double lo = std::log10(lambda_min);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    spectrum(static_cast<Eigen::Index>(i)) = std::pow(10.0, hi + t * (lo - hi));
  }
  if (rotation_seed == 0) return Matrix(spectrum.asDiagonal());
  Rng rng(rotation_seed);
  const Matrix r = rng.orthogonal(n);
  Matrix c = r.transpose() * spectrum.asDiagonal() * r;
  return 0.5 * (c + c.transpose());
}

}  // namespace linalg
}  // namespace tlora
