// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit linear algebra used by every other module. All functions are
// pure; the Eigen solvers underneath are deterministic for a fixed input.
#pragma once

#include <cstddef>
#include <cstdint>

#include <Eigen/Dense>

#include "tlora/error.hpp"

namespace tlora {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Thin SVD M = U diag(s) Vt with k = min(rows, cols).
struct SvdResult {
  Matrix u;   // rows x k
  Vector s;   // k, non-increasing
  Matrix vt;  // k x cols
};

struct Spectrum {
  Vector eigenvalues;  // descending
  double condition_number = 1.0;
};

struct EighResult {
  Spectrum spectrum;
  Matrix eigvecs;  // columns, same order as spectrum.eigenvalues
};

namespace linalg {

inline constexpr double kSymmetryTol = 1e-10;
inline constexpr double kPsdClampTol = 1e-10;
inline constexpr double kOrthonormalTol = 1e-8;
inline constexpr double kDefaultEps = 1e-6;

bool all_finite(const Matrix& m);
void require_finite(const Matrix& m, const char* what);

/// Singular vectors follow a fixed sign convention: in each right singular
/// vector the entry of largest magnitude is positive (lowest index on ties).
SvdResult svd_thin(const Matrix& m);

/// First r rows of svd_thin(m).vt. Throws kInvalidRank unless 1 <= r <= min(rows, cols).
Matrix top_r_right(const Matrix& m, std::size_t r);

/// Symmetric eigendecomposition of a PSD matrix. The input is symmetrized as
/// (C + C^T) / 2; eigenvalues in [-tol, 0) are clamped to zero, where tol
/// scales with max(1, largest eigenvalue magnitude).
EighResult eigh_psd(const Matrix& c);

/// Symmetric PSD square root. Throws kNotPsd on a clearly negative eigenvalue.
Matrix psd_sqrt(const Matrix& c);

/// (C + eps I)^{-1/2}.
Matrix psd_inv_sqrt_reg(const Matrix& c, double eps = kDefaultEps);

/// phi = ||U1 U2^T||_F^2 / r for two r x n matrices with orthonormal rows.
double subspace_similarity(const Matrix& u1, const Matrix& u2);

/// Orthogonal projector onto the row space of a (a^+ a). Singular values
/// below rel_tol * s_max are treated as zero.
Matrix rowspace_projector(const Matrix& a, double rel_tol = 1e-12);

/// Largest over smallest singular value; +inf when rank deficient.
double condition_number(const Matrix& m);

/// ||a a^T - I||_max; 0 for orthonormal rows.
double row_orthonormality_error(const Matrix& a);

/// Symmetric matrix with eigenvalues logspaced from lambda_max down to
/// lambda_min, rotated by a seeded Haar-random orthogonal matrix
/// (identity rotation when seed is 0).
Matrix logspace_covariance(std::size_t n, double lambda_max, double lambda_min,
                           std::uint64_t rotation_seed);

}  // namespace linalg
}  // namespace tlora
