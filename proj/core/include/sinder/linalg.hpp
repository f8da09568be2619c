// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace sinder::linalg {

// All arithmetic is 64-bit; checkpoints are widened on load.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Svd {
  Matrix U;  // rows x r, orthonormal columns
  Vector S;  // r, non-negative, non-increasing
  Matrix V;  // cols x r, orthonormal columns
};

/// Thin SVD. Throws InvalidInput on non-finite input and NumericalFailure
/// when the reconstruction residual exceeds 1e-8 relative Frobenius.
Svd svd(const Matrix& m);

/// Singular values only, non-increasing.
Vector singular_values(const Matrix& m);

struct LeadingVector {
  Vector u;            // unit norm, largest-magnitude entry positive
  double sigma1 = 0;   // leading singular value
  double sigma2 = 0;   // second singular value (0 when rank-1 shaped)
  int iterations = 0;  // power iterations used
  bool fell_back = false;       // power iteration exhausted, full SVD used
  bool near_degenerate = false; // sigma1 - sigma2 <= 1e-6 * sigma1
};

/// Leading left singular vector by power iteration on m*m^T started from the
/// normalized all-ones vector. `tol` bounds ||m m^T u - s1^2 u|| relative to
/// s1^2. Throws DegenerateMatrix for a zero matrix.
LeadingVector leading_left_singular_vector(const Matrix& m, double tol = 1e-13,
                                           int max_iter = 20000);

struct LeastSquares {
  Matrix C;
  double residual = 0;           // ||C X - Y||_F
  double relative_residual = 0;  // residual / ||Y||_F
  bool rank_deficient = false;
};

/// Solves min ||C X - Y||_F for C (X: D x N, Y: M x N). Rank-deficient X
/// yields the minimum-norm solution with the flag set.
LeastSquares least_squares(const Matrix& X, const Matrix& Y);

/// 3x3 kernel proportional to exp(-(dx^2+dy^2)/(2 sigma^2)), summing to one.
Matrix gaussian_kernel_3x3(double sigma);

/// arccos(|u.v| / (|u||v|)) in degrees, within [0, 90].
double acute_angle(const Vector& u, const Vector& v);

/// Flips sign so the largest-magnitude entry is positive.
void canonicalize_sign(Vector& v);

bool all_finite(const Matrix& m);

/// Deterministic standard-normal matrix from a 64-bit seed.
Matrix random_normal(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed);

}  // namespace sinder::linalg
