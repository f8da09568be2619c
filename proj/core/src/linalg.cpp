// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include "sinder/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "sinder/error.hpp"

namespace sinder {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::InvalidInput: return "InvalidInput";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
    case ErrorKind::DegenerateMatrix: return "DegenerateMatrix";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::NoDefects: return "NoDefects";
  }
  return "Unknown";
}

}  // namespace sinder

namespace sinder::linalg {
namespace {

constexpr double kReconstructionTol = 1e-8;
// Relative gap below which the leading singular pair is reported ambiguous.
constexpr double kDegenerateGap = 1e-6;

void require_finite(const Matrix& m, const char* who) {
  if (m.size() == 0) {
    fail(ErrorKind::InvalidInput, std::string(who) + ": empty matrix");
  }
  if (!all_finite(m)) {
    fail(ErrorKind::InvalidInput, std::string(who) + ": non-finite entry");
  }
}

}  // namespace

bool all_finite(const Matrix& m) { return m.allFinite(); }

Svd svd(const Matrix& m) {
  require_finite(m, "svd");
  Eigen::JacobiSVD<Matrix> solver(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Svd out{solver.matrixU(), solver.singularValues(), solver.matrixV()};

  const double norm = m.norm();
  const double residual =
      (out.U * out.S.asDiagonal() * out.V.transpose() - m).norm();
  if (residual > kReconstructionTol * std::max(norm, 1e-300) && norm > 0) {
    std::ostringstream msg;
    msg << "svd: reconstruction residual " << residual << " exceeds "
        << kReconstructionTol << " * " << norm;
    fail(ErrorKind::NumericalFailure, msg.str());
  }
  return out;
}

Vector singular_values(const Matrix& m) {
  require_finite(m, "singular_values");
  return Eigen::JacobiSVD<Matrix>(m).singularValues();
}

void canonicalize_sign(Vector& v) {
  if (v.size() == 0) return;
  Eigen::Index idx = 0;
  v.cwiseAbs().maxCoeff(&idx);
  if (v[idx] < 0) v = -v;
}

LeadingVector leading_left_singular_vector(const Matrix& m, double tol,
                                           int max_iter) {
  require_finite(m, "leading_left_singular_vector");
  const Vector sv = singular_values(m);
  LeadingVector out;
  out.sigma1 = sv[0];
  out.sigma2 = sv.size() > 1 ? sv[1] : 0.0;
  if (out.sigma1 == 0.0) {
    fail(ErrorKind::DegenerateMatrix,
         "leading_left_singular_vector: zero matrix has no leading direction");
  }
  out.near_degenerate = (out.sigma1 - out.sigma2) <= kDegenerateGap * out.sigma1;

  const Matrix gram = m * m.transpose();
  Vector u = Vector::Ones(m.rows()).normalized();
  Vector next(m.rows());
  bool converged = false;
  for (int it = 0; it < max_iter; ++it) {
    next.noalias() = gram * u;
    const double lambda = u.dot(next);
    if (lambda > 0 && (next - lambda * u).norm() <= tol * lambda) {
      // An eigenpair below the top one means the start vector had no
      // component along the leading direction.
      const double top = out.sigma1 * out.sigma1;
      converged = std::abs(lambda - top) <= 1e-8 * top;
      if (!converged) break;
      out.iterations = it;
      break;
    }
    const double n = next.norm();
    if (n == 0.0) break;  // start vector orthogonal to the range
    u = next / n;
  }

  if (!converged) {
    out.fell_back = true;
    out.iterations = max_iter;
    u = svd(m).U.col(0);
  }
  canonicalize_sign(u);
  out.u = u;
  return out;
}

LeastSquares least_squares(const Matrix& X, const Matrix& Y) {
  require_finite(X, "least_squares");
  require_finite(Y, "least_squares");
  if (X.cols() != Y.cols()) {
    fail(ErrorKind::InvalidInput, "least_squares: X and Y sample counts differ");
  }
  if (X.cols() < X.rows()) {
    fail(ErrorKind::InvalidInput, "least_squares: need at least D samples");
  }
  // C X = Y  <=>  X^T C^T = Y^T
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(X.transpose());
  LeastSquares out;
  out.C = cod.solve(Y.transpose()).transpose();
  out.rank_deficient = cod.rank() < X.rows();
  out.residual = (out.C * X - Y).norm();
  const double ynorm = Y.norm();
  out.relative_residual = ynorm > 0 ? out.residual / ynorm : out.residual;
  return out;
}

Matrix gaussian_kernel_3x3(double sigma) {
  if (!(sigma > 0) || !std::isfinite(sigma)) {
    fail(ErrorKind::InvalidInput, "gaussian_kernel_3x3: sigma must be positive");
  }
  Matrix k(3, 3);
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      k(dy + 1, dx + 1) = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    }
  }
  return k / k.sum();
}

double acute_angle(const Vector& u, const Vector& v) {
  if (u.size() != v.size()) {
    fail(ErrorKind::InvalidInput, "acute_angle: dimension mismatch");
  }
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) {
    fail(ErrorKind::InvalidInput, "acute_angle: zero vector");
  }
  const double c = std::clamp(std::abs(u.dot(v)) / (nu * nv), 0.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  // Fill row-major so the stream order is independent of storage order.
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

}  // namespace sinder::linalg
