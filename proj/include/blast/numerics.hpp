#pragma once

// Dense linear-algebra kernels shared by the estimation pipeline.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "blast/error.hpp"
#include "blast/rng.hpp"

namespace blast {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline void require_finite(const Matrix& a, const std::string& what) {
  if (!a.allFinite()) throw DataError(what + " contains non-finite entries");
}

/// Leading singular triplets. `left` and `right` have orthonormal columns and
/// `singvals` is nonincreasing.
struct SvdFactors {
  Matrix left;
  Vector singvals;
  Matrix right;

  Index rank() const noexcept { return singvals.size(); }
  Matrix reconstruct() const {
    return left * singvals.asDiagonal() * right.transpose();
  }
};

namespace detail {

// Flips column pairs so that the largest-magnitude entry of every right
// singular vector is positive (lowest index wins ties).
inline void apply_sign_convention(SvdFactors& f) {
  for (Index c = 0; c < f.right.cols(); ++c) {
    Index best = 0;
    double best_abs = -1.0;
    for (Index i = 0; i < f.right.rows(); ++i) {
      const double v = std::abs(f.right(i, c));
      if (v > best_abs) {
        best_abs = v;
        best = i;
      }
    }
    if (f.right(best, c) < 0.0) {
      f.right.col(c) *= -1.0;
      f.left.col(c) *= -1.0;
    }
  }
}

inline Matrix orthonormalize(const Matrix& x) {
  Eigen::HouseholderQR<Matrix> qr(x);
  return qr.householderQ() * Matrix::Identity(x.rows(), x.cols());
}

// Finishes a decomposition from an approximate right basis q (n x b, b >= r):
// the thin SVD of a*q yields exactly orthonormal left vectors and the
// rotation that aligns q with the right singular vectors.
inline SvdFactors rayleigh_ritz(const Matrix& a, const Matrix& q, Index r) {
  const Matrix b = a * q;
  Eigen::JacobiSVD<Matrix> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdFactors f;
  f.left = svd.matrixU().leftCols(r);
  f.singvals = svd.singularValues().head(r);
  f.right = q * svd.matrixV().leftCols(r);
  return f;
}

inline SvdFactors svd_direct(const Matrix& a, Index r) {
  Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdFactors f;
  f.left = svd.matrixU().leftCols(r);
  f.singvals = svd.singularValues().head(r);
  f.right = svd.matrixV().leftCols(r);
  return f;
}

// Tall case (rows >= cols): eigendecomposition of the cols x cols Gram matrix.
inline SvdFactors svd_gram(const Matrix& a, Index r) {
  const Index n = a.cols();
  Matrix gram = Matrix::Zero(n, n);
  gram.selfadjointView<Eigen::Lower>().rankUpdate(a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram.selfadjointView<Eigen::Lower>());
  // Eigenvalues ascending; keep the top r eigenvectors in descending order.
  const Matrix q = eig.eigenvectors().rightCols(r).rowwise().reverse();
  return rayleigh_ritz(a, q, r);
}

// Tall case, blocked subspace iteration with Rayleigh-Ritz extraction.
// Returns false when the residual test is not met within the budget.
inline bool svd_subspace(const Matrix& a, Index r, SvdFactors& out,
                         int max_iter = 500) {
  const Index n = a.cols();
  const Index block = std::min<Index>(n, r + std::max<Index>(10, r));
  auto stream = derive_stream(0x5bd1e995ULL, {"truncated_svd", "start"});
  Matrix q(n, block);
  for (Index j = 0; j < block; ++j)
    for (Index i = 0; i < n; ++i) q(i, j) = stream.normal();
  q = orthonormalize(q);
  for (int it = 0; it < max_iter; ++it) {
    q = orthonormalize(a.transpose() * (a * q));
    SvdFactors f = rayleigh_ritz(a, q, r);
    if (f.singvals(0) == 0.0) {
      out = std::move(f);
      return true;
    }
    const Matrix resid = a.transpose() * f.left - f.right * f.singvals.asDiagonal();
    if (resid.colwise().norm().maxCoeff() <= 1e-11 * f.singvals(0)) {
      out = std::move(f);
      return true;
    }
  }
  return false;
}

inline SvdFactors svd_tall(const Matrix& a, Index r) {
  const Index n = a.cols();
  if (n <= 64) return svd_direct(a, r);
  if (n > 1024 && r * 8 <= n) {
    SvdFactors f;
    if (svd_subspace(a, r, f)) return f;
  }
  if (n <= 4096) return svd_gram(a, r);
  SvdFactors f;
  if (svd_subspace(a, r, f, 5000)) return f;
  throw NumericalError("truncated_svd: subspace iteration did not converge");
}

}  // namespace detail

/// Top-r singular triplets of `a` with a deterministic sign convention.
/// Small problems use a direct bidiagonal SVD; tall problems go through the
/// cols x cols Gram matrix (or blocked subspace iteration when r is small
/// relative to the short side), so memory stays O(min(m, n)^2).
inline SvdFactors truncated_svd(const Matrix& a, Index r) {
  const Index lo = std::min(a.rows(), a.cols());
  if (r < 1 || r > lo) {
    throw DimensionError("truncated_svd: rank " + std::to_string(r) +
                         " outside [1, " + std::to_string(lo) + "]");
  }
  require_finite(a, "truncated_svd input");
  SvdFactors f;
  if (a.rows() >= a.cols()) {
    f = detail::svd_tall(a, r);
  } else {
    const Matrix at = a.transpose();
    SvdFactors t = detail::svd_tall(at, r);
    f.left = std::move(t.right);
    f.singvals = std::move(t.singvals);
    f.right = std::move(t.left);
  }
  detail::apply_sign_convention(f);
  return f;
}

/// Orthogonal R minimizing ||a R - b||_F.
inline Matrix procrustes_rotation(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("procrustes_rotation: shape mismatch");
  }
  if (a.cols() == 0) return Matrix(0, 0);
  Eigen::JacobiSVD<Matrix> svd(a.transpose() * b,
                               Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

}  // namespace blast
