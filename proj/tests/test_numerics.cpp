#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "blast/error.hpp"
#include "blast/numerics.hpp"
#include "support.hpp"

using namespace blast;
using namespace blast::testing;

namespace {

struct KnownSvd {
  Matrix a, u, v;
  Vector s;
};

// a = U diag(s) V^T with geometrically decaying, well separated s.
KnownSvd known_svd(Index rows, Index cols, Index m, std::uint64_t seed) {
  KnownSvd k;
  k.u = orthonormal(rows, m, seed);
  k.v = orthonormal(cols, m, seed + 1);
  k.s.resize(m);
  for (Index i = 0; i < m; ++i) k.s(i) = 10.0 * std::pow(0.8, static_cast<double>(i));
  k.a = k.u * k.s.asDiagonal() * k.v.transpose();
  return k;
}

void expect_matches(const KnownSvd& k, const SvdFactors& f, Index r, double tol) {
  ASSERT_EQ(f.rank(), r);
  for (Index i = 0; i < r; ++i) EXPECT_NEAR(f.singvals(i), k.s(i), tol * k.s(0));
  const Matrix pu = f.left * f.left.transpose();
  const Matrix pu_true = k.u.leftCols(r) * k.u.leftCols(r).transpose();
  EXPECT_LT(max_abs(pu - pu_true), tol);
  const Matrix pv = f.right * f.right.transpose();
  const Matrix pv_true = k.v.leftCols(r) * k.v.leftCols(r).transpose();
  EXPECT_LT(max_abs(pv - pv_true), tol);
  EXPECT_LT(max_abs(f.left.transpose() * f.left - Matrix::Identity(r, r)), tol);
  EXPECT_LT(max_abs(f.right.transpose() * f.right - Matrix::Identity(r, r)), tol);
  EXPECT_LT(max_abs(k.a * f.right - f.left * f.singvals.asDiagonal()), tol * k.s(0));
}

}  // namespace

TEST(TruncatedSvd, SmallDirect) {
  const auto k = known_svd(30, 20, 12, 1);
  expect_matches(k, truncated_svd(k.a, 5), 5, 1e-10);
}

TEST(TruncatedSvd, TallGramPath) {
  const auto k = known_svd(400, 150, 30, 2);
  expect_matches(k, truncated_svd(k.a, 10), 10, 1e-8);
}

TEST(TruncatedSvd, WideMatrix) {
  const auto k = known_svd(150, 400, 30, 3);
  expect_matches(k, truncated_svd(k.a, 10), 10, 1e-8);
}

TEST(TruncatedSvd, SubspacePath) {
  const auto k = known_svd(1200, 1100, 20, 4);
  expect_matches(k, truncated_svd(k.a, 5), 5, 1e-7);
}

TEST(TruncatedSvd, SignConvention) {
  const Matrix a = gaussian(50, 40, 5);
  const SvdFactors f = truncated_svd(a, 6);
  for (Index c = 0; c < f.right.cols(); ++c) {
    Index best;
    f.right.col(c).cwiseAbs().maxCoeff(&best);
    EXPECT_GT(f.right(best, c), 0.0);
  }
  const SvdFactors g = truncated_svd(-a, 6);
  EXPECT_LT(max_abs(f.right - g.right), 1e-10);
  EXPECT_LT(max_abs(f.left + g.left), 1e-10);
}

TEST(TruncatedSvd, RankOutOfRange) {
  const Matrix a = gaussian(10, 4, 6);
  EXPECT_THROW(truncated_svd(a, 0), DimensionError);
  EXPECT_THROW(truncated_svd(a, 5), DimensionError);
}

TEST(TruncatedSvd, RejectsNonFinite) {
  Matrix a = gaussian(10, 4, 7);
  a(3, 2) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(truncated_svd(a, 2), DataError);
}

TEST(Procrustes, RecoversRotation) {
  const Matrix a = gaussian(60, 4, 8);
  const Matrix q = orthonormal(4, 4, 9);
  const Matrix r = procrustes_rotation(a, a * q);
  EXPECT_LT(max_abs(r - q), 1e-10);
  EXPECT_LT(max_abs(r.transpose() * r - Matrix::Identity(4, 4)), 1e-12);
}

TEST(Procrustes, BeatsRandomRotations) {
  const Matrix a = gaussian(40, 3, 10);
  const Matrix b = gaussian(40, 3, 11);
  const double best = (a * procrustes_rotation(a, b) - b).norm();
  for (std::uint64_t t = 0; t < 200; ++t) {
    EXPECT_LE(best, (a * orthonormal(3, 3, 100 + t) - b).norm() + 1e-12);
  }
}

TEST(Procrustes, ShapeMismatch) {
  EXPECT_THROW(procrustes_rotation(Matrix(3, 2), Matrix(3, 3)), DimensionError);
  EXPECT_EQ(procrustes_rotation(Matrix(3, 0), Matrix(3, 0)).size(), 0);
}
