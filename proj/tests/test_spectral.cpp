#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "blast/error.hpp"
#include "blast/evalsim.hpp"
#include "blast/spectral.hpp"
#include "support.hpp"

using namespace blast;
using namespace blast::testing;

TEST(StudyRightBasis, MatchesDenseSvd) {
  const Matrix y = gaussian(80, 30, 1) + gaussian(80, 3, 2) * gaussian(3, 30, 3) * 3.0;
  const Matrix v = study_right_basis(y, 3);
  Eigen::JacobiSVD<Matrix> svd(y, Eigen::ComputeThinV);
  const Matrix v_true = svd.matrixV().leftCols(3);
  EXPECT_LT(max_abs(v * v.transpose() - v_true * v_true.transpose()), 1e-10);
  EXPECT_LT(max_abs(v.transpose() * v - Matrix::Identity(3, 3)), 1e-12);
}

TEST(StudyRightBasis, RankTooLarge) {
  EXPECT_THROW(study_right_basis(gaussian(5, 10, 4), 6), DimensionError);
}

TEST(SharedBasis, SpectrumMatchesExplicitProjectorAverage) {
  std::vector<Matrix> bases = {orthonormal(25, 4, 1), orthonormal(25, 6, 2), orthonormal(25, 5, 3)};
  Matrix avg = Matrix::Zero(25, 25);
  for (const auto& v : bases) avg += v * v.transpose() / 3.0;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(avg);
  const Vector ev = eig.eigenvalues().reverse();
  const SharedBasis sb = shared_basis(bases, 2);
  ASSERT_EQ(sb.spectrum.size(), 15);
  for (Index i = 0; i < 15; ++i) EXPECT_NEAR(sb.spectrum(i), ev(i), 1e-10);
  const Matrix top = eig.eigenvectors().rightCols(2);
  EXPECT_LT(max_abs(sb.v_bar * sb.v_bar.transpose() - top * top.transpose()), 1e-8);
}

TEST(SharedBasis, WeightsMatchExplicitWeightedAverage) {
  std::vector<Matrix> bases = {orthonormal(20, 3, 4), orthonormal(20, 3, 5)};
  const std::vector<double> w = {0.8, 0.2};
  Matrix avg = 0.8 * bases[0] * bases[0].transpose() + 0.2 * bases[1] * bases[1].transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(avg);
  const SharedBasis sb = shared_basis(bases, 1, w);
  for (Index i = 0; i < 6; ++i) EXPECT_NEAR(sb.spectrum(i), eig.eigenvalues()(19 - i), 1e-10);
}

TEST(SharedBasis, CommonSubspaceGivesUnitSpectrum) {
  const Matrix common = orthonormal(30, 7, 6);
  std::vector<Matrix> bases = {common.leftCols(5), common.leftCols(3) * orthonormal(3, 3, 7)};
  bases[1].conservativeResize(30, 5);
  bases[1].rightCols(2) = common.rightCols(2);
  const SharedBasis sb = shared_basis(bases, 3);
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(sb.spectrum(i), 1.0, 1e-12);
  EXPECT_NEAR(sb.spectrum(3), 0.5, 1e-12);
  const Matrix c3 = common.leftCols(3);
  EXPECT_LT(max_abs(sb.v_bar * sb.v_bar.transpose() - c3 * c3.transpose()), 1e-10);
}

TEST(SharedBasis, K0ExceedsSmallestBasis) {
  std::vector<Matrix> bases = {orthonormal(10, 2, 1), orthonormal(10, 4, 2)};
  EXPECT_THROW(shared_basis(bases, 3), DimensionError);
}

TEST(SpecificFactors, MatchesExplicitProjectedSvd) {
  const Matrix y = gaussian(60, 20, 8);
  const Matrix v_bar = orthonormal(20, 3, 9);
  const SpecificFactors sf = specific_factors(y, v_bar, 2);
  const Matrix y_perp = y * (Matrix::Identity(20, 20) - v_bar * v_bar.transpose());
  Eigen::JacobiSVD<Matrix> svd(y_perp, Eigen::ComputeThinU);
  const Matrix u = svd.matrixU().leftCols(2);
  EXPECT_LT(max_abs(sf.u_perp * sf.u_perp.transpose() - u * u.transpose()), 1e-10);
  EXPECT_LT(max_abs(sf.f_hat.transpose() * sf.f_hat - 60.0 * Matrix::Identity(2, 2)), 1e-9);
}

TEST(SpecificFactors, ZeroAndOutOfRange) {
  const Matrix y = gaussian(10, 6, 10);
  const Matrix v_bar = orthonormal(6, 2, 11);
  EXPECT_EQ(specific_factors(y, v_bar, 0).f_hat.cols(), 0);
  EXPECT_THROW(specific_factors(y, v_bar, 7), DimensionError);
  EXPECT_THROW(specific_factors(y, orthonormal(5, 2, 1), 1), DimensionError);
}

TEST(EstimateFactors, StructuralInvariants) {
  const auto data = low_rank_studies(3, 80, 40, 3, 2, 0.5, 12);
  const auto dims = LatentDims::from_shared_and_specific(3, {2, 2, 2});
  const FactorEstimates fe = estimate_factors(data, dims);
  const double n = 240.0;
  EXPECT_LT(max_abs(fe.m_hat.transpose() * fe.m_hat - n * Matrix::Identity(3, 3)), 1e-8 * n);
  for (Index s = 0; s < 3; ++s) {
    const Matrix& f = fe.f_hat_s[static_cast<std::size_t>(s)];
    EXPECT_LT(max_abs(f.transpose() * f - 80.0 * Matrix::Identity(2, 2)), 1e-8 * 80);
    EXPECT_LT(max_abs(fe.m_hat_s(s).transpose() * f), 1e-8 * n);
  }
  // Y_c is the data with the specific directions regressed out study by study.
  for (Index s = 0; s < 3; ++s) {
    const auto& u = fe.u_perp_s[static_cast<std::size_t>(s)];
    const Matrix& y = data.studies[static_cast<std::size_t>(s)];
    EXPECT_LT(max_abs(fe.y_c_s(s) - (y - u * (u.transpose() * y))), 1e-10);
  }
  // M_hat = sqrt(n) U_c with U_c the top-k0 left singular vectors of Y_c.
  Eigen::JacobiSVD<Matrix> svd(fe.y_c, Eigen::ComputeThinU);
  const Matrix u = svd.matrixU().leftCols(3);
  EXPECT_LT(max_abs(fe.u_c * fe.u_c.transpose() - u * u.transpose()), 1e-8);
  EXPECT_LT(max_abs(fe.m_hat - std::sqrt(n) * fe.u_c), 1e-12);
}

TEST(EstimateFactors, RecoversSimulatedFactors) {
  SimScenario sc = SimScenario::uniform(3, 300, 200, 5, 4, 21);
  auto [data, truth] = generate(sc);
  const FactorEstimates fe = estimate_factors(data, sc.dims());
  for (Index s = 0; s < 3; ++s) {
    const auto su = static_cast<std::size_t>(s);
    EXPECT_LT(procrustes_error(fe.m_hat_s(s), truth.m0_s[su]), 0.35);
    EXPECT_LT(procrustes_error(fe.f_hat_s[su], truth.f0_s[su]), 0.35);
  }
}

TEST(EstimateFactors, ZeroSpecificRank) {
  const auto data = low_rank_studies(2, 50, 20, 2, 0, 0.3, 13);
  const FactorEstimates fe = estimate_factors(data, LatentDims::from_shared_and_specific(2, {0, 0}));
  EXPECT_EQ(fe.f_hat_s[0].cols(), 0);
  Matrix stacked(100, 20);
  stacked << data.studies[0], data.studies[1];
  EXPECT_LT(max_abs(fe.y_c - stacked), 1e-14);
}

TEST(EstimateFactors, DimensionErrors) {
  const auto data = low_rank_studies(2, 30, 10, 2, 1, 0.3, 14);
  EXPECT_THROW(estimate_factors(data, LatentDims::from_shared_and_specific(2, {1})),
               DimensionError);
  auto bad = LatentDims::from_shared_and_specific(2, {1, 1});
  bad.k_s[1] = 4;
  EXPECT_THROW(estimate_factors(data, bad), DimensionError);
  EXPECT_THROW(estimate_factors(data, LatentDims::from_shared_and_specific(2, {9, 1})),
               DimensionError);
  EXPECT_THROW(estimate_factors(data, LatentDims::from_shared_and_specific(0, {1, 1})),
               DimensionError);
}

TEST(EstimateFactors, ThreadCountDoesNotChangeResult) {
  const auto data = low_rank_studies(4, 60, 30, 2, 2, 0.5, 15);
  const auto dims = LatentDims::from_shared_and_specific(2, {2, 2, 2, 2});
  const auto a = estimate_factors(data, dims, {ProjectionWeighting::kUniform, 1});
  const auto b = estimate_factors(data, dims, {ProjectionWeighting::kUniform, 4});
  EXPECT_EQ(a.m_hat, b.m_hat);
  for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(a.f_hat_s[s], b.f_hat_s[s]);
}

TEST(EstimateFactors, SampleSizeWeightingEqualSizes) {
  const auto data = low_rank_studies(3, 40, 25, 2, 1, 0.5, 16);
  const auto dims = LatentDims::from_shared_and_specific(2, {1, 1, 1});
  const auto a = estimate_factors(data, dims, {ProjectionWeighting::kUniform, 1});
  const auto b = estimate_factors(data, dims, {ProjectionWeighting::kBySampleSize, 1});
  EXPECT_LT(max_abs(a.m_hat - b.m_hat), 1e-8);
}

TEST(Dataset, ValidationErrors) {
  MultiStudyDataset d;
  EXPECT_THROW(d.validate(), DataError);
  d.studies = {gaussian(5, 3, 1), gaussian(5, 4, 2)};
  EXPECT_THROW(d.validate(), DataError);
  d.studies = {gaussian(1, 3, 1)};
  EXPECT_THROW(d.validate(), DataError);
  d.studies = {gaussian(5, 3, 1)};
  d.studies[0](0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(d.validate(), DataError);
}

TEST(Dataset, CenterColumns) {
  MultiStudyDataset d;
  d.studies = {gaussian(20, 4, 3).array() + 5.0, gaussian(10, 4, 4).array() - 2.0};
  const auto c = center_columns(d);
  for (const auto& y : c.studies) EXPECT_LT(y.colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
}
