// Randomized property checks. Each property runs over many instances drawn
// from a seeded generator, so a failure names the seed that reproduces it.

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "blast/config.hpp"
#include "blast/error.hpp"
#include "blast/evalsim.hpp"
#include "blast/io.hpp"
#include "blast/posterior.hpp"
#include "blast/ranks.hpp"
#include "support.hpp"

using namespace blast;
using namespace blast::testing;

namespace {

/// Seeded source of random shapes and values for one property instance.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : seed_(seed), st_(derive_stream(seed, {"property"})) {}

  Index size(Index lo, Index hi) {
    return lo + static_cast<Index>(st_.uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
  }
  double real(double lo, double hi) { return lo + (hi - lo) * st_.uniform(); }
  Matrix matrix(Index rows, Index cols, double sd = 1.0) {
    return gaussian(rows, cols, st_.substream({"m", counter_++}), sd);
  }
  Matrix orthogonal(Index n) {
    Eigen::HouseholderQR<Matrix> qr(matrix(n, n));
    return qr.householderQ() * Matrix::Identity(n, n);
  }
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  RngStream st_;
  std::uint64_t counter_ = 0;
};

constexpr std::uint64_t kInstances = 50;

}  // namespace

// ---------------------------------------------------------------------------
// Numerics

TEST(Property, TruncatedSvdIsEckartYoungOptimal) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(i);
    const Index n = g.size(3, 40), p = g.size(3, 40);
    const Index r = g.size(1, std::min(n, p));
    const Matrix a = g.matrix(n, p);
    const SvdFactors f = truncated_svd(a, r);
    Eigen::JacobiSVD<Matrix> full(a);
    const Vector sv = full.singularValues();
    const double tail = std::sqrt(sv.tail(sv.size() - r).squaredNorm());
    EXPECT_NEAR((a - f.reconstruct()).norm(), tail, 1e-9 * (1.0 + sv(0))) << "seed " << i;
    EXPECT_LT(max_abs(f.singvals - sv.head(r)), 1e-9 * sv(0)) << "seed " << i;
    // No other rank-r projection does better.
    const Matrix q = g.matrix(p, r).householderQr().householderQ() * Matrix::Identity(p, r);
    EXPECT_GE((a - a * q * q.transpose()).norm(), tail - 1e-9) << "seed " << i;
  }
}

TEST(Property, SingularValuesMatchGramEigenvalues) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(100 + i);
    const Index n = g.size(2, 30), p = g.size(2, 12);
    const Matrix a = g.matrix(n, p);
    const Index r = std::min(n, p);
    Eigen::SelfAdjointEigenSolver<Matrix> es(a.transpose() * a);
    Vector ev = es.eigenvalues().reverse().head(r).cwiseMax(0.0);
    const SvdFactors f = truncated_svd(a, r);
    EXPECT_LT(max_abs(f.singvals.cwiseProduct(f.singvals) - ev), 1e-9 * (1.0 + ev(0)))
        << "seed " << i;
  }
}

TEST(Property, ProcrustesIsOptimalAndOrthogonal) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(200 + i);
    const Index m = g.size(3, 20), r = g.size(1, 3);
    const Matrix a = g.matrix(m, r), b = g.matrix(m, r);
    const Matrix rot = procrustes_rotation(a, b);
    EXPECT_LT(max_abs(rot.transpose() * rot - Matrix::Identity(r, r)), 1e-10);
    const double best = (a * rot - b).norm();
    for (int c = 0; c < 20; ++c) EXPECT_LE(best, (a * g.orthogonal(r) - b).norm() + 1e-10);
  }
}

// ---------------------------------------------------------------------------
// Spectral estimation

TEST(Property, RightBasisIgnoresRowTransforms) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(300 + i);
    const Index n = g.size(5, 25), p = g.size(3, 15), k = g.size(1, std::min(n, p) - 1);
    const Matrix y = g.matrix(n, p);
    const Matrix v1 = study_right_basis(y, k);
    const Matrix v2 = study_right_basis(g.orthogonal(n) * y, k);
    EXPECT_LT(max_abs(v1 * v1.transpose() - v2 * v2.transpose()), 1e-8) << "seed " << i;
  }
}

TEST(Property, SpectrumLiesInUnitInterval) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(400 + i);
    const Index S = g.size(1, 4), p = g.size(4, 20);
    std::vector<Matrix> bases;
    Index min_k = p;
    for (Index s = 0; s < S; ++s) {
      const Index k = g.size(1, p - 1);
      min_k = std::min(min_k, k);
      bases.push_back(g.matrix(p, k).householderQr().householderQ() * Matrix::Identity(p, k));
    }
    const SharedBasis sb = shared_basis(bases, g.size(1, min_k));
    EXPECT_GE(sb.spectrum.minCoeff(), -1e-12);
    EXPECT_LE(sb.spectrum.maxCoeff(), 1.0 + 1e-12);
    Index total = 0;
    for (const auto& b : bases) total += b.cols();
    EXPECT_NEAR(sb.spectrum.sum(), static_cast<double>(total) / static_cast<double>(S), 1e-9);
  }
}

TEST(Property, StudyOrderPermutationEquivariance) {
  for (std::uint64_t i = 0; i < 10; ++i) {
    Gen g(500 + i);
    const MultiStudyDataset d = low_rank_studies(3, 40, 15, 2, 1, 0.3, 500 + i);
    MultiStudyDataset rev = d;
    std::reverse(rev.studies.begin(), rev.studies.end());
    const LatentDims dims = LatentDims::from_shared_and_specific(2, {1, 1, 1});
    const FactorEstimates a = estimate_factors(d, dims);
    const FactorEstimates b = estimate_factors(rev, dims);
    EXPECT_LT(max_abs(a.p_tilde_spectrum - b.p_tilde_spectrum), 1e-10);
    for (Index s = 0; s < 3; ++s) {
      const auto& fa = a.f_hat_s[static_cast<std::size_t>(s)];
      const auto& fb = b.f_hat_s[static_cast<std::size_t>(2 - s)];
      EXPECT_LT(max_abs(fa * fa.transpose() - fb * fb.transpose()), 1e-8);
      const Matrix ma = a.m_hat_s(s), mb = b.m_hat_s(2 - s);
      EXPECT_LT(max_abs(ma * ma.transpose() - mb * mb.transpose()), 1e-7);
    }
  }
}

// ---------------------------------------------------------------------------
// Rank selection

TEST(Property, SharedRankGrowsWithTau) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(600 + i);
    Vector spec(g.size(1, 10));
    for (Index j = 0; j < spec.size(); ++j) spec(j) = g.real(0.0, 1.0);
    std::sort(spec.data(), spec.data() + spec.size(), std::greater<>());
    const std::vector<Index> k_hat = {g.size(1, 10), g.size(1, 10)};
    Index last = 0;
    for (double tau = 0.05; tau < 1.0; tau += 0.05) {
      const Index k = select_shared_rank(spec, k_hat, tau).value_or(0);
      EXPECT_GE(k, last);
      EXPECT_LE(k, std::min(k_hat[0], k_hat[1]));
      last = k;
    }
  }
}

TEST(Property, JicIgnoresRowRotation) {
  for (std::uint64_t i = 0; i < 10; ++i) {
    Gen g(700 + i);
    const Index n = g.size(30, 60), p = g.size(10, 25), k = g.size(1, 4);
    const Matrix y = g.matrix(n, k) * g.matrix(k, p, 2.0) + g.matrix(n, p);
    const StudyRank a = select_study_rank(y, 8);
    const StudyRank b = select_study_rank(g.orthogonal(n) * y, 8);
    EXPECT_EQ(a.k_hat, b.k_hat) << "seed " << i;
    for (std::size_t c = 0; c < a.trace.jic.size(); ++c) {
      EXPECT_NEAR(a.trace.jic[c], b.trace.jic[c], 1e-7 * std::abs(a.trace.jic[c]));
    }
  }
}

// ---------------------------------------------------------------------------
// Posterior

TEST(Property, InflationFactorsBracketTheMean) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(800 + i);
    const Index p = g.size(2, 25), k = g.size(1, 4), q = g.size(1, 3);
    const Matrix mu = g.matrix(p, k, g.real(0.0, 3.0));
    const Matrix gm = g.matrix(p, q, g.real(0.0, 3.0));
    Vector v(p);
    for (Index j = 0; j < p; ++j) v(j) = g.real(0.05, 4.0);
    InflationOptions terms;
    terms.normalization = InflationNormalization::kTerms;
    InflationOptions mx;
    mx.strategy = InflationStrategy::kMax;
    for (auto form : {InflationVariance::kVariance, InflationVariance::kSquaredVariance}) {
      terms.variance = mx.variance = form;
      const double lo = min_inflation_lambda(mu, v, form);
      const double mean = inflation_lambda(mu, v, terms), hi = inflation_lambda(mu, v, mx);
      EXPECT_GE(lo, 1.0);
      EXPECT_LE(lo, mean + 1e-12) << "seed " << i;
      EXPECT_LE(mean, hi + 1e-12) << "seed " << i;
      const double lo_g = min_inflation_gamma(gm, mu, v, form);
      const double mean_g = inflation_gamma(gm, mu, v, terms);
      EXPECT_GE(lo_g, 1.0);
      EXPECT_LE(lo_g, mean_g + 1e-12);
      EXPECT_LE(mean_g, inflation_gamma(gm, mu, v, mx) + 1e-12);
      // The pair normalization rescales the same sum.
      InflationOptions pairs = terms;
      pairs.normalization = InflationNormalization::kPairs;
      const double pd = static_cast<double>(p);
      EXPECT_NEAR(inflation_lambda(mu, v, pairs), mean * (pd + 1.0) / (pd - 1.0),
                  1e-10 * mean * pd);
    }
  }
}

TEST(Property, InflationMatchesPairEnumeration) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(900 + i);
    const Index p = g.size(2, 30), k = g.size(1, 3);
    const Matrix mu = g.matrix(p, k);
    Vector v(p);
    for (Index j = 0; j < p; ++j) v(j) = g.real(0.1, 2.0);
    double sum = 0.0, hi = 0.0;
    for (Index j = 0; j < p; ++j) {
      for (Index jp = j; jp < p; ++jp) {
        const double b = jp == j ? inflation_diag_lambda(mu.row(j).transpose(), v(j))
                                 : inflation_pair_lambda(mu.row(j).transpose(),
                                                         mu.row(jp).transpose(), v(j), v(jp));
        sum += b;
        hi = std::max(hi, b);
      }
    }
    const double pd = static_cast<double>(p);
    EXPECT_NEAR(inflation_lambda(mu, v), sum / (pd * (pd - 1.0) / 2.0), 1e-10 * sum);
    InflationOptions mx;
    mx.strategy = InflationStrategy::kMax;
    EXPECT_NEAR(inflation_lambda(mu, v, mx), hi, 1e-12 * hi);
  }
}

TEST(Property, PosteriorScaleIsPositiveOnRandomFits) {
  for (std::uint64_t i = 0; i < 15; ++i) {
    Gen g(1000 + i);
    const Index S = g.size(1, 3), p = g.size(6, 20), k0 = g.size(1, 2);
    const Index q = S == 1 ? 0 : g.size(0, 2);
    const MultiStudyDataset d = low_rank_studies(S, g.size(30, 60), p, k0, q, 0.5, 1000 + i);
    BlastConfig cfg;
    cfg.dims = LatentDims::from_shared_and_specific(k0, std::vector<Index>(S, q));
    cfg.n_mc = 0;
    const BlastResult res = run_blast(d, cfg);
    EXPECT_GT(res.spec.delta_sq.minCoeff(), 0.0) << "seed " << i;
    EXPECT_GT(res.spec.gamma_n, 2.0);
    EXPECT_EQ(check_fit_invariants(res, 1e-8), "") << "seed " << i;
  }
}

TEST(Property, SharedMeanIsRidgeSolution) {
  for (std::uint64_t i = 0; i < 15; ++i) {
    Gen g(1100 + i);
    const Index n = g.size(20, 60), k0 = g.size(1, 3), p = g.size(3, 10);
    const Matrix m = std::sqrt(static_cast<double>(n)) *
                     (g.matrix(n, k0).householderQr().householderQ() * Matrix::Identity(n, k0));
    const Matrix y = g.matrix(n, p);
    const double tau_sq = g.real(0.1, 5.0);
    FactorEstimates fe;
    fe.m_hat = m;
    fe.y_c = y;
    const Matrix ridge = (m.transpose() * m + Matrix::Identity(k0, k0) / tau_sq)
                             .ldlt()
                             .solve(m.transpose() * y)
                             .transpose();
    EXPECT_LT(max_abs(shared_loading_mean(fe, tau_sq) - ridge), 1e-10);
  }
}

// ---------------------------------------------------------------------------
// Evaluation helpers

TEST(Property, QuantileMatchesDefinition) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(1200 + i);
    std::vector<double> x(static_cast<std::size_t>(g.size(1, 40)));
    for (auto& v : x) v = g.real(-5.0, 5.0);
    std::sort(x.begin(), x.end());
    double last = -1e300;
    for (double prob = 0.0; prob <= 1.0; prob += 0.01) {
      const double q = quantile_type7(x, prob);
      const double h = (static_cast<double>(x.size()) - 1.0) * prob;
      const auto lo = static_cast<std::size_t>(std::floor(h));
      const double want = lo + 1 < x.size() ? x[lo] + (h - static_cast<double>(lo)) * (x[lo + 1] - x[lo])
                                            : x.back();
      EXPECT_NEAR(q, want, 1e-12);
      EXPECT_GE(q, last - 1e-12);
      last = q;
    }
  }
}

TEST(Property, RelativeErrorIsPermutationInvariant) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(1300 + i);
    const Index p = g.size(2, 15);
    const Matrix a = g.matrix(p, p), b = g.matrix(p, p);
    std::vector<Index> perm(static_cast<std::size_t>(p));
    std::iota(perm.begin(), perm.end(), 0);
    for (Index j = p - 1; j > 0; --j) std::swap(perm[j], perm[g.size(0, j)]);
    Matrix pa(p, p), pb(p, p);
    for (Index r = 0; r < p; ++r)
      for (Index c = 0; c < p; ++c) {
        pa(r, c) = a(perm[r], perm[c]);
        pb(r, c) = b(perm[r], perm[c]);
      }
    EXPECT_NEAR(rel_fro_error(a, b), rel_fro_error(pa, pb), 1e-12);
  }
}

TEST(Property, ConditionalMeanMatchesDenseSolve) {
  for (std::uint64_t i = 0; i < 20; ++i) {
    Gen g(1400 + i);
    const Index p = g.size(3, 30), r = g.size(0, 4);
    CovarianceModel c;
    c.lambda_hat = g.matrix(p, r);
    c.gamma_hat = g.matrix(p, g.size(0, 2));
    c.diag_add = g.matrix(p, 1).col(0).cwiseAbs().array() + 0.1;
    const auto obs = random_half_split(p, 1400 + i);
    std::vector<Index> tg;
    for (Index j = 0, o = 0; j < p; ++j) {
      if (o < static_cast<Index>(obs.size()) && obs[o] == j) {
        ++o;
      } else {
        tg.push_back(j);
      }
    }
    const Matrix sigma = c.dense();
    Matrix s_oo(obs.size(), obs.size()), s_to(tg.size(), obs.size());
    for (std::size_t a = 0; a < obs.size(); ++a) {
      for (std::size_t b = 0; b < obs.size(); ++b) s_oo(a, b) = sigma(obs[a], obs[b]);
      for (std::size_t t = 0; t < tg.size(); ++t) s_to(t, a) = sigma(tg[t], obs[a]);
    }
    const Vector y = g.matrix(static_cast<Index>(obs.size()), 1).col(0);
    EXPECT_LT(max_abs(conditional_predict(c, obs, y).mean - s_to * s_oo.ldlt().solve(y)), 1e-8)
        << "seed " << i;
  }
}

TEST(Property, ConfigSurvivesOverrides) {
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    Gen g(1500 + i);
    RunConfig c;
    const std::size_t n_mc = static_cast<std::size_t>(g.size(0, 5000));
    const double tau = g.real(0.01, 0.99);
    apply_override(c, "fit.n_mc=" + std::to_string(n_mc));
    apply_override(c, "ranks.tau=" + io::format_double(tau));
    EXPECT_EQ(c.n_mc, n_mc);
    EXPECT_EQ(c.tau, tau);
    EXPECT_TRUE(from_json(to_json(c)) == c);
  }
}

// ---------------------------------------------------------------------------
// Documented examples not covered by the module suites

TEST(Examples, SvdOfDiagonalAndZero) {
  Matrix d = Matrix::Zero(3, 3);
  d.diagonal() << 3.0, 2.0, 1.0;
  const SvdFactors f = truncated_svd(d, 2);
  EXPECT_LT(max_abs(f.singvals - Eigen::Vector2d(3.0, 2.0)), 1e-14);
  EXPECT_LT(max_abs(f.right - Matrix::Identity(3, 2)), 1e-14);
  EXPECT_LT(max_abs(f.left - Matrix::Identity(3, 2)), 1e-14);
  EXPECT_EQ(truncated_svd(Matrix::Zero(2, 2), 1).singvals(0), 0.0);
}

TEST(Examples, IndependentStreamsAreUncorrelated) {
  auto a = derive_stream(1, {"lambda", std::uint64_t{1}});
  auto b = derive_stream(1, {"lambda", std::uint64_t{2}});
  double sab = 0, sa = 0, sb = 0, saa = 0, sbb = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double x = a.normal(), y = b.normal();
    sab += x * y;
    sa += x;
    sb += y;
    saa += x * x;
    sbb += y * y;
  }
  const double cov = sab / n - sa / n * sb / n;
  const double corr = cov / std::sqrt((saa / n - sa * sa / n / n) * (sbb / n - sb * sb / n / n));
  EXPECT_LT(std::abs(corr), 0.05);
}

TEST(Examples, RightBasisSpecialCases) {
  const Matrix v3 = study_right_basis(Matrix::Identity(3, 3), 3);
  EXPECT_LT(max_abs(v3 * v3.transpose() - Matrix::Identity(3, 3)), 1e-12);
  Vector v(4);
  v << 0.5, 0.5, 0.5, -0.5;
  const Matrix b1 = study_right_basis(gaussian(6, 1, 1) * v.transpose(), 1);
  EXPECT_LT(max_abs(b1 * b1.transpose() - v * v.transpose()), 1e-12);
  const Matrix b2 = study_right_basis(gaussian(8, 5, 2), 2);
  const Matrix pr = b2 * b2.transpose();
  EXPECT_LT((pr * pr - pr).norm(), 1e-10);
  EXPECT_LT(max_abs(pr - pr.transpose()), 1e-12);
  EXPECT_NEAR(pr.trace(), 2.0, 1e-12);
  EXPECT_THROW(study_right_basis(gaussian(6, 1, 1) * v.transpose(), 2), DegenerateSignalError);
}

TEST(Examples, SharedBasisIdenticalAndOrthogonal) {
  const Matrix e12 = Matrix::Identity(5, 2);
  const SharedBasis same = shared_basis({e12, e12}, 2);
  EXPECT_NEAR(same.spectrum(0), 1.0, 1e-14);
  EXPECT_NEAR(same.spectrum(1), 1.0, 1e-14);
  EXPECT_NEAR(same.spectrum(2), 0.0, 1e-14);
  EXPECT_EQ(same.spectrum.size(), 4);
  EXPECT_LT(max_abs(same.v_bar * same.v_bar.transpose() - e12 * e12.transpose()), 1e-12);
  const SharedBasis orth = shared_basis({Matrix::Identity(5, 1), e12.col(1)}, 1);
  EXPECT_NEAR(orth.spectrum(0), 0.5, 1e-14);
  EXPECT_NEAR(orth.spectrum(1), 0.5, 1e-14);
  // Eigenvalues past sum_s k_s are zero and not stored.
  EXPECT_EQ(orth.spectrum.size(), 2);
}

TEST(Examples, FullySharedSignalHasNoSpecificPart) {
  const Matrix v_bar = orthonormal(10, 2, 3);
  const Matrix y = gaussian(30, 2, 4) * v_bar.transpose();
  EXPECT_THROW(specific_factors(y, v_bar, 1), DegenerateSignalError);
}

TEST(Examples, SpanFullySpecificStudyAnnihilated) {
  const MultiStudyDataset d = low_rank_studies(2, 50, 12, 2, 1, 0.2, 5);
  const FactorEstimates fe =
      estimate_factors(d, LatentDims::from_shared_and_specific(2, {1, 1}));
  for (Index s = 0; s < 2; ++s) {
    const Matrix& up = fe.u_perp_s[static_cast<std::size_t>(s)];
    const Matrix block = fe.u_c.middleRows(fe.offsets[static_cast<std::size_t>(s)], up.rows());
    EXPECT_LT(max_abs(up.transpose() * block), 1e-8);
  }
}

TEST(Examples, NoiseFreeOrthogonalDesignIsRecovered) {
  // Shared and specific loadings occupy orthogonal coordinate blocks, and the
  // factors of each study are orthogonal with M^T M = n I.
  const Index p = 12, n = 60;
  Matrix lambda = Matrix::Zero(p, 2), gamma1 = Matrix::Zero(p, 1), gamma2 = Matrix::Zero(p, 1);
  lambda(0, 0) = 3.0;
  lambda(1, 1) = 2.0;
  lambda.block(2, 0, 4, 2) = gaussian(4, 2, 6) * 0.1;
  lambda.col(1) -= lambda.col(0) * (lambda.col(0).dot(lambda.col(1)) / lambda.col(0).squaredNorm());
  gamma1.block(6, 0, 3, 1) = gaussian(3, 1, 7);
  gamma2.block(9, 0, 3, 1) = gaussian(3, 1, 8);
  std::vector<Matrix> m0, f0;
  for (std::uint64_t s = 0; s < 2; ++s) {
    const Matrix q = std::sqrt(static_cast<double>(n)) * orthonormal(n, 3, 9 + s);
    m0.push_back(q.leftCols(2));
    f0.push_back(q.rightCols(1));
  }
  MultiStudyDataset d;
  d.studies = {m0[0] * lambda.transpose() + f0[0] * gamma1.transpose(),
               m0[1] * lambda.transpose() + f0[1] * gamma2.transpose()};
  const FactorEstimates fe = estimate_factors(d, LatentDims::from_shared_and_specific(2, {1, 1}));
  for (Index s = 0; s < 2; ++s) {
    const auto su = static_cast<std::size_t>(s);
    EXPECT_LE(procrustes_error(fe.m_hat_s(s), m0[su]), 1e-6);
    EXPECT_LE(procrustes_error(fe.f_hat_s[su], f0[su]), 1e-6);
  }
}

TEST(Examples, PenaltyArithmetic) {
  JicTrace t;
  t.n_s = 100;
  t.p = 50;
  EXPECT_NEAR(t.penalty(3), 1173.6069, 1e-3);
}

TEST(Examples, SharedRankFromSpectrum) {
  Vector s(4);
  s << 0.99, 0.95, 0.40, 0.1;
  EXPECT_EQ(select_shared_rank(s, {5, 5}, 0.2), 2);
  Vector low(2);
  low << 0.75, 0.1;
  EXPECT_FALSE(select_shared_rank(low, {5, 5}, 0.2).has_value());
  EXPECT_THROW(select_shared_rank(Vector(), {1}, 0.2), DimensionError);
}

TEST(Examples, ZeroDataIsDegenerate) {
  EXPECT_THROW(surrogate_loglik(Matrix::Zero(20, 5), 1, 1.0), DegenerateVarianceError);
}

TEST(Examples, NineStrongFactorsAreFound) {
  int hits = 0;
  for (std::uint64_t r = 0; r < 10; ++r) {
    auto [data, truth] = generate(SimScenario::uniform(1, 300, 200, 5, 4, 40 + r));
    hits += select_study_rank(data.studies[0], 30).k_hat == 9;
  }
  EXPECT_GE(hits, 9);
}
