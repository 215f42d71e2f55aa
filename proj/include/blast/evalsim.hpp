#pragma once

// Synthetic multi-study data, accuracy and coverage metrics, and Gaussian
// prediction tooling for low-rank-plus-diagonal covariances.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "blast/error.hpp"
#include "blast/numerics.hpp"
#include "blast/parallel.hpp"
#include "blast/posterior.hpp"
#include "blast/rng.hpp"
#include "blast/spectral.hpp"

namespace blast {

struct SimScenario {
  Index num_studies = 3;
  std::vector<Index> n_s{300, 300, 300};
  Index p = 200;
  Index k0 = 5;
  std::vector<Index> q_s{4, 4, 4};
  double loading_sparsity = 0.5;
  double loading_sd = 1.0;
  double noise_var_low = 0.5;
  double noise_var_high = 5.0;
  bool heteroscedastic = false;
  bool collinear = false;
  double confounder_sd = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_studies < 1) throw ParameterError("scenario: need at least one study");
    if (static_cast<Index>(n_s.size()) != num_studies ||
        static_cast<Index>(q_s.size()) != num_studies) {
      throw ParameterError("scenario: n_s and q_s need one entry per study");
    }
    if (p < 2) throw ParameterError("scenario: p must be at least 2");
    if (k0 < 0) throw ParameterError("scenario: k0 must be nonnegative");
    for (Index s = 0; s < num_studies; ++s) {
      const auto su = static_cast<std::size_t>(s);
      if (n_s[su] < 2) throw ParameterError("scenario: n_s must be at least 2");
      if (q_s[su] < 0) throw ParameterError("scenario: q_s must be nonnegative");
    }
    if (!(loading_sparsity >= 0.0 && loading_sparsity <= 1.0)) {
      throw ParameterError("scenario: loading_sparsity must lie in [0, 1]");
    }
    if (!(loading_sd >= 0.0) || !std::isfinite(loading_sd)) {
      throw ParameterError("scenario: loading_sd must be nonnegative");
    }
    if (!(noise_var_low > 0.0 && noise_var_low <= noise_var_high) ||
        !std::isfinite(noise_var_high)) {
      throw ParameterError("scenario: noise range must satisfy 0 < low <= high");
    }
    if (collinear && (k0 < 2 || num_studies < 2)) {
      throw ParameterError("scenario: collinear design needs k0 >= 2 and S >= 2");
    }
    if (collinear) {
      for (Index s = 1; s < num_studies; ++s) {
        if (q_s[static_cast<std::size_t>(s)] < 2) {
          throw ParameterError("scenario: collinear design needs q_s >= 2 for s >= 2");
        }
      }
    }
    if (!(confounder_sd >= 0.0)) throw ParameterError("scenario: confounder_sd must be >= 0");
  }

  LatentDims dims() const { return LatentDims::from_shared_and_specific(k0, q_s); }

  bool operator==(const SimScenario&) const = default;

  static SimScenario uniform(Index S, Index n, Index p, Index k0, Index q,
                             std::uint64_t seed = 0) {
    SimScenario sc;
    sc.num_studies = S;
    sc.n_s.assign(static_cast<std::size_t>(S), n);
    sc.q_s.assign(static_cast<std::size_t>(S), q);
    sc.p = p;
    sc.k0 = k0;
    sc.seed = seed;
    return sc;
  }
};

struct SimTruth {
  Matrix lambda0;                  // p x k0
  std::vector<Matrix> gamma0_s;    // p x q_s
  std::vector<Vector> sigma0_sq_s;  // per study; identical when homoscedastic
  std::vector<Matrix> m0_s;        // n_s x k0
  std::vector<Matrix> f0_s;        // n_s x q_s
};

namespace detail {

inline void fill_normal(Matrix& m, RngStream stream, double sd = 1.0) {
  for (Index c = 0; c < m.cols(); ++c)
    for (Index r = 0; r < m.rows(); ++r) m(r, c) = sd * stream.normal();
}

inline void fill_spike_slab(Matrix& m, RngStream stream, double sparsity, double sd) {
  for (Index c = 0; c < m.cols(); ++c) {
    for (Index r = 0; r < m.rows(); ++r) {
      const double u = stream.uniform();
      const double z = stream.normal();
      m(r, c) = u < sparsity ? 0.0 : sd * z;
    }
  }
}

inline bool full_column_rank(const Matrix& a) {
  if (a.cols() == 0) return true;
  if (a.cols() > a.rows()) return false;
  Eigen::JacobiSVD<Matrix> svd(a);
  const Vector sv = svd.singularValues();
  return sv(0) > 0.0 && sv(sv.size() - 1) > 1e-10 * sv(0);
}

}  // namespace detail

/// Draws loadings, variances, factors and data for one scenario. The same
/// scenario (including seed) always yields identical output.
inline std::pair<MultiStudyDataset, SimTruth> generate(const SimScenario& sc) {
  sc.validate();
  const auto S = static_cast<std::size_t>(sc.num_studies);
  const Index p = sc.p;
  Index total_k = sc.k0;
  for (Index q : sc.q_s) total_k += q;

  // An all-zero design (sparsity 1 or zero slab) is a deliberate pure-noise
  // corner and skips the rank check.
  const bool check_rank = sc.loading_sparsity < 1.0 && sc.loading_sd > 0.0;
  SimTruth truth;
  Matrix stacked;
  bool ok = false;
  for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
    const RngStream base = derive_stream(sc.seed, {"generate", "attempt",
                                                   static_cast<std::uint64_t>(attempt)});
    Matrix l(p, total_k);
    detail::fill_spike_slab(l, base.substream({"loadings"}), sc.loading_sparsity,
                            sc.loading_sd);
    truth.lambda0 = l.leftCols(sc.k0);
    truth.gamma0_s.clear();
    Index col = sc.k0;
    for (std::size_t s = 0; s < S; ++s) {
      truth.gamma0_s.push_back(l.middleCols(col, sc.q_s[s]));
      col += sc.q_s[s];
    }
    if (sc.collinear) {
      Matrix omega(p, 2);
      detail::fill_normal(omega, base.substream({"confounder"}), sc.confounder_sd);
      truth.lambda0.leftCols(2) += omega;
      for (std::size_t s = 1; s < S; ++s) truth.gamma0_s[s].leftCols(2) += omega;
    }
    stacked.resize(p, total_k);
    stacked.leftCols(sc.k0) = truth.lambda0;
    col = sc.k0;
    for (std::size_t s = 0; s < S; ++s) {
      stacked.middleCols(col, sc.q_s[s]) = truth.gamma0_s[s];
      col += sc.q_s[s];
    }
    ok = !check_rank || detail::full_column_rank(stacked);
  }
  if (!ok) {
    throw GenerationError("generate: stacked loading matrix is rank deficient after 10 attempts");
  }

  const RngStream base = derive_stream(sc.seed, {"generate"});
  auto draw_variances = [&](RngStream st) {
    Vector v(p);
    for (Index j = 0; j < p; ++j) {
      v(j) = sc.noise_var_low + (sc.noise_var_high - sc.noise_var_low) * st.uniform();
    }
    return v;
  };
  if (sc.heteroscedastic) {
    for (std::size_t s = 0; s < S; ++s) {
      truth.sigma0_sq_s.push_back(draw_variances(base.substream({"noise_var", s})));
    }
  } else {
    truth.sigma0_sq_s.assign(S, draw_variances(base.substream({"noise_var"})));
  }

  MultiStudyDataset data;
  for (std::size_t s = 0; s < S; ++s) {
    const Index n = sc.n_s[s];
    Matrix m(n, sc.k0), f(n, sc.q_s[s]), e(n, p);
    detail::fill_normal(m, base.substream({"study", s, "shared_factors"}));
    detail::fill_normal(f, base.substream({"study", s, "specific_factors"}));
    detail::fill_normal(e, base.substream({"study", s, "noise"}));
    e = e * truth.sigma0_sq_s[s].cwiseSqrt().asDiagonal();
    Matrix y = e;
    if (sc.k0 > 0) y.noalias() += m * truth.lambda0.transpose();
    if (sc.q_s[s] > 0) y.noalias() += f * truth.gamma0_s[s].transpose();
    data.studies.push_back(std::move(y));
    truth.m0_s.push_back(std::move(m));
    truth.f0_s.push_back(std::move(f));
  }
  data.outcome_names.reserve(static_cast<std::size_t>(p));
  for (Index j = 0; j < p; ++j) data.outcome_names.push_back("y" + std::to_string(j + 1));
  return {std::move(data), std::move(truth)};
}

// ---------------------------------------------------------------------------
// Accuracy metrics

inline double rel_fro_error(const Matrix& estimate, const Matrix& truth) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols()) {
    throw DimensionError("rel_fro_error: shape mismatch");
  }
  const double denom = truth.norm();
  if (!(denom > 0.0)) throw ParameterError("rel_fro_error: truth has zero norm");
  return (estimate - truth).norm() / denom;
}

inline double rel_fro_error_factored(const CovarianceModel& estimate,
                                     const Matrix& truth_loadings);

/// Relative error of a low-rank-plus-diagonal estimate against B B^T; p x p
/// matrices are never formed for p > 2000.
inline double rel_fro_error(const CovarianceModel& estimate, const Matrix& truth_loadings) {
  const Index p = truth_loadings.rows();
  if (estimate.num_outcomes() != p) throw DimensionError("rel_fro_error: shape mismatch");
  if (p <= 2000) {
    return rel_fro_error(estimate.dense(), truth_loadings * truth_loadings.transpose());
  }
  return rel_fro_error_factored(estimate, truth_loadings);
}

/// Same quantity as rel_fro_error(CovarianceModel, Matrix) computed only from
/// r x r Gram blocks; used for large p.
inline double rel_fro_error_factored(const CovarianceModel& estimate,
                                     const Matrix& truth_loadings) {
  if (estimate.num_outcomes() != truth_loadings.rows()) {
    throw DimensionError("rel_fro_error: shape mismatch");
  }
  const Matrix a = estimate.loadings();
  const Matrix& b = truth_loadings;
  const double truth_sq = (b.transpose() * b).squaredNorm();
  if (!(truth_sq > 0.0)) throw ParameterError("rel_fro_error: truth has zero norm");
  // ||A A^T - B B^T + D||^2 expanded through the small Gram blocks.
  const Matrix ata = a.transpose() * a;
  const Matrix atb = a.transpose() * b;
  const double low_rank_sq = ata.squaredNorm() - 2.0 * atb.squaredNorm() + truth_sq;
  const Vector& d = estimate.diag_add;
  const double cross = 2.0 * d.dot(a.rowwise().squaredNorm() - b.rowwise().squaredNorm());
  const double total = std::max(0.0, low_rank_sq + cross + d.squaredNorm());
  return std::sqrt(total / truth_sq);
}

/// min_R ||estimate R - truth||_F / sqrt(n r) over orthogonal R.
inline double procrustes_error(const Matrix& estimate, const Matrix& truth) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols()) {
    throw DimensionError("procrustes_error: shape mismatch");
  }
  if (estimate.cols() == 0 || estimate.rows() == 0) return 0.0;
  const Matrix r = procrustes_rotation(estimate, truth);
  return (estimate * r - truth).norm() /
         std::sqrt(static_cast<double>(estimate.rows() * estimate.cols()));
}

// ---------------------------------------------------------------------------
// Coverage

/// Type-7 empirical quantile (linear interpolation between order statistics)
/// of an already sorted sample.
inline double quantile_type7(const std::vector<double>& sorted, double prob) {
  if (sorted.empty()) throw ParameterError("quantile: empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline std::pair<double, double> equal_tail_interval(std::vector<double> sample,
                                                     double level) {
  if (!(level > 0.0 && level < 1.0)) throw ParameterError("level must lie in (0, 1)");
  std::sort(sample.begin(), sample.end());
  const double alpha = 1.0 - level;
  return {quantile_type7(sample, 0.5 * alpha), quantile_type7(sample, 1.0 - 0.5 * alpha)};
}

/// Fraction of rows of `samples` (one row per target, one column per draw)
/// whose equal-tail interval contains the matching entry of `truths`.
inline double interval_coverage(const Matrix& samples, const Vector& truths, double level) {
  if (!(level > 0.0 && level < 1.0)) throw ParameterError("level must lie in (0, 1)");
  if (samples.rows() != truths.size()) throw DimensionError("interval_coverage: shape mismatch");
  if (samples.rows() == 0) throw ParameterError("interval_coverage: no targets");
  Index hits = 0;
  std::vector<double> row(static_cast<std::size_t>(samples.cols()));
  for (Index i = 0; i < samples.rows(); ++i) {
    for (Index t = 0; t < samples.cols(); ++t) row[static_cast<std::size_t>(t)] = samples(i, t);
    const auto [lo, hi] = equal_tail_interval(row, level);
    if (truths(i) >= lo && truths(i) <= hi) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.rows());
}

/// Uniform random subset of {0, .., p-1} of size m, in increasing order.
inline std::vector<Index> random_subset(Index p, Index m, RngStream stream) {
  if (m < 1 || m > p) throw ParameterError("random_subset: size outside [1, p]");
  std::vector<Index> idx(static_cast<std::size_t>(p));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = 0; i < m; ++i) {
    const auto j = i + static_cast<Index>(
                           stream.uniform_index(static_cast<std::uint64_t>(p - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(m));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Coverage of the pairwise products a_j^T a_j' for j <= j' in `subset`,
/// where each draw supplies a p x r loading matrix.
template <typename GetLoadings>
double pairwise_product_coverage(std::size_t num_draws, GetLoadings&& loadings_of,
                                 const Matrix& truth, const std::vector<Index>& subset,
                                 double level) {
  const auto m = static_cast<Index>(subset.size());
  const Index pairs = m * (m + 1) / 2;
  auto take = [&](const Matrix& full) {
    Matrix out(m, full.cols());
    for (Index i = 0; i < m; ++i) out.row(i) = full.row(subset[static_cast<std::size_t>(i)]);
    return out;
  };
  auto upper = [&](const Matrix& g, Vector& dst) {
    Index k = 0;
    for (Index a = 0; a < m; ++a)
      for (Index b = a; b < m; ++b) dst(k++) = g(a, b);
  };
  const Matrix t_sub = take(truth);
  Vector truths(pairs);
  upper(t_sub * t_sub.transpose(), truths);
  Matrix samples(pairs, static_cast<Index>(num_draws));
  for (std::size_t t = 0; t < num_draws; ++t) {
    const Matrix d_sub = take(loadings_of(t));
    Vector col(pairs);
    upper(d_sub * d_sub.transpose(), col);
    samples.col(static_cast<Index>(t)) = col;
  }
  return interval_coverage(samples, truths, level);
}

struct CoverageResult {
  double shared = 0.0;
  std::vector<double> specific;  // NaN for studies with q_s = 0
};

/// Equal-tail coverage for entries of Lambda Lambda^T and Gamma_s Gamma_s^T
/// on random `submatrix` x `submatrix` blocks.
inline CoverageResult coverage_eval(const std::vector<PosteriorDraw>& draws,
                                    const SimTruth& truth, double level, Index submatrix,
                                    std::uint64_t seed) {
  if (!(level > 0.0 && level < 1.0)) throw ParameterError("coverage_eval: level must lie in (0, 1)");
  if (draws.size() < 50) throw ParameterError("coverage_eval: need at least 50 draws");
  const Index p = truth.lambda0.rows();
  if (submatrix < 1 || submatrix > p) throw ParameterError("coverage_eval: submatrix outside [1, p]");
  if (draws.front().lambda_tilde.cols() != truth.lambda0.cols()) {
    throw DimensionError("coverage_eval: draws and truth disagree on k0");
  }
  CoverageResult out;
  out.shared = pairwise_product_coverage(
      draws.size(), [&](std::size_t t) -> const Matrix& { return draws[t].lambda_tilde; },
      truth.lambda0, random_subset(p, submatrix, derive_stream(seed, {"coverage", "shared"})),
      level);
  for (std::size_t s = 0; s < truth.gamma0_s.size(); ++s) {
    if (truth.gamma0_s[s].cols() == 0 ||
        draws.front().gamma_tilde_s.at(s).cols() != truth.gamma0_s[s].cols()) {
      out.specific.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    out.specific.push_back(pairwise_product_coverage(
        draws.size(),
        [&](std::size_t t) -> const Matrix& { return draws[t].gamma_tilde_s[s]; },
        truth.gamma0_s[s],
        random_subset(p, submatrix, derive_stream(seed, {"coverage", "study", s})), level));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian prediction with Sigma = L L^T + diag(d)

struct ConditionalPrediction {
  std::vector<Index> targets;
  Vector mean;
  Vector var;
};

namespace detail {

inline void check_covariance(const CovarianceModel& cov) {
  const Index p = cov.num_outcomes();
  if (cov.lambda_hat.rows() != p || cov.gamma_hat.rows() != p) {
    throw DimensionError("covariance model: loading rows do not match diag length");
  }
  if (!cov.diag_add.allFinite() || (cov.diag_add.array() < 0.0).any()) {
    throw InvalidCovarianceError("covariance model: negative or non-finite diagonal");
  }
}

inline Matrix select_rows(const Matrix& a, const std::vector<Index>& idx) {
  Matrix out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = a.row(idx[i]);
  return out;
}

inline Vector select(const Vector& v, const std::vector<Index>& idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Index>(i)) = v(idx[i]);
  return out;
}

}  // namespace detail

/// Reusable conditioning on a fixed observed index set: per-row predictions
/// cost O(|O| r) after an O(|O| r^2) setup.
class ConditionalPredictor {
 public:
  ConditionalPredictor(const CovarianceModel& cov, std::vector<Index> observed) {
    detail::check_covariance(cov);
    const Index p = cov.num_outcomes();
    if (observed.empty() || static_cast<Index>(observed.size()) >= p) {
      throw ParameterError("conditional_predict: observed set must be a nonempty proper subset");
    }
    std::vector<char> seen(static_cast<std::size_t>(p), 0);
    for (Index j : observed) {
      if (j < 0 || j >= p) throw ParameterError("conditional_predict: index out of range");
      if (seen[static_cast<std::size_t>(j)]++) {
        throw ParameterError("conditional_predict: duplicate observed index");
      }
    }
    observed_ = std::move(observed);
    for (Index j = 0; j < p; ++j) {
      if (!seen[static_cast<std::size_t>(j)]) targets_.push_back(j);
    }
    const Matrix l = cov.loadings();
    const Matrix l_o = detail::select_rows(l, observed_);
    l_t_ = detail::select_rows(l, targets_);
    const Vector d_o = detail::select(cov.diag_add, observed_);
    d_t_ = detail::select(cov.diag_add, targets_);
    const Vector sigma_oo_diag = l_o.rowwise().squaredNorm() + d_o;
    if ((sigma_oo_diag.array() <= 0.0).any()) {
      throw InvalidCovarianceError("conditional_predict: observed block has a zero variance");
    }
    const Index r = l.cols();
    if ((d_o.array() > 0.0).all()) {
      // Sigma_TO Sigma_OO^-1 = L_T C^-1 L_O^T D_O^-1 with C = I + L_O^T D_O^-1 L_O.
      const Matrix dl = d_o.cwiseInverse().asDiagonal() * l_o;
      Matrix c = Matrix::Identity(r, r) + l_o.transpose() * dl;
      Eigen::LLT<Matrix> llt(c);
      if (llt.info() != Eigen::Success) throw InvalidCovarianceError("conditional_predict: C not PD");
      const Matrix c_inv = llt.solve(Matrix::Identity(r, r));
      gain_ = l_t_ * (c_inv * dl.transpose());
      var_ = d_t_ + (l_t_ * c_inv).cwiseProduct(l_t_).rowwise().sum();
    } else {
      // Some observed coordinates have no idiosyncratic variance; fall back to
      // a dense solve on the observed block.
      Matrix sigma_oo = l_o * l_o.transpose();
      sigma_oo.diagonal() += d_o;
      Eigen::LDLT<Matrix> ldlt(sigma_oo);
      if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        throw InvalidCovarianceError("conditional_predict: observed block not PSD");
      }
      const Matrix sigma_to = l_t_ * l_o.transpose();
      gain_ = ldlt.solve(sigma_to.transpose()).transpose();
      var_ = d_t_ + l_t_.rowwise().squaredNorm() -
             gain_.cwiseProduct(sigma_to).rowwise().sum();
    }
    var_ = var_.cwiseMax(0.0);
  }

  const std::vector<Index>& observed() const noexcept { return observed_; }
  const std::vector<Index>& targets() const noexcept { return targets_; }
  const Vector& variance() const noexcept { return var_; }

  Vector mean(const Vector& y_observed) const {
    if (y_observed.size() != static_cast<Index>(observed_.size())) {
      throw DimensionError("conditional_predict: observed value count mismatch");
    }
    return gain_ * y_observed;
  }

 private:
  std::vector<Index> observed_, targets_;
  Matrix l_t_;
  Vector d_t_;
  Matrix gain_;
  Vector var_;
};

inline ConditionalPrediction conditional_predict(const CovarianceModel& cov,
                                                 const std::vector<Index>& observed,
                                                 const Vector& values) {
  ConditionalPredictor pred(cov, observed);
  return {pred.targets(), pred.mean(values), pred.variance()};
}

/// Sum over rows of log N(y; 0, Sigma) via the matrix determinant lemma and
/// Woodbury identity.
inline double gaussian_loglik(const CovarianceModel& cov, const Matrix& y_test) {
  detail::check_covariance(cov);
  const Index p = cov.num_outcomes();
  if (y_test.cols() != p) throw DimensionError("gaussian_loglik: column count mismatch");
  const Vector& d = cov.diag_add;
  if ((d.array() <= 0.0).any()) {
    throw InvalidCovarianceError("gaussian_loglik: diagonal must be strictly positive");
  }
  const Matrix l = cov.loadings();
  const Index r = l.cols();
  const Vector d_inv = d.cwiseInverse();
  const Matrix dl = d_inv.asDiagonal() * l;
  const Matrix c = Matrix::Identity(r, r) + l.transpose() * dl;
  Eigen::LLT<Matrix> llt(c);
  if (llt.info() != Eigen::Success) throw InvalidCovarianceError("gaussian_loglik: C not PD");
  double log_det = d.array().log().sum();
  for (Index i = 0; i < r; ++i) log_det += 2.0 * std::log(llt.matrixL()(i, i));
  const Matrix z = y_test * dl;  // rows z_i = (L^T D^-1 y_i)^T
  const Vector quad_d = (y_test.array().square().matrix() * d_inv);
  const Matrix cz = llt.solve(z.transpose());
  const Vector quad_c = z.cwiseProduct(cz.transpose()).rowwise().sum();
  const double rows = static_cast<double>(y_test.rows());
  return -0.5 * rows * (static_cast<double>(p) * std::log(2.0 * std::numbers::pi) + log_det) -
         0.5 * (quad_d - quad_c).sum();
}

/// Standard normal quantile (Acklam's rational approximation refined by one
/// Halley step).
inline double normal_quantile(double prob) {
  if (!(prob > 0.0 && prob < 1.0)) throw ParameterError("normal_quantile: prob outside (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  const double lo = 0.02425;
  double x;
  if (prob < lo) {
    const double q = std::sqrt(-2.0 * std::log(prob));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (prob <= 1.0 - lo) {
    const double q = prob - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - prob));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - prob;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

struct PredictionSummary {
  std::vector<Index> targets;
  Vector nmse;          // per target outcome
  double coverage = 0.0;
  double loglik = 0.0;
};

/// Predicts the target outcomes of every test row from the observed ones and
/// scores NMSE (MSE over the empirical variance of each target), interval
/// coverage at `level`, and the full-row test log-likelihood (NaN when some
/// diagonal entry is zero).
inline PredictionSummary predictive_evaluation(const CovarianceModel& cov,
                                               const Matrix& y_test,
                                               const std::vector<Index>& observed,
                                               double level) {
  if (!(level > 0.0 && level < 1.0)) throw ParameterError("level must lie in (0, 1)");
  if (y_test.cols() != cov.num_outcomes()) throw DimensionError("prediction: column mismatch");
  if (y_test.rows() < 1) throw DataError("prediction: empty test set");
  ConditionalPredictor pred(cov, observed);
  const auto& tg = pred.targets();
  const auto t = static_cast<Index>(tg.size());
  const double z = normal_quantile(0.5 + 0.5 * level);
  const Vector half = z * pred.variance().cwiseSqrt();
  const Matrix y_obs = detail::select_rows(y_test.transpose(), observed).transpose();
  const Matrix y_tgt = detail::select_rows(y_test.transpose(), tg).transpose();
  Matrix mu(y_test.rows(), t);
  for (Index i = 0; i < y_test.rows(); ++i) mu.row(i) = pred.mean(y_obs.row(i).transpose()).transpose();
  Index hits = 0;
  for (Index i = 0; i < y_test.rows(); ++i) {
    for (Index k = 0; k < t; ++k) {
      const double err = std::abs(y_tgt(i, k) - mu(i, k));
      if (err <= half(k) + 1e-9 * (1.0 + std::abs(y_tgt(i, k)))) ++hits;
    }
  }
  PredictionSummary out;
  out.targets = tg;
  out.coverage = static_cast<double>(hits) / static_cast<double>(y_test.rows() * t);
  out.nmse.resize(t);
  for (Index k = 0; k < t; ++k) {
    const double mse = (y_tgt.col(k) - mu.col(k)).squaredNorm() / static_cast<double>(y_test.rows());
    const double mean = y_tgt.col(k).mean();
    const double var = (y_tgt.col(k).array() - mean).square().mean();
    out.nmse(k) = var > 0.0 ? mse / var : std::numeric_limits<double>::quiet_NaN();
  }
  // A singular covariance has no density; the score is then undefined.
  out.loglik = (cov.diag_add.array() > 0.0).all() ? gaussian_loglik(cov, y_test)
                                                  : std::numeric_limits<double>::quiet_NaN();
  return out;
}

inline double predictive_interval_coverage(const CovarianceModel& cov, const Matrix& y_test,
                                           const std::vector<Index>& observed, double level) {
  return predictive_evaluation(cov, y_test, observed, level).coverage;
}

/// Random half split of {0..p-1}: returns the observed indices (sorted).
inline std::vector<Index> random_half_split(Index p, std::uint64_t seed) {
  return random_subset(p, p - p / 2, derive_stream(seed, {"split"}));
}

// ---------------------------------------------------------------------------
// Replicated simulation study

struct MetricsReport {
  double rel_error_shared = 0.0;
  std::vector<double> rel_error_specific;
  std::vector<double> procrustes_shared;
  std::vector<double> procrustes_specific;
  double coverage_shared = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> coverage_specific;
  double rho_lambda = 1.0;
  std::vector<double> rho_gamma;
  LatentDims dims;
  bool dims_match = true;
  double seconds = 0.0;

  static double mean_of(const std::vector<double>& v) {
    double sum = 0.0;
    std::size_t count = 0;
    for (double x : v) {
      if (std::isfinite(x)) {
        sum += x;
        ++count;
      }
    }
    return count ? sum / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
  }
  double rel_error_specific_mean() const { return mean_of(rel_error_specific); }
  double procrustes_shared_mean() const { return mean_of(procrustes_shared); }
  double procrustes_specific_mean() const { return mean_of(procrustes_specific); }
  double coverage_specific_mean() const { return mean_of(coverage_specific); }
};

struct EvalOptions {
  bool estimate_dims = false;  // otherwise fit with the true dimensions
  double level = 0.95;
  Index submatrix = 100;
  bool check_invariants = false;
  double invariant_tol = 1e-8;
};

/// Structural identities that must hold on every fit: M^T M = n I,
/// F_s^T F_s = n_s I, M_s^T F_s = 0, every inflation factor >= 1, delta^2 > 0.
/// Returns an empty string when all hold, otherwise a description.
inline std::string check_fit_invariants(const BlastResult& res, double tol) {
  const auto& fe = res.factors;
  const double n = static_cast<double>(fe.total_rows());
  const Index k0 = fe.m_hat.cols();
  if ((fe.m_hat.transpose() * fe.m_hat - n * Matrix::Identity(k0, k0)).cwiseAbs().maxCoeff() >
      tol * n) {
    return "M^T M != n I";
  }
  for (Index s = 0; s < fe.num_studies(); ++s) {
    const Matrix& f = fe.f_hat_s[static_cast<std::size_t>(s)];
    const double ns = static_cast<double>(f.rows());
    if (f.cols() == 0) continue;
    if ((f.transpose() * f - ns * Matrix::Identity(f.cols(), f.cols())).cwiseAbs().maxCoeff() >
        tol * ns) {
      return "F_s^T F_s != n_s I for study " + std::to_string(s + 1);
    }
    if ((fe.m_hat_s(s).transpose() * f).cwiseAbs().maxCoeff() > tol * std::sqrt(n * ns)) {
      return "M_s^T F_s != 0 for study " + std::to_string(s + 1);
    }
  }
  if (!(res.spec.rho_lambda >= 1.0)) return "rho_lambda < 1";
  for (double r : res.spec.rho_gamma) {
    if (!(r >= 1.0)) return "rho_gamma < 1";
  }
  if (res.spec.num_outcomes() <= 2000) {
    if (!(min_inflation_lambda(res.spec.mu_lambda, res.spec.v_j) >= 1.0)) return "some b_jj' < 1";
    for (const auto& g : res.spec.mu_gamma_s) {
      if (g.cols() > 0 && !(min_inflation_gamma(g, res.spec.mu_lambda, res.spec.v_j) >= 1.0)) {
        return "some b_sjj' < 1";
      }
    }
  }
  if (!(res.spec.delta_sq.array() > 0.0).all()) return "delta^2 <= 0";
  return {};
}

/// Generates one replicate, fits it and scores it against the truth.
inline MetricsReport evaluate_replicate(const SimScenario& scenario, const BlastConfig& cfg_in,
                                        const EvalOptions& opt,
                                        std::string* invariant_failure = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  auto [data, truth] = generate(scenario);
  BlastConfig cfg = cfg_in;
  cfg.seed = derive_seed(scenario.seed, {"fit"});
  if (!opt.estimate_dims) cfg.dims = scenario.dims();
  const BlastResult res = run_blast(data, cfg);
  if (opt.check_invariants && invariant_failure) {
    *invariant_failure = check_fit_invariants(res, opt.invariant_tol);
  }

  MetricsReport m;
  m.dims = res.dims;
  m.dims_match = res.dims == scenario.dims();
  m.rho_lambda = res.spec.rho_lambda;
  m.rho_gamma = res.spec.rho_gamma;
  const auto S = static_cast<std::size_t>(scenario.num_studies);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  m.rel_error_shared = rel_fro_error(res.point.shared, truth.lambda0);
  for (std::size_t s = 0; s < S; ++s) {
    const auto si = static_cast<Index>(s);
    const bool same_q = res.dims.q_s[s] == scenario.q_s[s];
    m.rel_error_specific.push_back(scenario.q_s[s] > 0
                                       ? rel_fro_error(res.point.specific[s], truth.gamma0_s[s])
                                       : nan);
    m.procrustes_shared.push_back(res.dims.k0 == scenario.k0
                                      ? procrustes_error(res.factors.m_hat_s(si), truth.m0_s[s])
                                      : nan);
    m.procrustes_specific.push_back(
        same_q && scenario.q_s[s] > 0 ? procrustes_error(res.factors.f_hat_s[s], truth.f0_s[s])
                                      : nan);
  }
  if (res.draws.size() >= 50 && res.dims.k0 == scenario.k0) {
    const CoverageResult cov =
        coverage_eval(res.draws, truth, opt.level, std::min(opt.submatrix, scenario.p),
                      derive_seed(scenario.seed, {"coverage"}));
    m.coverage_shared = cov.shared;
    m.coverage_specific = cov.specific;
  }
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

struct ReplicateSummary {
  double mean = 0.0;
  double se = 0.0;
  double median = 0.0;
};

inline ReplicateSummary summarize(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }),
          v.end());
  ReplicateSummary s;
  if (v.empty()) {
    s.mean = s.se = s.median = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  const double n = static_cast<double>(v.size());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.se = v.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  std::sort(v.begin(), v.end());
  s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  return s;
}

/// Runs `replicates` independent replicates; replicate r uses the scenario
/// seed derived from (base seed, "replicate", r). Replicates run in parallel
/// with single-threaded fits, so results do not depend on `threads`.
inline std::vector<MetricsReport> run_replicates(const SimScenario& scenario,
                                                 const BlastConfig& cfg, const EvalOptions& opt,
                                                 std::size_t replicates, int threads,
                                                 std::vector<std::string>* failures = nullptr) {
  std::vector<MetricsReport> out(replicates);
  std::vector<std::string> fails(replicates);
  BlastConfig inner = cfg;
  inner.threads = 1;
  parallel_for(replicates, threads, [&](std::size_t r) {
    SimScenario sc = scenario;
    sc.seed = derive_seed(scenario.seed, {"replicate", r});
    out[r] = evaluate_replicate(sc, inner, opt, &fails[r]);
  });
  if (failures) *failures = std::move(fails);
  return out;
}

}  // namespace blast
