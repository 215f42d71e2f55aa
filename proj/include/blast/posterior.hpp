#pragma once

// Closed-form posterior inference on loadings and residual variances given
// the spectral factor estimates: empirical-Bayes hyperparameters, the
// conjugate normal-inverse-gamma fit for the shared loadings, ridge means for
// the study-specific loadings, coverage-correcting variance inflation and
// independent posterior draws.

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "blast/error.hpp"
#include "blast/numerics.hpp"
#include "blast/parallel.hpp"
#include "blast/ranks.hpp"
#include "blast/rng.hpp"
#include "blast/spectral.hpp"

namespace blast {

struct Hyperparams {
  double tau_lambda_sq = 1.0;
  std::vector<std::optional<double>> tau_gamma_sq;  // unset when q_s = 0
  double nu0 = 1.0;
  double sigma0_sq = 1.0;

  void validate() const {
    auto ok = [](double v) { return std::isfinite(v) && v > 0.0; };
    if (!ok(tau_lambda_sq) || !ok(nu0) || !ok(sigma0_sq)) {
      throw InfeasibleHyperparameterError("hyperparameters must be positive and finite");
    }
    for (const auto& t : tau_gamma_sq) {
      if (t && !ok(*t)) {
        throw InfeasibleHyperparameterError("tau_gamma_sq must be positive and finite");
      }
    }
  }
};

/// Per-outcome residual variances V_j = ||(I - U_c U_c^T) y_c_j||^2 / n.
inline Vector residual_variances(const FactorEstimates& fe) {
  const Matrix resid = fe.y_c - fe.u_c * (fe.u_c.transpose() * fe.y_c);
  return resid.colwise().squaredNorm().transpose() / static_cast<double>(fe.total_rows());
}

/// Ridge posterior mean of the shared loadings, Y_c^T M / (n + 1/tau^2).
inline Matrix shared_loading_mean(const FactorEstimates& fe, double tau_lambda_sq) {
  const double n = static_cast<double>(fe.total_rows());
  return fe.y_c.transpose() * fe.m_hat / (n + 1.0 / tau_lambda_sq);
}

/// Data-adaptive prior variances from signal and residual energies.
inline Hyperparams estimate_hyperparams(const MultiStudyDataset& data,
                                        const FactorEstimates& fe,
                                        const LatentDims& dims, double nu0 = 1.0,
                                        double sigma0_sq = 1.0) {
  Hyperparams hp;
  hp.nu0 = nu0;
  hp.sigma0_sq = sigma0_sq;
  const double n = static_cast<double>(fe.total_rows());
  const double omega = residual_variances(fe).sum();
  const double theta = (fe.u_c.transpose() * fe.y_c).squaredNorm() / n;
  // Relative to the total energy, so exactly low-rank data is caught despite
  // rounding.
  const double scale = fe.y_c.squaredNorm() / n;
  if (!(omega > 1e-12 * scale) || !(theta > 1e-12 * scale)) {
    throw DegenerateSignalError(
        "estimate_hyperparams: zero residual or signal energy (Omega = " +
        std::to_string(omega) + ", Theta = " + std::to_string(theta) + ")");
  }
  hp.tau_lambda_sq = theta / (static_cast<double>(dims.k0) * omega);

  // Provisional shared mean with unit prior variance.
  const Matrix mu_provisional = shared_loading_mean(fe, 1.0);
  for (Index s = 0; s < fe.num_studies(); ++s) {
    const auto q = dims.q_s[static_cast<std::size_t>(s)];
    if (q == 0) {
      hp.tau_gamma_sq.emplace_back(std::nullopt);
      continue;
    }
    const Matrix& y = data.studies[static_cast<std::size_t>(s)];
    const Matrix y_tilde = y - fe.m_hat_s(s) * mu_provisional.transpose();
    const Matrix& u = fe.u_perp_s[static_cast<std::size_t>(s)];
    const double theta_s =
        (u.transpose() * y_tilde).squaredNorm() / static_cast<double>(y.rows());
    if (!(theta_s > 1e-12 * y.squaredNorm() / static_cast<double>(y.rows()))) {
      throw DegenerateSignalError("estimate_hyperparams: zero specific signal in study " +
                                  std::to_string(s + 1));
    }
    hp.tau_gamma_sq.emplace_back(theta_s / (static_cast<double>(q) * omega));
  }
  return hp;
}

struct LambdaPosterior {
  Matrix mu_lambda;  // p x k0
  double k_scalar = 0.0;
  double gamma_n = 0.0;
  Vector delta_sq;
  Vector v_j;
};

inline LambdaPosterior fit_lambda_posterior(const FactorEstimates& fe,
                                            const Hyperparams& hp) {
  hp.validate();
  const double n = static_cast<double>(fe.total_rows());
  const double precision = n + 1.0 / hp.tau_lambda_sq;
  LambdaPosterior out;
  const Matrix mty = fe.m_hat.transpose() * fe.y_c;  // k0 x p
  out.mu_lambda = mty.transpose() / precision;
  out.k_scalar = 1.0 / precision;
  out.gamma_n = hp.nu0 + n;
  // mu^T K^-1 mu = ||M^T y||^2 / (n + tau^-2).
  const Vector quad = mty.colwise().squaredNorm().transpose() / precision;
  const Vector yy = fe.y_c.colwise().squaredNorm().transpose();
  out.delta_sq =
      ((hp.nu0 * hp.sigma0_sq + yy.array() - quad.array()) / out.gamma_n).matrix();
  for (Index j = 0; j < out.delta_sq.size(); ++j) {
    if (!(out.delta_sq(j) > 0.0)) {
      throw NumericalError("fit_lambda_posterior: non-positive delta^2 for outcome " +
                           std::to_string(j + 1));
    }
  }
  out.v_j = residual_variances(fe);
  return out;
}

/// Rows (F_s^T (y_sj - M_s mu_lambda_j))^T / (n_s + 1/tau_gamma^2).
inline Matrix mu_gamma(const Matrix& y_s, const Matrix& m_hat_s, const Matrix& f_hat_s,
                       const Matrix& mu_lambda, double tau_gamma_sq) {
  if (f_hat_s.cols() == 0) return Matrix(y_s.cols(), 0);
  const double precision = static_cast<double>(y_s.rows()) + 1.0 / tau_gamma_sq;
  const Matrix fty = f_hat_s.transpose() * y_s;                    // q x p
  const Matrix ftm = f_hat_s.transpose() * m_hat_s;                // q x k0
  return (fty - ftm * mu_lambda.transpose()).transpose() / precision;
}

// ---------------------------------------------------------------------------
// Variance inflation

enum class InflationStrategy { kMean, kMax, kFixed };

/// How the residual-variance estimate enters the inflation denominators.
/// kVariance uses V_j (the plug-in for sigma_j^2); kSquaredVariance uses V_j^2.
enum class InflationVariance { kVariance, kSquaredVariance };

/// Divisor of the mean strategy: kPairs divides the sum over j <= j' by
/// C(p, 2); kTerms divides by the number of summands p(p + 1)/2.
enum class InflationNormalization { kPairs, kTerms };

struct InflationOptions {
  InflationStrategy strategy = InflationStrategy::kMean;
  double fixed_value = 1.0;
  InflationVariance variance = InflationVariance::kVariance;
  InflationNormalization normalization = InflationNormalization::kPairs;
  double exact_flop_limit = 1e9;
  Index subsample_pairs = 1'000'000;
  int threads = 1;
};

namespace detail {

inline Vector inflation_weights(const Vector& v_j, InflationVariance form) {
  for (Index j = 0; j < v_j.size(); ++j) {
    if (!(v_j(j) > 0.0)) {
      throw DegenerateVarianceError("inflation: residual variance V_j = 0 for outcome " +
                                    std::to_string(j + 1));
    }
  }
  return form == InflationVariance::kVariance ? v_j : Vector(v_j.array().square());
}

inline double safe_ratio_sqrt(double num, double den) {
  if (num == 0.0) return 1.0;
  return std::sqrt(1.0 + num / den);
}

// Aggregates b(j, j') over 1 <= j <= j' <= p. Per-row partial sums are reduced in row order so the result
// does not depend on the thread count.
template <typename PairFn, typename DiagFn>
double aggregate_inflation(Index p, Index width, PairFn&& pair_b, DiagFn&& diag_b,
                           const InflationOptions& opt) {
  if (p < 2) throw DimensionError("inflation: need at least two outcomes");
  if (opt.strategy == InflationStrategy::kFixed) {
    if (!(opt.fixed_value >= 1.0)) throw ParameterError("fixed inflation must be >= 1");
    return opt.fixed_value;
  }
  const double pairs = 0.5 * static_cast<double>(p) * static_cast<double>(p - 1);
  const double divisor = opt.normalization == InflationNormalization::kPairs
                             ? pairs
                             : pairs + static_cast<double>(p);
  const double flops = static_cast<double>(p) * static_cast<double>(p) *
                       static_cast<double>(std::max<Index>(width, 1));
  const auto P = static_cast<std::size_t>(p);

  std::vector<double> diag(P);
  for (std::size_t j = 0; j < P; ++j) diag[j] = diag_b(static_cast<Index>(j));

  if (flops <= opt.exact_flop_limit) {
    std::vector<double> row_sum(P, 0.0), row_max(P, 1.0);
    parallel_for(P, opt.threads, [&](std::size_t j) {
      double sum = diag[j], mx = diag[j];
      for (Index jp = static_cast<Index>(j) + 1; jp < p; ++jp) {
        const double b = pair_b(static_cast<Index>(j), jp);
        sum += b;
        mx = std::max(mx, b);
      }
      row_sum[j] = sum;
      row_max[j] = mx;
    });
    if (opt.strategy == InflationStrategy::kMax) {
      return *std::max_element(row_max.begin(), row_max.end());
    }
    double total = 0.0;
    for (double r : row_sum) total += r;
    return total / divisor;
  }

  // Uniform subsample of off-diagonal pairs; the diagonal is always exact.
  auto stream = derive_stream(0x1f1a7e5ULL, {"inflation", "subsample"});
  double sum = 0.0, mx = 1.0;
  for (Index i = 0; i < opt.subsample_pairs; ++i) {
    Index a = static_cast<Index>(stream.uniform_index(static_cast<std::uint64_t>(p)));
    Index b = static_cast<Index>(stream.uniform_index(static_cast<std::uint64_t>(p - 1)));
    if (b >= a) ++b;
    const double v = pair_b(std::min(a, b), std::max(a, b));
    sum += v;
    mx = std::max(mx, v);
  }
  double diag_sum = 0.0;
  for (double d : diag) {
    diag_sum += d;
    mx = std::max(mx, d);
  }
  if (opt.strategy == InflationStrategy::kMax) return mx;
  const double mean_off = sum / static_cast<double>(opt.subsample_pairs);
  return (diag_sum + pairs * mean_off) / divisor;
}

}  // namespace detail

/// b for the shared outer product, entry (j, j').
inline double inflation_pair_lambda(const Vector& mu_j, const Vector& mu_jp, double w_j,
                                    double w_jp) {
  const double a = mu_j.squaredNorm(), ap = mu_jp.squaredNorm(), g = mu_j.dot(mu_jp);
  return detail::safe_ratio_sqrt(a * ap + g * g, w_j * ap + w_jp * a);
}

inline double inflation_diag_lambda(const Vector& mu_j, double w_j) {
  return std::sqrt(1.0 + mu_j.squaredNorm() / (2.0 * w_j));
}

inline double inflation_pair_gamma(const Vector& g_j, const Vector& g_jp,
                                   const Vector& l_j, const Vector& l_jp, double w_j,
                                   double w_jp) {
  const double a = g_j.squaredNorm(), ap = g_jp.squaredNorm();
  const double c = l_j.squaredNorm(), cp = l_jp.squaredNorm();
  const double gg = g_j.dot(g_jp), ll = l_j.dot(l_jp);
  return detail::safe_ratio_sqrt(a * ap + gg * gg + a * cp + ap * c + 2.0 * gg * ll,
                                 w_j * ap + w_jp * a);
}

inline double inflation_diag_gamma(const Vector& g_j, const Vector& l_j, double w_j) {
  return std::sqrt(1.0 + (g_j.squaredNorm() + 2.0 * l_j.squaredNorm()) / (2.0 * w_j));
}

/// Smallest b_jj' over all pairs j <= j' (every b is >= 1 by construction).
inline double min_inflation_lambda(const Matrix& mu_lambda, const Vector& v_j,
                                   InflationVariance form = InflationVariance::kVariance) {
  const Vector w = detail::inflation_weights(v_j, form);
  const Matrix cols = mu_lambda.transpose();
  double lo = std::numeric_limits<double>::infinity();
  for (Index j = 0; j < cols.cols(); ++j) {
    lo = std::min(lo, inflation_diag_lambda(cols.col(j), w(j)));
    for (Index jp = j + 1; jp < cols.cols(); ++jp) {
      lo = std::min(lo, inflation_pair_lambda(cols.col(j), cols.col(jp), w(j), w(jp)));
    }
  }
  return lo;
}

inline double min_inflation_gamma(const Matrix& mu_gamma_s, const Matrix& mu_lambda,
                                  const Vector& v_j,
                                  InflationVariance form = InflationVariance::kVariance) {
  const Vector w = detail::inflation_weights(v_j, form);
  const Matrix gc = mu_gamma_s.transpose(), lc = mu_lambda.transpose();
  double lo = std::numeric_limits<double>::infinity();
  for (Index j = 0; j < gc.cols(); ++j) {
    lo = std::min(lo, inflation_diag_gamma(gc.col(j), lc.col(j), w(j)));
    for (Index jp = j + 1; jp < gc.cols(); ++jp) {
      lo = std::min(lo, inflation_pair_gamma(gc.col(j), gc.col(jp), lc.col(j), lc.col(jp),
                                             w(j), w(jp)));
    }
  }
  return lo;
}

/// Inflation factor rho_Lambda from all pairwise b_jj'.
inline double inflation_lambda(const Matrix& mu_lambda, const Vector& v_j,
                               const InflationOptions& opt = {}) {
  const Index p = mu_lambda.rows();
  if (v_j.size() != p) throw DimensionError("inflation_lambda: V_j length mismatch");
  const Vector w = detail::inflation_weights(v_j, opt.variance);
  const Matrix cols = mu_lambda.transpose();  // column j = mu_lambda_j
  const Vector sq = cols.colwise().squaredNorm().transpose();
  return detail::aggregate_inflation(
      p, mu_lambda.cols(),
      [&](Index j, Index jp) {
        const double g = cols.col(j).dot(cols.col(jp));
        return detail::safe_ratio_sqrt(sq(j) * sq(jp) + g * g, w(j) * sq(jp) + w(jp) * sq(j));
      },
      [&](Index j) { return std::sqrt(1.0 + sq(j) / (2.0 * w(j))); }, opt);
}

/// Inflation factor rho_Gamma_s from all pairwise b_sjj'.
inline double inflation_gamma(const Matrix& mu_gamma_s, const Matrix& mu_lambda,
                              const Vector& v_j, const InflationOptions& opt = {}) {
  const Index p = mu_lambda.rows();
  if (mu_gamma_s.rows() != p || v_j.size() != p) {
    throw DimensionError("inflation_gamma: shape mismatch");
  }
  const Vector w = detail::inflation_weights(v_j, opt.variance);
  const Matrix gc = mu_gamma_s.transpose();
  const Matrix lc = mu_lambda.transpose();
  const Vector ga = gc.colwise().squaredNorm().transpose();
  const Vector la = lc.colwise().squaredNorm().transpose();
  return detail::aggregate_inflation(
      p, mu_gamma_s.cols() + mu_lambda.cols(),
      [&](Index j, Index jp) {
        const double gg = gc.col(j).dot(gc.col(jp));
        const double ll = lc.col(j).dot(lc.col(jp));
        return detail::safe_ratio_sqrt(
            ga(j) * ga(jp) + gg * gg + ga(j) * la(jp) + ga(jp) * la(j) + 2.0 * gg * ll,
            w(j) * ga(jp) + w(jp) * ga(j));
      },
      [&](Index j) { return std::sqrt(1.0 + (ga(j) + 2.0 * la(j)) / (2.0 * w(j))); },
      opt);
}

// ---------------------------------------------------------------------------
// Posterior specification and draws

enum class GammaInflationSource { kRhoGamma, kRhoLambda };

struct PosteriorSpec {
  LatentDims dims;
  Hyperparams hyper;
  Matrix mu_lambda;
  double k_scalar = 0.0;
  double gamma_n = 0.0;
  Vector delta_sq;
  Vector v_j;
  double rho_lambda = 1.0;
  std::vector<double> rho_gamma;
  std::vector<Matrix> mu_gamma_s;
  // M_s^T F_s = 0 exactly, so the cross-covariance term of the specific
  // outer product vanishes.
  bool psi_s_zero = true;
  GammaInflationSource gamma_source = GammaInflationSource::kRhoGamma;

  // Sampling caches.
  std::vector<Matrix> ft_y_s;          // q_s x p, F_s^T Y_s
  std::vector<Matrix> ft_m_s;          // q_s x k0, F_s^T M_s
  std::vector<double> gamma_scale_s;   // 1 / (n_s + 1/tau_gamma_s^2)
  std::vector<Index> n_s;

  Index num_outcomes() const noexcept { return mu_lambda.rows(); }
  Index num_studies() const noexcept { return static_cast<Index>(mu_gamma_s.size()); }
  double gamma_rho(std::size_t s) const {
    return gamma_source == GammaInflationSource::kRhoGamma ? rho_gamma.at(s) : rho_lambda;
  }
};

struct PosteriorDraw {
  Matrix lambda_tilde;               // p x k0
  std::vector<Matrix> gamma_tilde_s;  // p x q_s
  Vector sigma_tilde_sq;             // p
};

namespace detail {

inline void draw_outcome(const PosteriorSpec& spec, RngStream stream, Index j,
                         PosteriorDraw& out) {
  const double shape = 0.5 * spec.gamma_n;
  const double rate = 0.5 * spec.gamma_n * spec.delta_sq(j);
  const double sigma_sq = stream.inverse_gamma(shape, rate);
  const double sigma = std::sqrt(sigma_sq);
  out.sigma_tilde_sq(j) = sigma_sq;

  const Index k0 = spec.mu_lambda.cols();
  const double lambda_sd = sigma * spec.rho_lambda * std::sqrt(spec.k_scalar);
  Vector lambda(k0);
  for (Index l = 0; l < k0; ++l) lambda(l) = spec.mu_lambda(j, l) + lambda_sd * stream.normal();
  out.lambda_tilde.row(j) = lambda.transpose();

  for (std::size_t s = 0; s < spec.mu_gamma_s.size(); ++s) {
    const Index q = spec.mu_gamma_s[s].cols();
    if (q == 0) continue;
    const double scale = spec.gamma_scale_s[s];
    const Vector mean = (spec.ft_y_s[s].col(j) - spec.ft_m_s[s] * lambda) * scale;
    const double sd = spec.gamma_rho(s) * sigma * std::sqrt(scale);
    for (Index l = 0; l < q; ++l) out.gamma_tilde_s[s](j, l) = mean(l) + sd * stream.normal();
  }
}

inline PosteriorDraw empty_draw(const PosteriorSpec& spec) {
  PosteriorDraw d;
  const Index p = spec.num_outcomes();
  d.lambda_tilde.resize(p, spec.mu_lambda.cols());
  d.sigma_tilde_sq.resize(p);
  for (const auto& m : spec.mu_gamma_s) d.gamma_tilde_s.emplace_back(p, m.cols());
  return d;
}

}  // namespace detail

/// Draw t of the coverage-corrected posterior. Outcome j uses the substream
/// (base path..., "draw", t, j).
inline PosteriorDraw sample_draw(const PosteriorSpec& spec, const RngStream& base,
                                 std::size_t t, int threads = 1) {
  PosteriorDraw d = detail::empty_draw(spec);
  parallel_for(static_cast<std::size_t>(spec.num_outcomes()), threads, [&](std::size_t j) {
    detail::draw_outcome(spec, base.substream({"draw", t, j}),
                         static_cast<Index>(j), d);
  });
  return d;
}

inline std::vector<PosteriorDraw> sample_draws(const PosteriorSpec& spec,
                                               const RngStream& base, std::size_t count,
                                               int threads = 1) {
  std::vector<PosteriorDraw> draws;
  draws.reserve(count);
  for (std::size_t t = 0; t < count; ++t) draws.push_back(detail::empty_draw(spec));
  const auto p = static_cast<std::size_t>(spec.num_outcomes());
  parallel_for(count * p, threads, [&](std::size_t i) {
    const std::size_t t = i / p, j = i % p;
    detail::draw_outcome(spec, base.substream({"draw", t, j}), static_cast<Index>(j),
                         draws[t]);
  });
  return draws;
}

// ---------------------------------------------------------------------------
// Point estimates

/// Covariance in low-rank-plus-diagonal form:
/// lambda_hat lambda_hat^T + gamma_hat gamma_hat^T + diag(diag_add).
struct CovarianceModel {
  Matrix lambda_hat;
  Matrix gamma_hat;
  Vector diag_add;

  Index num_outcomes() const noexcept { return diag_add.size(); }

  Matrix loadings() const {
    const Index p = diag_add.size();
    Matrix l(p, lambda_hat.cols() + gamma_hat.cols());
    if (lambda_hat.cols() > 0) l.leftCols(lambda_hat.cols()) = lambda_hat;
    if (gamma_hat.cols() > 0) l.rightCols(gamma_hat.cols()) = gamma_hat;
    return l;
  }

  Matrix dense() const {
    const Matrix l = loadings();
    Matrix out = l * l.transpose();
    out.diagonal() += diag_add;
    return out;
  }
};

struct PointEstimates {
  CovarianceModel shared;                // mu_L mu_L^T + rho_L^2 Psi
  std::vector<CovarianceModel> specific;  // mu_G mu_G^T + Psi_s
  Vector sigma_sq_hat;                   // posterior mean of sigma_j^2
};

inline PointEstimates point_estimates(const PosteriorSpec& spec) {
  if (!(spec.gamma_n > 2.0)) {
    throw InfeasibleHyperparameterError("point_estimates: gamma_n must exceed 2");
  }
  const double gn = spec.gamma_n;
  PointEstimates out;
  const double k0 = static_cast<double>(spec.dims.k0);
  const Vector psi = (k0 * gn * spec.k_scalar / (gn - 2.0)) * spec.delta_sq;
  out.shared.lambda_hat = spec.mu_lambda;
  out.shared.gamma_hat = Matrix(spec.num_outcomes(), 0);
  out.shared.diag_add = spec.rho_lambda * spec.rho_lambda * psi;
  for (std::size_t s = 0; s < spec.mu_gamma_s.size(); ++s) {
    CovarianceModel c;
    c.lambda_hat = Matrix(spec.num_outcomes(), 0);
    c.gamma_hat = spec.mu_gamma_s[s];
    const double q = static_cast<double>(spec.mu_gamma_s[s].cols());
    const double rho = spec.rho_gamma.at(s);
    c.diag_add = (q * rho * rho * gn * spec.gamma_scale_s[s] / (gn - 2.0)) * spec.delta_sq;
    out.specific.push_back(std::move(c));
  }
  out.sigma_sq_hat = (gn / (gn - 2.0)) * spec.delta_sq;
  return out;
}

/// Full marginal covariance of study s: shared + specific + residual.
inline CovarianceModel study_covariance(const PointEstimates& pe, std::size_t s) {
  CovarianceModel c;
  c.lambda_hat = pe.shared.lambda_hat;
  c.gamma_hat = pe.specific.at(s).gamma_hat;
  c.diag_add = pe.shared.diag_add + pe.specific.at(s).diag_add + pe.sigma_sq_hat;
  return c;
}

// ---------------------------------------------------------------------------
// Orchestration

struct BlastConfig {
  std::optional<LatentDims> dims;  // when unset, selected from data
  RankSelectionConfig ranks;
  ProjectionWeighting weighting = ProjectionWeighting::kUniform;
  bool center_columns = false;
  double nu0 = 1.0;
  double sigma0_sq = 1.0;
  std::optional<double> tau_lambda_sq;               // override
  std::optional<std::vector<double>> tau_gamma_sq;   // override
  InflationOptions inflation;
  GammaInflationSource gamma_source = GammaInflationSource::kRhoGamma;
  std::size_t n_mc = 500;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct BlastResult {
  LatentDims dims;
  std::optional<RankSelection> selection;
  FactorEstimates factors;
  PosteriorSpec spec;
  PointEstimates point;
  std::vector<PosteriorDraw> draws;
  std::vector<StageTiming> timings;
  std::vector<std::string> warnings;
};

/// Builds the complete posterior specification from factor estimates.
inline PosteriorSpec build_posterior(const MultiStudyDataset& data,
                                     const FactorEstimates& fe, const LatentDims& dims,
                                     const Hyperparams& hp, const InflationOptions& infl,
                                     GammaInflationSource source) {
  PosteriorSpec spec;
  spec.dims = dims;
  spec.hyper = hp;
  spec.gamma_source = source;
  LambdaPosterior lp = fit_lambda_posterior(fe, hp);
  spec.mu_lambda = std::move(lp.mu_lambda);
  spec.k_scalar = lp.k_scalar;
  spec.gamma_n = lp.gamma_n;
  spec.delta_sq = std::move(lp.delta_sq);
  spec.v_j = std::move(lp.v_j);
  spec.rho_lambda = inflation_lambda(spec.mu_lambda, spec.v_j, infl);

  for (Index s = 0; s < fe.num_studies(); ++s) {
    const auto su = static_cast<std::size_t>(s);
    const Matrix& y = data.studies[su];
    const Matrix& f = fe.f_hat_s[su];
    const Matrix m = fe.m_hat_s(s);
    spec.n_s.push_back(y.rows());
    if (f.cols() == 0) {
      spec.mu_gamma_s.emplace_back(y.cols(), 0);
      spec.rho_gamma.push_back(1.0);
      spec.ft_y_s.emplace_back(0, y.cols());
      spec.ft_m_s.emplace_back(0, dims.k0);
      spec.gamma_scale_s.push_back(1.0 / static_cast<double>(y.rows()));
      continue;
    }
    const double tg = hp.tau_gamma_sq.at(su).value();
    spec.mu_gamma_s.push_back(mu_gamma(y, m, f, spec.mu_lambda, tg));
    spec.rho_gamma.push_back(
        inflation_gamma(spec.mu_gamma_s.back(), spec.mu_lambda, spec.v_j, infl));
    spec.ft_y_s.push_back(f.transpose() * y);
    spec.ft_m_s.push_back(f.transpose() * m);
    spec.gamma_scale_s.push_back(1.0 / (static_cast<double>(y.rows()) + 1.0 / tg));
  }
  return spec;
}

/// Rank selection (optional), factor estimation, hyperparameters, inflation,
/// point estimates and n_mc posterior draws.
inline BlastResult run_blast(const MultiStudyDataset& input, const BlastConfig& cfg) {
  using clock = std::chrono::steady_clock;
  BlastResult res;
  auto tick = clock::now();
  auto lap = [&](const char* stage) {
    const auto now = clock::now();
    res.timings.push_back({stage, std::chrono::duration<double>(now - tick).count()});
    tick = now;
  };

  input.validate();
  const MultiStudyDataset centered =
      cfg.center_columns ? center_columns(input) : MultiStudyDataset{};
  const MultiStudyDataset& data = cfg.center_columns ? centered : input;

  if (cfg.dims) {
    res.dims = *cfg.dims;
  } else {
    RankSelectionConfig rc = cfg.ranks;
    rc.weighting = cfg.weighting;
    rc.threads = cfg.threads;
    res.selection = select_dims(data, rc);
    res.dims = res.selection->dims;
    res.warnings = res.selection->warnings;
  }
  res.dims.validate(data);
  lap("ranks");

  res.factors = estimate_factors(data, res.dims, {cfg.weighting, cfg.threads});
  lap("factors");

  Hyperparams hp = estimate_hyperparams(data, res.factors, res.dims, cfg.nu0, cfg.sigma0_sq);
  if (cfg.tau_lambda_sq) hp.tau_lambda_sq = *cfg.tau_lambda_sq;
  if (cfg.tau_gamma_sq) {
    if (cfg.tau_gamma_sq->size() != hp.tau_gamma_sq.size()) {
      throw ConfigError("tau_gamma_sq override needs one value per study");
    }
    for (std::size_t s = 0; s < hp.tau_gamma_sq.size(); ++s) {
      if (res.dims.q_s[s] > 0) hp.tau_gamma_sq[s] = (*cfg.tau_gamma_sq)[s];
    }
  }
  hp.validate();
  lap("hyperparameters");

  InflationOptions infl = cfg.inflation;
  infl.threads = cfg.threads;
  res.spec = build_posterior(data, res.factors, res.dims, hp, infl, cfg.gamma_source);
  res.point = point_estimates(res.spec);
  lap("posterior");

  if (cfg.n_mc > 0) {
    res.draws = sample_draws(res.spec, derive_stream(cfg.seed, {"blast"}), cfg.n_mc,
                             cfg.threads);
  }
  lap("sampling");
  return res;
}

}  // namespace blast
