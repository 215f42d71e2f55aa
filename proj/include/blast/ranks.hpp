#pragma once

// Latent-dimension selection: a per-study information criterion on a
// surrogate joint likelihood, then a threshold on the averaged-projector
// spectrum for the shared dimension.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "blast/error.hpp"
#include "blast/numerics.hpp"
#include "blast/parallel.hpp"
#include "blast/spectral.hpp"

namespace blast {

struct RankSelectionConfig {
  Index k_max = 0;  // 0 selects default_k_max()
  double tau = 0.2;
  ProjectionWeighting weighting = ProjectionWeighting::kUniform;
  int threads = 1;

  void validate(const MultiStudyDataset& data) const {
    if (!(tau > 0.0 && tau < 1.0)) throw ParameterError("tau must lie in (0, 1)");
    Index cap = std::numeric_limits<Index>::max();
    for (const auto& y : data.studies) cap = std::min({cap, y.rows(), y.cols()});
    if (k_max != 0 && (k_max < 1 || k_max > cap)) {
      throw ParameterError("k_max = " + std::to_string(k_max) + " outside [1, " +
                           std::to_string(cap) + "]");
    }
  }
};

/// min(30, min_s min(n_s, p) - 1), at least 1.
inline Index default_k_max(const MultiStudyDataset& data) {
  Index cap = std::numeric_limits<Index>::max();
  for (const auto& y : data.studies) cap = std::min({cap, y.rows(), y.cols()});
  return std::max<Index>(1, std::min<Index>(30, cap - 1));
}

struct JicTrace {
  Index n_s = 0;
  Index p = 0;
  std::vector<double> loglik;  // entry k-1 holds l_hat for k factors
  std::vector<double> jic;

  double penalty(Index k) const {
    return static_cast<double>(k) * static_cast<double>(std::max(n_s, p)) *
           std::log(static_cast<double>(std::min(n_s, p)));
  }
};

/// One study's singular spectrum, computed once and truncated per k.
class StudySpectrum {
 public:
  StudySpectrum(const Matrix& y_s, Index k_max)
      : n_s_(y_s.rows()), svd_(truncated_svd(y_s, k_max)) {
    col_sq_ = y_s.colwise().squaredNorm().transpose();
    // proj_(j, i) = (d_i v_ji)^2, the energy of column j along direction i.
    proj_ = (svd_.right * svd_.singvals.asDiagonal()).array().square();
  }

  Index rows() const noexcept { return n_s_; }
  Index cols() const noexcept { return col_sq_.size(); }
  Index max_rank() const noexcept { return svd_.rank(); }

  /// Data-adaptive prior variance for the k-factor fit: signal energy over
  /// k times the total residual variance.
  double tau_sq(Index k) const {
    const Vector sigma_sq = residual_variances(k);
    const double theta = svd_.singvals.head(k).squaredNorm() / static_cast<double>(n_s_);
    const double omega = sigma_sq.sum();
    return theta / (static_cast<double>(k) * omega);
  }

  Vector residual_variances(Index k) const {
    const Vector explained = proj_.leftCols(k).rowwise().sum();
    return ((col_sq_ - explained).cwiseMax(0.0)) / static_cast<double>(n_s_);
  }

  double loglik(Index k, double tau_sq) const {
    const double n = static_cast<double>(n_s_);
    const Index p = cols();
    const Vector sigma_sq = residual_variances(k);
    for (Index j = 0; j < p; ++j) {
      if (!(sigma_sq(j) > 1e-12 * (col_sq_(j) / n))) {
        throw DegenerateVarianceError("surrogate_loglik: residual variance of outcome " +
                                      std::to_string(j + 1) + " vanishes at k = " +
                                      std::to_string(k));
      }
    }
    // Y - M L^T = (I - U U^T) Y + c U U^T Y with c = tau^-2 / (n + tau^-2).
    const double inv_tau_sq = 1.0 / tau_sq;
    const double c = inv_tau_sq / (n + inv_tau_sq);
    const Vector explained = proj_.leftCols(k).rowwise().sum();
    double log_det = 0.0;
    double trace = 0.0;
    for (Index j = 0; j < p; ++j) {
      log_det += std::log(sigma_sq(j));
      trace += (n * sigma_sq(j) + c * c * explained(j)) / sigma_sq(j);
    }
    return -0.5 * n * log_det - 0.5 * trace -
           0.5 * n * static_cast<double>(p) * std::log(2.0 * std::numbers::pi);
  }

 private:
  Index n_s_;
  SvdFactors svd_;
  Vector col_sq_;
  Matrix proj_;
};

/// Gaussian log-likelihood of Y_s at the k-factor spectral fit with loadings
/// shrunk by prior variance tau_sq.
inline double surrogate_loglik(const Matrix& y_s, Index k, double tau_sq) {
  const Index cap = std::min(y_s.rows(), y_s.cols());
  if (k < 1 || k > cap) throw DimensionError("surrogate_loglik: k out of range");
  return StudySpectrum(y_s, k).loglik(k, tau_sq);
}

struct StudyRank {
  Index k_hat = 0;
  JicTrace trace;
};

inline StudyRank select_study_rank(const StudySpectrum& spectrum, Index k_max) {
  StudyRank out;
  out.trace.n_s = spectrum.rows();
  out.trace.p = spectrum.cols();
  double best = std::numeric_limits<double>::infinity();
  for (Index k = 1; k <= k_max; ++k) {
    const double ll = spectrum.loglik(k, spectrum.tau_sq(k));
    const double jic = -2.0 * ll + out.trace.penalty(k);
    out.trace.loglik.push_back(ll);
    out.trace.jic.push_back(jic);
    if (jic < best) {  // strict: ties keep the smaller k
      best = jic;
      out.k_hat = k;
    }
  }
  return out;
}

inline StudyRank select_study_rank(const Matrix& y_s, Index k_max) {
  const Index cap = std::min(y_s.rows(), y_s.cols());
  if (k_max < 1 || k_max > cap) throw ParameterError("select_study_rank: bad k_max");
  return select_study_rank(StudySpectrum(y_s, k_max), k_max);
}

/// Largest j <= min_s k_hat_s with s_j(P_tilde) > 1 - tau; nullopt when even
/// the leading singular value misses the threshold (no shared structure).
inline std::optional<Index> select_shared_rank(const Vector& spectrum,
                                               const std::vector<Index>& k_hat_s,
                                               double tau) {
  if (spectrum.size() == 0) throw DimensionError("select_shared_rank: empty spectrum");
  Index limit = spectrum.size();
  for (Index k : k_hat_s) limit = std::min(limit, k);
  Index count = 0;
  while (count < limit && spectrum(count) > 1.0 - tau) ++count;
  if (count == 0) return std::nullopt;
  return count;
}

struct RankSelection {
  LatentDims dims;
  std::vector<JicTrace> traces;
  Vector p_tilde_spectrum;
  Index k_max = 0;
  std::vector<std::string> warnings;
};

inline RankSelection select_dims(const MultiStudyDataset& data,
                                 const RankSelectionConfig& cfg) {
  data.validate();
  cfg.validate(data);
  const Index k_max = cfg.k_max == 0 ? default_k_max(data) : cfg.k_max;
  const auto S = data.studies.size();

  std::vector<StudyRank> per_study(S);
  parallel_for(S, cfg.threads, [&](std::size_t s) {
    per_study[s] = select_study_rank(StudySpectrum(data.studies[s], k_max), k_max);
  });

  RankSelection out;
  out.k_max = k_max;
  std::vector<Index> k_hat;
  for (std::size_t s = 0; s < S; ++s) {
    k_hat.push_back(per_study[s].k_hat);
    out.traces.push_back(std::move(per_study[s].trace));
    if (per_study[s].k_hat == k_max) {
      out.warnings.push_back("study " + std::to_string(s + 1) +
                             ": selected rank equals k_max = " + std::to_string(k_max));
    }
  }

  std::vector<Matrix> bases(S);
  parallel_for(S, cfg.threads, [&](std::size_t s) {
    bases[s] = study_right_basis(data.studies[s], k_hat[s]);
  });
  out.p_tilde_spectrum =
      shared_basis(bases, 1, projection_weights(data, cfg.weighting)).spectrum;

  const auto k0 = select_shared_rank(out.p_tilde_spectrum, k_hat, cfg.tau);
  if (!k0) {
    throw DegenerateSignalError(
        "select_dims: no shared structure (leading singular value of the averaged "
        "projector is at most 1 - tau)");
  }
  out.dims.k0 = *k0;
  out.dims.k_s = k_hat;
  for (std::size_t s = 0; s < S; ++s) {
    Index q = k_hat[s] - *k0;
    if (q < 0) {
      out.warnings.push_back("study " + std::to_string(s + 1) +
                             ": k_hat_s below k0, q_s floored at 0");
      q = 0;
      out.dims.k_s[s] = *k0;
    }
    out.dims.q_s.push_back(q);
  }
  return out;
}

}  // namespace blast
