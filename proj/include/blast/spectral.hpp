#pragma once

// Spectral estimation of shared and study-specific latent factors.
//
//   1. per study, the leading k_s right singular vectors V_s of Y_s;
//   2. the leading k0 singular vectors V_bar of the averaged projector
//      P_tilde = (1/S) sum_s V_s V_s^T;
//   3. specific factors F_s = sqrt(n_s) U_s_perp from Y_s (I - V_bar V_bar^T);
//   4. shared factors M = sqrt(n) U_c from the stacked Y_s with the specific
//      directions regressed out.
//
// Projections are always carried as orthonormal bases; no p x p matrix is
// formed.

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "blast/error.hpp"
#include "blast/numerics.hpp"
#include "blast/parallel.hpp"

namespace blast {

struct MultiStudyDataset {
  std::vector<Matrix> studies;  // study s is n_s x p
  std::vector<std::string> outcome_names;

  Index num_studies() const noexcept { return static_cast<Index>(studies.size()); }
  Index num_outcomes() const noexcept {
    return studies.empty() ? 0 : studies.front().cols();
  }
  Index rows(Index s) const { return studies.at(static_cast<std::size_t>(s)).rows(); }
  Index total_rows() const {
    Index n = 0;
    for (const auto& y : studies) n += y.rows();
    return n;
  }

  /// Checks shapes and finiteness. A single study is accepted when
  /// `allow_single` is set (rank selection handles S = 1).
  void validate(bool allow_single = true) const {
    if (studies.empty() || (!allow_single && studies.size() < 2)) {
      throw DataError("dataset needs at least " +
                      std::string(allow_single ? "one study" : "two studies"));
    }
    const Index p = num_outcomes();
    if (p < 2) throw DataError("dataset needs at least two outcomes");
    for (std::size_t s = 0; s < studies.size(); ++s) {
      if (studies[s].cols() != p) {
        throw DataError("study " + std::to_string(s + 1) + " has " +
                        std::to_string(studies[s].cols()) + " outcomes, expected " +
                        std::to_string(p));
      }
      if (studies[s].rows() < 2) {
        throw DataError("study " + std::to_string(s + 1) + " has fewer than two rows");
      }
      require_finite(studies[s], "study " + std::to_string(s + 1));
    }
    if (!outcome_names.empty() && static_cast<Index>(outcome_names.size()) != p) {
      throw DataError("outcome_names length does not match the number of outcomes");
    }
  }
};

/// Subtracts per-study column means.
inline MultiStudyDataset center_columns(MultiStudyDataset data) {
  for (auto& y : data.studies) y.rowwise() -= y.colwise().mean();
  return data;
}

struct LatentDims {
  Index k0 = 0;
  std::vector<Index> k_s;
  std::vector<Index> q_s;

  static LatentDims from_shared_and_specific(Index k0, std::vector<Index> q) {
    LatentDims d;
    d.k0 = k0;
    d.q_s = std::move(q);
    for (Index qs : d.q_s) d.k_s.push_back(k0 + qs);
    return d;
  }

  void validate(const MultiStudyDataset& data) const {
    const auto S = static_cast<std::size_t>(data.num_studies());
    if (k_s.size() != S || q_s.size() != S) {
      throw DimensionError("latent dims list " + std::to_string(k_s.size()) +
                           " studies, dataset has " + std::to_string(S));
    }
    if (k0 < 1) throw DimensionError("k0 must be at least 1");
    for (std::size_t s = 0; s < S; ++s) {
      if (q_s[s] < 0 || k_s[s] != k0 + q_s[s]) {
        throw DimensionError("latent dims: k_s != k0 + q_s for study " +
                             std::to_string(s + 1));
      }
      const Index cap = std::min(data.studies[s].rows(), data.num_outcomes());
      if (k_s[s] > cap) {
        throw DimensionError("latent dims: k_s = " + std::to_string(k_s[s]) +
                             " exceeds min(n_s, p) = " + std::to_string(cap) +
                             " for study " + std::to_string(s + 1));
      }
    }
  }

  bool operator==(const LatentDims&) const = default;
};

enum class ProjectionWeighting { kUniform, kBySampleSize };

struct SpectralOptions {
  ProjectionWeighting weighting = ProjectionWeighting::kUniform;
  int threads = 1;
};

struct FactorEstimates {
  Matrix m_hat;                  // n x k0, stacked shared factors
  std::vector<Index> offsets;    // first row of each study in m_hat / y_c
  std::vector<Matrix> f_hat_s;   // n_s x q_s
  Matrix y_c;                    // n x p
  Matrix u_c;                    // n x k0
  Vector d_c;                    // k0
  Matrix v_c;                    // p x k0
  std::vector<Matrix> u_perp_s;  // n_s x q_s
  Matrix v_bar;                  // p x k0
  Vector p_tilde_spectrum;

  Index num_studies() const noexcept { return static_cast<Index>(f_hat_s.size()); }
  Index total_rows() const noexcept { return m_hat.rows(); }
  Index study_rows(Index s) const { return f_hat_s.at(static_cast<std::size_t>(s)).rows(); }

  auto m_hat_s(Index s) const {
    return m_hat.middleRows(offsets.at(static_cast<std::size_t>(s)), study_rows(s));
  }
  auto y_c_s(Index s) const {
    return y_c.middleRows(offsets.at(static_cast<std::size_t>(s)), study_rows(s));
  }
};

/// Leading k_s right singular vectors of one study, the basis of P_s.
inline Matrix study_right_basis(const Matrix& y_s, Index k_s) {
  const Index cap = std::min(y_s.rows(), y_s.cols());
  if (k_s < 1 || k_s > cap) {
    throw DimensionError("study_right_basis: k_s = " + std::to_string(k_s) +
                         " outside [1, " + std::to_string(cap) + "]");
  }
  SvdFactors f = truncated_svd(y_s, k_s);
  if (!(f.singvals(k_s - 1) >= 1e-12 * f.singvals(0)) || f.singvals(0) == 0.0) {
    throw DegenerateSignalError("study_right_basis: data has numerical rank below " +
                                std::to_string(k_s));
  }
  return std::move(f.right);
}

struct SharedBasis {
  Matrix v_bar;     // p x k0
  Vector spectrum;  // singular values of P_tilde, length min(p, sum k_s)
};

/// Leading k0 singular vectors of the (weighted) average of the study
/// projectors. `weights`, when given, must sum to 1; uniform otherwise.
inline SharedBasis shared_basis(const std::vector<Matrix>& bases, Index k0,
                                const std::vector<double>& weights = {}) {
  if (bases.empty()) throw DimensionError("shared_basis: no study bases");
  const Index p = bases.front().rows();
  Index total = 0;
  Index min_k = bases.front().cols();
  for (const auto& v : bases) {
    if (v.rows() != p) throw DimensionError("shared_basis: bases disagree on p");
    total += v.cols();
    min_k = std::min(min_k, v.cols());
  }
  if (k0 < 1 || k0 > min_k) {
    throw DimensionError("shared_basis: k0 = " + std::to_string(k0) +
                         " exceeds min_s k_s = " + std::to_string(min_k));
  }
  const auto S = static_cast<double>(bases.size());
  if (!weights.empty() && weights.size() != bases.size()) {
    throw DimensionError("shared_basis: one weight per study required");
  }
  // P_tilde = sum_s w_s V_s V_s^T = W W^T with W = [sqrt(w_s) V_s].
  Matrix w(p, total);
  Index col = 0;
  for (std::size_t s = 0; s < bases.size(); ++s) {
    const double ws = weights.empty() ? 1.0 / S : weights[s];
    w.middleCols(col, bases[s].cols()) = std::sqrt(ws) * bases[s];
    col += bases[s].cols();
  }
  const Index r = std::min(p, total);
  SvdFactors f = truncated_svd(w, r);
  SharedBasis out;
  out.spectrum = f.singvals.array().square();
  out.v_bar = f.left.leftCols(k0);
  return out;
}

struct SpecificFactors {
  Matrix f_hat;   // n_s x q_s
  Matrix u_perp;  // n_s x q_s
};

/// Study-specific factors from Y_s with the shared directions projected out.
inline SpecificFactors specific_factors(const Matrix& y_s, const Matrix& v_bar,
                                        Index q_s) {
  if (v_bar.rows() != y_s.cols()) {
    throw DimensionError("specific_factors: v_bar has wrong number of rows");
  }
  const Index n_s = y_s.rows();
  SpecificFactors out;
  if (q_s == 0) {
    out.f_hat = Matrix(n_s, 0);
    out.u_perp = Matrix(n_s, 0);
    return out;
  }
  if (q_s < 0 || q_s > std::min(n_s, y_s.cols() - v_bar.cols())) {
    throw DimensionError("specific_factors: q_s = " + std::to_string(q_s) +
                         " out of range");
  }
  const Matrix y_perp = y_s - (y_s * v_bar) * v_bar.transpose();
  SvdFactors f = truncated_svd(y_perp, q_s);
  if (!(f.singvals(q_s - 1) > 1e-12 * y_s.norm())) {
    throw DegenerateSignalError(
        "specific_factors: residual after removing shared directions has rank "
        "below q_s = " + std::to_string(q_s));
  }
  out.u_perp = std::move(f.left);
  out.f_hat = std::sqrt(static_cast<double>(n_s)) * out.u_perp;
  return out;
}

struct SharedFactors {
  Matrix m_hat;
  std::vector<Index> offsets;
  Matrix y_c;
  Matrix u_c;
  Vector d_c;
  Matrix v_c;
};

/// Shared factors from the stacked studies after regressing out each study's
/// specific factors.
inline SharedFactors shared_factors(const MultiStudyDataset& data,
                                    const std::vector<Matrix>& u_perp_s, Index k0) {
  const auto S = data.studies.size();
  if (u_perp_s.size() != S) {
    throw DimensionError("shared_factors: one U_perp per study required");
  }
  const Index p = data.num_outcomes();
  const Index n = data.total_rows();
  SharedFactors out;
  out.y_c.resize(n, p);
  Index row = 0;
  for (std::size_t s = 0; s < S; ++s) {
    const Matrix& y = data.studies[s];
    const Matrix& u = u_perp_s[s];
    if (u.rows() != y.rows()) {
      throw DimensionError("shared_factors: U_perp rows do not match study " +
                           std::to_string(s + 1));
    }
    out.offsets.push_back(row);
    if (u.cols() == 0) {
      out.y_c.middleRows(row, y.rows()) = y;
    } else {
      out.y_c.middleRows(row, y.rows()) = y - u * (u.transpose() * y);
    }
    row += y.rows();
  }
  if (k0 < 1 || k0 > std::min(n, p)) {
    throw DimensionError("shared_factors: k0 out of range");
  }
  SvdFactors f = truncated_svd(out.y_c, k0);
  if (f.singvals(0) == 0.0 || !(f.singvals(k0 - 1) > 1e-12 * f.singvals(0))) {
    throw DegenerateSignalError("shared_factors: shared signal has rank below k0 = " +
                                std::to_string(k0));
  }
  out.u_c = std::move(f.left);
  out.d_c = std::move(f.singvals);
  out.v_c = std::move(f.right);
  out.m_hat = std::sqrt(static_cast<double>(n)) * out.u_c;
  return out;
}

inline std::vector<double> projection_weights(const MultiStudyDataset& data,
                                              ProjectionWeighting weighting) {
  std::vector<double> w;
  if (weighting == ProjectionWeighting::kUniform) return w;
  const double n = static_cast<double>(data.total_rows());
  for (const auto& y : data.studies) w.push_back(static_cast<double>(y.rows()) / n);
  return w;
}

/// Full factor-estimation pass for known latent dimensions.
inline FactorEstimates estimate_factors(const MultiStudyDataset& data,
                                        const LatentDims& dims,
                                        const SpectralOptions& options = {}) {
  data.validate();
  dims.validate(data);
  const auto S = data.studies.size();

  std::vector<Matrix> bases(S);
  parallel_for(S, options.threads, [&](std::size_t s) {
    bases[s] = study_right_basis(data.studies[s], dims.k_s[s]);
  });
  SharedBasis shared = shared_basis(bases, dims.k0,
                                    projection_weights(data, options.weighting));

  std::vector<SpecificFactors> specific(S);
  parallel_for(S, options.threads, [&](std::size_t s) {
    specific[s] = specific_factors(data.studies[s], shared.v_bar, dims.q_s[s]);
  });

  std::vector<Matrix> u_perp(S);
  for (std::size_t s = 0; s < S; ++s) u_perp[s] = specific[s].u_perp;
  SharedFactors sf = shared_factors(data, u_perp, dims.k0);

  FactorEstimates fe;
  fe.m_hat = std::move(sf.m_hat);
  fe.offsets = std::move(sf.offsets);
  fe.y_c = std::move(sf.y_c);
  fe.u_c = std::move(sf.u_c);
  fe.d_c = std::move(sf.d_c);
  fe.v_c = std::move(sf.v_c);
  fe.u_perp_s = std::move(u_perp);
  for (auto& sp : specific) fe.f_hat_s.push_back(std::move(sp.f_hat));
  fe.v_bar = std::move(shared.v_bar);
  fe.p_tilde_spectrum = std::move(shared.spectrum);
  return fe;
}

}  // namespace blast
