#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "blast/numerics.hpp"
#include "blast/rng.hpp"
#include "blast/spectral.hpp"

namespace blast::testing {

inline Matrix gaussian(Index rows, Index cols, RngStream stream, double sd = 1.0) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = sd * stream.normal();
  return m;
}

inline Matrix gaussian(Index rows, Index cols, std::uint64_t seed, double sd = 1.0) {
  return gaussian(rows, cols, derive_stream(seed, {"test", "gaussian"}), sd);
}

/// rows x cols with orthonormal columns.
inline Matrix orthonormal(Index rows, Index cols, std::uint64_t seed) {
  Eigen::HouseholderQR<Matrix> qr(gaussian(rows, cols, seed));
  return qr.householderQ() * Matrix::Identity(rows, cols);
}

/// Orthogonal projector onto the column span of `a` (full column rank).
inline Matrix projector(const Matrix& a) {
  Eigen::HouseholderQR<Matrix> qr(a);
  const Matrix q = qr.householderQ() * Matrix::Identity(a.rows(), a.cols());
  return q * q.transpose();
}

inline double max_abs(const Matrix& a) { return a.size() ? a.cwiseAbs().maxCoeff() : 0.0; }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("blast_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

/// Multi-study data Y_s = M_s L^T + F_s G_s^T + noise * E.
inline MultiStudyDataset low_rank_studies(Index S, Index n, Index p, Index k0, Index q,
                                          double noise, std::uint64_t seed) {
  MultiStudyDataset d;
  const Matrix lambda = gaussian(p, k0, derive_stream(seed, {"lambda"}));
  for (Index s = 0; s < S; ++s) {
    const Matrix gamma = gaussian(p, q, derive_stream(seed, {"gamma", s}));
    Matrix y = gaussian(n, k0, derive_stream(seed, {"m", s})) * lambda.transpose();
    if (q > 0) y += gaussian(n, q, derive_stream(seed, {"f", s})) * gamma.transpose();
    y += gaussian(n, p, derive_stream(seed, {"e", s}), noise);
    d.studies.push_back(std::move(y));
  }
  for (Index j = 0; j < p; ++j) d.outcome_names.push_back("y" + std::to_string(j + 1));
  return d;
}

}  // namespace blast::testing
