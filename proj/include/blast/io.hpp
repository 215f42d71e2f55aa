#pragma once

// File formats: per-study CSV matrices, plain numeric CSV, and the packed
// binary draw format.
//
// Binary draws (little-endian):
//   "BLASTDRW"            8 bytes
//   version               u32 (= 1)
//   reserved              u32 (= 0)
//   block count           u64
//   per block:  rows u64, cols u64, rows*cols f64 in row-major order
// Draw t contributes blocks lambda (p x k0), gamma_1 .. gamma_S (p x q_s),
// sigma_sq (p x 1), in that order.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "blast/error.hpp"
#include "blast/numerics.hpp"
#include "blast/posterior.hpp"
#include "blast/spectral.hpp"

namespace blast::io {

namespace fs = std::filesystem;

inline constexpr char kDrawMagic[8] = {'B', 'L', 'A', 'S', 'T', 'D', 'R', 'W'};
inline constexpr std::uint32_t kDrawVersion = 1;

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? line.npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string unquote(std::string_view s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return std::string(s);
}

inline std::ofstream open_out(const fs::path& path, bool binary = false) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace detail

struct CsvTable {
  std::vector<std::string> header;
  Matrix values;
};

/// Reads a numeric CSV whose first line is a header. Every data row must have
/// as many fields as the header; blank lines are skipped.
inline CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  const std::string file = path.string();
  std::string line;
  std::size_t line_no = 0;
  CsvTable table;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) break;
  }
  if (detail::trim(line).empty()) throw ParseError(file, line_no, 1, "missing header");
  for (auto f : detail::split(line)) {
    table.header.push_back(detail::unquote(f));
  }
  const std::size_t cols = table.header.size();
  std::vector<double> data;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split(line);
    if (fields.size() != cols) {
      throw ParseError(file, line_no, std::min(fields.size(), cols) + 1,
                       "expected " + std::to_string(cols) + " fields, found " +
                           std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < cols; ++c) {
      const auto f = fields[c];
      double v = 0.0;
      const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
      if (f.empty() || res.ec != std::errc() || res.ptr != f.data() + f.size()) {
        throw ParseError(file, line_no, c + 1, "not a number: '" + std::string(f) + "'");
      }
      if (!std::isfinite(v)) throw ParseError(file, line_no, c + 1, "non-finite value");
      data.push_back(v);
    }
    ++rows;
  }
  table.values.resize(static_cast<Index>(rows), static_cast<Index>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      table.values(static_cast<Index>(r), static_cast<Index>(c)) = data[r * cols + c];
  return table;
}

inline void write_csv(const fs::path& path, const std::vector<std::string>& header,
                      const Matrix& values) {
  if (static_cast<Index>(header.size()) != values.cols()) {
    throw DimensionError("write_csv: header length does not match column count");
  }
  auto out = detail::open_out(path);
  std::string buf;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c) buf += ',';
    buf += header[c];
  }
  buf += '\n';
  for (Index r = 0; r < values.rows(); ++r) {
    for (Index c = 0; c < values.cols(); ++c) {
      if (c) buf += ',';
      buf += format_double(values(r, c));
    }
    buf += '\n';
    if (buf.size() > (1u << 20)) {
      out << buf;
      buf.clear();
    }
  }
  out << buf;
  if (!out) throw ConfigError("write failed for " + path.string());
}

/// Header "name_1, ..., name_k".
inline std::vector<std::string> numbered(const std::string& stem, Index count) {
  std::vector<std::string> h;
  for (Index i = 0; i < count; ++i) h.push_back(stem + std::to_string(i + 1));
  return h;
}

inline fs::path study_file(const fs::path& dir, std::size_t s) {
  return dir / ("study_" + std::to_string(s + 1) + ".csv");
}

/// Loads study_1.csv, study_2.csv, ... from `dir`. All headers must agree.
inline MultiStudyDataset read_study_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("data directory not found: " + dir.string());
  MultiStudyDataset data;
  for (std::size_t s = 0;; ++s) {
    const fs::path path = study_file(dir, s);
    if (!fs::exists(path)) break;
    CsvTable t = read_csv(path);
    if (s == 0) {
      data.outcome_names = t.header;
    } else if (t.header != data.outcome_names) {
      throw DataError(path.string() + ": header differs from study_1.csv");
    }
    data.studies.push_back(std::move(t.values));
  }
  if (data.studies.empty()) throw DataError("no study_1.csv in " + dir.string());
  data.validate();
  return data;
}

inline void write_study_dir(const fs::path& dir, const MultiStudyDataset& data) {
  const auto names = data.outcome_names.empty() ? numbered("y", data.num_outcomes())
                                                : data.outcome_names;
  for (std::size_t s = 0; s < data.studies.size(); ++s) {
    write_csv(study_file(dir, s), names, data.studies[s]);
  }
}

inline Vector read_vector_csv(const fs::path& path) {
  CsvTable t = read_csv(path);
  if (t.values.cols() != 1) throw DataError(path.string() + ": expected a single column");
  return t.values.col(0);
}

// ---------------------------------------------------------------------------
// Binary draws

namespace detail {

template <typename T>
void put_le(std::string& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  buf.append(bytes, sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::string& file) {
  char bytes[sizeof(T)];
  if (!in.read(bytes, sizeof(T))) throw DataError(file + ": truncated draw file");
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

inline void put_block(std::string& buf, const Matrix& m) {
  put_le<std::uint64_t>(buf, static_cast<std::uint64_t>(m.rows()));
  put_le<std::uint64_t>(buf, static_cast<std::uint64_t>(m.cols()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) put_le<double>(buf, m(r, c));
}

}  // namespace detail

inline void write_draws_binary(const fs::path& path, const std::vector<PosteriorDraw>& draws) {
  auto out = detail::open_out(path, true);
  std::string buf(kDrawMagic, sizeof(kDrawMagic));
  detail::put_le<std::uint32_t>(buf, kDrawVersion);
  detail::put_le<std::uint32_t>(buf, 0);
  std::uint64_t blocks = 0;
  for (const auto& d : draws) blocks += 2 + d.gamma_tilde_s.size();
  detail::put_le<std::uint64_t>(buf, blocks);
  for (const auto& d : draws) {
    detail::put_block(buf, d.lambda_tilde);
    for (const auto& g : d.gamma_tilde_s) detail::put_block(buf, g);
    detail::put_block(buf, Matrix(d.sigma_tilde_sq));
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    buf.clear();
  }
  if (!out) throw ConfigError("write failed for " + path.string());
}

/// Reads every block of a draw file.
inline std::vector<Matrix> read_draw_blocks(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const std::string file = path.string();
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kDrawMagic, 8) != 0) {
    throw DataError(file + ": not a BLASTDRW file");
  }
  const auto version = detail::get_le<std::uint32_t>(in, file);
  if (version != kDrawVersion) throw DataError(file + ": unsupported version");
  (void)detail::get_le<std::uint32_t>(in, file);
  const auto count = detail::get_le<std::uint64_t>(in, file);
  std::vector<Matrix> blocks;
  for (std::uint64_t b = 0; b < count; ++b) {
    const auto rows = detail::get_le<std::uint64_t>(in, file);
    const auto cols = detail::get_le<std::uint64_t>(in, file);
    if (rows > (1ull << 32) || cols > (1ull << 32)) throw DataError(file + ": corrupt block shape");
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = detail::get_le<double>(in, file);
    blocks.push_back(std::move(m));
  }
  return blocks;
}

inline std::vector<PosteriorDraw> read_draws_binary(const fs::path& path, std::size_t studies) {
  const auto blocks = read_draw_blocks(path);
  const std::size_t per = studies + 2;
  if (blocks.size() % per != 0) throw DataError(path.string() + ": block count mismatch");
  std::vector<PosteriorDraw> draws;
  for (std::size_t i = 0; i < blocks.size(); i += per) {
    PosteriorDraw d;
    d.lambda_tilde = blocks[i];
    for (std::size_t s = 0; s < studies; ++s) d.gamma_tilde_s.push_back(blocks[i + 1 + s]);
    d.sigma_tilde_sq = blocks[i + per - 1].col(0);
    draws.push_back(std::move(d));
  }
  return draws;
}

/// One CSV per component per draw: draw_<t>_lambda.csv, draw_<t>_gamma_<s>.csv,
/// draw_<t>_sigma_sq.csv (t and s 1-based).
inline void write_draws_csv(const fs::path& dir, const std::vector<PosteriorDraw>& draws) {
  for (std::size_t t = 0; t < draws.size(); ++t) {
    const std::string stem = "draw_" + std::to_string(t + 1);
    const auto& d = draws[t];
    write_csv(dir / (stem + "_lambda.csv"), numbered("l", d.lambda_tilde.cols()), d.lambda_tilde);
    for (std::size_t s = 0; s < d.gamma_tilde_s.size(); ++s) {
      if (d.gamma_tilde_s[s].cols() == 0) continue;
      write_csv(dir / (stem + "_gamma_" + std::to_string(s + 1) + ".csv"),
                numbered("g", d.gamma_tilde_s[s].cols()), d.gamma_tilde_s[s]);
    }
    write_csv(dir / (stem + "_sigma_sq.csv"), {"sigma_sq"}, Matrix(d.sigma_tilde_sq));
  }
}

// ---------------------------------------------------------------------------
// Point-estimate bundle

/// Files written by `fit` that carry the low-rank-plus-diagonal estimates:
/// mu_lambda.csv, mu_gamma_<s>.csv (absent when q_s = 0) and diagonals.csv.
inline void write_point_estimates(const fs::path& dir, const PosteriorSpec& spec,
                                  const PointEstimates& pe) {
  write_csv(dir / "mu_lambda.csv", numbered("l", spec.mu_lambda.cols()), spec.mu_lambda);
  for (std::size_t s = 0; s < spec.mu_gamma_s.size(); ++s) {
    if (spec.mu_gamma_s[s].cols() == 0) continue;
    write_csv(dir / ("mu_gamma_" + std::to_string(s + 1) + ".csv"),
              numbered("g", spec.mu_gamma_s[s].cols()), spec.mu_gamma_s[s]);
  }
  const Index p = spec.num_outcomes();
  const auto S = static_cast<Index>(pe.specific.size());
  std::vector<std::string> header = {"v_j", "delta_sq", "sigma_sq_hat", "shared_diag"};
  for (Index s = 0; s < S; ++s) header.push_back("specific_diag_" + std::to_string(s + 1));
  Matrix diag(p, 4 + S);
  diag.col(0) = spec.v_j;
  diag.col(1) = spec.delta_sq;
  diag.col(2) = pe.sigma_sq_hat;
  diag.col(3) = pe.shared.diag_add;
  for (Index s = 0; s < S; ++s) diag.col(4 + s) = pe.specific[static_cast<std::size_t>(s)].diag_add;
  write_csv(dir / "diagonals.csv", header, diag);
}

inline PointEstimates read_point_estimates(const fs::path& dir, std::size_t studies) {
  PointEstimates pe;
  const Matrix mu_lambda = read_csv(dir / "mu_lambda.csv").values;
  const CsvTable diag = read_csv(dir / "diagonals.csv");
  const Index p = mu_lambda.rows();
  if (diag.values.rows() != p || diag.values.cols() != static_cast<Index>(4 + studies)) {
    throw DataError(dir.string() + ": diagonals.csv does not match the fit");
  }
  pe.shared.lambda_hat = mu_lambda;
  pe.shared.gamma_hat = Matrix(p, 0);
  pe.shared.diag_add = diag.values.col(3);
  pe.sigma_sq_hat = diag.values.col(2);
  for (std::size_t s = 0; s < studies; ++s) {
    CovarianceModel c;
    c.lambda_hat = Matrix(p, 0);
    const fs::path g = dir / ("mu_gamma_" + std::to_string(s + 1) + ".csv");
    c.gamma_hat = fs::exists(g) ? read_csv(g).values : Matrix(p, 0);
    if (c.gamma_hat.rows() != p) throw DataError(g.string() + ": wrong row count");
    c.diag_add = diag.values.col(4 + static_cast<Index>(s));
    pe.specific.push_back(std::move(c));
  }
  return pe;
}

}  // namespace blast::io
