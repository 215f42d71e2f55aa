#pragma once

// Counter-based random streams.
//
// A stream is identified by a base seed and a path of labels. The path is
// hashed into a Philox4x32-10 key plus the upper half of the counter, so two
// streams with the same (seed, path) emit identical sequences no matter which
// thread draws from them or in which order streams are created.

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

namespace blast {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void mulhilo32(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                      std::uint32_t& lo) noexcept {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

// Philox4x32 with 10 rounds (Salmon et al., SC'11).
inline std::array<std::uint32_t, 4> philox4x32_10(
    std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) noexcept {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo32(kM0, ctr[0], hi0, lo0);
    mulhilo32(kM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

}  // namespace detail

/// One element of a stream path: either a name or an index.
class StreamLabel {
 public:
  StreamLabel(const char* s) : value_(std::string(s)) {}
  StreamLabel(std::string s) : value_(std::move(s)) {}
  StreamLabel(std::string_view s) : value_(std::string(s)) {}
  template <typename I, typename = std::enable_if_t<std::is_integral_v<I>>>
  StreamLabel(I i) : value_(static_cast<std::uint64_t>(i)) {}

  std::uint64_t hash() const noexcept {
    if (const auto* s = std::get_if<std::string>(&value_)) {
      return detail::splitmix64(detail::fnv1a64(*s) ^ 0x5354524eULL);
    }
    return detail::splitmix64(std::get<std::uint64_t>(value_) ^ 0x494e4458ULL);
  }

  std::string to_string() const {
    if (const auto* s = std::get_if<std::string>(&value_)) return *s;
    return std::to_string(std::get<std::uint64_t>(value_));
  }

  bool operator==(const StreamLabel&) const = default;

 private:
  std::variant<std::string, std::uint64_t> value_;
};

using StreamPath = std::vector<StreamLabel>;

/// Deterministic random stream. Value type; copy to fork, never share
/// mutably across threads.
class RngStream {
 public:
  RngStream(std::uint64_t base_seed, StreamPath path)
      : base_seed_(base_seed), path_(std::move(path)) {
    rekey();
  }

  std::uint64_t base_seed() const noexcept { return base_seed_; }
  const StreamPath& path() const noexcept { return path_; }

  /// New stream whose path is this path followed by `labels`. The parent's
  /// position is irrelevant to the child.
  RngStream substream(std::initializer_list<StreamLabel> labels) const {
    StreamPath p = path_;
    p.insert(p.end(), labels.begin(), labels.end());
    return RngStream(base_seed_, std::move(p));
  }

  std::uint32_t next_u32() {
    if (buffer_pos_ == 4) refill();
    return buffer_[buffer_pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    // Lemire-style rejection keeps the result exactly uniform.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Gamma(shape, 1) by Marsaglia-Tsang.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0);
      return g * std::pow(uniform(), 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  /// InverseGamma with the shape/rate parameterization (mean rate/(shape-1)).
  double inverse_gamma(double shape, double rate) { return rate / gamma(shape); }

 private:
  void rekey() {
    std::uint64_t h = detail::splitmix64(base_seed_);
    for (const auto& label : path_) h = detail::splitmix64(h ^ label.hash());
    const std::uint64_t h2 = detail::splitmix64(h ^ 0x6b657932ULL);
    key_ = {static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    ctr_hi_ = h2;
    counter_ = 0;
    buffer_pos_ = 4;
    has_spare_ = false;
  }

  void refill() {
    const std::array<std::uint32_t, 4> ctr = {
        static_cast<std::uint32_t>(counter_),
        static_cast<std::uint32_t>(counter_ >> 32),
        static_cast<std::uint32_t>(ctr_hi_),
        static_cast<std::uint32_t>(ctr_hi_ >> 32)};
    buffer_ = detail::philox4x32_10(ctr, key_);
    ++counter_;
    buffer_pos_ = 0;
  }

  std::uint64_t base_seed_;
  StreamPath path_;
  std::array<std::uint32_t, 2> key_{};
  std::uint64_t ctr_hi_ = 0;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int buffer_pos_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline RngStream derive_stream(std::uint64_t base_seed,
                               std::initializer_list<StreamLabel> path) {
  return RngStream(base_seed, StreamPath(path));
}

inline RngStream derive_stream(std::uint64_t base_seed, StreamPath path) {
  return RngStream(base_seed, std::move(path));
}

/// Derives a child seed, e.g. for per-replicate scenarios.
inline std::uint64_t derive_seed(std::uint64_t base_seed,
                                 std::initializer_list<StreamLabel> path) {
  return derive_stream(base_seed, path).next_u64();
}

}  // namespace blast
