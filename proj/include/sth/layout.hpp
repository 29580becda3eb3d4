#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

#include "sth/error.hpp"

namespace sth {

/// Non-negative rational, used for the temporal proportion p.
struct Ratio {
  std::int64_t num = 0;
  std::int64_t den = 1;

  constexpr Ratio() = default;
  constexpr Ratio(std::int64_t n, std::int64_t d) : num(n), den(d) {}

  static Ratio normalized(std::int64_t n, std::int64_t d) {
    require(d > 0 && n >= 0, ErrorKind::Argument, "ratio must be non-negative with positive denominator");
    const auto g = std::gcd(n, d);
    return g == 0 ? Ratio{0, 1} : Ratio{n / g, d / g};
  }

  /// Accepts "1/4", "0", "1", or a decimal such as "0.25".
  static Ratio parse(const std::string& text) {
    const auto slash = text.find('/');
    try {
      if (slash != std::string::npos) {
        std::size_t used_n = 0, used_d = 0;
        const auto n = std::stoll(text.substr(0, slash), &used_n);
        const auto d = std::stoll(text.substr(slash + 1), &used_d);
        require(used_n == slash && used_d == text.size() - slash - 1, ErrorKind::Argument, [&] { return std::string("bad ratio " + text); });
        return normalized(n, d);
      }
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      require(used == text.size(), ErrorKind::Argument, [&] { return std::string("bad ratio " + text); });
      for (std::int64_t d = 1; d <= 1024; ++d) {
        const double n = v * static_cast<double>(d);
        const auto r = static_cast<std::int64_t>(n + 0.5);
        if (std::abs(n - static_cast<double>(r)) < 1e-9) return normalized(r, d);
      }
    } catch (const std::logic_error&) {
    }
    fail(ErrorKind::Argument, "cannot parse ratio \"" + text + "\"");
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool is_zero() const { return num == 0; }
  std::string str() const { return num == 0 ? "0" : (den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den)); }
  bool operator==(const Ratio& o) const { return num * o.den == o.num * den; }
};

enum class Variant { Hybrid, Merge };

inline const char* to_string(Variant v) { return v == Variant::Hybrid ? "hybrid" : "merge"; }

/// Channel-interleaving plan of one STH layer.
///
/// With p = 1/G there are G hybrid-kernel types. Output channels
/// [g*C_o/G, (g+1)*C_o/G) use type g, whose temporal kernels read input
/// channels [g*pC_i, (g+1)*pC_i); the remaining input channels go through
/// spatial kernels. The merge variant pins every output channel to type 0.
/// p = 0 is the plain 2D layer (no temporal span).
struct HybridLayout {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  Ratio p;
  std::size_t groups = 1;
  std::size_t span_width = 0;
  Variant variant = Variant::Hybrid;

  std::size_t channels_per_type() const { return c_out / groups; }

  std::size_t type_of_output_channel(std::size_t m) const {
    return variant == Variant::Merge ? 0 : m / channels_per_type();
  }

  std::pair<std::size_t, std::size_t> temporal_span(std::size_t g) const {
    return {g * span_width, (g + 1) * span_width};
  }

  bool is_temporal(std::size_t m, std::size_t c) const {
    const auto [lo, hi] = temporal_span(type_of_output_channel(m));
    return c >= lo && c < hi;
  }

  /// Output-channel block [begin, end) that shares one type (all of C_o for merge).
  std::pair<std::size_t, std::size_t> output_block(std::size_t g) const {
    if (variant == Variant::Merge) return {0, c_out};
    return {g * channels_per_type(), (g + 1) * channels_per_type()};
  }

  std::size_t block_count() const { return variant == Variant::Merge ? 1 : groups; }
};

/// Builds a layout for p in {0} U {1/G : G | c_in, G | c_out}. p = 1 (every
/// kernel temporal) is rejected unless `allow_full` is set.
inline HybridLayout build_layout(std::size_t c_in, std::size_t c_out, Ratio p, Variant variant = Variant::Hybrid,
                                 bool allow_full = false) {
  require(c_in >= 1 && c_out >= 1, ErrorKind::Layout, "channel counts must be >= 1");
  HybridLayout l;
  l.c_in = c_in;
  l.c_out = c_out;
  l.p = Ratio::normalized(p.num, p.den);
  l.variant = variant;
  if (l.p.is_zero()) {
    l.groups = 1;
    l.span_width = 0;
    return l;
  }
  require(l.p.num == 1, ErrorKind::Layout, [&] { return std::string("p must be of the form 1/G, got " + l.p.str()); });
  const auto groups = static_cast<std::size_t>(l.p.den);
  require(groups > 1 || allow_full, ErrorKind::Layout, "p = 1 (all-temporal kernels) is not enabled");
  require(c_in % groups == 0, ErrorKind::Layout, [&] { return std::string("c_in " + std::to_string(c_in) + " not divisible by G=" + std::to_string(groups)); });
  if (variant == Variant::Hybrid)
    require(c_out % groups == 0, ErrorKind::Layout, [&] { return std::string("c_out " + std::to_string(c_out) + " not divisible by G=" + std::to_string(groups)); });
  l.groups = groups;
  l.span_width = c_in / groups;
  return l;
}

/// Dilation of the temporal kernel for the l-th STH layer (network order).
inline int dilation_schedule(std::size_t layer_index, bool dilated = true) {
  return dilated ? 1 + static_cast<int>(layer_index % 3) : 1;
}

}  // namespace sth
