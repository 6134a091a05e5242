#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>

namespace lpu {

/// IEEE 754 binary16 storage type. Arithmetic happens in wider types; this
/// only carries bits and performs round-to-nearest-even conversion.
struct Half {
  std::uint16_t bits = 0;

  constexpr Half() = default;
  static constexpr Half from_bits(std::uint16_t b) {
    Half h;
    h.bits = b;
    return h;
  }
  explicit Half(float f) : bits(encode(f)) {}
  explicit Half(double d) : bits(encode_double(d)) {}

  float to_float() const { return decode(bits); }
  double to_double() const { return static_cast<double>(decode(bits)); }

  bool is_nan() const { return (bits & 0x7C00u) == 0x7C00u && (bits & 0x03FFu) != 0; }
  bool is_inf() const { return (bits & 0x7FFFu) == 0x7C00u; }
  bool is_finite() const { return (bits & 0x7C00u) != 0x7C00u; }

  friend constexpr bool operator==(Half a, Half b) { return a.bits == b.bits; }

  static float decode(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t out;
    if (exp == 0) {
      if (mant == 0) {
        out = sign;
      } else {
        // subnormal: renormalize
        int e = -1;
        do {
          ++e;
          mant <<= 1;
        } while ((mant & 0x400u) == 0);
        mant &= 0x3FFu;
        out = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | (mant << 13);
      }
    } else if (exp == 0x1F) {
      out = sign | 0x7F800000u | (mant << 13);
    } else {
      out = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(out);
  }

  static std::uint16_t encode(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t absx = x & 0x7FFFFFFFu;
    if (absx >= 0x7F800000u) {
      return sign | (absx > 0x7F800000u ? 0x7E00u : 0x7C00u);
    }
    if (absx >= 0x477FF000u) return sign | 0x7C00u;  // rounds to >= 65520 -> inf
    if (absx < 0x33000001u) return sign;              // < 2^-25 (+half ulp) -> 0
    int exp = static_cast<int>(absx >> 23);
    std::uint32_t mant = (absx & 0x7FFFFFu) | 0x800000u;
    int shift;
    std::uint32_t hexp;
    if (exp < 113) {  // subnormal half
      shift = 113 - exp + 13;
      hexp = 0;
    } else {
      shift = 13;
      hexp = static_cast<std::uint32_t>(exp - 112);
      mant &= 0x7FFFFFu;
    }
    std::uint32_t q = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (q & 1u))) ++q;
    // carry from mantissa rounding propagates into exponent naturally
    return sign | static_cast<std::uint16_t>((hexp << 10) + q);
  }

  // Rounds a double directly to half (no intermediate float rounding).
  static std::uint16_t encode_double(double d) {
    if (std::isnan(d)) return 0x7E00u;
    const std::uint16_t sign = std::signbit(d) ? 0x8000u : 0u;
    const double a = std::fabs(d);
    if (a >= 65520.0) return sign | 0x7C00u;
    if (a == 0.0) return sign;
    int e;
    std::frexp(a, &e);  // a = m * 2^e, m in [0.5,1)
    int exp_unb = e - 1;
    if (exp_unb < -14) exp_unb = -14;  // subnormal range shares the min exponent
    const double scale = std::ldexp(1.0, 10 - exp_unb);
    const double scaled = a * scale;  // exact: power-of-two scaling
    double q = std::nearbyint(scaled);  // default rounding mode is nearest-even
    auto qi = static_cast<std::uint32_t>(q);
    std::uint32_t biased = static_cast<std::uint32_t>(exp_unb + 15);
    if (qi < 0x400u) return sign | static_cast<std::uint16_t>(qi);  // subnormal
    if (qi >= 0x800u) {
      qi >>= 1;
      ++biased;
    }
    if (biased >= 31) return sign | 0x7C00u;
    return sign | static_cast<std::uint16_t>((biased << 10) | (qi & 0x3FFu));
  }
};

inline Half to_half(double d) { return Half(d); }
inline double to_double(Half h) { return h.to_double(); }

}  // namespace lpu
