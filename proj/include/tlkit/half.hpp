#pragma once

#include <bit>
#include <cstdint>

namespace tlkit {

// IEEE 754 binary16 conversions. Round-to-nearest-even on the way down;
// exact on the way up.

inline uint16_t float_to_half(float f) {
  const uint32_t x = std::bit_cast<uint32_t>(f);
  const uint32_t sign = (x >> 16) & 0x8000u;
  uint32_t mant = x & 0x007fffffu;
  const uint32_t exp_f = (x >> 23) & 0xffu;

  if (exp_f == 0xffu) {  // inf / nan
    return uint16_t(sign | 0x7c00u | (mant ? 0x0200u : 0u));
  }
  const int32_t exp_h = int32_t(exp_f) - 127 + 15;
  if (exp_h >= 31) return uint16_t(sign | 0x7c00u);  // overflow -> inf
  if (exp_h <= 0) {
    if (exp_h < -10) return uint16_t(sign);  // underflow -> signed zero
    mant |= 0x00800000u;
    const uint32_t shift = uint32_t(14 - exp_h);  // 14..24
    uint32_t half_mant = mant >> shift;
    const uint32_t rem = mant & ((1u << shift) - 1u);
    const uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
    return uint16_t(sign | half_mant);
  }
  uint16_t h = uint16_t(sign | (uint32_t(exp_h) << 10) | (mant >> 13));
  const uint32_t rem = mant & 0x1fffu;
  // Mantissa carry on round-up rolls into the exponent with the right value.
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
  return h;
}

inline float half_to_float(uint16_t h) {
  const uint32_t sign = uint32_t(h & 0x8000u) << 16;
  const uint32_t exp_h = (h >> 10) & 0x1fu;
  uint32_t mant = h & 0x03ffu;

  if (exp_h == 0x1fu) {  // inf / nan
    return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  }
  if (exp_h == 0) {
    if (mant == 0) return std::bit_cast<float>(sign);
    // Subnormal half: renormalize.
    int e = -1;
    do {
      ++e;
      mant <<= 1;
    } while ((mant & 0x0400u) == 0);
    const uint32_t exp_f = uint32_t(127 - 15 - e);
    return std::bit_cast<float>(sign | (exp_f << 23) | ((mant & 0x03ffu) << 13));
  }
  const uint32_t exp_f = exp_h - 15 + 127;
  return std::bit_cast<float>(sign | (exp_f << 23) | (mant << 13));
}

inline uint16_t double_to_half(double v) { return float_to_half(float(v)); }

}  // namespace tlkit
