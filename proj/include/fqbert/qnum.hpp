#pragma once

// Symmetric linear quantization numerics: clip/scale/round, EMA calibration,
// 32-bit bias quantization, 8-bit scale factors and integer requantization.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fqbert/error.hpp"

namespace fqbert {

enum class Rounding { kHalfAwayFromZero };

inline constexpr double kDefaultEmaDecay = 0.99;

// Largest magnitude produced by k-bit symmetric quantization, 2^(k-1) - 1.
constexpr int32_t symmetric_rail(int bits) { return (int32_t{1} << (bits - 1)) - 1; }

// Per-tensor quantization policy. Clipping is symmetric: MIN = -MAX.
struct QuantSpec {
  int bits = 8;
  double max_clip = 1.0;
  double ema_decay = kDefaultEmaDecay;
  std::optional<double> ema_state;
  Rounding rounding = Rounding::kHalfAwayFromZero;

  double min_clip() const { return -max_clip; }
  void validate() const;
};

// Scale factor stored as an 8-bit normalized mantissa and a power-of-two
// exponent: value = mantissa * 2^exp2, mantissa in [128, 255].
struct Scale8 {
  uint8_t mantissa = 128;
  int8_t exp2 = -7;

  double value() const { return std::ldexp(static_cast<double>(mantissa), exp2); }
  bool operator==(const Scale8&) const = default;
};

// Fixed-point requantization factor: value = multiplier * 2^-shift, with the
// multiplier normalized to [2^30, 2^31).
struct RequantMul {
  int32_t multiplier = int32_t{1} << 30;
  int shift = 30;

  double value() const { return std::ldexp(static_cast<double>(multiplier), -shift); }
  bool operator==(const RequantMul&) const = default;
};

// Integer tensor with its storage format and counts-per-unit scale. The real
// value of element i is data[i] / scale.
struct QTensor {
  std::vector<int32_t> data;
  int bits = 8;
  bool is_signed = true;
  std::vector<std::size_t> shape;
  double scale = 1.0;

  std::size_t size() const { return data.size(); }
  int32_t min_value() const;
  int32_t max_value() const;
  // True if every element fits (bits, is_signed).
  bool in_range() const;
};

// Bits per stored weight: 2-bit codes pack four to a byte, 3- and 4-bit codes
// two to a byte, wider codes one per byte.
constexpr int storage_bits(int bits) { return bits <= 2 ? 2 : bits <= 4 ? 4 : 8; }

inline int64_t round_half_away(double x) { return std::llround(x); }

int32_t saturate(int64_t v, int bits, bool is_signed);

double clamp(double x, double lo, double hi);

double ema_update(std::optional<double> state, double batch_max, double decay);
double act_scale(const QuantSpec& spec);
Scale8 quantize_scale8(double s);

// Quantizes one real value: round(clamp(x) * scale), saturated to the
// symmetric k-bit range.
int32_t quantize_value(double x, const QuantSpec& spec, double scale);

template <std::floating_point T>
double weight_scale(std::span<const T> w, int bits) {
  if (bits < 2 || bits > 8) throw ArgumentError("weight_scale: bitwidth must be in [2, 8]");
  double m = 0.0;
  for (T v : w) m = std::max(m, std::abs(static_cast<double>(v)));
  if (w.empty() || m == 0.0) throw DegenerateScaleError("weight_scale: tensor is empty or all zero");
  return symmetric_rail(bits) / m;
}

template <std::floating_point T>
QTensor quantize(std::span<const T> x, const QuantSpec& spec, Scale8 s,
                 std::vector<std::size_t> shape = {}) {
  QTensor q;
  q.bits = spec.bits;
  q.is_signed = true;
  q.scale = s.value();
  q.shape = shape.empty() ? std::vector<std::size_t>{x.size()} : std::move(shape);
  q.data.reserve(x.size());
  for (T v : x) q.data.push_back(quantize_value(static_cast<double>(v), spec, q.scale));
  return q;
}

std::vector<double> dequantize(const QTensor& q);

struct BiasQuant {
  QTensor bias;             // 32-bit, scale = s_a * s_w
  std::size_t saturated = 0;  // elements clipped at the 32-bit rails
};

template <std::floating_point T>
BiasQuant quantize_bias(std::span<const T> b, Scale8 s_a, Scale8 s_w) {
  BiasQuant out;
  out.bias.bits = 32;
  out.bias.is_signed = true;
  out.bias.shape = {b.size()};
  out.bias.scale = s_a.value() * s_w.value();
  out.bias.data.reserve(b.size());
  for (T v : b) {
    const double r = std::round(static_cast<double>(v) * out.bias.scale);
    if (r > INT32_MAX || r < INT32_MIN) {
      ++out.saturated;
      out.bias.data.push_back(r > 0 ? INT32_MAX : INT32_MIN);
    } else {
      out.bias.data.push_back(static_cast<int32_t>(r));
    }
  }
  return out;
}

// s_f = s_y / (s_a * s_w), computed exactly from the 8-bit scales.
RequantMul requant_multiplier(Scale8 s_a, Scale8 s_w, Scale8 s_y);
// Normalizes an arbitrary positive real factor.
RequantMul requant_multiplier(double s_f);

// y = saturate(round((acc + bias) * m * 2^-shift)). The sum saturates at 32
// bits before the 64-bit product.
int32_t requantize(int32_t acc, int32_t bias, RequantMul rm, int out_bits, bool out_signed);

}  // namespace fqbert
