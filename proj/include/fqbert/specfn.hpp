#pragma once

// Special-function cores: the softmax core (max subtraction, 256-entry
// exponential LUT, integer normalization) and the LN core (three-stage
// fixed-point layer normalization).

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "fqbert/qnum.hpp"

namespace fqbert {

// entries[i] = round(255 * exp(-i * input_step)). Index i stands for an input
// i steps below the row maximum.
struct ExpLut {
  std::array<uint8_t, 256> entries{};
  double input_step = 1.0;
};

ExpLut build_exp_lut(double delta);

// Little-endian index order, one byte per entry.
std::array<uint8_t, 256> export_lut_blob(const ExpLut& lut);

// Softmax outputs are unsigned Q0.8: 256 counts per unit, saturated to 255.
inline constexpr double kSoftmaxOutScale = 256.0;

// `row` is a signed 8-bit QTensor. Returns unsigned 8-bit probabilities.
QTensor softmax_q(const QTensor& row, const ExpLut& lut);

// Q16.16 fixed point.
inline constexpr int kQ16FracBits = 16;
inline constexpr int32_t kQ16One = int32_t{1} << kQ16FracBits;
inline constexpr int kRsqrtIterations = 4;

// 1/sqrt(v) by Newton-Raphson, y <- y * (3 - v*y^2) / 2, seeded with a power
// of two chosen so that v*y0^2 lies in [0.5, 2).
int32_t rsqrt_fixed(int32_t v, int iters = kRsqrtIterations);

// LN scale and shift as signed Q1.6 bytes, range (-2, 2).
struct LnParams {
  std::vector<int32_t> gamma;
  std::vector<int32_t> beta;
  int32_t epsilon = kQ16One >> 10;  // 2^-10 in Q16.16

  std::size_t size() const { return gamma.size(); }
};

inline constexpr int kLnParamFracBits = 6;

struct LnParamQuant {
  LnParams params;
  std::size_t saturated = 0;
};

template <std::floating_point T>
LnParamQuant quantize_ln_params(std::span<const T> gamma, std::span<const T> beta) {
  if (gamma.size() != beta.size()) throw ArgumentError("quantize_ln_params: gamma/beta length mismatch");
  LnParamQuant q;
  auto conv = [&](T v) {
    const int64_t r = round_half_away(static_cast<double>(v) * (1 << kLnParamFracBits));
    const int32_t s = saturate(r, 8, true);
    if (s != r) ++q.saturated;
    return s;
  };
  for (T g : gamma) q.params.gamma.push_back(conv(g));
  for (T b : beta) q.params.beta.push_back(conv(b));
  return q;
}

// Intermediate values of the LN core, all Q16.16.
struct LnStages {
  std::vector<int64_t> summed;    // stage 1: x1/s1 + x2/s2
  int64_t mean = 0;
  std::vector<int64_t> centered;  // stage 2
  int64_t variance = 0;
  int32_t inv_std = 0;            // rsqrt(variance + epsilon)
  std::vector<int32_t> out;       // stage 3, quantized
};

// Q16.16 value of an integer code x at counts-per-unit scale s.
int64_t to_q16(int32_t x, Scale8 s);

// Layer normalization of x1 + x2 (the residual add happens in stage 1).
QTensor layernorm_q(const QTensor& x1, const QTensor& x2, const LnParams& p, const QuantSpec& out_spec,
                    Scale8 out_scale);
LnStages layernorm_stages(const QTensor& x1, const QTensor& x2, const LnParams& p, const QuantSpec& out_spec,
                          Scale8 out_scale);

}  // namespace fqbert
