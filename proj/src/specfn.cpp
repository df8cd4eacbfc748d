#include "fqbert/specfn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace fqbert {

namespace {

using i128 = __int128;

// round(num / den) with ties away from zero; den > 0.
i128 round_div(i128 num, i128 den) {
  return num >= 0 ? (num + den / 2) / den : -((-num + den / 2) / den);
}

// round(v * 2^-shift), shift may be negative.
i128 round_shift(i128 v, int shift) {
  if (shift <= 0) return v << -shift;
  if (shift >= 126) return 0;
  return round_div(v, i128{1} << shift);
}

int64_t clamp_i64(i128 v, int64_t lo, int64_t hi) {
  if (v < lo) return lo;
  if (v > hi) return hi;
  return static_cast<int64_t>(v);
}

constexpr int64_t kQ16Max = INT32_MAX;
constexpr int64_t kQ16Min = INT32_MIN;

}  // namespace

ExpLut build_exp_lut(double delta) {
  if (!(delta > 0.0)) throw ArgumentError("build_exp_lut: step must be positive");
  ExpLut lut;
  lut.input_step = delta;
  for (int i = 0; i < 256; ++i) {
    lut.entries[static_cast<std::size_t>(i)] =
        static_cast<uint8_t>(round_half_away(255.0 * std::exp(-i * delta)));
  }
  return lut;
}

std::array<uint8_t, 256> export_lut_blob(const ExpLut& lut) { return lut.entries; }

QTensor softmax_q(const QTensor& row, const ExpLut& lut) {
  if (row.data.empty()) throw ArgumentError("softmax_q: empty row");
  const int32_t mx = *std::max_element(row.data.begin(), row.data.end());
  // Index step per input quantum; exactly 1 when the LUT step equals the
  // input step.
  const double idx_per_quantum = 1.0 / (row.scale * lut.input_step);

  std::vector<uint32_t> e(row.data.size());
  uint64_t sum = 0;
  for (std::size_t i = 0; i < row.data.size(); ++i) {
    const int64_t d = int64_t{mx} - row.data[i];
    const int64_t idx = std::min<int64_t>(round_half_away(static_cast<double>(d) * idx_per_quantum), 255);
    e[i] = lut.entries[static_cast<std::size_t>(idx)];
    sum += e[i];
  }

  QTensor out;
  out.bits = 8;
  out.is_signed = false;
  out.shape = {row.data.size()};
  out.scale = kSoftmaxOutScale;
  out.data.resize(row.data.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    const uint64_t q = (2 * 256 * uint64_t{e[i]} + sum) / (2 * sum);
    out.data[i] = static_cast<int32_t>(std::min<uint64_t>(q, 255));
  }
  return out;
}

int32_t rsqrt_fixed(int32_t v, int iters) {
  if (v <= 0) throw ArgumentError("rsqrt_fixed: input must be positive");
  if (iters < 0) throw ArgumentError("rsqrt_fixed: iteration count must be non-negative");
  // v_real in [2^p, 2^(p+1)); pick k = ceil(p / 2) so v * 4^-k is in [0.5, 2).
  const int p = static_cast<int>(std::bit_width(static_cast<uint32_t>(v))) - 1 - kQ16FracBits;
  const int k = p >= 0 ? (p + 1) / 2 : -((-p) / 2);
  i128 y = i128{1} << (kQ16FracBits - k);
  for (int it = 0; it < iters; ++it) {
    const i128 vy2 = round_shift(i128{v} * y * y, 2 * kQ16FracBits);
    y = round_shift(y * (3 * i128{kQ16One} - vy2), kQ16FracBits + 1);
  }
  return static_cast<int32_t>(clamp_i64(y, 1, kQ16Max));
}

int64_t to_q16(int32_t x, Scale8 s) {
  // x / (mantissa * 2^exp2) in units of 2^-16.
  const int shift = kQ16FracBits - s.exp2;
  i128 num = x;
  i128 den = s.mantissa;
  if (shift >= 0) {
    if (shift > 100) return x == 0 ? 0 : (x > 0 ? kQ16Max : kQ16Min);
    num <<= shift;
  } else {
    if (-shift > 100) return 0;
    den <<= -shift;
  }
  return clamp_i64(round_div(num, den), kQ16Min, kQ16Max);
}

LnStages layernorm_stages(const QTensor& x1, const QTensor& x2, const LnParams& p, const QuantSpec& out_spec,
                          Scale8 out_scale) {
  const std::size_t n = x1.data.size();
  if (n == 0) throw ArgumentError("layernorm_q: empty input");
  if (x2.data.size() != n || p.gamma.size() != n || p.beta.size() != n) {
    throw ArgumentError("layernorm_q: input and parameter lengths differ");
  }
  const Scale8 s1 = quantize_scale8(x1.scale);
  const Scale8 s2 = quantize_scale8(x2.scale);
  if (s1.value() != x1.scale || s2.value() != x2.scale) {
    throw ArgumentError("layernorm_q: input scales must be exact 8-bit scales");
  }

  LnStages st;
  // Stage 1: rescale both inputs to Q16.16, add, reduce the mean.
  st.summed.resize(n);
  i128 sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    st.summed[i] = clamp_i64(i128{to_q16(x1.data[i], s1)} + to_q16(x2.data[i], s2), kQ16Min, kQ16Max);
    sum += st.summed[i];
  }
  st.mean = static_cast<int64_t>(round_div(sum, static_cast<i128>(n)));

  // Stage 2: center and reduce the variance.
  st.centered.resize(n);
  i128 sq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    st.centered[i] = st.summed[i] - st.mean;
    sq += i128{st.centered[i]} * st.centered[i];
  }
  st.variance = clamp_i64(round_div(sq, static_cast<i128>(n) << kQ16FracBits), 0, kQ16Max);
  st.inv_std = rsqrt_fixed(static_cast<int32_t>(std::min<int64_t>(st.variance + p.epsilon, kQ16Max)));

  // Stage 3: normalize, scale, shift, and quantize. gamma*norm + beta is held
  // with 6 + 16 fractional bits.
  constexpr int kFrac = kLnParamFracBits + kQ16FracBits;
  st.out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const i128 norm = round_shift(i128{st.centered[i]} * st.inv_std, kQ16FracBits);
    const i128 y = i128{p.gamma[i]} * norm + (i128{p.beta[i]} << kQ16FracBits);
    const i128 q = round_shift(y * out_scale.mantissa, kFrac - out_scale.exp2);
    st.out[i] = saturate(clamp_i64(q, INT32_MIN, INT32_MAX), out_spec.bits, true);
  }
  return st;
}

QTensor layernorm_q(const QTensor& x1, const QTensor& x2, const LnParams& p, const QuantSpec& out_spec,
                    Scale8 out_scale) {
  LnStages st = layernorm_stages(x1, x2, p, out_spec, out_scale);
  QTensor out;
  out.bits = out_spec.bits;
  out.is_signed = true;
  out.shape = {x1.data.size()};
  out.scale = out_scale.value();
  out.data = std::move(st.out);
  return out;
}

}  // namespace fqbert
