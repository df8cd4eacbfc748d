#include "fqbert/qnum.hpp"

#include <algorithm>
#include <limits>

namespace fqbert {

void QuantSpec::validate() const {
  if (bits < 2 || bits > 8) throw ArgumentError("QuantSpec: bitwidth must be in [2, 8]");
  if (!(max_clip > 0.0)) throw ArgumentError("QuantSpec: max_clip must be positive");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ArgumentError("QuantSpec: ema_decay must be in (0, 1)");
}

int32_t QTensor::min_value() const {
  if (bits >= 32) return std::numeric_limits<int32_t>::min();
  return is_signed ? -(int32_t{1} << (bits - 1)) : 0;
}

int32_t QTensor::max_value() const {
  if (bits >= 32) return std::numeric_limits<int32_t>::max();
  return is_signed ? (int32_t{1} << (bits - 1)) - 1 : (int32_t{1} << bits) - 1;
}

bool QTensor::in_range() const {
  const int32_t lo = min_value();
  const int32_t hi = max_value();
  return std::all_of(data.begin(), data.end(), [&](int32_t v) { return v >= lo && v <= hi; });
}

int32_t saturate(int64_t v, int bits, bool is_signed) {
  if (bits >= 32) {
    return static_cast<int32_t>(std::clamp<int64_t>(v, std::numeric_limits<int32_t>::min(),
                                                    std::numeric_limits<int32_t>::max()));
  }
  const int64_t hi = is_signed ? symmetric_rail(bits) : (int64_t{1} << bits) - 1;
  const int64_t lo = is_signed ? -hi : 0;
  return static_cast<int32_t>(std::clamp(v, lo, hi));
}

double clamp(double x, double lo, double hi) {
  if (lo > hi) throw ArgumentError("clamp: lower bound exceeds upper bound");
  return std::min(std::max(x, lo), hi);
}

double ema_update(std::optional<double> state, double batch_max, double decay) {
  if (!state) return batch_max;
  return decay * *state + (1.0 - decay) * batch_max;
}

double act_scale(const QuantSpec& spec) {
  if (!spec.ema_state || !(*spec.ema_state > 0.0)) {
    throw NotCalibratedError("act_scale: activation site is not calibrated");
  }
  return symmetric_rail(spec.bits) / *spec.ema_state;
}

Scale8 quantize_scale8(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw ArgumentError("quantize_scale8: scale must be positive and finite");
  int e = 0;
  const double frac = std::frexp(s, &e);  // s = frac * 2^e, frac in [0.5, 1)
  int64_t m = std::llround(frac * 256.0);
  if (m == 256) {
    m = 128;
    ++e;
  }
  const int exp2 = e - 8;
  if (exp2 < std::numeric_limits<int8_t>::min() || exp2 > std::numeric_limits<int8_t>::max()) {
    throw ArgumentError("quantize_scale8: exponent out of range");
  }
  return Scale8{static_cast<uint8_t>(m), static_cast<int8_t>(exp2)};
}

int32_t quantize_value(double x, const QuantSpec& spec, double scale) {
  const double xc = clamp(x, spec.min_clip(), spec.max_clip);
  return saturate(round_half_away(xc * scale), spec.bits, true);
}

std::vector<double> dequantize(const QTensor& q) {
  std::vector<double> out(q.data.size());
  std::transform(q.data.begin(), q.data.end(), out.begin(),
                 [&](int32_t v) { return static_cast<double>(v) / q.scale; });
  return out;
}

namespace {

RequantMul normalized(uint64_t num, uint64_t den, int exp2) {
  // value = num / den * 2^exp2; find m = round(num * 2^k / den) in [2^30, 2^31).
  int k = 0;
  while (num < (den << 30)) {
    num <<= 1;
    ++k;
  }
  while (num >= (den << 31)) {
    den <<= 1;
    --k;
  }
  uint64_t m = (num + den / 2) / den;
  if (m == (uint64_t{1} << 31)) {
    m >>= 1;
    --k;
  }
  const int shift = k - exp2;
  if (shift < 0) throw ArgumentError("requant_multiplier: factor too large for a right shift");
  return RequantMul{static_cast<int32_t>(m), shift};
}

}  // namespace

RequantMul requant_multiplier(Scale8 s_a, Scale8 s_w, Scale8 s_y) {
  const uint64_t num = s_y.mantissa;
  const uint64_t den = uint64_t{s_a.mantissa} * s_w.mantissa;
  return normalized(num, den, s_y.exp2 - s_a.exp2 - s_w.exp2);
}

RequantMul requant_multiplier(double s_f) {
  if (!(s_f > 0.0) || !std::isfinite(s_f)) throw ArgumentError("requant_multiplier: factor must be positive");
  int e = 0;
  const double frac = std::frexp(s_f, &e);
  int64_t m = std::llround(std::ldexp(frac, 31));
  if (m == (int64_t{1} << 31)) {
    m >>= 1;
    ++e;
  }
  const int shift = 31 - e;
  if (shift < 0) throw ArgumentError("requant_multiplier: factor too large for a right shift");
  return RequantMul{static_cast<int32_t>(m), shift};
}

int32_t requantize(int32_t acc, int32_t bias, RequantMul rm, int out_bits, bool out_signed) {
  if (out_bits < 2 || out_bits > 8) {
    throw ArgumentError("requantize: output bitwidth must be in [2, 8]");
  }
  const int64_t sum = saturate(int64_t{acc} + bias, 32, true);
  const int64_t p = sum * rm.multiplier;
  int64_t y = 0;
  if (rm.shift == 0) {
    y = p;
  } else if (rm.shift < 63) {
    const int64_t half = int64_t{1} << (rm.shift - 1);
    y = p >= 0 ? (p + half) >> rm.shift : -((-p + half) >> rm.shift);
  }
  return saturate(y, out_bits, out_signed);
}

}  // namespace fqbert
