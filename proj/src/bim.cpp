#include "fqbert/bim.hpp"

#include <algorithm>
#include <limits>
#include <string>

namespace fqbert {

namespace {

// One sign-configurable 8-bit x 4-bit multiplier.
int32_t mul8x4(int32_t a, bool a_signed, int32_t nibble, bool nibble_signed) {
  const bool a_ok = a_signed ? (a >= -128 && a <= 127) : (a >= 0 && a <= 255);
  const bool n_ok = nibble_signed ? (nibble >= -8 && nibble <= 7) : (nibble >= 0 && nibble <= 15);
  if (!a_ok || !n_ok) throw ArgumentError("bim: multiplier operand out of range");
  return a * nibble;
}

int64_t tree_sum(std::span<const int32_t> lanes) {
  int64_t s = 0;
  for (int32_t v : lanes) s += v;
  return s;
}

}  // namespace

void BimConfig::validate() const {
  if (multipliers < 2 || multipliers % 2 != 0) {
    throw ArgumentError("BimConfig: multiplier count must be even and >= 2, got " + std::to_string(multipliers));
  }
}

void HwConfig::validate() const {
  bim.validate();
  if (num_pus < 1 || pes_per_pu < 1) throw ArgumentError("HwConfig: PU and PE counts must be >= 1");
  if (!(clock_mhz > 0.0)) throw ArgumentError("HwConfig: clock must be positive");
  if (!(bandwidth_bytes_per_cycle > 0.0)) throw ArgumentError("HwConfig: bandwidth must be positive");
  if (simd_width < 1 || softmax_lanes < 1 || lut_pipeline_depth < 0 || requant_latency < 0) {
    throw ArgumentError("HwConfig: special-core parameters out of range");
  }
}

NibbleSplit split8(int32_t b) {
  if (b < -128 || b > 127) throw ArgumentError("split8: value outside signed 8-bit range");
  // Arithmetic shift floors toward -inf; the low nibble is always non-negative.
  return NibbleSplit{b >> 4, b & 0xF};
}

int64_t bim_dot(std::span<const int32_t> a, bool a_signed, std::span<const int32_t> w, LaneMode mode,
                const BimConfig& cfg, BimLaneTrace* trace) {
  if (a.size() != w.size()) throw ArgumentError("bim_dot: operand lengths differ");
  const std::size_t m = static_cast<std::size_t>(cfg.half());
  const std::size_t lanes_needed = mode == LaneMode::kW4 ? a.size() : 2 * a.size();
  if (lanes_needed > static_cast<std::size_t>(cfg.multipliers)) {
    throw ArgumentError("bim_dot: vector length exceeds lane capacity; tile the input");
  }

  std::vector<int32_t> lanes(static_cast<std::size_t>(cfg.multipliers), 0);
  auto record = [&](int32_t product, bool w_signed) {
    if (trace) {
      trace->products.push_back(product);
      trace->weight_signed.push_back(w_signed);
    }
  };

  if (mode == LaneMode::kW4) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      lanes[i] = mul8x4(a[i], a_signed, w[i], true);
      record(lanes[i], true);
    }
    return tree_sum(std::span(lanes).first(m)) + tree_sum(std::span(lanes).subspan(m));
  }

  if (cfg.variant == BimVariant::kTypeA) {
    // Inputs are rearranged so every low nibble lands in tree 0 and every
    // high nibble in tree 1; one shift at tree 1's output.
    for (std::size_t j = 0; j < a.size(); ++j) {
      const NibbleSplit s = split8(w[j]);
      lanes[j] = mul8x4(a[j], a_signed, s.lo, false);
      lanes[m + j] = mul8x4(a[j], a_signed, s.hi, true);
      record(lanes[j], false);
      record(lanes[m + j], true);
    }
    return tree_sum(std::span(lanes).first(m)) + tree_sum(std::span(lanes).subspan(m)) * 16;
  }

  // Type B: natural pairing (lo, hi) on adjacent lanes; each high product is
  // shifted before entering its tree.
  for (std::size_t j = 0; j < a.size(); ++j) {
    const NibbleSplit s = split8(w[j]);
    const int32_t lo = mul8x4(a[j], a_signed, s.lo, false);
    const int32_t hi = mul8x4(a[j], a_signed, s.hi, true);
    record(lo, false);
    record(hi, true);
    lanes[2 * j] = lo;
    lanes[2 * j + 1] = hi * 16;
  }
  return tree_sum(std::span(lanes).first(m)) + tree_sum(std::span(lanes).subspan(m));
}

LaneMode lane_mode_for_bits(int weight_bits) { return weight_bits <= 4 ? LaneMode::kW4 : LaneMode::kW8; }

MatvecResult pe_matvec(const IntMatrixView& w, std::span<const int32_t> x, bool x_signed,
                       const HwConfig& hw, LaneMode mode) {
  hw.validate();
  if (x.size() != w.cols) throw ArgumentError("pe_matvec: vector length does not match matrix columns");
  if (w.data.size() != w.rows * w.cols) throw ArgumentError("pe_matvec: matrix data size mismatch");
  if (mode == LaneMode::kW4 && w.bits > 4) throw ArgumentError("pe_matvec: W4 mode needs weights of at most 4 bits");

  const std::size_t pes = static_cast<std::size_t>(hw.total_pes());
  const std::size_t lane = static_cast<std::size_t>(hw.bim.lane_capacity(mode));
  constexpr int64_t kAccMax = std::numeric_limits<int32_t>::max();
  constexpr int64_t kAccMin = std::numeric_limits<int32_t>::min();

  MatvecResult res;
  res.acc.assign(w.rows, 0);
  for (std::size_t r0 = 0; r0 < w.rows; r0 += pes) {
    const std::size_t r1 = std::min(w.rows, r0 + pes);
    for (std::size_t r = r0; r < r1; ++r) {  // one PE per row within the group
      const auto wr = w.row(r);
      int64_t acc = 0;
      for (std::size_t c0 = 0; c0 < w.cols; c0 += lane) {
        const std::size_t len = std::min(lane, w.cols - c0);
        acc += bim_dot(x.subspan(c0, len), x_signed, wr.subspan(c0, len), mode, hw.bim);
        if (acc > kAccMax || acc < kAccMin) {
          res.saturated = true;
          acc = std::clamp(acc, kAccMin, kAccMax);
        }
      }
      res.acc[r] = static_cast<int32_t>(acc);
    }
  }
  const int64_t row_groups = static_cast<int64_t>((w.rows + pes - 1) / pes);
  const int64_t chunks = static_cast<int64_t>((w.cols + lane - 1) / lane);
  res.cycles = row_groups * chunks;
  return res;
}

MatvecResult pe_matvec(const QTensor& w, const QTensor& x, const HwConfig& hw, LaneMode mode) {
  if (w.shape.size() != 2) throw ArgumentError("pe_matvec: weight tensor must be 2-D");
  if (x.bits != 8) throw ArgumentError("pe_matvec: activation vector must be 8-bit");
  const IntMatrixView view{w.data, w.shape[0], w.shape[1], w.bits};
  return pe_matvec(view, x.data, x.is_signed, hw, mode);
}

RequantResult pe_matvec_requant(const IntMatrixView& w, std::span<const int32_t> x, bool x_signed,
                                std::span<const int32_t> bias, RequantMul rm, const HwConfig& hw,
                                LaneMode mode, int out_bits, double out_scale) {
  if (!bias.empty() && bias.size() != w.rows) throw ArgumentError("pe_matvec_requant: bias length != rows");
  MatvecResult mv = pe_matvec(w, x, x_signed, hw, mode);
  RequantResult res;
  res.out.bits = out_bits;
  res.out.is_signed = true;
  res.out.shape = {w.rows};
  res.out.scale = out_scale;
  res.out.data.resize(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    res.out.data[r] = requantize(mv.acc[r], bias.empty() ? 0 : bias[r], rm, out_bits, true);
  }
  res.cycles = mv.cycles + (w.rows > 0 ? hw.requant_latency : 0);
  res.saturated = mv.saturated;
  return res;
}

RequantResult pe_matvec_requant(const QTensor& w, const QTensor& x, const QTensor& bias, RequantMul rm,
                                const HwConfig& hw, LaneMode mode, int out_bits, double out_scale) {
  if (w.shape.size() != 2) throw ArgumentError("pe_matvec_requant: weight tensor must be 2-D");
  if (x.bits != 8) throw ArgumentError("pe_matvec_requant: activation vector must be 8-bit");
  const IntMatrixView view{w.data, w.shape[0], w.shape[1], w.bits};
  return pe_matvec_requant(view, x.data, x.is_signed, bias.data, rm, hw, mode, out_bits, out_scale);
}

}  // namespace fqbert
