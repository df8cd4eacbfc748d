#pragma once

// Bit-split Inner-product Module: an array of M sign-configurable 8x4-bit
// multipliers feeding two m-input adder trees (M = 2m). In W4 mode every
// multiplier takes one 8-bit x 4-bit product. In W8 mode an 8-bit weight is
// split into a signed high nibble and an unsigned low nibble, so two
// multipliers fuse into one 8x8 product and lane capacity halves.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fqbert/qnum.hpp"

namespace fqbert {

enum class BimVariant {
  kTypeA,  // shift applied once at the high adder tree's output
  kTypeB,  // shift applied to each high-nibble product before the tree
};

enum class LaneMode { kW4, kW8 };

struct BimConfig {
  int multipliers = 16;  // M
  BimVariant variant = BimVariant::kTypeA;

  int half() const { return multipliers / 2; }  // m
  int lane_capacity(LaneMode mode) const { return mode == LaneMode::kW4 ? multipliers : half(); }
  void validate() const;
};

struct HwConfig {
  int num_pus = 12;
  int pes_per_pu = 8;  // N
  BimConfig bim;
  double clock_mhz = 214.0;
  double bandwidth_bytes_per_cycle = 16.0;

  // Performance-model constants; these do not affect functional results.
  std::size_t weight_buffer_bytes = 512 * 1024;  // one half of the double buffer
  int simd_width = 16;                           // LN core lanes
  int softmax_lanes = 16;                        // parallel LUT lookups per cycle
  int lut_pipeline_depth = 3;
  int requant_latency = 3;                       // quantization unit, per output tile

  int total_pes() const { return num_pus * pes_per_pu; }
  void validate() const;
};

struct NibbleSplit {
  int32_t hi = 0;  // signed, [-8, 7]
  int32_t lo = 0;  // unsigned, [0, 15]
};

NibbleSplit split8(int32_t b);

// Optional record of what each multiplier lane produced in one bim_dot call.
struct BimLaneTrace {
  std::vector<int32_t> products;  // raw 8x4 products, one per active lane
  std::vector<bool> weight_signed;  // sign flag of the 4-bit operand per lane
};

// Exact inner product sum(a[i] * w[i]) through the multiplier array. `a` holds
// 8-bit operands (signed or unsigned per `a_signed`); `w` holds 4-bit signed
// values in W4 mode or 8-bit signed values in W8 mode. Length must not exceed
// lane_capacity(mode).
int64_t bim_dot(std::span<const int32_t> a, bool a_signed, std::span<const int32_t> w, LaneMode mode,
                const BimConfig& cfg, BimLaneTrace* trace = nullptr);

// Row-major integer matrix borrowed from a QTensor or an activation buffer.
struct IntMatrixView {
  std::span<const int32_t> data;
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 8;

  std::span<const int32_t> row(std::size_t r) const { return data.subspan(r * cols, cols); }
};

struct MatvecResult {
  std::vector<int32_t> acc;  // 32-bit accumulators
  int64_t cycles = 0;
  bool saturated = false;
};

// acc[r] = sum_c w[r, c] * x[c], tiled over total_pes() rows and lane-capacity
// column chunks. The result does not depend on hw; only `cycles` does.
MatvecResult pe_matvec(const IntMatrixView& w, std::span<const int32_t> x, bool x_signed,
                       const HwConfig& hw, LaneMode mode);
MatvecResult pe_matvec(const QTensor& w, const QTensor& x, const HwConfig& hw, LaneMode mode);

struct RequantResult {
  QTensor out;
  int64_t cycles = 0;
  bool saturated = false;  // accumulator saturation, not output rails
};

// pe_matvec followed by the quantization unit. Requantization of one output
// tile overlaps accumulation of the next (double-buffered partial sums), so
// only the final tile's requant latency is exposed.
RequantResult pe_matvec_requant(const IntMatrixView& w, std::span<const int32_t> x, bool x_signed,
                                std::span<const int32_t> bias, RequantMul rm, const HwConfig& hw,
                                LaneMode mode, int out_bits, double out_scale);
RequantResult pe_matvec_requant(const QTensor& w, const QTensor& x, const QTensor& bias, RequantMul rm,
                                const HwConfig& hw, LaneMode mode, int out_bits, double out_scale);

LaneMode lane_mode_for_bits(int weight_bits);

}  // namespace fqbert
