#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "fqbert/specfn.hpp"
#include "fqbert/verify.hpp"

using namespace fqbert;

namespace {

QTensor row8(std::vector<int32_t> v, double scale) {
  QTensor t;
  t.data = std::move(v);
  t.bits = 8;
  t.shape = {t.data.size()};
  t.scale = scale;
  return t;
}

QuantSpec out8() {
  QuantSpec s;
  s.bits = 8;
  s.max_clip = 1e6;  // saturation alone bounds the output
  return s;
}

double q16(int32_t v) { return v / 65536.0; }

}  // namespace

TEST(ExpLut, Examples) {
  const ExpLut lut = build_exp_lut(0.03125);
  EXPECT_EQ(lut.entries[0], 255);
  EXPECT_EQ(lut.entries[32], 94);
  EXPECT_EQ(lut.entries[255], 0);
  for (int i = 1; i < 256; ++i) ASSERT_LE(lut.entries[i], lut.entries[i - 1]);
  EXPECT_THROW(build_exp_lut(0.0), ArgumentError);
  EXPECT_EQ(export_lut_blob(lut), lut.entries);
}

TEST(Softmax, Examples) {
  const ExpLut lut = build_exp_lut(0.1);
  EXPECT_EQ(softmax_q(row8({5, 5, 5, 5}, 10.0), lut).data, (std::vector<int32_t>{64, 64, 64, 64}));
  EXPECT_EQ(softmax_q(row8({100, 0}, 10.0), lut).data, (std::vector<int32_t>{255, 0}));
  const auto a = softmax_q(row8({-3, 7, 20, 1}, 10.0), lut);
  const auto b = softmax_q(row8({-33, -23, -10, -29}, 10.0), lut);
  EXPECT_EQ(a.data, b.data);
  EXPECT_FALSE(a.is_signed);
  EXPECT_EQ(a.scale, kSoftmaxOutScale);
}

TEST(Softmax, RandomRowProperties) {
  const ExpLut lut = build_exp_lut(1.0 / 16);
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> len(2, 128);
  std::uniform_int_distribution<int32_t> v(-128, 127);
  for (int t = 0; t < 20000; ++t) {
    const int n = len(rng);
    std::vector<int32_t> x(n);
    for (auto& e : x) e = v(rng);
    const auto out = softmax_q(row8(x, 16.0), lut);
    const int sum = std::accumulate(out.data.begin(), out.data.end(), 0);
    ASSERT_LE(std::abs(sum - 256), n / 2.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (x[i] > x[j]) ASSERT_GE(out.data[i], out.data[j]);
    const int32_t mx = *std::max_element(x.begin(), x.end());
    const int32_t mn = *std::min_element(x.begin(), x.end());
    std::uniform_int_distribution<int32_t> shift(-128 - mn, 127 - mx);
    const int32_t c = shift(rng);
    for (auto& e : x) e += c;
    ASSERT_EQ(softmax_q(row8(x, 16.0), lut).data, out.data);
  }
}

TEST(Rsqrt, Examples) {
  const double tol = std::ldexp(1.0, -10);
  EXPECT_NEAR(q16(rsqrt_fixed(kQ16One)), 1.0, tol);
  EXPECT_NEAR(q16(rsqrt_fixed(4 * kQ16One)), 0.5, tol);
  EXPECT_NEAR(q16(rsqrt_fixed(kQ16One / 4)), 2.0, tol);
  EXPECT_THROW(rsqrt_fixed(0), ArgumentError);
}

TEST(Rsqrt, RelativeAccuracyAcrossRange) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> e(-10.0, 14.0);
  for (int t = 0; t < 20000; ++t) {
    const int32_t v = static_cast<int32_t>(std::exp2(e(rng)) * kQ16One);
    if (v <= 0) continue;
    const double want = 1.0 / std::sqrt(q16(v));
    ASSERT_NEAR(q16(rsqrt_fixed(v)), want, want * 1e-3 + 2.0 / kQ16One) << v;
  }
}

TEST(LayerNorm, ConstantRowGivesBeta) {
  const std::size_t n = 16;
  const Scale8 s_out = quantize_scale8(16.0);
  LnParams p;
  p.gamma.assign(n, 64);
  for (std::size_t i = 0; i < n; ++i) p.beta.push_back(static_cast<int32_t>(i) * 8 - 64);
  const auto y = layernorm_q(row8(std::vector<int32_t>(n, 5), 16.0), row8(std::vector<int32_t>(n, 0), 16.0), p,
                             out8(), s_out);
  for (std::size_t i = 0; i < n; ++i) {
    // beta / 64 at 16 counts per unit
    ASSERT_EQ(y.data[i], quantize_value(p.beta[i] / 64.0, out8(), s_out.value())) << i;
  }
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int32_t> v(-128, 127), b(-128, 127);
  const std::size_t n = 32;
  const Scale8 s_out = quantize_scale8(40.0);
  LnParams p;
  p.gamma.assign(n, 0);
  std::vector<int32_t> x1(n), x2(n);
  for (std::size_t i = 0; i < n; ++i) x1[i] = v(rng), x2[i] = v(rng), p.beta.push_back(b(rng));
  const auto y = layernorm_q(row8(x1, 20.0), row8(x2, 8.0), p, out8(), s_out);
  for (std::size_t i = 0; i < n; ++i)
    ASSERT_EQ(y.data[i], quantize_value(p.beta[i] / 64.0, out8(), s_out.value()));
}

TEST(LayerNorm, MeanRemovalResidue) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int32_t> v(-128, 127);
  for (std::size_t n : {8u, 64u, 768u}) {
    for (int t = 0; t < 200; ++t) {
      std::vector<int32_t> x1(n), x2(n);
      for (std::size_t i = 0; i < n; ++i) x1[i] = v(rng), x2[i] = v(rng);
      LnParams p;
      p.gamma.assign(n, 64);
      p.beta.assign(n, 0);
      const auto st = layernorm_stages(row8(x1, 24.0), row8(x2, 40.0), p, out8(), quantize_scale8(32.0));
      const int64_t residue = std::accumulate(st.centered.begin(), st.centered.end(), int64_t{0});
      ASSERT_LE(std::abs(residue), static_cast<int64_t>(n));
    }
  }
}

TEST(LayerNorm, OracleProximity) {
  for (int n : {8, 64, 768}) {
    const PropertyResult r = check_ln_proximity(n, 300, 31 + n);
    EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
  }
}

TEST(LayerNorm, RejectsMismatchedLengthsAndInexactScales) {
  LnParams p;
  p.gamma.assign(4, 64);
  p.beta.assign(4, 0);
  EXPECT_THROW(layernorm_q(row8({1, 2, 3}, 16.0), row8({1, 2, 3}, 16.0), p, out8(), quantize_scale8(1.0)),
               ArgumentError);
  EXPECT_THROW(layernorm_q(row8({1, 2, 3, 4}, 0.3), row8({1, 2, 3, 4}, 16.0), p, out8(), quantize_scale8(1.0)),
               ArgumentError);
}

TEST(LnParams, Quantization) {
  std::vector<double> g{1.0, 0.5, 3.0}, b{-0.25, 0.0, -5.0};
  const LnParamQuant q = quantize_ln_params<double>(g, b);
  EXPECT_EQ(q.params.gamma, (std::vector<int32_t>{64, 32, 127}));
  EXPECT_EQ(q.params.beta, (std::vector<int32_t>{-16, 0, -127}));
  EXPECT_EQ(q.saturated, 2u);
}
