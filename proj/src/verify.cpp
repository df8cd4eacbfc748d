#include "fqbert/verify.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace fqbert {

namespace {

PropertyResult result(std::string name, bool ok, std::string detail = {}) {
  return {std::move(name), ok, std::move(detail)};
}

}  // namespace

PropertyResult check_pipeline_equivalence(const QuantModel& qm, int trials, uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ModelConfig& mc = qm.config;
  std::uniform_int_distribution<int> len(1, std::min(mc.seq_len, mc.max_position));
  std::uniform_int_distribution<int32_t> tok(0, mc.vocab_size - 1);
  const HwConfig hw;
  for (int t = 0; t < trials; ++t) {
    std::vector<int32_t> ids(static_cast<std::size_t>(len(rng)));
    for (auto& id : ids) id = tok(rng);
    Trace ti, tr;
    const auto li = model_forward(ids, qm, hw, &ti);
    const auto lr = fake_quant_forward(ids, qm, &tr);
    for (const auto& [site, codes] : ti) {
      if (tr[site] != codes) return result("pipeline-equivalence", false, "trial " + std::to_string(t) + " site " + site);
    }
    if (li != lr) return result("pipeline-equivalence", false, "trial " + std::to_string(t) + " logits");
  }
  return result("pipeline-equivalence", true, std::to_string(trials) + " sequences");
}

PropertyResult check_bim_exhaustive(BimVariant variant) {
  BimConfig cfg;
  cfg.variant = variant;
  const std::string name = std::string("bim-exhaustive-") + (variant == BimVariant::kTypeA ? "A" : "B");
  for (int a = -128; a <= 127; ++a) {
    for (int w = -128; w <= 127; ++w) {
      const int32_t av[1] = {a};
      const int32_t wv[1] = {w};
      if (bim_dot(av, true, wv, LaneMode::kW8, cfg) != int64_t{a} * w) {
        return result(name, false, std::to_string(a) + "*" + std::to_string(w));
      }
    }
  }
  return result(name, true, "65536 pairs");
}

PropertyResult check_softmax_properties(const ExpLut& lut, int trials, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len(2, 128);
  std::uniform_int_distribution<int32_t> code(-128, 127);
  const double scale = 1.0 / lut.input_step;
  for (int t = 0; t < trials; ++t) {
    QTensor row;
    row.scale = scale;
    row.data.resize(static_cast<std::size_t>(len(rng)));
    for (auto& v : row.data) v = code(rng);
    const QTensor p = softmax_q(row, lut);
    for (std::size_t i = 0; i < row.data.size(); ++i) {
      for (std::size_t j = 0; j < row.data.size(); ++j) {
        if (row.data[i] > row.data[j] && p.data[i] < p.data[j]) {
          return result("softmax-properties", false, "trial " + std::to_string(t) + ": not monotone");
        }
      }
    }
    int64_t sum = 0;
    for (int32_t v : p.data) sum += v;
    const auto n = static_cast<double>(row.data.size());
    if (std::abs(static_cast<double>(sum) - 256.0) > n / 2) {
      return result("softmax-properties", false, "trial " + std::to_string(t) + ": sum " + std::to_string(sum));
    }
    const auto [lo, hi] = std::minmax_element(row.data.begin(), row.data.end());
    std::uniform_int_distribution<int32_t> shift(-128 - *lo, 127 - *hi);
    QTensor shifted = row;
    const int32_t c = shift(rng);
    for (auto& v : shifted.data) v += c;
    if (softmax_q(shifted, lut).data != p.data) {
      return result("softmax-properties", false, "trial " + std::to_string(t) + ": not shift invariant");
    }
  }
  return result("softmax-properties", true, std::to_string(trials) + " rows");
}

std::vector<int32_t> ln_real_oracle(const QTensor& x1, const QTensor& x2, const LnParams& p, Scale8 out, int bits) {
  const std::size_t n = x1.data.size();
  std::vector<double> v(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += (v[i] = x1.data[i] / x1.scale + x2.data[i] / x2.scale);
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + static_cast<double>(p.epsilon) / kQ16One);
  std::vector<int32_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = std::ldexp(static_cast<double>(p.gamma[i]), -kLnParamFracBits);
    const double b = std::ldexp(static_cast<double>(p.beta[i]), -kLnParamFracBits);
    y[i] = saturate(round_half_away((g * (v[i] - mean) * inv + b) * out.value()), bits, true);
  }
  return y;
}

PropertyResult check_ln_proximity(int n, int trials, uint64_t seed, int max_lsb) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int32_t> code(-128, 127);
  std::uniform_int_distribution<int32_t> param(-128, 127);
  std::uniform_real_distribution<double> sc(std::log(2.0), std::log(256.0));
  const std::string name = "ln-proximity-n" + std::to_string(n);
  for (int t = 0; t < trials; ++t) {
    QTensor x1, x2;
    x1.scale = quantize_scale8(std::exp(sc(rng))).value();
    x2.scale = quantize_scale8(std::exp(sc(rng))).value();
    LnParams p;
    for (int i = 0; i < n; ++i) {
      x1.data.push_back(code(rng));
      x2.data.push_back(code(rng));
      p.gamma.push_back(param(rng));
      p.beta.push_back(param(rng));
    }
    const Scale8 out = quantize_scale8(std::exp(sc(rng)) / 8.0);
    const QTensor got = layernorm_q(x1, x2, p, QuantSpec{8, 127.0 / out.value()}, out);
    const auto want = ln_real_oracle(x1, x2, p, out, 8);
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      if (std::abs(got.data[k] - want[k]) > max_lsb) {
        return result(name, false,
                      "trial " + std::to_string(t) + " element " + std::to_string(i) + ": " +
                          std::to_string(got.data[k]) + " vs " + std::to_string(want[k]));
      }
    }
  }
  return result(name, true, std::to_string(trials) + " rows");
}

std::vector<PropertyResult> run_verify_suite(const QuantModel& qm, int trials, uint64_t seed, bool inject_lut_fault) {
  if (trials <= 0) throw ArgumentError("verify: --trials must be positive");
  if (qm.layers.empty()) throw ArgumentError("verify: container has no encoder layers");
  ExpLut lut = qm.layers.front().softmax_lut;
  if (inject_lut_fault) lut.entries[1] = 0;
  std::vector<PropertyResult> out;
  out.push_back(check_pipeline_equivalence(qm, trials, seed));
  out.push_back(check_bim_exhaustive(BimVariant::kTypeA));
  out.push_back(check_bim_exhaustive(BimVariant::kTypeB));
  out.push_back(check_softmax_properties(lut, trials, seed + 1));
  for (int n : {8, 64, qm.config.hidden}) out.push_back(check_ln_proximity(n, trials, seed + 2 + static_cast<uint64_t>(n)));
  return out;
}

}  // namespace fqbert
