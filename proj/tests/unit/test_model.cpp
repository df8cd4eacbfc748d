#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "fqbert/cli.hpp"
#include "fqbert/model.hpp"
#include "fqbert/store.hpp"
#include "fqbert/synth.hpp"

using namespace fqbert;

namespace {

ModelConfig toy(int layers = 2, int hidden = 16, int heads = 2, int seq = 8) {
  ModelConfig mc;
  mc.num_layers = layers;
  mc.hidden = hidden;
  mc.heads = heads;
  mc.head_dim = hidden / heads;
  mc.ffn_dim = 2 * hidden;
  mc.seq_len = seq;
  mc.vocab_size = 50;
  mc.max_position = 16;
  return mc;
}

SiteSpecs calib_specs(const FloatModel& fm, uint64_t seed, int count = 4) {
  return calibrate(fm, synth_calib(fm.config, count, 0, seed), QuantSpec{});
}

std::vector<int32_t> tokens(const ModelConfig& mc, std::mt19937_64& rng, int len = 0) {
  std::uniform_int_distribution<int32_t> tok(0, mc.vocab_size - 1);
  std::vector<int32_t> t(static_cast<std::size_t>(len > 0 ? len : mc.seq_len));
  for (auto& v : t) v = tok(rng);
  return t;
}

}  // namespace

TEST(Config, Validation) {
  EXPECT_NO_THROW(toy().validate());
  ModelConfig bad = toy();
  bad.head_dim = 3;
  EXPECT_THROW(bad.validate(), ArgumentError);
  bad = toy();
  bad.seq_len = 0;
  EXPECT_THROW(bad.validate(), ArgumentError);
  bad = toy();
  bad.w_bits = 9;
  EXPECT_THROW(bad.validate(), ArgumentError);
}

TEST(Sites, Naming) {
  EXPECT_EQ(site_name(3, Site::kScores), "layer3.scores");
  EXPECT_EQ(layer_input_site(0), kInputSite);
  EXPECT_EQ(layer_input_site(2), "layer1.ln2");
  EXPECT_EQ(all_site_names(toy()).size(), 1u + 2u * kNumSites);
}

TEST(Pipeline, IntegerEqualsFakeQuantAtEverySite) {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 60; ++trial) {
    const int heads = trial % 3 + 1;
    const ModelConfig mc = toy(1 + trial % 2, 8 * heads, heads, 1 + trial % 8);
    ModelConfig m = mc;
    m.w_bits = 2 + trial % 7;
    const FloatModel fm = synth_float_model(m, 100 + trial);
    const QuantModel qm = build_quant_model(fm, calib_specs(fm, 200 + trial, 2));
    const auto t = tokens(m, rng);
    Trace ti, tf;
    const auto a = model_forward(t, qm, HwConfig{}, &ti);
    const auto b = fake_quant_forward(t, qm, &tf);
    ASSERT_EQ(a, b) << "trial " << trial;
    ASSERT_EQ(ti, tf) << "trial " << trial;
    ASSERT_EQ(ti.size(), 1u + static_cast<std::size_t>(m.num_layers) * (kNumSites + 1));
  }
}

TEST(Mha, SingleTokenAttendsToItself) {
  const ModelConfig mc = toy(1, 16, 2, 1);
  const FloatModel fm = synth_float_model(mc, 9);
  const QuantModel qm = build_quant_model(fm, calib_specs(fm, 10));
  std::mt19937_64 rng(1);
  Trace tr;
  model_forward(tokens(mc, rng), qm, HwConfig{}, &tr);
  EXPECT_EQ(tr.at("layer0.probs"), (std::vector<int32_t>{255, 255}));
}

TEST(Mha, ZeroInputGivesRequantizedBiases) {
  const ModelConfig mc = toy(1, 16, 2, 3);
  const FloatModel fm = synth_float_model(mc, 11);
  const QuantModel qm = build_quant_model(fm, calib_specs(fm, 12));
  IntActivations x;
  x.seq = 3;
  x.codes.assign(3 * 16, 0);
  x.scale = qm.input_scale.value();
  Trace tr;
  mha_forward(x, qm.layers[0], mc, HwConfig{}, 0, &tr, nullptr);
  const QuantLinear& q = qm.layers[0].q;
  const auto& got = tr.at("layer0.q");
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t r = 0; r < 16; ++r)
      ASSERT_EQ(got[s * 16 + r], requantize(0, q.bias.data[r], q.requant, 8, true));
}

TEST(Ffn, GeluLutMapsZeroToZero) {
  EXPECT_EQ(gelu(0.0), 0.0);
  for (double s : {3.0, 17.5, 100.0}) {
    const auto lut = build_gelu_lut(quantize_scale8(s), quantize_scale8(s * 1.7), 8);
    EXPECT_EQ(lut[128], 0);
    for (int i = 129; i < 256; ++i) ASSERT_GE(lut[i], lut[i - 1]);
  }
}

TEST(EncoderLayer, ZeroWeightsAndGammaGiveBeta) {
  const ModelConfig mc = toy(1, 16, 2, 4);
  const FloatModel fm = synth_float_model(mc, 13);
  QuantModel qm = build_quant_model(fm, calib_specs(fm, 14));
  QuantLayer& L = qm.layers[0];
  for (QuantLinear* lin : {&L.q, &L.k, &L.v, &L.o, &L.ffn1, &L.ffn2}) {
    std::fill(lin->weight.data.begin(), lin->weight.data.end(), 0);
    std::fill(lin->bias.data.begin(), lin->bias.data.end(), 0);
  }
  std::fill(L.ln2.gamma.begin(), L.ln2.gamma.end(), 0);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int32_t> c(-127, 127);
  IntActivations x;
  x.seq = 4;
  x.scale = qm.input_scale.value();
  for (int i = 0; i < 4 * 16; ++i) x.codes.push_back(c(rng));
  const IntActivations y = encoder_layer_forward(x, L, mc, HwConfig{}, 0);
  QuantSpec o;
  o.bits = 8;
  o.max_clip = 1e6;
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t i = 0; i < 16; ++i)
      ASSERT_EQ(y.codes[s * 16 + i], quantize_value(L.ln2.beta[i] / 64.0, o, L.scale(Site::kLn2).value()));
}

TEST(ModelForward, ZeroLayersIsHostOnly) {
  const ModelConfig mc = toy(0);
  const FloatModel fm = synth_float_model(mc, 15);
  const SiteSpecs specs = calib_specs(fm, 16);
  const QuantModel qm = build_quant_model(fm, specs);
  std::mt19937_64 rng(2);
  const auto t = tokens(mc, rng);
  const auto emb = embed_tokens(t, mc, fm.host);
  const auto want = classify(emb[0], fm.host);
  EXPECT_EQ(float_oracle_forward(t, fm), want);
  EXPECT_EQ(model_forward(t, qm, &fm, &specs, HwConfig{}, AblationFlags::none()), want);
  EXPECT_THROW(model_forward(t, qm, nullptr, nullptr, HwConfig{}, AblationFlags::none()), ArgumentError);
}

TEST(ModelForward, AblationNoneEqualsFloatOracle) {
  const ModelConfig mc = toy();
  const FloatModel fm = synth_float_model(mc, 17);
  const SiteSpecs specs = calib_specs(fm, 18);
  const QuantModel qm = build_quant_model(fm, specs);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    const auto t = tokens(mc, rng);
    const auto want = float_oracle_forward(t, fm);
    const auto got = model_forward(t, qm, &fm, &specs, HwConfig{}, AblationFlags::none());
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t j = 0; j < want.size(); ++j)
      ASSERT_NEAR(got[j], want[j], 1e-5 * std::max(1.0, std::abs(want[j])));
  }
}

TEST(ModelForward, AllFlagsMatchesIntegerPath) {
  const ModelConfig mc = toy();
  const FloatModel fm = synth_float_model(mc, 19);
  const SiteSpecs specs = calib_specs(fm, 20);
  const QuantModel qm = build_quant_model(fm, specs);
  const AblationModel am(fm, specs, AblationFlags::all());
  std::mt19937_64 rng(4);
  for (int i = 0; i < 5; ++i) {
    const auto t = tokens(mc, rng);
    ASSERT_EQ(am.forward(t), model_forward(t, qm, HwConfig{}));
  }
}

TEST(FloatOracle, DeterministicAndZeroWeights) {
  const ModelConfig mc = toy();
  FloatModel fm = synth_float_model(mc, 21);
  std::mt19937_64 rng(6);
  const auto t = tokens(mc, rng);
  EXPECT_EQ(float_oracle_forward(t, fm), float_oracle_forward(t, fm));
  std::fill(fm.host.classifier.w.data.begin(), fm.host.classifier.w.data.end(), 0.0f);
  const auto z = float_oracle_forward(t, fm);
  for (std::size_t j = 0; j < z.size(); ++j) EXPECT_EQ(z[j], fm.host.classifier.b[j]);
}

TEST(Ablation, RowsAreNestedAndCountsMonotone) {
  const auto rows = ablation_table_rows();
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows.front().label(), "float");
  EXPECT_TRUE(rows.front().all_off());
  EXPECT_TRUE(rows.back().all_on());
  const ModelConfig mc = toy(1);
  const FloatModel fm = synth_float_model(mc, 23);
  const SiteSpecs specs = calib_specs(fm, 24);
  int prev = -1;
  for (const auto& f : rows) {
    const int n = AblationModel(fm, specs, f).quantized_site_count();
    EXPECT_GE(n, prev);
    prev = n;
  }
  EXPECT_EQ(parse_ablation("none"), AblationFlags::none());
  EXPECT_EQ(parse_ablation("full"), AblationFlags::all());
  EXPECT_EQ(parse_ablation("wa+scale"), (AblationFlags{true, true, false, false}));
}

TEST(ErrorMonotonicity, CoarserWeightsNeverHelp) {
  ModelConfig mc = toy();
  const FloatModel fm = synth_float_model(mc, 1);
  const SiteSpecs specs = calibrate(fm, synth_calib(mc, 4, 0, 2), QuantSpec{});
  const CalibStream eval = synth_calib(mc, 16, 0, 3);
  std::vector<std::vector<double>> ref;
  for (const auto& s : eval) ref.push_back(float_oracle_forward(s, fm));
  double prev = INFINITY;
  for (int k : {2, 4, 8}) {
    FloatModel fk = fm;
    fk.config.w_bits = k;
    const QuantModel qm = build_quant_model(fk, specs);
    std::vector<std::vector<double>> got;
    for (const auto& s : eval) got.push_back(model_forward(s, qm, HwConfig{}));
    const double e = mean_relative_error(got, ref);
    EXPECT_LE(e, prev) << "k=" << k;
    prev = e;
  }
}

TEST(BuildQuantModel, ErrorsNameTheSite) {
  const ModelConfig mc = toy(1);
  FloatModel fm = synth_float_model(mc, 25);
  SiteSpecs specs = calib_specs(fm, 26);
  specs.erase("layer0.gelu");
  try {
    build_quant_model(fm, specs);
    FAIL();
  } catch (const NotCalibratedError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.gelu"), std::string::npos);
  }
  specs = calib_specs(fm, 26);
  std::fill(fm.layers[0].v.w.data.begin(), fm.layers[0].v.w.data.end(), 0.0f);
  try {
    build_quant_model(fm, specs);
    FAIL();
  } catch (const DegenerateScaleError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.Wv"), std::string::npos);
  }
}
