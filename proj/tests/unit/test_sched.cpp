#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "fqbert/sched.hpp"
#include "fqbert/store.hpp"
#include "fqbert/synth.hpp"

using namespace fqbert;

namespace {

ModelConfig bert_base() { return ModelConfig{}; }

const Stage& find_stage(const DataflowPlan& p, const std::string& name, int layer = 0) {
  for (const Stage& s : p.stages)
    if (s.name == name && s.layer == layer) return s;
  throw std::runtime_error("no stage " + name);
}

HwConfig hw_with(int pus, int n, int m, double bw = 16.0) {
  HwConfig hw;
  hw.num_pus = pus;
  hw.pes_per_pu = n;
  hw.bim.multipliers = m;
  hw.bandwidth_bytes_per_cycle = bw;
  return hw;
}

double latency(const ModelConfig& mc, const HwConfig& hw, int64_t tile = 0) {
  return estimate_latency(plan_dataflow(mc, hw, tile), hw, mc).latency_ms;
}

}  // namespace

TEST(Plan, SubStageCounts) {
  const ModelConfig mc = bert_base();
  HwConfig hw;
  hw.weight_buffer_bytes = 4 << 20;
  const DataflowPlan p768 = plan_dataflow(mc, hw, 768), p64 = plan_dataflow(mc, hw, 64);
  const DataflowPlan p100 = plan_dataflow(mc, hw, 100);
  EXPECT_EQ(find_stage(p768, "Q-proj").subs.size(), 1u);
  EXPECT_EQ(find_stage(p64, "Q-proj").subs.size(), 12u);
  const Stage& f1 = find_stage(p100, "FFN1");
  ASSERT_EQ(f1.subs.size(), 31u);
  EXPECT_EQ(f1.subs.back().rows, 72);
  for (std::size_t i = 0; i + 1 < f1.subs.size(); ++i) EXPECT_EQ(f1.subs[i].rows, 100);
}

TEST(Plan, DefaultTileFitsBuffer) {
  const ModelConfig mc = bert_base();
  EXPECT_EQ(default_tile_rows(mc, hw_with(12, 8, 16)), 288);
  EXPECT_EQ(default_tile_rows(mc, hw_with(12, 16, 16)), 192);
  const DataflowPlan p = plan_dataflow(mc, HwConfig{});
  for (const Stage& s : p.stages)
    for (const SubStage& sub : s.subs) EXPECT_LE(sub.weight_bytes, 512 * 1024);
}

TEST(Plan, OversizedTileIsRejected) {
  HwConfig hw;
  hw.weight_buffer_bytes = 1024;
  EXPECT_THROW(plan_dataflow(bert_base(), hw, 768), PlanError);
  EXPECT_THROW(default_tile_rows(bert_base(), hw), PlanError);
}

TEST(Plan, SpecialStagesCarryNoWeights) {
  const DataflowPlan p = plan_dataflow(bert_base(), HwConfig{});
  for (const Stage& s : p.stages) {
    if (s.mode != StageMode::kSpecial) continue;
    if (s.name == "LN1" || s.name == "LN2")
      EXPECT_EQ(s.weight_bytes, 2 * 768);
    else
      EXPECT_EQ(s.weight_bytes, 0);
    EXPECT_EQ(s.mac_count, 0);
  }
}

TEST(Plan, WorkConservation) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> heads(1, 12), hd(4, 64), layers(0, 12), seq(1, 128), ffn(1, 4096);
  for (int t = 0; t < 50; ++t) {
    ModelConfig mc;
    mc.heads = heads(rng);
    mc.head_dim = hd(rng);
    mc.hidden = mc.heads * mc.head_dim;
    mc.num_layers = layers(rng);
    mc.seq_len = seq(rng);
    mc.ffn_dim = ffn(rng);
    mc.w_bits = t % 2 ? 4 : 8;
    HwConfig hw;
    hw.weight_buffer_bytes = 64 << 20;
    const DataflowPlan p = plan_dataflow(mc, hw);
    int64_t macs = 0;
    for (const Stage& s : p.stages) {
      int64_t sub_sum = 0;
      for (const SubStage& sub : s.subs) sub_sum += sub.mac_count;
      ASSERT_EQ(sub_sum, s.mac_count);
      macs += s.mac_count;
    }
    const int64_t S = mc.seq_len, H = mc.hidden, F = mc.ffn_dim;
    ASSERT_EQ(macs, mc.num_layers * (4 * S * H * H + 2 * S * S * H + 2 * S * H * F));
    ASSERT_EQ(macs, graph_mac_count(mc));
  }
  EXPECT_EQ(graph_mac_count(bert_base()), 11173625856);
}

TEST(Latency, BertBaseRatioBand) {
  const ModelConfig mc = bert_base();
  const double r = latency(mc, hw_with(12, 8, 16)) / latency(mc, hw_with(12, 16, 16));
  EXPECT_GE(r, 1.6);
  EXPECT_LE(r, 2.05);
}

TEST(Latency, DoublingMultipliersHalvesMatmulCompute) {
  const ModelConfig mc = bert_base();
  const double inf = std::numeric_limits<double>::infinity();
  const HwConfig a = hw_with(12, 8, 16, inf), b = hw_with(12, 8, 32, inf);
  const PerfReport ra = estimate_latency(plan_dataflow(mc, a, 192), a, mc);
  const PerfReport rb = estimate_latency(plan_dataflow(mc, b, 192), b, mc);
  ASSERT_EQ(ra.stages.size(), rb.stages.size());
  for (std::size_t i = 0; i < ra.stages.size(); ++i) {
    const std::string& n = ra.stages[i].name;
    if (n == "softmax" || n == "GELU" || n == "LN1" || n == "LN2") continue;
    EXPECT_EQ(ra.stages[i].compute_cycles, 2 * rb.stages[i].compute_cycles) << n;
    EXPECT_EQ(ra.stages[i].transfer_cycles, 0);
  }
}

TEST(Latency, InfiniteBandwidthLeavesOnlyCompute) {
  const ModelConfig mc = bert_base();
  const HwConfig hw = hw_with(12, 8, 16, std::numeric_limits<double>::infinity());
  const PerfReport r = estimate_latency(plan_dataflow(mc, hw), hw, mc);
  int64_t compute = 0;
  for (const auto& s : r.stages) compute += s.compute_cycles;
  EXPECT_EQ(r.host_io_cycles, 0);
  EXPECT_EQ(r.total_cycles, compute);
}

TEST(Latency, FullOverlapRegime) {
  const ModelConfig mc = bert_base();
  HwConfig hw = hw_with(12, 8, 16, 1e6);
  const DataflowPlan p = plan_dataflow(mc, hw);
  const PerfReport r = estimate_latency(p, hw, mc);
  for (std::size_t i = 0; i < p.stages.size(); ++i) {
    const Stage& s = p.stages[i];
    EXPECT_EQ(r.stages[i].overlapped_cycles, transfer_cycles(s.subs[0].weight_bytes, hw) + r.stages[i].compute_cycles)
        << s.name;
  }
}

TEST(Latency, MonotoneInEachResource) {
  const ModelConfig mc = bert_base();
  double prev = 1e300;
  for (int n : {1, 2, 4, 8, 16}) {
    const double l = latency(mc, hw_with(12, n, 16), 192);
    EXPECT_LE(l, prev) << "N=" << n;
    prev = l;
  }
  prev = 1e300;
  for (int m : {2, 4, 8, 16, 32}) {
    const double l = latency(mc, hw_with(12, 8, m), 96);
    EXPECT_LE(l, prev) << "M=" << m;
    prev = l;
  }
  prev = 1e300;
  for (int pus : {1, 2, 3, 4, 6, 12}) {
    const double l = latency(mc, hw_with(pus, 8, 16), 96);
    EXPECT_LE(l, prev) << "PUs=" << pus;
    prev = l;
  }
  prev = 1e300;
  for (double bw : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 1e9}) {
    const double l = latency(mc, hw_with(12, 8, 16, bw));
    EXPECT_LE(l, prev) << "bw=" << bw;
    prev = l;
  }
}

TEST(Latency, FpsIsReciprocal) {
  const ModelConfig mc = bert_base();
  const HwConfig hw;
  const PerfReport r = estimate_latency(plan_dataflow(mc, hw), hw, mc);
  EXPECT_DOUBLE_EQ(r.fps, 1000.0 / r.latency_ms);
  EXPECT_DOUBLE_EQ(r.latency_ms, r.total_cycles / (hw.clock_mhz * 1e3));
  EXPECT_NE(r.to_table().find("total_cycles=" + std::to_string(r.total_cycles)), std::string::npos);
  EXPECT_NE(r.to_json().find("\"total_cycles\": " + std::to_string(r.total_cycles)), std::string::npos);
}

TEST(Resources, Multipliers) {
  const ModelConfig mc = bert_base();
  EXPECT_EQ(resource_summary(hw_with(12, 8, 16), plan_dataflow(mc, hw_with(12, 8, 16))).multipliers, 1536);
  EXPECT_EQ(resource_summary(hw_with(12, 16, 16), plan_dataflow(mc, hw_with(12, 16, 16))).multipliers, 3072);
  EXPECT_EQ(resource_summary(hw_with(1, 1, 2), plan_dataflow(mc, hw_with(1, 1, 2))).multipliers, 2);
}

TEST(Functional, OutputsIndependentOfHardware) {
  ModelConfig mc;
  mc.num_layers = 2;
  mc.hidden = 32;
  mc.heads = 4;
  mc.head_dim = 8;
  mc.ffn_dim = 64;
  mc.seq_len = 6;
  mc.vocab_size = 40;
  mc.max_position = 8;
  const FloatModel fm = synth_float_model(mc, 7);
  const QuantModel qm = build_quant_model(fm, calibrate(fm, synth_calib(mc, 3, 0, 8), QuantSpec{}));
  const auto toks = synth_calib(mc, 1, 0, 9)[0];
  const auto want = model_forward(toks, qm, HwConfig{});
  for (const HwConfig& hw : {hw_with(1, 1, 2), hw_with(3, 5, 6), hw_with(12, 16, 32)}) {
    EXPECT_EQ(model_forward(toks, qm, hw), want);
  }
}
