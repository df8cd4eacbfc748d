#include "fqbert/sched.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

namespace fqbert {

namespace {

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

int64_t row_bytes(int64_t in_dim, int w_bits) { return ceil_div(in_dim * storage_bits(w_bits), 8); }

struct LinearShape {
  const char* name;
  int64_t rows;
  int64_t in_dim;
};

std::vector<LinearShape> linear_shapes(const ModelConfig& mc) {
  const int64_t h = mc.hidden, f = mc.ffn_dim;
  return {{"Q-proj", h, h}, {"K-proj", h, h}, {"V-proj", h, h}, {"O-proj", h, h}, {"FFN1", f, h}, {"FFN2", h, f}};
}

Stage weight_stage(const LinearShape& ls, int layer, const ModelConfig& mc, const HwConfig& hw, int64_t tile) {
  Stage s;
  s.name = ls.name;
  s.layer = layer;
  s.mode = mc.w_bits <= 4 ? StageMode::kW4 : StageMode::kW8;
  s.out_rows = ls.rows;
  s.in_dim = ls.in_dim;
  s.reps = mc.seq_len;
  const int64_t rb = row_bytes(ls.in_dim, mc.w_bits);
  for (int64_t r0 = 0; r0 < ls.rows; r0 += tile) {
    SubStage sub;
    sub.rows = std::min(tile, ls.rows - r0);
    sub.weight_bytes = sub.rows * rb;
    sub.mac_count = sub.rows * ls.in_dim * s.reps;
    if (sub.weight_bytes > static_cast<int64_t>(hw.weight_buffer_bytes)) {
      throw PlanError("plan_dataflow: " + s.name + " tile of " + std::to_string(sub.rows) + " rows needs " +
                      std::to_string(sub.weight_bytes) + " bytes of weight buffer, capacity is " +
                      std::to_string(hw.weight_buffer_bytes));
    }
    s.subs.push_back(sub);
    s.mac_count += sub.mac_count;
    s.weight_bytes += sub.weight_bytes;
  }
  return s;
}

// Attention matmuls: the "weights" (K, V^T) are activations already on chip.
Stage attention_stage(const char* name, int layer, int64_t rows, int64_t in_dim, int64_t reps) {
  Stage s;
  s.name = name;
  s.layer = layer;
  s.mode = StageMode::kW8;
  s.out_rows = rows;
  s.in_dim = in_dim;
  s.reps = reps;
  s.mac_count = rows * in_dim * reps;
  s.subs.push_back(SubStage{rows, 0, s.mac_count});
  return s;
}

Stage special_stage(const char* name, int layer, int64_t param_bytes) {
  Stage s;
  s.name = name;
  s.layer = layer;
  s.mode = StageMode::kSpecial;
  s.weight_bytes = param_bytes;
  s.subs.push_back(SubStage{0, param_bytes, 0});
  return s;
}

}  // namespace

const char* stage_mode_name(StageMode m) {
  switch (m) {
    case StageMode::kW4: return "W4";
    case StageMode::kW8: return "W8";
    case StageMode::kSpecial: return "special";
  }
  return "?";
}

int64_t default_tile_rows(const ModelConfig& mc, const HwConfig& hw) {
  int64_t widest = 0;
  for (const auto& ls : linear_shapes(mc)) widest = std::max(widest, row_bytes(ls.in_dim, mc.w_bits));
  const int64_t fit = static_cast<int64_t>(hw.weight_buffer_bytes) / widest;
  if (fit < 1) {
    throw PlanError("default_tile_rows: one weight row needs " + std::to_string(widest) +
                    " bytes, buffer capacity is " + std::to_string(hw.weight_buffer_bytes));
  }
  const int64_t pes = hw.total_pes();
  return fit >= pes ? fit / pes * pes : fit;
}

DataflowPlan plan_dataflow(const ModelConfig& mc, const HwConfig& hw, int64_t tile_rows) {
  mc.validate();
  hw.validate();
  DataflowPlan plan;
  plan.config = mc;
  plan.tile_rows = tile_rows > 0 ? tile_rows : default_tile_rows(mc, hw);
  const auto shapes = linear_shapes(mc);
  const int64_t seq = mc.seq_len, h = mc.hidden;
  for (int l = 0; l < mc.num_layers; ++l) {
    for (int i = 0; i < 3; ++i) plan.stages.push_back(weight_stage(shapes[i], l, mc, hw, plan.tile_rows));
    plan.stages.push_back(attention_stage("QK^T", l, int64_t{mc.heads} * seq, mc.head_dim, seq));
    plan.stages.push_back(special_stage("softmax", l, 0));
    plan.stages.push_back(attention_stage("AV", l, h, seq, seq));
    plan.stages.push_back(weight_stage(shapes[3], l, mc, hw, plan.tile_rows));
    plan.stages.push_back(special_stage("LN1", l, 2 * h));
    plan.stages.push_back(weight_stage(shapes[4], l, mc, hw, plan.tile_rows));
    plan.stages.push_back(special_stage("GELU", l, 0));
    plan.stages.push_back(weight_stage(shapes[5], l, mc, hw, plan.tile_rows));
    plan.stages.push_back(special_stage("LN2", l, 2 * h));
  }
  return plan;
}

int64_t graph_mac_count(const ModelConfig& mc) {
  const int64_t s = mc.seq_len, h = mc.hidden, f = mc.ffn_dim;
  return mc.num_layers * (4 * s * h * h + 2 * s * s * h + 2 * s * h * f);
}

int64_t transfer_cycles(int64_t bytes, const HwConfig& hw) {
  if (bytes <= 0) return 0;
  return static_cast<int64_t>(std::ceil(static_cast<double>(bytes) / hw.bandwidth_bytes_per_cycle));
}

int64_t matmul_compute_cycles(int64_t rows, int64_t in_dim, int64_t reps, StageMode mode, const HwConfig& hw) {
  const LaneMode lm = mode == StageMode::kW4 ? LaneMode::kW4 : LaneMode::kW8;
  return ceil_div(rows, hw.total_pes()) * ceil_div(in_dim, hw.bim.lane_capacity(lm)) * reps;
}

// Rows of every head stream through the LUT lanes back to back; the three
// pipeline phases (max, exp+sum, normalize) overlap across rows.
int64_t softmax_cycles(const ModelConfig& mc, const HwConfig& hw) {
  const int64_t rows = int64_t{mc.heads} * mc.seq_len;
  return (rows + 2) * ceil_div(mc.seq_len, hw.softmax_lanes) + hw.lut_pipeline_depth;
}

// Three stages (sum, variance, normalize) pipelined across token rows.
int64_t layernorm_cycles(const ModelConfig& mc, const HwConfig& hw) {
  return (int64_t{mc.seq_len} + 2) * ceil_div(mc.hidden, hw.simd_width);
}

// GELU is a table lookup in the quantization unit after FFN1; only the LUT
// pipeline fill is exposed.
int64_t gelu_cycles(const HwConfig& hw) { return hw.lut_pipeline_depth; }

PerfReport estimate_latency(const DataflowPlan& plan, const HwConfig& hw, const ModelConfig& mc) {
  hw.validate();
  PerfReport rep;
  rep.hw = hw;
  rep.config = mc;
  rep.tile_rows = plan.tile_rows;
  for (const Stage& s : plan.stages) {
    StageReport sr;
    sr.name = s.name;
    sr.layer = s.layer;
    sr.num_subs = static_cast<int>(s.subs.size());
    for (std::size_t t = 0; t < s.subs.size(); ++t) {
      const SubStage& sub = s.subs[t];
      int64_t compute = 0;
      if (s.mode != StageMode::kSpecial) {
        compute = matmul_compute_cycles(sub.rows, s.in_dim, s.reps, s.mode, hw);
      } else if (s.name == "softmax") {
        compute = softmax_cycles(mc, hw);
      } else if (s.name == "GELU") {
        compute = gelu_cycles(hw);
      } else {
        compute = layernorm_cycles(mc, hw);
      }
      const int64_t transfer = transfer_cycles(sub.weight_bytes, hw);
      if (t == 0) sr.overlapped_cycles += transfer;  // prologue
      sr.overlapped_cycles += std::max(compute, t == 0 ? 0 : transfer);
      sr.compute_cycles += compute;
      sr.transfer_cycles += transfer;
    }
    rep.total_cycles += sr.overlapped_cycles;
    rep.stages.push_back(std::move(sr));
  }
  // Token activations in from the host, final hidden states back out.
  rep.host_io_cycles = 2 * transfer_cycles(int64_t{mc.seq_len} * mc.hidden, hw);
  rep.total_cycles += rep.host_io_cycles;
  rep.latency_ms = static_cast<double>(rep.total_cycles) / (hw.clock_mhz * 1e3);
  rep.fps = 1000.0 / rep.latency_ms;
  return rep;
}

std::string PerfReport::to_table() const {
  struct Agg {
    int order = 0;
    int64_t subs = 0, compute = 0, transfer = 0, overlapped = 0;
  };
  std::map<std::string, Agg> agg;
  int order = 0;
  for (const auto& s : stages) {
    auto [it, fresh] = agg.try_emplace(s.name);
    if (fresh) it->second.order = order++;
    it->second.subs += s.num_subs;
    it->second.compute += s.compute_cycles;
    it->second.transfer += s.transfer_cycles;
    it->second.overlapped += s.overlapped_cycles;
  }
  std::vector<std::pair<std::string, Agg>> rows(agg.begin(), agg.end());
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second.order < b.second.order; });

  std::ostringstream os;
  os << "# PUs=" << hw.num_pus << " N=" << hw.pes_per_pu << " M=" << hw.bim.multipliers
     << " clock_mhz=" << hw.clock_mhz << " bandwidth=" << hw.bandwidth_bytes_per_cycle
     << " tile_rows=" << tile_rows << " layers=" << config.num_layers << " seq=" << config.seq_len << "\n";
  os << std::left << std::setw(10) << "stage" << std::right << std::setw(8) << "subs" << std::setw(14) << "compute"
     << std::setw(14) << "transfer" << std::setw(14) << "overlapped" << "\n";
  for (const auto& [name, a] : rows) {
    os << std::left << std::setw(10) << name << std::right << std::setw(8) << a.subs << std::setw(14) << a.compute
       << std::setw(14) << a.transfer << std::setw(14) << a.overlapped << "\n";
  }
  os << std::left << std::setw(10) << "host-io" << std::right << std::setw(8) << "-" << std::setw(14) << "-"
     << std::setw(14) << host_io_cycles << std::setw(14) << host_io_cycles << "\n";
  os << std::fixed << std::setprecision(4);
  os << "total_cycles=" << total_cycles << "\n";
  os << "latency_ms=" << latency_ms << "\n";
  os << "fps=" << fps << "\n";
  return os.str();
}

std::string PerfReport::to_json() const {
  nlohmann::ordered_json j;
  j["hw"] = {{"num_pus", hw.num_pus},
             {"pes_per_pu", hw.pes_per_pu},
             {"multipliers", hw.bim.multipliers},
             {"bim_variant", hw.bim.variant == BimVariant::kTypeA ? "A" : "B"},
             {"clock_mhz", hw.clock_mhz},
             {"bandwidth_bytes_per_cycle", hw.bandwidth_bytes_per_cycle},
             {"weight_buffer_bytes", hw.weight_buffer_bytes},
             {"simd_width", hw.simd_width},
             {"softmax_lanes", hw.softmax_lanes},
             {"lut_pipeline_depth", hw.lut_pipeline_depth}};
  j["model"] = {{"num_layers", config.num_layers}, {"hidden", config.hidden},   {"heads", config.heads},
                {"ffn_dim", config.ffn_dim},       {"seq_len", config.seq_len}, {"w_bits", config.w_bits}};
  j["tile_rows"] = tile_rows;
  auto& st = j["stages"] = nlohmann::ordered_json::array();
  for (const auto& s : stages) {
    st.push_back({{"layer", s.layer},
                  {"name", s.name},
                  {"sub_stages", s.num_subs},
                  {"compute_cycles", s.compute_cycles},
                  {"transfer_cycles", s.transfer_cycles},
                  {"overlapped_cycles", s.overlapped_cycles}});
  }
  j["host_io_cycles"] = host_io_cycles;
  j["total_cycles"] = total_cycles;
  j["latency_ms"] = latency_ms;
  j["fps"] = fps;
  return j.dump(2) + "\n";
}

ResourceSummary resource_summary(const HwConfig& hw, const DataflowPlan& plan) {
  ResourceSummary r;
  r.multipliers = int64_t{hw.num_pus} * hw.pes_per_pu * hw.bim.multipliers;
  int64_t widest = 0;
  for (const auto& s : plan.stages) {
    if (s.mode == StageMode::kSpecial) continue;
    for (const auto& sub : s.subs) widest = std::max(widest, sub.weight_bytes);
  }
  const ModelConfig& mc = plan.config;
  r.weight_buffer_bytes = 2 * widest;
  r.psum_buffer_bytes = 2 * plan.tile_rows * 4;
  r.intermediate_buffer_bytes =
      int64_t{mc.seq_len} * mc.hidden + int64_t{mc.seq_len} * mc.seq_len * mc.heads;
  return r;
}

std::string ResourceSummary::to_text() const {
  std::ostringstream os;
  os << "multipliers=" << multipliers << "\n"
     << "weight_buffer_bytes=" << weight_buffer_bytes << "\n"
     << "psum_buffer_bytes=" << psum_buffer_bytes << "\n"
     << "intermediate_buffer_bytes=" << intermediate_buffer_bytes << "\n";
  return os.str();
}

}  // namespace fqbert
