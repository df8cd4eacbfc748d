#pragma once

// Stage/sub-stage dataflow of one encoder pass and the cycle-level latency
// model built on it. Matmul stages are cut into row tiles whose weights fit
// one half of the double-buffered weight buffer; tile t+1 loads while tile t
// computes.

#include <cstdint>
#include <string>
#include <vector>

#include "fqbert/bim.hpp"
#include "fqbert/model.hpp"

namespace fqbert {

class PlanError : public Error {
 public:
  using Error::Error;
};

enum class StageMode { kW4, kW8, kSpecial };
const char* stage_mode_name(StageMode m);

struct SubStage {
  int64_t rows = 0;          // output rows in this tile
  int64_t weight_bytes = 0;  // off-chip bytes to load before the tile runs
  int64_t mac_count = 0;
};

struct Stage {
  std::string name;  // "Q-proj", "QK^T", "softmax", ...
  int layer = 0;
  StageMode mode = StageMode::kSpecial;
  int64_t out_rows = 0;  // matmul stages: output rows of the weight-side operand
  int64_t in_dim = 0;
  int64_t reps = 0;      // activation vectors streamed through each tile
  int64_t mac_count = 0;
  int64_t weight_bytes = 0;
  std::vector<SubStage> subs;
};

struct DataflowPlan {
  ModelConfig config;
  int64_t tile_rows = 0;
  std::vector<Stage> stages;  // in execution order, layer-major
};

// Largest multiple of total_pes() whose widest weight tile fits the buffer.
int64_t default_tile_rows(const ModelConfig& mc, const HwConfig& hw);

// tile_rows <= 0 selects default_tile_rows.
DataflowPlan plan_dataflow(const ModelConfig& mc, const HwConfig& hw, int64_t tile_rows = 0);

// Per layer: 4*seq*hidden^2 + 2*seq^2*hidden + 2*seq*hidden*ffn.
int64_t graph_mac_count(const ModelConfig& mc);

struct StageReport {
  std::string name;
  int layer = 0;
  int num_subs = 0;
  int64_t compute_cycles = 0;
  int64_t transfer_cycles = 0;
  int64_t overlapped_cycles = 0;  // prologue + sum of max(compute, transfer)
};

struct PerfReport {
  HwConfig hw;
  ModelConfig config;
  int64_t tile_rows = 0;
  std::vector<StageReport> stages;
  int64_t host_io_cycles = 0;
  int64_t total_cycles = 0;
  double latency_ms = 0.0;
  double fps = 0.0;

  // Stage rows summed over layers, one line per stage name.
  std::string to_table() const;
  // JSON document; field names are listed in docs/FORMAT.md.
  std::string to_json() const;
};

int64_t transfer_cycles(int64_t bytes, const HwConfig& hw);
int64_t matmul_compute_cycles(int64_t rows, int64_t in_dim, int64_t reps, StageMode mode, const HwConfig& hw);
int64_t softmax_cycles(const ModelConfig& mc, const HwConfig& hw);
int64_t layernorm_cycles(const ModelConfig& mc, const HwConfig& hw);
int64_t gelu_cycles(const HwConfig& hw);

PerfReport estimate_latency(const DataflowPlan& plan, const HwConfig& hw, const ModelConfig& mc);

struct ResourceSummary {
  int64_t multipliers = 0;             // 8x4 multipliers, PUs * N * M
  int64_t weight_buffer_bytes = 0;     // 2 * largest sub-stage
  int64_t psum_buffer_bytes = 0;       // 2 * tile_rows * 4
  int64_t intermediate_buffer_bytes = 0;  // seq*hidden + seq*seq*heads

  std::string to_text() const;
};

ResourceSummary resource_summary(const HwConfig& hw, const DataflowPlan& plan);

}  // namespace fqbert
