#pragma once

// The quantized BERT encoder. Two executions of the same graph live here:
//
//   * the integer path (model_forward with all quantization enabled), which
//     runs every encoder matmul through the PE/BIM kernels, the LUT softmax
//     and the fixed-point LN core;
//   * the reference path, which runs the graph in double precision and
//     inserts quantize/dequantize wherever the integer path quantizes. With
//     every ablation flag off it is the float oracle; with every flag on it is
//     the fake-quant reference that the integer path must match bit for bit.
//
// Embeddings and the classification head are host-side float code in both.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fqbert/bim.hpp"
#include "fqbert/qnum.hpp"
#include "fqbert/specfn.hpp"

namespace fqbert {

struct ModelConfig {
  int num_layers = 12;
  int hidden = 768;
  int heads = 12;
  int head_dim = 64;
  int ffn_dim = 3072;
  int seq_len = 128;
  int w_bits = 4;
  int a_bits = 8;
  int vocab_size = 30522;
  int max_position = 512;
  int type_vocab = 2;
  int num_labels = 2;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Which parts of the network run quantized; one switch per ablation column.
struct AblationFlags {
  bool quant_weights_acts = true;
  bool quant_scale = true;
  bool quant_softmax = true;
  bool quant_layernorm = true;

  static AblationFlags all() { return {}; }
  static AblationFlags none() { return {false, false, false, false}; }
  bool all_on() const { return quant_weights_acts && quant_scale && quant_softmax && quant_layernorm; }
  bool all_off() const { return !quant_weights_acts && !quant_scale && !quant_softmax && !quant_layernorm; }
  std::string label() const;
  bool operator==(const AblationFlags&) const = default;
};

// The five nested rows: float, +w/a, +scale, +softmax, +layernorm.
std::vector<AblationFlags> ablation_table_rows();

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
  std::span<const float> row(std::size_t r) const { return std::span(data).subspan(r * cols, cols); }
  std::span<float> row(std::size_t r) { return std::span(data).subspan(r * cols, cols); }
};

// y = W x + b with W stored [out x in].
struct FloatLinear {
  Matrix w;
  std::vector<float> b;
};

struct FloatLayer {
  FloatLinear q, k, v, o, ffn1, ffn2;
  std::vector<float> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

// Host-side float parameters: embeddings, embedding LN, pooler and classifier.
struct HostWeights {
  Matrix word, position, segment;
  std::vector<float> ln_gamma, ln_beta;
  FloatLinear pooler, classifier;
};

struct FloatModel {
  ModelConfig config;
  HostWeights host;
  std::vector<FloatLayer> layers;
};

// Activation sites with their own calibrated scale, per layer.
enum class Site : int { kQ, kK, kV, kScores, kCtx, kAttnOut, kLn1, kFfn1, kGelu, kFfn2, kLn2 };
inline constexpr int kNumSites = 11;
inline constexpr std::array<Site, kNumSites> kAllSites = {
    Site::kQ,       Site::kK,   Site::kV,    Site::kScores, Site::kCtx, Site::kAttnOut,
    Site::kLn1,     Site::kFfn1, Site::kGelu, Site::kFfn2,   Site::kLn2};

const char* site_suffix(Site s);
std::string site_name(int layer, Site s);  // "layer3.scores"
inline const std::string kInputSite = "encoder.input";
// Site whose scale the given layer's input lives on.
std::string layer_input_site(int layer);

using SiteSpecs = std::map<std::string, QuantSpec>;
std::vector<std::string> all_site_names(const ModelConfig& mc);

struct QuantLinear {
  QTensor weight;       // w_bits, [out x in]
  Scale8 weight_scale;
  QTensor bias;         // 32-bit, scale = s_in * s_w
  RequantMul requant;   // s_out / (s_in * s_w)
};

struct QuantLayer {
  QuantLinear q, k, v, o, ffn1, ffn2;
  RequantMul scores_requant;  // s_scores / (s_q * s_k * sqrt(head_dim))
  RequantMul ctx_requant;     // s_ctx / (256 * s_v)
  std::array<Scale8, kNumSites> site_scale{};
  LnParams ln1, ln2;
  ExpLut softmax_lut;
  std::array<int32_t, 256> gelu_lut{};  // indexed by code + 128

  Scale8 scale(Site s) const { return site_scale[static_cast<std::size_t>(s)]; }
};

struct QuantModel {
  ModelConfig config;
  HostWeights host;
  Scale8 input_scale;
  std::vector<QuantLayer> layers;
};

// Quantization codes observed at each site, keyed by site name
// (plus "layer{i}.probs" for softmax outputs), in row-major order.
using Trace = std::map<std::string, std::vector<int32_t>>;

// Called with every float activation at a calibration site.
using SiteObserver = std::function<void(const std::string& site, std::span<const double> values)>;

double gelu(double x);
std::array<int32_t, 256> build_gelu_lut(Scale8 in_scale, Scale8 out_scale, int out_bits);

// Weight quantization for one linear layer, shared by model building and
// the container writer.
QuantLinear quantize_linear(const FloatLinear& lin, Scale8 in_scale, Scale8 out_scale, int w_bits);

// Builds the integer model from float weights and calibrated site specs.
QuantModel build_quant_model(const FloatModel& fm, const SiteSpecs& specs);

// ---- host side -----------------------------------------------------------

// Float embedding output (token + position + segment, then LN), seq x hidden.
std::vector<std::vector<double>> embed_tokens(std::span<const int32_t> token_ids, const ModelConfig& mc,
                                              const HostWeights& host);
std::vector<double> classify(std::span<const double> first_token, const HostWeights& host);

// ---- integer path ----------------------------------------------------------

// x: seq x hidden codes at the layer-input scale; returns the LN2 output.
struct IntActivations {
  std::vector<int32_t> codes;  // seq x hidden
  std::size_t seq = 0;
  double scale = 1.0;
};

struct LayerStats {
  int64_t pe_cycles = 0;  // sum of matvec cycles reported by the PE kernels
  bool acc_saturated = false;
};

IntActivations mha_forward(const IntActivations& x, const QuantLayer& w, const ModelConfig& mc,
                           const HwConfig& hw, int layer, Trace* trace, LayerStats* stats);
IntActivations ffn_forward(const IntActivations& u, const QuantLayer& w, const ModelConfig& mc,
                           const HwConfig& hw, int layer, Trace* trace, LayerStats* stats);
IntActivations encoder_layer_forward(const IntActivations& x, const QuantLayer& w, const ModelConfig& mc,
                                     const HwConfig& hw, int layer, Trace* trace = nullptr,
                                     LayerStats* stats = nullptr);

// Integer encoder between float host stages.
std::vector<double> model_forward(std::span<const int32_t> token_ids, const QuantModel& qm, const HwConfig& hw,
                                  Trace* trace = nullptr, LayerStats* stats = nullptr);

// ---- reference path --------------------------------------------------------

// Fake-quant execution of a QuantModel in real arithmetic.
std::vector<double> fake_quant_forward(std::span<const int32_t> token_ids, const QuantModel& qm,
                                       Trace* trace = nullptr);

// Plain float network; `observer` sees every activation site.
std::vector<double> float_oracle_forward(std::span<const int32_t> token_ids, const FloatModel& fm,
                                         const SiteObserver& observer = {});

// Everything needed to run any ablation row: float weights plus calibration.
class AblationModel {
 public:
  AblationModel(const FloatModel& fm, const SiteSpecs& specs, AblationFlags flags);

  std::vector<double> forward(std::span<const int32_t> token_ids, Trace* trace = nullptr) const;
  const AblationFlags& flags() const { return flags_; }
  // Number of graph parts that run quantized under these flags.
  int quantized_site_count() const;

 private:
  const FloatModel* fm_;
  AblationFlags flags_;
  SiteSpecs specs_;
  std::optional<QuantModel> qm_;
};

// Dispatches on the flags: all on runs the integer path over `qm`; anything
// else runs the reference path over the float weights.
std::vector<double> model_forward(std::span<const int32_t> token_ids, const QuantModel& qm,
                                  const FloatModel* fm, const SiteSpecs* specs, const HwConfig& hw,
                                  AblationFlags flags, Trace* trace = nullptr);

}  // namespace fqbert
