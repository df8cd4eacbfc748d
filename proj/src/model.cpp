#include "fqbert/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fqbert {

static_assert(std::numeric_limits<long double>::digits >= 64,
              "fake-quant requantization needs a 64-bit long double mantissa");

namespace {

constexpr double kFloatLnEps = 1e-12;

using Rows = std::vector<std::vector<double>>;

std::vector<double> flatten(const Rows& m) {
  std::vector<double> out;
  for (const auto& r : m) out.insert(out.end(), r.begin(), r.end());
  return out;
}

int32_t quantize_activation(double v, double scale, int bits) {
  return saturate(round_half_away(v * scale), bits, true);
}

// Site scale from a calibrated spec: 2^(k-1)-1 over the clip threshold.
double calibrated_scale(const QuantSpec& spec) {
  if (!spec.ema_state || !(*spec.ema_state > 0.0)) {
    throw NotCalibratedError("activation site is not calibrated");
  }
  if (!(spec.max_clip > 0.0)) throw ArgumentError("activation clip threshold must be positive");
  return symmetric_rail(spec.bits) / spec.max_clip;
}

const QuantSpec& spec_at(const SiteSpecs& specs, const std::string& name) {
  auto it = specs.find(name);
  if (it == specs.end()) throw NotCalibratedError("missing calibration for site " + name);
  return it->second;
}

void layer_norm_float(std::span<double> v, std::span<const float> gamma, std::span<const float> beta) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + kFloatLnEps);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - mean) * inv * gamma[i] + beta[i];
}

double dot_float(std::span<const float> w, std::span<const double> x) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += static_cast<double>(w[i]) * x[i];
  return s;
}

std::vector<double> linear_float(const FloatLinear& lin, std::span<const double> x) {
  std::vector<double> y(lin.w.rows);
  for (std::size_t r = 0; r < lin.w.rows; ++r) y[r] = dot_float(lin.w.row(r), x) + lin.b[r];
  return y;
}

// Real-valued (acc * m * 2^-shift), rounded half away from zero. The product
// fits a 64-bit mantissa, so this is exact.
int32_t requant_real(int64_t acc, RequantMul rm, int bits) {
  const long double f = std::ldexp(static_cast<long double>(rm.multiplier), -rm.shift);
  return saturate(std::llroundl(static_cast<long double>(acc) * f), bits, true);
}

// Snaps a real accumulator onto its integer grid (units of 1 / product_scale)
// and applies the 32-bit accumulator range.
int64_t snap_accumulator(double acc, double product_scale) {
  const long long v = std::llround(acc * product_scale);
  return std::clamp<long long>(v, std::numeric_limits<int32_t>::min(), std::numeric_limits<int32_t>::max());
}

void record(Trace* trace, const std::string& name, std::span<const int32_t> codes) {
  if (trace) {
    auto& dst = (*trace)[name];
    dst.insert(dst.end(), codes.begin(), codes.end());
  }
}

// ---- reference engine -------------------------------------------------------

struct RefLinear {
  const FloatLinear* fl = nullptr;  // float weights when not quantized
  std::vector<double> w;            // grid weights when quantized
  std::vector<double> b;
  std::size_t rows = 0, cols = 0;
  double w_scale = 0.0;  // 0: float
  std::optional<RequantMul> rm;

  double dot(std::size_t r, std::span<const double> x) const {
    if (fl) return dot_float(fl->w.row(r), x);
    double s = 0.0;
    const double* wr = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) s += wr[c] * x[c];
    return s;
  }
};

struct RefLayer {
  RefLinear q, k, v, o, ffn1, ffn2;
  std::optional<RequantMul> scores_rm, ctx_rm;
  std::array<double, kNumSites> scale{};  // 0: site stays float
  const FloatLayer* fl = nullptr;         // float LN parameters
  const QuantLayer* ql = nullptr;         // LN core parameters and 8-bit scales
  ExpLut lut;

  double s(Site site) const { return scale[static_cast<std::size_t>(site)]; }
};

struct RefModel {
  const ModelConfig* mc = nullptr;
  const HostWeights* host = nullptr;
  AblationFlags flags = AblationFlags::none();
  double input_scale = 0.0;
  Scale8 input_scale8;
  std::vector<RefLayer> layers;
};

RefLinear ref_from_quant(const QuantLinear& ql) {
  RefLinear r;
  r.rows = ql.weight.shape[0];
  r.cols = ql.weight.shape[1];
  r.w_scale = ql.weight_scale.value();
  r.w.resize(ql.weight.data.size());
  for (std::size_t i = 0; i < r.w.size(); ++i) r.w[i] = ql.weight.data[i] / r.w_scale;
  r.b.resize(ql.bias.data.size());
  for (std::size_t i = 0; i < r.b.size(); ++i) r.b[i] = ql.bias.data[i] / ql.bias.scale;
  r.rm = ql.requant;
  return r;
}

RefLinear ref_float(const FloatLinear& fl) {
  RefLinear r;
  r.fl = &fl;
  r.rows = fl.w.rows;
  r.cols = fl.w.cols;
  r.b.assign(fl.b.begin(), fl.b.end());
  return r;
}

// Weights on an ideal (unrounded) scale grid.
RefLinear ref_ideal(const FloatLinear& fl, double in_scale, int w_bits) {
  RefLinear r;
  r.rows = fl.w.rows;
  r.cols = fl.w.cols;
  r.w_scale = weight_scale(std::span<const float>(fl.w.data), w_bits);
  double max_abs = 0.0;
  for (float v : fl.w.data) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
  const QuantSpec spec{w_bits, max_abs};
  r.w.resize(fl.w.data.size());
  for (std::size_t i = 0; i < r.w.size(); ++i) r.w[i] = quantize_value(fl.w.data[i], spec, r.w_scale) / r.w_scale;
  const double bs = in_scale * r.w_scale;
  r.b.resize(fl.b.size());
  for (std::size_t i = 0; i < r.b.size(); ++i) {
    const double code = std::clamp<double>(std::round(fl.b[i] * bs), INT32_MIN, INT32_MAX);
    r.b[i] = code / bs;
  }
  return r;
}

// Output of a linear layer for every row of `x`. `x_scale` is the grid of the
// input (0 if float) and `out_scale` the output site scale (0 keeps it float).
Rows ref_linear(const RefLinear& lin, const Rows& x, double x_scale, double out_scale, int bits,
                Trace* trace, const std::string& site) {
  Rows y(x.size(), std::vector<double>(lin.rows));
  std::vector<int32_t> codes;
  for (std::size_t t = 0; t < x.size(); ++t) {
    for (std::size_t r = 0; r < lin.rows; ++r) {
      const double acc = lin.dot(r, x[t]) + lin.b[r];
      if (lin.rm && x_scale > 0.0) {
        const int32_t c = requant_real(snap_accumulator(acc, x_scale * lin.w_scale), *lin.rm, bits);
        codes.push_back(c);
        y[t][r] = c / out_scale;
      } else if (out_scale > 0.0) {
        const int32_t c = quantize_activation(acc, out_scale, bits);
        codes.push_back(c);
        y[t][r] = c / out_scale;
      } else {
        y[t][r] = acc;
      }
    }
  }
  record(trace, site, codes);
  return y;
}

void quantize_rows(Rows& x, double scale, int bits, Trace* trace, const std::string& site) {
  std::vector<int32_t> codes;
  for (auto& row : x) {
    for (double& v : row) {
      const int32_t c = quantize_activation(v, scale, bits);
      codes.push_back(c);
      v = c / scale;
    }
  }
  record(trace, site, codes);
}

void observe(const SiteObserver* obs, const std::string& site, const Rows& x) {
  if (obs && *obs) {
    const auto flat = flatten(x);
    (*obs)(site, flat);
  }
}

// LN through the fixed-point core; inputs are moved onto 8-bit grids first if
// they are not already there.
Rows ref_layernorm_core(const Rows& a, double a_scale, Scale8 a8, const Rows& x, double x_scale, Scale8 x8,
                        const LnParams& p, Scale8 out8, int bits) {
  Rows out(a.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    QTensor q1, q2;
    q1.scale = a8.value();
    q2.scale = x8.value();
    for (double v : a[t]) {
      q1.data.push_back(a_scale == q1.scale ? static_cast<int32_t>(std::llround(v * a_scale))
                                            : quantize_activation(v, q1.scale, bits));
    }
    for (double v : x[t]) {
      q2.data.push_back(x_scale == q2.scale ? static_cast<int32_t>(std::llround(v * x_scale))
                                            : quantize_activation(v, q2.scale, bits));
    }
    const QTensor y = layernorm_q(q1, q2, p, QuantSpec{bits, symmetric_rail(bits) / out8.value()}, out8);
    out[t].resize(y.data.size());
    for (std::size_t i = 0; i < y.data.size(); ++i) out[t][i] = y.data[i] / y.scale;
  }
  return out;
}

std::vector<int32_t> codes_of(const Rows& x, double scale) {
  std::vector<int32_t> c;
  for (const auto& r : x) {
    for (double v : r) c.push_back(static_cast<int32_t>(std::llround(v * scale)));
  }
  return c;
}

struct RefLayerOut {
  Rows x;
  double scale = 0.0;
};

RefLayerOut ref_layer(const RefModel& m, const RefLayer& L, int li, const Rows& x, double x_scale,
                      Scale8 x_scale8, Trace* trace, const SiteObserver* obs) {
  const ModelConfig& mc = *m.mc;
  const AblationFlags& f = m.flags;
  const int bits = mc.a_bits;
  const bool wa = f.quant_weights_acts;
  const bool sc = wa && f.quant_scale;
  const std::size_t seq = x.size();
  const std::size_t d = static_cast<std::size_t>(mc.head_dim);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(mc.head_dim));
  auto name = [&](Site s) { return site_name(li, s); };

  Rows Q = ref_linear(L.q, x, x_scale, L.s(Site::kQ), bits, trace, name(Site::kQ));
  Rows K = ref_linear(L.k, x, x_scale, L.s(Site::kK), bits, trace, name(Site::kK));
  Rows V = ref_linear(L.v, x, x_scale, L.s(Site::kV), bits, trace, name(Site::kV));
  observe(obs, name(Site::kQ), Q);
  observe(obs, name(Site::kK), K);
  observe(obs, name(Site::kV), V);

  const double s_scores = L.s(Site::kScores);
  const double s_ctx = L.s(Site::kCtx);
  Rows ctx(seq, std::vector<double>(static_cast<std::size_t>(mc.hidden)));
  std::vector<int32_t> score_codes, prob_codes, ctx_codes_hm;
  Rows all_scores;
  for (std::size_t h = 0; h < static_cast<std::size_t>(mc.heads); ++h) {
    const std::size_t off = h * d;
    for (std::size_t i = 0; i < seq; ++i) {
      std::vector<double> srow(seq);
      std::vector<int32_t> scodes(seq);
      for (std::size_t j = 0; j < seq; ++j) {
        double acc = 0.0;
        for (std::size_t e = 0; e < d; ++e) acc += Q[i][off + e] * K[j][off + e];
        if (sc && L.scores_rm) {
          scodes[j] = requant_real(snap_accumulator(acc, L.s(Site::kQ) * L.s(Site::kK)), *L.scores_rm, bits);
          srow[j] = scodes[j] / s_scores;
        } else if (s_scores > 0.0) {
          scodes[j] = quantize_activation(acc * inv_sqrt_d, s_scores, bits);
          srow[j] = scodes[j] / s_scores;
        } else {
          srow[j] = acc * inv_sqrt_d;
        }
      }
      if (s_scores > 0.0) score_codes.insert(score_codes.end(), scodes.begin(), scodes.end());
      all_scores.push_back(srow);

      std::vector<double> p(seq);
      if (f.quant_softmax) {
        const double mx = *std::max_element(srow.begin(), srow.end());
        std::vector<double> e(seq);
        double sum = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          const double steps = std::round((mx - srow[j]) / L.lut.input_step);
          e[j] = L.lut.entries[static_cast<std::size_t>(std::min(steps, 255.0))];
          sum += e[j];
        }
        for (std::size_t j = 0; j < seq; ++j) {
          const int32_t c = saturate(round_half_away(kSoftmaxOutScale * e[j] / sum), 8, false);
          prob_codes.push_back(c);
          p[j] = c / kSoftmaxOutScale;
        }
      } else {
        const double mx = *std::max_element(srow.begin(), srow.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < seq; ++j) sum += (p[j] = std::exp(srow[j] - mx));
        for (double& v : p) v /= sum;
      }

      for (std::size_t e = 0; e < d; ++e) {
        double acc = 0.0;
        for (std::size_t j = 0; j < seq; ++j) acc += p[j] * V[j][off + e];
        double out = acc;
        if (sc && f.quant_softmax && L.ctx_rm) {
          const int32_t c =
              requant_real(snap_accumulator(acc, kSoftmaxOutScale * L.s(Site::kV)), *L.ctx_rm, bits);
          out = c / s_ctx;
        } else if (wa) {
          out = quantize_activation(acc, s_ctx, bits) / s_ctx;
        }
        ctx[i][off + e] = out;
      }
    }
  }
  record(trace, name(Site::kScores), score_codes);
  record(trace, "layer" + std::to_string(li) + ".probs", prob_codes);
  if (wa) record(trace, name(Site::kCtx), codes_of(ctx, s_ctx));
  observe(obs, name(Site::kScores), all_scores);
  observe(obs, name(Site::kCtx), ctx);

  Rows attn = ref_linear(L.o, ctx, wa ? s_ctx : 0.0, L.s(Site::kAttnOut), bits, trace, name(Site::kAttnOut));
  observe(obs, name(Site::kAttnOut), attn);

  auto layer_norm = [&](const Rows& a, double a_scale, Site a_site, const Rows& res, double res_scale,
                        Scale8 res8, const LnParams* pq, std::span<const float> g, std::span<const float> b,
                        Site out_site) -> std::pair<Rows, double> {
    if (f.quant_layernorm) {
      const Scale8 out8 = L.ql->scale(out_site);
      Rows y = ref_layernorm_core(a, a_scale, L.ql->scale(a_site), res, res_scale, res8, *pq, out8, bits);
      record(trace, name(out_site), codes_of(y, out8.value()));
      return {std::move(y), out8.value()};
    }
    Rows y(a.size());
    for (std::size_t t = 0; t < a.size(); ++t) {
      y[t].resize(a[t].size());
      for (std::size_t i = 0; i < a[t].size(); ++i) y[t][i] = a[t][i] + res[t][i];
      layer_norm_float(y[t], g, b);
    }
    if (wa) {
      quantize_rows(y, L.s(out_site), bits, trace, name(out_site));
      return {std::move(y), L.s(out_site)};
    }
    return {std::move(y), 0.0};
  };

  auto [u, u_scale] = layer_norm(attn, wa ? L.s(Site::kAttnOut) : 0.0, Site::kAttnOut, x, x_scale, x_scale8,
                                 L.ql ? &L.ql->ln1 : nullptr, L.fl->ln1_gamma, L.fl->ln1_beta, Site::kLn1);
  observe(obs, name(Site::kLn1), u);

  Rows hpre = ref_linear(L.ffn1, u, u_scale, L.s(Site::kFfn1), bits, trace, name(Site::kFfn1));
  observe(obs, name(Site::kFfn1), hpre);
  Rows g = hpre;
  for (auto& row : g) {
    for (double& v : row) v = gelu(v);
  }
  if (wa) quantize_rows(g, L.s(Site::kGelu), bits, trace, name(Site::kGelu));
  observe(obs, name(Site::kGelu), g);
  Rows fo = ref_linear(L.ffn2, g, wa ? L.s(Site::kGelu) : 0.0, L.s(Site::kFfn2), bits, trace, name(Site::kFfn2));
  observe(obs, name(Site::kFfn2), fo);

  const Scale8 u8 = L.ql ? L.ql->scale(Site::kLn1) : Scale8{};
  auto [out, out_scale] = layer_norm(fo, wa ? L.s(Site::kFfn2) : 0.0, Site::kFfn2, u, u_scale, u8,
                                     L.ql ? &L.ql->ln2 : nullptr, L.fl->ln2_gamma, L.fl->ln2_beta, Site::kLn2);
  observe(obs, name(Site::kLn2), out);
  return {std::move(out), out_scale};
}

std::vector<double> run_reference(std::span<const int32_t> tokens, const RefModel& m, Trace* trace,
                                  const SiteObserver* obs) {
  Rows x = embed_tokens(tokens, *m.mc, *m.host);
  observe(obs, kInputSite, x);
  double x_scale = 0.0;
  if (m.input_scale > 0.0) {
    quantize_rows(x, m.input_scale, m.mc->a_bits, trace, kInputSite);
    x_scale = m.input_scale;
  }
  Scale8 x8 = m.input_scale8;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    RefLayerOut o = ref_layer(m, m.layers[li], static_cast<int>(li), x, x_scale, x8, trace, obs);
    x = std::move(o.x);
    x_scale = o.scale;
    if (m.layers[li].ql) x8 = m.layers[li].ql->scale(Site::kLn2);
  }
  return classify(x.front(), *m.host);
}

// Fake-quant reference built straight from the integer model.
RefModel ref_from_quant_model(const QuantModel& qm, std::vector<FloatLayer>& ln_holder) {
  RefModel m;
  m.mc = &qm.config;
  m.host = &qm.host;
  m.flags = AblationFlags::all();
  m.input_scale = qm.input_scale.value();
  m.input_scale8 = qm.input_scale;
  ln_holder.assign(qm.layers.size(), FloatLayer{});
  for (std::size_t li = 0; li < qm.layers.size(); ++li) {
    const QuantLayer& q = qm.layers[li];
    RefLayer L;
    L.q = ref_from_quant(q.q);
    L.k = ref_from_quant(q.k);
    L.v = ref_from_quant(q.v);
    L.o = ref_from_quant(q.o);
    L.ffn1 = ref_from_quant(q.ffn1);
    L.ffn2 = ref_from_quant(q.ffn2);
    L.scores_rm = q.scores_requant;
    L.ctx_rm = q.ctx_requant;
    for (Site s : kAllSites) L.scale[static_cast<std::size_t>(s)] = q.scale(s).value();
    L.fl = &ln_holder[li];
    L.ql = &q;
    L.lut = q.softmax_lut;
    m.layers.push_back(std::move(L));
  }
  return m;
}

}  // namespace

// ---- config / naming ---------------------------------------------------------

void ModelConfig::validate() const {
  if (num_layers < 0) throw ArgumentError("ModelConfig: num_layers must be >= 0");
  if (hidden < 1 || heads < 1 || head_dim < 1 || ffn_dim < 1) throw ArgumentError("ModelConfig: dims must be >= 1");
  if (hidden != heads * head_dim) throw ArgumentError("ModelConfig: hidden must equal heads * head_dim");
  if (seq_len < 1) throw ArgumentError("ModelConfig: seq_len must be >= 1");
  if (w_bits < 2 || w_bits > 8 || a_bits < 2 || a_bits > 8) throw ArgumentError("ModelConfig: bitwidths must be in [2, 8]");
  if (vocab_size < 1 || max_position < 1 || type_vocab < 1 || num_labels < 1) {
    throw ArgumentError("ModelConfig: vocabulary/position/label sizes must be >= 1");
  }
}

std::string AblationFlags::label() const {
  if (all_off()) return "float";
  std::string s;
  auto add = [&](bool on, const char* n) {
    if (on) s += (s.empty() ? "" : "+") + std::string(n);
  };
  add(quant_weights_acts, "wa");
  add(quant_scale, "scale");
  add(quant_softmax, "softmax");
  add(quant_layernorm, "layernorm");
  return s;
}

std::vector<AblationFlags> ablation_table_rows() {
  return {AblationFlags::none(),
          {true, false, false, false},
          {true, true, false, false},
          {true, true, true, false},
          AblationFlags::all()};
}

const char* site_suffix(Site s) {
  switch (s) {
    case Site::kQ: return "q";
    case Site::kK: return "k";
    case Site::kV: return "v";
    case Site::kScores: return "scores";
    case Site::kCtx: return "ctx";
    case Site::kAttnOut: return "attn_out";
    case Site::kLn1: return "ln1";
    case Site::kFfn1: return "ffn1";
    case Site::kGelu: return "gelu";
    case Site::kFfn2: return "ffn2";
    case Site::kLn2: return "ln2";
  }
  return "?";
}

std::string site_name(int layer, Site s) { return "layer" + std::to_string(layer) + "." + site_suffix(s); }

std::string layer_input_site(int layer) { return layer == 0 ? kInputSite : site_name(layer - 1, Site::kLn2); }

std::vector<std::string> all_site_names(const ModelConfig& mc) {
  std::vector<std::string> names{kInputSite};
  for (int l = 0; l < mc.num_layers; ++l) {
    for (Site s : kAllSites) names.push_back(site_name(l, s));
  }
  return names;
}

// ---- building the integer model ------------------------------------------------

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

std::array<int32_t, 256> build_gelu_lut(Scale8 in_scale, Scale8 out_scale, int out_bits) {
  std::array<int32_t, 256> lut{};
  const double si = in_scale.value();
  const double so = out_scale.value();
  for (int code = -128; code <= 127; ++code) {
    lut[static_cast<std::size_t>(code + 128)] = quantize_activation(gelu(code / si), so, out_bits);
  }
  return lut;
}

QuantLinear quantize_linear(const FloatLinear& lin, Scale8 in_scale, Scale8 out_scale, int w_bits) {
  QuantLinear q;
  const std::span<const float> w(lin.w.data);
  q.weight_scale = quantize_scale8(weight_scale(w, w_bits));
  double max_abs = 0.0;
  for (float v : w) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
  q.weight = quantize(w, QuantSpec{w_bits, max_abs}, q.weight_scale, {lin.w.rows, lin.w.cols});
  q.bias = quantize_bias(std::span<const float>(lin.b), in_scale, q.weight_scale).bias;
  q.requant = requant_multiplier(in_scale, q.weight_scale, out_scale);
  return q;
}

QuantModel build_quant_model(const FloatModel& fm, const SiteSpecs& specs) {
  const ModelConfig& mc = fm.config;
  mc.validate();
  QuantModel qm;
  qm.config = mc;
  qm.host = fm.host;
  qm.input_scale = quantize_scale8(calibrated_scale(spec_at(specs, kInputSite)));
  Scale8 in8 = qm.input_scale;
  for (int li = 0; li < mc.num_layers; ++li) {
    const FloatLayer& fl = fm.layers[static_cast<std::size_t>(li)];
    QuantLayer q;
    for (Site s : kAllSites) {
      q.site_scale[static_cast<std::size_t>(s)] = quantize_scale8(calibrated_scale(spec_at(specs, site_name(li, s))));
    }
    auto lin = [&](const FloatLinear& f, Scale8 si, Site out, const char* tensor) {
      try {
        return quantize_linear(f, si, q.scale(out), mc.w_bits);
      } catch (const DegenerateScaleError& e) {
        throw DegenerateScaleError("layer" + std::to_string(li) + "." + tensor + ": " + e.what());
      }
    };
    q.q = lin(fl.q, in8, Site::kQ, "Wq");
    q.k = lin(fl.k, in8, Site::kK, "Wk");
    q.v = lin(fl.v, in8, Site::kV, "Wv");
    q.o = lin(fl.o, q.scale(Site::kCtx), Site::kAttnOut, "Wo");
    q.ffn1 = lin(fl.ffn1, q.scale(Site::kLn1), Site::kFfn1, "W1");
    q.ffn2 = lin(fl.ffn2, q.scale(Site::kGelu), Site::kFfn2, "W2");
    q.scores_requant = requant_multiplier(q.scale(Site::kScores).value() /
                                          (q.scale(Site::kQ).value() * q.scale(Site::kK).value()) /
                                          std::sqrt(static_cast<double>(mc.head_dim)));
    q.ctx_requant = requant_multiplier(quantize_scale8(kSoftmaxOutScale), q.scale(Site::kV), q.scale(Site::kCtx));
    q.ln1 = quantize_ln_params(std::span<const float>(fl.ln1_gamma), std::span<const float>(fl.ln1_beta)).params;
    q.ln2 = quantize_ln_params(std::span<const float>(fl.ln2_gamma), std::span<const float>(fl.ln2_beta)).params;
    q.softmax_lut = build_exp_lut(1.0 / q.scale(Site::kScores).value());
    q.gelu_lut = build_gelu_lut(q.scale(Site::kFfn1), q.scale(Site::kGelu), mc.a_bits);
    in8 = q.scale(Site::kLn2);
    qm.layers.push_back(std::move(q));
  }
  return qm;
}

// ---- host side ------------------------------------------------------------------

std::vector<std::vector<double>> embed_tokens(std::span<const int32_t> token_ids, const ModelConfig& mc,
                                              const HostWeights& host) {
  if (token_ids.empty()) throw ArgumentError("embed_tokens: empty token sequence");
  if (token_ids.size() > static_cast<std::size_t>(mc.max_position)) {
    throw ArgumentError("embed_tokens: sequence longer than max_position");
  }
  Rows x(token_ids.size(), std::vector<double>(static_cast<std::size_t>(mc.hidden)));
  for (std::size_t t = 0; t < token_ids.size(); ++t) {
    const int32_t id = token_ids[t];
    if (id < 0 || id >= mc.vocab_size) throw ArgumentError("embed_tokens: token id outside vocabulary");
    const auto w = host.word.row(static_cast<std::size_t>(id));
    const auto p = host.position.row(t);
    const auto s = host.segment.row(0);
    for (std::size_t i = 0; i < x[t].size(); ++i) x[t][i] = double{w[i]} + p[i] + s[i];
    layer_norm_float(x[t], host.ln_gamma, host.ln_beta);
  }
  return x;
}

std::vector<double> classify(std::span<const double> first_token, const HostWeights& host) {
  std::vector<double> pooled = linear_float(host.pooler, first_token);
  for (double& v : pooled) v = std::tanh(v);
  return linear_float(host.classifier, pooled);
}

// ---- integer path -------------------------------------------------------------------

namespace {

std::vector<int32_t> int_projection(const QuantLinear& lin, const std::vector<int32_t>& in, std::size_t seq,
                                    Scale8 out, int bits, const HwConfig& hw, LayerStats* stats) {
  const std::size_t rows = lin.weight.shape[0];
  const std::size_t cols = lin.weight.shape[1];
  const IntMatrixView view{lin.weight.data, rows, cols, lin.weight.bits};
  const LaneMode mode = lane_mode_for_bits(lin.weight.bits);
  std::vector<int32_t> y(seq * rows);
  for (std::size_t t = 0; t < seq; ++t) {
    const auto x = std::span(in).subspan(t * cols, cols);
    RequantResult r = pe_matvec_requant(view, x, true, lin.bias.data, lin.requant, hw, mode, bits, out.value());
    std::copy(r.out.data.begin(), r.out.data.end(), y.begin() + static_cast<std::ptrdiff_t>(t * rows));
    if (stats) {
      stats->pe_cycles += r.cycles;
      stats->acc_saturated |= r.saturated;
    }
  }
  return y;
}

IntActivations int_layernorm(const IntActivations& a, const IntActivations& res, const LnParams& p, Scale8 out8,
                             int bits, std::size_t hidden) {
  IntActivations out;
  out.seq = a.seq;
  out.scale = out8.value();
  out.codes.resize(a.codes.size());
  const QuantSpec spec{bits, symmetric_rail(bits) / out8.value()};
  for (std::size_t t = 0; t < a.seq; ++t) {
    QTensor x1, x2;
    x1.scale = a.scale;
    x2.scale = res.scale;
    x1.data.assign(a.codes.begin() + static_cast<std::ptrdiff_t>(t * hidden),
                   a.codes.begin() + static_cast<std::ptrdiff_t>((t + 1) * hidden));
    x2.data.assign(res.codes.begin() + static_cast<std::ptrdiff_t>(t * hidden),
                   res.codes.begin() + static_cast<std::ptrdiff_t>((t + 1) * hidden));
    const QTensor y = layernorm_q(x1, x2, p, spec, out8);
    std::copy(y.data.begin(), y.data.end(), out.codes.begin() + static_cast<std::ptrdiff_t>(t * hidden));
  }
  return out;
}

}  // namespace

IntActivations mha_forward(const IntActivations& x, const QuantLayer& w, const ModelConfig& mc,
                           const HwConfig& hw, int layer, Trace* trace, LayerStats* stats) {
  const std::size_t seq = x.seq;
  const std::size_t H = static_cast<std::size_t>(mc.hidden);
  const std::size_t d = static_cast<std::size_t>(mc.head_dim);
  const int bits = mc.a_bits;
  if (x.codes.size() != seq * H || seq == 0) throw ArgumentError("mha_forward: input shape mismatch");

  const auto Q = int_projection(w.q, x.codes, seq, w.scale(Site::kQ), bits, hw, stats);
  const auto K = int_projection(w.k, x.codes, seq, w.scale(Site::kK), bits, hw, stats);
  const auto V = int_projection(w.v, x.codes, seq, w.scale(Site::kV), bits, hw, stats);
  record(trace, site_name(layer, Site::kQ), Q);
  record(trace, site_name(layer, Site::kK), K);
  record(trace, site_name(layer, Site::kV), V);

  const double s_scores = w.scale(Site::kScores).value();
  const double s_ctx = w.scale(Site::kCtx).value();
  std::vector<int32_t> ctx(seq * H);
  std::vector<int32_t> scores_trace, probs_trace;
  std::vector<int32_t> kh(seq * d), vht(d * seq);
  for (std::size_t h = 0; h < static_cast<std::size_t>(mc.heads); ++h) {
    const std::size_t off = h * d;
    for (std::size_t j = 0; j < seq; ++j) {
      for (std::size_t e = 0; e < d; ++e) {
        kh[j * d + e] = K[j * H + off + e];
        vht[e * seq + j] = V[j * H + off + e];
      }
    }
    const IntMatrixView k_view{kh, seq, d, bits};
    const IntMatrixView v_view{vht, d, seq, bits};
    for (std::size_t i = 0; i < seq; ++i) {
      const auto qi = std::span(Q).subspan(i * H + off, d);
      RequantResult s = pe_matvec_requant(k_view, qi, true, {}, w.scores_requant, hw, LaneMode::kW8, bits, s_scores);
      const QTensor probs = softmax_q(s.out, w.softmax_lut);
      RequantResult z =
          pe_matvec_requant(v_view, probs.data, false, {}, w.ctx_requant, hw, LaneMode::kW8, bits, s_ctx);
      std::copy(z.out.data.begin(), z.out.data.end(), ctx.begin() + static_cast<std::ptrdiff_t>(i * H + off));
      if (trace) {
        scores_trace.insert(scores_trace.end(), s.out.data.begin(), s.out.data.end());
        probs_trace.insert(probs_trace.end(), probs.data.begin(), probs.data.end());
      }
      if (stats) {
        stats->pe_cycles += s.cycles + z.cycles;
        stats->acc_saturated |= s.saturated || z.saturated;
      }
    }
  }
  record(trace, site_name(layer, Site::kScores), scores_trace);
  record(trace, "layer" + std::to_string(layer) + ".probs", probs_trace);
  record(trace, site_name(layer, Site::kCtx), ctx);

  IntActivations out;
  out.seq = seq;
  out.scale = w.scale(Site::kAttnOut).value();
  out.codes = int_projection(w.o, ctx, seq, w.scale(Site::kAttnOut), bits, hw, stats);
  record(trace, site_name(layer, Site::kAttnOut), out.codes);
  return out;
}

IntActivations ffn_forward(const IntActivations& u, const QuantLayer& w, const ModelConfig& mc,
                           const HwConfig& hw, int layer, Trace* trace, LayerStats* stats) {
  const int bits = mc.a_bits;
  auto h = int_projection(w.ffn1, u.codes, u.seq, w.scale(Site::kFfn1), bits, hw, stats);
  record(trace, site_name(layer, Site::kFfn1), h);
  for (int32_t& v : h) v = w.gelu_lut[static_cast<std::size_t>(v + 128)];
  record(trace, site_name(layer, Site::kGelu), h);
  IntActivations out;
  out.seq = u.seq;
  out.scale = w.scale(Site::kFfn2).value();
  out.codes = int_projection(w.ffn2, h, u.seq, w.scale(Site::kFfn2), bits, hw, stats);
  record(trace, site_name(layer, Site::kFfn2), out.codes);
  return out;
}

IntActivations encoder_layer_forward(const IntActivations& x, const QuantLayer& w, const ModelConfig& mc,
                                     const HwConfig& hw, int layer, Trace* trace, LayerStats* stats) {
  const std::size_t H = static_cast<std::size_t>(mc.hidden);
  const IntActivations a = mha_forward(x, w, mc, hw, layer, trace, stats);
  const IntActivations u = int_layernorm(a, x, w.ln1, w.scale(Site::kLn1), mc.a_bits, H);
  record(trace, site_name(layer, Site::kLn1), u.codes);
  const IntActivations f = ffn_forward(u, w, mc, hw, layer, trace, stats);
  IntActivations out = int_layernorm(f, u, w.ln2, w.scale(Site::kLn2), mc.a_bits, H);
  record(trace, site_name(layer, Site::kLn2), out.codes);
  return out;
}

std::vector<double> model_forward(std::span<const int32_t> token_ids, const QuantModel& qm, const HwConfig& hw,
                                  Trace* trace, LayerStats* stats) {
  const ModelConfig& mc = qm.config;
  const auto emb = embed_tokens(token_ids, mc, qm.host);
  IntActivations x;
  x.seq = emb.size();
  x.scale = qm.input_scale.value();
  for (const auto& row : emb) {
    for (double v : row) x.codes.push_back(quantize_activation(v, x.scale, mc.a_bits));
  }
  record(trace, kInputSite, x.codes);
  for (std::size_t li = 0; li < qm.layers.size(); ++li) {
    x = encoder_layer_forward(x, qm.layers[li], mc, hw, static_cast<int>(li), trace, stats);
  }
  std::vector<double> first(static_cast<std::size_t>(mc.hidden));
  for (std::size_t i = 0; i < first.size(); ++i) first[i] = x.codes[i] / x.scale;
  return classify(first, qm.host);
}

// ---- reference path -------------------------------------------------------------------

std::vector<double> fake_quant_forward(std::span<const int32_t> token_ids, const QuantModel& qm, Trace* trace) {
  std::vector<FloatLayer> ln_holder;
  const RefModel m = ref_from_quant_model(qm, ln_holder);
  return run_reference(token_ids, m, trace, nullptr);
}

std::vector<double> float_oracle_forward(std::span<const int32_t> token_ids, const FloatModel& fm,
                                         const SiteObserver& observer) {
  RefModel m;
  m.mc = &fm.config;
  m.host = &fm.host;
  m.flags = AblationFlags::none();
  for (const FloatLayer& fl : fm.layers) {
    RefLayer L;
    L.q = ref_float(fl.q);
    L.k = ref_float(fl.k);
    L.v = ref_float(fl.v);
    L.o = ref_float(fl.o);
    L.ffn1 = ref_float(fl.ffn1);
    L.ffn2 = ref_float(fl.ffn2);
    L.fl = &fl;
    m.layers.push_back(std::move(L));
  }
  return run_reference(token_ids, m, nullptr, &observer);
}

AblationModel::AblationModel(const FloatModel& fm, const SiteSpecs& specs, AblationFlags flags)
    : fm_(&fm), flags_(flags), specs_(specs) {
  if (!flags.all_off()) qm_ = build_quant_model(fm, specs);
}

int AblationModel::quantized_site_count() const {
  const int per_layer_wa = 2 * kNumSites;  // weights/biases of 6 linears + activations, coarse tally
  int n = 0;
  const int L = fm_->config.num_layers;
  if (flags_.quant_weights_acts) n += L * per_layer_wa + 1;
  if (flags_.quant_weights_acts && flags_.quant_scale) n += L * 8;  // requant multipliers
  if (flags_.quant_softmax) n += L * 2;                             // exp numerator + output
  if (flags_.quant_layernorm) n += L * 2;
  return n;
}

std::vector<double> AblationModel::forward(std::span<const int32_t> token_ids, Trace* trace) const {
  if (flags_.all_off()) return float_oracle_forward(token_ids, *fm_);
  if (flags_.all_on()) return fake_quant_forward(token_ids, *qm_, trace);

  const ModelConfig& mc = fm_->config;
  const bool wa = flags_.quant_weights_acts;
  const bool sc = wa && flags_.quant_scale;
  auto ideal = [&](const std::string& site) { return calibrated_scale(spec_at(specs_, site)); };

  RefModel m;
  m.mc = &mc;
  m.host = &fm_->host;
  m.flags = flags_;
  m.input_scale8 = qm_->input_scale;
  if (wa) m.input_scale = sc ? qm_->input_scale.value() : ideal(kInputSite);
  double in_scale = m.input_scale;
  for (int li = 0; li < mc.num_layers; ++li) {
    const FloatLayer& fl = fm_->layers[static_cast<std::size_t>(li)];
    const QuantLayer& ql = qm_->layers[static_cast<std::size_t>(li)];
    RefLayer L;
    L.fl = &fl;
    L.ql = &ql;
    for (Site s : kAllSites) {
      const bool quantized = wa || (s == Site::kScores && flags_.quant_softmax);
      const bool use8 = sc || (!wa && flags_.quant_scale);
      L.scale[static_cast<std::size_t>(s)] =
          quantized ? (use8 ? ql.scale(s).value() : ideal(site_name(li, s))) : 0.0;
    }
    auto lin = [&](const FloatLinear& f, const QuantLinear& q, double si) {
      if (!wa) return ref_float(f);
      if (sc) return ref_from_quant(q);
      return ref_ideal(f, si, mc.w_bits);
    };
    // With the LN core active its output lives on the 8-bit grid.
    const double ln1_grid = flags_.quant_layernorm ? ql.scale(Site::kLn1).value() : L.s(Site::kLn1);
    L.q = lin(fl.q, ql.q, in_scale);
    L.k = lin(fl.k, ql.k, in_scale);
    L.v = lin(fl.v, ql.v, in_scale);
    L.o = lin(fl.o, ql.o, L.s(Site::kCtx));
    L.ffn1 = lin(fl.ffn1, ql.ffn1, ln1_grid);
    L.ffn2 = lin(fl.ffn2, ql.ffn2, L.s(Site::kGelu));
    if (sc) {
      L.scores_rm = ql.scores_requant;
      L.ctx_rm = ql.ctx_requant;
    }
    const double s_scores = L.s(Site::kScores);
    L.lut = s_scores > 0.0 ? build_exp_lut(1.0 / s_scores) : ql.softmax_lut;
    in_scale = flags_.quant_layernorm ? ql.scale(Site::kLn2).value() : L.s(Site::kLn2);
    m.layers.push_back(std::move(L));
  }
  return run_reference(token_ids, m, trace, nullptr);
}

std::vector<double> model_forward(std::span<const int32_t> token_ids, const QuantModel& qm,
                                  const FloatModel* fm, const SiteSpecs* specs, const HwConfig& hw,
                                  AblationFlags flags, Trace* trace) {
  if (flags.all_on()) return model_forward(token_ids, qm, hw, trace);
  if (!fm || !specs) {
    throw ArgumentError("model_forward: ablation rows other than full quantization need float weights and specs");
  }
  return AblationModel(*fm, *specs, flags).forward(token_ids, trace);
}

}  // namespace fqbert
