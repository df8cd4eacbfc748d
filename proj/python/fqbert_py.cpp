#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>
#include <string>

#include "fqbert/cli.hpp"
#include "fqbert/sched.hpp"
#include "fqbert/store.hpp"
#include "fqbert/synth.hpp"

namespace py = pybind11;
using namespace fqbert;

namespace {

// Quantized model plus the float weights and specs it came from, so Python
// callers can run every execution path on one object.
struct Bundle {
  FloatModel fm;
  SiteSpecs specs;
  QuantModel qm;
};

Bundle make_synthetic(const ModelConfig& mc, uint64_t seed, int calib_count) {
  Bundle b;
  b.fm = synth_float_model(mc, seed);
  b.specs = calibrate(b.fm, synth_calib(mc, calib_count, 0, seed + 1), QuantSpec{});
  b.qm = build_quant_model(b.fm, b.specs);
  return b;
}

QTensor row_tensor(const std::vector<int32_t>& v, double scale, int bits, bool is_signed) {
  QTensor t;
  t.data = v;
  t.scale = scale;
  t.bits = bits;
  t.is_signed = is_signed;
  t.shape = {v.size()};
  return t;
}

}  // namespace

PYBIND11_MODULE(_fqbert, m) {
  m.doc() = "Bit-exact fully quantized BERT kernels and performance model";

  py::register_exception<Error>(m, "FqbertError");

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("num_layers", &ModelConfig::num_layers)
      .def_readwrite("hidden", &ModelConfig::hidden)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("head_dim", &ModelConfig::head_dim)
      .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
      .def_readwrite("seq_len", &ModelConfig::seq_len)
      .def_readwrite("w_bits", &ModelConfig::w_bits)
      .def_readwrite("a_bits", &ModelConfig::a_bits)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("max_position", &ModelConfig::max_position)
      .def_readwrite("num_labels", &ModelConfig::num_labels)
      .def("validate", &ModelConfig::validate);

  py::class_<HwConfig>(m, "HwConfig")
      .def(py::init<>())
      .def_readwrite("num_pus", &HwConfig::num_pus)
      .def_readwrite("pes_per_pu", &HwConfig::pes_per_pu)
      .def_property(
          "multipliers", [](const HwConfig& h) { return h.bim.multipliers; },
          [](HwConfig& h, int v) { h.bim.multipliers = v; })
      .def_readwrite("clock_mhz", &HwConfig::clock_mhz)
      .def_readwrite("bandwidth_bytes_per_cycle", &HwConfig::bandwidth_bytes_per_cycle)
      .def_readwrite("weight_buffer_bytes", &HwConfig::weight_buffer_bytes);

  py::class_<Scale8>(m, "Scale8")
      .def_readonly("mantissa", &Scale8::mantissa)
      .def_readonly("exp2", &Scale8::exp2)
      .def("value", &Scale8::value)
      .def("__repr__", [](const Scale8& s) {
        return "Scale8(mantissa=" + std::to_string(s.mantissa) + ", exp2=" + std::to_string(s.exp2) + ")";
      });
  py::class_<RequantMul>(m, "RequantMul")
      .def_readonly("multiplier", &RequantMul::multiplier)
      .def_readonly("shift", &RequantMul::shift)
      .def("value", &RequantMul::value);

  m.def("quantize_scale8", &quantize_scale8, py::arg("s"));
  m.def("requant_multiplier", py::overload_cast<double>(&requant_multiplier), py::arg("s_f"));
  m.def("requantize", &requantize, py::arg("acc"), py::arg("bias"), py::arg("rm"), py::arg("out_bits") = 8,
        py::arg("out_signed") = true);
  m.def("ema_update", &ema_update, py::arg("state"), py::arg("batch_max"), py::arg("decay") = kDefaultEmaDecay);

  m.def(
      "bim_dot",
      [](const std::vector<int32_t>& a, const std::vector<int32_t>& w, bool w8, const std::string& variant,
         int multipliers) {
        BimConfig cfg;
        cfg.multipliers = multipliers;
        cfg.variant = variant == "B" ? BimVariant::kTypeB : BimVariant::kTypeA;
        return bim_dot(a, true, w, w8 ? LaneMode::kW8 : LaneMode::kW4, cfg);
      },
      py::arg("a"), py::arg("w"), py::arg("w8") = true, py::arg("variant") = "A", py::arg("multipliers") = 16);

  m.def(
      "softmax_q",
      [](const std::vector<int32_t>& row, double scale) {
        return softmax_q(row_tensor(row, scale, 8, true), build_exp_lut(1.0 / scale)).data;
      },
      py::arg("row"), py::arg("scale"), "LUT softmax of int8 codes at `scale` counts per unit; Q0.8 output");
  m.def(
      "exp_lut", [](double delta) { return export_lut_blob(build_exp_lut(delta)); }, py::arg("delta"));
  m.def("rsqrt_fixed", &rsqrt_fixed, py::arg("v"), py::arg("iters") = kRsqrtIterations);
  m.def(
      "layernorm_q",
      [](const std::vector<int32_t>& x1, double s1, const std::vector<int32_t>& x2, double s2,
         const std::vector<int32_t>& gamma, const std::vector<int32_t>& beta, double out_scale) {
        LnParams p;
        p.gamma = gamma;
        p.beta = beta;
        const Scale8 o = quantize_scale8(out_scale);
        return layernorm_q(row_tensor(x1, s1, 8, true), row_tensor(x2, s2, 8, true), p,
                           QuantSpec{8, 127.0 / o.value()}, o)
            .data;
      },
      py::arg("x1"), py::arg("s1"), py::arg("x2"), py::arg("s2"), py::arg("gamma"), py::arg("beta"),
      py::arg("out_scale"));

  py::class_<Bundle>(m, "SyntheticModel")
      .def(py::init(&make_synthetic), py::arg("config"), py::arg("seed") = 1, py::arg("calib_count") = 4)
      .def_property_readonly("config", [](const Bundle& b) { return b.fm.config; })
      .def(
          "forward",
          [](const Bundle& b, const std::vector<int32_t>& ids, const HwConfig& hw) {
            return model_forward(ids, b.qm, hw);
          },
          py::arg("ids"), py::arg("hw") = HwConfig{}, "integer encoder path")
      .def(
          "forward_trace",
          [](const Bundle& b, const std::vector<int32_t>& ids) {
            Trace t;
            auto logits = model_forward(ids, b.qm, HwConfig{}, &t);
            return py::make_tuple(logits, t);
          },
          py::arg("ids"))
      .def(
          "fake_quant", [](const Bundle& b, const std::vector<int32_t>& ids) { return fake_quant_forward(ids, b.qm); },
          py::arg("ids"))
      .def(
          "float_forward",
          [](const Bundle& b, const std::vector<int32_t>& ids) { return float_oracle_forward(ids, b.fm); },
          py::arg("ids"))
      .def(
          "ablation",
          [](const Bundle& b, const std::vector<int32_t>& ids, const std::string& flags) {
            return AblationModel(b.fm, b.specs, parse_ablation(flags)).forward(ids);
          },
          py::arg("ids"), py::arg("flags"))
      .def("container_bytes",
           [](const Bundle& b) {
             const auto v = serialize(container_from_model(b.qm));
             return py::bytes(reinterpret_cast<const char*>(v.data()), v.size());
           })
      .def("compression", [](const Bundle& b) {
        const auto r = compression_report(container_from_model(b.qm));
        return py::dict(py::arg("encoder_quant_bytes") = r.encoder_quant_bytes,
                        py::arg("encoder_float_bytes") = r.encoder_float_bytes,
                        py::arg("encoder_ratio") = r.encoder_ratio, py::arg("with_host_ratio") = r.with_host_ratio);
      });

  m.def(
      "container_logits",
      [](py::bytes blob, const std::vector<int32_t>& ids) {
        const std::string s = blob;
        const QuantModel qm = model_from_container(
            parse_container(std::span(reinterpret_cast<const uint8_t*>(s.data()), s.size())));
        return model_forward(ids, qm, HwConfig{});
      },
      py::arg("blob"), py::arg("ids"));

  m.def(
      "estimate_latency",
      [](const ModelConfig& mc, const HwConfig& hw, int64_t tile_rows) {
        const PerfReport r = estimate_latency(plan_dataflow(mc, hw, tile_rows), hw, mc);
        return py::dict(py::arg("total_cycles") = r.total_cycles, py::arg("latency_ms") = r.latency_ms,
                        py::arg("fps") = r.fps);
      },
      py::arg("config"), py::arg("hw"), py::arg("tile_rows") = 0);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "returns (exit_code, stdout, stderr)");
}
