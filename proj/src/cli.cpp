#include "fqbert/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fqbert/sched.hpp"
#include "fqbert/specfn.hpp"
#include "fqbert/store.hpp"
#include "fqbert/synth.hpp"
#include "fqbert/verify.hpp"

namespace fqbert {

namespace {

std::string fmt(double v, int digits = 9) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

// Model-shape flags shared by commands that build weights from scratch.
struct ModelOpts {
  ModelConfig mc;

  void add(CLI::App* app) {
    app->add_option("--layers", mc.num_layers, "encoder layers");
    app->add_option("--hidden", mc.hidden, "hidden size");
    app->add_option("--heads", mc.heads, "attention heads");
    app->add_option("--ffn", mc.ffn_dim, "feed-forward size");
    app->add_option("--seq-len", mc.seq_len, "sequence length");
    app->add_option("--w-bits", mc.w_bits, "weight bitwidth");
    app->add_option("--a-bits", mc.a_bits, "activation bitwidth");
    app->add_option("--vocab", mc.vocab_size, "vocabulary size");
    app->add_option("--max-position", mc.max_position, "position table size");
    app->add_option("--labels", mc.num_labels, "classifier outputs");
  }
  ModelConfig get() const {
    ModelConfig c = mc;
    if (c.heads > 0) c.head_dim = c.hidden / c.heads;
    if (c.heads <= 0 || c.head_dim * c.heads != c.hidden) throw ArgumentError("--hidden must be a multiple of --heads");
    c.validate();
    return c;
  }
};

struct HwOpts {
  std::vector<int> pus{12};
  std::vector<int> pes{8};
  std::vector<int> mults{16};
  std::vector<double> bandwidth{16.0};
  std::string variant = "A";
  double clock = 214.0;
  std::size_t buffer = 512 * 1024;
  int64_t tile_rows = 0;

  // The four sizing flags take comma-separated lists; every combination runs.
  void add(CLI::App* app) {
    app->add_option("--pus", pus, "processing units")->delimiter(',');
    app->add_option("--pes", pes, "PEs per PU")->delimiter(',');
    app->add_option("--multipliers", mults, "8x4 multipliers per BIM")->delimiter(',');
    app->add_option("--bandwidth", bandwidth, "off-chip bytes per cycle")->delimiter(',');
    app->add_option("--bim-variant", variant, "A or B")->check(CLI::IsMember({"A", "B"}));
    app->add_option("--clock-mhz", clock, "clock frequency");
    app->add_option("--weight-buffer", buffer, "bytes per weight-buffer half");
    app->add_option("--tile-rows", tile_rows, "rows per weight tile (0 = largest that fits)");
  }
  std::vector<HwConfig> grid() const {
    std::vector<HwConfig> out;
    for (int p : pus) {
      for (int n : pes) {
        for (int m : mults) {
          for (double b : bandwidth) {
            HwConfig hw;
            hw.num_pus = p;
            hw.pes_per_pu = n;
            hw.bim.multipliers = m;
            hw.bim.variant = variant == "B" ? BimVariant::kTypeB : BimVariant::kTypeA;
            hw.bandwidth_bytes_per_cycle = b;
            hw.clock_mhz = clock;
            hw.weight_buffer_bytes = buffer;
            hw.validate();
            out.push_back(hw);
          }
        }
      }
    }
    return out;
  }
};

std::vector<int32_t> parse_ids(const std::string& text, const ModelConfig& mc) {
  CalibStream s = parse_calib_text(text, mc);
  if (s.empty()) throw ArgumentError("no token ids given");
  return s.front();
}

CalibStream eval_sequences(const std::string& input, int count, uint64_t seed, const ModelConfig& mc) {
  if (!input.empty()) {
    CalibStream s = read_calib_file(input, mc);
    if (s.empty()) throw ArgumentError("input file holds no sequences");
    return s;
  }
  if (count < 1) throw ArgumentError("--count must be >= 1");
  return synth_calib(mc, count, 0, seed);
}

std::string logits_line(const std::vector<double>& l) {
  std::string s = "logits=";
  for (std::size_t i = 0; i < l.size(); ++i) s += (i ? " " : "") + fmt(l[i], 17);
  return s + "\n";
}

}  // namespace

AblationFlags parse_ablation(const std::string& text) {
  if (text == "full" || text == "all") return AblationFlags::all();
  if (text == "none" || text == "float") return AblationFlags::none();
  AblationFlags f = AblationFlags::none();
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part == "wa") f.quant_weights_acts = true;
    else if (part == "scale") f.quant_scale = true;
    else if (part == "softmax") f.quant_softmax = true;
    else if (part == "layernorm") f.quant_layernorm = true;
    else throw ArgumentError("unknown ablation flag '" + part + "' (use wa, scale, softmax, layernorm)");
  }
  return f;
}

double mean_relative_error(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size() || a.empty()) throw ArgumentError("mean_relative_error: size mismatch");
  double total = 0.0;
  for (std::size_t s = 0; s < a.size(); ++s) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a[s].size(); ++i) {
      num += (a[s][i] - b[s][i]) * (a[s][i] - b[s][i]);
      den += b[s][i] * b[s][i];
    }
    total += den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
  }
  return total / static_cast<double>(a.size());
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fully quantized BERT inference, calibration and performance model", "fqbert"};
  app.require_subcommand(1);
  uint64_t seed = 1;
  app.add_option("--seed", seed, "seed for synthetic weights and test vectors")->capture_default_str();

  // synth
  ModelOpts synth_m;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write a synthetic float checkpoint");
  synth_m.add(synth);
  synth->add_option("--out", synth_out, "checkpoint path")->required();

  // synth-calib
  ModelOpts sc_m;
  std::string sc_out;
  int sc_count = 4, sc_len = 0;
  auto* synth_calib_cmd = app.add_subcommand("synth-calib", "write random calibration token sequences");
  sc_m.add(synth_calib_cmd);
  synth_calib_cmd->add_option("--out", sc_out, "text file, one sequence per line")->required();
  synth_calib_cmd->add_option("--count", sc_count, "number of sequences");
  synth_calib_cmd->add_option("--length", sc_len, "tokens per sequence (default seq-len)");

  // calibrate
  std::string cal_ckpt, cal_data, cal_out;
  double cal_decay = kDefaultEmaDecay;
  auto* calib = app.add_subcommand("calibrate", "EMA calibration of every activation site");
  calib->add_option("--checkpoint", cal_ckpt, "float checkpoint")->required();
  calib->add_option("--calib", cal_data, "token sequences, one per line");
  calib->add_option("--out", cal_out, "spec file to write")->required();
  calib->add_option("--ema-decay", cal_decay, "EMA decay");

  // quantize
  std::string q_ckpt, q_specs, q_out;
  bool q_synthetic = false;
  ModelOpts q_m;
  auto* quant = app.add_subcommand("quantize", "quantize a float checkpoint into an FQBT container");
  quant->add_option("--checkpoint", q_ckpt, "float checkpoint");
  quant->add_option("--specs", q_specs, "calibrated spec file");
  quant->add_option("--out", q_out, "container path");
  quant->add_flag("--synthetic", q_synthetic, "use seeded synthetic weights and calibration instead of files");
  q_m.add(quant);

  // infer
  std::string inf_container, inf_tokens, inf_input, inf_abl = "full", inf_ckpt, inf_specs, inf_dump;
  auto* infer = app.add_subcommand("infer", "run one sequence through the encoder");
  infer->add_option("--container", inf_container, "FQBT container")->required();
  infer->add_option("--tokens", inf_tokens, "space-separated token ids");
  infer->add_option("--input", inf_input, "file whose first line holds token ids");
  infer->add_option("--ablation", inf_abl, "full, none, or e.g. wa+scale");
  infer->add_option("--checkpoint", inf_ckpt, "float checkpoint (needed unless --ablation full)");
  infer->add_option("--specs", inf_specs, "spec file (needed unless --ablation full)");
  infer->add_option("--dump-intermediates", inf_dump, "write per-site integer codes as JSON");

  // verify
  std::string ver_container, ver_fault;
  int ver_trials = 100;
  auto* verify = app.add_subcommand("verify", "run the property suite");
  verify->add_option("--container", ver_container, "FQBT container")->required();
  verify->add_option("--trials", ver_trials, "random trials per property");
  verify->add_option("--inject-fault", ver_fault)->group("");

  // ablate
  std::string ab_ckpt, ab_specs, ab_input;
  int ab_count = 16;
  auto* ablate = app.add_subcommand("ablate", "logit deltas for each ablation row");
  ablate->add_option("--checkpoint", ab_ckpt, "float checkpoint")->required();
  ablate->add_option("--specs", ab_specs, "spec file")->required();
  ablate->add_option("--input", ab_input, "evaluation sequences (default: seeded random)");
  ablate->add_option("--count", ab_count, "random evaluation sequences");

  // sweep
  std::string sw_ckpt, sw_specs, sw_input;
  std::vector<int> sw_bits{2, 3, 4, 6, 8, 32};
  int sw_count = 16;
  auto* sweep = app.add_subcommand("sweep", "logit error against weight bitwidth");
  sweep->add_option("--checkpoint", sw_ckpt, "float checkpoint")->required();
  sweep->add_option("--specs", sw_specs, "spec file")->required();
  sweep->add_option("--bits", sw_bits, "weight bitwidths; 32 = float")->delimiter(',');
  sweep->add_option("--input", sw_input, "evaluation sequences (default: seeded random)");
  sweep->add_option("--count", sw_count, "random evaluation sequences");

  // perf
  ModelOpts pf_m;
  HwOpts pf_hw;
  std::string pf_json;
  bool pf_resources = false;
  auto* perf = app.add_subcommand("perf", "latency estimate for one or more hardware configurations");
  pf_m.add(perf);
  pf_hw.add(perf);
  perf->add_option("--json", pf_json, "also write the reports as JSON");
  perf->add_flag("--resources", pf_resources, "print multiplier and buffer tallies");

  // export-lut
  std::string lut_container, lut_out;
  int lut_layer = 0;
  auto* export_lut = app.add_subcommand("export-lut", "write a softmax LUT as a 256-byte blob");
  export_lut->add_option("--container", lut_container, "FQBT container")->required();
  export_lut->add_option("--layer", lut_layer, "encoder layer");
  export_lut->add_option("--out", lut_out, "blob path")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) {
      save_float_checkpoint(synth_float_model(synth_m.get(), seed), synth_out);
      out << "wrote " << synth_out << "\n";
    } else if (synth_calib_cmd->parsed()) {
      const ModelConfig mc = sc_m.get();
      std::ostringstream os;
      for (const auto& s : synth_calib(mc, sc_count, sc_len, seed)) {
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " " : "") << s[i];
        os << "\n";
      }
      write_file(sc_out, os.str());
      out << "wrote " << sc_out << "\n";
    } else if (calib->parsed()) {
      if (cal_data.empty()) throw NotCalibratedError("not calibrated: no calibration data given (--calib)");
      const FloatModel fm = import_float_checkpoint(cal_ckpt);
      QuantSpec defaults;
      defaults.ema_decay = cal_decay;
      defaults.validate();
      const SiteSpecs specs = calibrate(fm, read_calib_file(cal_data, fm.config), defaults);
      write_file(cal_out, specs_to_json(specs));
      out << "calibrated " << specs.size() << " sites\n";
    } else if (quant->parsed()) {
      FloatModel fm;
      SiteSpecs specs;
      if (q_synthetic) {
        fm = synth_float_model(q_m.get(), seed);
        const int len = std::min(fm.config.seq_len, 8);
        specs = calibrate(fm, synth_calib(fm.config, 1, len, seed + 1), QuantSpec{});
      } else {
        if (q_ckpt.empty() || q_specs.empty()) throw ArgumentError("quantize needs --checkpoint and --specs, or --synthetic");
        fm = import_float_checkpoint(q_ckpt);
        specs = specs_from_json(read_file_text(q_specs));
      }
      if (quant->count("--w-bits") > 0) fm.config.w_bits = q_m.mc.w_bits;
      fm.config.validate();
      const FqbtContainer c = quantize_model(fm, specs);
      if (!q_out.empty()) save(c, q_out);
      out << "w_bits=" << fm.config.w_bits << "\n" << compression_report(c).to_text();
    } else if (infer->parsed()) {
      const QuantModel qm = model_from_container(load(inf_container));
      std::string text = inf_tokens;
      if (!inf_input.empty()) text = read_file_text(inf_input);
      const auto ids = parse_ids(text, qm.config);
      const AblationFlags flags = parse_ablation(inf_abl);
      std::optional<FloatModel> fm;
      std::optional<SiteSpecs> specs;
      if (!flags.all_on()) {
        if (inf_ckpt.empty() || inf_specs.empty()) {
          throw ArgumentError("--ablation " + inf_abl + " needs --checkpoint and --specs");
        }
        fm = import_float_checkpoint(inf_ckpt, qm.config);
        specs = specs_from_json(read_file_text(inf_specs));
      }
      Trace trace;
      const auto logits = model_forward(ids, qm, fm ? &*fm : nullptr, specs ? &*specs : nullptr, HwConfig{}, flags,
                                        inf_dump.empty() ? nullptr : &trace);
      out << "ablation=" << flags.label() << "\n" << logits_line(logits);
      if (!inf_dump.empty()) {
        nlohmann::ordered_json j;
        bool in_range = true;
        for (const auto& [site, codes] : trace) {
          const bool probs = site.ends_with(".probs");
          const int bits = probs ? 8 : qm.config.a_bits;
          QTensor t;
          t.data = codes;
          t.bits = bits;
          t.is_signed = !probs;
          in_range = in_range && t.in_range();
          j[site] = {{"bits", bits}, {"signed", !probs}, {"codes", codes}};
        }
        write_file(inf_dump, j.dump() + "\n");
        out << "dumped " << trace.size() << " sites, in_range=" << (in_range ? "yes" : "no") << "\n";
        if (!in_range) return kExitPropertyFailure;
      }
    } else if (verify->parsed()) {
      if (ver_trials <= 0) throw ArgumentError("verify: --trials must be positive");
      if (!ver_fault.empty() && ver_fault != "lut") throw ArgumentError("unknown fault mode");
      const QuantModel qm = model_from_container(load(ver_container));
      const auto results = run_verify_suite(qm, ver_trials, seed, ver_fault == "lut");
      int passed = 0;
      for (const auto& r : results) {
        out << (r.passed ? "PASS " : "FAIL ") << r.name << " " << r.detail << "\n";
        passed += r.passed;
      }
      out << passed << " properties passed, " << (results.size() - static_cast<std::size_t>(passed)) << " failed\n";
      return passed == static_cast<int>(results.size()) ? kExitOk : kExitPropertyFailure;
    } else if (ablate->parsed()) {
      const FloatModel fm = import_float_checkpoint(ab_ckpt);
      const SiteSpecs specs = specs_from_json(read_file_text(ab_specs));
      const CalibStream seqs = eval_sequences(ab_input, ab_count, seed, fm.config);
      std::vector<std::vector<double>> ref;
      for (const auto& s : seqs) ref.push_back(float_oracle_forward(s, fm));
      out << "# row quantized_parts mean_rel_delta\n";
      for (const AblationFlags& f : ablation_table_rows()) {
        const AblationModel am(fm, specs, f);
        std::vector<std::vector<double>> got;
        for (const auto& s : seqs) got.push_back(am.forward(s));
        out << f.label() << " " << am.quantized_site_count() << " " << fmt(mean_relative_error(got, ref)) << "\n";
      }
    } else if (sweep->parsed()) {
      const FloatModel fm = import_float_checkpoint(sw_ckpt);
      const SiteSpecs specs = specs_from_json(read_file_text(sw_specs));
      const CalibStream seqs = eval_sequences(sw_input, sw_count, seed, fm.config);
      std::vector<std::vector<double>> ref;
      for (const auto& s : seqs) ref.push_back(float_oracle_forward(s, fm));
      out << "# k mean_rel_error\n";
      for (int k : sw_bits) {
        std::vector<std::vector<double>> got;
        if (k == 32) {
          got = ref;
        } else {
          FloatModel fk = fm;
          fk.config.w_bits = k;
          fk.config.validate();
          const QuantModel qm = build_quant_model(fk, specs);
          for (const auto& s : seqs) got.push_back(model_forward(s, qm, HwConfig{}));
        }
        out << k << " " << fmt(mean_relative_error(got, ref)) << "\n";
      }
    } else if (perf->parsed()) {
      const ModelConfig mc = pf_m.get();
      nlohmann::ordered_json all = nlohmann::ordered_json::array();
      std::ostringstream summary;
      summary << "# pus pes multipliers bandwidth tile_rows total_cycles latency_ms fps\n";
      for (const HwConfig& hw : pf_hw.grid()) {
        const DataflowPlan plan = plan_dataflow(mc, hw, pf_hw.tile_rows);
        const PerfReport rep = estimate_latency(plan, hw, mc);
        out << rep.to_table();
        if (pf_resources) out << resource_summary(hw, plan).to_text();
        out << "\n";
        summary << hw.num_pus << " " << hw.pes_per_pu << " " << hw.bim.multipliers << " "
                << fmt(hw.bandwidth_bytes_per_cycle) << " " << plan.tile_rows << " " << rep.total_cycles << " "
                << fixed(rep.latency_ms, 4) << " " << fixed(rep.fps, 4) << "\n";
        all.push_back(nlohmann::ordered_json::parse(rep.to_json()));
      }
      out << summary.str();
      if (!pf_json.empty()) write_file(pf_json, all.dump(2) + "\n");
    } else if (export_lut->parsed()) {
      const QuantModel qm = model_from_container(load(lut_container));
      if (lut_layer < 0 || lut_layer >= static_cast<int>(qm.layers.size())) throw ArgumentError("--layer out of range");
      const auto blob = export_lut_blob(qm.layers[static_cast<std::size_t>(lut_layer)].softmax_lut);
      write_file(lut_out, std::span<const uint8_t>(blob));
      out << "wrote " << lut_out << "\n";
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace fqbert
