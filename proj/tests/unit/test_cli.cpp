#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "fqbert/cli.hpp"
#include "fqbert/store.hpp"
#include "json.hpp"

using namespace fqbert;
namespace fs = std::filesystem;

namespace {

// ctest runs every test in its own process, possibly in parallel.
const fs::path kTmp = fs::path(FQBERT_TEST_TMP) / std::to_string(::getpid());
const fs::path kGolden = fs::path(FQBERT_SOURCE_DIR) / "tests" / "golden" / "toy_infer_logits.txt";

struct CliRun {
  int code = 0;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  std::ostringstream o, e;
  CliRun r;
  r.code = run_cli(args, o, e);
  r.out = o.str();
  r.err = e.str();
  return r;
}

std::string p(const std::string& name) {
  fs::create_directories(kTmp);
  return (kTmp / name).string();
}

const std::vector<std::string> kToy = {"--layers", "2",  "--hidden",       "16", "--heads", "2",
                                       "--ffn",    "32", "--seq-len",      "8",  "--vocab", "50",
                                       "--max-position", "16"};

std::vector<std::string> with_toy(std::vector<std::string> head) {
  head.insert(head.end(), kToy.begin(), kToy.end());
  return head;
}

std::vector<double> parse_logits(const std::string& out) {
  const auto at = out.find("logits=");
  std::istringstream is(out.substr(at + 7, out.find('\n', at) - at - 7));
  std::vector<double> v;
  for (double x; is >> x;) v.push_back(x);
  return v;
}

std::string field(const std::string& out, const std::string& key) {
  const auto at = out.find(key + "=");
  if (at == std::string::npos) return {};
  return out.substr(at + key.size() + 1, out.find('\n', at) - at - key.size() - 1);
}

// Builds checkpoint, calibration text, spec file and container for the toy model once.
class CliToy : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::create_directories(kTmp);
    ASSERT_EQ(cli(with_toy({"--seed", "5", "synth", "--out", p("toy.fqck")})).code, 0);
    ASSERT_EQ(cli(with_toy({"--seed", "6", "synth-calib", "--count", "2", "--out", p("toy.calib")})).code, 0);
    ASSERT_EQ(cli({"calibrate", "--checkpoint", p("toy.fqck"), "--calib", p("toy.calib"), "--out", p("toy.specs")})
                  .code,
              0);
    ASSERT_EQ(cli({"quantize", "--checkpoint", p("toy.fqck"), "--specs", p("toy.specs"), "--out", p("toy.fqbt")})
                  .code,
              0);
  }
};

}  // namespace

TEST_F(CliToy, CalibrateWritesOneSpecPerSite) {
  const auto doc = nlohmann::json::parse(read_file_text(p("toy.specs")));
  EXPECT_EQ(doc.at("format"), "fqbert-specs");
  EXPECT_EQ(doc.at("sites").size(), 1u + 2u * kNumSites);
  for (const auto& [name, s] : doc.at("sites").items()) EXPECT_GT(s.at("scale").get<double>(), 0.0) << name;
}

TEST_F(CliToy, CalibrateWithoutDataIsNotCalibrated) {
  const CliRun r = cli({"calibrate", "--checkpoint", p("toy.fqck"), "--out", p("nope.specs")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("not calibrated"), std::string::npos);
  EXPECT_FALSE(fs::exists(p("nope.specs")));
}

TEST_F(CliToy, DeterministicOutputs) {
  ASSERT_EQ(cli({"calibrate", "--checkpoint", p("toy.fqck"), "--calib", p("toy.calib"), "--out", p("again.specs")})
                .code,
            0);
  EXPECT_EQ(read_file_text(p("again.specs")), read_file_text(p("toy.specs")));
  ASSERT_EQ(cli(with_toy({"--seed", "5", "synth", "--out", p("again.fqck")})).code, 0);
  EXPECT_EQ(read_file_text(p("again.fqck")), read_file_text(p("toy.fqck")));
  ASSERT_EQ(cli({"quantize", "--checkpoint", p("toy.fqck"), "--specs", p("toy.specs"), "--out", p("again.fqbt")})
                .code,
            0);
  EXPECT_EQ(read_file_text(p("again.fqbt")), read_file_text(p("toy.fqbt")));
  const std::vector<std::string> inf{"infer", "--container", p("toy.fqbt"), "--tokens", "3 1 4 1 5 9 2 6"};
  EXPECT_EQ(cli(inf).out, cli(inf).out);
}

TEST_F(CliToy, InferMatchesGoldenAndFakeQuant) {
  const CliRun r = cli({"infer", "--container", p("toy.fqbt"), "--tokens", "1 2 3 4 5 6 7 8"});
  ASSERT_EQ(r.code, 0) << r.err;
  const QuantModel qm = model_from_container(load(p("toy.fqbt")));
  const std::vector<int32_t> ids{1, 2, 3, 4, 5, 6, 7, 8};
  EXPECT_EQ(parse_logits(r.out), fake_quant_forward(ids, qm));
  std::ifstream g(kGolden);
  ASSERT_TRUE(g) << "missing " << kGolden;
  std::string golden;
  std::getline(g, golden);
  EXPECT_EQ(parse_logits(golden + "\n"), parse_logits(r.out));
}

TEST_F(CliToy, InferFloatAblationNeedsWeights) {
  const std::vector<std::string> base{"infer", "--container", p("toy.fqbt"), "--tokens", "1 2 3", "--ablation", "none"};
  EXPECT_EQ(cli(base).code, 2);
  auto with = base;
  with.insert(with.end(), {"--checkpoint", p("toy.fqck"), "--specs", p("toy.specs")});
  const CliRun r = cli(with);
  ASSERT_EQ(r.code, 0) << r.err;
  const FloatModel fm = import_float_checkpoint(p("toy.fqck"));
  const std::vector<int32_t> ids{1, 2, 3};
  const auto want = float_oracle_forward(ids, fm);
  const auto got = parse_logits(r.out);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12 * std::max(1.0, std::abs(want[i])));
}

TEST_F(CliToy, DumpIntermediatesInRange) {
  const CliRun r = cli({"infer", "--container", p("toy.fqbt"), "--tokens", "9 8 7 6 5", "--dump-intermediates",
                     p("dump.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("in_range=yes"), std::string::npos);
  const auto j = nlohmann::json::parse(read_file_text(p("dump.json")));
  EXPECT_EQ(j.size(), 1u + 2u * (kNumSites + 1));
  for (const auto& [site, e] : j.items()) {
    const int bits = e.at("bits");
    const bool sgn = e.at("signed");
    const int lo = sgn ? -(1 << (bits - 1)) : 0, hi = sgn ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
    for (int c : e.at("codes")) ASSERT_TRUE(c >= lo && c <= hi) << site;
  }
}

TEST_F(CliToy, VerifySuite) {
  const CliRun ok = cli({"verify", "--container", p("toy.fqbt"), "--trials", "20"});
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("properties passed, 0 failed"), std::string::npos);
  const CliRun fault = cli({"verify", "--container", p("toy.fqbt"), "--trials", "20", "--inject-fault", "lut"});
  EXPECT_EQ(fault.code, 1);
  EXPECT_NE(fault.out.find("FAIL softmax"), std::string::npos) << fault.out;
  EXPECT_NE(fault.out.find("monoton"), std::string::npos) << fault.out;
  EXPECT_EQ(cli({"verify", "--container", p("toy.fqbt"), "--trials", "0"}).code, 2);
}

TEST_F(CliToy, AblateRows) {
  const std::vector<std::string> args{"ablate", "--checkpoint", p("toy.fqck"), "--specs", p("toy.specs"), "--count", "4"};
  const CliRun r = cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream is(r.out);
  std::string line;
  std::getline(is, line);
  int rows = 0, prev_parts = -1;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string label;
    int parts;
    double delta;
    ls >> label >> parts >> delta;
    if (rows == 0) {
      EXPECT_EQ(label, "float");
      EXPECT_EQ(delta, 0.0);
    }
    EXPECT_TRUE(std::isfinite(delta));
    EXPECT_GE(parts, prev_parts);
    prev_parts = parts;
    ++rows;
  }
  EXPECT_EQ(rows, 5);
  EXPECT_EQ(cli(args).out, r.out);
}

TEST_F(CliToy, SweepTable) {
  const CliRun r = cli({"--seed", "1", "sweep", "--checkpoint", p("toy.fqck"), "--specs", p("toy.specs"), "--bits",
                     "2,4,8,32"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream is(r.out);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line[0], '#');
  std::map<int, double> err;
  for (int k; is >> k;) is >> err[k];
  ASSERT_EQ(err.size(), 4u);
  EXPECT_GE(err[2], err[4]);
  EXPECT_GE(err[4], err[8]);
  EXPECT_EQ(err[32], 0.0);
}

TEST_F(CliToy, ExportLut) {
  ASSERT_EQ(cli({"export-lut", "--container", p("toy.fqbt"), "--layer", "1", "--out", p("lut.bin")}).code, 0);
  const std::string blob = read_file_text(p("lut.bin"));
  ASSERT_EQ(blob.size(), 256u);
  EXPECT_EQ(static_cast<uint8_t>(blob[0]), 255);
  for (int i = 1; i < 256; ++i) EXPECT_LE(static_cast<uint8_t>(blob[i]), static_cast<uint8_t>(blob[i - 1]));
  EXPECT_EQ(cli({"export-lut", "--container", p("toy.fqbt"), "--layer", "2", "--out", p("lut2.bin")}).code, 2);
}

TEST_F(CliToy, CorruptContainerIsFormatError) {
  std::string bytes = read_file_text(p("toy.fqbt"));
  bytes[bytes.size() - 3] ^= 1;
  write_file(p("bad.fqbt"), bytes);
  const CliRun r = cli({"infer", "--container", p("bad.fqbt"), "--tokens", "1 2"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("checksum"), std::string::npos);
  EXPECT_EQ(cli({"infer", "--container", p("absent.fqbt"), "--tokens", "1"}).code, 3);
}

TEST(Cli, QuantizeBertBaseRatios) {
  std::map<int, double> ratio;
  for (int w : {2, 4, 8}) {
    const CliRun r = cli({"--seed", "3", "quantize", "--synthetic", "--seq-len", "8", "--w-bits", std::to_string(w)});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(field(r.out, "w_bits"), std::to_string(w));
    ratio[w] = std::stod(field(r.out, "encoder_ratio"));
  }
  EXPECT_NEAR(ratio[4], 7.94, 0.08);
  EXPECT_NEAR(ratio[8], 3.99, 0.04);
  EXPECT_GT(ratio[2], ratio[4]);
}

TEST(Cli, PerfGrid) {
  const CliRun r = cli({"perf", "--pes", "8,16", "--json", p("perf.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(read_file_text(p("perf.json")));
  ASSERT_EQ(j.size(), 2u);
  const double ratio = j[0].at("latency_ms").get<double>() / j[1].at("latency_ms").get<double>();
  EXPECT_GE(ratio, 1.6);
  EXPECT_LE(ratio, 2.05);
  for (const auto& rep : j) EXPECT_NEAR(rep.at("fps").get<double>(), 1000.0 / rep.at("latency_ms").get<double>(), 1e-9);

  const CliRun bw = cli({"perf", "--bandwidth", "2,4,8,16,64"});
  ASSERT_EQ(bw.code, 0);
  std::istringstream is(bw.out.substr(bw.out.find("# pus")));
  std::string line;
  std::getline(is, line);
  double prev = 1e300;
  for (int pus, pes, m; is >> pus >> pes >> m;) {
    double b, lat, fps;
    int64_t tile, cycles;
    is >> b >> tile >> cycles >> lat >> fps;
    EXPECT_LE(lat, prev);
    prev = lat;
  }
  const CliRun res = cli({"perf", "--resources"});
  EXPECT_NE(res.out.find("multipliers=1536"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"bogus"}).code, 2);
  EXPECT_EQ(cli({"perf", "--multipliers", "3"}).code, 2);
  EXPECT_EQ(cli({"perf", "--weight-buffer", "16"}).code, 2);
  EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST(Cli, BinaryExitCodes) {
  const char* bin = std::getenv("FQBERT_CLI");
  if (!bin) GTEST_SKIP() << "FQBERT_CLI not set";
  const std::string b = bin;
  auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(s);
  };
  EXPECT_EQ(status(b + " perf"), 0);
  EXPECT_EQ(status(b + " verify --container /nonexistent --trials 0"), 2);
  EXPECT_EQ(status(b + " infer --container /nonexistent --tokens 1"), 3);
}
