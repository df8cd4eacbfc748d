#include "fqbert/synth.hpp"

#include <random>

namespace fqbert {

namespace {

void fill(std::vector<float>& v, std::size_t n, std::mt19937_64& rng, float lo, float hi) {
  std::uniform_real_distribution<float> d(lo, hi);
  v.resize(n);
  for (float& x : v) x = d(rng);
}

void fill_matrix(Matrix& m, std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  m.rows = rows;
  m.cols = cols;
  fill(m.data, rows * cols, rng, -0.5f, 0.5f);
}

void fill_linear(FloatLinear& l, std::size_t out, std::size_t in, std::mt19937_64& rng) {
  fill_matrix(l.w, out, in, rng);
  fill(l.b, out, rng, -0.5f, 0.5f);
}

}  // namespace

FloatModel synth_float_model(const ModelConfig& mc, uint64_t seed) {
  mc.validate();
  std::mt19937_64 rng(seed);
  FloatModel fm;
  fm.config = mc;
  const auto H = static_cast<std::size_t>(mc.hidden);
  const auto F = static_cast<std::size_t>(mc.ffn_dim);
  HostWeights& h = fm.host;
  fill_matrix(h.word, static_cast<std::size_t>(mc.vocab_size), H, rng);
  fill_matrix(h.position, static_cast<std::size_t>(mc.max_position), H, rng);
  fill_matrix(h.segment, static_cast<std::size_t>(mc.type_vocab), H, rng);
  fill(h.ln_gamma, H, rng, 0.5f, 1.5f);
  fill(h.ln_beta, H, rng, -0.5f, 0.5f);
  fm.layers.resize(static_cast<std::size_t>(mc.num_layers));
  for (FloatLayer& l : fm.layers) {
    for (FloatLinear* lin : {&l.q, &l.k, &l.v, &l.o}) fill_linear(*lin, H, H, rng);
    fill_linear(l.ffn1, F, H, rng);
    fill_linear(l.ffn2, H, F, rng);
    fill(l.ln1_gamma, H, rng, 0.5f, 1.5f);
    fill(l.ln1_beta, H, rng, -0.5f, 0.5f);
    fill(l.ln2_gamma, H, rng, 0.5f, 1.5f);
    fill(l.ln2_beta, H, rng, -0.5f, 0.5f);
  }
  fill_linear(h.pooler, H, H, rng);
  fill_linear(h.classifier, static_cast<std::size_t>(mc.num_labels), H, rng);
  return fm;
}

CalibStream synth_calib(const ModelConfig& mc, int count, int length, uint64_t seed) {
  if (count < 0) throw ArgumentError("synth_calib: negative sequence count");
  const int len = length > 0 ? length : mc.seq_len;
  if (len > mc.seq_len || len > mc.max_position) throw ArgumentError("synth_calib: length exceeds seq_len");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int32_t> tok(0, mc.vocab_size - 1);
  CalibStream s(static_cast<std::size_t>(count));
  for (auto& seq : s) {
    seq.resize(static_cast<std::size_t>(len));
    for (auto& t : seq) t = tok(rng);
  }
  return s;
}

}  // namespace fqbert
