#pragma once

// Seeded synthetic weights and token streams, so every test runs without
// downloaded checkpoints. Weights, biases, embeddings and LN beta are
// uniform in [-0.5, 0.5]; LN gamma is uniform in [0.5, 1.5].

#include <cstdint>

#include "fqbert/model.hpp"
#include "fqbert/store.hpp"

namespace fqbert {

FloatModel synth_float_model(const ModelConfig& mc, uint64_t seed);

// `count` sequences of `length` token ids (length <= 0 means mc.seq_len).
CalibStream synth_calib(const ModelConfig& mc, int count, int length, uint64_t seed);

}  // namespace fqbert
