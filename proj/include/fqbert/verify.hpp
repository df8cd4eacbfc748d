#pragma once

// Property suite behind `fqbert verify`.

#include <cstdint>
#include <string>
#include <vector>

#include "fqbert/bim.hpp"
#include "fqbert/model.hpp"
#include "fqbert/specfn.hpp"

namespace fqbert {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Integer path against the fake-quant reference on random token sequences.
PropertyResult check_pipeline_equivalence(const QuantModel& qm, int trials, uint64_t seed);
// Every signed 8-bit pair through a W8 bim_dot.
PropertyResult check_bim_exhaustive(BimVariant variant);
// Sum near 256, shift invariance and monotonicity on random rows (n in [2, 128]).
PropertyResult check_softmax_properties(const ExpLut& lut, int trials, uint64_t seed);
// LN core within `max_lsb` of a real-arithmetic LN over random rows of length n.
PropertyResult check_ln_proximity(int n, int trials, uint64_t seed, int max_lsb = 3);

// Real-arithmetic layer norm of x1/s1 + x2/s2 with the core's Q1.6 parameters
// and epsilon, rounded and saturated at the output scale.
std::vector<int32_t> ln_real_oracle(const QTensor& x1, const QTensor& x2, const LnParams& p, Scale8 out, int bits);

std::vector<PropertyResult> run_verify_suite(const QuantModel& qm, int trials, uint64_t seed, bool inject_lut_fault);

}  // namespace fqbert
