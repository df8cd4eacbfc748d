#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "fqbert/model.hpp"

namespace fqbert {

// Runs one CLI invocation; `args` excludes the program name. Returns the
// process exit code (0 ok, 1 property failure, 2 usage, 3 I/O or format).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// "full", "none", or '+'-joined flag names: wa, scale, softmax, layernorm.
AblationFlags parse_ablation(const std::string& text);

// Mean over sequences of ||a - b|| / ||b||.
double mean_relative_error(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

}  // namespace fqbert
