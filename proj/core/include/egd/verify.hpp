#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace egd {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Gradient check on the tiny instance plus randomized structural properties
// of the forward pass (channel simplex and symmetry, unit channel norms,
// attention rows on the simplex, non-negative KL, causal prefix equality).
std::vector<PropertyResult> run_verification(std::uint64_t seed);

}  // namespace egd
