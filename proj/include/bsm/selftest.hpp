#pragma once

// Quick built-in checks run by `bsmamba selftest`.

#include <string>
#include <vector>

namespace bsm {

struct SelfTestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Scan oracle, finite-difference gradients, FFT round trip, sort plans,
/// scan counting and loss weights, each on small random inputs.
std::vector<SelfTestResult> run_selftest(unsigned seed = 7);

}  // namespace bsm
