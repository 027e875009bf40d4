#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bikd {

// One named numeric check: `observed` must stay below `bound`.
struct CheckResult {
  std::string name;
  bool passed = false;
  double observed = 0.0;
  double bound = 0.0;
};

struct VerifyReport {
  std::string suite;
  bool passed = true;
  std::vector<CheckResult> checks;

  void add(const std::string& name, double observed, double bound) {
    const bool ok = observed < bound;
    checks.push_back({name, ok, observed, bound});
    passed = passed && ok;
  }
  void add_flag(const std::string& name, bool ok) {
    checks.push_back({name, ok, ok ? 0.0 : 1.0, 1.0});
    passed = passed && ok;
  }
};

std::string report_to_json(const VerifyReport& report);

// Analytic gradients vs central differences for every primitive op and for
// three end-to-end compositions, in double precision.
VerifyReport verify_gradcheck(std::size_t seeds = 20);

// Triple agreement of the accumulated one-step route, the explicit assembly
// and central differences over random windows.
VerifyReport verify_hypergrad(const std::vector<std::size_t>& window_lengths = {1, 2,
                                                                                3, 5},
                              std::size_t seeds = 2);

// Behavioral reductions: k=1 online equivalence, pinned-weight reproduction
// of fixed-alpha KD, and the KL / soft-target-CE gradient identity.
VerifyReport verify_equivalence();

// Long-tail construction checks for a given profile.
VerifyReport verify_data(double rho, std::size_t n_max = 5000,
                         std::size_t classes = 10);

}  // namespace bikd
