#pragma once
// Self-verification suite: gradient checks, oracle equivalence and
// weight-surgery invariants at toy sizes.

#include <functional>
#include <string>
#include <vector>

namespace hdc {

struct CheckResult {
  std::string module;
  std::string op;
  bool pass = false;
  double value = 0;
  double tolerance = 0;
  std::string detail;

  std::string line() const;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  double seconds = 0;

  bool all_pass() const;
  std::vector<const CheckResult*> failures() const;
};

using CheckSink = std::function<void(const CheckResult&)>;

/// Analytic vs central-difference gradients for every primitive and block.
VerifyReport verify_gradients(const CheckSink& sink = {});
/// selective_scan against the sequential recurrence, plus causality.
VerifyReport verify_scan(const CheckSink& sink = {});
/// Metrics against a scalar reference on random masked pairs.
VerifyReport verify_metrics(const CheckSink& sink = {});
/// Gate saturation, convex midpoint and identity fallback by weight surgery.
VerifyReport verify_surgery(const CheckSink& sink = {});
/// All of the above.
VerifyReport verify_all(const CheckSink& sink = {});

}  // namespace hdc
