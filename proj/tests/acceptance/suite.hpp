#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace acceptance {

struct Result {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

/// `seed` offsets every fixed seed in the suite; 0 reproduces the pinned run.
struct Options {
  std::uint64_t seed = 0;
};

Result tree_oracle_equivalence(const Options& o);
Result constraint_coverage(const Options& o);
Result differential_coverage(const Options& o);
Result clamped_backprop(const Options& o);
Result importance_modulation(const Options& o);
Result shapley_axioms(const Options& o);
Result planted_rule_recovery(const Options& o);
Result skeptic_loop(const Options& o);
Result cloud_augmentation(const Options& o);
Result service_determinism(const Options& o);

using Criterion = std::function<Result(const Options&)>;
const std::vector<Criterion>& criteria();

/// Runs every criterion, calling `on_result` as each one finishes.
std::vector<Result> run_all(const Options& o, const std::function<void(const Result&)>& on_result = {});

/// "PASS  1 name: detail (1.2s)".
std::string format(const Result& r);

}  // namespace acceptance
