#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "talkback/data.hpp"
#include "talkback/explanation.hpp"
#include "talkback/json_io.hpp"

namespace talkback {

using ModelFn = std::function<double(std::span<const double>)>;

struct ShapConfig {
  std::size_t background_cap = 256;
  std::size_t permutations = 200;
  std::uint64_t seed = 1;
  std::size_t exact_cap = 12;

  void validate() const;
};

enum class ShapMode { exact, sampled };

struct AttributionVector {
  std::vector<std::string> features;
  std::vector<double> values;
  double base = 0.0;    // mean model output over the background
  double output = 0.0;  // model output at the explained row
  ShapMode mode = ShapMode::exact;
  std::size_t permutations = 0;
  std::uint64_t seed = 0;
  double residual = 0.0;  // sampled mode: gap spread evenly over the features
  bool residual_distributed = false;

  double value(const std::string& feature) const;
};

/// Every row when within the cap, else a seeded sample without replacement.
std::vector<std::vector<double>> select_background(const Dataset& d, const ShapConfig& cfg);

/// Interventional Shapley values over all 2^n coalitions. Throws
/// PreconditionError beyond cfg.exact_cap features (use sampled_shapley) or
/// with an empty background.
AttributionVector exact_shapley(const ModelFn& f, std::span<const double> row,
                                const std::vector<std::vector<double>>& background,
                                const std::vector<std::string>& features, const ShapConfig& cfg);

/// Permutation-sampling estimate. Each permutation pairs with a background
/// row drawn in seeded round-robin order.
AttributionVector sampled_shapley(const ModelFn& f, std::span<const double> row,
                                  const std::vector<std::vector<double>>& background,
                                  const std::vector<std::string>& features, const ShapConfig& cfg);

/// Exact when the feature count allows it, sampled otherwise.
AttributionVector shapley(const ModelFn& f, std::span<const double> row,
                          const std::vector<std::vector<double>>& background,
                          const std::vector<std::string>& features, const ShapConfig& cfg);

struct ProfileComparison {
  double cosine = 0.0;
  double l2 = 0.0;
  double kendall_tau = 0.0;
  std::vector<std::string> shared;
};

/// Both sides are max-abs normalized over their own features, then compared
/// on the shared ones. Throws PreconditionError when no feature is shared.
ProfileComparison compare_profiles(const ImportanceProfile& human, const AttributionVector& model);

/// Tau-b. 1 when neither vector has an untied pair and their tie patterns
/// agree, 0 when only one of them is fully tied.
double kendall_tau(std::span<const double> a, std::span<const double> b);

Json attribution_to_json(const AttributionVector& a);
AttributionVector attribution_from_json(const Json& j);
Json comparison_to_json(const ProfileComparison& c);

}  // namespace talkback
