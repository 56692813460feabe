#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "talkback/data.hpp"
#include "talkback/explanation.hpp"
#include "talkback/json_io.hpp"
#include "talkback/mlp.hpp"
#include "talkback/rules.hpp"
#include "talkback/shap.hpp"
#include "talkback/tree.hpp"

namespace talkback {

enum class Learner { tree, rules, mlp };
std::string_view to_string(Learner l);
/// Throws ConfigError listing the valid learners.
Learner learner_from_string(std::string_view s);

enum class LoopKind { short_term, long_term };
std::string_view to_string(LoopKind l);
LoopKind loop_from_string(std::string_view s);

enum class SessionMode { qbb, multiclass };
std::string_view to_string(SessionMode m);
SessionMode mode_from_string(std::string_view s);

struct ConfigBundle {
  InductionConfig tree;
  GAConfig rules;
  MLPConfig mlp;  // layers lists hidden sizes only
  std::size_t mlp_short_term_epochs = 50;
  std::size_t cloud_per_example = 0;
  double cloud_radius = 0.1;
  ShapConfig shap;
  double tau = 0.1;
  std::size_t round_cap = 3;
  std::uint64_t seed = 1;

  ConfigBundle();
  void validate() const;
};

Json config_to_json(const ConfigBundle& c);
/// Applies `overrides` on top of `base`. Throws ConfigError on unknown keys
/// or invalid values.
ConfigBundle config_from_json(const Json& overrides, ConfigBundle base = {});

/// A fitted model with everything needed to predict and explain a raw row.
struct ModelBundle {
  Learner learner = Learner::tree;
  std::vector<FeatureSchema> schema;
  std::optional<DecisionTree> tree;
  std::vector<IntermediateModel> intermediates;
  std::optional<RuleSet> rules;
  std::vector<RuleSet> elites;
  std::optional<MLPModel> mlp;
  std::vector<std::vector<double>> background;
  ShapConfig shap;
  std::vector<std::string> warnings;

  ClassId predict(std::span<const double> row) const;
  double probability(std::span<const double> row, ClassId cls) const;
};

Json bundle_to_json(const ModelBundle& b);
ModelBundle bundle_from_json(const Json& j);

/// Appends each intermediate model's column to `d`.
Dataset augmented_dataset(const std::vector<IntermediateModel>& models, const Dataset& d);

struct FitContext {
  const Dataset* data = nullptr;
  const std::vector<ExplanationEvent>* events = nullptr;
  Learner learner = Learner::tree;
  SessionMode mode = SessionMode::qbb;
  ConfigBundle config;
  /// Earlier versions, for rejected, edited and rated rule sets.
  std::function<std::optional<ModelBundle>(const std::string& version_id)> lookup;
};

struct FitOutput {
  ModelBundle bundle;
  CompiledConstraints constraints;
};

/// Full refit from the whole event history. Throws CompileError on
/// contradictions and PreconditionError without usable labels.
FitOutput fit_long_term(const FitContext& ctx);

/// Incremental update of `parent` with the events after `parent_last`.
FitOutput fit_short_term(const FitContext& ctx, const ModelBundle& parent, EventId parent_last);

/// Constraint coverage and training accuracy; recomputable from the bundle
/// and the events.
Json coverage_report(const ModelBundle& b, const Dataset& d, const CompiledConstraints& cc, const GAConfig& ga);

/// Prediction, learner-specific local explanation and Shapley attributions.
Json explain_row(const ModelBundle& b, std::span<const double> row);

}  // namespace talkback
