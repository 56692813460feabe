#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "talkback/data.hpp"
#include "talkback/explanation.hpp"
#include "talkback/json_io.hpp"

namespace talkback {

struct InductionConfig {
  std::size_t max_depth = 12;
  std::size_t min_samples_leaf = 1;
  double importance_boost = 0.5;  // weight of |aggregate importance| in the split score
  double constraint_boost = 1.0;  // weight of constraint confidence at the node
};

enum class TestKind { numeric_le, categorical, boolean };

/// numeric_le: child 0 takes x <= threshold, child 1 the rest.
/// categorical: one child per declared category. boolean: child 0 false, 1 true.
struct NodeTest {
  std::size_t feature = 0;
  TestKind kind = TestKind::numeric_le;
  double threshold = 0.0;

  std::size_t branch(double value) const;
  std::size_t arity(const FeatureSchema& fs) const;
  friend bool operator==(const NodeTest&, const NodeTest&) = default;
};

struct TreeNode {
  std::optional<NodeTest> test;  // absent at leaves
  std::vector<TreeNode> children;
  bool forced = false;           // inserted by constraint repair
  std::map<ClassId, std::size_t> class_counts;
  std::size_t n_examples = 0;
  ClassId predicted = 0;
  double value = 0.0;            // regression trees: leaf mean
  std::size_t majority_child = 0;

  bool is_leaf() const { return !test.has_value(); }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct DecisionTree {
  std::vector<FeatureSchema> schema;
  std::vector<ClassId> classes;
  TreeNode root;
  bool regression = false;

  std::size_t node_count() const;
  std::size_t depth() const;
  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;
};

struct PathStep {
  NodeTest test;
  std::size_t branch = 0;
  bool imputed = false;  // value missing, routed to the majority child
  bool forced = false;
  friend bool operator==(const PathStep&, const PathStep&) = default;
};

struct Classification {
  ClassId predicted = 0;
  double value = 0.0;  // regression output
  std::vector<PathStep> path;
  const TreeNode* leaf = nullptr;
};

Classification classify(const DecisionTree& t, std::span<const double> row);
/// Leaf class frequency of `cls` (the leaf's own prediction when empty).
double class_probability(const DecisionTree& t, std::span<const double> row, ClassId cls);
std::string describe_step(const std::vector<FeatureSchema>& schema, const PathStep& step);

DecisionTree fit_tree(const Dataset& d, const std::vector<LabeledExample>& labels, const CompiledConstraints& cc,
                      const InductionConfig& cfg = {});

/// Regression variant (variance reduction, mean leaves) used for real-valued
/// intermediate features.
DecisionTree fit_regression_tree(const Dataset& d, const std::vector<std::pair<RowId, double>>& targets,
                                 const std::optional<std::set<std::string>>& allow_list, const InductionConfig& cfg = {});

enum class CoverageStatus { satisfied, violated, unsatisfiable };
std::string_view to_string(CoverageStatus s);

struct CoverageEntry {
  EventId source = 0;
  std::string kind;  // "Presence", "Direction", "Threshold", "CategoryEquals", "Differential"
  RowId row = 0;
  std::optional<RowId> other_row;
  std::vector<std::string> features;
  CoverageStatus status = CoverageStatus::violated;
};

struct CoverageReport {
  std::vector<CoverageEntry> entries;
  std::size_t count(CoverageStatus s) const;
  /// Fraction satisfied among satisfiable entries (1.0 when none).
  double coverage_rate() const;
};

Json coverage_to_json(const CoverageReport& r);

/// Pure. Unsatisfiable means no labeled example set could host a test that
/// separates the row as the constraint asks.
CoverageReport verify_constraint_coverage(const DecisionTree& t, const Dataset& d, const CompiledConstraints& cc);

struct RepairResult {
  DecisionTree tree;
  CoverageReport report;
  std::size_t insertions = 0;
};

/// Inserts forced tests bottom-up until every satisfiable Local, Direction
/// and Differential constraint holds. `only_sources`, when given, restricts
/// repair to constraints from those events.
RepairResult enforce_constraints_bottom_up(const DecisionTree& t, const Dataset& d,
                                           const std::vector<LabeledExample>& labels, const CompiledConstraints& cc,
                                           const InductionConfig& cfg = {},
                                           const std::optional<std::set<EventId>>& only_sources = std::nullopt);

/// Recomputes class counts and leaf predictions for new labels without
/// changing the tree's tests.
DecisionTree refresh_counts(const DecisionTree& t, const Dataset& d, const std::vector<LabeledExample>& labels);

struct IntermediateModel {
  std::string name;
  bool boolean = true;
  DecisionTree tree;
};

struct AugmentResult {
  Dataset dataset;
  std::vector<IntermediateModel> models;
  std::vector<std::string> warnings;
};

AugmentResult augment_with_intermediate(const Dataset& d, const std::vector<IntermediateAnnotation>& annotations,
                                        const InductionConfig& cfg = {});
/// Appends each intermediate model's prediction to a raw row.
std::vector<double> apply_intermediates(const std::vector<IntermediateModel>& models, std::span<const double> row);

Json tree_to_json(const DecisionTree& t);
DecisionTree tree_from_json(const Json& j);

}  // namespace talkback
