#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "talkback/data.hpp"
#include "talkback/explanation.hpp"
#include "talkback/json_io.hpp"

namespace talkback {

/// feature op value. Categorical values are category indices with op = or
/// !=; boolean predicates use = 0 or = 1.
struct Predicate {
  std::size_t feature = 0;
  CmpOp op = CmpOp::gt;
  double value = 0.0;

  bool matches(double v) const { return compare(v, op, value); }
  friend bool operator==(const Predicate&, const Predicate&) = default;
  friend auto operator<=>(const Predicate&, const Predicate&) = default;
};

struct ConjunctiveRule {
  std::vector<Predicate> predicates;
  std::set<std::size_t> frozen;  // indices into predicates kept verbatim by refits

  bool matches(std::span<const double> row) const;
  friend bool operator==(const ConjunctiveRule&, const ConjunctiveRule&) = default;
};

struct RuleSet {
  std::vector<ConjunctiveRule> rules;  // disjunction
  ClassId match_class = kWanted;
  ClassId other_class = kUnwanted;

  bool matches(std::span<const double> row) const;
  /// Index of the first matching rule.
  std::optional<std::size_t> first_match(std::span<const double> row) const;
  ClassId predict(std::span<const double> row) const { return matches(row) ? match_class : other_class; }
  std::size_t predicate_count() const;
  /// Rules with sorted predicates, in sorted order; frozen marks follow.
  RuleSet canonical_form() const;
  friend bool operator==(const RuleSet&, const RuleSet&) = default;
};

struct GAConfig {
  std::size_t population = 200;
  std::size_t tournament = 3;
  double crossover_rate = 0.9;
  double mutation_rate = 0.1;  // per rule
  std::size_t max_generations = 500;
  std::size_t stagnation_limit = 50;
  double parsimony = 0.01;        // alpha
  double constraint_weight = 1.0;  // lambda
  std::size_t max_rules = 4;
  std::size_t max_predicates = 6;
  ClassId positive_class = kWanted;
  std::uint64_t seed = 1;

  void validate() const;
};

struct FitnessBreakdown {
  double accuracy = 0.0;    // balanced accuracy
  double constraint = 0.0;  // lambda x satisfied fraction
  double parsimony = 0.0;   // alpha x predicate count
  double total = 0.0;
  std::vector<EventId> unsatisfied;  // sources of unmet constraints
};

FitnessBreakdown fitness(const RuleSet& rs, const Dataset& d, const std::vector<LabeledExample>& labels,
                         const CompiledConstraints& cc, const GAConfig& cfg);

/// Whether a rule predicate implies a Local or Global constraint form.
bool predicate_consistent(const Dataset& d, const Predicate& p, const ConstraintForm& form);

/// Rows matched by the rule set, one flag per dataset row.
std::vector<bool> extension(const RuleSet& rs, const Dataset& d);

struct RuleFitOptions {
  std::vector<RuleSet> tabu;       // extensional duplicates score -inf
  std::vector<RuleSet> disfavored;  // negatively rated; lose exact ties
  std::vector<RuleSet> seeds;       // injected into the first generation
  std::vector<ConjunctiveRule> anchors;  // rules carrying frozen predicates
};

struct RuleFitResult {
  RuleSet rules;
  FitnessBreakdown fitness;
  std::vector<RuleSet> elites;  // best distinct individuals of the last generation
  std::vector<std::string> warnings;
  std::size_t generations = 0;
};

/// Throws PreconditionError without both classes, NoAlternativeError when the
/// tabu list leaves nothing above the 0.5 baseline.
RuleFitResult fit_rules(const Dataset& d, const std::vector<LabeledExample>& labels, const CompiledConstraints& cc,
                        const GAConfig& cfg, const RuleFitOptions& opts = {});

/// Retained state for the reject/edit workflow.
struct RuleSession {
  const Dataset* data = nullptr;
  std::vector<LabeledExample> labels;
  CompiledConstraints constraints;
  GAConfig config;
  RuleFitOptions options;
  std::optional<RuleFitResult> last;
};

/// Adds the session's current rule set to the tabu list and refits.
RuleFitResult reject_rule(RuleSession& s);

/// Replaces (or appends) a predicate in rule `rule_index` and marks it frozen.
/// Throws ValidationError for an unknown feature, a mistyped predicate or an
/// empty interval.
RuleSet edit_rule(const RuleSet& rs, std::size_t rule_index, const RuleEdit& edit, const Dataset& d);

/// Applies the edit, then refits with the edited rule as an anchor.
RuleFitResult edit_and_refit(RuleSession& s, std::size_t rule_index, const RuleEdit& edit);

/// Predicate form for feature `f` of `d`; inverse of predicate_from_form.
ConstraintForm predicate_to_form(const Dataset& d, const Predicate& p);
Predicate predicate_from_form(const Dataset& d, const ConstraintForm& form);

bool rule_well_formed(const ConjunctiveRule& r, const std::vector<FeatureSchema>& schema);

std::string rule_to_sql(const RuleSet& rs, const std::vector<FeatureSchema>& schema, const std::string& table);
std::string describe_rule(const ConjunctiveRule& r, const std::vector<FeatureSchema>& schema);

Json rules_to_json(const RuleSet& rs, const std::vector<FeatureSchema>& schema);
RuleSet rules_from_json(const Json& j, const std::vector<FeatureSchema>& schema);

}  // namespace talkback
