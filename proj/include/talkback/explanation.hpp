#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "talkback/data.hpp"
#include "talkback/errors.hpp"

namespace talkback {

enum class CmpOp { lt, le, gt, ge, eq, ne };
enum class Side { high, low };

std::string_view to_string(CmpOp op);
CmpOp cmp_op_from_string(std::string_view s);
std::string_view to_string(Side side);
Side side_from_string(std::string_view s);

/// `value op ref`; false for a missing value.
bool compare(double value, CmpOp op, double ref);

// ---- constraint forms -------------------------------------------------------

struct Presence {
  std::string feature;
  friend bool operator==(const Presence&, const Presence&) = default;
};

/// Imprecise form ("salary is large"): no threshold, only a side.
struct Direction {
  std::string feature;
  Side side = Side::high;
  friend bool operator==(const Direction&, const Direction&) = default;
};

struct Threshold {
  std::string feature;
  CmpOp op = CmpOp::gt;
  double value = 0.0;
  friend bool operator==(const Threshold&, const Threshold&) = default;
};

struct CategoryEquals {
  std::string feature;
  std::string category;
  bool negated = false;
  friend bool operator==(const CategoryEquals&, const CategoryEquals&) = default;
};

/// One claimed distinguishing feature of a differential explanation. The
/// side says where the first row's value lies relative to the second's;
/// absent means "the values differ".
struct DivergenceFeature {
  std::string feature;
  std::optional<Side> side;
  friend bool operator==(const DivergenceFeature&, const DivergenceFeature&) = default;
};

/// Pair-level form carried by Differential scopes ("X differs from Y
/// because of A, B").
struct Divergence {
  std::vector<DivergenceFeature> features;
  friend bool operator==(const Divergence&, const Divergence&) = default;
};

using ConstraintForm = std::variant<Presence, Direction, Threshold, CategoryEquals, Divergence>;

/// The single feature a non-Divergence form refers to.
const std::string& form_feature(const ConstraintForm& form);

struct GlobalScope {
  friend bool operator==(const GlobalScope&, const GlobalScope&) = default;
};
struct LocalScope {
  RowId row = 0;
  friend bool operator==(const LocalScope&, const LocalScope&) = default;
};
struct DifferentialScope {
  RowId row_a = 0;
  RowId row_b = 0;
  friend bool operator==(const DifferentialScope&, const DifferentialScope&) = default;
};

using ConstraintScope = std::variant<GlobalScope, LocalScope, DifferentialScope>;

struct FeatureConstraint {
  ConstraintScope scope;
  ConstraintForm form;
  double confidence = 1.0;
  friend bool operator==(const FeatureConstraint&, const FeatureConstraint&) = default;
};

struct ImportanceProfile {
  RowId row_id = 0;
  std::map<std::string, double> weights;
  double confidence = 1.0;
  friend bool operator==(const ImportanceProfile&, const ImportanceProfile&) = default;
};

using AnnotationValue = std::variant<bool, double>;

struct IntermediateAnnotation {
  std::string name;
  RowId row_id = 0;
  AnnotationValue value = false;
  std::vector<std::string> contributing_features;
  friend bool operator==(const IntermediateAnnotation&, const IntermediateAnnotation&) = default;
};

inline double annotation_number(const AnnotationValue& v) {
  return std::holds_alternative<bool>(v) ? (std::get<bool>(v) ? 1.0 : 0.0) : std::get<double>(v);
}

// ---- events -----------------------------------------------------------------

using EventId = std::uint64_t;

struct AddLabel {
  LabeledExample example;
  friend bool operator==(const AddLabel&, const AddLabel&) = default;
};
struct AddConstraint {
  FeatureConstraint constraint;
  friend bool operator==(const AddConstraint&, const AddConstraint&) = default;
};
struct AddImportance {
  ImportanceProfile profile;
  friend bool operator==(const AddImportance&, const AddImportance&) = default;
};
struct AddIntermediate {
  IntermediateAnnotation annotation;
  friend bool operator==(const AddIntermediate&, const AddIntermediate&) = default;
};

enum class RatingScale { signed_unit, stars };

struct RateExplanation {
  std::string explanation_id;
  int rating = 0;
  RatingScale scale = RatingScale::signed_unit;
  friend bool operator==(const RateExplanation&, const RateExplanation&) = default;
};

/// Rule ids are "<version_id>" (the whole shown rule set) or
/// "<version_id>#<rule index>".
struct RejectRule {
  std::string rule_id;
  friend bool operator==(const RejectRule&, const RejectRule&) = default;
};

/// Replaces predicate `predicate_index` of the referenced rule, or appends
/// when no index is given. The predicate is a Threshold or CategoryEquals.
struct RuleEdit {
  std::optional<std::size_t> predicate_index;
  ConstraintForm predicate;
  friend bool operator==(const RuleEdit&, const RuleEdit&) = default;
};

struct EditRule {
  std::string rule_id;
  RuleEdit edit;
  friend bool operator==(const EditRule&, const EditRule&) = default;
};

struct Retract {
  EventId target = 0;
  friend bool operator==(const Retract&, const Retract&) = default;
};

using EventKind = std::variant<AddLabel, AddConstraint, AddImportance, AddIntermediate, RateExplanation,
                               RejectRule, EditRule, Retract>;

std::string_view event_kind_name(const EventKind& kind);

struct ExplanationEvent {
  EventId event_id = 0;  // equals the log sequence number
  std::string timestamp;
  EventKind kind;
  std::map<std::string, std::string> metadata;
  friend bool operator==(const ExplanationEvent&, const ExplanationEvent&) = default;
};

/// Label state and known event ids needed to validate the next event.
struct ValidationContext {
  std::map<RowId, ClassId> labels;
  std::set<EventId> known_events;
  std::optional<std::set<ClassId>> classes;  // QbB fixes {0, 1}

  /// Folds already-accepted events (retractions applied).
  static ValidationContext from_events(const std::vector<ExplanationEvent>& events,
                                       std::optional<std::set<ClassId>> classes = std::nullopt);
  void apply(const ExplanationEvent& e);

 private:
  void refresh_labels();
  std::vector<ExplanationEvent> history_;
};

/// Empty when the event is valid.
std::vector<std::string> validate_event(const ExplanationEvent& e, const Dataset& d,
                                        const ValidationContext& ctx);

// ---- compiled form ----------------------------------------------------------

struct RowConstraint {
  RowId row = 0;
  ConstraintForm form;  // never Divergence
  double confidence = 1.0;
  EventId source = 0;
  const std::string& feature() const { return form_feature(form); }
  friend bool operator==(const RowConstraint&, const RowConstraint&) = default;
};

struct GlobalConstraint {
  ConstraintForm form;  // Direction, Threshold or CategoryEquals
  double confidence = 1.0;
  EventId source = 0;
  const std::string& feature() const { return form_feature(form); }
  friend bool operator==(const GlobalConstraint&, const GlobalConstraint&) = default;
};

struct SideRequirement {
  RowId row = 0;
  std::string feature;
  Side side = Side::high;
  double confidence = 1.0;
  EventId source = 0;
  friend bool operator==(const SideRequirement&, const SideRequirement&) = default;
};

struct DivergenceRequirement {
  RowId row_a = 0;
  RowId row_b = 0;
  std::vector<DivergenceFeature> features;
  double confidence = 1.0;
  EventId source = 0;
  friend bool operator==(const DivergenceRequirement&, const DivergenceRequirement&) = default;
};

struct RuleEditRecord {
  std::string rule_id;
  RuleEdit edit;
  EventId source = 0;
  friend bool operator==(const RuleEditRecord&, const RuleEditRecord&) = default;
};

struct RatingRecord {
  std::string explanation_id;
  double score = 0.0;  // normalized to [-1, 1]
  EventId source = 0;
  friend bool operator==(const RatingRecord&, const RatingRecord&) = default;
};

struct CompiledConstraints {
  std::vector<LabeledExample> labels;  // latest active label per row, by row id
  std::map<RowId, EventId> label_events;
  std::map<RowId, std::vector<RowConstraint>> per_row;
  std::optional<std::set<std::string>> allow_list;
  std::vector<GlobalConstraint> global;
  std::vector<SideRequirement> sides;
  std::vector<DivergenceRequirement> divergences;
  std::map<std::string, double> importance;  // confidence-weighted mean
  std::map<RowId, ImportanceProfile> profiles;
  std::vector<IntermediateAnnotation> intermediates;
  std::vector<RatingRecord> ratings;
  std::vector<std::string> rejected_rules;
  std::vector<RuleEditRecord> edits;
  std::vector<EventId> active_events;

  bool has_constraints() const;
  friend bool operator==(const CompiledConstraints&, const CompiledConstraints&) = default;
};

struct ConstraintConflict {
  RowId row = -1;  // -1 for global constraints
  std::string feature;
  EventId first = 0;
  EventId second = 0;
};

class CompileError : public Error {
 public:
  explicit CompileError(std::vector<ConstraintConflict> conflicts);
  const std::vector<ConstraintConflict>& conflicts() const { return conflicts_; }

 private:
  std::vector<ConstraintConflict> conflicts_;
};

/// Event ids that remain in effect once retractions (including retracted
/// retractions) are applied; Retract events themselves are excluded.
std::set<EventId> active_event_ids(const std::vector<ExplanationEvent>& events);

/// Throws CompileError listing contradictory constraint pairs.
CompiledConstraints compile(const std::vector<ExplanationEvent>& events, const Dataset& d);

/// Divides by the maximum magnitude. Throws PreconditionError when all zero.
std::map<std::string, double> normalize_importance(const std::map<std::string, double>& raw);

/// Seeded k-means over profile weight vectors; returns a cluster per profile.
std::vector<std::size_t> cluster_importance_profiles(const std::vector<ImportanceProfile>& profiles,
                                                     std::size_t k, std::uint64_t seed);

/// Whether `value` satisfies a Threshold or CategoryEquals form for feature f.
bool satisfies(const Dataset& d, std::size_t f, double value, const ConstraintForm& form);

}  // namespace talkback
