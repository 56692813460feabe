#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "talkback/data.hpp"
#include "talkback/explanation.hpp"
#include "talkback/json_io.hpp"

namespace talkback {

enum class ChallengeState { open, awaiting_explanation, resolved };
std::string_view to_string(ChallengeState s);
ChallengeState challenge_state_from_string(std::string_view s);

struct Challenge {
  std::string challenge_id;
  RowId new_row = 0;         // X
  RowId counterfactual = 0;  // Y
  ClassId new_label = 0;
  ClassId counterfactual_label = 0;
  double distance = 0.0;
  ChallengeState state = ChallengeState::open;
  std::size_t round = 1;
  std::vector<DivergenceFeature> claimed;  // sides of X accumulated over rounds
  std::vector<RowId> shown;                // counterfactuals of earlier rounds

  friend bool operator==(const Challenge&, const Challenge&) = default;
};

struct RetractNew {
  friend bool operator==(const RetractNew&, const RetractNew&) = default;
};
struct RelabelNew {
  ClassId label = 0;
  friend bool operator==(const RelabelNew&, const RelabelNew&) = default;
};
struct RetractOld {
  RowId row = 0;
  friend bool operator==(const RetractOld&, const RetractOld&) = default;
};
struct RelabelOld {
  RowId row = 0;
  ClassId label = 0;
  friend bool operator==(const RelabelOld&, const RelabelOld&) = default;
};
/// The user stands by both labels and names what sets X apart from Y.
struct Keep {
  std::vector<DivergenceFeature> features;
  friend bool operator==(const Keep&, const Keep&) = default;
};

using UserResponse = std::variant<RetractNew, RelabelNew, RetractOld, RelabelOld, Keep>;

struct SkepticContext {
  const Dataset* data = nullptr;
  const CompiledConstraints* constraints = nullptr;  // labels and their event ids
  double tau = 0.1;
  std::size_t round_cap = 3;
};

/// Nearest previously labeled row with a different label, if within tau.
/// The new row's own earlier label is ignored. Ties go to the lowest row id.
/// Throws SchemaError for an unknown row, PreconditionError for tau outside
/// (0, 1].
std::optional<Challenge> detect_contradiction(const Dataset& d, const std::vector<LabeledExample>& labels,
                                              const LabeledExample& added, double tau);

struct Resolution {
  Challenge challenge;  // updated state
  std::vector<ExplanationEvent> events;  // event ids left 0 for the log to assign
};

/// Throws PreconditionError on a resolved challenge or a response naming the
/// wrong row, ValidationError when a Keep side contradicts the data.
Resolution respond(const Challenge& c, const UserResponse& r, const SkepticContext& ctx);

/// Next round after a Keep: the nearest row carrying Y's label whose values
/// sit on X's claimed sides. Marks `c` resolved either way.
std::optional<Challenge> next_counterfactual(Challenge& c, const SkepticContext& ctx);

struct TranscriptEntry {
  Challenge challenge;
  UserResponse response;
  std::vector<ExplanationEvent> events;
};

class DialogTranscript {
 public:
  /// Throws PreconditionError when the challenge was already resolved here.
  void append(TranscriptEntry entry);
  const std::vector<TranscriptEntry>& entries() const { return entries_; }
  std::vector<ExplanationEvent> events() const;
  Json to_json() const;

 private:
  std::vector<TranscriptEntry> entries_;
};

Json challenge_to_json(const Challenge& c);
Challenge challenge_from_json(const Json& j);
Json response_to_json(const UserResponse& r);
UserResponse response_from_json(const Json& j);

}  // namespace talkback
