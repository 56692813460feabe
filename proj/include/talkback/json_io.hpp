#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "talkback/data.hpp"
#include "talkback/explanation.hpp"

namespace talkback {

using Json = nlohmann::json;

// All parsers throw ParseError on malformed input.

Json form_to_json(const ConstraintForm& form);
ConstraintForm form_from_json(const Json& j);

Json constraint_to_json(const FeatureConstraint& c);
FeatureConstraint constraint_from_json(const Json& j);

Json event_to_json(const ExplanationEvent& e);
/// `event_id` and `timestamp` may be absent (assigned by the service).
ExplanationEvent event_from_json(const Json& j);

/// One JSON object per line.
std::vector<ExplanationEvent> events_from_jsonl(const std::string& text);
std::string events_to_jsonl(const std::vector<ExplanationEvent>& events);

Json compiled_to_json(const CompiledConstraints& cc);

Json schema_to_json(const std::vector<FeatureSchema>& schema);
std::vector<FeatureSchema> schema_from_json(const Json& j);

/// {feature: number | bool | string | null}
Json row_to_json(const Dataset& d, std::size_t row);
Json values_to_json(const std::vector<FeatureSchema>& schema, std::span<const double> values);
std::vector<double> values_from_json(const std::vector<FeatureSchema>& schema, const Json& j);

/// Canonical text: sorted keys, no whitespace.
std::string canonical(const Json& j);

}  // namespace talkback
