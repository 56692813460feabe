#include "talkback/json_io.hpp"

#include <sstream>

namespace talkback {
namespace {

template <typename F>
auto guarded(const char* what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ParseError&) {
    throw;
  } catch (const Json::exception& e) {
    throw ParseError(std::string(what) + ": " + e.what(), 0);
  }
}

const Json& field(const Json& j, const char* key) {
  if (!j.is_object()) throw ParseError("expected a JSON object", 0);
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(std::string("missing field '") + key + "'", 0);
  return *it;
}

Json side_json(const std::optional<Side>& s) { return s ? Json(std::string(to_string(*s))) : Json(nullptr); }

}  // namespace

std::string canonical(const Json& j) { return j.dump(-1, ' ', false, Json::error_handler_t::strict); }

Json form_to_json(const ConstraintForm& form) {
  return std::visit(
      [](const auto& f) -> Json {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, Presence>) {
          return {{"type", "Presence"}, {"feature", f.feature}};
        } else if constexpr (std::is_same_v<T, Direction>) {
          return {{"type", "Direction"}, {"feature", f.feature}, {"side", to_string(f.side)}};
        } else if constexpr (std::is_same_v<T, Threshold>) {
          return {{"type", "Threshold"}, {"feature", f.feature}, {"op", to_string(f.op)}, {"value", f.value}};
        } else if constexpr (std::is_same_v<T, CategoryEquals>) {
          return {{"type", "CategoryEquals"}, {"feature", f.feature}, {"category", f.category}, {"negated", f.negated}};
        } else {
          Json feats = Json::array();
          for (const auto& df : f.features) feats.push_back({{"feature", df.feature}, {"side", side_json(df.side)}});
          return {{"type", "Divergence"}, {"features", feats}};
        }
      },
      form);
}

ConstraintForm form_from_json(const Json& j) {
  return guarded("constraint form", [&]() -> ConstraintForm {
    const auto type = field(j, "type").get<std::string>();
    if (type == "Presence") return Presence{field(j, "feature").get<std::string>()};
    if (type == "Direction")
      return Direction{field(j, "feature").get<std::string>(), side_from_string(field(j, "side").get<std::string>())};
    if (type == "Threshold")
      return Threshold{field(j, "feature").get<std::string>(), cmp_op_from_string(field(j, "op").get<std::string>()),
                       field(j, "value").get<double>()};
    if (type == "CategoryEquals")
      return CategoryEquals{field(j, "feature").get<std::string>(), field(j, "category").get<std::string>(),
                            j.value("negated", false)};
    if (type == "Divergence") {
      Divergence dv;
      for (const auto& fj : field(j, "features")) {
        DivergenceFeature df{field(fj, "feature").get<std::string>(), std::nullopt};
        if (auto it = fj.find("side"); it != fj.end() && !it->is_null()) df.side = side_from_string(it->get<std::string>());
        dv.features.push_back(std::move(df));
      }
      return dv;
    }
    throw ParseError("unknown constraint form '" + type + "'", 0);
  });
}

Json constraint_to_json(const FeatureConstraint& c) {
  Json scope = std::visit(
      [](const auto& s) -> Json {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, GlobalScope>) return {{"type", "Global"}};
        else if constexpr (std::is_same_v<T, LocalScope>) return {{"type", "Local"}, {"row_id", s.row}};
        else return {{"type", "Differential"}, {"row_a", s.row_a}, {"row_b", s.row_b}};
      },
      c.scope);
  return {{"scope", scope}, {"form", form_to_json(c.form)}, {"confidence", c.confidence}};
}

FeatureConstraint constraint_from_json(const Json& j) {
  return guarded("constraint", [&] {
    FeatureConstraint c;
    const auto& s = field(j, "scope");
    const auto type = field(s, "type").get<std::string>();
    if (type == "Global") c.scope = GlobalScope{};
    else if (type == "Local") c.scope = LocalScope{field(s, "row_id").get<RowId>()};
    else if (type == "Differential")
      c.scope = DifferentialScope{field(s, "row_a").get<RowId>(), field(s, "row_b").get<RowId>()};
    else throw ParseError("unknown scope '" + type + "'", 0);
    c.form = form_from_json(field(j, "form"));
    c.confidence = j.value("confidence", 1.0);
    return c;
  });
}

Json event_to_json(const ExplanationEvent& e) {
  Json j = {{"event_id", e.event_id}, {"timestamp", e.timestamp}, {"kind", event_kind_name(e.kind)}};
  if (!e.metadata.empty()) j["metadata"] = e.metadata;
  std::visit(
      [&](const auto& k) {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, AddLabel>) {
          j["example"] = {{"row_id", k.example.row_id}, {"label", k.example.label}, {"confidence", k.example.confidence}};
        } else if constexpr (std::is_same_v<T, AddConstraint>) {
          j["constraint"] = constraint_to_json(k.constraint);
        } else if constexpr (std::is_same_v<T, AddImportance>) {
          j["profile"] = {{"row_id", k.profile.row_id}, {"weights", k.profile.weights}, {"confidence", k.profile.confidence}};
        } else if constexpr (std::is_same_v<T, AddIntermediate>) {
          const auto& a = k.annotation;
          Json value = std::holds_alternative<bool>(a.value) ? Json(std::get<bool>(a.value)) : Json(std::get<double>(a.value));
          j["annotation"] = {{"name", a.name}, {"row_id", a.row_id}, {"value", value},
                             {"contributing_features", a.contributing_features}};
        } else if constexpr (std::is_same_v<T, RateExplanation>) {
          j["explanation_id"] = k.explanation_id;
          j["rating"] = k.rating;
          j["scale"] = k.scale == RatingScale::stars ? "stars" : "signed";
        } else if constexpr (std::is_same_v<T, RejectRule>) {
          j["rule_id"] = k.rule_id;
        } else if constexpr (std::is_same_v<T, EditRule>) {
          Json edit = {{"predicate", form_to_json(k.edit.predicate)}};
          edit["predicate_index"] = k.edit.predicate_index ? Json(*k.edit.predicate_index) : Json(nullptr);
          j["rule_id"] = k.rule_id;
          j["edit"] = edit;
        } else {
          j["target"] = k.target;
        }
      },
      e.kind);
  return j;
}

ExplanationEvent event_from_json(const Json& j) {
  return guarded("event", [&] {
    ExplanationEvent e;
    e.event_id = j.value("event_id", EventId{0});
    e.timestamp = j.value("timestamp", std::string{});
    if (auto it = j.find("metadata"); it != j.end()) e.metadata = it->get<std::map<std::string, std::string>>();
    const auto kind = field(j, "kind").get<std::string>();
    if (kind == "AddLabel") {
      const auto& x = field(j, "example");
      e.kind = AddLabel{{field(x, "row_id").get<RowId>(), field(x, "label").get<ClassId>(), x.value("confidence", 1.0)}};
    } else if (kind == "AddConstraint") {
      e.kind = AddConstraint{constraint_from_json(field(j, "constraint"))};
    } else if (kind == "AddImportance") {
      const auto& p = field(j, "profile");
      e.kind = AddImportance{{field(p, "row_id").get<RowId>(), field(p, "weights").get<std::map<std::string, double>>(),
                              p.value("confidence", 1.0)}};
    } else if (kind == "AddIntermediate") {
      const auto& a = field(j, "annotation");
      IntermediateAnnotation ann;
      ann.name = field(a, "name").get<std::string>();
      ann.row_id = field(a, "row_id").get<RowId>();
      const auto& v = field(a, "value");
      if (v.is_boolean()) ann.value = v.get<bool>();
      else if (v.is_number()) ann.value = v.get<double>();
      else throw ParseError("intermediate value must be boolean or number", 0);
      ann.contributing_features = a.value("contributing_features", std::vector<std::string>{});
      e.kind = AddIntermediate{std::move(ann)};
    } else if (kind == "RateExplanation") {
      const auto scale = j.value("scale", std::string("signed"));
      if (scale != "signed" && scale != "stars") throw ParseError("unknown rating scale '" + scale + "'", 0);
      e.kind = RateExplanation{field(j, "explanation_id").get<std::string>(), field(j, "rating").get<int>(),
                               scale == "stars" ? RatingScale::stars : RatingScale::signed_unit};
    } else if (kind == "RejectRule") {
      e.kind = RejectRule{field(j, "rule_id").get<std::string>()};
    } else if (kind == "EditRule") {
      const auto& ed = field(j, "edit");
      RuleEdit edit;
      edit.predicate = form_from_json(field(ed, "predicate"));
      if (auto it = ed.find("predicate_index"); it != ed.end() && !it->is_null())
        edit.predicate_index = it->get<std::size_t>();
      e.kind = EditRule{field(j, "rule_id").get<std::string>(), std::move(edit)};
    } else if (kind == "Retract") {
      e.kind = Retract{field(j, "target").get<EventId>()};
    } else {
      throw ParseError("unknown event kind '" + kind + "'", 0);
    }
    return e;
  });
}

std::vector<ExplanationEvent> events_from_jsonl(const std::string& text) {
  std::vector<ExplanationEvent> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(event_from_json(Json::parse(line)));
    } catch (const Json::exception& e) {
      throw ParseError(e.what(), n);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), n);
    }
  }
  return out;
}

std::string events_to_jsonl(const std::vector<ExplanationEvent>& events) {
  std::string out;
  for (const auto& e : events) out += canonical(event_to_json(e)) + "\n";
  return out;
}

Json compiled_to_json(const CompiledConstraints& cc) {
  Json j;
  Json labels = Json::array();
  for (const auto& l : cc.labels) labels.push_back({{"row_id", l.row_id}, {"label", l.label}, {"confidence", l.confidence}});
  j["labels"] = labels;
  Json per_row = Json::array();
  for (const auto& [row, list] : cc.per_row)
    for (const auto& rc : list)
      per_row.push_back({{"row_id", row}, {"form", form_to_json(rc.form)}, {"confidence", rc.confidence}, {"source", rc.source}});
  j["per_row"] = per_row;
  j["allow_list"] = cc.allow_list ? Json(*cc.allow_list) : Json(nullptr);
  Json global = Json::array();
  for (const auto& g : cc.global)
    global.push_back({{"form", form_to_json(g.form)}, {"confidence", g.confidence}, {"source", g.source}});
  j["global"] = global;
  Json sides = Json::array();
  for (const auto& s : cc.sides)
    sides.push_back({{"row_id", s.row}, {"feature", s.feature}, {"side", to_string(s.side)}, {"source", s.source}});
  j["sides"] = sides;
  Json divs = Json::array();
  for (const auto& dv : cc.divergences) {
    Json feats = Json::array();
    for (const auto& df : dv.features) feats.push_back({{"feature", df.feature}, {"side", side_json(df.side)}});
    divs.push_back({{"row_a", dv.row_a}, {"row_b", dv.row_b}, {"features", feats}, {"confidence", dv.confidence},
                    {"source", dv.source}});
  }
  j["divergences"] = divs;
  j["importance"] = cc.importance;
  Json profiles = Json::array();
  for (const auto& [row, p] : cc.profiles)
    profiles.push_back({{"row_id", row}, {"weights", p.weights}, {"confidence", p.confidence}});
  j["profiles"] = profiles;
  Json inter = Json::array();
  for (const auto& a : cc.intermediates)
    inter.push_back({{"name", a.name}, {"row_id", a.row_id}, {"value", annotation_number(a.value)},
                     {"boolean", std::holds_alternative<bool>(a.value)}, {"contributing_features", a.contributing_features}});
  j["intermediates"] = inter;
  Json ratings = Json::array();
  for (const auto& r : cc.ratings) ratings.push_back({{"explanation_id", r.explanation_id}, {"score", r.score}, {"source", r.source}});
  j["ratings"] = ratings;
  j["rejected_rules"] = cc.rejected_rules;
  Json edits = Json::array();
  for (const auto& e : cc.edits) {
    edits.push_back({{"rule_id", e.rule_id},
                     {"predicate", form_to_json(e.edit.predicate)},
                     {"predicate_index", e.edit.predicate_index ? Json(*e.edit.predicate_index) : Json(nullptr)},
                     {"source", e.source}});
  }
  j["edits"] = edits;
  j["active_events"] = cc.active_events;
  return j;
}

Json schema_to_json(const std::vector<FeatureSchema>& schema) {
  Json arr = Json::array();
  for (const auto& f : schema) {
    Json fj = {{"name", f.name}, {"kind", to_string(f.kind)}};
    if (f.kind == FeatureKind::categorical) fj["categories"] = f.categories;
    arr.push_back(fj);
  }
  return arr;
}

std::vector<FeatureSchema> schema_from_json(const Json& j) {
  return guarded("schema", [&] {
    std::vector<FeatureSchema> out;
    for (const auto& fj : j) {
      FeatureSchema f;
      f.name = field(fj, "name").get<std::string>();
      try {
        f.kind = feature_kind_from_string(field(fj, "kind").get<std::string>());
      } catch (const SchemaError& e) {
        throw ParseError(e.what(), 0);
      }
      f.categories = fj.value("categories", std::vector<std::string>{});
      out.push_back(std::move(f));
    }
    return out;
  });
}

Json values_to_json(const std::vector<FeatureSchema>& schema, std::span<const double> values) {
  Json j = Json::object();
  for (std::size_t f = 0; f < schema.size(); ++f) {
    const double v = values[f];
    if (is_missing(v)) {
      j[schema[f].name] = nullptr;
      continue;
    }
    switch (schema[f].kind) {
      case FeatureKind::numeric: j[schema[f].name] = v; break;
      case FeatureKind::boolean: j[schema[f].name] = v != 0.0; break;
      case FeatureKind::categorical: j[schema[f].name] = schema[f].categories.at(static_cast<std::size_t>(v)); break;
    }
  }
  return j;
}

Json row_to_json(const Dataset& d, std::size_t row) { return values_to_json(d.schema(), d.row(row)); }

std::vector<double> values_from_json(const std::vector<FeatureSchema>& schema, const Json& j) {
  if (!j.is_object()) throw ParseError("row must be a JSON object", 0);
  Dataset shape(schema, {});
  std::vector<double> out(schema.size(), kMissing);
  for (std::size_t f = 0; f < schema.size(); ++f) {
    auto it = j.find(schema[f].name);
    if (it == j.end() || it->is_null()) continue;
    try {
      if (it->is_boolean()) {
        if (schema[f].kind != FeatureKind::boolean) throw SchemaError("'" + schema[f].name + "' is not boolean");
        out[f] = it->get<bool>() ? 1.0 : 0.0;
      } else if (it->is_number()) {
        if (schema[f].kind == FeatureKind::categorical)
          throw SchemaError("'" + schema[f].name + "' expects a category name");
        out[f] = shape.parse_value(f, format_number(it->get<double>()));
      } else if (it->is_string()) {
        out[f] = shape.parse_value(f, it->get<std::string>());
      } else {
        throw SchemaError("unsupported value for '" + schema[f].name + "'");
      }
    } catch (const SchemaError& e) {
      throw ParseError(e.what(), 0);
    }
  }
  for (const auto& [key, value] : j.items())
    if (!shape.feature_index(key)) throw ParseError("unknown feature '" + key + "' in row", 0);
  return out;
}

}  // namespace talkback
