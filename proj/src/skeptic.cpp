#include "talkback/skeptic.hpp"

#include <algorithm>

#include "talkback/errors.hpp"

namespace talkback {

std::string_view to_string(ChallengeState s) {
  switch (s) {
    case ChallengeState::open: return "open";
    case ChallengeState::awaiting_explanation: return "awaiting_explanation";
    case ChallengeState::resolved: return "resolved";
  }
  return "open";
}

ChallengeState challenge_state_from_string(std::string_view s) {
  if (s == "open") return ChallengeState::open;
  if (s == "awaiting_explanation") return ChallengeState::awaiting_explanation;
  if (s == "resolved") return ChallengeState::resolved;
  throw ParseError("unknown challenge state '" + std::string(s) + "'", 0);
}

namespace {

std::string challenge_id(RowId x, RowId y, std::size_t round) {
  return "ch-" + std::to_string(x) + "-" + std::to_string(y) + "-r" + std::to_string(round);
}

ExplanationEvent make_event(EventKind kind, const Challenge& c) {
  ExplanationEvent e;
  e.kind = std::move(kind);
  e.metadata["challenge_id"] = c.challenge_id;
  return e;
}

EventId label_event(const SkepticContext& ctx, RowId row) {
  auto it = ctx.constraints->label_events.find(row);
  if (it == ctx.constraints->label_events.end())
    throw PreconditionError("row " + std::to_string(row) + " has no active label to retract");
  return it->second;
}

void check_context(const SkepticContext& ctx) {
  if (!ctx.data || !ctx.constraints) throw PreconditionError("skeptic context lacks data or constraints");
  if (!(ctx.tau > 0.0 && ctx.tau <= 1.0)) throw PreconditionError("tau must lie in (0, 1]");
  if (ctx.round_cap < 1) throw PreconditionError("round cap must be at least 1");
}

}  // namespace

std::optional<Challenge> detect_contradiction(const Dataset& d, const std::vector<LabeledExample>& labels,
                                              const LabeledExample& added, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw PreconditionError("tau must lie in (0, 1]");
  const GowerMetric gower(d);
  const auto x = d.row(d.require_row(added.row_id));
  std::optional<Challenge> best;
  for (const auto& l : labels) {
    if (l.row_id == added.row_id || l.label == added.label) continue;
    const auto y = d.row(d.require_row(l.row_id));
    double dist;
    try {
      dist = gower.distance(x, y);
    } catch (const Error&) {
      continue;
    }
    if (dist > tau) continue;
    if (!best || dist < best->distance || (dist == best->distance && l.row_id < best->counterfactual)) {
      best = Challenge{};
      best->new_row = added.row_id;
      best->counterfactual = l.row_id;
      best->new_label = added.label;
      best->counterfactual_label = l.label;
      best->distance = dist;
    }
  }
  if (best) best->challenge_id = challenge_id(best->new_row, best->counterfactual, 1);
  return best;
}

Resolution respond(const Challenge& c, const UserResponse& r, const SkepticContext& ctx) {
  check_context(ctx);
  if (c.state == ChallengeState::resolved) throw PreconditionError("challenge " + c.challenge_id + " is resolved");
  Resolution out{c, {}};
  out.challenge.state = ChallengeState::resolved;
  auto check_old = [&](RowId row) {
    if (row != c.counterfactual)
      throw PreconditionError("response names row " + std::to_string(row) + " but the counterfactual is " +
                              std::to_string(c.counterfactual));
  };
  std::visit(
      [&](const auto& resp) {
        using T = std::decay_t<decltype(resp)>;
        if constexpr (std::is_same_v<T, RetractNew>) {
          out.events.push_back(make_event(Retract{label_event(ctx, c.new_row)}, c));
        } else if constexpr (std::is_same_v<T, RelabelNew>) {
          out.events.push_back(make_event(AddLabel{{c.new_row, resp.label, 1.0}}, c));
        } else if constexpr (std::is_same_v<T, RetractOld>) {
          check_old(resp.row);
          out.events.push_back(make_event(Retract{label_event(ctx, resp.row)}, c));
        } else if constexpr (std::is_same_v<T, RelabelOld>) {
          check_old(resp.row);
          out.events.push_back(make_event(AddLabel{{resp.row, resp.label, 1.0}}, c));
        } else {
          const auto& d = *ctx.data;
          if (resp.features.empty()) throw ValidationError({"Keep must name at least one differing feature"});
          const auto x = d.row(d.require_row(c.new_row));
          const auto y = d.row(d.require_row(c.counterfactual));
          std::vector<std::string> problems;
          for (const auto& df : resp.features) {
            auto f = d.feature_index(df.feature);
            if (!f) {
              problems.push_back("unknown feature '" + df.feature + "'");
              continue;
            }
            const double xv = x[*f], yv = y[*f];
            const auto quoted = "X." + df.feature + " = " + d.format_value(*f, xv) + ", Y." + df.feature + " = " +
                                d.format_value(*f, yv);
            if (is_missing(xv) || is_missing(yv)) {
              problems.push_back("'" + df.feature + "' is missing (" + quoted + ")");
            } else if (df.side && d.feature(*f).kind == FeatureKind::categorical) {
              problems.push_back("side claim on categorical feature '" + df.feature + "'");
            } else if (df.side == Side::high && !(xv > yv)) {
              problems.push_back("'" + df.feature + "' is not larger in X (" + quoted + ")");
            } else if (df.side == Side::low && !(xv < yv)) {
              problems.push_back("'" + df.feature + "' is not smaller in X (" + quoted + ")");
            } else if (!df.side && xv == yv) {
              problems.push_back("'" + df.feature + "' does not differ (" + quoted + ")");
            }
          }
          if (!problems.empty()) throw ValidationError(problems);
          FeatureConstraint fc{DifferentialScope{c.new_row, c.counterfactual}, Divergence{resp.features}, 1.0};
          auto e = make_event(AddConstraint{fc}, c);
          e.metadata["side_check"] = "strict";
          out.events.push_back(std::move(e));
          out.challenge.state = ChallengeState::awaiting_explanation;
          for (const auto& df : resp.features) {
            auto it = std::find_if(out.challenge.claimed.begin(), out.challenge.claimed.end(),
                                   [&](const auto& have) { return have.feature == df.feature; });
            if (it == out.challenge.claimed.end())
              out.challenge.claimed.push_back(df);
            else
              *it = df;
          }
        }
      },
      r);
  return out;
}

std::optional<Challenge> next_counterfactual(Challenge& c, const SkepticContext& ctx) {
  check_context(ctx);
  if (c.state != ChallengeState::awaiting_explanation)
    throw PreconditionError("challenge " + c.challenge_id + " is not awaiting an explanation");
  c.state = ChallengeState::resolved;
  if (c.round >= ctx.round_cap) return std::nullopt;

  const auto& d = *ctx.data;
  const GowerMetric gower(d);
  const auto x = d.row(d.require_row(c.new_row));
  std::vector<RowId> used = c.shown;
  used.push_back(c.counterfactual);
  std::optional<Challenge> best;
  for (const auto& l : ctx.constraints->labels) {
    if (l.label != c.counterfactual_label || l.row_id == c.new_row) continue;
    if (std::find(used.begin(), used.end(), l.row_id) != used.end()) continue;
    const auto z = d.row(d.require_row(l.row_id));
    bool on_side = true;
    for (const auto& df : c.claimed) {
      const auto f = d.require_feature(df.feature);
      const double xv = x[f], zv = z[f];
      if (is_missing(zv) || (df.side == Side::high && zv < xv) || (df.side == Side::low && zv > xv) ||
          (!df.side && zv != xv)) {
        on_side = false;
        break;
      }
    }
    if (!on_side) continue;
    double dist;
    try {
      dist = gower.distance(x, z);
    } catch (const Error&) {
      continue;
    }
    if (dist > ctx.tau) continue;
    if (!best || dist < best->distance || (dist == best->distance && l.row_id < best->counterfactual)) {
      best = c;
      best->counterfactual = l.row_id;
      best->distance = dist;
    }
  }
  if (!best) return std::nullopt;
  best->shown = used;
  best->round = c.round + 1;
  best->state = ChallengeState::open;
  best->challenge_id = challenge_id(c.new_row, best->counterfactual, best->round);
  return best;
}

void DialogTranscript::append(TranscriptEntry entry) {
  for (const auto& e : entries_)
    if (e.challenge.challenge_id == entry.challenge.challenge_id && e.challenge.state == ChallengeState::resolved)
      throw PreconditionError("challenge " + e.challenge.challenge_id + " is already resolved");
  entries_.push_back(std::move(entry));
}

std::vector<ExplanationEvent> DialogTranscript::events() const {
  std::vector<ExplanationEvent> out;
  for (const auto& e : entries_) out.insert(out.end(), e.events.begin(), e.events.end());
  return out;
}

Json DialogTranscript::to_json() const {
  Json arr = Json::array();
  for (const auto& e : entries_) {
    Json events = Json::array();
    for (const auto& ev : e.events) events.push_back(event_to_json(ev));
    arr.push_back({{"challenge", challenge_to_json(e.challenge)},
                   {"response", response_to_json(e.response)},
                   {"events", events}});
  }
  return arr;
}

namespace {

Json divergence_features_to_json(const std::vector<DivergenceFeature>& fs) {
  Json arr = Json::array();
  for (const auto& f : fs) {
    Json j{{"feature", f.feature}};
    if (f.side) j["side"] = to_string(*f.side);
    arr.push_back(j);
  }
  return arr;
}

std::vector<DivergenceFeature> divergence_features_from_json(const Json& j) {
  std::vector<DivergenceFeature> out;
  for (const auto& f : j) {
    DivergenceFeature df{f.at("feature").get<std::string>(), std::nullopt};
    if (f.contains("side") && !f.at("side").is_null()) df.side = side_from_string(f.at("side").get<std::string>());
    out.push_back(df);
  }
  return out;
}

}  // namespace

Json challenge_to_json(const Challenge& c) {
  return {{"challenge_id", c.challenge_id},
          {"new_row", c.new_row},
          {"counterfactual", c.counterfactual},
          {"new_label", c.new_label},
          {"counterfactual_label", c.counterfactual_label},
          {"distance", c.distance},
          {"state", to_string(c.state)},
          {"round", c.round},
          {"claimed", divergence_features_to_json(c.claimed)},
          {"shown", c.shown}};
}

Challenge challenge_from_json(const Json& j) {
  try {
    Challenge c;
    c.challenge_id = j.at("challenge_id").get<std::string>();
    c.new_row = j.at("new_row").get<RowId>();
    c.counterfactual = j.at("counterfactual").get<RowId>();
    c.new_label = j.at("new_label").get<ClassId>();
    c.counterfactual_label = j.at("counterfactual_label").get<ClassId>();
    c.distance = j.at("distance").get<double>();
    c.state = challenge_state_from_string(j.at("state").get<std::string>());
    c.round = j.at("round").get<std::size_t>();
    c.claimed = divergence_features_from_json(j.at("claimed"));
    c.shown = j.at("shown").get<std::vector<RowId>>();
    return c;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("challenge: ") + e.what(), 0);
  }
}

Json response_to_json(const UserResponse& r) {
  return std::visit(
      [](const auto& resp) -> Json {
        using T = std::decay_t<decltype(resp)>;
        if constexpr (std::is_same_v<T, RetractNew>) return {{"type", "retract_new"}};
        if constexpr (std::is_same_v<T, RelabelNew>) return {{"type", "relabel_new"}, {"label", resp.label}};
        if constexpr (std::is_same_v<T, RetractOld>) return {{"type", "retract_old"}, {"row", resp.row}};
        if constexpr (std::is_same_v<T, RelabelOld>)
          return {{"type", "relabel_old"}, {"row", resp.row}, {"label", resp.label}};
        if constexpr (std::is_same_v<T, Keep>)
          return {{"type", "keep"}, {"features", divergence_features_to_json(resp.features)}};
      },
      r);
}

UserResponse response_from_json(const Json& j) {
  try {
    const auto type = j.at("type").get<std::string>();
    if (type == "retract_new") return RetractNew{};
    if (type == "relabel_new") return RelabelNew{j.at("label").get<ClassId>()};
    if (type == "retract_old") return RetractOld{j.at("row").get<RowId>()};
    if (type == "relabel_old") return RelabelOld{j.at("row").get<RowId>(), j.at("label").get<ClassId>()};
    if (type == "keep") return Keep{divergence_features_from_json(j.at("features"))};
    throw ParseError("unknown response type '" + type + "'", 0);
  } catch (const Json::exception& e) {
    throw ParseError(std::string("response: ") + e.what(), 0);
  }
}

}  // namespace talkback
