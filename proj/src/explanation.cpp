#include "talkback/explanation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "talkback/rng.hpp"

namespace talkback {

std::string_view to_string(CmpOp op) {
  switch (op) {
    case CmpOp::lt: return "<";
    case CmpOp::le: return "<=";
    case CmpOp::gt: return ">";
    case CmpOp::ge: return ">=";
    case CmpOp::eq: return "=";
    case CmpOp::ne: return "!=";
  }
  return "?";
}

CmpOp cmp_op_from_string(std::string_view s) {
  if (s == "<") return CmpOp::lt;
  if (s == "<=") return CmpOp::le;
  if (s == ">") return CmpOp::gt;
  if (s == ">=") return CmpOp::ge;
  if (s == "=" || s == "==") return CmpOp::eq;
  if (s == "!=" || s == "<>" || s == "≠") return CmpOp::ne;
  throw ParseError("unknown comparison operator '" + std::string(s) + "'", 0);
}

std::string_view to_string(Side side) { return side == Side::high ? "high" : "low"; }

Side side_from_string(std::string_view s) {
  if (s == "high") return Side::high;
  if (s == "low") return Side::low;
  throw ParseError("unknown side '" + std::string(s) + "'", 0);
}

bool compare(double value, CmpOp op, double ref) {
  if (is_missing(value)) return false;
  switch (op) {
    case CmpOp::lt: return value < ref;
    case CmpOp::le: return value <= ref;
    case CmpOp::gt: return value > ref;
    case CmpOp::ge: return value >= ref;
    case CmpOp::eq: return value == ref;
    case CmpOp::ne: return value != ref;
  }
  return false;
}

const std::string& form_feature(const ConstraintForm& form) {
  return std::visit(
      [](const auto& f) -> const std::string& {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, Divergence>) {
          static const std::string kNone;
          return f.features.empty() ? kNone : f.features.front().feature;
        } else {
          return f.feature;
        }
      },
      form);
}

std::string_view event_kind_name(const EventKind& kind) {
  static constexpr std::string_view kNames[] = {"AddLabel",        "AddConstraint", "AddImportance",
                                                "AddIntermediate", "RateExplanation", "RejectRule",
                                                "EditRule",        "Retract"};
  return kNames[kind.index()];
}

bool satisfies(const Dataset& d, std::size_t f, double value, const ConstraintForm& form) {
  if (is_missing(value)) return false;
  if (const auto* t = std::get_if<Threshold>(&form)) return compare(value, t->op, t->value);
  if (const auto* c = std::get_if<CategoryEquals>(&form)) {
    const bool equal = d.format_value(f, value) == c->category;
    return c->negated ? !equal : equal;
  }
  return true;
}

// ---- validation -------------------------------------------------------------

ValidationContext ValidationContext::from_events(const std::vector<ExplanationEvent>& events,
                                                 std::optional<std::set<ClassId>> classes) {
  ValidationContext ctx;
  ctx.classes = std::move(classes);
  ctx.history_ = events;
  ctx.refresh_labels();
  for (const auto& e : events) ctx.known_events.insert(e.event_id);
  return ctx;
}

void ValidationContext::apply(const ExplanationEvent& e) {
  known_events.insert(e.event_id);
  history_.push_back(e);
  if (const auto* l = std::get_if<AddLabel>(&e.kind)) labels[l->example.row_id] = l->example.label;
  else if (std::holds_alternative<Retract>(e.kind)) refresh_labels();
}

void ValidationContext::refresh_labels() {
  labels.clear();
  const auto active = active_event_ids(history_);
  for (const auto& e : history_) {
    if (!active.count(e.event_id)) continue;
    if (const auto* l = std::get_if<AddLabel>(&e.kind)) labels[l->example.row_id] = l->example.label;
  }
}

namespace {

void check_confidence(double c, std::vector<std::string>& errs) {
  if (!(c > 0.0 && c <= 1.0)) errs.push_back("confidence must lie in (0, 1]");
}

std::optional<std::size_t> check_feature(const Dataset& d, const std::string& name,
                                         std::vector<std::string>& errs) {
  auto f = d.feature_index(name);
  if (!f) errs.push_back("unknown feature '" + name + "'");
  return f;
}

void check_row(const Dataset& d, RowId row, const ValidationContext& ctx, bool must_be_labeled,
               std::vector<std::string>& errs) {
  if (!d.index_of(row)) {
    errs.push_back("unknown row " + std::to_string(row));
    return;
  }
  if (must_be_labeled && !ctx.labels.count(row)) errs.push_back("row " + std::to_string(row) + " is not labeled");
}

// Type rules shared by constraint forms and rule-edit predicates.
void check_form(const ConstraintForm& form, const Dataset& d, std::vector<std::string>& errs) {
  std::visit(
      [&](const auto& f) {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, Divergence>) {
          if (f.features.empty()) errs.push_back("divergence lists no features");
          std::set<std::string> seen;
          for (const auto& df : f.features) {
            auto idx = check_feature(d, df.feature, errs);
            if (!seen.insert(df.feature).second) errs.push_back("divergence repeats '" + df.feature + "'");
            if (idx && df.side && d.feature(*idx).kind == FeatureKind::categorical)
              errs.push_back("side claim on categorical feature '" + df.feature + "'");
          }
        } else {
          auto idx = check_feature(d, f.feature, errs);
          if (!idx) return;
          const auto kind = d.feature(*idx).kind;
          if constexpr (std::is_same_v<T, Direction>) {
            if (kind != FeatureKind::numeric)
              errs.push_back("Direction requires numeric feature, '" + f.feature + "' is " +
                             std::string(to_string(kind)));
          } else if constexpr (std::is_same_v<T, Threshold>) {
            if (kind == FeatureKind::categorical)
              errs.push_back("Threshold on categorical feature '" + f.feature + "'");
            if (!std::isfinite(f.value)) errs.push_back("Threshold value must be finite");
          } else if constexpr (std::is_same_v<T, CategoryEquals>) {
            if (kind != FeatureKind::categorical) {
              errs.push_back("CategoryEquals on non-categorical feature '" + f.feature + "'");
            } else {
              const auto& cats = d.feature(*idx).categories;
              if (std::find(cats.begin(), cats.end(), f.category) == cats.end())
                errs.push_back("'" + f.category + "' is not a category of '" + f.feature + "'");
            }
          }
        }
      },
      form);
}

}  // namespace

std::vector<std::string> validate_event(const ExplanationEvent& e, const Dataset& d,
                                        const ValidationContext& ctx) {
  std::vector<std::string> errs;
  std::visit(
      [&](const auto& k) {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, AddLabel>) {
          check_row(d, k.example.row_id, ctx, false, errs);
          check_confidence(k.example.confidence, errs);
          if (ctx.classes && !ctx.classes->count(k.example.label))
            errs.push_back("label " + std::to_string(k.example.label) + " outside the declared class set");
          if (k.example.label < 0) errs.push_back("labels are non-negative class ids");
        } else if constexpr (std::is_same_v<T, AddConstraint>) {
          const auto& c = k.constraint;
          check_confidence(c.confidence, errs);
          check_form(c.form, d, errs);
          const bool divergence = std::holds_alternative<Divergence>(c.form);
          if (const auto* local = std::get_if<LocalScope>(&c.scope)) {
            if (divergence) errs.push_back("Divergence form requires a Differential scope");
            check_row(d, local->row, ctx, true, errs);
            auto r = d.index_of(local->row);
            if (errs.empty() && r && (std::holds_alternative<Threshold>(c.form) ||
                                      std::holds_alternative<CategoryEquals>(c.form))) {
              const auto f = d.require_feature(form_feature(c.form));
              const double v = d.at(*r, f);
              if (!is_missing(v) && !satisfies(d, f, v, c.form))
                errs.push_back("row " + std::to_string(local->row) + " value " + d.format_value(f, v) +
                               " violates its own constraint on '" + form_feature(c.form) + "'");
            }
          } else if (const auto* diff = std::get_if<DifferentialScope>(&c.scope)) {
            if (!divergence && !std::holds_alternative<Presence>(c.form) &&
                !std::holds_alternative<Direction>(c.form))
              errs.push_back("Differential scope takes Divergence, Presence or Direction forms");
            check_row(d, diff->row_a, ctx, true, errs);
            check_row(d, diff->row_b, ctx, true, errs);
            auto la = ctx.labels.find(diff->row_a);
            auto lb = ctx.labels.find(diff->row_b);
            if (la != ctx.labels.end() && lb != ctx.labels.end() && la->second == lb->second)
              errs.push_back("Differential rows " + std::to_string(diff->row_a) + " and " +
                             std::to_string(diff->row_b) + " share label " + std::to_string(la->second));
          } else if (divergence) {
            errs.push_back("Divergence form requires a Differential scope");
          }
        } else if constexpr (std::is_same_v<T, AddImportance>) {
          check_row(d, k.profile.row_id, ctx, false, errs);
          check_confidence(k.profile.confidence, errs);
          bool nonzero = false;
          for (const auto& [name, w] : k.profile.weights) {
            check_feature(d, name, errs);
            if (!(w >= -1.0 && w <= 1.0)) errs.push_back("importance for '" + name + "' outside [-1, 1]");
            nonzero = nonzero || w != 0.0;
          }
          if (!nonzero) errs.push_back("importance profile has no nonzero weight");
        } else if constexpr (std::is_same_v<T, AddIntermediate>) {
          const auto& a = k.annotation;
          if (a.name.empty()) errs.push_back("intermediate feature needs a name");
          if (d.feature_index(a.name)) errs.push_back("'" + a.name + "' already names a schema feature");
          check_row(d, a.row_id, ctx, false, errs);
          if (const auto* v = std::get_if<double>(&a.value); v && !std::isfinite(*v))
            errs.push_back("intermediate value must be finite");
          for (const auto& f : a.contributing_features) check_feature(d, f, errs);
        } else if constexpr (std::is_same_v<T, RateExplanation>) {
          if (k.explanation_id.empty()) errs.push_back("rating needs an explanation_id");
          if (k.scale == RatingScale::signed_unit && (k.rating < -1 || k.rating > 1))
            errs.push_back("signed rating must be -1, 0 or +1");
          if (k.scale == RatingScale::stars && (k.rating < 1 || k.rating > 5))
            errs.push_back("star rating must be 1..5");
        } else if constexpr (std::is_same_v<T, RejectRule>) {
          if (k.rule_id.empty()) errs.push_back("RejectRule needs a rule_id");
        } else if constexpr (std::is_same_v<T, EditRule>) {
          if (k.rule_id.empty()) errs.push_back("EditRule needs a rule_id");
          if (!std::holds_alternative<Threshold>(k.edit.predicate) &&
              !std::holds_alternative<CategoryEquals>(k.edit.predicate))
            errs.push_back("rule predicates are Threshold or CategoryEquals");
          else
            check_form(k.edit.predicate, d, errs);
        } else if constexpr (std::is_same_v<T, Retract>) {
          if (!ctx.known_events.count(k.target))
            errs.push_back("Retract targets unknown event " + std::to_string(k.target));
          else if (e.event_id != 0 && k.target >= e.event_id)
            errs.push_back("Retract must target an earlier event");
        }
      },
      e.kind);
  return errs;
}

// ---- compile ----------------------------------------------------------------

std::set<EventId> active_event_ids(const std::vector<ExplanationEvent>& events) {
  std::set<EventId> retracted;
  std::set<EventId> active;
  for (auto it = events.rbegin(); it != events.rend(); ++it) {
    if (retracted.count(it->event_id)) continue;
    if (const auto* r = std::get_if<Retract>(&it->kind)) retracted.insert(r->target);
    else active.insert(it->event_id);
  }
  return active;
}

bool CompiledConstraints::has_constraints() const {
  return !per_row.empty() || allow_list || !global.empty() || !divergences.empty() || !profiles.empty() ||
         !intermediates.empty() || !edits.empty() || !rejected_rules.empty();
}

namespace {

std::string describe(const std::vector<ConstraintConflict>& conflicts) {
  std::string msg = "contradictory constraints:";
  for (const auto& c : conflicts) {
    msg += " [events " + std::to_string(c.first) + " and " + std::to_string(c.second) + " on '" + c.feature + "'";
    if (c.row >= 0) msg += " row " + std::to_string(c.row);
    msg += "]";
  }
  return msg;
}

// Feasible region of a conjunction of numeric comparisons.
struct Region {
  double lo = -std::numeric_limits<double>::infinity();
  bool lo_closed = false;
  double hi = std::numeric_limits<double>::infinity();
  bool hi_closed = false;
  std::vector<double> excluded;

  void add(CmpOp op, double v) {
    auto raise_lo = [&](double x, bool closed) {
      if (x > lo || (x == lo && !closed)) {
        lo = x;
        lo_closed = closed;
      }
    };
    auto lower_hi = [&](double x, bool closed) {
      if (x < hi || (x == hi && !closed)) {
        hi = x;
        hi_closed = closed;
      }
    };
    switch (op) {
      case CmpOp::gt: raise_lo(v, false); break;
      case CmpOp::ge: raise_lo(v, true); break;
      case CmpOp::lt: lower_hi(v, false); break;
      case CmpOp::le: lower_hi(v, true); break;
      case CmpOp::eq: raise_lo(v, true); lower_hi(v, true); break;
      case CmpOp::ne: excluded.push_back(v); break;
    }
  }

  bool feasible() const {
    if (lo < hi) return true;
    if (lo > hi) return false;
    return lo_closed && hi_closed && std::find(excluded.begin(), excluded.end(), lo) == excluded.end();
  }
};

bool jointly_feasible(const std::vector<const ConstraintForm*>& forms) {
  Region region;
  std::optional<std::string> equal_cat;
  std::set<std::string> excluded_cats;
  bool high = false, low = false;
  for (const auto* f : forms) {
    if (const auto* t = std::get_if<Threshold>(f)) region.add(t->op, t->value);
    if (const auto* c = std::get_if<CategoryEquals>(f)) {
      if (c->negated) {
        excluded_cats.insert(c->category);
      } else {
        if (equal_cat && *equal_cat != c->category) return false;
        equal_cat = c->category;
      }
    }
    if (const auto* dir = std::get_if<Direction>(f)) (dir->side == Side::high ? high : low) = true;
  }
  if (equal_cat && excluded_cats.count(*equal_cat)) return false;
  if (high && low) return false;
  return region.feasible();
}

void find_conflicts(RowId row, const std::string& feature, const std::vector<std::pair<const ConstraintForm*, EventId>>& items,
                    std::vector<ConstraintConflict>& out) {
  bool any = false;
  for (std::size_t i = 0; i < items.size(); ++i)
    for (std::size_t j = i + 1; j < items.size(); ++j)
      if (!jointly_feasible({items[i].first, items[j].first})) {
        out.push_back({row, feature, items[i].second, items[j].second});
        any = true;
      }
  if (!any && items.size() > 2) {
    std::vector<const ConstraintForm*> all;
    for (const auto& it : items) all.push_back(it.first);
    if (!jointly_feasible(all)) out.push_back({row, feature, items.front().second, items.back().second});
  }
}

}  // namespace

CompileError::CompileError(std::vector<ConstraintConflict> conflicts)
    : Error(describe(conflicts)), conflicts_(std::move(conflicts)) {}

CompiledConstraints compile(const std::vector<ExplanationEvent>& events, const Dataset& d) {
  const auto active = active_event_ids(events);
  CompiledConstraints cc;
  std::map<RowId, LabeledExample> labels;

  for (const auto& e : events) {
    if (!active.count(e.event_id)) continue;
    cc.active_events.push_back(e.event_id);
    std::visit(
        [&](const auto& k) {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, AddLabel>) {
            labels[k.example.row_id] = k.example;
            cc.label_events[k.example.row_id] = e.event_id;
          } else if constexpr (std::is_same_v<T, AddConstraint>) {
            const auto& c = k.constraint;
            if (std::holds_alternative<GlobalScope>(c.scope)) {
              if (const auto* p = std::get_if<Presence>(&c.form)) {
                if (!cc.allow_list) cc.allow_list.emplace();
                cc.allow_list->insert(p->feature);
              } else {
                cc.global.push_back({c.form, c.confidence, e.event_id});
              }
            } else if (const auto* local = std::get_if<LocalScope>(&c.scope)) {
              cc.per_row[local->row].push_back({local->row, c.form, c.confidence, e.event_id});
              if (const auto* dir = std::get_if<Direction>(&c.form))
                cc.sides.push_back({local->row, dir->feature, dir->side, c.confidence, e.event_id});
            } else if (const auto* diff = std::get_if<DifferentialScope>(&c.scope)) {
              DivergenceRequirement req{diff->row_a, diff->row_b, {}, c.confidence, e.event_id};
              if (const auto* dv = std::get_if<Divergence>(&c.form)) req.features = dv->features;
              else if (const auto* p = std::get_if<Presence>(&c.form)) req.features = {{p->feature, std::nullopt}};
              else if (const auto* dir = std::get_if<Direction>(&c.form)) req.features = {{dir->feature, dir->side}};
              cc.divergences.push_back(std::move(req));
            }
          } else if constexpr (std::is_same_v<T, AddImportance>) {
            cc.profiles[k.profile.row_id] = k.profile;
          } else if constexpr (std::is_same_v<T, AddIntermediate>) {
            auto it = std::find_if(cc.intermediates.begin(), cc.intermediates.end(), [&](const auto& a) {
              return a.name == k.annotation.name && a.row_id == k.annotation.row_id;
            });
            if (it != cc.intermediates.end()) *it = k.annotation;
            else cc.intermediates.push_back(k.annotation);
          } else if constexpr (std::is_same_v<T, RateExplanation>) {
            const double score =
                k.scale == RatingScale::stars ? (static_cast<double>(k.rating) - 3.0) / 2.0 : static_cast<double>(k.rating);
            cc.ratings.push_back({k.explanation_id, score, e.event_id});
          } else if constexpr (std::is_same_v<T, RejectRule>) {
            cc.rejected_rules.push_back(k.rule_id);
          } else if constexpr (std::is_same_v<T, EditRule>) {
            cc.edits.push_back({k.rule_id, k.edit, e.event_id});
          }
        },
        e.kind);
  }

  for (const auto& [row, ex] : labels) cc.labels.push_back(ex);
  // Rows whose label was retracted keep no label event.
  for (auto it = cc.label_events.begin(); it != cc.label_events.end();)
    it = labels.count(it->first) ? std::next(it) : cc.label_events.erase(it);

  if (!cc.profiles.empty()) {
    std::map<std::string, double> weighted;
    double total_conf = 0;
    for (const auto& [row, p] : cc.profiles) {
      total_conf += p.confidence;
      for (const auto& [f, w] : p.weights) weighted[f] += p.confidence * w;
    }
    for (const auto& [f, sum] : weighted) cc.importance[f] = sum / total_conf;
  }

  std::vector<ConstraintConflict> conflicts;
  for (const auto& [row, list] : cc.per_row) {
    std::map<std::string, std::vector<std::pair<const ConstraintForm*, EventId>>> by_feature;
    for (const auto& rc : list) by_feature[rc.feature()].emplace_back(&rc.form, rc.source);
    for (const auto& [f, items] : by_feature) find_conflicts(row, f, items, conflicts);
  }
  {
    std::map<std::string, std::vector<std::pair<const ConstraintForm*, EventId>>> by_feature;
    for (const auto& gc : cc.global) by_feature[gc.feature()].emplace_back(&gc.form, gc.source);
    for (const auto& [f, items] : by_feature) find_conflicts(-1, f, items, conflicts);
  }
  if (!conflicts.empty()) throw CompileError(std::move(conflicts));
  (void)d;
  return cc;
}

std::map<std::string, double> normalize_importance(const std::map<std::string, double>& raw) {
  double max_abs = 0;
  for (const auto& [f, w] : raw) max_abs = std::max(max_abs, std::abs(w));
  if (!(max_abs > 0.0)) throw PreconditionError("importance profile is all zero");
  std::map<std::string, double> out;
  for (const auto& [f, w] : raw) out[f] = w / max_abs;
  return out;
}

std::vector<std::size_t> cluster_importance_profiles(const std::vector<ImportanceProfile>& profiles,
                                                     std::size_t k, std::uint64_t seed) {
  if (profiles.empty()) throw PreconditionError("no importance profiles to cluster");
  if (k < 1 || k > profiles.size()) throw PreconditionError("cluster count must lie in [1, |profiles|]");

  std::set<std::string> universe;
  for (const auto& p : profiles)
    for (const auto& [f, w] : p.weights) universe.insert(f);
  const std::vector<std::string> dims(universe.begin(), universe.end());
  std::vector<std::vector<double>> points(profiles.size(), std::vector<double>(dims.size(), 0.0));
  for (std::size_t i = 0; i < profiles.size(); ++i)
    for (std::size_t j = 0; j < dims.size(); ++j)
      if (auto it = profiles[i].weights.find(dims[j]); it != profiles[i].weights.end()) points[i][j] = it->second;

  std::vector<std::size_t> order(profiles.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<double>> centroids;
  for (std::size_t c = 0; c < k; ++c) centroids.push_back(points[order[c]]);

  auto sq_dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  };

  std::vector<std::size_t> assign(points.size(), SIZE_MAX);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      std::size_t best = 0;
      double best_d = sq_dist(points[i], centroids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double dd = sq_dist(points[i], centroids[c]);
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> sum(dims.size(), 0.0);
      std::size_t n = 0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        if (assign[i] != c) continue;
        for (std::size_t j = 0; j < dims.size(); ++j) sum[j] += points[i][j];
        ++n;
      }
      if (n == 0) continue;  // empty cluster keeps its centroid
      for (auto& s : sum) s /= static_cast<double>(n);
      centroids[c] = std::move(sum);
    }
  }
  return assign;
}

}  // namespace talkback
