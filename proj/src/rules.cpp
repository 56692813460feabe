#include "talkback/rules.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

#include "talkback/rng.hpp"

namespace talkback {

bool ConjunctiveRule::matches(std::span<const double> row) const {
  for (const auto& p : predicates)
    if (!p.matches(row[p.feature])) return false;
  return true;
}

bool RuleSet::matches(std::span<const double> row) const { return first_match(row).has_value(); }

std::optional<std::size_t> RuleSet::first_match(std::span<const double> row) const {
  for (std::size_t i = 0; i < rules.size(); ++i)
    if (rules[i].matches(row)) return i;
  return std::nullopt;
}

std::size_t RuleSet::predicate_count() const {
  std::size_t n = 0;
  for (const auto& r : rules) n += r.predicates.size();
  return n;
}

namespace {

ConjunctiveRule sorted_rule(const ConjunctiveRule& r) {
  std::vector<std::pair<Predicate, bool>> items;
  for (std::size_t i = 0; i < r.predicates.size(); ++i) items.emplace_back(r.predicates[i], r.frozen.count(i) > 0);
  std::sort(items.begin(), items.end());
  ConjunctiveRule out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    out.predicates.push_back(items[i].first);
    if (items[i].second) out.frozen.insert(i);
  }
  return out;
}

bool rule_less(const ConjunctiveRule& a, const ConjunctiveRule& b) {
  if (a.predicates != b.predicates) return a.predicates < b.predicates;
  return a.frozen < b.frozen;
}

}  // namespace

RuleSet RuleSet::canonical_form() const {
  RuleSet out{{}, match_class, other_class};
  for (const auto& r : rules) out.rules.push_back(sorted_rule(r));
  std::sort(out.rules.begin(), out.rules.end(), rule_less);
  out.rules.erase(std::unique(out.rules.begin(), out.rules.end()), out.rules.end());
  return out;
}

void GAConfig::validate() const {
  if (population < 2) throw ConfigError("GA population must be at least 2");
  if (tournament < 1) throw ConfigError("tournament size must be at least 1");
  if (crossover_rate < 0 || crossover_rate > 1 || mutation_rate < 0 || mutation_rate > 1)
    throw ConfigError("GA rates must lie in [0, 1]");
  if (max_rules < 1 || max_predicates < 1) throw ConfigError("rule size limits must be at least 1");
  if (parsimony < 0 || constraint_weight < 0) throw ConfigError("fitness weights must be >= 0");
}

// ---- predicates and constraint forms ----------------------------------------

ConstraintForm predicate_to_form(const Dataset& d, const Predicate& p) {
  const auto& fs = d.feature(p.feature);
  if (fs.kind == FeatureKind::categorical)
    return CategoryEquals{fs.name, fs.categories.at(static_cast<std::size_t>(p.value)), p.op == CmpOp::ne};
  return Threshold{fs.name, p.op, p.value};
}

Predicate predicate_from_form(const Dataset& d, const ConstraintForm& form) {
  std::vector<std::string> errs;
  if (const auto* th = std::get_if<Threshold>(&form)) {
    auto f = d.feature_index(th->feature);
    if (!f) throw ValidationError({"unknown feature '" + th->feature + "'"});
    const auto& fs = d.feature(*f);
    if (fs.kind == FeatureKind::categorical)
      throw ValidationError({"Threshold on categorical feature '" + fs.name + "'"});
    if (!std::isfinite(th->value)) throw ValidationError({"threshold must be finite"});
    if (fs.kind == FeatureKind::boolean) {
      if ((th->value != 0 && th->value != 1) || (th->op != CmpOp::eq && th->op != CmpOp::ne))
        throw ValidationError({"boolean predicate on '" + fs.name + "' must be = or != against 0 or 1"});
      const double v = th->op == CmpOp::eq ? th->value : 1.0 - th->value;
      return {*f, CmpOp::eq, v};
    }
    return {*f, th->op, th->value};
  }
  if (const auto* ce = std::get_if<CategoryEquals>(&form)) {
    auto f = d.feature_index(ce->feature);
    if (!f) throw ValidationError({"unknown feature '" + ce->feature + "'"});
    const auto& fs = d.feature(*f);
    if (fs.kind != FeatureKind::categorical)
      throw ValidationError({"CategoryEquals on non-categorical feature '" + fs.name + "'"});
    auto it = std::find(fs.categories.begin(), fs.categories.end(), ce->category);
    if (it == fs.categories.end())
      throw ValidationError({"'" + ce->category + "' is not a category of '" + fs.name + "'"});
    return {*f, ce->negated ? CmpOp::ne : CmpOp::eq, static_cast<double>(it - fs.categories.begin())};
  }
  throw ValidationError({"rule predicates must be Threshold or CategoryEquals"});
}

namespace {

bool is_lower(CmpOp op) { return op == CmpOp::gt || op == CmpOp::ge; }
bool is_upper(CmpOp op) { return op == CmpOp::lt || op == CmpOp::le; }

// Whether every x with `x pop pv` also has `x cop cv`.
bool implies(CmpOp pop, double pv, CmpOp cop, double cv) {
  if (pop == CmpOp::eq) return compare(pv, cop, cv);
  switch (cop) {
    case CmpOp::gt: return (pop == CmpOp::gt && pv >= cv) || (pop == CmpOp::ge && pv > cv);
    case CmpOp::ge: return (pop == CmpOp::gt || pop == CmpOp::ge) && pv >= cv;
    case CmpOp::lt: return (pop == CmpOp::lt && pv <= cv) || (pop == CmpOp::le && pv < cv);
    case CmpOp::le: return (pop == CmpOp::lt || pop == CmpOp::le) && pv <= cv;
    case CmpOp::eq: return false;
    case CmpOp::ne:
      switch (pop) {
        case CmpOp::ne: return pv == cv;
        case CmpOp::gt: return pv >= cv;
        case CmpOp::ge: return pv > cv;
        case CmpOp::lt: return pv <= cv;
        case CmpOp::le: return pv < cv;
        default: return false;
      }
  }
  return false;
}

}  // namespace

bool predicate_consistent(const Dataset& d, const Predicate& p, const ConstraintForm& form) {
  if (std::holds_alternative<Divergence>(form)) return false;
  if (d.feature(p.feature).name != form_feature(form)) return false;
  if (std::holds_alternative<Presence>(form)) return true;
  if (const auto* dir = std::get_if<Direction>(&form)) return dir->side == Side::high ? is_lower(p.op) : is_upper(p.op);
  if (const auto* th = std::get_if<Threshold>(&form)) {
    double cv = th->value;
    CmpOp cop = th->op;
    if (d.feature(p.feature).kind == FeatureKind::boolean && cop == CmpOp::ne) cop = CmpOp::eq, cv = 1.0 - cv;
    return implies(p.op, p.value, cop, cv);
  }
  const auto& ce = std::get<CategoryEquals>(form);
  const auto& cats = d.feature(p.feature).categories;
  const auto idx = static_cast<double>(std::find(cats.begin(), cats.end(), ce.category) - cats.begin());
  if (p.op == CmpOp::eq) return ce.negated ? p.value != idx : p.value == idx;
  if (p.op == CmpOp::ne) return ce.negated && p.value == idx;
  return false;
}

bool rule_well_formed(const ConjunctiveRule& r, const std::vector<FeatureSchema>& schema) {
  if (r.predicates.empty()) return false;
  for (auto i : r.frozen)
    if (i >= r.predicates.size()) return false;
  std::map<std::size_t, std::vector<const Predicate*>> by_feature;
  for (const auto& p : r.predicates) {
    if (p.feature >= schema.size() || !std::isfinite(p.value)) return false;
    by_feature[p.feature].push_back(&p);
  }
  for (const auto& [f, ps] : by_feature) {
    if (schema[f].kind != FeatureKind::numeric) {
      if (ps.size() > 1) return false;
      continue;
    }
    const Predicate* lo = nullptr;
    const Predicate* hi = nullptr;
    for (const auto* p : ps) {
      if (is_lower(p->op)) {
        if (lo) return false;
        lo = p;
      } else if (is_upper(p->op)) {
        if (hi) return false;
        hi = p;
      } else if (ps.size() > 1) {
        return false;
      }
    }
    if (lo && hi) {
      if (lo->value > hi->value) return false;
      if (lo->value == hi->value && !(lo->op == CmpOp::ge && hi->op == CmpOp::le)) return false;
    }
  }
  return true;
}

std::vector<bool> extension(const RuleSet& rs, const Dataset& d) {
  std::vector<bool> out(d.num_rows());
  for (std::size_t r = 0; r < d.num_rows(); ++r) out[r] = rs.matches(d.row(r));
  return out;
}

// ---- fitness ----------------------------------------------------------------

namespace {

struct LabeledRow {
  std::size_t row;
  bool positive;
  double confidence;
  RowId id;
};

std::vector<LabeledRow> labeled_rows(const Dataset& d, const std::vector<LabeledExample>& labels, ClassId positive) {
  std::vector<LabeledRow> out;
  for (const auto& l : labels) out.push_back({d.require_row(l.row_id), l.label == positive, l.confidence, l.row_id});
  return out;
}

struct ConstraintItem {
  enum Kind { local, global } kind;
  std::size_t row = 0;  // local only
  ConstraintForm form;
  double confidence = 1.0;
  EventId source = 0;
};

std::vector<ConstraintItem> applicable_constraints(const Dataset& d, const std::vector<LabeledRow>& rows,
                                                   const CompiledConstraints& cc) {
  std::vector<ConstraintItem> out;
  std::map<RowId, const LabeledRow*> by_id;
  for (const auto& r : rows) by_id[r.id] = &r;
  for (const auto& [row, list] : cc.per_row) {
    auto it = by_id.find(row);
    if (it == by_id.end() || !it->second->positive) continue;
    for (const auto& rc : list)
      if (d.feature_index(rc.feature()))
        out.push_back({ConstraintItem::local, it->second->row, rc.form, rc.confidence, rc.source});
  }
  for (const auto& g : cc.global)
    if (d.feature_index(g.feature())) out.push_back({ConstraintItem::global, 0, g.form, g.confidence, g.source});
  return out;
}

bool constraint_met(const Dataset& d, const RuleSet& rs, const ConstraintItem& c) {
  auto rule_has = [&](const ConjunctiveRule& r) {
    return std::any_of(r.predicates.begin(), r.predicates.end(),
                       [&](const Predicate& p) { return predicate_consistent(d, p, c.form); });
  };
  if (c.kind == ConstraintItem::global) return std::all_of(rs.rules.begin(), rs.rules.end(), rule_has);
  const auto row = d.row(c.row);
  return std::any_of(rs.rules.begin(), rs.rules.end(),
                     [&](const ConjunctiveRule& r) { return r.matches(row) && rule_has(r); });
}

FitnessBreakdown score(const RuleSet& rs, const Dataset& d, const std::vector<bool>& ext,
                       const std::vector<LabeledRow>& rows, const std::vector<ConstraintItem>& constraints,
                       const GAConfig& cfg) {
  FitnessBreakdown fb;
  double pos = 0, pos_hit = 0, neg = 0, neg_hit = 0;
  for (const auto& r : rows) {
    if (r.positive) {
      pos += r.confidence;
      if (ext[r.row]) pos_hit += r.confidence;
    } else {
      neg += r.confidence;
      if (!ext[r.row]) neg_hit += r.confidence;
    }
  }
  const double rp = pos > 0 ? pos_hit / pos : 0.0;
  const double rn = neg > 0 ? neg_hit / neg : 0.0;
  fb.accuracy = (rp + rn) / 2.0;
  double total_conf = 0, met_conf = 0;
  for (const auto& c : constraints) {
    total_conf += c.confidence;
    if (constraint_met(d, rs, c)) met_conf += c.confidence;
    else fb.unsatisfied.push_back(c.source);
  }
  fb.constraint = total_conf > 0 ? cfg.constraint_weight * met_conf / total_conf : 0.0;
  fb.parsimony = cfg.parsimony * static_cast<double>(rs.predicate_count());
  fb.total = fb.accuracy + fb.constraint - fb.parsimony;
  return fb;
}

}  // namespace

FitnessBreakdown fitness(const RuleSet& rs, const Dataset& d, const std::vector<LabeledExample>& labels,
                         const CompiledConstraints& cc, const GAConfig& cfg) {
  const auto rows = labeled_rows(d, labels, cfg.positive_class);
  return score(rs, d, extension(rs, d), rows, applicable_constraints(d, rows, cc), cfg);
}

// ---- genetic search ---------------------------------------------------------

namespace {

constexpr double kTieEps = 1e-12;

double jaccard(const std::vector<bool>& a, const std::vector<bool>& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::string key_of(const RuleSet& rs) {
  std::string k;
  for (const auto& r : rs.rules) {
    for (std::size_t i = 0; i < r.predicates.size(); ++i) {
      const auto& p = r.predicates[i];
      k += std::to_string(p.feature);
      k += static_cast<char>('a' + static_cast<int>(p.op));
      k += format_number(p.value);
      if (r.frozen.count(i)) k += '*';
      k += ',';
    }
    k += '|';
  }
  return k;
}

struct Evaluated {
  RuleSet rs;
  FitnessBreakdown fb;
  bool tabu = false;
  bool disfavored = false;
};

bool better(const Evaluated& a, const Evaluated& b) {
  if (a.tabu != b.tabu) return !a.tabu;
  if (std::abs(a.fb.total - b.fb.total) > kTieEps) return a.fb.total > b.fb.total;
  return !a.disfavored && b.disfavored;
}

class Search {
 public:
  Search(const Dataset& d, const std::vector<LabeledExample>& labels, const CompiledConstraints& cc,
         const GAConfig& cfg, const RuleFitOptions& opts)
      : d_(d), cfg_(cfg), opts_(opts), rng_(cfg.seed) {
    rows_ = labeled_rows(d, labels, cfg.positive_class);
    constraints_ = applicable_constraints(d, rows_, cc);
    for (const auto& r : rows_) (r.positive ? positives_ : negatives_).push_back(r.row);

    allowed_.assign(d.num_features(), !cc.allow_list.has_value());
    if (cc.allow_list) {
      if (cc.allow_list->empty()) throw PreconditionError("global allow-list is empty");
      for (const auto& name : *cc.allow_list)
        if (auto f = d.feature_index(name)) allowed_[*f] = true;
    }
    for (std::size_t f = 0; f < d.num_features(); ++f)
      if (allowed_[f]) allowed_list_.push_back(f);
    if (allowed_list_.empty()) throw PreconditionError("allow-list names no feature of the dataset");

    cuts_.resize(d.num_features());
    stdev_.resize(d.num_features(), 0.0);
    for (auto f : allowed_list_) {
      if (d.feature(f).kind != FeatureKind::numeric) continue;
      std::vector<double> vals;
      for (std::size_t r = 0; r < d.num_rows(); ++r)
        if (!is_missing(d.at(r, f))) vals.push_back(d.at(r, f));
      std::sort(vals.begin(), vals.end());
      double mean = 0;
      for (double v : vals) mean += v;
      if (!vals.empty()) mean /= static_cast<double>(vals.size());
      double ss = 0;
      for (double v : vals) ss += (v - mean) * (v - mean);
      stdev_[f] = vals.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(vals.size()));
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      for (std::size_t i = 0; i + 1 < vals.size(); ++i) cuts_[f].push_back(vals[i] + (vals[i + 1] - vals[i]) / 2.0);
    }
    for (const auto& t : opts.tabu) tabu_ext_.push_back(extension(t, d));
    for (const auto& t : opts.disfavored) disfavored_ext_.push_back(extension(t, d));
  }

  RuleFitResult run() {
    std::vector<Evaluated> pop;
    for (const auto& s : opts_.seeds) {
      if (pop.size() >= cfg_.population) break;
      pop.push_back(evaluate(prepare(s)));
    }
    while (pop.size() < cfg_.population) pop.push_back(evaluate(prepare(random_individual())));

    sort_population(pop);
    Evaluated best = pop.front();
    std::size_t stagnant = 0;
    std::size_t gen = 0;
    const std::size_t elite = std::min<std::size_t>(2, pop.size());
    for (; gen < cfg_.max_generations && stagnant < cfg_.stagnation_limit; ++gen) {
      std::vector<Evaluated> next(pop.begin(), pop.begin() + static_cast<std::ptrdiff_t>(elite));
      while (next.size() < cfg_.population) {
        const auto& a = tournament(pop);
        RuleSet child = a.rs;
        if (rng_.bernoulli(cfg_.crossover_rate)) child = crossover(a.rs, tournament(pop).rs);
        mutate(child);
        next.push_back(evaluate(prepare(child)));
      }
      pop = std::move(next);
      sort_population(pop);
      if (better(pop.front(), best)) {
        best = pop.front();
        stagnant = 0;
      } else {
        ++stagnant;
      }
    }

    RuleFitResult result;
    result.generations = gen;
    result.rules = best.rs;
    result.fitness = best.fb;
    std::set<std::string> seen;
    for (const auto& e : pop) {
      if (result.elites.size() >= 10) break;
      if (e.tabu || !seen.insert(key_of(e.rs)).second) continue;
      result.elites.push_back(e.rs);
    }
    if (!opts_.tabu.empty() && (best.tabu || best.fb.total <= 0.5))
      throw NoAlternativeError("no rule set outside the rejected ones beats the 0.5 baseline");
    if (best.fb.accuracy <= 0.5)
      result.warnings.push_back("no rule over the permitted features beats chance; the allow-list may exclude every "
                                "discriminating feature");
    if (!best.fb.unsatisfied.empty())
      result.warnings.push_back(std::to_string(best.fb.unsatisfied.size()) + " constraint(s) unsatisfied");
    return result;
  }

 private:
  void sort_population(std::vector<Evaluated>& pop) const {
    std::stable_sort(pop.begin(), pop.end(), better);
  }

  const Evaluated& tournament(const std::vector<Evaluated>& pop) {
    const Evaluated* best = &pop[rng_.index(pop.size())];
    for (std::size_t i = 1; i < cfg_.tournament; ++i) {
      const Evaluated* c = &pop[rng_.index(pop.size())];
      if (better(*c, *best)) best = c;
    }
    return *best;
  }

  Evaluated evaluate(const RuleSet& rs) {
    const auto key = key_of(rs);
    if (auto it = cache_.find(key); it != cache_.end()) return {rs, it->second.fb, it->second.tabu, it->second.disfavored};
    const auto ext = extension(rs, d_);
    Evaluated e{rs, score(rs, d_, ext, rows_, constraints_, cfg_), false, false};
    for (const auto& t : tabu_ext_)
      if (t == ext) e.tabu = true;
    for (const auto& t : disfavored_ext_)
      if (jaccard(t, ext) > 0.95) e.disfavored = true;
    cache_.emplace(key, CacheEntry{e.fb, e.tabu, e.disfavored});
    return e;
  }

  // Canonical, well-formed, anchors present, size limits respected.
  RuleSet prepare(RuleSet rs) {
    rs.match_class = cfg_.positive_class;
    rs.other_class = other_class_;
    std::vector<ConjunctiveRule> kept;
    for (auto& r : rs.rules) {
      if (r.predicates.size() > cfg_.max_predicates && r.frozen.empty()) r.predicates.resize(cfg_.max_predicates);
      bool ok = rule_well_formed(r, d_.schema());
      for (const auto& p : r.predicates) ok = ok && allowed_[p.feature];
      if (ok || !r.frozen.empty()) kept.push_back(std::move(r));
    }
    rs.rules = std::move(kept);
    for (const auto& anchor : opts_.anchors) {
      if (has_anchor(rs, anchor)) continue;
      std::size_t slot = rs.rules.size();
      if (slot >= cfg_.max_rules) {
        slot = rs.rules.size() - 1;
        while (slot > 0 && !rs.rules[slot].frozen.empty()) --slot;
        if (!rs.rules[slot].frozen.empty()) slot = rs.rules.size();
      }
      if (slot == rs.rules.size()) rs.rules.push_back(anchor);
      else rs.rules[slot] = anchor;
    }
    if (rs.rules.empty()) rs = random_individual();
    return rs.canonical_form();
  }

  static bool has_anchor(const RuleSet& rs, const ConjunctiveRule& anchor) {
    for (const auto& r : rs.rules) {
      bool all = true;
      for (auto i : anchor.frozen) {
        const auto& p = anchor.predicates[i];
        bool found = false;
        for (auto j : r.frozen) found = found || r.predicates[j] == p;
        all = all && found;
      }
      if (all) return true;
    }
    return false;
  }

  double snap(std::size_t f, double t) const {
    const auto& cuts = cuts_[f];
    if (cuts.empty()) return t;
    auto it = std::lower_bound(cuts.begin(), cuts.end(), t);
    if (it == cuts.end()) return cuts.back();
    if (it == cuts.begin()) return *it;
    return (t - *(it - 1) <= *it - t) ? *(it - 1) : *it;
  }

  std::optional<Predicate> predicate_for(std::size_t row, std::size_t f) {
    const auto& fs = d_.feature(f);
    const double x = d_.at(row, f);
    if (is_missing(x)) return std::nullopt;
    switch (fs.kind) {
      case FeatureKind::boolean: return Predicate{f, CmpOp::eq, x};
      case FeatureKind::categorical:
        if (fs.categories.size() > 1 && rng_.bernoulli(0.3)) {
          double other = static_cast<double>(rng_.index(fs.categories.size() - 1));
          if (other >= x) other += 1;
          return Predicate{f, CmpOp::ne, other};
        }
        return Predicate{f, CmpOp::eq, x};
      case FeatureKind::numeric: {
        if (cuts_[f].empty()) return std::nullopt;
        double t = cuts_[f][rng_.index(cuts_[f].size())];
        if (!negatives_.empty()) {
          const double z = d_.at(negatives_[rng_.index(negatives_.size())], f);
          if (!is_missing(z) && z != x) t = snap(f, x + (z - x) / 2.0);
        }
        if (x > t) return Predicate{f, CmpOp::gt, t};
        return Predicate{f, CmpOp::le, t};
      }
    }
    return std::nullopt;
  }

  ConjunctiveRule random_rule(std::size_t anchor_row) {
    ConjunctiveRule r;
    const std::size_t n = 1 + rng_.index(std::min<std::size_t>(2, cfg_.max_predicates));
    for (std::size_t tries = 0; r.predicates.size() < n && tries < 10; ++tries) add_predicate(r, anchor_row);
    return r;
  }

  bool add_predicate(ConjunctiveRule& r, std::size_t anchor_row) {
    if (r.predicates.size() >= cfg_.max_predicates) return false;
    const auto f = allowed_list_[rng_.index(allowed_list_.size())];
    for (const auto& p : r.predicates)
      if (p.feature == f) return false;
    auto p = predicate_for(anchor_row, f);
    if (!p) return false;
    r.predicates.push_back(*p);
    return true;
  }

  RuleSet random_individual() {
    RuleSet rs;
    const std::size_t n = rng_.bernoulli(0.2) && cfg_.max_rules > 1 ? 2 : 1;
    while (rs.rules.size() < n) {
      auto r = random_rule(positives_[rng_.index(positives_.size())]);
      if (!r.predicates.empty()) rs.rules.push_back(std::move(r));
    }
    return rs;
  }

  // One-point: a prefix of a's rules, then a suffix of b's, without repeats.
  RuleSet crossover(const RuleSet& a, const RuleSet& b) {
    RuleSet child;
    const std::size_t i = rng_.index(a.rules.size() + 1);
    const std::size_t j = rng_.index(b.rules.size() + 1);
    child.rules.assign(a.rules.begin(), a.rules.begin() + static_cast<std::ptrdiff_t>(i));
    for (std::size_t k = j; k < b.rules.size() && child.rules.size() < cfg_.max_rules; ++k)
      if (std::find(child.rules.begin(), child.rules.end(), b.rules[k]) == child.rules.end()) child.rules.push_back(b.rules[k]);
    if (child.rules.empty()) return a;
    return child;
  }

  std::size_t anchor_row_for(const ConjunctiveRule& r) {
    std::vector<std::size_t> hits;
    for (auto p : positives_)
      if (r.matches(d_.row(p))) hits.push_back(p);
    const auto& pool = hits.empty() ? positives_ : hits;
    return pool[rng_.index(pool.size())];
  }

  void mutate_rule(ConjunctiveRule& r) {
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < r.predicates.size(); ++i)
      if (!r.frozen.count(i)) free.push_back(i);
    switch (rng_.index(4)) {
      case 0: add_predicate(r, anchor_row_for(r)); break;
      case 1: {
        if (free.empty() || r.predicates.size() < 2) break;
        const auto victim = free[rng_.index(free.size())];
        r.predicates.erase(r.predicates.begin() + static_cast<std::ptrdiff_t>(victim));
        std::set<std::size_t> shifted;
        for (auto k : r.frozen) shifted.insert(k > victim ? k - 1 : k);
        r.frozen = std::move(shifted);
        break;
      }
      case 2: {
        std::vector<std::size_t> numeric;
        for (auto i : free)
          if (d_.feature(r.predicates[i].feature).kind == FeatureKind::numeric) numeric.push_back(i);
        if (numeric.empty()) break;
        auto& p = r.predicates[numeric[rng_.index(numeric.size())]];
        const auto& cuts = cuts_[p.feature];
        if (cuts.empty()) break;
        if (rng_.bernoulli(0.5)) {
          p.value = snap(p.feature, p.value + rng_.normal() * 0.1 * stdev_[p.feature]);
        } else {
          // Step to a nearby cut point.
          const auto pos = static_cast<std::ptrdiff_t>(std::lower_bound(cuts.begin(), cuts.end(), p.value) - cuts.begin());
          const auto step = static_cast<std::ptrdiff_t>(1 + rng_.index(3));
          const auto target = std::clamp<std::ptrdiff_t>(rng_.bernoulli(0.5) ? pos + step : pos - step, 0,
                                                         static_cast<std::ptrdiff_t>(cuts.size()) - 1);
          p.value = cuts[static_cast<std::size_t>(target)];
        }
        break;
      }
      default: {
        std::vector<std::size_t> cats;
        for (auto i : free) {
          const auto& fs = d_.feature(r.predicates[i].feature);
          if (fs.kind == FeatureKind::categorical && fs.categories.size() > 1) cats.push_back(i);
          if (fs.kind == FeatureKind::boolean) cats.push_back(i);
        }
        if (cats.empty()) break;
        auto& p = r.predicates[cats[rng_.index(cats.size())]];
        const auto& fs = d_.feature(p.feature);
        if (fs.kind == FeatureKind::boolean) {
          p.value = 1.0 - p.value;
        } else {
          double other = static_cast<double>(rng_.index(fs.categories.size() - 1));
          if (other >= p.value) other += 1;
          p.value = other;
        }
        break;
      }
    }
  }

  void mutate(RuleSet& rs) {
    for (auto& r : rs.rules)
      if (rng_.bernoulli(cfg_.mutation_rate)) mutate_rule(r);
    if (!rng_.bernoulli(cfg_.mutation_rate)) return;
    if (rng_.bernoulli(0.5)) {
      if (rs.rules.size() >= cfg_.max_rules) return;
      std::vector<std::size_t> uncovered;
      for (auto p : positives_)
        if (!rs.matches(d_.row(p))) uncovered.push_back(p);
      const auto& pool = uncovered.empty() ? positives_ : uncovered;
      auto r = random_rule(pool[rng_.index(pool.size())]);
      if (!r.predicates.empty()) rs.rules.push_back(std::move(r));
    } else {
      std::vector<std::size_t> droppable;
      for (std::size_t i = 0; i < rs.rules.size(); ++i)
        if (rs.rules[i].frozen.empty()) droppable.push_back(i);
      if (rs.rules.size() < 2 || droppable.empty()) return;
      rs.rules.erase(rs.rules.begin() + static_cast<std::ptrdiff_t>(droppable[rng_.index(droppable.size())]));
    }
  }

 public:
  ClassId other_class_ = kUnwanted;

 private:
  struct CacheEntry {
    FitnessBreakdown fb;
    bool tabu;
    bool disfavored;
  };

  const Dataset& d_;
  GAConfig cfg_;
  const RuleFitOptions& opts_;
  Rng rng_;
  std::vector<LabeledRow> rows_;
  std::vector<ConstraintItem> constraints_;
  std::vector<std::size_t> positives_, negatives_;
  std::vector<bool> allowed_;
  std::vector<std::size_t> allowed_list_;
  std::vector<std::vector<double>> cuts_;
  std::vector<double> stdev_;
  std::vector<std::vector<bool>> tabu_ext_, disfavored_ext_;
  std::unordered_map<std::string, CacheEntry> cache_;
};

}  // namespace

RuleFitResult fit_rules(const Dataset& d, const std::vector<LabeledExample>& labels, const CompiledConstraints& cc,
                        const GAConfig& cfg, const RuleFitOptions& opts) {
  cfg.validate();
  std::map<ClassId, std::size_t> negatives;
  bool any_positive = false;
  for (const auto& l : labels) {
    if (l.label == cfg.positive_class) any_positive = true;
    else ++negatives[l.label];
  }
  if (!any_positive || negatives.empty())
    throw PreconditionError("rule induction needs at least one positive and one negative label");
  for (const auto& a : opts.anchors)
    if (!rule_well_formed(a, d.schema())) throw ValidationError({"anchor rule is not well formed"});
  Search s(d, labels, cc, cfg, opts);
  // The non-matching class is the most frequent negative label.
  ClassId other = negatives.begin()->first;
  for (const auto& [c, n] : negatives)
    if (n > negatives[other]) other = c;
  s.other_class_ = other;
  return s.run();
}

RuleFitResult reject_rule(RuleSession& s) {
  if (!s.last || !s.data) throw PreconditionError("no rule set has been fitted in this session");
  s.options.tabu.push_back(s.last->rules);
  s.options.seeds.clear();
  s.last = fit_rules(*s.data, s.labels, s.constraints, s.config, s.options);
  return *s.last;
}

RuleSet edit_rule(const RuleSet& rs, std::size_t rule_index, const RuleEdit& edit, const Dataset& d) {
  if (rule_index >= rs.rules.size())
    throw ValidationError({"rule index " + std::to_string(rule_index) + " out of range"});
  const Predicate p = predicate_from_form(d, edit.predicate);
  RuleSet out = rs;
  auto& rule = out.rules[rule_index];
  std::size_t at = rule.predicates.size();
  if (edit.predicate_index) {
    at = *edit.predicate_index;
    if (at >= rule.predicates.size())
      throw ValidationError({"predicate index " + std::to_string(at) + " out of range"});
    rule.predicates[at] = p;
  } else {
    rule.predicates.push_back(p);
  }
  rule.frozen.insert(at);
  if (!rule_well_formed(rule, d.schema()))
    throw ValidationError({"edit breaks interval consistency in rule " + std::to_string(rule_index)});
  return out;
}

RuleFitResult edit_and_refit(RuleSession& s, std::size_t rule_index, const RuleEdit& edit) {
  if (!s.last || !s.data) throw PreconditionError("no rule set has been fitted in this session");
  const auto edited = edit_rule(s.last->rules, rule_index, edit, *s.data);
  s.options.anchors.push_back(edited.rules[rule_index]);
  s.options.seeds = {edited};
  s.last = fit_rules(*s.data, s.labels, s.constraints, s.config, s.options);
  return *s.last;
}

// ---- rendering --------------------------------------------------------------

namespace {

std::string quote_ident(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string quote_text(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += '\'';
    out += c;
  }
  return out + "'";
}

std::string sql_op(CmpOp op) { return op == CmpOp::ne ? "<>" : std::string(to_string(op)); }

std::string predicate_sql(const Predicate& p, const std::vector<FeatureSchema>& schema) {
  const auto& fs = schema.at(p.feature);
  std::string out = quote_ident(fs.name) + " " + sql_op(p.op) + " ";
  switch (fs.kind) {
    case FeatureKind::categorical: return out + quote_text(fs.categories.at(static_cast<std::size_t>(p.value)));
    case FeatureKind::boolean: return out + (p.value != 0 ? "TRUE" : "FALSE");
    case FeatureKind::numeric: return out + format_number(p.value);
  }
  return out;
}

std::string predicate_text(const Predicate& p, const std::vector<FeatureSchema>& schema) {
  const auto& fs = schema.at(p.feature);
  std::string out = fs.name + " " + std::string(to_string(p.op)) + " ";
  switch (fs.kind) {
    case FeatureKind::categorical: return out + fs.categories.at(static_cast<std::size_t>(p.value));
    case FeatureKind::boolean: return out + (p.value != 0 ? "true" : "false");
    case FeatureKind::numeric: return out + format_number(p.value);
  }
  return out;
}

}  // namespace

std::string rule_to_sql(const RuleSet& rs, const std::vector<FeatureSchema>& schema, const std::string& table) {
  std::string where;
  for (const auto& r : rs.rules) {
    if (!where.empty()) where += " OR ";
    std::string conj;
    for (const auto& p : r.predicates) {
      if (!conj.empty()) conj += " AND ";
      conj += predicate_sql(p, schema);
    }
    where += "(" + conj + ")";
  }
  return "SELECT * FROM " + quote_ident(table) + " WHERE " + (where.empty() ? "FALSE" : where);
}

std::string describe_rule(const ConjunctiveRule& r, const std::vector<FeatureSchema>& schema) {
  std::string out;
  for (const auto& p : r.predicates) {
    if (!out.empty()) out += " AND ";
    out += predicate_text(p, schema);
  }
  return out;
}

Json rules_to_json(const RuleSet& rs, const std::vector<FeatureSchema>& schema) {
  const auto c = rs.canonical_form();
  Json rules = Json::array();
  for (const auto& r : c.rules) {
    Json preds = Json::array();
    for (const auto& p : r.predicates) {
      const auto& fs = schema.at(p.feature);
      Json value;
      switch (fs.kind) {
        case FeatureKind::categorical: value = fs.categories.at(static_cast<std::size_t>(p.value)); break;
        case FeatureKind::boolean: value = p.value != 0; break;
        case FeatureKind::numeric: value = p.value; break;
      }
      preds.push_back({{"feature", fs.name}, {"op", to_string(p.op)}, {"value", value}});
    }
    rules.push_back({{"predicates", preds}, {"frozen", r.frozen}});
  }
  return {{"match_class", c.match_class}, {"other_class", c.other_class}, {"rules", rules}};
}

RuleSet rules_from_json(const Json& j, const std::vector<FeatureSchema>& schema) {
  try {
    RuleSet rs;
    rs.match_class = j.at("match_class").get<ClassId>();
    rs.other_class = j.at("other_class").get<ClassId>();
    for (const auto& jr : j.at("rules")) {
      ConjunctiveRule r;
      for (const auto& jp : jr.at("predicates")) {
        const auto name = jp.at("feature").get<std::string>();
        auto it = std::find_if(schema.begin(), schema.end(), [&](const FeatureSchema& fs) { return fs.name == name; });
        if (it == schema.end()) throw ParseError("rule references unknown feature '" + name + "'", 0);
        Predicate p{static_cast<std::size_t>(it - schema.begin()), cmp_op_from_string(jp.at("op").get<std::string>()), 0};
        const auto& v = jp.at("value");
        if (it->kind == FeatureKind::categorical) {
          auto c = std::find(it->categories.begin(), it->categories.end(), v.get<std::string>());
          if (c == it->categories.end()) throw ParseError("unknown category in rule", 0);
          p.value = static_cast<double>(c - it->categories.begin());
        } else if (it->kind == FeatureKind::boolean) {
          p.value = v.get<bool>() ? 1.0 : 0.0;
        } else {
          p.value = v.get<double>();
        }
        r.predicates.push_back(p);
      }
      for (const auto& k : jr.at("frozen")) r.frozen.insert(k.get<std::size_t>());
      if (!rule_well_formed(r, schema)) throw ParseError("rule is not well formed", 0);
      rs.rules.push_back(std::move(r));
    }
    return rs;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("rules: ") + e.what(), 0);
  }
}

}  // namespace talkback
