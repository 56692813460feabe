#include "talkback/model_bundle.hpp"

#include <algorithm>
#include <set>

#include "talkback/errors.hpp"

namespace talkback {

std::string_view to_string(Learner l) {
  switch (l) {
    case Learner::tree: return "tree";
    case Learner::rules: return "rules";
    case Learner::mlp: return "mlp";
  }
  return "tree";
}

Learner learner_from_string(std::string_view s) {
  if (s == "tree") return Learner::tree;
  if (s == "rules") return Learner::rules;
  if (s == "mlp") return Learner::mlp;
  throw ConfigError("unknown learner '" + std::string(s) + "'; valid learners: tree, rules, mlp");
}

std::string_view to_string(LoopKind l) { return l == LoopKind::short_term ? "short_term" : "long_term"; }

LoopKind loop_from_string(std::string_view s) {
  if (s == "short_term") return LoopKind::short_term;
  if (s == "long_term") return LoopKind::long_term;
  throw ConfigError("unknown loop '" + std::string(s) + "'; valid loops: short_term, long_term");
}

std::string_view to_string(SessionMode m) { return m == SessionMode::qbb ? "qbb" : "multiclass"; }

SessionMode mode_from_string(std::string_view s) {
  if (s == "qbb") return SessionMode::qbb;
  if (s == "multiclass") return SessionMode::multiclass;
  throw ConfigError("unknown mode '" + std::string(s) + "'; valid modes: qbb, multiclass");
}

// ---- configuration ----------------------------------------------------------

ConfigBundle::ConfigBundle() { mlp.layers = {8}; }

void ConfigBundle::validate() const {
  if (tree.max_depth < 1) throw ConfigError("tree.max_depth must be at least 1");
  if (tree.min_samples_leaf < 1) throw ConfigError("tree.min_samples_leaf must be at least 1");
  if (tree.importance_boost < 0 || tree.constraint_boost < 0) throw ConfigError("tree boosts must be >= 0");
  rules.validate();
  if (mlp.layers.empty()) throw ConfigError("mlp.hidden needs at least one layer");
  for (auto n : mlp.layers)
    if (n < 1) throw ConfigError("mlp.hidden sizes must be at least 1");
  if (mlp.pinch_layer < 1 || mlp.pinch_layer > mlp.layers.size())
    throw ConfigError("mlp.pinch_layer must name a hidden layer (1.." + std::to_string(mlp.layers.size()) + ")");
  if (!(mlp.learning_rate > 0)) throw ConfigError("mlp.learning_rate must be positive");
  if (mlp.clamp_weight < 0 || mlp.importance_factor < 0) throw ConfigError("mlp weights must be >= 0");
  if (!(cloud_radius > 0)) throw ConfigError("mlp.cloud_radius must be positive");
  shap.validate();
  if (!(tau > 0 && tau <= 1)) throw ConfigError("skeptic.tau must lie in (0, 1]");
  if (round_cap < 1) throw ConfigError("skeptic.round_cap must be at least 1");
}

Json config_to_json(const ConfigBundle& c) {
  return {{"seed", c.seed},
          {"tree",
           {{"max_depth", c.tree.max_depth},
            {"min_samples_leaf", c.tree.min_samples_leaf},
            {"importance_boost", c.tree.importance_boost},
            {"constraint_boost", c.tree.constraint_boost}}},
          {"rules",
           {{"population", c.rules.population},
            {"tournament", c.rules.tournament},
            {"crossover_rate", c.rules.crossover_rate},
            {"mutation_rate", c.rules.mutation_rate},
            {"max_generations", c.rules.max_generations},
            {"stagnation_limit", c.rules.stagnation_limit},
            {"parsimony", c.rules.parsimony},
            {"constraint_weight", c.rules.constraint_weight},
            {"max_rules", c.rules.max_rules},
            {"max_predicates", c.rules.max_predicates},
            {"positive_class", c.rules.positive_class}}},
          {"mlp",
           {{"hidden", c.mlp.layers},
            {"pinch_layer", c.mlp.pinch_layer},
            {"learning_rate", c.mlp.learning_rate},
            {"epochs", c.mlp.epochs},
            {"clamp_weight", c.mlp.clamp_weight},
            {"importance_factor", c.mlp.importance_factor},
            {"short_term_epochs", c.mlp_short_term_epochs},
            {"cloud_per_example", c.cloud_per_example},
            {"cloud_radius", c.cloud_radius}}},
          {"shap",
           {{"background_cap", c.shap.background_cap},
            {"permutations", c.shap.permutations},
            {"exact_cap", c.shap.exact_cap}}},
          {"skeptic", {{"tau", c.tau}, {"round_cap", c.round_cap}}}};
}

namespace {

class Section {
 public:
  Section(const Json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const Json::exception&) {
      throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + name_ + "." + k + "'");
  }

 private:
  const Json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace

ConfigBundle config_from_json(const Json& overrides, ConfigBundle base) {
  if (overrides.is_null()) {
    base.validate();
    return base;
  }
  Section top(overrides, "config");
  top.read("seed", base.seed);
  base.rules.seed = base.mlp.seed = base.shap.seed = base.seed;
  const Json empty = Json::object();
  auto section = [&](const char* name) -> const Json& {
    Json ignored;
    top.read(name, ignored);
    auto it = overrides.find(name);
    return it == overrides.end() ? empty : *it;
  };
  {
    Section s(section("tree"), "tree");
    s.read("max_depth", base.tree.max_depth);
    s.read("min_samples_leaf", base.tree.min_samples_leaf);
    s.read("importance_boost", base.tree.importance_boost);
    s.read("constraint_boost", base.tree.constraint_boost);
    s.finish();
  }
  {
    Section s(section("rules"), "rules");
    s.read("population", base.rules.population);
    s.read("tournament", base.rules.tournament);
    s.read("crossover_rate", base.rules.crossover_rate);
    s.read("mutation_rate", base.rules.mutation_rate);
    s.read("max_generations", base.rules.max_generations);
    s.read("stagnation_limit", base.rules.stagnation_limit);
    s.read("parsimony", base.rules.parsimony);
    s.read("constraint_weight", base.rules.constraint_weight);
    s.read("max_rules", base.rules.max_rules);
    s.read("max_predicates", base.rules.max_predicates);
    s.read("positive_class", base.rules.positive_class);
    s.finish();
  }
  {
    Section s(section("mlp"), "mlp");
    s.read("hidden", base.mlp.layers);
    s.read("pinch_layer", base.mlp.pinch_layer);
    s.read("learning_rate", base.mlp.learning_rate);
    s.read("epochs", base.mlp.epochs);
    s.read("clamp_weight", base.mlp.clamp_weight);
    s.read("importance_factor", base.mlp.importance_factor);
    s.read("short_term_epochs", base.mlp_short_term_epochs);
    s.read("cloud_per_example", base.cloud_per_example);
    s.read("cloud_radius", base.cloud_radius);
    s.finish();
  }
  {
    Section s(section("shap"), "shap");
    s.read("background_cap", base.shap.background_cap);
    s.read("permutations", base.shap.permutations);
    s.read("exact_cap", base.shap.exact_cap);
    s.finish();
  }
  {
    Section s(section("skeptic"), "skeptic");
    s.read("tau", base.tau);
    s.read("round_cap", base.round_cap);
    s.finish();
  }
  top.finish();
  base.validate();
  return base;
}

// ---- bundle -----------------------------------------------------------------

ClassId ModelBundle::predict(std::span<const double> row) const {
  if (row.size() != schema.size()) throw PreconditionError("row width does not match the model schema");
  switch (learner) {
    case Learner::tree: return classify(*tree, apply_intermediates(intermediates, row)).predicted;
    case Learner::rules: return rules->predict(row);
    case Learner::mlp: return mlp->predict(row);
  }
  return 0;
}

double ModelBundle::probability(std::span<const double> row, ClassId cls) const {
  if (row.size() != schema.size()) throw PreconditionError("row width does not match the model schema");
  switch (learner) {
    case Learner::tree: return class_probability(*tree, apply_intermediates(intermediates, row), cls);
    case Learner::rules: return rules->predict(row) == cls ? 1.0 : 0.0;
    case Learner::mlp: {
      auto it = std::find(mlp->classes.begin(), mlp->classes.end(), cls);
      if (it == mlp->classes.end()) return 0.0;
      return mlp->proba(row)[static_cast<std::size_t>(it - mlp->classes.begin())];
    }
  }
  return 0.0;
}

namespace {

Json raw_rows_to_json(const std::vector<std::vector<double>>& rows) {
  Json out = Json::array();
  for (const auto& r : rows) {
    Json row = Json::array();
    for (double v : r) row.push_back(is_missing(v) ? Json(nullptr) : Json(v));
    out.push_back(row);
  }
  return out;
}

std::vector<std::vector<double>> raw_rows_from_json(const Json& j) {
  std::vector<std::vector<double>> out;
  for (const auto& r : j) {
    std::vector<double> row;
    for (const auto& v : r) row.push_back(v.is_null() ? kMissing : v.get<double>());
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace

Json bundle_to_json(const ModelBundle& b) {
  Json j{{"learner", to_string(b.learner)},
         {"schema", schema_to_json(b.schema)},
         {"background", raw_rows_to_json(b.background)},
         {"shap",
          {{"background_cap", b.shap.background_cap},
           {"permutations", b.shap.permutations},
           {"seed", b.shap.seed},
           {"exact_cap", b.shap.exact_cap}}},
         {"warnings", b.warnings}};
  if (b.tree) j["tree"] = tree_to_json(*b.tree);
  Json inter = Json::array();
  for (const auto& m : b.intermediates)
    inter.push_back({{"name", m.name}, {"boolean", m.boolean}, {"tree", tree_to_json(m.tree)}});
  j["intermediates"] = inter;
  if (b.rules) j["rules"] = rules_to_json(*b.rules, b.schema);
  Json elites = Json::array();
  for (const auto& e : b.elites) elites.push_back(rules_to_json(e, b.schema));
  j["elites"] = elites;
  if (b.mlp) j["mlp"] = mlp_model_to_json(*b.mlp);
  return j;
}

ModelBundle bundle_from_json(const Json& j) {
  try {
    ModelBundle b;
    b.learner = learner_from_string(j.at("learner").get<std::string>());
    b.schema = schema_from_json(j.at("schema"));
    b.background = raw_rows_from_json(j.at("background"));
    const auto& s = j.at("shap");
    b.shap.background_cap = s.at("background_cap").get<std::size_t>();
    b.shap.permutations = s.at("permutations").get<std::size_t>();
    b.shap.seed = s.at("seed").get<std::uint64_t>();
    b.shap.exact_cap = s.at("exact_cap").get<std::size_t>();
    b.warnings = j.at("warnings").get<std::vector<std::string>>();
    if (j.contains("tree")) b.tree = tree_from_json(j.at("tree"));
    for (const auto& m : j.at("intermediates"))
      b.intermediates.push_back(
          {m.at("name").get<std::string>(), m.at("boolean").get<bool>(), tree_from_json(m.at("tree"))});
    if (j.contains("rules")) b.rules = rules_from_json(j.at("rules"), b.schema);
    for (const auto& e : j.at("elites")) b.elites.push_back(rules_from_json(e, b.schema));
    if (j.contains("mlp")) b.mlp = mlp_model_from_json(j.at("mlp"));
    const bool complete = (b.learner == Learner::tree && b.tree) || (b.learner == Learner::rules && b.rules) ||
                          (b.learner == Learner::mlp && b.mlp);
    if (!complete) throw ParseError("model bundle lacks its " + std::string(to_string(b.learner)) + " artifact", 0);
    for (const auto& r : b.background)
      if (r.size() != b.schema.size()) throw ParseError("background row width does not match the schema", 0);
    return b;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("model bundle: ") + e.what(), 0);
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), 0);
  }
}

Dataset augmented_dataset(const std::vector<IntermediateModel>& models, const Dataset& d) {
  Dataset out = d;
  for (const auto& m : models) {
    std::vector<double> col(d.num_rows());
    for (std::size_t r = 0; r < d.num_rows(); ++r) {
      const auto c = classify(m.tree, d.row(r));
      col[r] = m.boolean ? static_cast<double>(c.predicted) : c.value;
    }
    out = out.with_column({m.name, m.boolean ? FeatureKind::boolean : FeatureKind::numeric, {}}, std::move(col));
  }
  return out;
}

// ---- fitting ----------------------------------------------------------------

namespace {

void check_labels(const CompiledConstraints& cc, SessionMode mode, Learner learner) {
  if (cc.labels.empty()) throw PreconditionError("no labeled examples to fit");
  std::set<ClassId> classes;
  for (const auto& l : cc.labels) classes.insert(l.label);
  if (mode == SessionMode::qbb && classes.size() < 2)
    throw PreconditionError("query-by-browsing needs at least one wanted and one unwanted example");
  if (learner == Learner::rules && classes.size() != 2)
    throw PreconditionError("the rules learner needs exactly two classes, found " + std::to_string(classes.size()));
  if (learner == Learner::mlp && classes.size() < 2)
    throw PreconditionError("the mlp learner needs at least two classes");
}

ModelBundle base_bundle(const FitContext& ctx) {
  ModelBundle b;
  b.learner = ctx.learner;
  b.schema = ctx.data->schema();
  b.shap = ctx.config.shap;
  b.background = select_background(*ctx.data, ctx.config.shap);
  return b;
}

std::pair<std::string, std::optional<std::size_t>> split_rule_id(const std::string& id) {
  auto hash = id.find('#');
  if (hash == std::string::npos) return {id, std::nullopt};
  try {
    return {id.substr(0, hash), static_cast<std::size_t>(std::stoul(id.substr(hash + 1)))};
  } catch (const std::exception&) {
    return {id, std::nullopt};
  }
}

std::optional<RuleSet> rules_of(const FitContext& ctx, const std::string& version_id) {
  if (!ctx.lookup) return std::nullopt;
  auto b = ctx.lookup(version_id);
  if (!b || !b->rules) return std::nullopt;
  return b->rules;
}

RuleFitOptions rule_options(const FitContext& ctx, const CompiledConstraints& cc, std::vector<std::string>& warnings) {
  RuleFitOptions opts;
  for (const auto& id : cc.rejected_rules) {
    const auto [vid, index] = split_rule_id(id);
    auto rs = rules_of(ctx, vid);
    if (!rs) {
      warnings.push_back("rejected rule '" + id + "' does not name a rules version; ignored");
      continue;
    }
    opts.tabu.push_back(*rs);
    if (index && *index < rs->rules.size()) opts.tabu.push_back(RuleSet{{rs->rules[*index]}, rs->match_class, rs->other_class});
  }
  for (const auto& rating : cc.ratings) {
    if (rating.score >= 0) continue;
    const auto vid = rating.explanation_id.substr(0, rating.explanation_id.find(':'));
    if (auto rs = rules_of(ctx, vid)) opts.disfavored.push_back(*rs);
  }
  for (const auto& edit : cc.edits) {
    const auto [vid, index] = split_rule_id(edit.rule_id);
    auto rs = rules_of(ctx, vid);
    if (!rs) {
      warnings.push_back("edited rule '" + edit.rule_id + "' does not name a rules version; ignored");
      continue;
    }
    const auto edited = edit_rule(*rs, index.value_or(0), edit.edit, *ctx.data);
    opts.anchors.push_back(edited.rules.at(index.value_or(0)));
    opts.seeds.push_back(edited);
  }
  return opts;
}

void fit_rules_into(ModelBundle& b, const FitContext& ctx, const CompiledConstraints& cc, RuleFitOptions opts) {
  auto result = fit_rules(*ctx.data, cc.labels, cc, ctx.config.rules, opts);
  b.rules = result.rules;
  b.elites = result.elites;
  b.warnings.insert(b.warnings.end(), result.warnings.begin(), result.warnings.end());
}

MLPModel fit_mlp_with_clouds(const FitContext& ctx, const CompiledConstraints& cc) {
  const auto& cfg = ctx.config;
  if (cfg.cloud_per_example == 0 || cc.per_row.empty()) return fit_mlp(*ctx.data, cc, cfg.mlp);
  const auto aug = constraint_cloud_augment(*ctx.data, cc.labels, cc, cfg.cloud_per_example, cfg.cloud_radius,
                                            cfg.seed);
  CompiledConstraints train_cc = cc;
  train_cc.labels = aug.labels;
  return fit_mlp(aug.dataset, train_cc, cfg.mlp);
}

}  // namespace

FitOutput fit_long_term(const FitContext& ctx) {
  if (!ctx.data || !ctx.events) throw PreconditionError("fit context lacks data or events");
  ctx.config.validate();
  FitOutput out{base_bundle(ctx), compile(*ctx.events, *ctx.data)};
  const auto& cc = out.constraints;
  check_labels(cc, ctx.mode, ctx.learner);
  auto& b = out.bundle;
  switch (ctx.learner) {
    case Learner::tree: {
      Dataset d = *ctx.data;
      if (!cc.intermediates.empty()) {
        auto aug = augment_with_intermediate(d, cc.intermediates, ctx.config.tree);
        d = std::move(aug.dataset);
        b.intermediates = std::move(aug.models);
        b.warnings = std::move(aug.warnings);
      }
      const auto t = fit_tree(d, cc.labels, cc, ctx.config.tree);
      b.tree = enforce_constraints_bottom_up(t, d, cc.labels, cc, ctx.config.tree).tree;
      break;
    }
    case Learner::rules: fit_rules_into(b, ctx, cc, rule_options(ctx, cc, b.warnings)); break;
    case Learner::mlp: {
      b.mlp = fit_mlp_with_clouds(ctx, cc);
      b.warnings = b.mlp->warnings;
      break;
    }
  }
  return out;
}

FitOutput fit_short_term(const FitContext& ctx, const ModelBundle& parent, EventId parent_last) {
  if (!ctx.data || !ctx.events) throw PreconditionError("fit context lacks data or events");
  if (parent.learner != ctx.learner) throw PreconditionError("parent version was fitted by a different learner");
  ctx.config.validate();
  FitOutput out{base_bundle(ctx), compile(*ctx.events, *ctx.data)};
  const auto& cc = out.constraints;
  check_labels(cc, ctx.mode, ctx.learner);
  std::set<EventId> fresh;
  for (const auto& e : *ctx.events)
    if (e.event_id > parent_last) fresh.insert(e.event_id);

  auto& b = out.bundle;
  switch (ctx.learner) {
    case Learner::tree: {
      b.intermediates = parent.intermediates;
      const auto d = augmented_dataset(b.intermediates, *ctx.data);
      const auto t = refresh_counts(*parent.tree, d, cc.labels);
      b.tree = enforce_constraints_bottom_up(t, d, cc.labels, cc, ctx.config.tree, fresh).tree;
      break;
    }
    case Learner::rules: {
      auto opts = rule_options(ctx, cc, b.warnings);
      opts.seeds.insert(opts.seeds.begin(), parent.elites.begin(), parent.elites.end());
      opts.seeds.insert(opts.seeds.begin(), *parent.rules);
      fit_rules_into(b, ctx, cc, std::move(opts));
      break;
    }
    case Learner::mlp: {
      std::set<RowId> touched;
      for (const auto& e : *ctx.events) {
        if (e.event_id <= parent_last) continue;
        if (const auto* l = std::get_if<AddLabel>(&e.kind)) touched.insert(l->example.row_id);
        if (const auto* p = std::get_if<AddImportance>(&e.kind)) touched.insert(p->profile.row_id);
        if (const auto* a = std::get_if<AddIntermediate>(&e.kind)) touched.insert(a->annotation.row_id);
      }
      std::vector<LabeledExample> delta;
      for (const auto& l : cc.labels)
        if (touched.count(l.row_id)) delta.push_back(l);
      b.mlp = continue_mlp(*parent.mlp, *ctx.data, cc, delta, delta.empty() ? 0 : ctx.config.mlp_short_term_epochs);
      b.mlp->warnings.clear();
      b.warnings.push_back("short-term budget: " + std::to_string(ctx.config.mlp_short_term_epochs) + " epochs over " +
                           std::to_string(delta.size()) + " changed examples");
      break;
    }
  }
  return out;
}

// ---- reporting --------------------------------------------------------------

Json coverage_report(const ModelBundle& b, const Dataset& d, const CompiledConstraints& cc, const GAConfig& ga) {
  std::size_t right = 0;
  for (const auto& l : cc.labels) right += b.predict(d.row(d.require_row(l.row_id))) == l.label;
  Json j{{"labeled", cc.labels.size()},
         {"training_accuracy", cc.labels.empty() ? 0.0 : static_cast<double>(right) / cc.labels.size()}};
  switch (b.learner) {
    case Learner::tree: {
      const auto report = verify_constraint_coverage(*b.tree, augmented_dataset(b.intermediates, d), cc);
      j["coverage_rate"] = report.coverage_rate();
      j["constraints"] = coverage_to_json(report);
      break;
    }
    case Learner::rules: {
      const auto f = fitness(*b.rules, d, cc.labels, cc, ga);
      std::size_t total = cc.global.size();
      for (const auto& l : cc.labels) {
        if (l.label != ga.positive_class) continue;
        if (auto it = cc.per_row.find(l.row_id); it != cc.per_row.end()) total += it->second.size();
      }
      j["coverage_rate"] = total ? 1.0 - static_cast<double>(f.unsatisfied.size()) / total : 1.0;
      j["constraints"] = {{"balanced_accuracy", f.accuracy},
                          {"constraint_score", f.constraint},
                          {"parsimony", f.parsimony},
                          {"fitness", f.total},
                          {"unsatisfied", f.unsatisfied}};
      break;
    }
    case Learner::mlp: j["constraints"] = nullptr; break;
  }
  return j;
}

Json explain_row(const ModelBundle& b, std::span<const double> row) {
  if (row.size() != b.schema.size()) throw PreconditionError("row width does not match the model schema");
  const ClassId pred = b.predict(row);
  Json explanation;
  switch (b.learner) {
    case Learner::tree: {
      const auto full = apply_intermediates(b.intermediates, row);
      const auto c = classify(*b.tree, full);
      Json steps = Json::array();
      for (const auto& s : c.path)
        steps.push_back({{"feature", b.tree->schema.at(s.test.feature).name},
                         {"branch", s.branch},
                         {"text", describe_step(b.tree->schema, s)},
                         {"forced", s.forced},
                         {"imputed", s.imputed}});
      Json counts = Json::object();
      for (const auto& [cls, n] : c.leaf->class_counts) counts[std::to_string(cls)] = n;
      explanation = {{"type", "path"}, {"steps", steps}, {"leaf", {{"class_counts", counts}, {"n_examples", c.leaf->n_examples}}}};
      break;
    }
    case Learner::rules: {
      const auto idx = b.rules->first_match(row);
      explanation = {{"type", "rule"}, {"matched", idx.has_value()}};
      if (idx) {
        explanation["rule_index"] = *idx;
        explanation["text"] = describe_rule(b.rules->rules[*idx], b.schema);
        RuleSet one{{b.rules->rules[*idx]}, b.rules->match_class, b.rules->other_class};
        explanation["rule"] = rules_to_json(one, b.schema)["rules"][0];
      } else {
        explanation["rule_index"] = nullptr;
        explanation["text"] = "no rule matched";
        explanation["rule"] = nullptr;
      }
      break;
    }
    case Learner::mlp: explanation = {{"type", "attribution"}}; break;
  }
  std::vector<std::string> names;
  for (const auto& f : b.schema) names.push_back(f.name);
  const ModelFn fn = [&](std::span<const double> x) { return b.probability(x, pred); };
  const auto attributions = b.learner == Learner::mlp ? sampled_shapley(fn, row, b.background, names, b.shap)
                                                      : shapley(fn, row, b.background, names, b.shap);
  return {{"prediction", pred},
          {"probability", b.probability(row, pred)},
          {"explanation", explanation},
          {"attributions", attribution_to_json(attributions)}};
}

}  // namespace talkback
