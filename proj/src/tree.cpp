#include "talkback/tree.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>

namespace talkback {

std::size_t NodeTest::branch(double value) const {
  switch (kind) {
    case TestKind::numeric_le: return value <= threshold ? 0 : 1;
    case TestKind::boolean: return value != 0.0 ? 1 : 0;
    case TestKind::categorical: return static_cast<std::size_t>(value);
  }
  return 0;
}

std::size_t NodeTest::arity(const FeatureSchema& fs) const {
  return kind == TestKind::categorical ? fs.categories.size() : 2;
}

namespace {

std::size_t count_nodes(const TreeNode& n) {
  std::size_t c = 1;
  for (const auto& ch : n.children) c += count_nodes(ch);
  return c;
}

std::size_t node_depth(const TreeNode& n) {
  std::size_t d = 0;
  for (const auto& ch : n.children) d = std::max(d, 1 + node_depth(ch));
  return d;
}

}  // namespace

std::size_t DecisionTree::node_count() const { return count_nodes(root); }
std::size_t DecisionTree::depth() const { return node_depth(root); }

Classification classify(const DecisionTree& t, std::span<const double> row) {
  Classification out;
  const TreeNode* n = &t.root;
  while (!n->is_leaf()) {
    const auto& test = *n->test;
    const double v = row[test.feature];
    PathStep step{test, 0, is_missing(v), n->forced};
    step.branch = step.imputed ? n->majority_child : test.branch(v);
    out.path.push_back(step);
    n = &n->children[step.branch];
  }
  out.leaf = n;
  out.predicted = n->predicted;
  out.value = n->value;
  return out;
}

double class_probability(const DecisionTree& t, std::span<const double> row, ClassId cls) {
  const auto c = classify(t, row);
  if (c.leaf->n_examples == 0) return c.predicted == cls ? 1.0 : 0.0;
  auto it = c.leaf->class_counts.find(cls);
  const double hits = it == c.leaf->class_counts.end() ? 0.0 : static_cast<double>(it->second);
  return hits / static_cast<double>(c.leaf->n_examples);
}

std::string describe_step(const std::vector<FeatureSchema>& schema, const PathStep& step) {
  const auto& fs = schema.at(step.test.feature);
  std::string s = fs.name;
  switch (step.test.kind) {
    case TestKind::numeric_le:
      s += step.branch == 0 ? " <= " : " > ";
      s += format_number(step.test.threshold);
      break;
    case TestKind::boolean: s += step.branch ? " = true" : " = false"; break;
    case TestKind::categorical: s += " = " + fs.categories.at(step.branch); break;
  }
  if (step.imputed) s += " (imputed)";
  return s;
}

std::string_view to_string(CoverageStatus s) {
  switch (s) {
    case CoverageStatus::satisfied: return "satisfied";
    case CoverageStatus::violated: return "violated";
    case CoverageStatus::unsatisfiable: return "unsatisfiable";
  }
  return "?";
}

std::size_t CoverageReport::count(CoverageStatus s) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const CoverageEntry& e) { return e.status == s; }));
}

double CoverageReport::coverage_rate() const {
  const auto sat = count(CoverageStatus::satisfied);
  const auto total = sat + count(CoverageStatus::violated);
  return total == 0 ? 1.0 : static_cast<double>(sat) / static_cast<double>(total);
}

Json coverage_to_json(const CoverageReport& r) {
  Json arr = Json::array();
  for (const auto& e : r.entries) {
    Json j = {{"source", e.source}, {"kind", e.kind}, {"row_id", e.row}, {"features", e.features},
              {"status", to_string(e.status)}};
    j["other_row_id"] = e.other_row ? Json(*e.other_row) : Json(nullptr);
    arr.push_back(j);
  }
  return {{"entries", arr},
          {"satisfied", r.count(CoverageStatus::satisfied)},
          {"violated", r.count(CoverageStatus::violated)},
          {"unsatisfiable", r.count(CoverageStatus::unsatisfiable)}};
}

// ---- induction --------------------------------------------------------------

namespace {

constexpr double kTieEps = 1e-12;

struct Example {
  std::size_t row;
  std::size_t cls;  // index into classes; unused for regression
  double target;    // regression target
};

double entropy_of(const std::vector<double>& counts, double total) {
  if (total <= 0) return 0.0;
  double h = 0;
  for (double c : counts) {
    if (c <= 0) continue;
    const double p = c / total;
    h -= p * std::log2(p);
  }
  return h;
}

struct Stats {
  std::vector<double> counts;
  double n = 0, sum = 0, sumsq = 0;

  explicit Stats(std::size_t k = 0) : counts(k, 0.0) {}
  void add(const Example& e, bool regression) {
    n += 1;
    if (regression) {
      sum += e.target;
      sumsq += e.target * e.target;
    } else {
      counts[e.cls] += 1;
    }
  }
  void sub(const Example& e, bool regression) {
    n -= 1;
    if (regression) {
      sum -= e.target;
      sumsq -= e.target * e.target;
    } else {
      counts[e.cls] -= 1;
    }
  }
  // Per-example impurity: entropy, or variance for regression.
  double impurity(bool regression) const {
    if (n <= 0) return 0.0;
    if (regression) return std::max(0.0, sumsq / n - (sum / n) * (sum / n));
    return entropy_of(counts, n);
  }
};

struct Candidate {
  NodeTest test;
  double gain = 0;
  double score = 0;
};

class Builder {
 public:
  Builder(const Dataset& d, std::vector<Example> examples, std::size_t n_classes, bool regression,
          const InductionConfig& cfg, std::vector<bool> allowed)
      : d_(d),
        examples_(std::move(examples)),
        k_(n_classes),
        regression_(regression),
        cfg_(cfg),
        allowed_(std::move(allowed)),
        importance_(d.num_features(), 0.0),
        global_weight_(d.num_features(), 0.0) {}

  void set_constraints(const CompiledConstraints& cc) {
    for (std::size_t f = 0; f < d_.num_features(); ++f) {
      auto it = cc.importance.find(d_.feature(f).name);
      if (it != cc.importance.end()) importance_[f] = std::abs(it->second);
    }
    for (const auto& g : cc.global)
      if (auto f = d_.feature_index(g.feature())) global_weight_[*f] += g.confidence;
    for (const auto& [row, list] : cc.per_row) {
      auto r = d_.index_of(row);
      if (!r) continue;
      for (const auto& rc : list)
        if (auto f = d_.feature_index(rc.feature())) local_weight_[*r].emplace_back(*f, rc.confidence);
    }
    for (const auto& s : cc.sides) {
      auto r = d_.index_of(s.row);
      auto f = d_.feature_index(s.feature);
      if (r && f) sides_[*r].emplace_back(*f, s.side);
    }
  }

  void respect_sides(bool on) { respect_sides_ = on; }

  const std::vector<Example>& examples() const { return examples_; }
  const Dataset& data() const { return d_; }
  bool allowed(std::size_t f) const { return allowed_[f]; }

  std::vector<std::size_t> all() const {
    std::vector<std::size_t> idx(examples_.size());
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }

  Stats stats_of(const std::vector<std::size_t>& ex) const {
    Stats s(k_);
    for (auto i : ex) s.add(examples_[i], regression_);
    return s;
  }

  void fill_leaf_stats(TreeNode& node, const std::vector<std::size_t>& ex, ClassId fallback,
                       const std::vector<ClassId>& classes) const {
    node.n_examples = ex.size();
    node.class_counts.clear();
    if (regression_) {
      double sum = 0;
      for (auto i : ex) sum += examples_[i].target;
      node.value = ex.empty() ? 0.0 : sum / static_cast<double>(ex.size());
      node.predicted = 0;
      return;
    }
    std::vector<std::size_t> counts(k_, 0);
    for (auto i : ex) ++counts[examples_[i].cls];
    for (std::size_t c = 0; c < k_; ++c)
      if (counts[c]) node.class_counts[classes[c]] = counts[c];
    if (ex.empty()) {
      node.predicted = fallback;
    } else {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k_; ++c)
        if (counts[c] > counts[best]) best = c;
      node.predicted = classes[best];
    }
    node.value = node.predicted;
  }

  /// Children partition; rows missing the tested value join the largest child.
  std::vector<std::vector<std::size_t>> partition(const NodeTest& test, const std::vector<std::size_t>& ex,
                                                  std::size_t& majority) const {
    std::vector<std::vector<std::size_t>> parts(test.arity(d_.feature(test.feature)));
    std::vector<std::size_t> missing;
    for (auto i : ex) {
      const double v = d_.at(examples_[i].row, test.feature);
      if (is_missing(v)) missing.push_back(i);
      else parts[test.branch(v)].push_back(i);
    }
    majority = 0;
    for (std::size_t c = 1; c < parts.size(); ++c)
      if (parts[c].size() > parts[majority].size()) majority = c;
    parts[majority].insert(parts[majority].end(), missing.begin(), missing.end());
    return parts;
  }

  double gain_of(const std::vector<std::size_t>& ex, const NodeTest& test) const {
    std::size_t majority = 0;
    std::vector<std::vector<std::size_t>> parts(test.arity(d_.feature(test.feature)));
    std::vector<std::size_t> known;
    for (auto i : ex) {
      const double v = d_.at(examples_[i].row, test.feature);
      if (is_missing(v)) continue;
      parts[test.branch(v)].push_back(i);
      known.push_back(i);
    }
    (void)majority;
    if (known.empty()) return 0.0;
    const double nk = static_cast<double>(known.size());
    double rem = 0;
    for (const auto& p : parts) rem += static_cast<double>(p.size()) / nk * stats_of(p).impurity(regression_);
    return nk / static_cast<double>(ex.size()) * (stats_of(known).impurity(regression_) - rem);
  }

  double score_multiplier(std::size_t f, const std::vector<std::size_t>& ex) const {
    double cw = global_weight_[f];
    if (!local_weight_.empty()) {
      std::set<std::size_t> rows;
      for (auto i : ex) rows.insert(examples_[i].row);
      for (auto r : rows) {
        auto it = local_weight_.find(r);
        if (it == local_weight_.end()) continue;
        for (const auto& [feat, conf] : it->second)
          if (feat == f) cw += conf;
      }
    }
    return 1.0 + cfg_.importance_boost * importance_[f] + cfg_.constraint_boost * cw;
  }

  /// Admissible threshold interval [lo, hi) given side requirements of the
  /// rows at the node; `extra` adds one more (row, side) requirement.
  std::pair<double, double> side_window(std::size_t f, const std::vector<std::size_t>& ex) const {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    if (!respect_sides_ || sides_.empty()) return {lo, hi};
    std::set<std::size_t> rows;
    for (auto i : ex) rows.insert(examples_[i].row);
    for (auto r : rows) {
      auto it = sides_.find(r);
      if (it == sides_.end()) continue;
      const double v = d_.at(r, f);
      if (is_missing(v)) continue;
      for (const auto& [feat, side] : it->second) {
        if (feat != f) continue;
        if (side == Side::high) hi = std::min(hi, v);  // need threshold < v
        else lo = std::max(lo, v);                     // need threshold >= v
      }
    }
    return {lo, hi};
  }

  static bool in_window(double t, const std::pair<double, double>& w) { return t >= w.first && t < w.second; }

  /// Best numeric threshold on f; candidates are midpoints between
  /// consecutive distinct values, scanned in ascending order.
  std::optional<std::pair<double, double>> best_threshold(std::size_t f, const std::vector<std::size_t>& ex,
                                                          const std::function<bool(double)>& admissible) const {
    std::vector<std::size_t> known;
    for (auto i : ex)
      if (!is_missing(d_.at(examples_[i].row, f))) known.push_back(i);
    if (known.size() < 2) return std::nullopt;
    std::stable_sort(known.begin(), known.end(), [&](std::size_t a, std::size_t b) {
      return d_.at(examples_[a].row, f) < d_.at(examples_[b].row, f);
    });
    const Stats total = stats_of(known);
    const double nk = static_cast<double>(known.size());
    const double frac = nk / static_cast<double>(ex.size());
    const double parent = total.impurity(regression_);
    Stats left(k_);
    Stats right = total;
    std::optional<std::pair<double, double>> best;
    for (std::size_t i = 0; i + 1 < known.size(); ++i) {
      left.add(examples_[known[i]], regression_);
      right.sub(examples_[known[i]], regression_);
      const double a = d_.at(examples_[known[i]].row, f);
      const double b = d_.at(examples_[known[i + 1]].row, f);
      if (a == b) continue;
      if (left.n < static_cast<double>(cfg_.min_samples_leaf) || right.n < static_cast<double>(cfg_.min_samples_leaf))
        continue;
      const double t = a + (b - a) / 2.0;
      if (!admissible(t)) continue;
      const double gain =
          frac * (parent - left.n / nk * left.impurity(regression_) - right.n / nk * right.impurity(regression_));
      if (!best || gain > best->second + kTieEps) best = std::make_pair(t, gain);
    }
    return best;
  }

  std::optional<Candidate> best_split(const std::vector<std::size_t>& ex) const {
    std::optional<Candidate> best;
    for (std::size_t f = 0; f < d_.num_features(); ++f) {
      if (!allowed_[f]) continue;
      const auto& fs = d_.feature(f);
      const double mult = score_multiplier(f, ex);
      if (fs.kind == FeatureKind::numeric) {
        const auto window = side_window(f, ex);
        auto bt = best_threshold(f, ex, [&](double t) { return in_window(t, window); });
        if (!bt) continue;
        Candidate c{{f, TestKind::numeric_le, bt->first}, bt->second, bt->second * mult};
        if (c.gain > kTieEps && (!best || c.score > best->score + kTieEps)) best = c;
      } else {
        NodeTest test{f, fs.kind == FeatureKind::categorical ? TestKind::categorical : TestKind::boolean, 0.0};
        std::size_t majority = 0;
        auto parts = partition(test, ex, majority);
        std::size_t nonempty = 0;
        bool too_small = false;
        for (const auto& p : parts) {
          if (p.empty()) continue;
          ++nonempty;
          if (p.size() < cfg_.min_samples_leaf) too_small = true;
        }
        if (nonempty < 2 || too_small) continue;
        const double gain = gain_of(ex, test);
        Candidate c{test, gain, gain * mult};
        if (c.gain > kTieEps && (!best || c.score > best->score + kTieEps)) best = c;
      }
    }
    return best;
  }

  bool pure(const std::vector<std::size_t>& ex) const {
    if (ex.empty()) return true;
    if (regression_) {
      const double t0 = examples_[ex.front()].target;
      return std::all_of(ex.begin(), ex.end(), [&](auto i) { return examples_[i].target == t0; });
    }
    const auto c0 = examples_[ex.front()].cls;
    return std::all_of(ex.begin(), ex.end(), [&](auto i) { return examples_[i].cls == c0; });
  }

  TreeNode build(const std::vector<std::size_t>& ex, std::size_t depth, ClassId fallback,
                 const std::vector<ClassId>& classes) const {
    TreeNode node;
    fill_leaf_stats(node, ex, fallback, classes);
    if (ex.empty() || pure(ex) || depth >= cfg_.max_depth || ex.size() < 2 * std::max<std::size_t>(1, cfg_.min_samples_leaf))
      return node;
    auto best = best_split(ex);
    if (!best) return node;
    attach(node, best->test, ex, depth, classes);
    return node;
  }

  void attach(TreeNode& node, const NodeTest& test, const std::vector<std::size_t>& ex, std::size_t depth,
              const std::vector<ClassId>& classes) const {
    node.test = test;
    auto parts = partition(test, ex, node.majority_child);
    node.children.clear();
    for (const auto& p : parts) node.children.push_back(build(p, depth + 1, node.predicted, classes));
  }

 private:
  const Dataset& d_;
  std::vector<Example> examples_;
  std::size_t k_;
  bool regression_;
  InductionConfig cfg_;
  std::vector<bool> allowed_;
  std::vector<double> importance_;
  std::vector<double> global_weight_;
  std::map<std::size_t, std::vector<std::pair<std::size_t, double>>> local_weight_;
  std::map<std::size_t, std::vector<std::pair<std::size_t, Side>>> sides_;
  bool respect_sides_ = false;
};

std::vector<bool> allowed_features(const Dataset& d, const std::optional<std::set<std::string>>& allow_list) {
  std::vector<bool> allowed(d.num_features(), !allow_list.has_value());
  if (allow_list) {
    if (allow_list->empty()) throw PreconditionError("global allow-list is empty");
    for (const auto& name : *allow_list)
      if (auto f = d.feature_index(name)) allowed[*f] = true;
  }
  return allowed;
}

struct ClassIndex {
  std::vector<ClassId> classes;
  std::size_t of(ClassId c) const {
    return static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), c) - classes.begin());
  }
};

ClassIndex class_index(const std::vector<LabeledExample>& labels) {
  std::set<ClassId> cs;
  for (const auto& l : labels) cs.insert(l.label);
  return {{cs.begin(), cs.end()}};
}

std::vector<Example> make_examples(const Dataset& d, const std::vector<LabeledExample>& labels, const ClassIndex& ci) {
  std::vector<Example> ex;
  ex.reserve(labels.size());
  for (const auto& l : labels) ex.push_back({d.require_row(l.row_id), ci.of(l.label), static_cast<double>(l.label)});
  return ex;
}

}  // namespace

DecisionTree fit_tree(const Dataset& d, const std::vector<LabeledExample>& labels, const CompiledConstraints& cc,
                      const InductionConfig& cfg) {
  if (labels.empty()) throw PreconditionError("fit_tree needs at least one labeled example");
  if (cfg.importance_boost < 0 || cfg.constraint_boost < 0) throw ConfigError("split score weights must be >= 0");
  const auto ci = class_index(labels);
  Builder b(d, make_examples(d, labels, ci), ci.classes.size(), false, cfg, allowed_features(d, cc.allow_list));
  b.set_constraints(cc);
  DecisionTree t;
  t.schema = d.schema();
  t.classes = ci.classes;
  t.root = b.build(b.all(), 0, ci.classes.front(), ci.classes);
  return t;
}

DecisionTree fit_regression_tree(const Dataset& d, const std::vector<std::pair<RowId, double>>& targets,
                                 const std::optional<std::set<std::string>>& allow_list, const InductionConfig& cfg) {
  if (targets.empty()) throw PreconditionError("regression tree needs targets");
  std::vector<Example> ex;
  for (const auto& [row, y] : targets) ex.push_back({d.require_row(row), 0, y});
  Builder b(d, std::move(ex), 0, true, cfg, allowed_features(d, allow_list));
  DecisionTree t;
  t.schema = d.schema();
  t.regression = true;
  t.root = b.build(b.all(), 0, 0, {});
  return t;
}

// ---- coverage ---------------------------------------------------------------

namespace {

struct LocalItem {
  RowConstraint constraint;
  std::size_t row = 0;      // dataset index of the constrained row
  std::size_t feature = 0;
};

struct DiffItem {
  DivergenceRequirement req;
  std::size_t row_a = 0, row_b = 0;
};

std::string constraint_kind(const ConstraintForm& f) {
  static const char* kNames[] = {"Presence", "Direction", "Threshold", "CategoryEquals", "Divergence"};
  return kNames[f.index()];
}

struct Route {
  std::vector<std::size_t> branches;  // child index taken at each internal node
  std::vector<PathStep> steps;
};

Route route(const TreeNode& root, std::span<const double> row) {
  Route r;
  const TreeNode* n = &root;
  while (!n->is_leaf()) {
    const double v = row[n->test->feature];
    PathStep step{*n->test, 0, is_missing(v), n->forced};
    step.branch = step.imputed ? n->majority_child : n->test->branch(v);
    r.branches.push_back(step.branch);
    r.steps.push_back(step);
    n = &n->children[step.branch];
  }
  return r;
}

// Region along a numeric feature implied by the path: x in (lo, hi].
std::pair<double, double> path_region(const std::vector<PathStep>& steps, std::size_t f) {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  for (const auto& s : steps) {
    if (s.test.feature != f || s.test.kind != TestKind::numeric_le) continue;
    if (s.branch == 0) hi = std::min(hi, s.test.threshold);
    else lo = std::max(lo, s.test.threshold);
  }
  return {lo, hi};
}

bool tests_feature(const std::vector<PathStep>& steps, std::size_t f) {
  return std::any_of(steps.begin(), steps.end(), [&](const PathStep& s) { return s.test.feature == f; });
}

bool local_satisfied(const Dataset& d, const std::vector<PathStep>& steps, const LocalItem& item) {
  const auto f = item.feature;
  if (!tests_feature(steps, f)) return false;
  const auto& form = item.constraint.form;
  const double xv = d.at(item.row, f);
  if (const auto* dir = std::get_if<Direction>(&form)) {
    for (const auto& s : steps) {
      if (s.test.feature != f || s.test.kind != TestKind::numeric_le) continue;
      if (s.imputed) return false;
      if (s.branch != (dir->side == Side::high ? 1u : 0u)) return false;
    }
    return true;
  }
  if (const auto* th = std::get_if<Threshold>(&form)) {
    if (d.feature(f).kind == FeatureKind::numeric) {
      const auto [lo, hi] = path_region(steps, f);
      switch (th->op) {
        case CmpOp::gt: return lo >= th->value;
        case CmpOp::ge: return lo >= std::nextafter(th->value, -HUGE_VAL);
        case CmpOp::lt: return hi <= std::nextafter(th->value, -HUGE_VAL);
        case CmpOp::le: return hi <= th->value;
        case CmpOp::eq:
        case CmpOp::ne: return satisfies(d, f, xv, form);
      }
    }
    return satisfies(d, f, xv, form);
  }
  if (std::holds_alternative<CategoryEquals>(form)) return satisfies(d, f, xv, form);
  return true;  // Presence
}

// Whether a forced test could ever separate the row as asked, judged over
// the full training example set (the root is an ancestor of every leaf).
bool local_unsatisfiable(const Dataset& d, const std::vector<std::size_t>& training_rows, const LocalItem& item,
                         const std::vector<bool>& allowed) {
  const auto f = item.feature;
  if (!allowed[f]) return true;
  const double xv = d.at(item.row, f);
  const auto& form = item.constraint.form;
  const bool presence_like =
      std::holds_alternative<Presence>(form) ||
      (std::holds_alternative<Threshold>(form) && d.feature(f).kind == FeatureKind::numeric &&
       (std::get<Threshold>(form).op == CmpOp::eq || std::get<Threshold>(form).op == CmpOp::ne));
  if (!presence_like && is_missing(xv)) return true;
  if (presence_like || std::holds_alternative<CategoryEquals>(form) ||
      (std::holds_alternative<Threshold>(form) && d.feature(f).kind == FeatureKind::boolean)) {
    std::optional<double> first;
    for (auto r : training_rows) {
      const double v = d.at(r, f);
      if (is_missing(v)) continue;
      if (!first) first = v;
      else if (v != *first) return false;
    }
    return true;
  }
  if (const auto* dir = std::get_if<Direction>(&form)) {
    for (auto r : training_rows) {
      const double v = d.at(r, f);
      if (!is_missing(v) && (dir->side == Side::high ? v < xv : v > xv)) return false;
    }
    return true;
  }
  // Numeric inequality: some example must violate it.
  for (auto r : training_rows) {
    const double v = d.at(r, f);
    if (!is_missing(v) && !satisfies(d, f, v, form)) return false;
  }
  return true;
}

bool divergence_separable(const Dataset& d, const DiffItem& item, std::size_t f, const std::optional<Side>& side) {
  const double a = d.at(item.row_a, f);
  const double b = d.at(item.row_b, f);
  if (is_missing(a) || is_missing(b) || a == b) return false;
  if (side) return *side == Side::high ? a > b : a < b;
  return true;
}

bool diff_unsatisfiable(const Dataset& d, const DiffItem& item, const std::vector<bool>& allowed) {
  for (const auto& df : item.req.features) {
    auto f = d.feature_index(df.feature);
    if (f && allowed[*f] && divergence_separable(d, item, *f, df.side)) return false;
  }
  return true;
}

// Node index along both paths where they part; nullopt when they share a leaf.
std::optional<std::size_t> divergence_depth(const Route& a, const Route& b) {
  const auto n = std::min(a.branches.size(), b.branches.size());
  for (std::size_t i = 0; i < n; ++i)
    if (a.branches[i] != b.branches[i]) return i;
  return std::nullopt;
}

bool diff_satisfied(const Dataset& d, const DecisionTree& t, const DiffItem& item) {
  const auto ra = route(t.root, d.row(item.row_a));
  const auto rb = route(t.root, d.row(item.row_b));
  const auto at = divergence_depth(ra, rb);
  if (!at) return false;
  const auto f = ra.steps[*at].test.feature;
  return std::any_of(item.req.features.begin(), item.req.features.end(),
                     [&](const DivergenceFeature& df) { return df.feature == d.feature(f).name; });
}

std::vector<LocalItem> local_items(const Dataset& d, const CompiledConstraints& cc) {
  std::vector<LocalItem> items;
  for (const auto& [row, list] : cc.per_row) {
    auto r = d.index_of(row);
    if (!r) continue;
    for (const auto& rc : list)
      if (auto f = d.feature_index(rc.feature())) items.push_back({rc, *r, *f});
  }
  std::stable_sort(items.begin(), items.end(), [](const LocalItem& a, const LocalItem& b) {
    if (a.constraint.row != b.constraint.row) return a.constraint.row < b.constraint.row;
    return a.constraint.feature() < b.constraint.feature();
  });
  return items;
}

std::vector<DiffItem> diff_items(const Dataset& d, const CompiledConstraints& cc) {
  std::vector<DiffItem> items;
  for (const auto& dv : cc.divergences) {
    auto a = d.index_of(dv.row_a);
    auto b = d.index_of(dv.row_b);
    if (a && b) items.push_back({dv, *a, *b});
  }
  std::stable_sort(items.begin(), items.end(), [](const DiffItem& x, const DiffItem& y) {
    return std::make_pair(x.req.row_a, x.req.row_b) < std::make_pair(y.req.row_a, y.req.row_b);
  });
  return items;
}

std::vector<std::size_t> training_rows(const Dataset& d, const std::vector<LabeledExample>& labels) {
  std::vector<std::size_t> rows;
  for (const auto& l : labels)
    if (auto r = d.index_of(l.row_id)) rows.push_back(*r);
  return rows;
}

CoverageEntry local_entry(const LocalItem& item, CoverageStatus status) {
  return {item.constraint.source, constraint_kind(item.constraint.form), item.constraint.row, std::nullopt,
          {item.constraint.feature()}, status};
}

CoverageEntry diff_entry(const DiffItem& item, CoverageStatus status) {
  std::vector<std::string> feats;
  for (const auto& df : item.req.features) feats.push_back(df.feature);
  return {item.req.source, "Differential", item.req.row_a, item.req.row_b, feats, status};
}

}  // namespace

CoverageReport verify_constraint_coverage(const DecisionTree& t, const Dataset& d, const CompiledConstraints& cc) {
  CoverageReport report;
  const auto rows = training_rows(d, cc.labels);
  const auto allowed = allowed_features(d, cc.allow_list);
  for (const auto& item : local_items(d, cc)) {
    const auto r = route(t.root, d.row(item.row));
    CoverageStatus s = CoverageStatus::satisfied;
    if (!local_satisfied(d, r.steps, item))
      s = local_unsatisfiable(d, rows, item, allowed) ? CoverageStatus::unsatisfiable : CoverageStatus::violated;
    report.entries.push_back(local_entry(item, s));
  }
  for (const auto& item : diff_items(d, cc)) {
    CoverageStatus s = CoverageStatus::satisfied;
    if (!diff_satisfied(d, t, item))
      s = diff_unsatisfiable(d, item, allowed) ? CoverageStatus::unsatisfiable : CoverageStatus::violated;
    report.entries.push_back(diff_entry(item, s));
  }
  return report;
}

// ---- bottom-up repair -------------------------------------------------------

namespace {

class Repairer {
 public:
  Repairer(const Dataset& d, const std::vector<LabeledExample>& labels, const CompiledConstraints& cc,
           const InductionConfig& cfg, DecisionTree tree)
      : d_(d),
        cc_(cc),
        ci_{tree.classes},
        tree_(std::move(tree)),
        builder_(d, make_examples(d, labels, ci_), ci_.classes.size(), false, cfg, allowed_features(d, cc.allow_list)) {
    builder_.set_constraints(cc);
    builder_.respect_sides(true);
    for (const auto& l : labels) {
      // Labels unseen by the original fit extend the class list.
      if (!std::binary_search(ci_.classes.begin(), ci_.classes.end(), l.label))
        throw PreconditionError("label " + std::to_string(l.label) + " unknown to the tree being repaired");
    }
    for (const auto& ex : builder_.examples()) rows_.push_back(ex.row);
  }

  const DecisionTree& tree() const { return tree_; }

  bool repair_local(const LocalItem& item) {
    const auto r = route(tree_.root, d_.row(item.row));
    const auto along = examples_along(r.branches);
    std::size_t deepest = r.branches.size();  // leaf index along the path
    if (const auto* dir = std::get_if<Direction>(&item.constraint.form)) {
      for (std::size_t i = 0; i < r.steps.size(); ++i) {
        const auto& s = r.steps[i];
        if (s.test.feature == item.feature && s.test.kind == TestKind::numeric_le &&
            s.branch != (dir->side == Side::high ? 1u : 0u)) {
          deepest = i;
          break;
        }
      }
    }
    const std::optional<std::size_t> offending =
        deepest < r.branches.size() ? std::optional<std::size_t>(deepest) : std::nullopt;
    for (std::size_t i = deepest + 1; i-- > 0;) {
      auto test = forced_test(item, along[i]);
      if (!test) continue;
      graft(r.branches, i, *test, along[i], offending);
      return true;
    }
    // Side requirements of other rows can close every window on the feature;
    // split those rows away first and let a later pass place the test.
    for (std::size_t i = deepest + 1; i-- > 0;) {
      auto test = separating_test(item, along[i]);
      if (!test) continue;
      graft(r.branches, i, *test, along[i], std::nullopt);
      return true;
    }
    return false;
  }

  // Prefers a test that splits no other pair at that node on a feature the
  // other pair did not claim.
  bool repair_diff(const DiffItem& item, const std::vector<DiffItem>& all) {
    const auto ra = route(tree_.root, d_.row(item.row_a));
    const auto rb = route(tree_.root, d_.row(item.row_b));
    const auto split = divergence_depth(ra, rb);
    const std::size_t lca = split ? *split : ra.branches.size();
    const auto along = examples_along(ra.branches);
    std::vector<std::pair<Route, Route>> routes;
    for (const auto& q : all) routes.emplace_back(route(tree_.root, d_.row(q.row_a)), route(tree_.root, d_.row(q.row_b)));

    auto collateral = [&](std::size_t depth, const NodeTest& test) {
      const auto prefix_of = [&](const Route& r) {
        return r.branches.size() >= depth && std::equal(ra.branches.begin(), ra.branches.begin() + static_cast<std::ptrdiff_t>(depth), r.branches.begin());
      };
      for (std::size_t k = 0; k < all.size(); ++k) {
        const auto& q = all[k];
        if (&q == &item || !prefix_of(routes[k].first) || !prefix_of(routes[k].second)) continue;
        if (test.branch(d_.at(q.row_a, test.feature)) == test.branch(d_.at(q.row_b, test.feature))) continue;
        const auto& name = d_.feature(test.feature).name;
        if (std::none_of(q.req.features.begin(), q.req.features.end(),
                         [&](const DivergenceFeature& df) { return df.feature == name; }))
          return true;
      }
      return false;
    };

    std::optional<std::pair<std::size_t, NodeTest>> fallback;
    for (std::size_t i = lca + 1; i-- > 0;) {
      for (const auto& df : item.req.features) {
        auto f = d_.feature_index(df.feature);
        if (!f || !builder_.allowed(*f) || !divergence_separable(d_, item, *f, df.side)) continue;
        const auto& fs = d_.feature(*f);
        std::vector<NodeTest> tests;
        if (fs.kind == FeatureKind::numeric) {
          const double a = d_.at(item.row_a, *f);
          const double b = d_.at(item.row_b, *f);
          const double lo = std::min(a, b), hi = std::max(a, b);
          const auto window = builder_.side_window(*f, along[i]);
          std::vector<double> cuts{lo + (hi - lo) / 2.0, std::max(lo, window.first)};
          for (const auto& q : all)
            for (double v : {d_.at(q.row_a, *f), d_.at(q.row_b, *f)})
              if (v >= lo && v < hi) cuts.push_back(v);
          // Any admissible cut in [lo, hi) separates the pair.
          for (double t : cuts)
            if (t >= lo && t < hi && Builder::in_window(t, window)) tests.push_back({*f, TestKind::numeric_le, t});
        } else {
          tests.push_back({*f, fs.kind == FeatureKind::categorical ? TestKind::categorical : TestKind::boolean, 0.0});
        }
        for (const auto& test : tests) {
          if (!fallback) fallback.emplace(i, test);
          if (collateral(i, test)) continue;
          insert({ra.branches.begin(), ra.branches.begin() + static_cast<std::ptrdiff_t>(i)}, test, along[i]);
          return true;
        }
      }
    }
    if (!fallback) return false;
    const auto [i, test] = *fallback;
    insert({ra.branches.begin(), ra.branches.begin() + static_cast<std::ptrdiff_t>(i)}, test, along[i]);
    return true;
  }

 private:
  // Example sets at each node along a path, root first, leaf last.
  std::vector<std::vector<std::size_t>> examples_along(const std::vector<std::size_t>& branches) const {
    std::vector<std::vector<std::size_t>> out;
    out.push_back(builder_.all());
    const TreeNode* n = &tree_.root;
    for (auto b : branches) {
      auto parts = split_at(*n, out.back());
      out.push_back(std::move(parts[b]));
      n = &n->children[b];
    }
    return out;
  }

  // Partition routing missing values the way the stored node does.
  std::vector<std::vector<std::size_t>> split_at(const TreeNode& n, const std::vector<std::size_t>& ex) const {
    std::size_t majority = 0;
    auto parts = builder_.partition(*n.test, ex, majority);
    if (majority != n.majority_child) {
      std::vector<std::size_t> fixed;
      for (auto i : parts[majority])
        if (is_missing(d_.at(builder_.examples()[i].row, n.test->feature))) parts[n.majority_child].push_back(i);
        else fixed.push_back(i);
      parts[majority] = std::move(fixed);
    }
    return parts;
  }

  // Refreshes counts for `ex`; branches no example reaches become leaves.
  void recount(TreeNode& n, const std::vector<std::size_t>& ex, ClassId fallback) const {
    builder_.fill_leaf_stats(n, ex, fallback, ci_.classes);
    if (n.is_leaf()) return;
    if (ex.empty()) {
      n.test.reset();
      n.children.clear();
      n.forced = false;
      return;
    }
    auto parts = split_at(n, ex);
    for (std::size_t c = 0; c < n.children.size(); ++c) recount(n.children[c], parts[c], n.predicted);
  }

  // Inserts `test` at depth i of `path` above a copy of the existing subtree
  // on every branch, so no path loses a test. With `offending`, the node at
  // that depth is dropped in favor of its child on the path.
  void graft(const std::vector<std::size_t>& path, std::size_t i, const NodeTest& test,
             const std::vector<std::size_t>& ex, std::optional<std::size_t> offending) {
    TreeNode* n = &tree_.root;
    for (std::size_t k = 0; k < i; ++k) n = &n->children[path[k]];
    TreeNode kept = *n;
    if (offending && *offending >= i) {
      TreeNode* o = &kept;
      for (std::size_t k = i; k < *offending; ++k) o = &o->children[path[k]];
      TreeNode child = std::move(o->children[path[*offending]]);
      *o = std::move(child);
    }
    TreeNode forced;
    builder_.fill_leaf_stats(forced, ex, n->predicted, ci_.classes);
    forced.test = test;
    const auto parts = builder_.partition(test, ex, forced.majority_child);
    forced.children.assign(parts.size(), kept);
    for (std::size_t c = 0; c < parts.size(); ++c) recount(forced.children[c], parts[c], forced.predicted);
    forced.forced = true;
    *n = std::move(forced);
  }

  std::optional<NodeTest> forced_test(const LocalItem& item, const std::vector<std::size_t>& ex) const {
    const auto f = item.feature;
    const auto& fs = d_.feature(f);
    const auto& form = item.constraint.form;
    const double xv = d_.at(item.row, f);
    std::vector<double> vals;
    for (auto i : ex) {
      const double v = d_.at(builder_.examples()[i].row, f);
      if (!is_missing(v)) vals.push_back(v);
    }
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    if (vals.size() < 2) return std::nullopt;

    if (fs.kind != FeatureKind::numeric) {
      return NodeTest{f, fs.kind == FeatureKind::categorical ? TestKind::categorical : TestKind::boolean, 0.0};
    }
    const auto window = builder_.side_window(f, ex);
    auto has_both_sides = [&](double t) { return vals.front() <= t && vals.back() > t; };

    if (const auto* th = std::get_if<Threshold>(&form); th && th->op != CmpOp::eq && th->op != CmpOp::ne) {
      double t = th->value;
      if (th->op == CmpOp::ge || th->op == CmpOp::lt) t = std::nextafter(th->value, -HUGE_VAL);
      if (!has_both_sides(t) || !Builder::in_window(t, window)) return std::nullopt;
      return NodeTest{f, TestKind::numeric_le, t};
    }

    if (const auto* dir = std::get_if<Direction>(&form)) {
      const bool high = dir->side == Side::high;
      auto admissible = [&](double t) {
        return has_both_sides(t) && Builder::in_window(t, window) && (high ? xv > t : xv <= t);
      };
      // Preferred cut: midpoint of the class-conditional means of the
      // constrained row's class versus the rest.
      ClassId x_class = 0;
      for (const auto& ex_item : builder_.examples())
        if (ex_item.row == item.row) x_class = ci_.classes[ex_item.cls];
      double s_in = 0, s_out = 0;
      std::size_t n_in = 0, n_out = 0;
      for (auto i : ex) {
        const auto& e = builder_.examples()[i];
        const double v = d_.at(e.row, f);
        if (is_missing(v)) continue;
        if (ci_.classes[e.cls] == x_class) s_in += v, ++n_in;
        else s_out += v, ++n_out;
      }
      if (n_in && n_out) {
        const double pref = (s_in / static_cast<double>(n_in) + s_out / static_cast<double>(n_out)) / 2.0;
        if (admissible(pref)) return NodeTest{f, TestKind::numeric_le, pref};
      }
      // Otherwise the admissible midpoint nearest the constrained value.
      std::optional<double> pick;
      for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
        const double t = vals[i] + (vals[i + 1] - vals[i]) / 2.0;
        if (!admissible(t)) continue;
        if (!pick || std::abs(t - xv) < std::abs(*pick - xv)) pick = t;
      }
      if (!pick) return std::nullopt;
      return NodeTest{f, TestKind::numeric_le, *pick};
    }

    // Presence-like on a numeric feature: best-gain admissible cut.
    auto bt = builder_.best_threshold(f, ex, [&](double t) { return Builder::in_window(t, window); });
    if (!bt) {
      // Fall back to any admissible cut even when gain is flat.
      for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
        const double t = vals[i] + (vals[i + 1] - vals[i]) / 2.0;
        if (Builder::in_window(t, window)) return NodeTest{f, TestKind::numeric_le, t};
      }
      return std::nullopt;
    }
    return NodeTest{f, TestKind::numeric_le, bt->first};
  }

  // A test on another feature sending the constrained row away from every
  // row whose side requirement on the feature blocks it.
  std::optional<NodeTest> separating_test(const LocalItem& item, const std::vector<std::size_t>& ex) const {
    // Only worth inserting when the constrained row's side then admits the test.
    auto opens = [&](const NodeTest& t) {
      std::size_t majority = 0;
      const auto parts = builder_.partition(t, ex, majority);
      return forced_test(item, parts[t.branch(d_.at(item.row, t.feature))]).has_value();
    };
    const auto f = item.feature;
    if (d_.feature(f).kind != FeatureKind::numeric) return std::nullopt;
    const double xv = d_.at(item.row, f);
    const auto* dir = std::get_if<Direction>(&item.constraint.form);
    std::set<std::size_t> at_node;
    for (auto i : ex) at_node.insert(builder_.examples()[i].row);
    std::vector<std::size_t> blockers;
    for (const auto& s : cc_.sides) {
      const auto r = d_.index_of(s.row);
      if (!r || *r == item.row || !at_node.count(*r) || s.feature != d_.feature(f).name) continue;
      const double v = d_.at(*r, f);
      if (is_missing(v)) continue;
      const bool blocks = !dir ? true : dir->side == Side::high ? s.side == Side::low && v >= xv : s.side == Side::high && v <= xv;
      if (blocks) blockers.push_back(*r);
    }
    if (blockers.empty()) return std::nullopt;
    for (std::size_t g = 0; g < d_.num_features(); ++g) {
      if (g == f || !builder_.allowed(g)) continue;
      const double xg = d_.at(item.row, g);
      if (is_missing(xg)) continue;
      const auto& gs = d_.feature(g);
      if (gs.kind != FeatureKind::numeric) {
        const bool apart = std::all_of(blockers.begin(), blockers.end(), [&](std::size_t b) {
          const double v = d_.at(b, g);
          return !is_missing(v) && v != xg;
        });
        const NodeTest t{g, gs.kind == FeatureKind::categorical ? TestKind::categorical : TestKind::boolean, 0.0};
        if (apart && opens(t)) return t;
        continue;
      }
      double below = -HUGE_VAL, above = HUGE_VAL;
      bool any_equal = false, any_missing = false;
      for (auto b : blockers) {
        const double v = d_.at(b, g);
        if (is_missing(v)) any_missing = true;
        else if (v < xg) below = std::max(below, v);
        else if (v > xg) above = std::min(above, v);
        else any_equal = true;
      }
      if (any_equal || any_missing) continue;
      if (below != -HUGE_VAL && above != HUGE_VAL) continue;
      // Cuts between consecutive node values on the open side of the row.
      const auto window = builder_.side_window(g, ex);
      std::vector<double> vals{xg, below == -HUGE_VAL ? above : below};
      for (auto i : ex) {
        const double v = d_.at(builder_.examples()[i].row, g);
        if (!is_missing(v) && v > std::min(vals[0], vals[1]) && v < std::max(vals[0], vals[1])) vals.push_back(v);
      }
      std::sort(vals.begin(), vals.end());
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
        const NodeTest t{g, TestKind::numeric_le, vals[k] + (vals[k + 1] - vals[k]) / 2.0};
        if (Builder::in_window(t.threshold, window) && opens(t)) return t;
      }
    }
    return std::nullopt;
  }

  void insert(const std::vector<std::size_t>& prefix, const NodeTest& test, const std::vector<std::size_t>& ex) {
    TreeNode* n = &tree_.root;
    for (auto b : prefix) n = &n->children[b];
    TreeNode forced;
    builder_.fill_leaf_stats(forced, ex, n->predicted, ci_.classes);
    builder_.attach(forced, test, ex, prefix.size(), ci_.classes);
    forced.forced = true;
    *n = std::move(forced);
  }

  const Dataset& d_;
  const CompiledConstraints& cc_;
  ClassIndex ci_;
  DecisionTree tree_;
  Builder builder_;
  std::vector<std::size_t> rows_;
};

}  // namespace

RepairResult enforce_constraints_bottom_up(const DecisionTree& t, const Dataset& d,
                                           const std::vector<LabeledExample>& labels, const CompiledConstraints& cc,
                                           const InductionConfig& cfg,
                                           const std::optional<std::set<EventId>>& only_sources) {
  RepairResult result{t, {}, 0};
  if (labels.empty()) {
    result.report = verify_constraint_coverage(t, d, cc);
    return result;
  }
  const auto rows = training_rows(d, labels);
  const auto allowed = allowed_features(d, cc.allow_list);
  auto wanted = [&](EventId src) { return !only_sources || only_sources->count(src); };

  std::vector<LocalItem> locals;
  std::set<std::pair<RowId, std::string>> hopeless;
  for (auto& item : local_items(d, cc)) {
    if (local_unsatisfiable(d, rows, item, allowed)) hopeless.insert({item.constraint.row, item.constraint.feature()});
    else if (wanted(item.constraint.source)) locals.push_back(item);
  }
  // Unsatisfiable side requirements must not narrow the windows of others.
  CompiledConstraints usable = cc;
  std::erase_if(usable.sides, [&](const SideRequirement& s) { return hopeless.count({s.row, s.feature}) > 0; });
  Repairer rep(d, labels, usable, cfg, t);
  std::vector<DiffItem> diffs;
  for (auto& item : diff_items(d, cc))
    if (wanted(item.req.source) && !diff_unsatisfiable(d, item, allowed)) diffs.push_back(item);

  const std::size_t max_passes = 2 * (locals.size() + diffs.size()) + 2;
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    bool changed = false;
    for (const auto& item : locals) {
      const auto r = route(rep.tree().root, d.row(item.row));
      if (local_satisfied(d, r.steps, item)) continue;
      if (rep.repair_local(item)) {
        changed = true;
        ++result.insertions;
      }
    }
    for (const auto& item : diffs) {
      if (diff_satisfied(d, rep.tree(), item)) continue;
      if (rep.repair_diff(item, diffs)) {
        changed = true;
        ++result.insertions;
      }
    }
    if (!changed) break;
  }
  result.tree = rep.tree();
  result.report = verify_constraint_coverage(result.tree, d, cc);
  return result;
}

DecisionTree refresh_counts(const DecisionTree& t, const Dataset& d, const std::vector<LabeledExample>& labels) {
  DecisionTree out = t;
  std::set<ClassId> cs(out.classes.begin(), out.classes.end());
  for (const auto& l : labels) cs.insert(l.label);
  out.classes.assign(cs.begin(), cs.end());

  std::function<void(TreeNode&, const std::vector<const LabeledExample*>&, ClassId)> visit =
      [&](TreeNode& n, const std::vector<const LabeledExample*>& ex, ClassId fallback) {
        n.n_examples = ex.size();
        n.class_counts.clear();
        for (const auto* l : ex) ++n.class_counts[l->label];
        if (ex.empty()) {
          n.predicted = fallback;
        } else {
          std::size_t best = 0;
          for (const auto& [c, cnt] : n.class_counts)
            if (cnt > best) best = cnt, n.predicted = c;
        }
        if (n.is_leaf()) return;
        std::vector<std::vector<const LabeledExample*>> parts(n.children.size());
        for (const auto* l : ex) {
          const double v = d.at(d.require_row(l->row_id), n.test->feature);
          parts[is_missing(v) ? n.majority_child : n.test->branch(v)].push_back(l);
        }
        for (std::size_t c = 0; c < n.children.size(); ++c) visit(n.children[c], parts[c], n.predicted);
      };
  std::vector<const LabeledExample*> all;
  for (const auto& l : labels) all.push_back(&l);
  visit(out.root, all, out.root.predicted);
  return out;
}

// ---- intermediate features --------------------------------------------------

AugmentResult augment_with_intermediate(const Dataset& d, const std::vector<IntermediateAnnotation>& annotations,
                                        const InductionConfig& cfg) {
  AugmentResult result{d, {}, {}};
  std::vector<std::string> names;
  for (const auto& a : annotations)
    if (std::find(names.begin(), names.end(), a.name) == names.end()) names.push_back(a.name);
  std::sort(names.begin(), names.end());

  for (const auto& name : names) {
    std::vector<const IntermediateAnnotation*> group;
    for (const auto& a : annotations)
      if (a.name == name) group.push_back(&a);
    if (group.size() < 2)
      throw PreconditionError("intermediate '" + name + "' needs at least two annotated rows");
    const bool boolean = std::all_of(group.begin(), group.end(),
                                     [](const auto* a) { return std::holds_alternative<bool>(a->value); });
    std::optional<std::set<std::string>> allow;
    for (const auto* a : group)
      if (!a->contributing_features.empty()) {
        if (!allow) allow.emplace();
        allow->insert(a->contributing_features.begin(), a->contributing_features.end());
      }

    IntermediateModel model{name, boolean, {}};
    if (boolean) {
      std::vector<LabeledExample> labels;
      for (const auto* a : group) labels.push_back({a->row_id, std::get<bool>(a->value) ? 1 : 0, 1.0});
      CompiledConstraints cc;
      cc.allow_list = allow;
      model.tree = fit_tree(d, labels, cc, {cfg.max_depth, cfg.min_samples_leaf, 0.0, 0.0});
      if (model.tree.classes.size() < 2)
        result.warnings.push_back("intermediate '" + name + "' has a single class; appended a constant column");
    } else {
      std::vector<std::pair<RowId, double>> targets;
      for (const auto* a : group) targets.emplace_back(a->row_id, annotation_number(a->value));
      model.tree = fit_regression_tree(d, targets, allow, cfg);
      if (model.tree.root.is_leaf())
        result.warnings.push_back("intermediate '" + name + "' is constant on its annotations");
    }
    result.models.push_back(std::move(model));
  }

  for (const auto& m : result.models) {
    std::vector<double> col(d.num_rows());
    for (std::size_t r = 0; r < d.num_rows(); ++r) {
      const auto c = classify(m.tree, d.row(r));
      col[r] = m.boolean ? static_cast<double>(c.predicted) : c.value;
    }
    result.dataset = result.dataset.with_column(
        {m.name, m.boolean ? FeatureKind::boolean : FeatureKind::numeric, {}}, std::move(col));
  }
  return result;
}

std::vector<double> apply_intermediates(const std::vector<IntermediateModel>& models, std::span<const double> row) {
  std::vector<double> out(row.begin(), row.end());
  for (const auto& m : models) {
    // Each model saw the original columns only; extra columns are ignored.
    const auto c = classify(m.tree, out);
    out.push_back(m.boolean ? static_cast<double>(c.predicted) : c.value);
  }
  return out;
}

// ---- serialization ----------------------------------------------------------

namespace {

Json node_to_json(const TreeNode& n) {
  Json j;
  Json counts = Json::array();
  for (const auto& [c, k] : n.class_counts) counts.push_back({c, k});
  j["class_counts"] = counts;
  j["n"] = n.n_examples;
  j["predicted"] = n.predicted;
  j["value"] = n.value;
  if (n.is_leaf()) return j;
  static const char* kKinds[] = {"numeric_le", "categorical", "boolean"};
  j["test"] = {{"feature", n.test->feature},
               {"kind", kKinds[static_cast<int>(n.test->kind)]},
               {"threshold", n.test->threshold}};
  j["forced"] = n.forced;
  j["majority_child"] = n.majority_child;
  Json children = Json::array();
  for (const auto& c : n.children) children.push_back(node_to_json(c));
  j["children"] = children;
  return j;
}

TreeNode node_from_json(const Json& j) {
  TreeNode n;
  for (const auto& pair : j.at("class_counts")) n.class_counts[pair.at(0).get<ClassId>()] = pair.at(1).get<std::size_t>();
  n.n_examples = j.at("n").get<std::size_t>();
  n.predicted = j.at("predicted").get<ClassId>();
  n.value = j.at("value").get<double>();
  if (!j.contains("test")) return n;
  const auto& t = j.at("test");
  const auto kind = t.at("kind").get<std::string>();
  NodeTest test{t.at("feature").get<std::size_t>(), TestKind::numeric_le, t.at("threshold").get<double>()};
  if (kind == "categorical") test.kind = TestKind::categorical;
  else if (kind == "boolean") test.kind = TestKind::boolean;
  else if (kind != "numeric_le") throw ParseError("unknown node test kind '" + kind + "'", 0);
  n.test = test;
  n.forced = j.at("forced").get<bool>();
  n.majority_child = j.at("majority_child").get<std::size_t>();
  for (const auto& c : j.at("children")) n.children.push_back(node_from_json(c));
  return n;
}

}  // namespace

Json tree_to_json(const DecisionTree& t) {
  return {{"schema", schema_to_json(t.schema)},
          {"classes", t.classes},
          {"regression", t.regression},
          {"root", node_to_json(t.root)}};
}

DecisionTree tree_from_json(const Json& j) {
  try {
    DecisionTree t;
    t.schema = schema_from_json(j.at("schema"));
    t.classes = j.at("classes").get<std::vector<ClassId>>();
    t.regression = j.at("regression").get<bool>();
    t.root = node_from_json(j.at("root"));
    return t;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("tree: ") + e.what(), 0);
  }
}

}  // namespace talkback
