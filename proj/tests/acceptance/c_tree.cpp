#include <algorithm>
#include <functional>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "oracles/tree_oracle.hpp"
#include "suite.hpp"
#include "talkback/skeptic.hpp"
#include "talkback/tree.hpp"

using namespace talkback;

namespace acceptance {

namespace {

struct Step {
  std::size_t feature;
  TestKind kind;
  std::size_t branch;
};

// Independent walk of a fitted tree; rows here have no missing values.
std::vector<Step> walk(const TreeNode& root, std::span<const double> row) {
  std::vector<Step> out;
  const TreeNode* n = &root;
  while (!n->is_leaf()) {
    const auto& t = *n->test;
    const double v = row[t.feature];
    const std::size_t b = t.kind == TestKind::numeric_le ? (v <= t.threshold ? 0 : 1) : static_cast<std::size_t>(v);
    out.push_back({t.feature, t.kind, b});
    n = &n->children.at(b);
  }
  return out;
}

ExplanationEvent make_event(EventId id, EventKind kind) { return {id, "2024-01-01T00:00:00Z", std::move(kind), {}}; }

std::pair<Dataset, std::vector<LabeledExample>> weather() {
  const auto full = load_csv(kWeather);
  const auto y = full.num_features() - 1;
  std::vector<FeatureSchema> schema(full.schema().begin(), full.schema().end() - 1);
  std::vector<std::vector<double>> rows;
  std::vector<LabeledExample> labels;
  for (std::size_t r = 0; r < full.num_rows(); ++r) {
    auto row = full.row(r);
    rows.emplace_back(row.begin(), row.end() - 1);
    labels.push_back({full.row_id(r), static_cast<ClassId>(full.at(r, y)), 1.0});
  }
  return {Dataset(schema, rows), labels};
}

double accuracy(const DecisionTree& t, const Dataset& d, const std::vector<LabeledExample>& labels) {
  if (labels.empty()) return 1.0;
  std::size_t right = 0;
  for (const auto& l : labels) right += classify(t, d.row(d.require_row(l.row_id))).predicted == l.label;
  return static_cast<double>(right) / static_cast<double>(labels.size());
}

// Whether some tree makes every pair first diverge on one of its claimed
// features, by search over split sequences on the rows involved.
bool jointly_satisfiable(const Dataset& d, const std::vector<std::size_t>& rows,
                         const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                         const std::vector<std::set<std::size_t>>& claims, const std::vector<std::size_t>& alive) {
  if (alive.empty()) return true;
  for (std::size_t f = 0; f < d.num_features(); ++f) {
    std::set<double> values;
    for (auto r : rows) values.insert(d.at(r, f));
    if (values.size() < 2) continue;
    std::vector<std::function<std::size_t(std::size_t)>> splits;
    if (d.feature(f).kind == FeatureKind::numeric) {
      for (auto it = std::next(values.begin()); it != values.end(); ++it) {
        const double cut = *std::prev(it);
        splits.push_back([&d, f, cut](std::size_t r) { return d.at(r, f) <= cut ? 0u : 1u; });
      }
    } else {
      splits.push_back([&d, f](std::size_t r) { return static_cast<std::size_t>(d.at(r, f)); });
    }
    for (const auto& branch : splits) {
      bool valid = true;
      std::map<std::size_t, std::vector<std::size_t>> kept;
      for (auto p : alive) {
        if (branch(pairs[p].first) == branch(pairs[p].second)) kept[branch(pairs[p].first)].push_back(p);
        else valid = valid && claims[p].count(f);
      }
      std::size_t remaining = 0;
      for (const auto& [b, ps] : kept) remaining += ps.size();
      if (!valid || remaining == alive.size()) continue;
      bool ok = true;
      for (const auto& [b, ps] : kept) {
        std::vector<std::size_t> sub;
        for (auto r : rows)
          if (branch(r) == b) sub.push_back(r);
        ok = ok && jointly_satisfiable(d, sub, pairs, claims, ps);
      }
      if (ok) return true;
    }
  }
  return false;
}

}  // namespace

Result tree_oracle_equivalence(const Options& o) {
  Result res{1, "plain-learning reduction"};
  const InductionConfig plain{12, 1, 0.0, 0.0};
  std::size_t same = 0, total = 0;
  {
    auto [d, labels] = weather();
    ++total;
    same += oracle::same_shape(oracle::plain_tree(d, labels), fit_tree(d, labels, {}, plain).root, d);
  }
  Rng rng(100 + o.seed);
  for (int k = 0; k < 50; ++k) {
    const auto d = mixed_dataset(rng, 200, 8);
    const auto labels = noisy_concept(d, rng);
    ++total;
    same += oracle::same_shape(oracle::plain_tree(d, labels), fit_tree(d, labels, {}, plain).root, d);
  }
  res.pass = same == total;
  res.detail = ratio(same, total) + " trees node-for-node equal to the plain-entropy oracle (weather + 50 random 8x200)";
  return res;
}

Result constraint_coverage(const Options& o) {
  Result res{2, "constraint coverage"};
  std::size_t violated = 0, satisfied = 0, unsatisfiable = 0, disagreements = 0, constraints = 0;
  double drop_sum = 0.0;
  const int datasets = 100;
  for (int k = 0; k < datasets; ++k) {
    Rng rng(2000 + o.seed * 1000 + k);
    const auto d = mixed_dataset(rng, 150, 6);
    const auto all = noisy_concept(d, rng);
    const std::vector<LabeledExample> train(all.begin(), all.begin() + 105);
    const std::vector<LabeledExample> holdout(all.begin() + 105, all.end());

    std::vector<ExplanationEvent> events;
    EventId id = 1;
    for (const auto& l : train) events.push_back(make_event(id++, AddLabel{l}));
    std::set<std::pair<RowId, std::size_t>> used;
    const auto n = 1 + rng.index(5);
    while (used.size() < n) {
      const auto row = train[rng.index(train.size())].row_id;
      const auto f = rng.index(d.num_features());
      if (!used.insert({row, f}).second) continue;
      const auto& name = d.feature(f).name;
      if (d.feature(f).kind == FeatureKind::numeric && rng.bernoulli(0.5)) {
        const Side side = rng.bernoulli(0.5) ? Side::high : Side::low;
        events.push_back(make_event(id++, AddConstraint{{LocalScope{row}, Direction{name, side}, 1.0}}));
      } else {
        events.push_back(make_event(id++, AddConstraint{{LocalScope{row}, Presence{name}, 1.0}}));
      }
    }
    const auto cc = compile(events, d);
    const auto unconstrained = fit_tree(d, train, {});
    const auto repaired = enforce_constraints_bottom_up(fit_tree(d, train, cc), d, train, cc).tree;
    const auto report = verify_constraint_coverage(repaired, d, cc);
    drop_sum += accuracy(unconstrained, d, holdout) - accuracy(repaired, d, holdout);

    // Cross-check every entry against the path and the training values.
    for (const auto& [row, list] : cc.per_row) {
      const auto r = d.require_row(row);
      for (const auto& rc : list) {
        ++constraints;
        const auto f = *d.feature_index(rc.feature());
        const double xv = d.at(r, f);
        const auto path = walk(repaired.root, d.row(r));
        bool on_path = std::any_of(path.begin(), path.end(), [&](const Step& s) { return s.feature == f; });
        bool ok = on_path;
        bool unsat = true;
        if (const auto* dir = std::get_if<Direction>(&rc.form)) {
          for (const auto& s : path)
            if (s.feature == f && s.branch != (dir->side == Side::high ? 1u : 0u)) ok = false;
          for (const auto& l : train) {
            const double v = d.at(d.require_row(l.row_id), f);
            if (dir->side == Side::high ? v < xv : v > xv) unsat = false;
          }
        } else {
          for (const auto& l : train)
            if (d.at(d.require_row(l.row_id), f) != xv) unsat = false;
        }
        const auto it = std::find_if(report.entries.begin(), report.entries.end(), [&](const CoverageEntry& e) {
          return e.source == rc.source && e.row == row;
        });
        if (it == report.entries.end()) {
          ++disagreements;
          continue;
        }
        switch (it->status) {
          case CoverageStatus::violated: ++violated; break;
          case CoverageStatus::satisfied:
            ++satisfied;
            disagreements += !ok;
            break;
          case CoverageStatus::unsatisfiable:
            ++unsatisfiable;
            disagreements += !unsat;
            break;
        }
      }
    }
  }
  res.pass = violated == 0 && disagreements == 0;
  char drop[64];
  std::snprintf(drop, sizeof drop, "%+.4f", drop_sum / datasets);
  res.detail = std::to_string(violated) + " violated of " + std::to_string(constraints) + " (" +
               std::to_string(satisfied) + " satisfied, " + std::to_string(unsatisfiable) +
               " unsatisfiable), oracle disagreements " + std::to_string(disagreements) +
               "; mean holdout accuracy drop vs unconstrained " + drop + " (informational)";
  return res;
}

Result differential_coverage(const Options& o) {
  Result res{3, "differential coverage"};
  std::size_t cases = 0, covered = 0, unsat_reported = 0, joint_conflicts = 0;
  for (int k = 0; k < 50; ++k) {
    Rng rng(3000 + o.seed * 1000 + k);
    const auto d = mixed_dataset(rng, 120, 6);
    const auto labels = noisy_concept(d, rng);
    std::vector<ExplanationEvent> events;
    EventId id = 1;
    for (const auto& l : labels) events.push_back(make_event(id++, AddLabel{l}));
    auto cc = compile(events, d);
    const SkepticContext ctx{&d, &cc, 0.1, 3};

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::vector<std::set<std::size_t>> claims;
    while (pairs.size() < 2) {
      const auto x = rng.index(d.num_rows());
      const auto y = rng.index(d.num_rows());
      if (labels[x].label == labels[y].label) continue;
      std::vector<std::size_t> differing;
      for (std::size_t f = 0; f < d.num_features(); ++f)
        if (d.at(x, f) != d.at(y, f)) differing.push_back(f);
      if (differing.empty()) continue;
      rng.shuffle(differing);
      differing.resize(std::min<std::size_t>(differing.size(), 1 + rng.index(2)));
      Keep keep;
      for (auto f : differing) {
        std::optional<Side> side;
        if (d.feature(f).kind == FeatureKind::numeric) side = d.at(x, f) > d.at(y, f) ? Side::high : Side::low;
        keep.features.push_back({d.feature(f).name, side});
      }
      Challenge c;
      c.challenge_id = "ch-" + std::to_string(x) + "-" + std::to_string(y) + "-r1";
      c.new_row = d.row_id(x);
      c.counterfactual = d.row_id(y);
      c.new_label = labels[x].label;
      c.counterfactual_label = labels[y].label;
      for (auto& e : respond(c, keep, ctx).events) {
        e.event_id = id++;
        events.push_back(std::move(e));
      }
      pairs.emplace_back(x, y);
      claims.emplace_back(differing.begin(), differing.end());
    }
    cc = compile(events, d);
    const auto repaired = enforce_constraints_bottom_up(fit_tree(d, cc.labels, cc), d, cc.labels, cc).tree;
    const auto report = verify_constraint_coverage(repaired, d, cc);
    unsat_reported += report.count(CoverageStatus::unsatisfiable);
    std::set<std::size_t> involved;
    std::vector<std::size_t> alive;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      involved.insert({pairs[p].first, pairs[p].second});
      alive.push_back(p);
    }
    if (!jointly_satisfiable(d, {involved.begin(), involved.end()}, pairs, claims, alive)) {
      joint_conflicts += pairs.size();
      continue;
    }
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      ++cases;
      const auto a = walk(repaired.root, d.row(pairs[p].first));
      const auto b = walk(repaired.root, d.row(pairs[p].second));
      for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
        if (a[i].branch == b[i].branch) continue;
        covered += claims[p].count(a[i].feature);
        break;
      }
    }
  }
  res.pass = covered == cases && unsat_reported == 0;
  res.detail = ratio(covered, cases) + " satisfiable Keep pairs diverge first on a claimed feature (required 100%); " +
               std::to_string(unsat_reported) + " reported unsatisfiable; " +
               std::to_string(joint_conflicts) + " pairs excluded as jointly unsatisfiable by exhaustive search";
  return res;
}

}  // namespace acceptance
