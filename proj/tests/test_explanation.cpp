#include <algorithm>
#include <limits>

#include "doctest.h"
#include "talkback/explanation.hpp"
#include "talkback/json_io.hpp"
#include "talkback/rng.hpp"

using namespace talkback;

namespace {

Dataset people() {
  return load_csv(
      "salary,dept,age,remote\n"
      "5000,sales,30,yes\n"
      "20000,eng,45,no\n"
      "12000,eng,28,yes\n"
      "8000,ops,51,no\n"
      "15000,sales,39,no\n");
}

ExplanationEvent ev(EventId id, EventKind kind) { return {id, "2026-01-01T00:00:00Z", std::move(kind), {}}; }

ExplanationEvent label(EventId id, RowId row, ClassId c) { return ev(id, AddLabel{{row, c, 1.0}}); }

ExplanationEvent local(EventId id, RowId row, ConstraintForm form) {
  return ev(id, AddConstraint{{LocalScope{row}, std::move(form), 1.0}});
}

ExplanationEvent global(EventId id, ConstraintForm form) {
  return ev(id, AddConstraint{{GlobalScope{}, std::move(form), 1.0}});
}

std::vector<std::string> check(const std::vector<ExplanationEvent>& prior, const ExplanationEvent& e,
                               const Dataset& d) {
  return validate_event(e, d, ValidationContext::from_events(prior));
}

}  // namespace

TEST_CASE("validate_event type rules") {
  auto d = people();
  std::vector<ExplanationEvent> prior = {label(1, 0, 0), label(2, 1, 1), label(3, 2, 1)};

  CHECK(check(prior, local(4, 1, Threshold{"salary", CmpOp::gt, 10000}), d).empty());
  CHECK_FALSE(check(prior, local(4, 1, Direction{"dept", Side::high}), d).empty());
  CHECK_FALSE(check(prior, local(4, 1, Threshold{"dept", CmpOp::gt, 1}), d).empty());
  CHECK_FALSE(check(prior, local(4, 1, CategoryEquals{"salary", "x", false}), d).empty());
  CHECK_FALSE(check(prior, local(4, 1, CategoryEquals{"dept", "hr", false}), d).empty());
  CHECK_FALSE(check(prior, local(4, 1, Presence{"bonus"}), d).empty());
  // Row 4 is unlabeled.
  CHECK_FALSE(check(prior, local(4, 4, Presence{"salary"}), d).empty());

  auto diff = [](RowId a, RowId b) {
    return ev(4, AddConstraint{{DifferentialScope{a, b}, Divergence{{{"salary", Side::high}}}, 1.0}});
  };
  CHECK(check(prior, diff(1, 0), d).empty());
  CHECK_FALSE(check(prior, diff(1, 2), d).empty());  // both labeled 1
}

TEST_CASE("validate_event other kinds") {
  auto d = people();
  std::vector<ExplanationEvent> prior = {label(1, 0, 0)};
  CHECK_FALSE(check(prior, ev(2, AddImportance{{0, {{"salary", 1.5}}, 1.0}}), d).empty());
  CHECK_FALSE(check(prior, ev(2, AddImportance{{0, {{"salary", 0.0}}, 1.0}}), d).empty());
  CHECK(check(prior, ev(2, AddImportance{{0, {{"salary", -0.5}}, 1.0}}), d).empty());
  CHECK_FALSE(check(prior, ev(2, AddIntermediate{{"salary", 0, true, {}}}), d).empty());
  CHECK(check(prior, ev(2, AddIntermediate{{"senior", 0, true, {"age"}}}), d).empty());
  CHECK_FALSE(check(prior, ev(2, RateExplanation{"v:1", 6, RatingScale::stars}), d).empty());
  CHECK(check(prior, ev(2, RateExplanation{"v:1", -1, RatingScale::signed_unit}), d).empty());
  CHECK_FALSE(check(prior, ev(2, Retract{7}), d).empty());
  CHECK(check(prior, ev(2, Retract{1}), d).empty());
}

TEST_CASE("compile global allow-list and retraction") {
  auto d = people();
  auto cc = compile({global(1, Presence{"salary"}), global(2, Presence{"dept"})}, d);
  REQUIRE(cc.allow_list);
  CHECK(*cc.allow_list == std::set<std::string>{"salary", "dept"});

  auto empty = compile({label(1, 0, 1), local(2, 0, Presence{"salary"}), ev(3, Retract{2}), ev(4, Retract{1})}, d);
  CHECK_FALSE(empty.has_constraints());
  CHECK(empty.labels.empty());

  auto one = compile({label(1, 3, 1), local(2, 3, Threshold{"salary", CmpOp::gt, 10000})}, d);
  REQUIRE(one.per_row.count(3));
  CHECK(one.per_row.at(3).size() == 1);
  CHECK(std::get<Threshold>(one.per_row.at(3)[0].form).value == 10000);
}

TEST_CASE("retracting a retraction restores the event") {
  auto d = people();
  auto cc = compile({label(1, 0, 1), ev(2, Retract{1}), ev(3, Retract{2})}, d);
  CHECK(cc.labels.size() == 1);
}

TEST_CASE("compile reports contradictory thresholds") {
  auto d = people();
  try {
    compile({label(1, 1, 1), local(2, 1, Threshold{"salary", CmpOp::gt, 15000}),
             local(3, 1, Threshold{"salary", CmpOp::lt, 10000})},
            d);
    FAIL("expected a compile error");
  } catch (const CompileError& e) {
    REQUIRE(e.conflicts().size() == 1);
    CHECK(e.conflicts()[0].first == 2);
    CHECK(e.conflicts()[0].second == 3);
    CHECK(e.conflicts()[0].feature == "salary");
  }
}

TEST_CASE("importance aggregation and normalization") {
  auto n = normalize_importance({{"wbc", 0.8}, {"fever", 0.4}, {"history", 0.2}});
  CHECK(n["wbc"] == doctest::Approx(1.0));
  CHECK(n["fever"] == doctest::Approx(0.5));
  CHECK(n["history"] == doctest::Approx(0.25));
  CHECK(normalize_importance({{"a", -2}})["a"] == -1.0);
  auto s = normalize_importance({{"a", 3}, {"b", -3}});
  CHECK(s["a"] == 1.0);
  CHECK(s["b"] == -1.0);
  CHECK_THROWS_AS(normalize_importance({{"a", 0.0}}), PreconditionError);
  CHECK(normalize_importance(n) == n);
  auto scaled = normalize_importance({{"wbc", 8.0}, {"fever", 4.0}, {"history", 2.0}});
  for (const auto& [f, w] : n) CHECK(scaled[f] == doctest::Approx(w).epsilon(1e-15));

  auto d = people();
  auto cc = compile({ev(1, AddImportance{{0, {{"salary", 1.0}}, 1.0}}),
                     ev(2, AddImportance{{1, {{"salary", 0.5}, {"age", -1.0}}, 0.5}}),
                     ev(3, AddImportance{{0, {{"salary", 0.2}}, 1.0}})},
                    d);
  // Row 0's later profile replaces the first.
  CHECK(cc.importance["salary"] == doctest::Approx((0.2 + 0.5 * 0.5) / 1.5));
  CHECK(cc.importance["age"] == doctest::Approx(-0.5 / 1.5));
}

TEST_CASE("cluster_importance_profiles") {
  std::vector<ImportanceProfile> ps = {{0, {{"a", 1}}, 1}, {1, {{"a", 1}}, 1}, {2, {{"b", 1}}, 1}, {3, {{"b", 1}}, 1}};
  auto one = cluster_importance_profiles(ps, 1, 5);
  CHECK(std::all_of(one.begin(), one.end(), [](auto c) { return c == 0; }));
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto two = cluster_importance_profiles(ps, 2, seed);
    CHECK(two[0] == two[1]);
    CHECK(two[2] == two[3]);
    CHECK(two[0] != two[2]);
  }
  CHECK_THROWS_AS(cluster_importance_profiles({}, 1, 0), PreconditionError);
}

TEST_CASE("cluster matches brute-force 2-partition minimizer") {
  std::vector<ImportanceProfile> ps = {{0, {{"a", 0.9}, {"b", 0.1}}, 1},
                                       {1, {{"a", 0.7}, {"b", 0.3}}, 1},
                                       {2, {{"a", -0.2}, {"b", 0.8}}, 1},
                                       {3, {{"a", 0.1}, {"b", 1.0}}, 1}};
  auto sse = [&](unsigned mask) {
    double total = 0;
    for (unsigned side = 0; side < 2; ++side) {
      double ma = 0, mb = 0;
      int n = 0;
      for (unsigned i = 0; i < 4; ++i)
        if (((mask >> i) & 1u) == side) ma += ps[i].weights["a"], mb += ps[i].weights["b"], ++n;
      if (!n) return std::numeric_limits<double>::infinity();
      ma /= n, mb /= n;
      for (unsigned i = 0; i < 4; ++i)
        if (((mask >> i) & 1u) == side)
          total += (ps[i].weights["a"] - ma) * (ps[i].weights["a"] - ma) +
                   (ps[i].weights["b"] - mb) * (ps[i].weights["b"] - mb);
    }
    return total;
  };
  unsigned best = 0;
  for (unsigned m = 1; m < 15; ++m)
    if (sse(m) < sse(best)) best = m;
  auto got = cluster_importance_profiles(ps, 2, 11);
  for (unsigned i = 0; i < 4; ++i)
    for (unsigned j = 0; j < 4; ++j) CHECK((got[i] == got[j]) == (((best >> i) & 1u) == ((best >> j) & 1u)));
}

TEST_CASE("event json round trip") {
  std::vector<ExplanationEvent> events = {
      label(1, 0, 1),
      local(2, 0, Threshold{"salary", CmpOp::ge, 1e4}),
      global(3, CategoryEquals{"dept", "eng", true}),
      ev(4, AddConstraint{{DifferentialScope{1, 0}, Divergence{{{"salary", Side::high}, {"dept", std::nullopt}}}, 0.5}}),
      ev(5, AddImportance{{0, {{"salary", 0.25}}, 0.75}}),
      ev(6, AddIntermediate{{"senior", 1, 0.5, {"age"}}}),
      ev(7, RateExplanation{"abc:1", 4, RatingScale::stars}),
      ev(8, RejectRule{"abc#0"}),
      ev(9, EditRule{"abc#0", {1, Threshold{"salary", CmpOp::gt, 12000}}}),
      ev(10, Retract{2}),
  };
  events[0].metadata["note"] = "x";
  const auto text = events_to_jsonl(events);
  CHECK(events_from_jsonl(text) == events);
  CHECK(events_to_jsonl(events_from_jsonl(text)) == text);
}

TEST_CASE("malformed jsonl reports the line") {
  try {
    events_from_jsonl("{\"event_id\":1,\"kind\":\"Retract\",\"target\":0}\n{oops\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("compile is deterministic and retraction equals omission") {
  auto d = people();
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ExplanationEvent> base;
    EventId id = 1;
    for (RowId r = 0; r < 5; ++r) base.push_back(label(id++, r, static_cast<ClassId>(rng.index(2))));
    const int extra = 1 + static_cast<int>(rng.index(5));
    for (int k = 0; k < extra; ++k) {
      const RowId r = static_cast<RowId>(rng.index(5));
      switch (rng.index(4)) {
        case 0: base.push_back(local(id++, r, Presence{rng.bernoulli(0.5) ? "salary" : "dept"})); break;
        case 1: base.push_back(local(id++, r, Direction{"age", r % 2 ? Side::high : Side::low})); break;
        case 2: base.push_back(global(id++, Presence{"remote"})); break;
        default: base.push_back(ev(id++, AddImportance{{r, {{"age", rng.uniform() + 0.1}}, 1.0}})); break;
      }
    }
    const std::size_t victim = rng.index(base.size());
    auto with_retract = base;
    with_retract.push_back(ev(id, Retract{base[victim].event_id}));
    auto without = base;
    without.erase(without.begin() + static_cast<std::ptrdiff_t>(victim));
    auto a = compile(with_retract, d);
    auto b = compile(without, d);
    CHECK(canonical(compiled_to_json(a)) == canonical(compiled_to_json(b)));
    CHECK(canonical(compiled_to_json(compile(base, d))) == canonical(compiled_to_json(compile(base, d))));
  }
}
