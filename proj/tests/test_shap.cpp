#include <numeric>

#include "doctest.h"
#include "talkback/mlp.hpp"
#include "talkback/rng.hpp"
#include "talkback/rules.hpp"
#include "talkback/shap.hpp"
#include "talkback/tree.hpp"

using namespace talkback;

namespace {

std::vector<std::string> names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("x" + std::to_string(i));
  return out;
}

double efficiency_gap(const AttributionVector& a) {
  return std::abs(a.base + std::accumulate(a.values.begin(), a.values.end(), 0.0) - a.output);
}

struct Planted {
  Dataset d;
  std::vector<LabeledExample> labels;
};

Planted six_features(std::uint64_t seed, std::size_t rows = 300) {
  Rng rng(seed);
  std::vector<FeatureSchema> schema;
  for (int f = 0; f < 6; ++f) schema.push_back({"x" + std::to_string(f), FeatureKind::numeric, {}});
  std::vector<std::vector<double>> data;
  std::vector<LabeledExample> labels;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> row(6);
    for (auto& v : row) v = std::round(rng.uniform() * 100) / 10;
    const bool y = (row[0] > 5 && row[1] > 3) || row[2] + row[3] > 14 || rng.bernoulli(0.05);
    data.push_back(row);
    labels.push_back({static_cast<RowId>(r), y ? 1 : 0, 1.0});
  }
  return {Dataset(schema, data), labels};
}

ShapConfig config(std::size_t perms, std::uint64_t seed) {
  ShapConfig c;
  c.permutations = perms;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("exact mode: dummy, additive and symmetric models") {
  const std::vector<std::vector<double>> bg{{-1, 2, 0}, {1, -2, 0}, {0, 0, 0}};
  const std::vector<double> row{3, 5, 7};
  const ShapConfig cfg;

  const auto constant = exact_shapley([](auto) { return 4.0; }, row, bg, names(3), cfg);
  CHECK(constant.base == 4.0);
  for (double v : constant.values) CHECK(v == 0.0);

  const auto additive = exact_shapley([](auto x) { return x[0] + x[1]; }, row, bg, names(3), cfg);
  CHECK(additive.values[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(additive.values[1] == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(additive.values[2] == 0.0);
  CHECK(additive.base == doctest::Approx(0.0));

  const std::vector<double> sym{2, 2, 1};
  const auto product = exact_shapley([](auto x) { return x[0] * x[1] + x[2]; }, sym, bg, names(3), cfg);
  CHECK(product.values[0] == doctest::Approx(product.values[1]).epsilon(1e-12));
  CHECK(efficiency_gap(product) <= 1e-12);

  // f = x0 * x1 with a single zero background row: phi_0 = phi_1 = x0 x1 / 2.
  const auto inter = exact_shapley([](auto x) { return x[0] * x[1]; }, std::vector<double>{2, 3},
                                   {{0, 0}}, names(2), cfg);
  CHECK(inter.values[0] == doctest::Approx(3.0));
  CHECK(inter.values[1] == doctest::Approx(3.0));
}

TEST_CASE("exact mode is independent of feature order") {
  Rng rng(2);
  std::vector<std::vector<double>> bg(20, std::vector<double>(5));
  for (auto& b : bg)
    for (auto& v : b) v = rng.normal();
  const std::vector<double> row{0.5, -1, 2, 0.1, 1.5};
  auto f = [](std::span<const double> x) { return std::tanh(x[0] * x[1]) + x[2] * x[2] - x[3] * x[4]; };
  const auto a = exact_shapley(f, row, bg, names(5), {});

  const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  auto permute = [&](std::span<const double> x) {
    std::vector<double> out(5);
    for (std::size_t i = 0; i < 5; ++i) out[i] = x[perm[i]];
    return out;
  };
  auto unpermute = [&](std::span<const double> y) {
    std::vector<double> x(5);
    for (std::size_t i = 0; i < 5; ++i) x[perm[i]] = y[i];
    return x;
  };
  std::vector<std::vector<double>> bg2;
  for (const auto& b : bg) bg2.push_back(permute(b));
  const auto b = exact_shapley([&](auto y) { return f(unpermute(y)); }, permute(row), bg2, names(5), {});
  for (std::size_t i = 0; i < 5; ++i) CHECK(b.values[i] == doctest::Approx(a.values[perm[i]]).epsilon(1e-12));
}

TEST_CASE("exact efficiency holds on tree, rule and mlp models") {
  const auto p = six_features(4);
  const auto tree = fit_tree(p.d, p.labels, {});
  RuleSet rs;
  rs.rules.push_back({{{0, CmpOp::gt, 5.0}, {1, CmpOp::gt, 3.0}}, {}});
  rs.rules.push_back({{{2, CmpOp::gt, 7.0}}, {}});
  CompiledConstraints cc;
  cc.labels = p.labels;
  MLPConfig mc;
  mc.layers = {5};
  mc.epochs = 20;
  const auto mlp = fit_mlp(p.d, cc, mc);

  const std::vector<ModelFn> models{
      [&](std::span<const double> x) { return class_probability(tree, x, 1); },
      [&](std::span<const double> x) { return rs.matches(x) ? 1.0 : 0.0; },
      [&](std::span<const double> x) { return mlp.proba(x)[1]; },
  };
  ShapConfig cfg;
  cfg.background_cap = 64;
  const auto bg = select_background(p.d, cfg);
  CHECK(bg.size() == 64);
  for (const auto& f : models)
    for (std::size_t r = 0; r < 5; ++r) {
      const auto a = exact_shapley(f, p.d.row(r), bg, names(6), cfg);
      CHECK(efficiency_gap(a) <= 1e-9);
    }
}

TEST_CASE("sampled mode converges to exact and is deterministic") {
  const auto p = six_features(9);
  const auto tree = fit_tree(p.d, p.labels, {}, {5, 1, 0.5, 1.0});
  const ModelFn f = [&](std::span<const double> x) { return class_probability(tree, x, 1); };
  ShapConfig cfg;
  cfg.background_cap = 100;
  const auto bg = select_background(p.d, cfg);
  const auto exact = exact_shapley(f, p.d.row(3), bg, names(6), cfg);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto s = sampled_shapley(f, p.d.row(3), bg, names(6), config(2000, seed));
    double worst = 0;
    for (std::size_t i = 0; i < 6; ++i) worst = std::max(worst, std::abs(s.values[i] - exact.values[i]));
    CHECK(worst <= 0.05);
    CHECK(s.residual_distributed);
    CHECK(efficiency_gap(s) <= 1e-9);
  }
  const auto one = sampled_shapley(f, p.d.row(3), bg, names(6), config(1, 5));
  CHECK(one.values == sampled_shapley(f, p.d.row(3), bg, names(6), config(1, 5)).values);
  for (std::uint64_t seed : {1u, 2u}) {
    const auto zero = sampled_shapley([](auto) { return 0.25; }, p.d.row(0), bg, names(6), config(10, seed));
    for (double v : zero.values) CHECK(v == 0.0);
  }
}

TEST_CASE("exact mode refuses too many features") {
  ShapConfig cfg;
  cfg.exact_cap = 3;
  const std::vector<double> row{1, 2, 3, 4};
  const std::vector<std::vector<double>> bg{{0, 0, 0, 0}};
  auto f = [](std::span<const double> x) { return x[0]; };
  CHECK_THROWS_AS(exact_shapley(f, row, bg, names(4), cfg), PreconditionError);
  CHECK(shapley(f, row, bg, names(4), cfg).mode == ShapMode::sampled);
  CHECK_THROWS_AS(exact_shapley(f, row, {}, names(4), {}), PreconditionError);
  ShapConfig none;
  none.permutations = 0;
  CHECK_THROWS_AS(sampled_shapley(f, row, bg, names(4), none), ConfigError);
}

TEST_CASE("background selection is seeded") {
  const auto p = six_features(1, 50);
  ShapConfig cfg;
  cfg.background_cap = 10;
  const auto a = select_background(p.d, cfg);
  CHECK(a.size() == 10);
  CHECK(a == select_background(p.d, cfg));
  cfg.seed = 2;
  CHECK(a != select_background(p.d, cfg));
  cfg.background_cap = 256;
  CHECK(select_background(p.d, cfg).size() == 50);
}

TEST_CASE("profile comparison") {
  AttributionVector a;
  a.features = {"a", "b", "c"};
  a.values = {0.2, -0.4, 0.1};
  const ImportanceProfile same{0, {{"a", 0.5}, {"b", -1.0}, {"c", 0.25}}, 1.0};
  auto c = compare_profiles(same, a);
  CHECK(c.cosine == doctest::Approx(1.0));
  CHECK(c.l2 == doctest::Approx(0.0));
  CHECK(c.kendall_tau == doctest::Approx(1.0));

  const ImportanceProfile negated{0, {{"a", -0.5}, {"b", 1.0}, {"c", -0.25}}, 1.0};
  CHECK(compare_profiles(negated, a).cosine == doctest::Approx(-1.0));

  // Model normalizes to (0.5, -1, 0.25); human is (1, 0, 0.5).
  // dot = 0.625, |h| = sqrt(1.25), |m| = sqrt(1.3125); l2 = sqrt(0.25 + 1 + 0.0625);
  // pairs (a,b): h+ m+ concordant, (a,c): h+ m+ concordant, (b,c): h- m- concordant.
  const ImportanceProfile hand{0, {{"a", 1.0}, {"b", 0.0}, {"c", 0.5}, {"z", 0.3}}, 1.0};
  c = compare_profiles(hand, a);
  CHECK(c.shared == std::vector<std::string>{"a", "b", "c"});
  CHECK(c.cosine == doctest::Approx(0.625 / std::sqrt(1.25 * 1.3125)));
  CHECK(c.l2 == doctest::Approx(std::sqrt(1.3125)));
  CHECK(c.kendall_tau == doctest::Approx(1.0));

  const ImportanceProfile swapped{0, {{"a", 0.1}, {"b", 0.3}, {"c", 0.2}}, 1.0};
  // h: a<c<b, m: b<c<a -> all three pairs discordant.
  CHECK(compare_profiles(swapped, a).kendall_tau == doctest::Approx(-1.0));

  const ImportanceProfile disjoint{0, {{"q", 1.0}}, 1.0};
  CHECK_THROWS_AS(compare_profiles(disjoint, a), PreconditionError);
  CHECK(kendall_tau(std::vector<double>{1, 1}, std::vector<double>{2, 2}) == 1.0);
  CHECK(kendall_tau(std::vector<double>{1, 1}, std::vector<double>{1, 2}) == 0.0);
}

TEST_CASE("attribution JSON round-trips") {
  AttributionVector a;
  a.features = {"salary", "dept"};
  a.values = {0.1 + 0.2, -1.0 / 3};
  a.base = 0.4;
  a.output = 0.7;
  a.mode = ShapMode::sampled;
  a.permutations = 200;
  a.seed = 3;
  a.residual = 1e-3;
  a.residual_distributed = true;
  const auto j = attribution_to_json(a);
  CHECK(j["attributions"]["salary"].get<double>() == a.values[0]);
  CHECK(j["sampling"]["permutations"] == 200);
  const auto back = attribution_from_json(Json::parse(j.dump()));
  CHECK(back.values == a.values);
  CHECK(back.mode == ShapMode::sampled);
  CHECK(back.residual == a.residual);
  a.mode = ShapMode::exact;
  CHECK_FALSE(attribution_to_json(a).contains("sampling"));
  auto bad = j;
  bad["mode"] = "kernel";
  CHECK_THROWS_AS(attribution_from_json(bad), ParseError);
}
