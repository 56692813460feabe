#include "doctest.h"
#include "oracles/mlp_oracle.hpp"
#include "talkback/mlp.hpp"
#include "talkback/rng.hpp"

using namespace talkback;

namespace {

MLPConfig shape(std::vector<std::size_t> layers, std::uint64_t seed = 1) {
  MLPConfig c;
  c.layers = std::move(layers);
  c.seed = seed;
  return c;
}

oracle::PlainNet to_oracle(const ClampedMLP& m) {
  oracle::PlainNet net;
  const auto& L = m.config.layers;
  for (std::size_t l = 0; l + 1 < L.size(); ++l) {
    std::vector<std::vector<double>> W(L[l + 1], std::vector<double>(L[l]));
    for (std::size_t i = 0; i < L[l + 1]; ++i)
      for (std::size_t j = 0; j < L[l]; ++j) W[i][j] = m.w(l, i, j);
    net.W.push_back(W);
    net.b.push_back(m.biases[l]);
  }
  return net;
}

std::vector<double> random_input(Rng& rng, std::size_t n) {
  std::vector<double> x(n);
  for (auto& v : x) v = rng.uniform();
  return x;
}

ExplanationEvent event(EventId id, EventKind kind) { return {id, "2024-01-01T00:00:00Z", std::move(kind), {}}; }

Dataset salaries(Rng& rng, std::size_t n) {
  std::vector<FeatureSchema> schema{{"salary", FeatureKind::numeric, {}},
                                    {"age", FeatureKind::numeric, {}},
                                    {"dept", FeatureKind::categorical, {"eng", "hr", "ops"}},
                                    {"remote", FeatureKind::boolean, {}}};
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < n; ++r)
    rows.push_back({5000 + 10000 * rng.uniform(), 20 + 40 * rng.uniform(), static_cast<double>(rng.index(3)),
                    static_cast<double>(rng.index(2))});
  return Dataset(schema, rows);
}

}  // namespace

TEST_CASE("init is seeded and Glorot-bounded") {
  const auto a = init_mlp(shape({3, 5, 2}, 7));
  const auto b = init_mlp(shape({3, 5, 2}, 7));
  const auto c = init_mlp(shape({3, 5, 2}, 8));
  CHECK(a.weights == b.weights);
  CHECK(a.weights != c.weights);
  for (std::size_t l = 0; l < 2; ++l) {
    const double r = std::sqrt(6.0 / static_cast<double>(a.config.layers[l] + a.config.layers[l + 1]));
    for (double w : a.weights[l]) CHECK(std::abs(w) < r);
    for (double v : a.biases[l]) CHECK(v == 0.0);
  }
  CHECK_THROWS_AS(init_mlp(shape({3, 2})), ConfigError);
  auto bad = shape({3, 4, 2});
  bad.pinch_layer = 2;
  CHECK_THROWS_AS(init_mlp(bad), ConfigError);
}

TEST_CASE("forward matches plain feedforward and substitutes clamps") {
  Rng rng(3);
  const auto m = init_mlp(shape({4, 3, 3, 2}, 5));
  const auto x = random_input(rng, 4);
  const auto plain = to_oracle(m).activations(x);
  const auto acts = forward(m, x);
  for (std::size_t l = 0; l < plain.size(); ++l) CHECK(acts.a[l] == plain[l]);

  Clamps own{{1, acts.a[1][1]}};
  const auto same = forward(m, x, own);
  CHECK(same.a.back() == acts.a.back());
  CHECK(same.computed.at(1) == acts.a[1][1]);

  const auto forced = forward(m, x, {{1, 1.0}});
  CHECK(forced.a[1][1] == 1.0);
  CHECK(forced.computed.at(1) == acts.a[1][1]);
  CHECK(forced.a[1][0] == acts.a[1][0]);

  CHECK_THROWS_AS(forward(m, x, {{1, 1.5}}), PreconditionError);
  CHECK_THROWS_AS(forward(m, x, {{3, 0.5}}), PreconditionError);
  CHECK_THROWS_AS(forward(m, std::vector<double>{1, 2}), PreconditionError);
}

TEST_CASE("clamped delta on a one-node pinch is hand-derivable") {
  auto m = init_mlp(shape({1, 1, 2}, 2));
  m.config.clamp_weight = 2.5;
  const std::vector<double> x{0.7};
  const double known = 0.9;
  const auto acts = forward(m, x, {{0, known}});
  const auto g = backward(m, acts, 1, {{0, known}});
  const double a = 1.0 / (1.0 + std::exp(-(m.biases[0][0] + m.weights[0][0] * x[0])));
  const double delta = -2.5 * (known - a) * a * (1 - a);
  CHECK(g.w[0][0] == doctest::Approx(delta * x[0]).epsilon(1e-14));
  CHECK(g.b[0][0] == doctest::Approx(delta).epsilon(1e-14));
  // Downstream weights see the known value.
  const auto& p = acts.a.back();
  CHECK(g.w[1][1] == doctest::Approx((p[1] - 1.0) * known).epsilon(1e-14));

  const auto zero = backward(m, forward(m, x, {{0, a}}), 1, {{0, a}});
  CHECK(zero.w[0][0] == 0.0);
  CHECK(zero.b[0][0] == 0.0);
}

TEST_CASE("gradients match central differences") {
  Rng rng(11);
  const std::vector<std::vector<std::size_t>> shapes{{2, 3, 2}, {3, 4, 3}, {4, 3, 5, 2}, {5, 2, 3}};
  for (int t = 0; t < 20; ++t) {
    auto cfg = shape(shapes[t % shapes.size()], 100 + t);
    cfg.clamp_weight = 0.5 + rng.uniform();
    const auto m = init_mlp(cfg);
    const auto x = random_input(rng, cfg.layers[0]);
    const auto target = rng.index(cfg.layers.back());
    CHECK(grad_check(m, x, target, {}, 1e-5) <= 1e-6);
    Clamps clamps{{rng.index(cfg.layers[1]), rng.uniform()}};
    CHECK(grad_check(m, x, target, clamps, 1e-5) <= 1e-6);
  }
  const auto m = init_mlp(shape({2, 3, 2}));
  CHECK_THROWS_AS(grad_check(m, std::vector<double>{0.1, 0.2}, 0, {}, 0.0), PreconditionError);
}

TEST_CASE("no clamps and kappa 0 reproduce plain backprop bit for bit") {
  Rng rng(4);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto cfg = shape({3, 4, 3, 2}, seed);
    cfg.importance_factor = 0.0;
    const auto m = init_mlp(cfg);
    std::vector<TrainingExample> ex;
    std::vector<std::vector<double>> xs;
    std::vector<std::size_t> ys;
    for (int i = 0; i < 12; ++i) {
      xs.push_back(random_input(rng, 3));
      ys.push_back(rng.index(2));
      ex.push_back({xs.back(), ys.back(), {}, {1.0, 0.5, 0.0}});
    }
    auto net = to_oracle(m);
    net.train(xs, ys, cfg.learning_rate, 25, seed);
    const auto trained = train(m, ex, 25).model;
    CHECK(to_oracle(trained).W == net.W);
    CHECK(to_oracle(trained).b == net.b);
  }
}

TEST_CASE("unit importance doubles the first-layer step") {
  const auto m = init_mlp(shape({3, 4, 2}, 9));
  const std::vector<double> x{0.3, 0.8, 0.5};
  auto plain = train(m, {{x, 1, {}, {}}}, 1).model;
  auto boosted = train(m, {{x, 1, {}, {0.0, 1.0, 0.0}}}, 1).model;
  for (std::size_t i = 0; i < 4; ++i) {
    const double step = plain.w(0, i, 1) - m.w(0, i, 1);
    CHECK(boosted.w(0, i, 1) - m.w(0, i, 1) == doctest::Approx(2.0 * step).epsilon(1e-12));
    CHECK(boosted.w(0, i, 0) == plain.w(0, i, 0));
  }
  CHECK(boosted.weights[1] == plain.weights[1]);
}

TEST_CASE("XOR trains to full accuracy for most seeds") {
  std::vector<TrainingExample> ex;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) ex.push_back({{double(a), double(b)}, static_cast<std::size_t>(a ^ b), {}, {}});
  int solved = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto r = train(init_mlp(shape({2, 4, 2}, seed)), ex, 5000);
    int right = 0;
    for (const auto& e : ex) {
      const auto p = predict_proba(r.model, e.input);
      right += (p[1] > p[0]) == (e.target == 1);
    }
    solved += right == 4;
    CHECK(r.losses.back() < r.losses.front());
  }
  CHECK(solved >= 8);
}

TEST_CASE("training is deterministic and guards divergence") {
  Rng rng(5);
  std::vector<TrainingExample> ex;
  for (int i = 0; i < 8; ++i) ex.push_back({random_input(rng, 2), rng.index(2), {{0, rng.uniform()}}, {}});
  const auto m = init_mlp(shape({2, 3, 2}));
  CHECK(train(m, ex, 10).model.weights == train(m, ex, 10).model.weights);
  auto wild = m;
  wild.weights[1][0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(train(wild, ex, 1), DivergenceError);
}

TEST_CASE("encoder scales, one-hots and round-trips") {
  Rng rng(6);
  const auto d = salaries(rng, 30);
  const InputEncoder enc(d);
  CHECK(enc.width() == 6);
  CHECK(enc.source_feature(3) == 2);
  const auto x = enc.encode(d.row(0));
  CHECK(x[0] >= 0.0);
  CHECK(x[0] <= 1.0);
  CHECK(x[2] + x[3] + x[4] == 1.0);
  std::vector<double> missing{kMissing, 30, kMissing, 1};
  const auto xm = enc.encode(missing);
  CHECK(xm[2] + xm[3] + xm[4] == 0.0);
  CHECK(InputEncoder::from_json(Json::parse(enc.to_json().dump())) == enc);

  ImportanceProfile p{0, {{"dept", -0.5}, {"salary", 1.0}}, 1.0};
  CHECK(importance_inputs(enc, p) == std::vector<double>{1.0, 0.0, 0.5, 0.5, 0.5, 0.0});
}

TEST_CASE("model JSON round-trips exactly") {
  Rng rng(8);
  auto m = init_mlp(shape({3, 4, 2}, 12));
  for (auto& w : m.weights[0]) w = rng.normal() / 3.0;
  m.clamp.nodes["senior"] = 2;
  const auto back = mlp_from_json(Json::parse(mlp_to_json(m).dump()));
  CHECK(back.weights == m.weights);
  CHECK(back.biases == m.biases);
  CHECK(back.clamp == m.clamp);
  CHECK(back.config.layers == m.config.layers);
  auto j = mlp_to_json(m);
  j["weights"][0].erase(0);
  CHECK_THROWS_AS(mlp_from_json(j), ParseError);
}

TEST_CASE("constraint clouds satisfy their source constraints") {
  Rng rng(21);
  const auto d = salaries(rng, 40);
  std::vector<ExplanationEvent> events;
  EventId id = 1;
  for (std::size_t r = 0; r < 10; ++r) {
    const auto row = d.row(r);
    events.push_back(event(id++, AddLabel{{d.row_id(r), row[0] > 10000 ? 1 : 0, 1.0}}));
    const CmpOp op = row[0] > 10000 ? CmpOp::gt : CmpOp::le;
    events.push_back(event(id++, AddConstraint{{LocalScope{d.row_id(r)}, Threshold{"salary", op, 10000}, 1.0}}));
    events.push_back(
        event(id++, AddConstraint{{LocalScope{d.row_id(r)}, Direction{"age", r % 2 ? Side::high : Side::low}, 1.0}}));
  }
  const auto cc = compile(events, d);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto aug = constraint_cloud_augment(d, cc.labels, cc, 20, 1.5, seed);
    REQUIRE(aug.clone_sources.size() == 200);
    CHECK(aug.dataset.num_rows() == 240);
    CHECK(aug.labels.size() == 210);
    for (std::size_t c = 0; c < 200; ++c) {
      const auto r = 40 + c;
      const auto src = d.row(d.require_row(aug.clone_sources[c]));
      CHECK(clone_satisfies(d, aug.dataset.row(r), aug.clone_sources[c], cc));
      CHECK(aug.dataset.at(r, 2) == src[2]);
      CHECK(aug.dataset.at(r, 3) == src[3]);
      CHECK(aug.dataset.row_id(r) > 39);
    }
  }
  const auto again = constraint_cloud_augment(d, cc.labels, cc, 5, 0.5, 9);
  CHECK(again.dataset.row_ids() == constraint_cloud_augment(d, cc.labels, cc, 5, 0.5, 9).dataset.row_ids());

  const auto none = constraint_cloud_augment(d, cc.labels, cc, 0, 1.0, 1);
  CHECK(none.dataset.num_rows() == d.num_rows());
  CHECK(none.labels == cc.labels);

  const auto tight = constraint_cloud_augment(d, cc.labels, cc, 3, 1e-300, 1);
  for (std::size_t c = 0; c < tight.clone_sources.size(); ++c) {
    const auto src = d.row(d.require_row(tight.clone_sources[c]));
    const auto clone = tight.dataset.row(40 + c);
    for (std::size_t f = 0; f < 4; ++f) CHECK(clone[f] == src[f]);
  }
  CHECK_THROWS_AS(constraint_cloud_augment(d, cc.labels, cc, 3, 0.0, 1), PreconditionError);
}

TEST_CASE("fit_mlp trains on labels with clamps and importance") {
  Rng rng(31);
  const auto d = salaries(rng, 60);
  std::vector<ExplanationEvent> events;
  EventId id = 1;
  for (std::size_t r = 0; r < 60; ++r)
    events.push_back(event(id++, AddLabel{{d.row_id(r), d.at(r, 0) > 10000 ? 1 : 0, 1.0}}));
  for (std::size_t r = 0; r < 10; ++r)
    events.push_back(event(id++, AddIntermediate{{"wealthy", d.row_id(r), d.at(r, 0) > 10000, {"salary"}}}));
  events.push_back(event(id++, AddIntermediate{{"tenure", d.row_id(0), 3.0, {"age"}}}));
  events.push_back(event(id++, AddIntermediate{{"tenure", d.row_id(1), 9.0, {"age"}}}));
  events.push_back(event(id++, AddImportance{{d.row_id(2), {{"salary", 1.0}}, 1.0}}));
  const auto cc = compile(events, d);

  MLPConfig cfg;
  cfg.layers = {1};
  cfg.epochs = 300;
  cfg.learning_rate = 0.5;
  const auto model = fit_mlp(d, cc, cfg);
  CHECK(model.net.config.layers == std::vector<std::size_t>{6, 2, 2});
  CHECK(model.warnings.size() == 1);
  CHECK(model.net.clamp.nodes.at("tenure") == 0);

  const auto ex = mlp_examples(model, d, cc, cc.labels);
  CHECK(ex[0].clamps.at(0) == 0.0);
  CHECK(ex[1].clamps.at(0) == 1.0);
  CHECK(ex[2].importance[0] == 1.0);
  CHECK(ex[20].clamps.empty());

  int right = 0;
  for (std::size_t r = 0; r < 60; ++r) right += model.predict(d.row(r)) == (d.at(r, 0) > 10000 ? 1 : 0);
  CHECK(right >= 50);

  const auto back = mlp_model_from_json(Json::parse(mlp_model_to_json(model).dump()));
  CHECK(back.net.weights == model.net.weights);
  CHECK(back.encoder == model.encoder);

  const auto more = continue_mlp(model, d, cc, {cc.labels[0]}, 5);
  CHECK(more.losses.size() == model.losses.size() + 5);

  CompiledConstraints one;
  one.labels = {{d.row_id(0), 1, 1.0}};
  CHECK_THROWS_AS(fit_mlp(d, one, cfg), PreconditionError);
}
