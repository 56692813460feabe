#include <cmath>

#include "fixtures.hpp"
#include "oracles/gower_oracle.hpp"
#include "suite.hpp"
#include "talkback/json_io.hpp"
#include "talkback/skeptic.hpp"

using namespace talkback;

namespace acceptance {

namespace {

struct Expected {
  bool challenge = false;
  RowId row = 0;
  double distance = 0.0;
};

// Nearest earlier row with a different label within tau, lowest id on ties.
Expected exhaustive(const Dataset& d, const std::vector<LabeledExample>& prior, const LabeledExample& added, double tau) {
  Expected e;
  const auto x = d.require_row(added.row_id);
  for (const auto& l : prior) {
    if (l.row_id == added.row_id || l.label == added.label) continue;
    const double g = oracle::gower(d, x, d.require_row(l.row_id));
    if (g > tau) continue;
    if (!e.challenge || g < e.distance || (g == e.distance && l.row_id < e.row)) e = {true, l.row_id, g};
  }
  return e;
}

std::optional<DivergenceFeature> first_difference(const Dataset& d, RowId x, RowId y) {
  const auto rx = d.require_row(x), ry = d.require_row(y);
  for (std::size_t f = 0; f < d.num_features(); ++f) {
    const double a = d.at(rx, f), b = d.at(ry, f);
    if (a == b) continue;
    std::optional<Side> side;
    if (d.feature(f).kind == FeatureKind::numeric) side = a > b ? Side::high : Side::low;
    return DivergenceFeature{d.feature(f).name, side};
  }
  return std::nullopt;
}

}  // namespace

Result skeptic_loop(const Options& o) {
  Result res{8, "skeptic loop"};
  const double tau = 0.15;
  std::size_t expected = 0, raised = 0, missed = 0, false_alarms = 0, wrong_pair = 0, rounds_over = 0, replays = 0,
              replay_equal = 0;
  for (int k = 0; k < 20; ++k) {
    Rng rng(8000 + o.seed * 100 + k);
    const auto d = mixed_dataset(rng, 60, 4);
    auto pool = noisy_concept(d, rng);
    rng.shuffle(pool);

    std::vector<ExplanationEvent> events;
    EventId id = 1;
    std::vector<LabeledExample> prior;
    for (const auto& added : pool) {
      const auto want = exhaustive(d, prior, added, tau);
      const auto got = detect_contradiction(d, prior, added, tau);
      events.push_back({id++, "", AddLabel{added}, {}});
      prior.push_back(added);
      expected += want.challenge;
      raised += got.has_value();
      if (want.challenge && !got) ++missed;
      if (!want.challenge && got) ++false_alarms;
      if (!want.challenge || !got) continue;
      if (got->counterfactual != want.row || std::abs(got->distance - want.distance) > 1e-12) ++wrong_pair;

      // Stand by both labels until the rounds run out.
      auto c = *got;
      const auto cc = compile(events, d);
      const SkepticContext ctx{&d, &cc, tau, 3};
      while (true) {
        const auto diff = first_difference(d, c.new_row, c.counterfactual);
        if (!diff) break;
        auto resolution = respond(c, Keep{{*diff}}, ctx);
        for (auto& e : resolution.events) {
          e.event_id = id++;
          events.push_back(std::move(e));
        }
        c = resolution.challenge;
        const auto next = next_counterfactual(c, ctx);
        if (!next) break;
        if (next->round > ctx.round_cap) ++rounds_over;
        c = *next;
      }
    }

    Json log = Json::array();
    for (const auto& e : events) log.push_back(event_to_json(e));
    std::vector<ExplanationEvent> replayed;
    for (const auto& j : Json::parse(log.dump())) replayed.push_back(event_from_json(j));
    ++replays;
    replay_equal += compile(replayed, d) == compile(events, d);
  }
  res.pass = missed == 0 && false_alarms == 0 && wrong_pair == 0 && rounds_over == 0 && replay_equal == replays;
  res.detail = ratio(raised - false_alarms, expected) + " contradictions raised (tau " + std::to_string(tau).substr(0, 4) +
               "), " + std::to_string(false_alarms) + " false, " + std::to_string(wrong_pair) +
               " wrong counterfactual vs exhaustive Gower search; " + ratio(replay_equal, replays) +
               " Keep histories replay to identical constraints";
  return res;
}

}  // namespace acceptance
