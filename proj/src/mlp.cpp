#include "talkback/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "talkback/rng.hpp"

namespace talkback {

void MLPConfig::validate() const {
  if (layers.size() < 3) throw ConfigError("an MLP needs an input layer, at least one hidden layer and an output layer");
  for (auto n : layers)
    if (n < 1) throw ConfigError("layer sizes must be at least 1");
  if (pinch_layer < 1 || pinch_layer + 1 >= layers.size()) throw ConfigError("pinch layer must be a hidden layer");
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (clamp_weight < 0 || importance_factor < 0) throw ConfigError("clamp weight and kappa must be >= 0");
}

ClampedMLP init_mlp(const MLPConfig& cfg) {
  cfg.validate();
  ClampedMLP m;
  m.config = cfg;
  Rng rng(cfg.seed);
  for (std::size_t l = 0; l + 1 < cfg.layers.size(); ++l) {
    const auto fan_in = cfg.layers[l], fan_out = cfg.layers[l + 1];
    const double r = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> w(fan_in * fan_out);
    for (auto& x : w) x = (2.0 * rng.uniform() - 1.0) * r;
    m.weights.push_back(std::move(w));
    m.biases.emplace_back(fan_out, 0.0);
  }
  return m;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void softmax(const std::vector<double>& z, std::vector<double>& out) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += (out[i] = std::exp(z[i] - mx));
  for (auto& v : out) v /= sum;
}

double cross_entropy(const std::vector<double>& z, std::size_t target) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0;
  for (double v : z) sum += std::exp(v - mx);
  return mx + std::log(sum) - z[target];
}

double loss_of(const ClampedMLP& m, const Activations& acts, std::size_t target, const Clamps& clamps) {
  double loss = cross_entropy(acts.z.back(), target);
  for (const auto& [k, known] : clamps) {
    const double diff = known - acts.computed.at(k);
    loss += m.config.clamp_weight / 2.0 * diff * diff;
  }
  return loss;
}

}  // namespace

Activations forward(const ClampedMLP& m, std::span<const double> input, const Clamps& clamps) {
  const auto& L = m.config.layers;
  if (input.size() != L[0])
    throw PreconditionError("input has " + std::to_string(input.size()) + " values, expected " + std::to_string(L[0]));
  for (const auto& [k, v] : clamps) {
    if (k >= L[m.config.pinch_layer]) throw PreconditionError("clamp node " + std::to_string(k) + " outside pinch layer");
    if (!(v >= 0.0 && v <= 1.0)) throw PreconditionError("clamp value must lie in [0, 1]");
  }
  Activations acts;
  acts.z.resize(L.size());
  acts.a.resize(L.size());
  acts.a[0].assign(input.begin(), input.end());
  for (std::size_t l = 0; l + 1 < L.size(); ++l) {
    auto& z = acts.z[l + 1];
    auto& a = acts.a[l + 1];
    z.assign(L[l + 1], 0.0);
    a.assign(L[l + 1], 0.0);
    for (std::size_t i = 0; i < L[l + 1]; ++i) {
      double s = m.biases[l][i];
      for (std::size_t j = 0; j < L[l]; ++j) s += m.w(l, i, j) * acts.a[l][j];
      z[i] = s;
    }
    if (l + 2 == L.size()) {
      softmax(z, a);
    } else {
      for (std::size_t i = 0; i < z.size(); ++i) a[i] = sigmoid(z[i]);
    }
    if (l + 1 == m.config.pinch_layer) {
      for (const auto& [k, v] : clamps) {
        acts.computed[k] = a[k];
        a[k] = v;
      }
    }
  }
  return acts;
}

std::vector<double> predict_proba(const ClampedMLP& m, std::span<const double> input) {
  return forward(m, input).a.back();
}

Gradients backward(const ClampedMLP& m, const Activations& acts, std::size_t target, const Clamps& clamps) {
  const auto& L = m.config.layers;
  if (acts.a.size() != L.size() || acts.a.back().size() != L.back()) throw PreconditionError("activation shape mismatch");
  if (target >= L.back()) throw PreconditionError("target class out of range");

  std::vector<std::vector<double>> delta(L.size());
  delta.back() = acts.a.back();
  delta.back()[target] -= 1.0;
  for (std::size_t l = L.size() - 2; l >= 1; --l) {
    delta[l].assign(L[l], 0.0);
    for (std::size_t i = 0; i < L[l]; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < L[l + 1]; ++k) s += m.w(l, k, i) * delta[l + 1][k];
      const double a = acts.a[l][i];
      delta[l][i] = s * a * (1.0 - a);
    }
    if (l == m.config.pinch_layer) {
      for (const auto& [k, known] : clamps) {
        const double a = acts.computed.at(k);
        delta[l][k] = -m.config.clamp_weight * (known - a) * a * (1.0 - a);
      }
    }
  }

  Gradients g;
  for (std::size_t l = 0; l + 1 < L.size(); ++l) {
    std::vector<double> gw(L[l] * L[l + 1]);
    for (std::size_t k = 0; k < L[l + 1]; ++k)
      for (std::size_t i = 0; i < L[l]; ++i) gw[k * L[l] + i] = delta[l + 1][k] * acts.a[l][i];
    g.w.push_back(std::move(gw));
    g.b.push_back(delta[l + 1]);
  }
  return g;
}

double composite_loss(const ClampedMLP& m, std::span<const double> input, std::size_t target, const Clamps& clamps) {
  return loss_of(m, forward(m, input, clamps), target, clamps);
}

namespace {

// Composite loss in extended precision, for the finite-difference reference.
long double reference_loss(const ClampedMLP& m, std::span<const double> input, std::size_t target,
                           const Clamps& clamps) {
  const auto& L = m.config.layers;
  std::vector<long double> a(input.begin(), input.end());
  long double penalty = 0;
  for (std::size_t l = 0; l + 1 < L.size(); ++l) {
    std::vector<long double> z(L[l + 1]);
    for (std::size_t i = 0; i < L[l + 1]; ++i) {
      long double s = m.biases[l][i];
      for (std::size_t j = 0; j < L[l]; ++j) s += static_cast<long double>(m.w(l, i, j)) * a[j];
      z[i] = s;
    }
    if (l + 2 == L.size()) {
      const long double mx = *std::max_element(z.begin(), z.end());
      long double sum = 0;
      for (auto v : z) sum += std::exp(v - mx);
      return mx + std::log(sum) - z[target] + penalty;
    }
    for (auto& v : z) v = 1.0L / (1.0L + std::exp(-v));
    if (l + 1 == m.config.pinch_layer) {
      for (const auto& [k, known] : clamps) {
        const long double diff = known - z[k];
        penalty += m.config.clamp_weight / 2.0L * diff * diff;
        z[k] = known;
      }
    }
    a = std::move(z);
  }
  return 0;
}

}  // namespace

double grad_check(const ClampedMLP& m, std::span<const double> input, std::size_t target, const Clamps& clamps,
                  double eps) {
  if (!(eps > 0)) throw PreconditionError("finite-difference step must be positive");
  const auto g = backward(m, forward(m, input, clamps), target, clamps);
  ClampedMLP probe = m;
  double worst = 0;
  auto check = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + eps;
    const long double up = reference_loss(probe, input, target, clamps);
    param = saved - eps;
    const long double down = reference_loss(probe, input, target, clamps);
    param = saved;
    const double numeric = static_cast<double>((up - down) / (2.0L * eps));
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric)));
  };
  for (std::size_t l = 0; l < probe.weights.size(); ++l) {
    for (std::size_t i = 0; i < probe.weights[l].size(); ++i) check(probe.weights[l][i], g.w[l][i]);
    for (std::size_t i = 0; i < probe.biases[l].size(); ++i) check(probe.biases[l][i], g.b[l][i]);
  }
  return worst;
}

TrainResult train(ClampedMLP m, const std::vector<TrainingExample>& examples, std::size_t epochs) {
  m.config.validate();
  const auto& L = m.config.layers;
  const double eta = m.config.learning_rate;
  const double kappa = m.config.importance_factor;
  Rng rng(m.config.seed);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  TrainResult result;
  std::vector<double> first_rates(L[0]);
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    double total = 0;
    for (auto idx : order) {
      const auto& ex = examples[idx];
      const auto acts = forward(m, ex.input, ex.clamps);
      total += loss_of(m, acts, ex.target, ex.clamps);
      const auto g = backward(m, acts, ex.target, ex.clamps);
      for (std::size_t j = 0; j < L[0]; ++j)
        first_rates[j] = ex.importance.empty() ? eta : eta * (1.0 + kappa * ex.importance[j]);
      for (std::size_t l = 0; l + 1 < L.size(); ++l) {
        auto& w = m.weights[l];
        for (std::size_t k = 0; k < L[l + 1]; ++k) {
          for (std::size_t j = 0; j < L[l]; ++j) {
            const double rate = l == 0 ? first_rates[j] : eta;
            w[k * L[l] + j] -= rate * g.w[l][k * L[l] + j];
          }
          m.biases[l][k] -= eta * g.b[l][k];
        }
      }
    }
    const double mean = examples.empty() ? 0.0 : total / static_cast<double>(examples.size());
    if (!std::isfinite(mean)) throw DivergenceError("training loss became non-finite in epoch " + std::to_string(e));
    result.losses.push_back(mean);
  }
  result.model = std::move(m);
  return result;
}

// ---- encoding ---------------------------------------------------------------

InputEncoder::InputEncoder(const Dataset& training) : schema_(training.schema()) {
  const auto n = schema_.size();
  lo_.assign(n, 0.0);
  hi_.assign(n, 0.0);
  mean_.assign(n, 0.0);
  for (std::size_t f = 0; f < n; ++f) {
    offsets_.push_back(sources_.size());
    const auto& fs = schema_[f];
    if (fs.kind == FeatureKind::categorical) {
      for (std::size_t c = 0; c < fs.categories.size(); ++c) sources_.push_back(f);
      continue;
    }
    sources_.push_back(f);
    if (fs.kind != FeatureKind::numeric) continue;
    bool first = true;
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < training.num_rows(); ++r) {
      const double v = training.at(r, f);
      if (is_missing(v)) continue;
      if (first || v < lo_[f]) lo_[f] = v;
      if (first || v > hi_[f]) hi_[f] = v;
      first = false;
      sum += v;
      ++count;
    }
    mean_[f] = count ? sum / static_cast<double>(count) : 0.0;
  }
}

std::vector<double> InputEncoder::encode(std::span<const double> row) const {
  if (row.size() != schema_.size()) throw PreconditionError("row width does not match the encoder schema");
  std::vector<double> out(sources_.size(), 0.0);
  for (std::size_t f = 0; f < schema_.size(); ++f) {
    const double v = row[f];
    const auto at = offsets_[f];
    switch (schema_[f].kind) {
      case FeatureKind::categorical:
        if (!is_missing(v)) out[at + static_cast<std::size_t>(v)] = 1.0;
        break;
      case FeatureKind::boolean: out[at] = is_missing(v) ? 0.5 : v; break;
      case FeatureKind::numeric: {
        const double x = is_missing(v) ? mean_[f] : v;
        out[at] = hi_[f] > lo_[f] ? (x - lo_[f]) / (hi_[f] - lo_[f]) : 0.0;
        break;
      }
    }
  }
  return out;
}

Json InputEncoder::to_json() const {
  return {{"schema", schema_to_json(schema_)}, {"lo", lo_}, {"hi", hi_}, {"mean", mean_}};
}

InputEncoder InputEncoder::from_json(const Json& j) {
  try {
    InputEncoder e;
    e.schema_ = schema_from_json(j.at("schema"));
    e.lo_ = j.at("lo").get<std::vector<double>>();
    e.hi_ = j.at("hi").get<std::vector<double>>();
    e.mean_ = j.at("mean").get<std::vector<double>>();
    if (e.lo_.size() != e.schema_.size() || e.hi_.size() != e.schema_.size() || e.mean_.size() != e.schema_.size())
      throw ParseError("encoder ranges do not match its schema", 0);
    for (std::size_t f = 0; f < e.schema_.size(); ++f) {
      e.offsets_.push_back(e.sources_.size());
      const auto width = e.schema_[f].kind == FeatureKind::categorical ? e.schema_[f].categories.size() : 1;
      for (std::size_t c = 0; c < width; ++c) e.sources_.push_back(f);
    }
    return e;
  } catch (const Json::exception& ex) {
    throw ParseError(std::string("encoder: ") + ex.what(), 0);
  }
}

std::vector<double> importance_inputs(const InputEncoder& enc, const ImportanceProfile& profile) {
  std::vector<double> out(enc.width(), 0.0);
  for (std::size_t j = 0; j < enc.width(); ++j) {
    auto it = profile.weights.find(enc.schema().at(enc.source_feature(j)).name);
    if (it != profile.weights.end()) out[j] = std::abs(it->second);
  }
  return out;
}

// ---- constraint clouds ------------------------------------------------------

namespace {

double project(double v, const Threshold& th) {
  switch (th.op) {
    case CmpOp::gt: return v > th.value ? v : std::nextafter(th.value, HUGE_VAL);
    case CmpOp::ge: return std::max(v, th.value);
    case CmpOp::lt: return v < th.value ? v : std::nextafter(th.value, -HUGE_VAL);
    case CmpOp::le: return std::min(v, th.value);
    case CmpOp::eq: return th.value;
    case CmpOp::ne: return v != th.value ? v : std::nextafter(th.value, HUGE_VAL);
  }
  return v;
}

}  // namespace

bool clone_satisfies(const Dataset& d, std::span<const double> row, RowId source, const CompiledConstraints& cc) {
  auto it = cc.per_row.find(source);
  if (it == cc.per_row.end()) return true;
  const auto src = d.row(d.require_row(source));
  for (const auto& rc : it->second) {
    const auto f = d.require_feature(rc.feature());
    if (const auto* th = std::get_if<Threshold>(&rc.form)) {
      if (!compare(row[f], th->op, th->value)) return false;
    } else if (const auto* dir = std::get_if<Direction>(&rc.form)) {
      if (is_missing(row[f])) return false;
      if (dir->side == Side::high ? row[f] < src[f] : row[f] > src[f]) return false;
    }
  }
  return true;
}

AugmentedData constraint_cloud_augment(const Dataset& d, const std::vector<LabeledExample>& labels,
                                       const CompiledConstraints& cc, std::size_t n_per_example, double radius,
                                       std::uint64_t seed) {
  if (!(radius > 0)) throw PreconditionError("cloud radius must be positive");
  AugmentedData out{d, labels, {}};
  if (n_per_example == 0 || d.empty()) return out;
  const auto stats = compute_stats(d);
  RowId next_id = *std::max_element(d.row_ids().begin(), d.row_ids().end()) + 1;
  Rng rng(seed);
  std::vector<std::vector<double>> rows;
  std::vector<RowId> ids;
  for (const auto& l : labels) {
    auto it = cc.per_row.find(l.row_id);
    if (it == cc.per_row.end()) continue;
    const auto src = d.row(d.require_row(l.row_id));
    for (std::size_t c = 0; c < n_per_example; ++c) {
      std::vector<double> row(src.begin(), src.end());
      for (std::size_t f = 0; f < d.num_features(); ++f) {
        if (d.feature(f).kind != FeatureKind::numeric || is_missing(row[f])) continue;
        const auto& st = stats.numeric(f);
        row[f] += rng.normal() * radius * (st.available ? st.std : 0.0);
      }
      for (const auto& rc : it->second) {
        const auto f = d.require_feature(rc.feature());
        if (d.feature(f).kind != FeatureKind::numeric || is_missing(row[f])) continue;
        if (const auto* th = std::get_if<Threshold>(&rc.form)) row[f] = project(row[f], *th);
      }
      for (const auto& rc : it->second) {
        const auto f = d.require_feature(rc.feature());
        if (is_missing(row[f])) continue;
        if (const auto* dir = std::get_if<Direction>(&rc.form))
          row[f] = dir->side == Side::high ? std::max(row[f], src[f]) : std::min(row[f], src[f]);
      }
      rows.push_back(std::move(row));
      ids.push_back(next_id);
      out.labels.push_back({next_id, l.label, l.confidence});
      out.clone_sources.push_back(l.row_id);
      ++next_id;
    }
  }
  std::vector<std::vector<double>> all;
  std::vector<RowId> all_ids = d.row_ids();
  for (std::size_t r = 0; r < d.num_rows(); ++r) all.emplace_back(d.row(r).begin(), d.row(r).end());
  all.insert(all.end(), rows.begin(), rows.end());
  all_ids.insert(all_ids.end(), ids.begin(), ids.end());
  out.dataset = Dataset(d.schema(), all, all_ids);
  return out;
}

// ---- serialization ----------------------------------------------------------

Json mlp_to_json(const ClampedMLP& m) {
  const auto& c = m.config;
  Json clamp = Json::object();
  for (const auto& [name, node] : m.clamp.nodes) clamp[name] = node;
  return {{"layers", c.layers},
          {"pinch_layer", c.pinch_layer},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"clamp_weight", c.clamp_weight},
          {"importance_factor", c.importance_factor},
          {"seed", c.seed},
          {"weights", m.weights},
          {"biases", m.biases},
          {"clamp", clamp}};
}

ClampedMLP mlp_from_json(const Json& j) {
  try {
    ClampedMLP m;
    auto& c = m.config;
    c.layers = j.at("layers").get<std::vector<std::size_t>>();
    c.pinch_layer = j.at("pinch_layer").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.clamp_weight = j.at("clamp_weight").get<double>();
    c.importance_factor = j.at("importance_factor").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    m.weights = j.at("weights").get<std::vector<std::vector<double>>>();
    m.biases = j.at("biases").get<std::vector<std::vector<double>>>();
    if (m.weights.size() + 1 != c.layers.size() || m.biases.size() + 1 != c.layers.size())
      throw ParseError("layer count does not match weight arrays", 0);
    for (std::size_t l = 0; l + 1 < c.layers.size(); ++l)
      if (m.weights[l].size() != c.layers[l] * c.layers[l + 1] || m.biases[l].size() != c.layers[l + 1])
        throw ParseError("weight array shape mismatch at layer " + std::to_string(l), 0);
    for (const auto& [name, node] : j.at("clamp").items()) m.clamp.nodes[name] = node.get<std::size_t>();
    return m;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("mlp: ") + e.what(), 0);
  }
}

}  // namespace talkback

namespace talkback {

std::vector<double> MLPModel::proba(std::span<const double> row) const {
  return predict_proba(net, encoder.encode(row));
}

ClassId MLPModel::predict(std::span<const double> row) const {
  const auto p = proba(row);
  return classes.at(static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()));
}

std::vector<TrainingExample> mlp_examples(const MLPModel& model, const Dataset& d, const CompiledConstraints& cc,
                                          const std::vector<LabeledExample>& labels) {
  std::map<std::string, std::pair<double, double>> ranges;
  for (const auto& ia : cc.intermediates) {
    const double v = annotation_number(ia.value);
    auto [it, fresh] = ranges.try_emplace(ia.name, v, v);
    if (!fresh) {
      it->second.first = std::min(it->second.first, v);
      it->second.second = std::max(it->second.second, v);
    }
  }
  std::map<RowId, Clamps> clamps;
  for (const auto& ia : cc.intermediates) {
    auto node = model.net.clamp.nodes.find(ia.name);
    if (node == model.net.clamp.nodes.end()) continue;
    double v = annotation_number(ia.value);
    if (!std::holds_alternative<bool>(ia.value)) {
      const auto [lo, hi] = ranges.at(ia.name);
      v = hi > lo ? (v - lo) / (hi - lo) : std::clamp(v, 0.0, 1.0);
    }
    clamps[ia.row_id][node->second] = v;
  }
  std::vector<TrainingExample> out;
  for (const auto& l : labels) {
    auto cls = std::find(model.classes.begin(), model.classes.end(), l.label);
    if (cls == model.classes.end()) throw PreconditionError("label " + std::to_string(l.label) + " is not a model class");
    TrainingExample ex;
    ex.input = model.encoder.encode(d.row(d.require_row(l.row_id)));
    ex.target = static_cast<std::size_t>(cls - model.classes.begin());
    if (auto it = clamps.find(l.row_id); it != clamps.end()) ex.clamps = it->second;
    if (auto it = cc.profiles.find(l.row_id); it != cc.profiles.end())
      ex.importance = importance_inputs(model.encoder, it->second);
    out.push_back(std::move(ex));
  }
  return out;
}

MLPModel fit_mlp(const Dataset& d, const CompiledConstraints& cc, const MLPConfig& cfg) {
  MLPModel model;
  for (const auto& l : cc.labels)
    if (std::find(model.classes.begin(), model.classes.end(), l.label) == model.classes.end())
      model.classes.push_back(l.label);
  std::sort(model.classes.begin(), model.classes.end());
  if (model.classes.size() < 2) throw PreconditionError("MLP training needs labels from at least two classes");
  if (cfg.layers.empty()) throw ConfigError("at least one hidden layer is required");

  model.encoder = InputEncoder(d);
  std::set<std::string> names;
  for (const auto& ia : cc.intermediates) names.insert(ia.name);

  MLPConfig full = cfg;
  full.layers.clear();
  full.layers.push_back(model.encoder.width());
  full.layers.insert(full.layers.end(), cfg.layers.begin(), cfg.layers.end());
  full.layers.push_back(model.classes.size());
  if (full.pinch_layer < 1 || full.pinch_layer > cfg.layers.size())
    throw ConfigError("pinch layer must be a hidden layer");
  auto& pinch = full.layers[full.pinch_layer];
  if (names.size() > pinch) {
    model.warnings.push_back("pinch layer widened from " + std::to_string(pinch) + " to " +
                             std::to_string(names.size()) + " nodes to hold every intermediate");
    pinch = names.size();
  }
  model.net = init_mlp(full);
  std::size_t node = 0;
  for (const auto& n : names) model.net.clamp.nodes[n] = node++;

  auto result = train(model.net, mlp_examples(model, d, cc, cc.labels), full.epochs);
  model.net = std::move(result.model);
  model.losses = std::move(result.losses);
  return model;
}

MLPModel continue_mlp(MLPModel model, const Dataset& d, const CompiledConstraints& cc,
                      const std::vector<LabeledExample>& labels, std::size_t epochs) {
  auto result = train(model.net, mlp_examples(model, d, cc, labels), epochs);
  model.net = std::move(result.model);
  model.losses.insert(model.losses.end(), result.losses.begin(), result.losses.end());
  return model;
}

Json mlp_model_to_json(const MLPModel& m) {
  return {{"encoder", m.encoder.to_json()},
          {"net", mlp_to_json(m.net)},
          {"classes", m.classes},
          {"losses", m.losses},
          {"warnings", m.warnings}};
}

MLPModel mlp_model_from_json(const Json& j) {
  try {
    MLPModel m;
    m.encoder = InputEncoder::from_json(j.at("encoder"));
    m.net = mlp_from_json(j.at("net"));
    m.classes = j.at("classes").get<std::vector<ClassId>>();
    m.losses = j.at("losses").get<std::vector<double>>();
    m.warnings = j.at("warnings").get<std::vector<std::string>>();
    if (m.net.config.layers.front() != m.encoder.width() || m.net.config.layers.back() != m.classes.size())
      throw ParseError("network shape does not match encoder and classes", 0);
    return m;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("mlp model: ") + e.what(), 0);
  }
}

}  // namespace talkback
