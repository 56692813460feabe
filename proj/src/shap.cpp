#include "talkback/shap.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "talkback/errors.hpp"
#include "talkback/rng.hpp"

namespace talkback {

void ShapConfig::validate() const {
  if (background_cap < 1) throw ConfigError("background cap must be at least 1");
  if (permutations < 1) throw ConfigError("permutations must be at least 1");
  if (exact_cap > 24) throw ConfigError("exact-mode feature cap above 24 is not supported");
}

double AttributionVector::value(const std::string& feature) const {
  auto it = std::find(features.begin(), features.end(), feature);
  if (it == features.end()) throw PreconditionError("no attribution for feature '" + feature + "'");
  return values[static_cast<std::size_t>(it - features.begin())];
}

std::vector<std::vector<double>> select_background(const Dataset& d, const ShapConfig& cfg) {
  cfg.validate();
  if (d.empty()) throw PreconditionError("background needs at least one row");
  std::vector<std::size_t> idx(d.num_rows());
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.size() > cfg.background_cap) {
    Rng rng(cfg.seed);
    rng.shuffle(idx);
    idx.resize(cfg.background_cap);
    std::sort(idx.begin(), idx.end());
  }
  std::vector<std::vector<double>> out;
  for (auto r : idx) out.emplace_back(d.row(r).begin(), d.row(r).end());
  return out;
}

namespace {

void check_inputs(std::span<const double> row, const std::vector<std::vector<double>>& background,
                  const std::vector<std::string>& features) {
  if (background.empty()) throw PreconditionError("background set is empty");
  if (row.size() != features.size()) throw PreconditionError("row width does not match the feature names");
  for (const auto& b : background)
    if (b.size() != row.size()) throw PreconditionError("background row width does not match the explained row");
}

double mean_output(const ModelFn& f, const std::vector<std::vector<double>>& background) {
  double sum = 0;
  for (const auto& b : background) sum += f(b);
  return sum / static_cast<double>(background.size());
}

}  // namespace

AttributionVector exact_shapley(const ModelFn& f, std::span<const double> row,
                                const std::vector<std::vector<double>>& background,
                                const std::vector<std::string>& features, const ShapConfig& cfg) {
  cfg.validate();
  check_inputs(row, background, features);
  const std::size_t n = row.size();
  if (n > cfg.exact_cap)
    throw PreconditionError(std::to_string(n) + " features exceed the exact-mode cap of " +
                            std::to_string(cfg.exact_cap) + "; use sampled mode");

  const std::size_t masks = std::size_t{1} << n;
  std::vector<double> v(masks);
  std::vector<double> composite(n);
  for (std::size_t s = 0; s < masks; ++s) {
    double sum = 0;
    for (const auto& b : background) {
      for (std::size_t i = 0; i < n; ++i) composite[i] = (s >> i) & 1 ? row[i] : b[i];
      sum += f(composite);
    }
    v[s] = sum / static_cast<double>(background.size());
  }
  // weight[k] = k! (n - k - 1)! / n!
  std::vector<double> weight(n);
  for (std::size_t k = 0; k < n; ++k) {
    double w = 1.0 / static_cast<double>(n);
    for (std::size_t t = 1; t <= k; ++t) w *= static_cast<double>(t) / static_cast<double>(n - t);
    weight[k] = w;
  }

  AttributionVector out;
  out.features = features;
  out.values.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    double phi = 0;
    for (std::size_t s = 0; s < masks; ++s) {
      if (s & bit) continue;
      phi += weight[static_cast<std::size_t>(std::popcount(s))] * (v[s | bit] - v[s]);
    }
    out.values[i] = phi;
  }
  out.base = v[0];
  out.output = f(row);
  out.mode = ShapMode::exact;
  return out;
}

AttributionVector sampled_shapley(const ModelFn& f, std::span<const double> row,
                                  const std::vector<std::vector<double>>& background,
                                  const std::vector<std::string>& features, const ShapConfig& cfg) {
  cfg.validate();
  check_inputs(row, background, features);
  const std::size_t n = row.size();
  Rng rng(cfg.seed);
  std::vector<std::size_t> bg(background.size());
  std::iota(bg.begin(), bg.end(), 0);
  rng.shuffle(bg);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);

  std::vector<double> sums(n, 0.0);
  std::vector<double> composite(n);
  for (std::size_t p = 0; p < cfg.permutations; ++p) {
    rng.shuffle(perm);
    const auto& b = background[bg[p % bg.size()]];
    composite.assign(b.begin(), b.end());
    double prev = f(composite);
    for (auto i : perm) {
      composite[i] = row[i];
      const double next = f(composite);
      sums[i] += next - prev;
      prev = next;
    }
  }
  AttributionVector out;
  out.features = features;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = sums[i] / static_cast<double>(cfg.permutations);
  out.base = mean_output(f, background);
  out.output = f(row);
  out.mode = ShapMode::sampled;
  out.permutations = cfg.permutations;
  out.seed = cfg.seed;
  if (n > 0) {
    const double total = std::accumulate(out.values.begin(), out.values.end(), 0.0);
    out.residual = out.output - out.base - total;
    for (auto& x : out.values) x += out.residual / static_cast<double>(n);
    out.residual_distributed = true;
  }
  return out;
}

AttributionVector shapley(const ModelFn& f, std::span<const double> row,
                          const std::vector<std::vector<double>>& background,
                          const std::vector<std::string>& features, const ShapConfig& cfg) {
  return row.size() <= cfg.exact_cap ? exact_shapley(f, row, background, features, cfg)
                                     : sampled_shapley(f, row, background, features, cfg);
}

double kendall_tau(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw PreconditionError("kendall tau needs equal-length vectors");
  double concordant = 0, discordant = 0, untied_a = 0, untied_b = 0;
  bool same_ties = true;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double da = a[i] - a[j], db = b[i] - b[j];
      if (da != 0) ++untied_a;
      if (db != 0) ++untied_b;
      if ((da == 0) != (db == 0)) same_ties = false;
      if (da * db > 0) ++concordant;
      if (da * db < 0) ++discordant;
    }
  if (untied_a == 0 || untied_b == 0) return untied_a == untied_b && same_ties ? 1.0 : 0.0;
  return (concordant - discordant) / std::sqrt(untied_a * untied_b);
}

ProfileComparison compare_profiles(const ImportanceProfile& human, const AttributionVector& model) {
  auto normalized = [](std::map<std::string, double> m) {
    double max_abs = 0;
    for (const auto& [f, w] : m) max_abs = std::max(max_abs, std::abs(w));
    if (max_abs > 0)
      for (auto& [f, w] : m) w /= max_abs;
    return m;
  };
  std::map<std::string, double> raw_model;
  for (std::size_t i = 0; i < model.features.size(); ++i) raw_model[model.features[i]] = model.values[i];
  const auto h = normalized(human.weights);
  const auto m = normalized(raw_model);

  ProfileComparison out;
  std::vector<double> hv, mv;
  for (const auto& [f, w] : h) {
    auto it = m.find(f);
    if (it == m.end()) continue;
    out.shared.push_back(f);
    hv.push_back(w);
    mv.push_back(it->second);
  }
  if (out.shared.empty()) throw PreconditionError("human profile and attribution share no feature");
  double dot = 0, nh = 0, nm = 0, sq = 0;
  for (std::size_t i = 0; i < hv.size(); ++i) {
    dot += hv[i] * mv[i];
    nh += hv[i] * hv[i];
    nm += mv[i] * mv[i];
    sq += (hv[i] - mv[i]) * (hv[i] - mv[i]);
  }
  out.cosine = nh > 0 && nm > 0 ? dot / std::sqrt(nh * nm) : 0.0;
  out.l2 = std::sqrt(sq);
  out.kendall_tau = kendall_tau(hv, mv);
  return out;
}

Json attribution_to_json(const AttributionVector& a) {
  Json values = Json::object();
  for (std::size_t i = 0; i < a.features.size(); ++i) values[a.features[i]] = a.values[i];
  Json j{{"attributions", values},
         {"features", a.features},
         {"base", a.base},
         {"output", a.output},
         {"mode", a.mode == ShapMode::exact ? "exact" : "sampled"}};
  if (a.mode == ShapMode::sampled)
    j["sampling"] = {{"permutations", a.permutations},
                     {"seed", a.seed},
                     {"residual", a.residual},
                     {"residual_distributed", a.residual_distributed}};
  return j;
}

AttributionVector attribution_from_json(const Json& j) {
  try {
    AttributionVector a;
    a.features = j.at("features").get<std::vector<std::string>>();
    for (const auto& f : a.features) a.values.push_back(j.at("attributions").at(f).get<double>());
    a.base = j.at("base").get<double>();
    a.output = j.at("output").get<double>();
    const auto mode = j.at("mode").get<std::string>();
    if (mode != "exact" && mode != "sampled") throw ParseError("unknown attribution mode '" + mode + "'", 0);
    a.mode = mode == "exact" ? ShapMode::exact : ShapMode::sampled;
    if (a.mode == ShapMode::sampled) {
      const auto& s = j.at("sampling");
      a.permutations = s.at("permutations").get<std::size_t>();
      a.seed = s.at("seed").get<std::uint64_t>();
      a.residual = s.at("residual").get<double>();
      a.residual_distributed = s.at("residual_distributed").get<bool>();
    }
    return a;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("attribution: ") + e.what(), 0);
  }
}

Json comparison_to_json(const ProfileComparison& c) {
  return {{"cosine", c.cosine}, {"l2", c.l2}, {"kendall_tau", c.kendall_tau}, {"shared", c.shared}};
}

}  // namespace talkback
