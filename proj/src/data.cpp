#include "talkback/data.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <set>

#include "talkback/errors.hpp"

namespace talkback {

std::string_view to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::numeric: return "numeric";
    case FeatureKind::categorical: return "categorical";
    case FeatureKind::boolean: return "boolean";
  }
  return "unknown";
}

FeatureKind feature_kind_from_string(std::string_view s) {
  if (s == "numeric") return FeatureKind::numeric;
  if (s == "categorical") return FeatureKind::categorical;
  if (s == "boolean") return FeatureKind::boolean;
  throw SchemaError("unknown feature kind '" + std::string(s) + "'");
}

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

Dataset::Dataset(std::vector<FeatureSchema> schema, std::vector<std::vector<double>> rows,
                 std::vector<RowId> row_ids)
    : schema_(std::move(schema)) {
  std::set<std::string> names;
  for (const auto& f : schema_) {
    if (f.name.empty()) throw SchemaError("feature with empty name");
    if (!names.insert(f.name).second) throw SchemaError("duplicate feature name '" + f.name + "'");
    if (f.kind == FeatureKind::categorical && f.categories.empty())
      throw SchemaError("categorical feature '" + f.name + "' has no categories");
    if (f.kind != FeatureKind::categorical && !f.categories.empty())
      throw SchemaError("feature '" + f.name + "' declares categories but is not categorical");
  }
  if (row_ids.empty()) {
    row_ids.resize(rows.size());
    std::iota(row_ids.begin(), row_ids.end(), RowId{0});
  }
  if (row_ids.size() != rows.size()) throw SchemaError("row id count does not match row count");
  cells_.reserve(rows.size() * schema_.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != schema_.size())
      throw SchemaError("row " + std::to_string(r) + " has " + std::to_string(rows[r].size()) +
                        " cells, expected " + std::to_string(schema_.size()));
    validate_row(rows[r], r);
    cells_.insert(cells_.end(), rows[r].begin(), rows[r].end());
    if (!id_index_.emplace(row_ids[r], r).second)
      throw SchemaError("duplicate row id " + std::to_string(row_ids[r]));
  }
  row_ids_ = std::move(row_ids);
}

void Dataset::validate_row(std::span<const double> row, std::size_t r) const {
  for (std::size_t f = 0; f < schema_.size(); ++f) {
    const double v = row[f];
    if (is_missing(v)) continue;
    const auto& fs = schema_[f];
    switch (fs.kind) {
      case FeatureKind::numeric:
        if (!std::isfinite(v))
          throw SchemaError("row " + std::to_string(r) + ": non-finite value in '" + fs.name + "'");
        break;
      case FeatureKind::boolean:
        if (v != 0.0 && v != 1.0)
          throw SchemaError("row " + std::to_string(r) + ": boolean '" + fs.name + "' not 0/1");
        break;
      case FeatureKind::categorical:
        if (v < 0 || v != std::floor(v) || v >= static_cast<double>(fs.categories.size()))
          throw SchemaError("row " + std::to_string(r) + ": undeclared category in '" + fs.name + "'");
        break;
    }
  }
}

std::vector<double> Dataset::column(std::size_t f) const {
  std::vector<double> out(num_rows());
  for (std::size_t r = 0; r < num_rows(); ++r) out[r] = at(r, f);
  return out;
}

std::optional<std::size_t> Dataset::index_of(RowId id) const {
  auto it = id_index_.find(id);
  if (it == id_index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Dataset::require_row(RowId id) const {
  auto idx = index_of(id);
  if (!idx) throw SchemaError("unknown row id " + std::to_string(id));
  return *idx;
}

std::optional<std::size_t> Dataset::feature_index(std::string_view name) const {
  for (std::size_t f = 0; f < schema_.size(); ++f)
    if (schema_[f].name == name) return f;
  return std::nullopt;
}

std::size_t Dataset::require_feature(std::string_view name) const {
  auto idx = feature_index(name);
  if (!idx) throw SchemaError("unknown feature '" + std::string(name) + "'");
  return *idx;
}

std::string Dataset::format_value(std::size_t f, double v) const {
  if (is_missing(v)) return {};
  const auto& fs = schema_.at(f);
  switch (fs.kind) {
    case FeatureKind::numeric: return format_number(v);
    case FeatureKind::boolean: return v != 0.0 ? "true" : "false";
    case FeatureKind::categorical: return fs.categories.at(static_cast<std::size_t>(v));
  }
  return {};
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

double Dataset::parse_value(std::size_t f, std::string_view text) const {
  if (text.empty()) return kMissing;
  const auto& fs = schema_.at(f);
  switch (fs.kind) {
    case FeatureKind::numeric: {
      double v = 0;
      auto res = std::from_chars(text.data(), text.data() + text.size(), v);
      if (res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(v))
        throw SchemaError("'" + std::string(text) + "' is not a number for '" + fs.name + "'");
      return v;
    }
    case FeatureKind::boolean: {
      const auto s = lower(text);
      if (s == "true" || s == "yes" || s == "1") return 1.0;
      if (s == "false" || s == "no" || s == "0") return 0.0;
      throw SchemaError("'" + std::string(text) + "' is not a boolean for '" + fs.name + "'");
    }
    case FeatureKind::categorical: {
      auto it = std::find(fs.categories.begin(), fs.categories.end(), text);
      if (it == fs.categories.end())
        throw SchemaError("'" + std::string(text) + "' is not a declared category of '" + fs.name + "'");
      return static_cast<double>(it - fs.categories.begin());
    }
  }
  return kMissing;
}

Dataset Dataset::with_column(FeatureSchema feature, std::vector<double> values) const {
  if (values.size() != num_rows()) throw SchemaError("appended column length mismatch");
  auto schema = schema_;
  schema.push_back(std::move(feature));
  std::vector<std::vector<double>> rows(num_rows());
  for (std::size_t r = 0; r < num_rows(); ++r) {
    auto src = row(r);
    rows[r].assign(src.begin(), src.end());
    rows[r].push_back(values[r]);
  }
  return Dataset(std::move(schema), std::move(rows), row_ids_);
}

Dataset Dataset::with_rows(const std::vector<std::vector<double>>& extra,
                           const std::vector<RowId>& ids) const {
  std::vector<std::vector<double>> rows;
  rows.reserve(num_rows() + extra.size());
  for (std::size_t r = 0; r < num_rows(); ++r) rows.emplace_back(row(r).begin(), row(r).end());
  rows.insert(rows.end(), extra.begin(), extra.end());
  auto all_ids = row_ids_;
  all_ids.insert(all_ids.end(), ids.begin(), ids.end());
  return Dataset(schema_, std::move(rows), std::move(all_ids));
}

double percentile(std::span<const double> sorted, double p) {
  if (sorted.empty()) return kMissing;
  const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

FeatureStats compute_stats(const Dataset& d) {
  if (d.empty()) throw PreconditionError("compute_stats on an empty dataset");
  FeatureStats stats;
  for (std::size_t f = 0; f < d.num_features(); ++f) {
    const auto& fs = d.feature(f);
    if (fs.kind == FeatureKind::numeric) {
      NumericStats ns;
      std::vector<double> vals;
      for (std::size_t r = 0; r < d.num_rows(); ++r) {
        const double v = d.at(r, f);
        if (is_missing(v)) ++ns.missing;
        else vals.push_back(v);
      }
      ns.count = vals.size();
      if (!vals.empty()) {
        std::sort(vals.begin(), vals.end());
        ns.available = true;
        ns.min = vals.front();
        ns.max = vals.back();
        double sum = 0;
        for (double v : vals) sum += v;
        ns.mean = sum / static_cast<double>(vals.size());
        double ss = 0;
        for (double v : vals) ss += (v - ns.mean) * (v - ns.mean);
        ns.std = std::sqrt(ss / static_cast<double>(vals.size()));
        ns.p25 = percentile(vals, 25);
        ns.p50 = percentile(vals, 50);
        ns.p75 = percentile(vals, 75);
      }
      stats.features.emplace_back(ns);
    } else {
      CategoricalStats cs;
      for (std::size_t r = 0; r < d.num_rows(); ++r) {
        const double v = d.at(r, f);
        if (is_missing(v)) ++cs.missing;
        else ++cs.frequencies[d.format_value(f, v)];
      }
      stats.features.emplace_back(std::move(cs));
    }
  }
  return stats;
}

GowerMetric::GowerMetric(const Dataset& reference) {
  const auto n = reference.num_features();
  kinds_.resize(n);
  lo_.assign(n, 0.0);
  hi_.assign(n, 0.0);
  for (std::size_t f = 0; f < n; ++f) {
    kinds_[f] = reference.feature(f).kind;
    if (kinds_[f] != FeatureKind::numeric) continue;
    bool seen = false;
    for (std::size_t r = 0; r < reference.num_rows(); ++r) {
      const double v = reference.at(r, f);
      if (is_missing(v)) continue;
      if (!seen) {
        lo_[f] = hi_[f] = v;
        seen = true;
      } else {
        lo_[f] = std::min(lo_[f], v);
        hi_[f] = std::max(hi_[f], v);
      }
    }
  }
}

std::vector<std::optional<double>> GowerMetric::components(std::span<const double> a,
                                                           std::span<const double> b) const {
  std::vector<std::optional<double>> out(kinds_.size());
  for (std::size_t f = 0; f < kinds_.size(); ++f) {
    if (is_missing(a[f]) || is_missing(b[f])) continue;
    if (kinds_[f] == FeatureKind::numeric) {
      const double gap = std::abs(a[f] - b[f]);
      const double range = hi_[f] - lo_[f];
      if (gap == 0.0) out[f] = 0.0;
      else if (range <= 0.0) out[f] = 1.0;
      else out[f] = std::min(1.0, gap / range);
    } else {
      out[f] = a[f] == b[f] ? 0.0 : 1.0;
    }
  }
  return out;
}

double GowerMetric::distance(std::span<const double> a, std::span<const double> b) const {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& c : components(a, b)) {
    if (!c) continue;
    sum += *c;
    ++n;
  }
  if (n == 0) throw Error("gower distance undefined: no feature present in both rows");
  return sum / static_cast<double>(n);
}

double gower_distance(const Dataset& d, RowId i, RowId j) {
  GowerMetric metric(d);
  return metric.distance(d.row(d.require_row(i)), d.row(d.require_row(j)));
}

}  // namespace talkback
