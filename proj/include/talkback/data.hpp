#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace talkback {

using RowId = std::int64_t;
using ClassId = int;

enum class FeatureKind { numeric, categorical, boolean };

std::string_view to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(std::string_view s);

struct FeatureSchema {
  std::string name;
  FeatureKind kind = FeatureKind::numeric;
  std::vector<std::string> categories;  // categorical only

  friend bool operator==(const FeatureSchema&, const FeatureSchema&) = default;
};

// Cells are doubles: numeric values as-is, categorical values as the index
// into FeatureSchema::categories, booleans as 0/1. NaN marks a missing cell.
inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
inline bool is_missing(double v) { return std::isnan(v); }

class Dataset {
 public:
  Dataset() = default;
  /// Throws SchemaError when any row or schema invariant is broken.
  Dataset(std::vector<FeatureSchema> schema, std::vector<std::vector<double>> rows,
          std::vector<RowId> row_ids = {});

  const std::vector<FeatureSchema>& schema() const { return schema_; }
  const FeatureSchema& feature(std::size_t f) const { return schema_.at(f); }
  std::size_t num_rows() const { return row_ids_.size(); }
  std::size_t num_features() const { return schema_.size(); }
  bool empty() const { return row_ids_.empty(); }

  double at(std::size_t row, std::size_t f) const { return cells_[row * schema_.size() + f]; }
  std::span<const double> row(std::size_t r) const {
    return {cells_.data() + r * schema_.size(), schema_.size()};
  }
  std::vector<double> column(std::size_t f) const;

  RowId row_id(std::size_t r) const { return row_ids_.at(r); }
  const std::vector<RowId>& row_ids() const { return row_ids_; }
  std::optional<std::size_t> index_of(RowId id) const;
  std::size_t require_row(RowId id) const;

  std::optional<std::size_t> feature_index(std::string_view name) const;
  std::size_t require_feature(std::string_view name) const;

  /// Cell text as it appears in CSV: category name, true/false, or a
  /// round-trippable number; empty for missing.
  std::string format_value(std::size_t f, double v) const;
  /// Inverse of format_value. Throws SchemaError on an undeclared category
  /// or unparsable text.
  double parse_value(std::size_t f, std::string_view text) const;

  Dataset with_column(FeatureSchema feature, std::vector<double> values) const;
  Dataset with_rows(const std::vector<std::vector<double>>& rows, const std::vector<RowId>& ids) const;

 private:
  void validate_row(std::span<const double> row, std::size_t r) const;

  std::vector<FeatureSchema> schema_;
  std::vector<double> cells_;
  std::vector<RowId> row_ids_;
  std::unordered_map<RowId, std::size_t> id_index_;
};

struct LabeledExample {
  RowId row_id = 0;
  ClassId label = 0;
  double confidence = 1.0;

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

// QbB mode fixes the two classes.
inline constexpr ClassId kUnwanted = 0;
inline constexpr ClassId kWanted = 1;

struct NumericStats {
  bool available = false;
  std::size_t count = 0;
  std::size_t missing = 0;
  double min = 0, max = 0, mean = 0, std = 0;
  double p25 = 0, p50 = 0, p75 = 0;
};

struct CategoricalStats {
  std::map<std::string, std::size_t> frequencies;
  std::size_t missing = 0;
};

struct FeatureStats {
  std::vector<std::variant<NumericStats, CategoricalStats>> features;

  const NumericStats& numeric(std::size_t f) const { return std::get<NumericStats>(features.at(f)); }
};

/// Linear interpolation between closest ranks on sorted data; p in [0, 100].
double percentile(std::span<const double> sorted, double p);

/// Throws PreconditionError on an empty dataset.
FeatureStats compute_stats(const Dataset& d);

// Gower distance with numeric ranges frozen from a reference (training) set.
// Values outside the reference range clamp their per-feature term to 1.
class GowerMetric {
 public:
  explicit GowerMetric(const Dataset& reference);

  /// Throws Error when no feature is present in both rows.
  double distance(std::span<const double> a, std::span<const double> b) const;
  /// Per-feature terms; nullopt where either side is missing.
  std::vector<std::optional<double>> components(std::span<const double> a,
                                                std::span<const double> b) const;

 private:
  std::vector<FeatureKind> kinds_;
  std::vector<double> lo_, hi_;
};

double gower_distance(const Dataset& d, RowId i, RowId j);

/// Parses RFC-4180 CSV with a mandatory header. Kinds are inferred unless a
/// hint is given; inferred categories are sorted.
Dataset load_csv(std::string_view text, std::span<const FeatureSchema> schema_hint = {});
std::string to_csv(const Dataset& d);

std::string format_number(double v);

}  // namespace talkback
