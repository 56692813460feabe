#include <algorithm>
#include <charconv>
#include <set>

#include "talkback/data.hpp"
#include "talkback/errors.hpp"

namespace talkback {
namespace {

struct Record {
  std::vector<std::string> fields;
  std::size_t line = 0;
};

std::vector<Record> split_records(std::string_view text) {
  std::vector<Record> records;
  Record current;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  current.line = 1;

  auto end_field = [&] {
    current.fields.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    // A lone empty field is a blank line.
    if (!(current.fields.size() == 1 && current.fields[0].empty())) records.push_back(std::move(current));
    current = Record{};
  };

  if (text.size() >= 3 && text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    switch (c) {
      case '"':
        if (field_started && !field.empty()) throw ParseError("stray quote inside unquoted field", line);
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        break;
      case '\n':
        end_record();
        ++line;
        current.line = line;
        break;
      default:
        field += c;
        field_started = true;
    }
  }
  if (in_quotes) throw ParseError("unterminated quoted field", line);
  if (field_started || !current.fields.empty()) end_record();
  return records;
}

bool parses_as_number(const std::string& s) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(v);
}

bool is_boolean_token(const std::string& s) {
  std::string l(s);
  for (auto& c : l) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return l == "true" || l == "false" || l == "yes" || l == "no" || l == "0" || l == "1";
}

FeatureSchema infer_feature(const std::string& name, const std::vector<Record>& rows, std::size_t col) {
  bool all_numeric = true;
  bool all_boolean = true;
  std::set<std::string> values;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& cell = rows[r].fields[col];
    if (cell.empty()) continue;
    values.insert(cell);
    all_numeric = all_numeric && parses_as_number(cell);
    all_boolean = all_boolean && is_boolean_token(cell);
  }
  // An all-missing column is numeric with unavailable stats.
  if (values.empty() || all_numeric) return {name, FeatureKind::numeric, {}};
  if (all_boolean) return {name, FeatureKind::boolean, {}};
  return {name, FeatureKind::categorical, {values.begin(), values.end()}};
}

std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

Dataset load_csv(std::string_view text, std::span<const FeatureSchema> schema_hint) {
  auto records = split_records(text);
  if (records.empty()) throw SchemaError("empty CSV: a header row is required");
  const auto& header = records.front().fields;
  for (const auto& rec : records) {
    if (rec.fields.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " +
                           std::to_string(rec.fields.size()),
                       rec.line);
  }

  std::vector<FeatureSchema> schema;
  schema.reserve(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (!schema_hint.empty()) {
      auto it = std::find_if(schema_hint.begin(), schema_hint.end(),
                             [&](const FeatureSchema& f) { return f.name == header[c]; });
      if (it == schema_hint.end()) throw SchemaError("column '" + header[c] + "' missing from schema hint");
      schema.push_back(*it);
    } else {
      schema.push_back(infer_feature(header[c], records, c));
    }
  }

  // Build an empty dataset first so cell parsing can reuse its schema.
  Dataset shape(schema, {});
  std::vector<std::vector<double>> rows;
  rows.reserve(records.size() - 1);
  for (std::size_t r = 1; r < records.size(); ++r) {
    std::vector<double> row(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) {
      try {
        row[c] = shape.parse_value(c, records[r].fields[c]);
      } catch (const SchemaError& e) {
        throw ParseError(e.what(), records[r].line);
      }
    }
    rows.push_back(std::move(row));
  }
  return Dataset(std::move(schema), std::move(rows));
}

std::string to_csv(const Dataset& d) {
  std::string out;
  for (std::size_t f = 0; f < d.num_features(); ++f) {
    if (f) out += ',';
    out += quote_if_needed(d.feature(f).name);
  }
  out += '\n';
  for (std::size_t r = 0; r < d.num_rows(); ++r) {
    for (std::size_t f = 0; f < d.num_features(); ++f) {
      if (f) out += ',';
      out += quote_if_needed(d.format_value(f, d.at(r, f)));
    }
    out += '\n';
  }
  return out;
}

}  // namespace talkback
