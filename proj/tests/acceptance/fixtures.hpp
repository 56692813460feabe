#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "talkback/data.hpp"
#include "talkback/rng.hpp"

namespace acceptance {

inline const char* kWeather =
    "outlook,temperature,humidity,windy,play\n"
    "sunny,85,85,false,no\n"
    "sunny,80,90,true,no\n"
    "overcast,83,86,false,yes\n"
    "rainy,70,96,false,yes\n"
    "rainy,68,80,false,yes\n"
    "rainy,65,70,true,no\n"
    "overcast,64,65,true,yes\n"
    "sunny,72,95,false,no\n"
    "sunny,69,70,false,yes\n"
    "rainy,75,80,false,yes\n"
    "sunny,75,70,true,yes\n"
    "overcast,72,90,true,yes\n"
    "overcast,81,75,false,yes\n"
    "rainy,71,91,true,no\n";

// Numeric, categorical and boolean columns in rotation.
inline talkback::Dataset mixed_dataset(talkback::Rng& rng, std::size_t rows, std::size_t features) {
  using talkback::FeatureKind;
  std::vector<talkback::FeatureSchema> schema;
  for (std::size_t f = 0; f < features; ++f) {
    const auto name = "f" + std::to_string(f);
    switch (f % 3) {
      case 0: schema.push_back({name, FeatureKind::numeric, {}}); break;
      case 1: schema.push_back({name, FeatureKind::categorical, {"a", "b", "c"}}); break;
      default: schema.push_back({name, FeatureKind::boolean, {}}); break;
    }
  }
  std::vector<std::vector<double>> data;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> row;
    for (std::size_t f = 0; f < features; ++f) {
      switch (f % 3) {
        case 0: row.push_back(std::round(rng.normal() * 20) / 2); break;
        case 1: row.push_back(static_cast<double>(rng.index(3))); break;
        default: row.push_back(static_cast<double>(rng.index(2))); break;
      }
    }
    data.push_back(row);
  }
  return talkback::Dataset(schema, data);
}

// f0 > 0 ? f1 != c : f2, with 10% label noise.
inline std::vector<talkback::LabeledExample> noisy_concept(const talkback::Dataset& d, talkback::Rng& rng) {
  std::vector<talkback::LabeledExample> labels;
  for (std::size_t r = 0; r < d.num_rows(); ++r) {
    bool y = d.at(r, 0) > 0 ? d.at(r, 1) != 2 : d.at(r, 2) == 1;
    if (rng.bernoulli(0.1)) y = !y;
    labels.push_back({d.row_id(r), y ? 1 : 0, 1.0});
  }
  return labels;
}

inline std::string ratio(std::size_t a, std::size_t b) { return std::to_string(a) + "/" + std::to_string(b); }

}  // namespace acceptance
