#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "talkback/data.hpp"

// Direct Gower distance: numeric gaps over the column range, 0/1 mismatch
// otherwise, averaged over features present in both rows.
namespace oracle {

inline double gower(const talkback::Dataset& d, std::size_t i, std::size_t j) {
  double sum = 0;
  int n = 0;
  for (std::size_t f = 0; f < d.num_features(); ++f) {
    const double a = d.at(i, f), b = d.at(j, f);
    if (std::isnan(a) || std::isnan(b)) continue;
    ++n;
    if (d.feature(f).kind != talkback::FeatureKind::numeric) {
      sum += a == b ? 0.0 : 1.0;
      continue;
    }
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t r = 0; r < d.num_rows(); ++r) {
      const double v = d.at(r, f);
      if (std::isnan(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (a != b) sum += hi > lo ? std::min(1.0, std::abs(a - b) / (hi - lo)) : 1.0;
  }
  return sum / n;
}

}  // namespace oracle
