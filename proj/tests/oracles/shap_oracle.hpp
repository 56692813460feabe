#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

// Shapley values by enumerating every feature ordering. The value of a
// coalition is the background mean with coalition features taken from x.
namespace oracle {

inline std::vector<double> permutation_shapley(const std::function<double(std::span<const double>)>& f,
                                               const std::vector<double>& x,
                                               const std::vector<std::vector<double>>& background) {
  const std::size_t n = x.size();
  auto value = [&](const std::vector<bool>& in) {
    double sum = 0;
    for (const auto& b : background) {
      std::vector<double> z(n);
      for (std::size_t i = 0; i < n; ++i) z[i] = in[i] ? x[i] : b[i];
      sum += f(z);
    }
    return sum / static_cast<double>(background.size());
  };
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> phi(n, 0.0);
  double orderings = 0;
  do {
    std::vector<bool> in(n, false);
    double prev = value(in);
    for (auto i : order) {
      in[i] = true;
      const double cur = value(in);
      phi[i] += cur - prev;
      prev = cur;
    }
    ++orderings;
  } while (std::next_permutation(order.begin(), order.end()));
  for (auto& v : phi) v /= orderings;
  return phi;
}

}  // namespace oracle
