#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "talkback/rng.hpp"

// Textbook online backprop: sigmoid hidden layers, softmax output,
// cross-entropy loss, nested-vector weights W[l][out][in].
namespace oracle {

struct PlainNet {
  std::vector<std::vector<std::vector<double>>> W;
  std::vector<std::vector<double>> b;

  std::vector<std::vector<double>> activations(const std::vector<double>& x) const {
    std::vector<std::vector<double>> a{x};
    for (std::size_t l = 0; l < W.size(); ++l) {
      std::vector<double> z(W[l].size());
      for (std::size_t i = 0; i < z.size(); ++i) {
        double s = b[l][i];
        for (std::size_t j = 0; j < a[l].size(); ++j) s += W[l][i][j] * a[l][j];
        z[i] = s;
      }
      std::vector<double> out(z.size());
      if (l + 1 == W.size()) {
        double mx = z[0];
        for (double v : z) mx = std::max(mx, v);
        double sum = 0;
        for (std::size_t i = 0; i < z.size(); ++i) sum += (out[i] = std::exp(z[i] - mx));
        for (auto& v : out) v /= sum;
      } else {
        for (std::size_t i = 0; i < z.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-z[i]));
      }
      a.push_back(out);
    }
    return a;
  }

  void step(const std::vector<double>& x, std::size_t target, double eta) {
    const auto a = activations(x);
    const std::size_t L = W.size();
    std::vector<std::vector<double>> delta(L + 1);
    delta[L] = a[L];
    delta[L][target] -= 1.0;
    for (std::size_t l = L - 1; l >= 1; --l) {
      delta[l].assign(a[l].size(), 0.0);
      for (std::size_t i = 0; i < a[l].size(); ++i) {
        double s = 0;
        for (std::size_t k = 0; k < delta[l + 1].size(); ++k) s += W[l][k][i] * delta[l + 1][k];
        delta[l][i] = s * a[l][i] * (1.0 - a[l][i]);
      }
    }
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t k = 0; k < W[l].size(); ++k) {
        for (std::size_t i = 0; i < W[l][k].size(); ++i) W[l][k][i] -= eta * (delta[l + 1][k] * a[l][i]);
        b[l][k] -= eta * delta[l + 1][k];
      }
  }

  void train(const std::vector<std::vector<double>>& xs, const std::vector<std::size_t>& ys, double eta,
             std::size_t epochs, std::uint64_t seed) {
    talkback::Rng rng(seed);
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t e = 0; e < epochs; ++e) {
      rng.shuffle(order);
      for (auto i : order) step(xs[i], ys[i], eta);
    }
  }
};

}  // namespace oracle
