#pragma once

// Plain-entropy tree built from scratch for comparison with fit_tree. It
// shares only the data container and the tie rule with the library.

#include <cmath>
#include <map>
#include <vector>

#include "talkback/data.hpp"
#include "talkback/tree.hpp"

namespace oracle {

struct Node {
  bool leaf = true;
  std::size_t feature = 0;
  double threshold = 0;
  int predicted = 0;
  std::vector<Node> kids;
};

inline double entropy(const std::vector<int>& ys, const std::vector<std::size_t>& idx) {
  std::map<int, double> c;
  for (auto i : idx) c[ys[i]] += 1;
  double h = 0;
  for (auto& [k, v] : c) {
    double p = v / idx.size();
    h -= p * std::log2(p);
  }
  return h;
}

struct PlainId3 {
  const talkback::Dataset& d;
  std::vector<int> ys;  // per dataset row
  std::size_t max_depth = 12;

  int majority(const std::vector<std::size_t>& idx, int fallback) const {
    if (idx.empty()) return fallback;
    std::map<int, int> c;
    for (auto i : idx) c[ys[i]]++;
    int best = c.begin()->first;
    for (auto& [k, v] : c)
      if (v > c[best]) best = k;
    return best;
  }

  std::vector<std::vector<std::size_t>> split(const std::vector<std::size_t>& idx, std::size_t f, double t) const {
    const auto& fs = d.feature(f);
    std::size_t arity = fs.kind == talkback::FeatureKind::categorical ? fs.categories.size() : 2;
    std::vector<std::vector<std::size_t>> parts(arity);
    for (auto i : idx) {
      double v = d.at(i, f);
      std::size_t b;
      if (fs.kind == talkback::FeatureKind::numeric) b = v <= t ? 0 : 1;
      else b = static_cast<std::size_t>(v);
      parts[b].push_back(i);
    }
    return parts;
  }

  double gain(const std::vector<std::size_t>& idx, std::size_t f, double t) const {
    double rem = 0;
    for (auto& p : split(idx, f, t))
      if (!p.empty()) rem += double(p.size()) / idx.size() * entropy(ys, p);
    return entropy(ys, idx) - rem;
  }

  Node build(const std::vector<std::size_t>& idx, std::size_t depth, int fallback) const {
    Node n;
    n.predicted = majority(idx, fallback);
    if (idx.size() < 2 || entropy(ys, idx) == 0 || depth >= max_depth) return n;
    struct Cand { std::size_t f; double t; double g; };
    std::vector<Cand> cands;
    for (std::size_t f = 0; f < d.num_features(); ++f) {
      if (d.feature(f).kind == talkback::FeatureKind::numeric) {
        std::vector<double> vals;
        for (auto i : idx) vals.push_back(d.at(i, f));
        std::sort(vals.begin(), vals.end());
        vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
        for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
          double t = vals[k] + (vals[k + 1] - vals[k]) / 2;
          cands.push_back({f, t, gain(idx, f, t)});
        }
      } else {
        int nonempty = 0;
        for (auto& p : split(idx, f, 0)) nonempty += !p.empty();
        if (nonempty >= 2) cands.push_back({f, 0, gain(idx, f, 0)});
      }
    }
    double best = 0;
    for (auto& c : cands) best = std::max(best, c.g);
    if (best <= 1e-12) return n;
    const Cand* pick = nullptr;
    for (auto& c : cands)
      if (c.g >= best - 1e-12) { pick = &c; break; }
    n.leaf = false;
    n.feature = pick->f;
    n.threshold = pick->t;
    for (auto& p : split(idx, pick->f, pick->t)) n.kids.push_back(build(p, depth + 1, n.predicted));
    return n;
  }
};

inline bool same_shape(const Node& o, const talkback::TreeNode& t, const talkback::Dataset& d) {
  if (o.leaf != t.is_leaf()) return false;
  if (o.predicted != t.predicted) return false;
  if (o.leaf) return true;
  if (o.feature != t.test->feature) return false;
  if (d.feature(o.feature).kind == talkback::FeatureKind::numeric && o.threshold != t.test->threshold) return false;
  if (o.kids.size() != t.children.size()) return false;
  for (std::size_t i = 0; i < o.kids.size(); ++i)
    if (!same_shape(o.kids[i], t.children[i], d)) return false;
  return true;
}

inline Node plain_tree(const talkback::Dataset& d, const std::vector<talkback::LabeledExample>& labels) {
  PlainId3 b{d, std::vector<int>(d.num_rows(), 0)};
  std::vector<std::size_t> idx;
  int lowest = labels.front().label;
  for (auto& l : labels) {
    auto r = d.require_row(l.row_id);
    b.ys[r] = l.label;
    idx.push_back(r);
    lowest = std::min(lowest, l.label);
  }
  return b.build(idx, 0, lowest);
}

}  // namespace oracle
