#pragma once

// Brute-force reference computations. These rescore everything from scratch
// and share no code paths with the library routines they check.

#include <algorithm>
#include <functional>
#include <vector>

#include "cdsm/selector.hpp"
#include "cdsm/supervision.hpp"

namespace cdsm::oracle {

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < a.cols(); ++j) s += a(0, j) * b(0, j);
  return s;
}

inline const std::vector<NodeId>& side_list(const MatchTask& t, Side side) {
  return side == Side::Query ? t.query_neighbors.neighbors : t.key_neighbors.at(0).neighbors;
}

inline double score_side(const SubsetScorer& f, Side side, const std::vector<NodeId>& subset) {
  const std::vector<NodeId> none;
  return side == Side::Query ? f(subset, none) : f(none, subset);
}

struct Label {
  Side side;
  NodeId neighbor;
  bool positive;
  int step;
  bool operator==(const Label&) const = default;
};

// Every neighbor's singleton scored against the bare pair.
inline std::vector<Label> one_step_labels(const SubsetScorer& f, const MatchTask& t) {
  std::vector<Label> out;
  for (Side side : {Side::Query, Side::Key}) {
    for (NodeId n : side_list(t, side)) {
      const bool plus = score_side(f, side, {n}) > score_side(f, side, {});
      out.push_back({side, n, plus, -1});
    }
  }
  return out;
}

// Greedy with a full rescan of all remaining candidates per step.
inline std::vector<std::size_t> greedy_sequence(const std::vector<NodeId>& list, std::size_t k,
                                                const std::function<double(const std::vector<NodeId>&)>& f) {
  std::vector<std::size_t> seq;
  std::vector<NodeId> chosen;
  double current = f(chosen);
  while (seq.size() < k) {
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (std::find(seq.begin(), seq.end(), i) != seq.end()) continue;
      auto trial = chosen;
      trial.push_back(list[i]);
      cand.push_back({f(trial), i});
    }
    if (cand.empty()) break;
    // Highest score, then lowest index.
    auto best = std::max_element(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
      return a.first < b.first || (a.first == b.first && a.second > b.second);
    });
    if (!(best->first > current)) break;
    seq.push_back(best->second);
    chosen.push_back(list[best->second]);
    current = best->first;
  }
  return seq;
}

inline std::vector<Label> multi_step_labels(const SubsetScorer& f, const MatchTask& t, std::size_t k) {
  std::vector<Label> out;
  for (Side side : {Side::Query, Side::Key}) {
    const auto& list = side_list(t, side);
    auto seq = greedy_sequence(list, k, [&](const std::vector<NodeId>& s) { return score_side(f, side, s); });
    for (std::size_t i = 0; i < list.size(); ++i) {
      auto it = std::find(seq.begin(), seq.end(), i);
      const bool plus = it != seq.end();
      out.push_back({side, list[i], plus, plus ? static_cast<int>(it - seq.begin()) : -1});
    }
  }
  return out;
}

inline std::vector<Label> as_labels(const TaskAnnotation& a) {
  std::vector<Label> out;
  for (const auto& l : a.labels) out.push_back({l.side, l.neighbor, l.positive, l.step});
  return out;
}

// phi(concat(center, elementwise max over the set)) . counterpart, from the raw weights.
inline double multi_step_value(const SelectorModel& m, const Tensor& center, const Tensor& counterpart,
                               const std::vector<const Tensor*>& set) {
  const auto d = center.cols();
  const Tensor& w = m.phi_weight().value;
  const Tensor& b = m.phi_bias().value;
  double s = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) {
    double z = b(0, j);
    for (Eigen::Index i = 0; i < d; ++i) z += center(0, i) * w(i, j);
    for (Eigen::Index i = 0; i < d; ++i) {
      double mx = (*set[0])(0, i);
      for (const Tensor* t : set) mx = std::max(mx, (*t)(0, i));
      z += mx * w(d + i, j);
    }
    s += z * counterpart(0, j);
  }
  return s;
}

// Exhaustive per-step argmax; no improvement requirement (the selector always picks).
inline std::vector<std::size_t> selector_greedy(const SelectorModel& m, const Tensor& center,
                                                const Tensor& counterpart, const std::vector<Tensor>& nb,
                                                std::size_t k) {
  std::vector<std::size_t> seq;
  while (seq.size() < std::min(k, nb.size())) {
    std::size_t best = nb.size();
    double best_v = 0.0;
    for (std::size_t i = 0; i < nb.size(); ++i) {
      if (std::find(seq.begin(), seq.end(), i) != seq.end()) continue;
      std::vector<const Tensor*> set;
      for (auto s : seq) set.push_back(&nb[s]);
      set.push_back(&nb[i]);
      const double v = multi_step_value(m, center, counterpart, set);
      if (best == nb.size() || v > best_v) best = i, best_v = v;
    }
    seq.push_back(best);
  }
  return seq;
}

}  // namespace cdsm::oracle
