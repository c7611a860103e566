#pragma once

// Router scoring and the expert-selection strategies applied at inference,
// plus the gate statistics feeding the mutual-information loss and the
// utilization reports.
//
// Selected scores are never renormalized: the mixture weights are the raw
// softmax probabilities of the chosen experts. The threshold test compares
// the *normalized* probability N*S_i (probability times expert count)
// against epsilon, strictly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "dsmoe/tensor.hpp"

namespace dsmoe {

struct SelectionStrategy {
  enum class Kind { kDense, kTopK, kThreshold, kThresholdTopK };

  Kind kind = Kind::kDense;
  int k = 1;          // kTopK
  double eps = 1.0;   // kThreshold / kThresholdTopK

  static SelectionStrategy Dense() { return {}; }
  static SelectionStrategy TopK(int k) {
    if (k < 1) throw RangeError("TopK: k must be >= 1");
    return {Kind::kTopK, k, 0.0};
  }
  static SelectionStrategy Threshold(double eps) {
    if (eps < 0.0) throw RangeError("Threshold: eps must be >= 0");
    return {Kind::kThreshold, 1, eps};
  }
  static SelectionStrategy ThresholdTopK(double eps) {
    if (eps < 0.0) throw RangeError("ThresholdTopK: eps must be >= 0");
    return {Kind::kThresholdTopK, 1, eps};
  }
};

// Per-token routing outcome. `selected` is sorted ascending so that mixture
// sums run in a fixed expert order everywhere; `mask[i] == 1` iff i is in
// `selected`; `normalized` is scores * N.
struct GateDecision {
  std::vector<double> scores;
  std::vector<double> normalized;
  std::vector<int> selected;
  std::vector<uint8_t> mask;
};

struct Router {
  Tensor weight;  // [n_experts, d_model]
  int n_experts() const { return static_cast<int>(weight.dim(0)); }
};

// scores[t, N] = softmax(x * W^T) rowwise.
inline Tensor route(const Tensor& router_w, const Tensor& x) {
  if (x.dim(1) != router_w.dim(1))
    throw ShapeError("route: token width " + shape_str(x.shape()) +
                     " does not match router " + shape_str(router_w.shape()));
  Tensor logits({x.dim(0), router_w.dim(0)});
  gemm_nt(x.data(), router_w.data(), logits.data(), x.dim(0), x.dim(1),
          router_w.dim(0));
  for (int64_t t = 0; t < logits.dim(0); ++t)
    softmax_row(logits.data() + t * logits.dim(1),
                logits.data() + t * logits.dim(1), logits.dim(1));
  return logits;
}

inline Tensor route(const Router& router, const Tensor& x) {
  return route(router.weight, x);
}

// Backward of `route`: softmax backward first, then the linear map.
struct RouteGrads {
  Tensor weight;  // same shape as the router weight
  Tensor x;       // same shape as x
};

inline RouteGrads route_backward(const Tensor& router_w, const Tensor& x,
                                 const Tensor& scores,
                                 const Tensor& grad_scores) {
  const int64_t t = x.dim(0);
  const int64_t n = router_w.dim(0);
  Tensor dlogits({t, n});
  for (int64_t r = 0; r < t; ++r)
    softmax_row_backward(dlogits.data() + r * n, scores.data() + r * n,
                         grad_scores.data() + r * n, n);
  RouteGrads g{Tensor(router_w.shape()), Tensor(x.shape())};
  gemm_tn(dlogits.data(), x.data(), g.weight.data(), t, n, x.dim(1));
  gemm(dlogits.data(), router_w.data(), g.x.data(), t, n, x.dim(1));
  return g;
}

namespace detail {
inline GateDecision make_decision(const double* s, int n,
                                  std::vector<int> selected) {
  std::sort(selected.begin(), selected.end());
  GateDecision d;
  d.scores.assign(s, s + n);
  d.normalized.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    d.normalized[static_cast<size_t>(i)] = static_cast<double>(n) * s[i];
  d.mask.assign(static_cast<size_t>(n), 0);
  for (int i : selected) d.mask[static_cast<size_t>(i)] = 1;
  d.selected = std::move(selected);
  return d;
}

inline int argmax_lowest(const double* s, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (s[i] > s[best]) best = i;
  return best;
}
}  // namespace detail

// Experts whose normalized probability strictly exceeds eps; if none pass,
// fall back to the single highest-scoring expert so every token is processed.
inline GateDecision select_threshold(const std::vector<double>& scores,
                                     double eps) {
  const int n = static_cast<int>(scores.size());
  std::vector<int> sel;
  for (int i = 0; i < n; ++i)
    if (static_cast<double>(n) * scores[static_cast<size_t>(i)] > eps)
      sel.push_back(i);
  if (sel.empty()) sel.push_back(detail::argmax_lowest(scores.data(), n));
  return detail::make_decision(scores.data(), n, std::move(sel));
}

// K highest-scoring experts, ties broken toward the lower index.
inline GateDecision select_topk(const std::vector<double>& scores, int k) {
  const int n = static_cast<int>(scores.size());
  if (k < 1 || k > n)
    throw RangeError("select_topk: k=" + std::to_string(k) +
                     " outside [1," + std::to_string(n) + "]");
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  order.resize(static_cast<size_t>(k));
  return detail::make_decision(scores.data(), n, std::move(order));
}

inline std::vector<double> score_row(const Tensor& scores, int64_t t) {
  const int64_t n = scores.dim(1);
  return std::vector<double>(scores.data() + t * n,
                             scores.data() + (t + 1) * n);
}

// Batch-adaptive K: count per-token threshold passes (>= 1 via the fallback),
// take the round-half-up mean over the batch, clamp to [1, N], and apply that
// K uniformly. Exact integer arithmetic, so a recount cannot disagree.
inline int threshold_topk_k(const Tensor& scores, double eps) {
  const int64_t t = scores.dim(0);
  const int n = static_cast<int>(scores.dim(1));
  if (t < 1) throw ShapeError("threshold_topk_k: empty batch");
  int64_t total = 0;
  for (int64_t r = 0; r < t; ++r) {
    int64_t count = 0;
    for (int i = 0; i < n; ++i)
      if (static_cast<double>(n) * scores.at(r, i) > eps) ++count;
    total += std::max<int64_t>(count, 1);
  }
  const int64_t k = (2 * total + t) / (2 * t);  // floor(mean + 1/2)
  return static_cast<int>(std::clamp<int64_t>(k, 1, n));
}

// Per-token selections for a whole batch under one strategy. ThresholdTopK
// performs its batch-wide reduction here, in deterministic order.
inline std::vector<GateDecision> select_batch(const Tensor& scores,
                                              const SelectionStrategy& st) {
  const int64_t t = scores.dim(0);
  const int n = static_cast<int>(scores.dim(1));
  std::vector<GateDecision> out;
  out.reserve(static_cast<size_t>(t));
  int k_eff = 0;
  if (st.kind == SelectionStrategy::Kind::kThresholdTopK)
    k_eff = threshold_topk_k(scores, st.eps);
  for (int64_t r = 0; r < t; ++r) {
    switch (st.kind) {
      case SelectionStrategy::Kind::kDense:
        out.push_back(select_topk(score_row(scores, r), n));
        break;
      case SelectionStrategy::Kind::kTopK:
        out.push_back(select_topk(score_row(scores, r), std::min(st.k, n)));
        break;
      case SelectionStrategy::Kind::kThreshold:
        out.push_back(select_threshold(score_row(scores, r), st.eps));
        break;
      case SelectionStrategy::Kind::kThresholdTopK:
        out.push_back(select_topk(score_row(scores, r), k_eff));
        break;
    }
  }
  return out;
}

// ---- gate statistics -----------------------------------------------------------

struct GateStats {
  std::vector<double> marginal;  // p(e), column mean of the score matrix
  double entropy_marginal = 0.0;      // H(e), natural log
  double mean_entropy_cond = 0.0;     // mean over tokens of H(e|x)
};

inline double entropy(const double* p, int64_t n) {
  double h = 0.0;
  for (int64_t i = 0; i < n; ++i)
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  return h;
}

inline GateStats gate_stats(const Tensor& scores) {
  const int64_t t = scores.dim(0);
  const int64_t n = scores.dim(1);
  GateStats st;
  st.marginal.assign(static_cast<size_t>(n), 0.0);
  for (int64_t r = 0; r < t; ++r)
    for (int64_t i = 0; i < n; ++i) st.marginal[static_cast<size_t>(i)] += scores.at(r, i);
  for (double& p : st.marginal) p /= static_cast<double>(t);
  st.entropy_marginal = entropy(st.marginal.data(), n);
  double sum = 0.0;
  for (int64_t r = 0; r < t; ++r) sum += entropy(scores.data() + r * n, n);
  st.mean_entropy_cond = sum / static_cast<double>(t);
  return st;
}

}  // namespace dsmoe
