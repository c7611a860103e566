#pragma once

// Router auxiliary losses and the total training objective.
//
// The mutual-information loss rewards a balanced expert marginal (entropy of
// the mean gate distribution) while penalizing per-token indecision (mean
// conditional entropy). It equals minus the mutual information between
// tokens and experts, so it always lies in [-log N, 0].
//
// The switch loss is the classic load-balance baseline for sparsely trained
// mixtures: N * sum_i f_i * P_i, with f_i the fraction of dispatch slots sent
// to expert i and P_i the mean gate probability.

#include <cmath>
#include <vector>

#include "dsmoe/gating.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

inline double mi_loss(const Tensor& scores) {
  const GateStats st = gate_stats(scores);
  return -st.entropy_marginal + st.mean_entropy_cond;
}

// d(mi_loss)/d(scores). Using p_i for the column means,
//   d/dS[t,i] = (log p_i - log S[t,i]) / t.
// Rows of `scores` come out of a softmax so entries are positive; a floor
// guards the log against exact zeros from hand-built test matrices.
inline Tensor mi_loss_backward(const Tensor& scores) {
  constexpr double kFloor = 1e-300;
  const int64_t t = scores.dim(0);
  const int64_t n = scores.dim(1);
  const GateStats st = gate_stats(scores);
  Tensor grad(scores.shape());
  const double inv_t = 1.0 / static_cast<double>(t);
  for (int64_t r = 0; r < t; ++r)
    for (int64_t i = 0; i < n; ++i) {
      const double p = std::max(st.marginal[static_cast<size_t>(i)], kFloor);
      const double s = std::max(scores.at(r, i), kFloor);
      grad.at(r, i) = (std::log(p) - std::log(s)) * inv_t;
    }
  return grad;
}

// Dispatch fractions over (token, slot) pairs for a batch of selections.
inline std::vector<double> dispatch_fractions(
    const std::vector<GateDecision>& selections, int n_experts) {
  std::vector<double> f(static_cast<size_t>(n_experts), 0.0);
  int64_t slots = 0;
  for (const auto& d : selections) {
    for (int i : d.selected) f[static_cast<size_t>(i)] += 1.0;
    slots += static_cast<int64_t>(d.selected.size());
  }
  if (slots > 0)
    for (double& v : f) v /= static_cast<double>(slots);
  return f;
}

inline double switch_loss(const Tensor& scores,
                          const std::vector<GateDecision>& selections) {
  const int64_t t = scores.dim(0);
  const int n = static_cast<int>(scores.dim(1));
  const std::vector<double> f = dispatch_fractions(selections, n);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    double p = 0.0;
    for (int64_t r = 0; r < t; ++r) p += scores.at(r, i);
    p /= static_cast<double>(t);
    loss += f[static_cast<size_t>(i)] * p;
  }
  return static_cast<double>(n) * loss;
}

// Gradient through the mean-probability path only; the dispatch counts are
// discrete and carry no gradient.
inline Tensor switch_loss_backward(const Tensor& scores,
                                   const std::vector<GateDecision>& selections) {
  const int64_t t = scores.dim(0);
  const int n = static_cast<int>(scores.dim(1));
  const std::vector<double> f = dispatch_fractions(selections, n);
  Tensor grad(scores.shape());
  const double scale = static_cast<double>(n) / static_cast<double>(t);
  for (int64_t r = 0; r < t; ++r)
    for (int i = 0; i < n; ++i)
      grad.at(r, i) = scale * f[static_cast<size_t>(i)];
  return grad;
}

// ---- total objective -------------------------------------------------------

struct LossReport {
  double lm = 0.0;                   // nats per token
  std::vector<double> aux_att;       // per attention layer (MI or switch)
  std::vector<double> aux_ffd;       // per FFN layer
  double alpha_att = 0.0;
  double alpha_ffd = 0.0;
  double total = 0.0;
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// total = lm + alpha_att * mean(attention aux) + alpha_ffd * mean(FFN aux).
// Per-group auxiliaries are averaged over layers, not summed, so the alphas
// keep the same meaning at any depth.
inline LossReport total_loss(double lm, std::vector<double> aux_att,
                             std::vector<double> aux_ffd, double alpha_att,
                             double alpha_ffd) {
  LossReport r;
  r.lm = lm;
  r.aux_att = std::move(aux_att);
  r.aux_ffd = std::move(aux_ffd);
  r.alpha_att = alpha_att;
  r.alpha_ffd = alpha_ffd;
  r.total = lm + alpha_att * mean_of(r.aux_att) + alpha_ffd * mean_of(r.aux_ffd);
  return r;
}

}  // namespace dsmoe
