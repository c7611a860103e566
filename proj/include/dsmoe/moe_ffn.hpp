#pragma once

// Expert MLP bank with two gradient regimes behind one forward interface:
//
//   * full backward — every expert output is computed and cached in the
//     forward pass, and the score vector receives its complete gradient
//     [e_1(x),...,e_N(x)]^T dO; every expert receives S_j * dO.
//   * masked backward — only the selected experts were evaluated, so the
//     score gradient entries and weight gradients of unselected experts are
//     exactly zero; selected entries equal the full-backward values.
//
// The forward always walks experts in ascending index and evaluates each on
// the gathered rows that chose it, so a fully dense selection reproduces the
// all-expert forward bit for bit.

#include <cstdint>
#include <utility>
#include <vector>

#include "dsmoe/gating.hpp"
#include "dsmoe/param.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

// One expert: out = gelu(x * W_in^T) * W_out^T, no biases.
struct ExpertMLP {
  Param w_in;   // [d_ffd, d_model]
  Param w_out;  // [d_model, d_ffd]

  ExpertMLP() = default;
  ExpertMLP(const std::string& prefix, int64_t d_ffd, int64_t d_model)
      : w_in(prefix + ".w_in", {d_ffd, d_model}),
        w_out(prefix + ".w_out", {d_model, d_ffd}) {}
};

inline Tensor expert_forward(const ExpertMLP& e, const Tensor& x) {
  if (x.dim(1) != e.w_in.value.dim(1))
    throw ShapeError("expert_forward: token width " + shape_str(x.shape()) +
                     " vs w_in " + shape_str(e.w_in.value.shape()));
  const int64_t t = x.dim(0);
  const int64_t d_ffd = e.w_in.value.dim(0);
  Tensor z({t, d_ffd});
  gemm_nt(x.data(), e.w_in.value.data(), z.data(), t, x.dim(1), d_ffd);
  Tensor h = gelu(z);
  Tensor y({t, x.dim(1)});
  gemm_nt(h.data(), e.w_out.value.data(), y.data(), t, d_ffd, x.dim(1));
  return y;
}

// Per-layer gate outcome kept for losses, utilization and accounting.
struct GateRecord {
  Tensor scores;                      // [t, N]
  std::vector<GateDecision> selected; // per token
  int n_experts = 0;
};

struct MoEForwardResult {
  Tensor out;             // [t, d_model]
  GateRecord gate;
  int64_t expert_token_evals = 0;  // instrumentation: |A| summed over tokens
};

struct MoEBackwardResult {
  Tensor grad_x;       // gradient w.r.t. the layer input
  Tensor grad_scores;  // output-path score gradient [t, N] (before any
                       // auxiliary term and before the softmax backward)
};

class MoEFfnLayer {
 public:
  MoEFfnLayer() = default;

  // `gated` is false only for the single-expert baseline, which carries no
  // router and a constant gate of 1.
  MoEFfnLayer(const std::string& prefix, int n_experts, int64_t d_model,
              int64_t d_ffd, bool gated)
      : n_experts_(n_experts), d_model_(d_model), d_ffd_(d_ffd), gated_(gated) {
    if (gated_) router_param_ = Param(prefix + ".router", {n_experts, d_model});
    experts_.reserve(static_cast<size_t>(n_experts));
    for (int i = 0; i < n_experts; ++i)
      experts_.emplace_back(prefix + ".experts." + std::to_string(i), d_ffd,
                            d_model);
  }

  int n_experts() const { return n_experts_; }
  bool gated() const { return gated_; }
  std::vector<ExpertMLP>& experts() { return experts_; }
  const std::vector<ExpertMLP>& experts() const { return experts_; }
  Param& router() { return router_param_; }
  const Param& router() const { return router_param_; }

  void collect_params(std::vector<Param*>& out) {
    if (gated_) out.push_back(&router_param_);
    for (auto& e : experts_) {
      out.push_back(&e.w_in);
      out.push_back(&e.w_out);
    }
  }

  // Indices of experts that processed at least one token in the last forward.
  const std::vector<int>& touched_experts() const { return touched_; }

  // Forward under a selection. With `keep_cache` the per-expert activations
  // are retained for one backward call. Dense training is simply the dense
  // strategy through the same path.
  MoEForwardResult forward(const Tensor& x, const SelectionStrategy& strategy,
                           bool keep_cache) {
    const int64_t t = x.dim(0);
    MoEForwardResult res;
    res.gate.n_experts = n_experts_;
    res.gate.scores = gated_ ? route(router_param_.value, x)
                             : Tensor::full({t, 1}, 1.0);
    res.gate.selected = select_batch(res.gate.scores, strategy);

    cache_.rows.assign(static_cast<size_t>(n_experts_), {});
    for (int64_t r = 0; r < t; ++r)
      for (int i : res.gate.selected[static_cast<size_t>(r)].selected)
        cache_.rows[static_cast<size_t>(i)].push_back(r);

    res.out = Tensor({t, d_model_});
    cache_.z.assign(static_cast<size_t>(n_experts_), Tensor());
    cache_.y.assign(static_cast<size_t>(n_experts_), Tensor());
    touched_.clear();

    // Expert bodies write disjoint buffers; the mixture sum below runs in
    // ascending expert order regardless of thread count.
    parallel_for(n_experts_, [&](int64_t i) {
      const auto& rows = cache_.rows[static_cast<size_t>(i)];
      if (rows.empty()) return;
      const int64_t nr = static_cast<int64_t>(rows.size());
      Tensor xg({nr, d_model_});
      for (int64_t r = 0; r < nr; ++r)
        std::copy_n(x.data() + rows[static_cast<size_t>(r)] * d_model_,
                    d_model_, xg.data() + r * d_model_);
      const ExpertMLP& e = experts_[static_cast<size_t>(i)];
      Tensor z({nr, d_ffd_});
      gemm_nt(xg.data(), e.w_in.value.data(), z.data(), nr, d_model_, d_ffd_);
      Tensor h = gelu(z);
      Tensor y({nr, d_model_});
      gemm_nt(h.data(), e.w_out.value.data(), y.data(), nr, d_ffd_, d_model_);
      cache_.z[static_cast<size_t>(i)] = std::move(z);
      cache_.y[static_cast<size_t>(i)] = std::move(y);
    });

    for (int i = 0; i < n_experts_; ++i) {
      const auto& rows = cache_.rows[static_cast<size_t>(i)];
      if (rows.empty()) continue;
      touched_.push_back(i);
      res.expert_token_evals += static_cast<int64_t>(rows.size());
      const Tensor& y = cache_.y[static_cast<size_t>(i)];
      for (size_t r = 0; r < rows.size(); ++r) {
        const int64_t tok = rows[r];
        const double w = res.gate.scores.at(tok, i);
        const double* yr = y.data() + static_cast<int64_t>(r) * d_model_;
        double* o = res.out.data() + tok * d_model_;
        for (int64_t c = 0; c < d_model_; ++c) o[c] += w * yr[c];
      }
    }

    if (keep_cache) {
      cache_.x = x;
      cache_.scores = res.gate.scores;
      cache_.valid = true;
    } else {
      cache_ = Cache{};
    }
    return res;
  }

  // Backward for the last cached forward. `grad_scores_extra`, when present,
  // is an auxiliary-loss gradient on the full score matrix; it is applied
  // unmasked (the gate distribution itself is always dense). Accumulates
  // parameter gradients; the cache is consumed.
  MoEBackwardResult backward(const Tensor& grad_out,
                             const Tensor* grad_scores_extra) {
    if (!cache_.valid)
      throw StateError("moe backward: no cached forward to differentiate");
    const int64_t t = cache_.x.dim(0);
    Tensor grad_x({t, d_model_});
    Tensor grad_scores({t, static_cast<int64_t>(n_experts_)});

    for (int i = 0; i < n_experts_; ++i) {
      const auto& rows = cache_.rows[static_cast<size_t>(i)];
      if (rows.empty()) continue;
      const int64_t nr = static_cast<int64_t>(rows.size());
      ExpertMLP& e = experts_[static_cast<size_t>(i)];
      const Tensor& z = cache_.z[static_cast<size_t>(i)];
      const Tensor& y = cache_.y[static_cast<size_t>(i)];

      // Score gradient and expert-output gradient for the selected rows.
      Tensor grad_y({nr, d_model_});
      Tensor xg({nr, d_model_});
      for (int64_t r = 0; r < nr; ++r) {
        const int64_t tok = rows[static_cast<size_t>(r)];
        const double* go = grad_out.data() + tok * d_model_;
        const double* yr = y.data() + r * d_model_;
        double dot = 0.0;
        for (int64_t c = 0; c < d_model_; ++c) dot += yr[c] * go[c];
        grad_scores.at(tok, i) = dot;
        const double w = cache_.scores.at(tok, i);
        double* gy = grad_y.data() + r * d_model_;
        for (int64_t c = 0; c < d_model_; ++c) gy[c] = w * go[c];
        std::copy_n(cache_.x.data() + tok * d_model_, d_model_,
                    xg.data() + r * d_model_);
      }

      // Back through the MLP: y = gelu(x W_in^T) W_out^T.
      Tensor h = gelu(z);
      Tensor grad_h({nr, d_ffd_});
      gemm(grad_y.data(), e.w_out.value.data(), grad_h.data(), nr, d_model_,
           d_ffd_);
      gemm_tn(grad_y.data(), h.data(), e.w_out.grad.data(), nr, d_model_,
              d_ffd_, /*acc=*/true);
      Tensor grad_z = gelu_backward(z, grad_h);
      gemm_tn(grad_z.data(), xg.data(), e.w_in.grad.data(), nr, d_ffd_,
              d_model_, /*acc=*/true);
      Tensor grad_xg({nr, d_model_});
      gemm(grad_z.data(), e.w_in.value.data(), grad_xg.data(), nr, d_ffd_,
           d_model_);
      for (int64_t r = 0; r < nr; ++r) {
        const int64_t tok = rows[static_cast<size_t>(r)];
        const double* src = grad_xg.data() + r * d_model_;
        double* dst = grad_x.data() + tok * d_model_;
        for (int64_t c = 0; c < d_model_; ++c) dst[c] += src[c];
      }
    }

    MoEBackwardResult res;
    res.grad_scores = grad_scores;
    if (grad_scores_extra) {
      for (int64_t i = 0; i < grad_scores.numel(); ++i)
        grad_scores[i] += (*grad_scores_extra)[i];
    }

    if (gated_) {
      RouteGrads rg = route_backward(router_param_.value, cache_.x,
                                     cache_.scores, grad_scores);
      for (int64_t i = 0; i < rg.weight.numel(); ++i)
        router_param_.grad[i] += rg.weight[i];
      for (int64_t i = 0; i < rg.x.numel(); ++i) grad_x[i] += rg.x[i];
    }

    cache_ = Cache{};
    res.grad_x = std::move(grad_x);
    return res;
  }

 private:
  struct Cache {
    Tensor x;
    Tensor scores;
    std::vector<std::vector<int64_t>> rows;  // rows routed to each expert
    std::vector<Tensor> z;                   // pre-activation per expert
    std::vector<Tensor> y;                   // expert output per expert
    bool valid = false;
  };

  int n_experts_ = 0;
  int64_t d_model_ = 0;
  int64_t d_ffd_ = 0;
  bool gated_ = true;
  Param router_param_;
  std::vector<ExpertMLP> experts_;
  Cache cache_;
  std::vector<int> touched_;
};

}  // namespace dsmoe
