#pragma once

// Mixture-of-Attention-heads layer. Each expert owns query and output
// projections for n_head heads; a single grouped key/value projection is
// shared by all experts, which is what makes one KV cache serve every
// expert during decoding. The layer output is the gate-weighted sum over
// activated experts of their per-head attention outputs.
//
// Query head j reads KV group j / (n_head / n_kv) when n_kv divides n_head
// and j % n_kv otherwise. Attention logits are scaled by 1/sqrt(d_head) and
// causally masked. Training always runs all experts; sparse expert selection
// here is an inference-time device, so only the all-expert forward keeps a
// backward cache.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dsmoe/gating.hpp"
#include "dsmoe/moe_ffn.hpp"
#include "dsmoe/param.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

struct MoAExpert {
  Param w_q;  // [n_head, d_head, d_model]
  Param w_o;  // [n_head, d_head, d_model]

  MoAExpert() = default;
  MoAExpert(const std::string& prefix, int64_t n_head, int64_t d_head,
            int64_t d_model)
      : w_q(prefix + ".w_q", {n_head, d_head, d_model}),
        w_o(prefix + ".w_o", {n_head, d_head, d_model}) {}
};

// Append-only grouped key/value store for one generation stream.
class KVCache {
 public:
  KVCache() = default;
  KVCache(int n_kv, int64_t d_head, int64_t capacity)
      : n_kv_(n_kv), d_head_(d_head), capacity_(capacity),
        k_({n_kv, capacity, d_head}), v_({n_kv, capacity, d_head}) {}

  int64_t length() const { return length_; }
  int64_t capacity() const { return capacity_; }

  void append(const Tensor& k_rows, const Tensor& v_rows) {
    if (length_ >= capacity_)
      throw CapacityError("kv cache full at capacity " +
                          std::to_string(capacity_));
    for (int g = 0; g < n_kv_; ++g) {
      std::copy_n(k_rows.data() + g * d_head_, d_head_,
                  k_.data() + (g * capacity_ + length_) * d_head_);
      std::copy_n(v_rows.data() + g * d_head_, d_head_,
                  v_.data() + (g * capacity_ + length_) * d_head_);
    }
    ++length_;
  }

  const double* k_row(int g, int64_t pos) const {
    return k_.data() + (g * capacity_ + pos) * d_head_;
  }
  const double* v_row(int g, int64_t pos) const {
    return v_.data() + (g * capacity_ + pos) * d_head_;
  }

 private:
  int n_kv_ = 0;
  int64_t d_head_ = 0;
  int64_t capacity_ = 0;
  int64_t length_ = 0;
  Tensor k_, v_;
};

class MoALayer {
 public:
  MoALayer() = default;

  MoALayer(const std::string& prefix, int n_experts, int n_head, int64_t d_head,
           int n_kv, int64_t d_model, bool gated)
      : n_experts_(n_experts), n_head_(n_head), d_head_(d_head), n_kv_(n_kv),
        d_model_(d_model), gated_(gated),
        w_k_(prefix + ".w_k", {n_kv, d_head, d_model}),
        w_v_(prefix + ".w_v", {n_kv, d_head, d_model}) {
    if (gated_) router_param_ = Param(prefix + ".router", {n_experts, d_model});
    experts_.reserve(static_cast<size_t>(n_experts));
    for (int i = 0; i < n_experts; ++i)
      experts_.emplace_back(prefix + ".experts." + std::to_string(i), n_head,
                            d_head, d_model);
  }

  int n_experts() const { return n_experts_; }
  int n_head() const { return n_head_; }
  int64_t d_head() const { return d_head_; }
  int n_kv() const { return n_kv_; }
  bool gated() const { return gated_; }

  int kv_group(int head) const {
    return (n_head_ % n_kv_ == 0) ? head / (n_head_ / n_kv_) : head % n_kv_;
  }

  void collect_params(std::vector<Param*>& out) {
    if (gated_) out.push_back(&router_param_);
    for (auto& e : experts_) {
      out.push_back(&e.w_q);
      out.push_back(&e.w_o);
    }
    out.push_back(&w_k_);
    out.push_back(&w_v_);
  }

  Param& router() { return router_param_; }
  std::vector<MoAExpert>& experts() { return experts_; }
  Param& w_k() { return w_k_; }
  Param& w_v() { return w_v_; }

  KVCache make_cache(int64_t capacity) const {
    return KVCache(n_kv_, d_head_, capacity);
  }

  // x is [batch*seq, d_model] with rows grouped by sequence. Attention is
  // computed independently per sequence; gating and any batch-adaptive
  // selection run over the whole flattened batch.
  MoEForwardResult forward(const Tensor& x, int64_t batch, int64_t seq,
                           const SelectionStrategy& strategy, bool keep_cache) {
    if (x.dim(0) != batch * seq)
      throw ShapeError("moa forward: rows " + std::to_string(x.dim(0)) +
                       " != batch*seq " + std::to_string(batch * seq));
    const int64_t t_total = batch * seq;
    cache_ = LayerCache{};  // any previous cache is invalidated
    MoEForwardResult res;
    res.gate.n_experts = n_experts_;
    res.gate.scores = gated_ ? route(router_param_.value, x)
                             : Tensor::full({t_total, 1}, 1.0);
    res.gate.selected = select_batch(res.gate.scores, strategy);
    res.out = Tensor({t_total, d_model_});

    if (keep_cache) {
      for (int64_t t = 0; t < t_total; ++t)
        if (static_cast<int>(res.gate.selected[static_cast<size_t>(t)]
                                 .selected.size()) != n_experts_)
          throw StateError("moa forward: backward cache requires the "
                           "all-expert selection");
      cache_.rows.assign(static_cast<size_t>(batch), RowCache{});
      cache_.x = x;
      cache_.scores = res.gate.scores;
      cache_.batch = batch;
      cache_.seq = seq;
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head_));

    for (int64_t b = 0; b < batch; ++b) {
      const double* xn = x.data() + b * seq * d_model_;

      // Shared grouped K/V for this sequence.
      std::vector<Tensor> kg, vg;
      kg.reserve(static_cast<size_t>(n_kv_));
      vg.reserve(static_cast<size_t>(n_kv_));
      for (int g = 0; g < n_kv_; ++g) {
        Tensor k({seq, d_head_});
        Tensor v({seq, d_head_});
        gemm_nt(xn, w_k_.value.data() + g * d_head_ * d_model_, k.data(), seq,
                d_model_, d_head_);
        gemm_nt(xn, w_v_.value.data() + g * d_head_ * d_model_, v.data(), seq,
                d_model_, d_head_);
        kg.push_back(std::move(k));
        vg.push_back(std::move(v));
      }

      // Rows of this sequence each expert must serve.
      std::vector<std::vector<int64_t>> rows(static_cast<size_t>(n_experts_));
      for (int64_t p = 0; p < seq; ++p) {
        const int64_t t = b * seq + p;
        for (int i : res.gate.selected[static_cast<size_t>(t)].selected)
          rows[static_cast<size_t>(i)].push_back(p);
      }

      RowCache rc;
      if (keep_cache) {
        rc.kg = kg;
        rc.vg = vg;
        rc.q.assign(static_cast<size_t>(n_experts_ * n_head_), Tensor());
        rc.p.assign(static_cast<size_t>(n_experts_ * n_head_), Tensor());
        rc.c.assign(static_cast<size_t>(n_experts_ * n_head_), Tensor());
        rc.e.assign(static_cast<size_t>(n_experts_), Tensor());
      }

      for (int i = 0; i < n_experts_; ++i) {
        const auto& sel_rows = rows[static_cast<size_t>(i)];
        if (sel_rows.empty()) continue;
        res.expert_token_evals += static_cast<int64_t>(sel_rows.size());
        const MoAExpert& ex = experts_[static_cast<size_t>(i)];
        Tensor e_out({seq, d_model_});  // zero where not selected

        for (int j = 0; j < n_head_; ++j) {
          const int g = kv_group(j);
          const double* wq = ex.w_q.value.data() + j * d_head_ * d_model_;
          const double* wo = ex.w_o.value.data() + j * d_head_ * d_model_;
          const Tensor& k = kg[static_cast<size_t>(g)];
          const Tensor& v = vg[static_cast<size_t>(g)];

          Tensor q({seq, d_head_});
          Tensor probs({seq, seq});
          Tensor ctx({seq, d_head_});
          std::vector<double> logits(static_cast<size_t>(seq));

          for (int64_t p : sel_rows) {
            const double* xp = xn + p * d_model_;
            double* qp = q.data() + p * d_head_;
            for (int64_t h = 0; h < d_head_; ++h) {
              const double* w = wq + h * d_model_;
              double s = 0.0;
              for (int64_t c = 0; c < d_model_; ++c) s += w[c] * xp[c];
              qp[h] = s;
            }
            // causal attention over positions 0..p
            for (int64_t m = 0; m <= p; ++m) {
              const double* km = k.data() + m * d_head_;
              double s = 0.0;
              for (int64_t h = 0; h < d_head_; ++h) s += qp[h] * km[h];
              logits[static_cast<size_t>(m)] = s * scale;
            }
            softmax_row(probs.data() + p * seq, logits.data(), p + 1);
            double* cp = ctx.data() + p * d_head_;
            for (int64_t m = 0; m <= p; ++m) {
              const double pm = probs.at(p, m);
              const double* vm = v.data() + m * d_head_;
              for (int64_t h = 0; h < d_head_; ++h) cp[h] += pm * vm[h];
            }
            // head output into the expert sum: e_out[p] += ctx[p] * W_o
            double* ep = e_out.data() + p * d_model_;
            for (int64_t h = 0; h < d_head_; ++h) {
              const double ch = cp[h];
              const double* w = wo + h * d_model_;
              for (int64_t c = 0; c < d_model_; ++c) ep[c] += ch * w[c];
            }
          }

          if (keep_cache) {
            rc.q[static_cast<size_t>(i * n_head_ + j)] = std::move(q);
            rc.p[static_cast<size_t>(i * n_head_ + j)] = std::move(probs);
            rc.c[static_cast<size_t>(i * n_head_ + j)] = std::move(ctx);
          }
        }

        for (int64_t p : sel_rows) {
          const int64_t t = b * seq + p;
          const double w = res.gate.scores.at(t, i);
          const double* ep = e_out.data() + p * d_model_;
          double* op = res.out.data() + t * d_model_;
          for (int64_t c = 0; c < d_model_; ++c) op[c] += w * ep[c];
        }
        if (keep_cache) rc.e[static_cast<size_t>(i)] = std::move(e_out);
      }

      if (keep_cache) cache_.rows[static_cast<size_t>(b)] = std::move(rc);
    }

    cache_.valid = keep_cache;
    return res;
  }

  // Backward of the cached all-expert forward. Accumulates parameter
  // gradients; the cache is consumed. `grad_scores_extra` adds an
  // auxiliary-loss gradient to the gate scores before the softmax backward.
  MoEBackwardResult backward(const Tensor& grad_out,
                             const Tensor* grad_scores_extra) {
    if (!cache_.valid)
      throw StateError("moa backward: no cached forward to differentiate");
    const int64_t batch = cache_.batch;
    const int64_t seq = cache_.seq;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head_));
    Tensor grad_x({batch * seq, d_model_});
    Tensor grad_scores({batch * seq, static_cast<int64_t>(n_experts_)});

    for (int64_t b = 0; b < batch; ++b) {
      const RowCache& rc = cache_.rows[static_cast<size_t>(b)];
      const double* xn = cache_.x.data() + b * seq * d_model_;
      double* gx = grad_x.data() + b * seq * d_model_;

      std::vector<Tensor> gkg, gvg;
      for (int g = 0; g < n_kv_; ++g) {
        gkg.emplace_back(Shape{seq, d_head_});
        gvg.emplace_back(Shape{seq, d_head_});
      }

      for (int i = 0; i < n_experts_; ++i) {
        MoAExpert& ex = experts_[static_cast<size_t>(i)];
        const Tensor& e_out = rc.e[static_cast<size_t>(i)];

        // dS[t,i] = <E_i[t], dOut[t]>, dE_i[t] = S[t,i] * dOut[t]
        Tensor ge({seq, d_model_});
        for (int64_t p = 0; p < seq; ++p) {
          const int64_t t = b * seq + p;
          const double* go = grad_out.data() + t * d_model_;
          const double* ep = e_out.data() + p * d_model_;
          double dot = 0.0;
          for (int64_t c = 0; c < d_model_; ++c) dot += ep[c] * go[c];
          grad_scores.at(t, i) = dot;
          const double w = cache_.scores.at(t, i);
          double* gep = ge.data() + p * d_model_;
          for (int64_t c = 0; c < d_model_; ++c) gep[c] = w * go[c];
        }

        for (int j = 0; j < n_head_; ++j) {
          const int g = kv_group(j);
          const Tensor& q = rc.q[static_cast<size_t>(i * n_head_ + j)];
          const Tensor& probs = rc.p[static_cast<size_t>(i * n_head_ + j)];
          const Tensor& ctx = rc.c[static_cast<size_t>(i * n_head_ + j)];
          const Tensor& k = rc.kg[static_cast<size_t>(g)];
          const Tensor& v = rc.vg[static_cast<size_t>(g)];
          double* gwq = ex.w_q.grad.data() + j * d_head_ * d_model_;
          double* gwo = ex.w_o.grad.data() + j * d_head_ * d_model_;
          const double* wq = ex.w_q.value.data() + j * d_head_ * d_model_;
          const double* wo = ex.w_o.value.data() + j * d_head_ * d_model_;
          Tensor& gk = gkg[static_cast<size_t>(g)];
          Tensor& gv = gvg[static_cast<size_t>(g)];

          std::vector<double> dprob(static_cast<size_t>(seq));
          std::vector<double> dlogit(static_cast<size_t>(seq));
          Tensor gq({seq, d_head_});

          for (int64_t p = 0; p < seq; ++p) {
            const double* gep = ge.data() + p * d_model_;
            const double* cp = ctx.data() + p * d_head_;

            // dW_o[j] += ctx[p]^T ge[p];  dctx = ge[p] * W_o^T
            double gc[64];  // d_head is small; fall back below if not
            std::vector<double> gc_heap;
            double* gcp = gc;
            if (d_head_ > 64) {
              gc_heap.assign(static_cast<size_t>(d_head_), 0.0);
              gcp = gc_heap.data();
            }
            for (int64_t h = 0; h < d_head_; ++h) {
              const double* w = wo + h * d_model_;
              double s = 0.0;
              for (int64_t c = 0; c < d_model_; ++c) {
                gwo[h * d_model_ + c] += cp[h] * gep[c];
                s += w[c] * gep[c];
              }
              gcp[h] = s;
            }

            // softmax backward over the causal prefix
            double dot = 0.0;
            for (int64_t m = 0; m <= p; ++m) {
              const double* vm = v.data() + m * d_head_;
              double s = 0.0;
              for (int64_t h = 0; h < d_head_; ++h) s += gcp[h] * vm[h];
              dprob[static_cast<size_t>(m)] = s;
              dot += s * probs.at(p, m);
            }
            for (int64_t m = 0; m <= p; ++m)
              dlogit[static_cast<size_t>(m)] =
                  probs.at(p, m) * (dprob[static_cast<size_t>(m)] - dot);

            // dQ[p], dK[m], dV[m]
            double* gqp = gq.data() + p * d_head_;
            const double* qp = q.data() + p * d_head_;
            for (int64_t m = 0; m <= p; ++m) {
              const double dl = dlogit[static_cast<size_t>(m)] * scale;
              const double pm = probs.at(p, m);
              const double* km = k.data() + m * d_head_;
              double* gkm = gk.data() + m * d_head_;
              double* gvm = gv.data() + m * d_head_;
              for (int64_t h = 0; h < d_head_; ++h) {
                gqp[h] += dl * km[h];
                gkm[h] += dl * qp[h];
                gvm[h] += pm * gcp[h];
              }
            }
          }

          // dW_q[j] += gq^T xn;  gx += gq * W_q[j]
          gemm_tn(gq.data(), xn, gwq, seq, d_head_, d_model_, /*acc=*/true);
          gemm(gq.data(), wq, gx, seq, d_head_, d_model_, /*acc=*/true);
        }
      }

      for (int g = 0; g < n_kv_; ++g) {
        gemm_tn(gkg[static_cast<size_t>(g)].data(), xn,
                w_k_.grad.data() + g * d_head_ * d_model_, seq, d_head_,
                d_model_, /*acc=*/true);
        gemm(gkg[static_cast<size_t>(g)].data(),
             w_k_.value.data() + g * d_head_ * d_model_, gx, seq, d_head_,
             d_model_, /*acc=*/true);
        gemm_tn(gvg[static_cast<size_t>(g)].data(), xn,
                w_v_.grad.data() + g * d_head_ * d_model_, seq, d_head_,
                d_model_, /*acc=*/true);
        gemm(gvg[static_cast<size_t>(g)].data(),
             w_v_.value.data() + g * d_head_ * d_model_, gx, seq, d_head_,
             d_model_, /*acc=*/true);
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

    cache_ = LayerCache{};
    res.grad_x = std::move(grad_x);
    return res;
  }

  // One incremental decoding step: appends this position's grouped K/V to the
  // cache, then attends over the whole prefix. Output matches the final row
  // of the full-sequence forward on the same prefix.
  std::pair<Tensor, GateDecision> decode_step(const Tensor& x_row,
                                              KVCache& cache,
                                              const SelectionStrategy& strategy) {
    if (x_row.numel() != d_model_)
      throw ShapeError("moa decode: token width " +
                       std::to_string(x_row.numel()) + " != " +
                       std::to_string(d_model_));
    Tensor k_rows({n_kv_, d_head_});
    Tensor v_rows({n_kv_, d_head_});
    for (int g = 0; g < n_kv_; ++g)
      for (int64_t h = 0; h < d_head_; ++h) {
        const double* wk = w_k_.value.data() + (g * d_head_ + h) * d_model_;
        const double* wv = w_v_.value.data() + (g * d_head_ + h) * d_model_;
        double sk = 0.0, sv = 0.0;
        for (int64_t c = 0; c < d_model_; ++c) {
          sk += wk[c] * x_row[c];
          sv += wv[c] * x_row[c];
        }
        k_rows.at(g, h) = sk;
        v_rows.at(g, h) = sv;
      }
    cache.append(k_rows, v_rows);
    const int64_t len = cache.length();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head_));

    Tensor x2d({1, d_model_});
    std::copy_n(x_row.data(), d_model_, x2d.data());
    Tensor scores = gated_ ? route(router_param_.value, x2d)
                           : Tensor::full({1, 1}, 1.0);
    GateDecision decision = select_batch(scores, strategy)[0];

    Tensor out({1, d_model_});
    std::vector<double> logits(static_cast<size_t>(len));
    std::vector<double> ctx(static_cast<size_t>(d_head_));
    std::vector<double> q(static_cast<size_t>(d_head_));
    std::vector<double> e_acc(static_cast<size_t>(d_model_));
    for (int i : decision.selected) {
      const MoAExpert& ex = experts_[static_cast<size_t>(i)];
      const double w = decision.scores[static_cast<size_t>(i)];
      std::fill(e_acc.begin(), e_acc.end(), 0.0);
      for (int j = 0; j < n_head_; ++j) {
        const int g = kv_group(j);
        const double* wq = ex.w_q.value.data() + j * d_head_ * d_model_;
        const double* wo = ex.w_o.value.data() + j * d_head_ * d_model_;
        for (int64_t h = 0; h < d_head_; ++h) {
          const double* wrow = wq + h * d_model_;
          double s = 0.0;
          for (int64_t c = 0; c < d_model_; ++c) s += wrow[c] * x_row[c];
          q[static_cast<size_t>(h)] = s;
        }
        for (int64_t m = 0; m < len; ++m) {
          const double* km = cache.k_row(g, m);
          double s = 0.0;
          for (int64_t h = 0; h < d_head_; ++h)
            s += q[static_cast<size_t>(h)] * km[h];
          logits[static_cast<size_t>(m)] = s * scale;
        }
        softmax_row(logits.data(), logits.data(), len);
        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (int64_t m = 0; m < len; ++m) {
          const double pm = logits[static_cast<size_t>(m)];
          const double* vm = cache.v_row(g, m);
          for (int64_t h = 0; h < d_head_; ++h)
            ctx[static_cast<size_t>(h)] += pm * vm[h];
        }
        for (int64_t h = 0; h < d_head_; ++h) {
          const double ch = ctx[static_cast<size_t>(h)];
          const double* wrow = wo + h * d_model_;
          for (int64_t c = 0; c < d_model_; ++c)
            e_acc[static_cast<size_t>(c)] += ch * wrow[c];
        }
      }
      for (int64_t c = 0; c < d_model_; ++c)
        out[c] += w * e_acc[static_cast<size_t>(c)];
    }
    return {std::move(out), std::move(decision)};
  }

 private:
  struct RowCache {
    std::vector<Tensor> kg, vg;  // per KV group [seq, d_head]
    std::vector<Tensor> q, p, c; // per (expert, head)
    std::vector<Tensor> e;       // per expert [seq, d_model]
  };
  struct LayerCache {
    Tensor x;
    Tensor scores;
    std::vector<RowCache> rows;
    int64_t batch = 0;
    int64_t seq = 0;
    bool valid = false;
  };

  int n_experts_ = 0;
  int n_head_ = 0;
  int64_t d_head_ = 0;
  int n_kv_ = 0;
  int64_t d_model_ = 0;
  bool gated_ = true;
  Param router_param_;
  std::vector<MoAExpert> experts_;
  Param w_k_, w_v_;
  LayerCache cache_;
};

}  // namespace dsmoe
