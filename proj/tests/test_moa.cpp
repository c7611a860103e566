#include <gtest/gtest.h>

#include <cmath>

#include "dsmoe/moa.hpp"

using namespace dsmoe;

namespace {

void randomize(Param& p, Rng& rng, double scale = 0.4) {
  for (int64_t i = 0; i < p.numel(); ++i) p.value[i] = scale * rng.gaussian();
}

MoALayer random_layer(int n_experts, int n_head, int64_t d_head, int n_kv,
                      int64_t d_model, Rng& rng) {
  MoALayer layer("moa", n_experts, n_head, d_head, n_kv, d_model, true);
  randomize(layer.router(), rng);
  randomize(layer.w_k(), rng);
  randomize(layer.w_v(), rng);
  for (auto& e : layer.experts()) {
    randomize(e.w_q, rng);
    randomize(e.w_o, rng);
  }
  return layer;
}

Tensor random_input(int64_t t, int64_t d, Rng& rng) {
  Tensor x({t, d});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.gaussian();
  return x;
}

void zero_grads(MoALayer& layer) {
  std::vector<Param*> ps;
  layer.collect_params(ps);
  for (Param* p : ps) p->zero_grad();
}

}  // namespace

TEST(MoaForward, IdenticalExpertsAreConvex) {
  Rng rng(3);
  MoALayer layer = random_layer(2, 2, 4, 1, 6, rng);
  layer.experts()[1].w_q.value = layer.experts()[0].w_q.value;
  layer.experts()[1].w_o.value = layer.experts()[0].w_o.value;
  Tensor x = random_input(5, 6, rng);
  MoEForwardResult both = layer.forward(x, 1, 5, SelectionStrategy::Dense(),
                                        false);

  // single expert with gate pinned to it: keep only expert 0 via top-1 on a
  // router biased to expert 0
  for (int64_t c = 0; c < 6; ++c) layer.router().value.at(0, c) += 100.0;
  MoEForwardResult one = layer.forward(x, 1, 5, SelectionStrategy::TopK(1),
                                       false);
  // S ~= 1 for expert 0; outputs should agree closely with the convex mix
  for (int64_t i = 0; i < both.out.numel(); ++i)
    EXPECT_NEAR(both.out[i], one.out[i], 1e-6);
}

TEST(MoaForward, SingleSelectedExpertMatchesPlainAttention) {
  // gate weight 1 on one expert reduces the layer to that expert's grouped
  // attention output
  Rng rng(5);
  MoALayer layer = random_layer(1, 2, 4, 2, 6, rng);
  Tensor x = random_input(4, 6, rng);
  MoEForwardResult r = layer.forward(x, 1, 4, SelectionStrategy::Dense(),
                                     false);

  // hand-rolled reference for a 1-expert layer with S = 1
  const int64_t seq = 4, d = 6, dh = 4;
  const double scale = 1.0 / std::sqrt(4.0);
  Tensor ref({seq, d});
  for (int j = 0; j < 2; ++j) {
    const int g = layer.kv_group(j);
    const double* wq = layer.experts()[0].w_q.value.data() + j * dh * d;
    const double* wo = layer.experts()[0].w_o.value.data() + j * dh * d;
    const double* wk = layer.w_k().value.data() + g * dh * d;
    const double* wv = layer.w_v().value.data() + g * dh * d;
    Tensor q({seq, dh}), k({seq, dh}), v({seq, dh});
    gemm_nt(x.data(), wq, q.data(), seq, d, dh);
    gemm_nt(x.data(), wk, k.data(), seq, d, dh);
    gemm_nt(x.data(), wv, v.data(), seq, d, dh);
    for (int64_t p = 0; p < seq; ++p) {
      std::vector<double> logits(static_cast<size_t>(p + 1));
      for (int64_t m = 0; m <= p; ++m) {
        double s = 0.0;
        for (int64_t h = 0; h < dh; ++h) s += q.at(p, h) * k.at(m, h);
        logits[static_cast<size_t>(m)] = s * scale;
      }
      softmax_row(logits.data(), logits.data(), p + 1);
      std::vector<double> ctx(static_cast<size_t>(dh), 0.0);
      for (int64_t m = 0; m <= p; ++m)
        for (int64_t h = 0; h < dh; ++h)
          ctx[static_cast<size_t>(h)] += logits[static_cast<size_t>(m)] * v.at(m, h);
      for (int64_t h = 0; h < dh; ++h)
        for (int64_t c = 0; c < d; ++c)
          ref.at(p, c) += ctx[static_cast<size_t>(h)] * wo[h * d + c];
    }
  }
  for (int64_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(r.out[i], ref[i], 1e-12);
}

TEST(MoaForward, CausalityHoldsPerPosition) {
  Rng rng(7);
  MoALayer layer = random_layer(2, 2, 4, 1, 6, rng);
  Tensor x = random_input(6, 6, rng);
  MoEForwardResult base = layer.forward(x, 1, 6, SelectionStrategy::Dense(),
                                        false);
  Tensor x2 = x;
  for (int64_t c = 0; c < 6; ++c) x2.at(5, c) += 3.0;  // perturb last token
  MoEForwardResult pert = layer.forward(x2, 1, 6, SelectionStrategy::Dense(),
                                        false);
  for (int64_t p = 0; p < 5; ++p)
    for (int64_t c = 0; c < 6; ++c)
      EXPECT_EQ(base.out.at(p, c), pert.out.at(p, c)) << "pos " << p;
}

TEST(MoaForward, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  MoALayer layer = random_layer(2, 2, 3, 1, 5, rng);
  Tensor x = random_input(4, 5, rng);
  Tensor w = random_input(4, 5, rng);

  auto loss = [&]() {
    MoEForwardResult r = layer.forward(x, 1, 4, SelectionStrategy::Dense(),
                                       false);
    double l = 0.0;
    for (int64_t i = 0; i < r.out.numel(); ++i) l += w[i] * r.out[i];
    return l;
  };

  zero_grads(layer);
  layer.forward(x, 1, 4, SelectionStrategy::Dense(), true);
  MoEBackwardResult b = layer.backward(w, nullptr);

  Tensor fd_x = finite_diff_grad(
      [&](const Tensor& probe) {
        Tensor saved = x;
        x = probe;
        const double l = loss();
        x = saved;
        return l;
      },
      x);
  EXPECT_LT(max_grad_rel_err(b.grad_x, fd_x), 1e-4);

  std::vector<Param*> ps;
  layer.collect_params(ps);
  for (Param* p : ps) {
    Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
          Tensor saved = p->value;
          p->value = probe;
          const double l = loss();
          p->value = saved;
          return l;
        },
        p->value);
    EXPECT_LT(max_grad_rel_err(p->grad, fd), 1e-4) << p->name;
  }
}

TEST(MoaBackward, RequiresDenseCache) {
  Rng rng(13);
  MoALayer layer = random_layer(3, 2, 3, 1, 5, rng);
  Tensor x = random_input(4, 5, rng);
  EXPECT_THROW(layer.forward(x, 1, 4, SelectionStrategy::TopK(1), true),
               StateError);
  EXPECT_THROW(layer.backward(Tensor({4, 5}), nullptr), StateError);
}

TEST(KvCache, DecodeMatchesFullForward) {
  Rng rng(17);
  MoALayer layer = random_layer(2, 2, 4, 2, 6, rng);
  const int64_t seq = 16, d = 6;
  Tensor x = random_input(seq, d, rng);
  MoEForwardResult full = layer.forward(x, 1, seq, SelectionStrategy::Dense(),
                                        false);
  KVCache cache = layer.make_cache(seq);
  for (int64_t p = 0; p < seq; ++p) {
    Tensor row({d});
    std::copy_n(x.data() + p * d, d, row.data());
    auto [out, dec] = layer.decode_step(row, cache, SelectionStrategy::Dense());
    for (int64_t c = 0; c < d; ++c)
      EXPECT_NEAR(out[c], full.out.at(p, c), 1e-10) << "pos " << p;
  }
  EXPECT_EQ(cache.length(), seq);
}

TEST(KvCache, FirstTokenIsValueProjectionPath) {
  // with one cached position the attention weight is exactly 1
  Rng rng(19);
  MoALayer layer = random_layer(1, 1, 3, 1, 4, rng);
  Tensor row = random_input(1, 4, rng);
  Tensor r0({4});
  std::copy_n(row.data(), 4, r0.data());
  KVCache cache = layer.make_cache(4);
  auto [out, dec] = layer.decode_step(r0, cache, SelectionStrategy::Dense());

  // reference: out = (v W_o) with v = W_v x
  const double* wv = layer.w_v().value.data();
  const double* wo = layer.experts()[0].w_o.value.data();
  std::vector<double> v(3, 0.0);
  for (int64_t h = 0; h < 3; ++h)
    for (int64_t c = 0; c < 4; ++c) v[static_cast<size_t>(h)] += wv[h * 4 + c] * r0[c];
  for (int64_t c = 0; c < 4; ++c) {
    double expect = 0.0;
    for (int64_t h = 0; h < 3; ++h) expect += v[static_cast<size_t>(h)] * wo[h * 4 + c];
    EXPECT_NEAR(out[c], expect, 1e-12);
  }
}

TEST(KvCache, OverflowIsAnError) {
  Rng rng(23);
  MoALayer layer = random_layer(1, 1, 3, 1, 4, rng);
  KVCache cache = layer.make_cache(2);
  Tensor row({4});
  (void)layer.decode_step(row, cache, SelectionStrategy::Dense());
  (void)layer.decode_step(row, cache, SelectionStrategy::Dense());
  EXPECT_THROW(layer.decode_step(row, cache, SelectionStrategy::Dense()),
               CapacityError);
}

TEST(KvGrouping, ContiguousBlocksWhenDivisible) {
  MoALayer layer("moa", 1, 4, 2, 2, 4, true);
  EXPECT_EQ(layer.kv_group(0), 0);
  EXPECT_EQ(layer.kv_group(1), 0);
  EXPECT_EQ(layer.kv_group(2), 1);
  EXPECT_EQ(layer.kv_group(3), 1);
}

TEST(KvGrouping, ModuloWhenNotDivisible) {
  MoALayer layer("moa", 1, 3, 2, 2, 4, true);
  EXPECT_EQ(layer.kv_group(0), 0);
  EXPECT_EQ(layer.kv_group(1), 1);
  EXPECT_EQ(layer.kv_group(2), 0);
}
