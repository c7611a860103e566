#include <gtest/gtest.h>

#include <cmath>

#include "dsmoe/analysis.hpp"

using namespace dsmoe;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.d_emb = 8;
  c.n_layer = 2;
  c.n_att = 2;
  c.n_head = 2;
  c.d_att = 4;
  c.n_kv = 1;
  c.n_ffd = 4;
  c.d_ffd = 8;
  c.vocab_size = 13;
  c.max_seq_len = 96;
  return c;
}

std::vector<int32_t> ramp_tokens(int64_t n, int64_t vocab) {
  std::vector<int32_t> t(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    t[static_cast<size_t>(i)] = static_cast<int32_t>((i * 5 + 1) % vocab);
  return t;
}

}  // namespace

TEST(EvalPerplexity, UniformModelScoresVocabSize) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 3);
  m->out_proj().value.fill(0.0);  // logits all zero -> uniform predictions
  const auto tokens = ramp_tokens(64, cfg.vocab_size);
  EvalResult r =
      eval_perplexity(*m, tokens, SelectionStrategy::Dense(), 8);
  EXPECT_NEAR(r.ppl, static_cast<double>(cfg.vocab_size), 1e-9);
}

TEST(EvalPerplexity, DenseEqualsFullTopKExactly) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 5);
  const auto tokens = ramp_tokens(64, cfg.vocab_size);
  EvalResult dense =
      eval_perplexity(*m, tokens, SelectionStrategy::Dense(), 8);
  EvalResult topk =
      eval_perplexity(*m, tokens, SelectionStrategy::TopK(cfg.n_ffd), 8);
  EXPECT_EQ(dense.ppl, topk.ppl);
}

TEST(EvalPerplexity, MatchesNaivePerTokenLoop) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 7);
  const auto tokens = ramp_tokens(48, cfg.vocab_size);
  const int64_t seq = 8;
  EvalResult r = eval_perplexity(*m, tokens, SelectionStrategy::Dense(), seq);

  // oracle: token-by-token NLL via separate forwards and per-row softmax
  double nll = 0.0;
  int64_t count = 0;
  for (int64_t start = 0; start + seq < static_cast<int64_t>(tokens.size());
       start += seq) {
    std::vector<int32_t> inputs(tokens.begin() + start,
                                tokens.begin() + start + seq);
    ModelForward f = m->forward(inputs, 1, seq, SelectionStrategy::Dense(),
                                false);
    for (int64_t p = 0; p < seq; ++p) {
      std::vector<double> probs(static_cast<size_t>(cfg.vocab_size));
      softmax_row(probs.data(), f.logits.data() + p * cfg.vocab_size,
                  cfg.vocab_size);
      nll -= std::log(probs[static_cast<size_t>(
          tokens[static_cast<size_t>(start + p + 1)])]);
      ++count;
    }
  }
  EXPECT_NEAR(r.ppl, std::exp(nll / static_cast<double>(count)), 1e-9);
  EXPECT_THROW(eval_perplexity(*m, {}, SelectionStrategy::Dense(), seq),
               DataError);
}

TEST(LayerUtilization, HandArithmetic) {
  // one layer of 4 experts; tokens select {0,1} and {0}
  GateRecord g;
  g.n_experts = 4;
  g.scores = Tensor({2, 4});
  GateDecision d1, d2;
  d1.selected = {0, 1};
  d2.selected = {0};
  g.selected = {d1, d2};
  auto stats = utilization_of({g});
  ASSERT_EQ(stats.size(), 1u);
  EXPECT_DOUBLE_EQ(stats[0].mean, 0.375);
  EXPECT_DOUBLE_EQ(stats[0].min, 0.25);
  EXPECT_DOUBLE_EQ(stats[0].max, 0.5);
}

TEST(LayerUtilization, DenseStrategyIsExactlyOne) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 9);
  const auto tokens = ramp_tokens(32, cfg.vocab_size);
  EvalResult r = eval_perplexity(*m, tokens, SelectionStrategy::Dense(), 8);
  UtilizationStat u = layer_utilization(r.att_gates, r.ffd_gates);
  for (const auto& s : u.att) {
    EXPECT_DOUBLE_EQ(s.mean, 1.0);
    EXPECT_DOUBLE_EQ(s.min, 1.0);
    EXPECT_DOUBLE_EQ(s.max, 1.0);
  }
  for (const auto& s : u.ffd) EXPECT_DOUBLE_EQ(s.mean, 1.0);
}

TEST(LayerUtilization, MatchesIndependentMaskWalk) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 11);
  const auto tokens = ramp_tokens(64, cfg.vocab_size);
  EvalResult r =
      eval_perplexity(*m, tokens, SelectionStrategy::Threshold(0.9), 8);
  UtilizationStat u = layer_utilization(r.att_gates, r.ffd_gates);

  for (size_t l = 0; l < r.ffd_gates.size(); ++l) {
    const auto& g = r.ffd_gates[l];
    double sum = 0.0, mn = 1.0, mx = 0.0;
    for (const auto& d : g.selected) {
      double count = 0.0;
      for (uint8_t m8 : d.mask) count += m8;
      const double frac = count / static_cast<double>(g.n_experts);
      sum += frac;
      mn = std::min(mn, frac);
      mx = std::max(mx, frac);
    }
    EXPECT_DOUBLE_EQ(u.ffd[l].mean,
                     sum / static_cast<double>(g.selected.size()));
    EXPECT_DOUBLE_EQ(u.ffd[l].min, mn);
    EXPECT_DOUBLE_EQ(u.ffd[l].max, mx);
  }
}

TEST(SparsitySweep, DensePointAnchorsTheCurve) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 13);
  const auto tokens = ramp_tokens(64, cfg.vocab_size);
  EvalResult dense = eval_perplexity(*m, tokens, SelectionStrategy::Dense(), 8);
  auto points = sparsity_sweep(*m, tokens, SweepFamily::kTopK, {4, 2, 1}, 8);
  ASSERT_EQ(points.size(), 3u);
  EXPECT_EQ(points[0].grid_value, 4.0);
  EXPECT_EQ(points[0].ppl, dense.ppl);  // bit-for-bit anchor
  // active params strictly decrease along the grid
  EXPECT_GT(points[0].mean_active_params, points[1].mean_active_params);
  EXPECT_GT(points[1].mean_active_params, points[2].mean_active_params);
}

TEST(SparsitySweep, ThresholdActiveParamsMonotoneInEps) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 15);
  const auto tokens = ramp_tokens(64, cfg.vocab_size);
  auto points = sparsity_sweep(*m, tokens, SweepFamily::kThreshold,
                               {0.0, 0.5, 1.0, 2.0}, 8);
  for (size_t i = 0; i + 1 < points.size(); ++i)
    EXPECT_GE(points[i].mean_active_params,
              points[i + 1].mean_active_params);
}

TEST(SparsitySweep, CsvHasHeaderAndRows) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 17);
  const auto tokens = ramp_tokens(48, cfg.vocab_size);
  auto points = sparsity_sweep(*m, tokens, SweepFamily::kTopK, {4, 1}, 8);
  const std::string csv = sweep_csv(points);
  EXPECT_NE(csv.find("strategy,grid_value,ppl"), std::string::npos);
  EXPECT_NE(csv.find("topk_k=4"), std::string::npos);
  EXPECT_NE(csv.find("topk_k=1"), std::string::npos);
}

TEST(Generate, GreedyIsDeterministic) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 19);
  const std::vector<int32_t> prompt = {1, 2, 3};
  auto a = generate(*m, prompt, 12, SelectionStrategy::Dense());
  auto b = generate(*m, prompt, 12, SelectionStrategy::Dense());
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 12u);
}

TEST(Generate, EmptyContinuation) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 21);
  EXPECT_TRUE(generate(*m, {1, 2}, 0, SelectionStrategy::Dense()).empty());
}

TEST(Generate, CachedMatchesUncachedGreedy) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 23);
  const std::vector<int32_t> prompt = {1, 5, 2, 8};
  const int64_t n = 16;
  const auto cached = generate(*m, prompt, n, SelectionStrategy::TopK(2));

  // uncached oracle: full forward over the growing prefix each step
  std::vector<int32_t> ctx = prompt;
  std::vector<int32_t> uncached;
  for (int64_t i = 0; i < n; ++i) {
    ModelForward f = m->forward(ctx, 1, static_cast<int64_t>(ctx.size()),
                                SelectionStrategy::TopK(2), false);
    const int64_t last = static_cast<int64_t>(ctx.size()) - 1;
    int64_t best = 0;
    for (int64_t v = 1; v < cfg.vocab_size; ++v)
      if (f.logits.at(last, v) > f.logits.at(last, best)) best = v;
    uncached.push_back(static_cast<int32_t>(best));
    ctx.push_back(static_cast<int32_t>(best));
  }
  EXPECT_EQ(cached, uncached);
}

TEST(Generate, CapacityOverflowIsAnError) {
  ModelConfig cfg = micro_config();
  cfg.max_seq_len = 8;
  auto m = build_model(cfg, 25);
  EXPECT_THROW(generate(*m, {1, 2, 3, 4}, 5, SelectionStrategy::Dense()),
               CapacityError);
}

TEST(Throughput, ActiveFlopsLinearInK) {
  const ModelConfig cfg = micro_config();
  const int64_t ctx = 32;
  const double f1 = active_flops_per_token(cfg, cfg.n_att, 1, ctx);
  const double f2 = active_flops_per_token(cfg, cfg.n_att, 2, ctx);
  const double f3 = active_flops_per_token(cfg, cfg.n_att, 3, ctx);
  const double f4 = active_flops_per_token(cfg, cfg.n_att, 4, ctx);
  EXPECT_NEAR(f2 - f1, f3 - f2, 1e-9);
  EXPECT_NEAR(f3 - f2, f4 - f3, 1e-9);
  EXPECT_LT(f1, f4);  // sparse below dense
}

TEST(Throughput, BenchReportsRatesAndSpread) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 27);
  BenchResult r = throughput_bench(*m, 2, 16, 8, SelectionStrategy::TopK(2),
                                   5, 1);
  EXPECT_EQ(r.reps, 5);
  EXPECT_GT(r.prefill_tokens_per_s_mean, 0.0);
  EXPECT_GT(r.decode_tokens_per_s_mean, 0.0);
  EXPECT_GE(r.prefill_tokens_per_s_std, 0.0);
  EXPECT_GT(r.active_flops_per_token, 0.0);
  const BenchResult dense = throughput_bench(*m, 2, 16, 8,
                                             SelectionStrategy::Dense(), 5, 1);
  EXPECT_LT(r.active_flops_per_token, dense.active_flops_per_token);
}
