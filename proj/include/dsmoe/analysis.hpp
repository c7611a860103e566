#pragma once

// Sparse-inference evaluation and analysis: perplexity over non-overlapping
// windows, sparsity sweeps with a knee report, per-layer expert-utilization
// statistics, cached greedy/temperature generation, and a small throughput
// benchmark that reports wall clock next to analytic active-FLOPs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "dsmoe/corpus.hpp"
#include "dsmoe/model.hpp"

namespace dsmoe {

struct EvalResult {
  double ppl = 0.0;
  double mean_nll = 0.0;
  double mean_active_params = 0.0;
  double active_hidden_frac = 0.0;
  int64_t tokens_scored = 0;
  // Gate records concatenated over windows, one entry per layer.
  std::vector<GateRecord> att_gates;
  std::vector<GateRecord> ffd_gates;
};

namespace detail {
inline void append_gates(std::vector<GateRecord>& into,
                         std::vector<GateRecord>&& gates) {
  if (into.empty()) {
    into = std::move(gates);
    return;
  }
  for (size_t l = 0; l < into.size(); ++l) {
    auto& dst = into[l];
    auto& src = gates[l];
    dst.selected.insert(dst.selected.end(),
                        std::make_move_iterator(src.selected.begin()),
                        std::make_move_iterator(src.selected.end()));
    // Scores are appended rowwise for the utilization/accounting passes.
    const int64_t n = dst.scores.dim(1);
    const int64_t r0 = dst.scores.dim(0);
    const int64_t r1 = src.scores.dim(0);
    Tensor merged({r0 + r1, n});
    std::copy_n(dst.scores.data(), r0 * n, merged.data());
    std::copy_n(src.scores.data(), r1 * n, merged.data() + r0 * n);
    dst.scores = std::move(merged);
  }
}
}  // namespace detail

// exp(mean token NLL) over non-overlapping windows of `seq_len`.
inline EvalResult eval_perplexity(DsMoeModel& model,
                                  const std::vector<int32_t>& tokens,
                                  const SelectionStrategy& strategy,
                                  int64_t seq_len) {
  if (tokens.empty()) throw DataError("eval_perplexity: empty token stream");
  const auto windows = eval_windows(tokens, seq_len);
  const StrategyPair strat = map_strategy(strategy);
  EvalResult res;
  double nll_sum = 0.0;
  for (const auto& w : windows) {
    ModelForward f = model.forward(w.inputs, 1, seq_len, strat, false);
    nll_sum += cross_entropy(f.logits, w.targets) *
               static_cast<double>(seq_len);
    res.tokens_scored += seq_len;
    detail::append_gates(res.att_gates, std::move(f.att_gates));
    detail::append_gates(res.ffd_gates, std::move(f.ffd_gates));
  }
  res.mean_nll = nll_sum / static_cast<double>(res.tokens_scored);
  res.ppl = std::exp(res.mean_nll);
  const ActiveParamReport act =
      count_params_active(model.config(), res.att_gates, res.ffd_gates);
  res.mean_active_params = act.mean_active;
  res.active_hidden_frac = act.active_hidden_frac;
  return res;
}

// ---- per-layer utilization ---------------------------------------------------

struct LayerUtilization {
  double mean = 0.0;
  double min = 1.0;
  double max = 0.0;
};

struct UtilizationStat {
  std::vector<LayerUtilization> att;  // per layer, fraction of experts used
  std::vector<LayerUtilization> ffd;
};

inline std::vector<LayerUtilization> utilization_of(
    const std::vector<GateRecord>& gates) {
  std::vector<LayerUtilization> out;
  for (const auto& g : gates) {
    LayerUtilization u;
    double sum = 0.0;
    for (const auto& d : g.selected) {
      const double frac = static_cast<double>(d.selected.size()) /
                          static_cast<double>(g.n_experts);
      sum += frac;
      u.min = std::min(u.min, frac);
      u.max = std::max(u.max, frac);
    }
    u.mean = sum / static_cast<double>(g.selected.size());
    out.push_back(u);
  }
  return out;
}

inline UtilizationStat layer_utilization(
    const std::vector<GateRecord>& att_gates,
    const std::vector<GateRecord>& ffd_gates) {
  return {utilization_of(att_gates), utilization_of(ffd_gates)};
}

// ---- sparsity sweep -----------------------------------------------------------

struct SweepPoint {
  std::string descriptor;
  double grid_value = 0.0;
  double ppl = 0.0;
  double mean_active_params = 0.0;
  double active_hidden_frac = 0.0;
  bool is_knee = false;
  UtilizationStat utilization;
};

enum class SweepFamily { kTopK, kThreshold };

// One point per grid value, emitted in increasing-sparsity order. The knee
// is the first point whose perplexity exceeds the dense anchor by more than
// 5%. TopK grids are walked descending in K; threshold grids ascending in
// epsilon.
inline std::vector<SweepPoint> sparsity_sweep(DsMoeModel& model,
                                              const std::vector<int32_t>& tokens,
                                              SweepFamily family,
                                              std::vector<double> grid,
                                              int64_t seq_len) {
  if (grid.empty()) throw DataError("sparsity_sweep: empty grid");
  if (family == SweepFamily::kTopK)
    std::sort(grid.rbegin(), grid.rend());
  else
    std::sort(grid.begin(), grid.end());

  const EvalResult dense =
      eval_perplexity(model, tokens, SelectionStrategy::Dense(), seq_len);

  std::vector<SweepPoint> points;
  bool knee_found = false;
  for (double gv : grid) {
    SelectionStrategy st;
    std::ostringstream name;
    if (family == SweepFamily::kTopK) {
      st = SelectionStrategy::TopK(static_cast<int>(gv));
      name << "topk_k=" << static_cast<int>(gv);
    } else {
      st = SelectionStrategy::Threshold(gv);
      name << "threshold_eps=" << gv;
    }
    EvalResult r = eval_perplexity(model, tokens, st, seq_len);
    SweepPoint p;
    p.descriptor = name.str();
    p.grid_value = gv;
    p.ppl = r.ppl;
    p.mean_active_params = r.mean_active_params;
    p.active_hidden_frac = r.active_hidden_frac;
    p.utilization = layer_utilization(r.att_gates, r.ffd_gates);
    if (!knee_found && r.ppl > dense.ppl * 1.05) {
      p.is_knee = true;
      knee_found = true;
    }
    points.push_back(std::move(p));
  }
  return points;
}

inline std::string sweep_csv(const std::vector<SweepPoint>& points) {
  std::ostringstream os;
  os << "strategy,grid_value,ppl,active_params,active_hidden_frac,knee\n";
  for (const auto& p : points)
    os << p.descriptor << ',' << p.grid_value << ',' << p.ppl << ','
       << p.mean_active_params << ',' << p.active_hidden_frac << ','
       << (p.is_knee ? 1 : 0) << '\n';
  return os.str();
}

// ---- generation ----------------------------------------------------------------

struct Sampler {
  double temperature = 0.0;  // 0 = greedy
  uint64_t seed = 0;
};

inline int32_t sample_token(const Tensor& logits, const Sampler& s, Rng& rng) {
  const int64_t v = logits.numel();
  if (s.temperature <= 0.0) {
    int64_t best = 0;
    for (int64_t i = 1; i < v; ++i)
      if (logits[i] > logits[best]) best = i;
    return static_cast<int32_t>(best);
  }
  std::vector<double> probs(static_cast<size_t>(v));
  double mx = logits[0];
  for (int64_t i = 1; i < v; ++i) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  for (int64_t i = 0; i < v; ++i) {
    probs[static_cast<size_t>(i)] = std::exp((logits[i] - mx) / s.temperature);
    sum += probs[static_cast<size_t>(i)];
  }
  double u = rng.uniform() * sum;
  for (int64_t i = 0; i < v; ++i) {
    u -= probs[static_cast<size_t>(i)];
    if (u <= 0.0) return static_cast<int32_t>(i);
  }
  return static_cast<int32_t>(v - 1);
}

// Cached incremental decoding; greedy when temperature is zero. Returns only
// the newly generated ids.
inline std::vector<int32_t> generate(DsMoeModel& model,
                                     const std::vector<int32_t>& prompt,
                                     int64_t n_tokens,
                                     const SelectionStrategy& strategy,
                                     const Sampler& sampler = {}) {
  if (prompt.empty()) throw DataError("generate: empty prompt");
  const int64_t capacity = model.config().max_seq_len;
  if (static_cast<int64_t>(prompt.size()) + n_tokens > capacity)
    throw CapacityError("generate: prompt plus continuation exceeds capacity " +
                        std::to_string(capacity));
  const StrategyPair strat = map_strategy(strategy);
  DecodeState state = model.make_decode_state(capacity);
  Rng rng(sampler.seed);

  Tensor logits;
  for (int32_t tok : prompt) logits = model.decode_step(state, tok, strat);
  std::vector<int32_t> out;
  out.reserve(static_cast<size_t>(n_tokens));
  for (int64_t i = 0; i < n_tokens; ++i) {
    const int32_t tok = sample_token(logits, sampler, rng);
    out.push_back(tok);
    if (i + 1 < n_tokens) logits = model.decode_step(state, tok, strat);
  }
  return out;
}

// ---- throughput -----------------------------------------------------------------

// Analytic floating-point work per token (multiply-add counted as 2 ops) for
// a fixed-K selection; attention cost uses half the context as the average
// causal span. Linear in the number of active experts by construction.
inline double active_flops_per_token(const ModelConfig& cfg, int active_att,
                                     int active_ffd, int64_t context) {
  const double d = static_cast<double>(cfg.d_emb);
  const double dh = static_cast<double>(cfg.d_att);
  const double span = static_cast<double>(context) * 0.5;
  double per_layer = 0.0;
  if (cfg.gated())
    per_layer += 2.0 * d * static_cast<double>(cfg.n_att + cfg.n_ffd);
  per_layer += 2.0 * 2.0 * static_cast<double>(cfg.n_kv) * dh * d;  // shared KV
  // per active attention expert: Q proj + logits + mix + output proj
  per_layer += static_cast<double>(active_att) *
               (2.0 * cfg.n_head * dh * d + 4.0 * cfg.n_head * span * dh +
                2.0 * cfg.n_head * dh * d);
  // per active FFN expert: two projections
  per_layer += static_cast<double>(active_ffd) * 4.0 *
               static_cast<double>(cfg.d_ffd) * d;
  double total = per_layer * static_cast<double>(cfg.n_layer);
  total += 2.0 * static_cast<double>(cfg.vocab_size) * d;  // output projection
  return total;
}

struct BenchResult {
  double prefill_tokens_per_s_mean = 0.0;
  double prefill_tokens_per_s_std = 0.0;
  double decode_tokens_per_s_mean = 0.0;
  double decode_tokens_per_s_std = 0.0;
  double prefill_wall_s_mean = 0.0;
  double decode_wall_s_mean = 0.0;
  double active_flops_per_token = 0.0;
  int reps = 0;
};

namespace detail {
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  return {mean, std::sqrt(var)};
}
}  // namespace detail

// Measures full-sequence prefill and cached decode rates, warmup excluded,
// over `reps` repetitions (at least 5).
inline BenchResult throughput_bench(DsMoeModel& model, int64_t batch,
                                    int64_t seq_len, int64_t n_decode,
                                    const SelectionStrategy& strategy,
                                    int reps = 5, uint64_t seed = 0) {
  reps = std::max(reps, 5);
  const StrategyPair strat = map_strategy(strategy);
  const ModelConfig& cfg = model.config();
  Rng rng(seed);
  std::vector<int32_t> tokens(static_cast<size_t>(batch * seq_len));
  for (auto& t : tokens)
    t = static_cast<int32_t>(rng.uniform_int(cfg.vocab_size));

  using Clock = std::chrono::steady_clock;
  auto seconds = [](Clock::duration d) {
    return std::chrono::duration<double>(d).count();
  };

  // warmup
  (void)model.forward(tokens, batch, seq_len, strat, false);

  std::vector<double> prefill_rate, prefill_wall;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    (void)model.forward(tokens, batch, seq_len, strat, false);
    const double dt = seconds(Clock::now() - t0);
    prefill_wall.push_back(dt);
    prefill_rate.push_back(static_cast<double>(batch * seq_len) / dt);
  }

  std::vector<double> decode_rate, decode_wall;
  const int64_t capacity = std::min<int64_t>(cfg.max_seq_len, n_decode + 1);
  {  // warmup
    DecodeState st = model.make_decode_state(capacity);
    (void)model.decode_step(st, tokens[0], strat);
  }
  for (int r = 0; r < reps; ++r) {
    DecodeState st = model.make_decode_state(capacity);
    Tensor logits = model.decode_step(st, tokens[0], strat);
    const auto t0 = Clock::now();
    int32_t tok = tokens[0];
    for (int64_t i = 0; i < n_decode && st.pos < capacity; ++i) {
      logits = model.decode_step(st, tok, strat);
      int64_t best = 0;
      for (int64_t k = 1; k < logits.numel(); ++k)
        if (logits[k] > logits[best]) best = k;
      tok = static_cast<int32_t>(best);
    }
    const double dt = seconds(Clock::now() - t0);
    decode_wall.push_back(dt);
    decode_rate.push_back(static_cast<double>(n_decode) / dt);
  }

  BenchResult res;
  res.reps = reps;
  std::tie(res.prefill_tokens_per_s_mean, res.prefill_tokens_per_s_std) =
      detail::mean_std(prefill_rate);
  std::tie(res.decode_tokens_per_s_mean, res.decode_tokens_per_s_std) =
      detail::mean_std(decode_rate);
  res.prefill_wall_s_mean = detail::mean_std(prefill_wall).first;
  res.decode_wall_s_mean = detail::mean_std(decode_wall).first;

  int active_att = cfg.n_att, active_ffd = cfg.n_ffd;
  if (strategy.kind == SelectionStrategy::Kind::kTopK)
    active_ffd = std::min(strategy.k, cfg.n_ffd);
  res.active_flops_per_token =
      active_flops_per_token(cfg, active_att, active_ffd, seq_len);
  return res;
}

}  // namespace dsmoe
