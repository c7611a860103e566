#pragma once

// Optimization loop: AdamW with decoupled weight decay, cosine learning-rate
// schedule with linear warmup, global-norm gradient clipping, and the three
// training regimes (all-expert, top-k masked, single-expert baseline).
//
// The reference mode is single-threaded and bit-deterministic: the same
// flags and seed reproduce the metrics log byte for byte.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsmoe/checkpoint.hpp"
#include "dsmoe/corpus.hpp"
#include "dsmoe/losses.hpp"
#include "dsmoe/model.hpp"

namespace dsmoe {

struct TrainConfig {
  double lr_peak = 3e-4;
  int64_t warmup_tokens = -1;  // default: 2% of total_tokens
  int64_t total_tokens = 0;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int64_t batch_tokens = 512;
  int64_t seq_len = 32;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  uint64_t seed = 0;
  int64_t eval_interval = 200;  // steps between validation/checkpoint
  int64_t eval_tokens = 8192;   // validation token budget

  int64_t steps() const { return total_tokens / batch_tokens; }
  int64_t warmup() const {
    return warmup_tokens >= 0 ? warmup_tokens : total_tokens / 50;
  }

  void validate() const {
    std::vector<std::string> v;
    if (lr_peak <= 0) v.push_back("lr_peak must be positive");
    if (total_tokens <= 0) v.push_back("total_tokens must be positive");
    if (batch_tokens <= 0) v.push_back("batch_tokens must be positive");
    if (seq_len <= 0) v.push_back("seq_len must be positive");
    if (batch_tokens % seq_len != 0)
      v.push_back("batch_tokens must be a multiple of seq_len");
    if (warmup() >= total_tokens)
      v.push_back("warmup_tokens must be below total_tokens");
    if (clip_norm <= 0) v.push_back("clip_norm must be positive");
    if (!v.empty()) {
      std::string msg = "invalid train config:";
      for (const auto& s : v) msg += "\n  - " + s;
      throw ConfigError(msg);
    }
  }
};

// Linear warmup to lr_peak, then cosine decay to exactly zero.
inline double cosine_lr(int64_t step_tokens, const TrainConfig& cfg) {
  const int64_t warm = cfg.warmup();
  if (step_tokens < warm)
    return cfg.lr_peak * static_cast<double>(step_tokens) /
           static_cast<double>(warm);
  const double progress = static_cast<double>(step_tokens - warm) /
                          static_cast<double>(cfg.total_tokens - warm);
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

// Scales all gradients by clip/norm when the global L2 norm exceeds the
// limit; returns the pre-clip norm.
inline double clip_gradients(std::vector<Param*>& params, double max_norm) {
  double sq = 0.0;
  for (const Param* p : params) {
    for (int64_t i = 0; i < p->grad.numel(); ++i) {
      const double g = p->grad[i];
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in " + p->name);
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (Param* p : params)
      for (int64_t i = 0; i < p->grad.numel(); ++i) p->grad[i] *= scale;
  }
  return norm;
}

struct OptimizerState {
  std::vector<Tensor> m;  // first moments, one per parameter
  std::vector<Tensor> v;  // second moments
  int64_t step = 0;

  static OptimizerState for_params(const std::vector<Param*>& params) {
    OptimizerState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const Param* p : params) {
      st.m.emplace_back(p->value.shape());
      st.v.emplace_back(p->value.shape());
    }
    return st;
  }
};

// Bias-corrected Adam update with decoupled weight decay:
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
// Weight decay skips parameters flagged decay=false (norm gains/biases).
// `skip`, when non-empty, names parameter indices to leave untouched this
// step (used for experts that were never dispatched under masked training).
inline void adamw_step(std::vector<Param*>& params, OptimizerState& state,
                       double lr, const TrainConfig& cfg,
                       const std::set<size_t>& skip = {}) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    if (skip.count(pi)) continue;
    Param& p = *params[pi];
    Tensor& m = state.m[pi];
    Tensor& v = state.v[pi];
    const double wd = p.decay ? cfg.weight_decay : 0.0;
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p.value[i] -=
          lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + wd * p.value[i]);
    }
  }
}

// ---- the training loop -----------------------------------------------------

struct StepMetrics {
  int64_t step = 0;
  int64_t tokens = 0;
  double lm = 0.0;
  double mi_att = 0.0;
  double mi_ffd = 0.0;
  double switch_att = 0.0;  // smoe mode only
  double switch_ffd = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::vector<double> h_e_att;  // marginal gate entropy per layer
  std::vector<double> h_e_ffd;
};

struct TrainResult {
  std::vector<StepMetrics> log;
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
  std::string last_checkpoint;
};

// Mode-native validation loss (mean token NLL) over fixed windows of the
// validation split.
inline double validation_loss(DsMoeModel& model, const TokenStream& stream,
                              const TrainConfig& cfg) {
  const StrategyPair strat = model.train_strategies();
  std::vector<int32_t> val(stream.ids().begin() + stream.split(),
                           stream.ids().end());
  if (static_cast<int64_t>(val.size()) > cfg.eval_tokens)
    val.resize(static_cast<size_t>(cfg.eval_tokens));
  const auto windows = eval_windows(val, cfg.seq_len);
  double nll_sum = 0.0;
  int64_t count = 0;
  for (const auto& w : windows) {
    ModelForward f = model.forward(w.inputs, 1, cfg.seq_len, strat, false);
    nll_sum += cross_entropy(f.logits, w.targets) *
               static_cast<double>(cfg.seq_len);
    count += cfg.seq_len;
  }
  if (count == 0) throw DataError("validation split too short to evaluate");
  return nll_sum / static_cast<double>(count);
}

// Per-layer auxiliary losses for one forward pass: the mode's router loss
// (MI under dense training, switch under masked training), the alpha-scaled
// score gradients to inject into the backward, and the gate entropies kept
// for logging. Shared by the training step and the gradient checker so both
// differentiate exactly the same objective.
struct AuxLosses {
  std::vector<double> aux_att, aux_ffd;          // per layer, mode's loss
  std::vector<double> h_e_att, h_e_ffd;          // marginal gate entropy
  std::vector<Tensor> att_score_grads, ffd_score_grads;  // alpha-scaled
  double mi_att_mean = 0.0, mi_ffd_mean = 0.0;
  double switch_att_mean = 0.0, switch_ffd_mean = 0.0;
};

inline AuxLosses compose_aux(const ModelConfig& mc, const ModelForward& fwd) {
  AuxLosses a;
  const bool smoe = mc.train_mode == TrainMode::kSMoe;
  const double att_scale =
      mc.alpha_att / static_cast<double>(std::max(1, mc.n_layer));
  const double ffd_scale =
      mc.alpha_ffd / static_cast<double>(std::max(1, mc.n_layer));

  auto one_group = [&](const std::vector<GateRecord>& gates, double scale,
                       std::vector<double>& aux, std::vector<double>& h_e,
                       std::vector<Tensor>& sg, double& mi_mean,
                       double& sw_mean) {
    for (const GateRecord& g : gates) {
      const double mi = mi_loss(g.scores);
      mi_mean += mi;
      h_e.push_back(gate_stats(g.scores).entropy_marginal);
      Tensor grad;
      if (smoe) {
        const double sw = switch_loss(g.scores, g.selected);
        sw_mean += sw;
        aux.push_back(sw);
        grad = switch_loss_backward(g.scores, g.selected);
      } else {
        aux.push_back(mi);
        grad = mi_loss_backward(g.scores);
      }
      for (int64_t i = 0; i < grad.numel(); ++i) grad[i] *= scale;
      sg.push_back(std::move(grad));
    }
    const double inv = 1.0 / static_cast<double>(std::max(1, mc.n_layer));
    mi_mean *= inv;
    sw_mean *= inv;
  };
  one_group(fwd.att_gates, att_scale, a.aux_att, a.h_e_att, a.att_score_grads,
            a.mi_att_mean, a.switch_att_mean);
  one_group(fwd.ffd_gates, ffd_scale, a.aux_ffd, a.h_e_ffd, a.ffd_score_grads,
            a.mi_ffd_mean, a.switch_ffd_mean);
  return a;
}

// One forward/backward/update step on a sampled batch. Exposed separately so
// tests can drive single steps.
inline StepMetrics train_step(DsMoeModel& model, const TokenStream& stream,
                              const TrainConfig& cfg, OptimizerState& opt,
                              int64_t step) {
  const ModelConfig& mc = model.config();
  const int64_t b = cfg.batch_tokens / cfg.seq_len;
  const Batch batch = next_batch(stream, b, cfg.seq_len, cfg.seed, step);

  model.zero_grads();
  const StrategyPair strat = model.train_strategies();
  ModelForward fwd = model.forward(batch.inputs, b, cfg.seq_len, strat, true);

  StepMetrics m;
  m.step = step;
  m.tokens = (step + 1) * cfg.batch_tokens;
  m.lm = cross_entropy(fwd.logits, batch.targets);
  if (!std::isfinite(m.lm)) throw NumericError("training loss is non-finite");

  AuxLosses aux = compose_aux(mc, fwd);
  m.h_e_att = std::move(aux.h_e_att);
  m.h_e_ffd = std::move(aux.h_e_ffd);
  m.mi_att = aux.mi_att_mean;
  m.mi_ffd = aux.mi_ffd_mean;
  m.switch_att = aux.switch_att_mean;
  m.switch_ffd = aux.switch_ffd_mean;
  m.total = total_loss(m.lm, aux.aux_att, aux.aux_ffd, mc.alpha_att,
                       mc.alpha_ffd)
                .total;

  // In dense (single-expert) mode the alphas weight nothing trainable.
  const bool use_aux = mc.train_mode != TrainMode::kDense;
  Tensor grad_logits = cross_entropy_backward(fwd.logits, batch.targets);
  model.backward(grad_logits, use_aux ? &aux.att_score_grads : nullptr,
                 use_aux ? &aux.ffd_score_grads : nullptr);

  m.grad_norm = clip_gradients(model.params(), cfg.clip_norm);
  m.lr = cosine_lr(step * cfg.batch_tokens, cfg);

  // Masked training leaves never-dispatched experts untouched: without a
  // gradient signal those parameter tensors must be bit-identical after the
  // step, so they skip the decay/moment update entirely.
  std::set<size_t> skip;
  if (mc.train_mode == TrainMode::kSMoe) {
    for (int l = 0; l < mc.n_layer; ++l) {
      const auto& touched = model.blocks()[static_cast<size_t>(l)].ffn
                                .touched_experts();
      std::set<int> touched_set(touched.begin(), touched.end());
      for (int e = 0; e < mc.n_ffd; ++e) {
        if (touched_set.count(e)) continue;
        const std::string prefix = "layers." + std::to_string(l) +
                                   ".ffn.experts." + std::to_string(e) + ".";
        for (size_t pi = 0; pi < model.params().size(); ++pi)
          if (model.params()[pi]->name.rfind(prefix, 0) == 0) skip.insert(pi);
      }
    }
  }
  adamw_step(model.params(), opt, m.lr, cfg, skip);
  return m;
}

inline nlohmann::json metrics_to_json(const StepMetrics& m, TrainMode mode) {
  nlohmann::json j{{"step", m.step},     {"tokens", m.tokens},
                   {"lm", m.lm},         {"mi_att", m.mi_att},
                   {"mi_ffd", m.mi_ffd}, {"total", m.total},
                   {"lr", m.lr},         {"grad_norm", m.grad_norm},
                   {"h_e_att", m.h_e_att}, {"h_e_ffd", m.h_e_ffd}};
  if (mode == TrainMode::kSMoe) {
    j["switch_att"] = m.switch_att;
    j["switch_ffd"] = m.switch_ffd;
  }
  return j;
}

// Full run: per step sample -> forward -> losses -> backward -> clip ->
// update, with periodic validation and checkpoints under `out_dir` (pass ""
// to keep everything in memory). A non-finite loss aborts with the last
// periodic checkpoint left intact on disk.
inline TrainResult train(DsMoeModel& model, const TokenStream& stream,
                         const TrainConfig& cfg, const std::string& out_dir,
                         const std::function<void(const StepMetrics&)>&
                             on_step = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::ofstream log_file;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    log_file.open(fs::path(out_dir) / "metrics.jsonl", std::ios::trunc);
    if (!log_file) throw DataError("train: cannot write metrics.jsonl");
  }

  OptimizerState opt = OptimizerState::for_params(model.params());
  TrainResult result;
  result.initial_val_loss = validation_loss(model, stream, cfg);
  if (log_file)
    log_file << nlohmann::json{{"event", "val"},
                               {"step", 0},
                               {"val_lm", result.initial_val_loss}}
                    .dump()
             << '\n';

  const int64_t steps = cfg.steps();
  for (int64_t step = 0; step < steps; ++step) {
    StepMetrics m;
    try {
      m = train_step(model, stream, cfg, opt, step);
    } catch (const NumericError&) {
      if (log_file) log_file.flush();
      throw;  // last periodic checkpoint stays on disk
    }
    result.log.push_back(m);
    if (log_file)
      log_file << metrics_to_json(m, model.config().train_mode).dump() << '\n';
    if (on_step) on_step(m);

    const bool last = step + 1 == steps;
    if ((cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0) ||
        last) {
      const double val = validation_loss(model, stream, cfg);
      result.final_val_loss = val;
      if (log_file)
        log_file << nlohmann::json{{"event", "val"},
                                   {"step", step + 1},
                                   {"val_lm", val}}
                        .dump()
                 << '\n';
      if (!out_dir.empty()) {
        const std::string ckpt =
            (fs::path(out_dir) / ("ckpt-" + std::to_string(step + 1)))
                .string();
        save_checkpoint(model, ckpt, step + 1);
        result.last_checkpoint = ckpt;
      }
    }
  }
  return result;
}

}  // namespace dsmoe
