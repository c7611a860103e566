#pragma once

// Model assembly: configuration, weight initialization, the full
// forward/backward over pre-norm blocks of (mixture-of-attention ->
// residual -> mixture-of-experts FFN -> residual), incremental decoding,
// and parameter accounting.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dsmoe/common.hpp"
#include "dsmoe/corpus.hpp"
#include "dsmoe/gating.hpp"
#include "dsmoe/moa.hpp"
#include "dsmoe/moe_ffn.hpp"
#include "dsmoe/param.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

enum class TrainMode {
  kDsMoe,   // all experts computed and optimized every step
  kSMoe,    // top-k masked computation and gradients (conventional regime)
  kDense,   // single-expert baseline, no routers
};

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kDsMoe: return "dsmoe";
    case TrainMode::kSMoe: return "smoe";
    case TrainMode::kDense: return "dense";
  }
  return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "dsmoe") return TrainMode::kDsMoe;
  if (s == "smoe") return TrainMode::kSMoe;
  if (s == "dense") return TrainMode::kDense;
  throw ConfigError("unknown train mode '" + s + "'");
}

struct ModelConfig {
  int64_t d_emb = 64;
  int n_layer = 2;
  int n_att = 2;        // attention experts per layer
  int n_head = 2;       // query heads per attention expert
  int64_t d_att = 16;   // per-head width
  int n_kv = 1;         // shared key/value heads
  int n_ffd = 4;        // FFN experts per layer
  int64_t d_ffd = 128;  // FFN expert hidden width
  int64_t vocab_size = ByteTokenizer::kVocabSize;
  int64_t max_seq_len = 256;
  TrainMode train_mode = TrainMode::kDsMoe;
  double alpha_att = 0.0;
  double alpha_ffd = 0.0;
  int topk_train = 2;   // smoe mode only

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    auto positive = [&](int64_t x, const char* name) {
      if (x <= 0) v.push_back(std::string(name) + " must be positive");
    };
    positive(d_emb, "d_emb");
    positive(n_layer, "n_layer");
    positive(n_att, "n_att");
    positive(n_head, "n_head");
    positive(d_att, "d_att");
    positive(n_kv, "n_kv");
    positive(n_ffd, "n_ffd");
    positive(d_ffd, "d_ffd");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (alpha_att < 0.0) v.push_back("alpha_att must be >= 0");
    if (alpha_ffd < 0.0) v.push_back("alpha_ffd must be >= 0");
    if (train_mode == TrainMode::kDense && (n_att != 1 || n_ffd != 1))
      v.push_back("dense mode requires n_att == 1 and n_ffd == 1");
    if (train_mode == TrainMode::kSMoe &&
        (topk_train < 1 || topk_train > n_ffd))
      v.push_back("smoe mode requires 1 <= topk_train <= n_ffd");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& s : v) msg += "\n  - " + s;
    throw ConfigError(msg);
  }

  bool gated() const { return train_mode != TrainMode::kDense; }

  // The acceptance-scale geometry used by gradcheck and the smoke tests.
  static ModelConfig preset_tiny() {
    ModelConfig c;
    c.d_emb = 16;
    c.n_layer = 2;
    c.n_att = 2;
    c.n_head = 2;
    c.d_att = 8;
    c.n_kv = 1;
    c.n_ffd = 4;
    c.d_ffd = 16;
    c.vocab_size = 257;
    c.max_seq_len = 64;
    c.train_mode = TrainMode::kDsMoe;
    c.alpha_att = 0.01;
    c.alpha_ffd = 0.02;
    c.topk_train = 2;
    return c;
  }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"d_emb", c.d_emb},
                        {"n_layer", c.n_layer},
                        {"n_att", c.n_att},
                        {"n_head", c.n_head},
                        {"d_att", c.d_att},
                        {"n_kv", c.n_kv},
                        {"n_ffd", c.n_ffd},
                        {"d_ffd", c.d_ffd},
                        {"vocab_size", c.vocab_size},
                        {"max_seq_len", c.max_seq_len},
                        {"train_mode", to_string(c.train_mode)},
                        {"alpha_att", c.alpha_att},
                        {"alpha_ffd", c.alpha_ffd},
                        {"topk_train", c.topk_train}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d_emb = j.at("d_emb").get<int64_t>();
    c.n_layer = j.at("n_layer").get<int>();
    c.n_att = j.at("n_att").get<int>();
    c.n_head = j.at("n_head").get<int>();
    c.d_att = j.at("d_att").get<int64_t>();
    c.n_kv = j.at("n_kv").get<int>();
    c.n_ffd = j.at("n_ffd").get<int>();
    c.d_ffd = j.at("d_ffd").get<int64_t>();
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.max_seq_len = j.at("max_seq_len").get<int64_t>();
    c.train_mode = train_mode_from_string(j.at("train_mode").get<std::string>());
    c.alpha_att = j.at("alpha_att").get<double>();
    c.alpha_ffd = j.at("alpha_ffd").get<double>();
    c.topk_train = j.at("topk_train").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse: ") + e.what());
  }
  return c;
}

// How a user-facing strategy applies per layer group: fixed-K selection
// activates all attention experts (attention stays far denser than the FFN),
// while threshold-family strategies apply to both groups.
struct StrategyPair {
  SelectionStrategy att;
  SelectionStrategy ffd;
};

inline StrategyPair map_strategy(const SelectionStrategy& user) {
  StrategyPair p{user, user};
  if (user.kind == SelectionStrategy::Kind::kTopK)
    p.att = SelectionStrategy::Dense();
  return p;
}

struct ModelForward {
  Tensor logits;                       // [b*seq, vocab]
  std::vector<GateRecord> att_gates;   // one per layer
  std::vector<GateRecord> ffd_gates;
  int64_t att_expert_evals = 0;
  int64_t ffd_expert_evals = 0;
};

struct Block {
  Param ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  MoALayer moa;
  MoEFfnLayer ffn;
};

struct DecodeState {
  std::vector<KVCache> caches;  // one per layer
  int64_t pos = 0;
};

class DsMoeModel {
 public:
  explicit DsMoeModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    embed_ = Param("embed.weight", {cfg.vocab_size, cfg.d_emb});
    pos_ = Param("pos.weight", {cfg.max_seq_len, cfg.d_emb});
    blocks_.reserve(static_cast<size_t>(cfg.n_layer));
    for (int l = 0; l < cfg.n_layer; ++l) {
      const std::string p = "layers." + std::to_string(l);
      Block b;
      b.ln1_gain = Param(p + ".ln1.gain", {cfg.d_emb}, /*decay=*/false);
      b.ln1_bias = Param(p + ".ln1.bias", {cfg.d_emb}, /*decay=*/false);
      b.ln2_gain = Param(p + ".ln2.gain", {cfg.d_emb}, /*decay=*/false);
      b.ln2_bias = Param(p + ".ln2.bias", {cfg.d_emb}, /*decay=*/false);
      b.moa = MoALayer(p + ".moa", cfg.n_att, cfg.n_head, cfg.d_att, cfg.n_kv,
                       cfg.d_emb, cfg.gated());
      b.ffn = MoEFfnLayer(p + ".ffn", cfg.n_ffd, cfg.d_emb, cfg.d_ffd,
                          cfg.gated());
      blocks_.push_back(std::move(b));
    }
    final_gain_ = Param("final_norm.gain", {cfg.d_emb}, /*decay=*/false);
    final_bias_ = Param("final_norm.bias", {cfg.d_emb}, /*decay=*/false);
    out_proj_ = Param("out_proj.weight", {cfg.vocab_size, cfg.d_emb});

    params_.push_back(&embed_);
    params_.push_back(&pos_);
    for (auto& b : blocks_) {
      params_.push_back(&b.ln1_gain);
      params_.push_back(&b.ln1_bias);
      b.moa.collect_params(params_);
      params_.push_back(&b.ln2_gain);
      params_.push_back(&b.ln2_bias);
      b.ffn.collect_params(params_);
    }
    params_.push_back(&final_gain_);
    params_.push_back(&final_bias_);
    params_.push_back(&out_proj_);
  }

  // params_ holds pointers into this object; fix the address.
  DsMoeModel(const DsMoeModel&) = delete;
  DsMoeModel& operator=(const DsMoeModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param*>& params() { return params_; }
  const std::vector<Param*>& params() const { return params_; }
  std::vector<Block>& blocks() { return blocks_; }
  Param& embed() { return embed_; }
  Param& out_proj() { return out_proj_; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const Param* p : params_) n += p->numel();
    return n;
  }

  void zero_grads() {
    for (Param* p : params_) p->zero_grad();
  }

  // N(0, 0.02^2) everywhere, with the residual-writing projections scaled
  // down by 1/sqrt(2 * n_layer); norm gains start at 1, biases at 0.
  // Consumes the RNG in registry order, so (config, seed) pins every bit.
  void init_weights(uint64_t seed) {
    Rng rng(seed);
    const double residual_scale =
        1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layer));
    for (Param* p : params_) {
      const bool is_gain = p->name.ends_with(".gain");
      const bool is_bias = p->name.ends_with(".bias");
      if (is_gain) {
        p->value.fill(1.0);
        continue;
      }
      if (is_bias) {
        p->value.fill(0.0);
        continue;
      }
      double std_dev = 0.02;
      if (p->name.ends_with(".w_o") || p->name.ends_with(".w_out"))
        std_dev *= residual_scale;
      for (int64_t i = 0; i < p->numel(); ++i)
        p->value[i] = std_dev * rng.gaussian();
    }
  }

  // ---- forward ---------------------------------------------------------------

  ModelForward forward(const std::vector<int32_t>& tokens, int64_t batch,
                       int64_t seq, const StrategyPair& strategy,
                       bool keep_cache = false) {
    if (seq > cfg_.max_seq_len)
      throw ShapeError("forward: sequence length " + std::to_string(seq) +
                       " exceeds max_seq_len " +
                       std::to_string(cfg_.max_seq_len));
    if (static_cast<int64_t>(tokens.size()) != batch * seq)
      throw ShapeError("forward: token count " +
                       std::to_string(tokens.size()) + " != batch*seq");
    const int64_t t_total = batch * seq;

    Tensor x({t_total, cfg_.d_emb});
    for (int64_t t = 0; t < t_total; ++t) {
      const int32_t tok = tokens[static_cast<size_t>(t)];
      if (tok < 0 || tok >= cfg_.vocab_size)
        throw IndexError("forward: token id " + std::to_string(tok) +
                         " outside vocabulary");
      const double* e = embed_.value.data() + tok * cfg_.d_emb;
      const double* po = pos_.value.data() + (t % seq) * cfg_.d_emb;
      double* xr = x.data() + t * cfg_.d_emb;
      for (int64_t c = 0; c < cfg_.d_emb; ++c) xr[c] = e[c] + po[c];
    }

    if (keep_cache) {
      cache_ = Cache{};
      cache_.tokens = tokens;
      cache_.batch = batch;
      cache_.seq = seq;
      cache_.block_in.reserve(static_cast<size_t>(cfg_.n_layer));
      cache_.block_mid.reserve(static_cast<size_t>(cfg_.n_layer));
    }

    ModelForward out;
    for (auto& b : blocks_) {
      if (keep_cache) cache_.block_in.push_back(x);
      Tensor xn = layer_norm(x, b.ln1_gain.value, b.ln1_bias.value);
      MoEForwardResult att = b.moa.forward(xn, batch, seq, strategy.att,
                                           keep_cache);
      for (int64_t i = 0; i < x.numel(); ++i) x[i] += att.out[i];
      out.att_gates.push_back(std::move(att.gate));
      out.att_expert_evals += att.expert_token_evals;

      if (keep_cache) cache_.block_mid.push_back(x);
      Tensor xn2 = layer_norm(x, b.ln2_gain.value, b.ln2_bias.value);
      MoEForwardResult ffd = b.ffn.forward(xn2, strategy.ffd, keep_cache);
      for (int64_t i = 0; i < x.numel(); ++i) x[i] += ffd.out[i];
      out.ffd_gates.push_back(std::move(ffd.gate));
      out.ffd_expert_evals += ffd.expert_token_evals;
    }

    if (keep_cache) cache_.final_in = x;
    Tensor h = layer_norm(x, final_gain_.value, final_bias_.value);
    if (keep_cache) {
      cache_.final_out = h;
      cache_.valid = true;
    }
    out.logits = Tensor({t_total, cfg_.vocab_size});
    gemm_nt(h.data(), out_proj_.value.data(), out.logits.data(), t_total,
            cfg_.d_emb, cfg_.vocab_size);
    return out;
  }

  ModelForward forward(const std::vector<int32_t>& tokens, int64_t batch,
                       int64_t seq, const SelectionStrategy& user_strategy,
                       bool keep_cache = false) {
    return forward(tokens, batch, seq, map_strategy(user_strategy), keep_cache);
  }

  // The strategies the model trains under.
  StrategyPair train_strategies() const {
    switch (cfg_.train_mode) {
      case TrainMode::kSMoe:
        return {SelectionStrategy::Dense(),
                SelectionStrategy::TopK(cfg_.topk_train)};
      case TrainMode::kDsMoe:
      case TrainMode::kDense:
        break;
    }
    return {SelectionStrategy::Dense(), SelectionStrategy::Dense()};
  }

  // ---- backward --------------------------------------------------------------
  // Accumulates gradients for every parameter reached by the cached forward.
  // `att_score_grads` / `ffd_score_grads`, when non-null, carry the auxiliary
  // router-loss gradient per layer.

  void backward(const Tensor& grad_logits,
                const std::vector<Tensor>* att_score_grads = nullptr,
                const std::vector<Tensor>* ffd_score_grads = nullptr) {
    if (!cache_.valid)
      throw StateError("model backward: no cached forward to differentiate");
    const int64_t t_total = cache_.batch * cache_.seq;

    // logits = final_out * out_proj^T
    gemm_tn(grad_logits.data(), cache_.final_out.data(), out_proj_.grad.data(),
            t_total, cfg_.vocab_size, cfg_.d_emb, /*acc=*/true);
    Tensor gh({t_total, cfg_.d_emb});
    gemm(grad_logits.data(), out_proj_.value.data(), gh.data(), t_total,
         cfg_.vocab_size, cfg_.d_emb);

    LayerNormGrads gfin =
        layer_norm_backward(cache_.final_in, final_gain_.value, gh);
    accumulate(final_gain_.grad, gfin.gain);
    accumulate(final_bias_.grad, gfin.bias);
    Tensor gx = std::move(gfin.x);

    for (int l = cfg_.n_layer - 1; l >= 0; --l) {
      Block& b = blocks_[static_cast<size_t>(l)];
      // FFN half: x_out = x_mid + ffn(ln2(x_mid))
      const Tensor* ffd_extra =
          ffd_score_grads ? &(*ffd_score_grads)[static_cast<size_t>(l)]
                          : nullptr;
      Tensor g_ffn_in = b.ffn.backward(gx, ffd_extra).grad_x;
      LayerNormGrads g2 = layer_norm_backward(
          cache_.block_mid[static_cast<size_t>(l)], b.ln2_gain.value, g_ffn_in);
      accumulate(b.ln2_gain.grad, g2.gain);
      accumulate(b.ln2_bias.grad, g2.bias);
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g2.x[i];

      // attention half: x_mid = x_in + moa(ln1(x_in))
      const Tensor* att_extra =
          att_score_grads ? &(*att_score_grads)[static_cast<size_t>(l)]
                          : nullptr;
      Tensor g_att_in = b.moa.backward(gx, att_extra).grad_x;
      LayerNormGrads g1 = layer_norm_backward(
          cache_.block_in[static_cast<size_t>(l)], b.ln1_gain.value, g_att_in);
      accumulate(b.ln1_gain.grad, g1.gain);
      accumulate(b.ln1_bias.grad, g1.bias);
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g1.x[i];
    }

    // embeddings
    for (int64_t t = 0; t < t_total; ++t) {
      const int32_t tok = cache_.tokens[static_cast<size_t>(t)];
      const double* g = gx.data() + t * cfg_.d_emb;
      double* ge = embed_.grad.data() + tok * cfg_.d_emb;
      double* gp = pos_.grad.data() + (t % cache_.seq) * cfg_.d_emb;
      for (int64_t c = 0; c < cfg_.d_emb; ++c) {
        ge[c] += g[c];
        gp[c] += g[c];
      }
    }
    cache_ = Cache{};
  }

  // ---- incremental decoding ----------------------------------------------------

  DecodeState make_decode_state(int64_t capacity = -1) {
    if (capacity < 0) capacity = cfg_.max_seq_len;
    DecodeState st;
    st.caches.reserve(static_cast<size_t>(cfg_.n_layer));
    for (auto& b : blocks_) st.caches.push_back(b.moa.make_cache(capacity));
    return st;
  }

  // Feeds one token; returns next-token logits. Equivalent to the final row
  // of forward() over the whole prefix.
  Tensor decode_step(DecodeState& state, int32_t token,
                     const StrategyPair& strategy) {
    if (state.pos >= cfg_.max_seq_len)
      throw CapacityError("decode: position " + std::to_string(state.pos) +
                          " exceeds max_seq_len");
    if (token < 0 || token >= cfg_.vocab_size)
      throw IndexError("decode: token id " + std::to_string(token) +
                       " outside vocabulary");
    Tensor x({1, cfg_.d_emb});
    {
      const double* e = embed_.value.data() + token * cfg_.d_emb;
      const double* po = pos_.value.data() + state.pos * cfg_.d_emb;
      for (int64_t c = 0; c < cfg_.d_emb; ++c) x[c] = e[c] + po[c];
    }
    for (size_t l = 0; l < blocks_.size(); ++l) {
      Block& b = blocks_[l];
      Tensor xn = layer_norm(x, b.ln1_gain.value, b.ln1_bias.value);
      auto [att_out, att_dec] =
          b.moa.decode_step(xn, state.caches[l], strategy.att);
      for (int64_t c = 0; c < cfg_.d_emb; ++c) x[c] += att_out[c];
      Tensor xn2 = layer_norm(x, b.ln2_gain.value, b.ln2_bias.value);
      MoEForwardResult ffd = b.ffn.forward(xn2, strategy.ffd, false);
      for (int64_t c = 0; c < cfg_.d_emb; ++c) x[c] += ffd.out[c];
    }
    Tensor h = layer_norm(x, final_gain_.value, final_bias_.value);
    Tensor logits({1, cfg_.vocab_size});
    gemm_nt(h.data(), out_proj_.value.data(), logits.data(), 1, cfg_.d_emb,
            cfg_.vocab_size);
    ++state.pos;
    return logits;
  }

 private:
  static void accumulate(Tensor& dst, const Tensor& src) {
    for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
  }

  struct Cache {
    std::vector<int32_t> tokens;
    int64_t batch = 0;
    int64_t seq = 0;
    std::vector<Tensor> block_in;   // input of each block
    std::vector<Tensor> block_mid;  // after the attention residual
    Tensor final_in;
    Tensor final_out;
    bool valid = false;
  };

  ModelConfig cfg_;
  Param embed_, pos_;
  std::vector<Block> blocks_;
  Param final_gain_, final_bias_, out_proj_;
  std::vector<Param*> params_;
  Cache cache_;
};

inline std::unique_ptr<DsMoeModel> build_model(const ModelConfig& cfg,
                                               uint64_t seed) {
  auto m = std::make_unique<DsMoeModel>(cfg);
  m->init_weights(seed);
  return m;
}

// ---- parameter accounting ------------------------------------------------------
// "Hidden" covers the attention and FFN modules including their routers and
// the shared KV projections; embeddings, the positional table, norms and the
// output projection sit outside it and are always active.

struct ParamSections {
  int64_t embed = 0;
  int64_t pos = 0;
  int64_t norms = 0;        // per-block norms + final norm
  int64_t out_proj = 0;
  int64_t att_routers = 0;  // all layers
  int64_t ffd_routers = 0;
  int64_t shared_kv = 0;    // all layers
  int64_t att_expert = 0;   // params of ONE attention expert
  int64_t ffd_expert = 0;   // params of ONE FFN expert
  int64_t att_experts_total = 0;
  int64_t ffd_experts_total = 0;

  int64_t total() const {
    return embed + pos + norms + out_proj + att_routers + ffd_routers +
           shared_kv + att_experts_total + ffd_experts_total;
  }
  int64_t hidden_total() const {
    return att_routers + ffd_routers + shared_kv + att_experts_total +
           ffd_experts_total;
  }
  int64_t always_active() const {
    return embed + pos + norms + out_proj + att_routers + ffd_routers +
           shared_kv;
  }
};

inline ParamSections param_sections(const ModelConfig& cfg) {
  ParamSections s;
  const int64_t L = cfg.n_layer;
  s.embed = cfg.vocab_size * cfg.d_emb;
  s.pos = cfg.max_seq_len * cfg.d_emb;
  s.norms = (4 * L + 2) * cfg.d_emb;
  s.out_proj = cfg.vocab_size * cfg.d_emb;
  if (cfg.gated()) {
    s.att_routers = L * cfg.n_att * cfg.d_emb;
    s.ffd_routers = L * cfg.n_ffd * cfg.d_emb;
  }
  s.shared_kv = L * 2 * cfg.n_kv * cfg.d_att * cfg.d_emb;
  s.att_expert = 2 * cfg.n_head * cfg.d_att * cfg.d_emb;
  s.ffd_expert = 2 * cfg.d_ffd * cfg.d_emb;
  s.att_experts_total = L * cfg.n_att * s.att_expert;
  s.ffd_experts_total = L * cfg.n_ffd * s.ffd_expert;
  return s;
}

inline int64_t count_params_total(const ModelConfig& cfg) {
  return param_sections(cfg).total();
}

struct ActiveParamReport {
  double mean_active = 0.0;         // parameters touched per token, averaged
  double active_hidden_frac = 0.0;  // of hidden-layer parameters only
};

inline ActiveParamReport count_params_active(
    const ModelConfig& cfg, const std::vector<GateRecord>& att_gates,
    const std::vector<GateRecord>& ffd_gates) {
  const ParamSections s = param_sections(cfg);
  if (att_gates.empty() || ffd_gates.empty())
    throw DataError("count_params_active: no gate records");
  const size_t t_total = att_gates.front().selected.size();
  double sum_active = 0.0;
  double sum_hidden = 0.0;
  const int64_t hidden_always = s.att_routers + s.ffd_routers + s.shared_kv;
  for (size_t t = 0; t < t_total; ++t) {
    int64_t att_sel = 0, ffd_sel = 0;
    for (const auto& g : att_gates)
      att_sel += static_cast<int64_t>(g.selected[t].selected.size());
    for (const auto& g : ffd_gates)
      ffd_sel += static_cast<int64_t>(g.selected[t].selected.size());
    const int64_t expert_active =
        att_sel * s.att_expert + ffd_sel * s.ffd_expert;
    sum_active += static_cast<double>(s.always_active() + expert_active);
    sum_hidden += static_cast<double>(hidden_always + expert_active);
  }
  ActiveParamReport r;
  r.mean_active = sum_active / static_cast<double>(t_total);
  r.active_hidden_frac = sum_hidden / static_cast<double>(t_total) /
                         static_cast<double>(s.hidden_total());
  return r;
}

}  // namespace dsmoe
