#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dsmoe/checkpoint.hpp"
#include "dsmoe/model.hpp"

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
  c.n_ffd = 3;
  c.d_ffd = 8;
  c.vocab_size = 11;
  c.max_seq_len = 16;
  c.alpha_att = 0.01;
  c.alpha_ffd = 0.01;
  return c;
}

std::vector<int32_t> ramp_tokens(int64_t n, int64_t vocab) {
  std::vector<int32_t> t(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    t[static_cast<size_t>(i)] = static_cast<int32_t>((i * 7 + 3) % vocab);
  return t;
}

std::string temp_dir(const char* tag) {
  auto p = std::filesystem::temp_directory_path() /
           (std::string("dsmoe_test_") + tag);
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace

TEST(ModelConfig, ValidationListsEveryViolation) {
  ModelConfig c = micro_config();
  c.d_emb = 0;
  c.train_mode = TrainMode::kDense;  // but n_att/n_ffd > 1
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("d_emb"), std::string::npos);
    EXPECT_NE(msg.find("dense mode"), std::string::npos);
  }
}

TEST(BuildModel, DeterministicPerSeed) {
  const ModelConfig cfg = micro_config();
  auto a = build_model(cfg, 42);
  auto b = build_model(cfg, 42);
  auto c = build_model(cfg, 43);
  bool any_diff_seed43 = false;
  for (size_t i = 0; i < a->params().size(); ++i) {
    const Param* pa = a->params()[i];
    const Param* pb = b->params()[i];
    const Param* pc = c->params()[i];
    for (int64_t k = 0; k < pa->numel(); ++k) {
      EXPECT_EQ(pa->value[k], pb->value[k]);
      if (pa->value[k] != pc->value[k]) any_diff_seed43 = true;
    }
  }
  EXPECT_TRUE(any_diff_seed43);
}

TEST(BuildModel, SingleExpertModeDegeneratesToConstantGate) {
  ModelConfig cfg = micro_config();
  cfg.train_mode = TrainMode::kDense;
  cfg.n_att = 1;
  cfg.n_ffd = 1;
  auto m = build_model(cfg, 1);
  const auto tokens = ramp_tokens(8, cfg.vocab_size);
  ModelForward f = m->forward(tokens, 1, 8, SelectionStrategy::Dense(), false);
  for (const auto& g : f.ffd_gates) {
    EXPECT_EQ(g.n_experts, 1);
    for (int64_t i = 0; i < g.scores.numel(); ++i)
      EXPECT_DOUBLE_EQ(g.scores[i], 1.0);
  }
  // no router parameters anywhere
  for (const Param* p : m->params())
    EXPECT_EQ(p->name.find(".router"), std::string::npos) << p->name;
}

TEST(BuildModel, WeightStatisticsMatchInit) {
  ModelConfig cfg = micro_config();
  cfg.vocab_size = 4001;  // embed alone gives > 1e5 samples at d_emb=32
  cfg.d_emb = 32;
  auto m = build_model(cfg, 7);
  const Tensor& w = m->embed().value;
  double mean = 0.0;
  for (int64_t i = 0; i < w.numel(); ++i) mean += w[i];
  mean /= static_cast<double>(w.numel());
  double var = 0.0;
  for (int64_t i = 0; i < w.numel(); ++i)
    var += (w[i] - mean) * (w[i] - mean);
  var /= static_cast<double>(w.numel());
  EXPECT_NEAR(mean, 0.0, 1e-3);
  EXPECT_NEAR(std::sqrt(var), 0.02, 1e-3);
}

TEST(Forward, DenseTopKThresholdAllAgree) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 11);
  const auto tokens = ramp_tokens(2 * 8, cfg.vocab_size);
  ModelForward dense =
      m->forward(tokens, 2, 8, SelectionStrategy::Dense(), false);
  ModelForward topk =
      m->forward(tokens, 2, 8, SelectionStrategy::TopK(cfg.n_ffd), false);
  ModelForward thr =
      m->forward(tokens, 2, 8, SelectionStrategy::Threshold(0.0), false);
  for (int64_t i = 0; i < dense.logits.numel(); ++i) {
    EXPECT_NEAR(topk.logits[i], dense.logits[i], 1e-12);
    EXPECT_NEAR(thr.logits[i], dense.logits[i], 1e-12);
  }
}

TEST(Forward, CausalityProbe) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 13);
  auto tokens = ramp_tokens(8, cfg.vocab_size);
  ModelForward base =
      m->forward(tokens, 1, 8, SelectionStrategy::Dense(), false);
  auto edited = tokens;
  edited.back() = (edited.back() + 1) % static_cast<int32_t>(cfg.vocab_size);
  ModelForward pert =
      m->forward(edited, 1, 8, SelectionStrategy::Dense(), false);
  for (int64_t p = 0; p + 1 < 8; ++p)
    for (int64_t v = 0; v < cfg.vocab_size; ++v)
      EXPECT_EQ(base.logits.at(p, v), pert.logits.at(p, v));
}

TEST(Forward, RejectsOverlongSequence) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 1);
  const auto tokens = ramp_tokens(cfg.max_seq_len + 1, cfg.vocab_size);
  EXPECT_THROW(m->forward(tokens, 1, cfg.max_seq_len + 1,
                          SelectionStrategy::Dense(), false),
               ShapeError);
}

TEST(CountParams, TinyFfnArithmetic) {
  // 4 experts, d_model 8, hidden 16, no biases -> 4*(8*16 + 16*8) = 1024
  ModelConfig cfg;
  cfg.d_emb = 8;
  cfg.n_ffd = 4;
  cfg.d_ffd = 16;
  const ParamSections s = param_sections(cfg);
  EXPECT_EQ(s.ffd_expert, 256);
  EXPECT_EQ(s.ffd_experts_total / cfg.n_layer, 1024);
}

TEST(CountParams, MatchesAllocatedTensorsOnRandomConfigs) {
  Rng rng(17);
  for (int it = 0; it < 5; ++it) {
    ModelConfig cfg;
    cfg.d_emb = 4 + 4 * rng.uniform_int(4);
    cfg.n_layer = 1 + static_cast<int>(rng.uniform_int(3));
    cfg.n_att = 1 + static_cast<int>(rng.uniform_int(3));
    cfg.n_head = 1 + static_cast<int>(rng.uniform_int(3));
    cfg.d_att = 2 + 2 * rng.uniform_int(3);
    cfg.n_kv = 1 + static_cast<int>(rng.uniform_int(2));
    cfg.n_ffd = 1 + static_cast<int>(rng.uniform_int(4));
    cfg.d_ffd = 4 + 4 * rng.uniform_int(4);
    cfg.vocab_size = 16 + rng.uniform_int(100);
    cfg.max_seq_len = 8 + rng.uniform_int(32);
    DsMoeModel m(cfg);
    EXPECT_EQ(count_params_total(cfg), m.param_count());
  }
}

TEST(CountParams, SingleExpertEqualsUnitMixtureMinusRouters) {
  ModelConfig moe = micro_config();
  moe.n_att = 1;
  moe.n_ffd = 1;
  ModelConfig dense = moe;
  dense.train_mode = TrainMode::kDense;
  const ParamSections sm = param_sections(moe);
  const int64_t router_rows = sm.att_routers + sm.ffd_routers;
  EXPECT_GT(router_rows, 0);
  EXPECT_EQ(count_params_total(dense), count_params_total(moe) - router_rows);
}

TEST(ActiveParams, DenseStrategyIsFullyActive) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 3);
  const auto tokens = ramp_tokens(8, cfg.vocab_size);
  ModelForward f = m->forward(tokens, 1, 8, SelectionStrategy::Dense(), false);
  const ActiveParamReport r =
      count_params_active(cfg, f.att_gates, f.ffd_gates);
  EXPECT_DOUBLE_EQ(r.active_hidden_frac, 1.0);
  EXPECT_DOUBLE_EQ(r.mean_active,
                   static_cast<double>(count_params_total(cfg)));
}

TEST(ActiveParams, TopKHalvesTheToyFfnBudget) {
  // micro config FFN part under top-2-of-3 should activate exactly 2/3 of
  // the expert parameters
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 5);
  const auto tokens = ramp_tokens(8, cfg.vocab_size);
  ModelForward f = m->forward(tokens, 1, 8, SelectionStrategy::TopK(2), false);
  const ParamSections s = param_sections(cfg);
  const ActiveParamReport r =
      count_params_active(cfg, f.att_gates, f.ffd_gates);
  const double expected_active =
      static_cast<double>(s.always_active() + s.att_experts_total +
                          cfg.n_layer * 2 * s.ffd_expert);
  EXPECT_DOUBLE_EQ(r.mean_active, expected_active);
}

TEST(ActiveParams, MatchesBruteForceRewalk) {
  Rng rng(29);
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 7);
  const auto tokens = ramp_tokens(16, cfg.vocab_size);
  for (auto st : {SelectionStrategy::TopK(1), SelectionStrategy::Threshold(0.8),
                  SelectionStrategy::ThresholdTopK(0.8)}) {
    ModelForward f = m->forward(tokens, 2, 8, st, false);
    const ActiveParamReport r =
        count_params_active(cfg, f.att_gates, f.ffd_gates);

    // independent pass over the raw selections
    const ParamSections s = param_sections(cfg);
    double total = 0.0;
    const size_t t_total = 16;
    for (size_t t = 0; t < t_total; ++t) {
      int64_t acc = s.always_active();
      for (const auto& g : f.att_gates)
        acc += static_cast<int64_t>(g.selected[t].selected.size()) *
               s.att_expert;
      for (const auto& g : f.ffd_gates)
        acc += static_cast<int64_t>(g.selected[t].selected.size()) *
               s.ffd_expert;
      total += static_cast<double>(acc);
    }
    EXPECT_DOUBLE_EQ(r.mean_active, total / static_cast<double>(t_total));
  }
}

TEST(Checkpoint, RoundTripReproducesLogitsBitExactly) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 21);
  const std::string dir = temp_dir("ckpt_roundtrip");
  save_checkpoint(*m, dir, 123);

  LoadedCheckpoint loaded = load_checkpoint(dir);
  EXPECT_EQ(loaded.step, 123);

  // quantize the original in place; logits must then agree bit for bit
  quantize_to_storage(*m);
  const auto tokens = ramp_tokens(8, cfg.vocab_size);
  ModelForward a = m->forward(tokens, 1, 8, SelectionStrategy::Dense(), false);
  ModelForward b = loaded.model->forward(tokens, 1, 8,
                                         SelectionStrategy::Dense(), false);
  for (int64_t i = 0; i < a.logits.numel(); ++i)
    EXPECT_EQ(a.logits[i], b.logits[i]);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ManifestCountsEveryTensor) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 23);
  const std::string dir = temp_dir("ckpt_manifest");
  save_checkpoint(*m, dir);
  std::ifstream in(std::filesystem::path(dir) / "manifest.json");
  nlohmann::json manifest;
  in >> manifest;
  EXPECT_EQ(manifest.at("tensors").size(), m->params().size());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, TruncatedBlobNamesTheTensor) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 25);
  const std::string dir = temp_dir("ckpt_truncated");
  save_checkpoint(*m, dir);
  // chop the blob
  const auto blob = std::filesystem::path(dir) / "weights.bin";
  const auto size = std::filesystem::file_size(blob);
  std::filesystem::resize_file(blob, size - 8);
  try {
    load_checkpoint(dir);
    FAIL() << "expected IntegrityError";
  } catch (const IntegrityError& e) {
    EXPECT_NE(std::string(e.what()).find("out_proj.weight"),
              std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, SecondSaveIsByteIdentical) {
  const ModelConfig cfg = micro_config();
  auto m = build_model(cfg, 27);
  const std::string d1 = temp_dir("ckpt_a");
  const std::string d2 = temp_dir("ckpt_b");
  save_checkpoint(*m, d1);
  LoadedCheckpoint loaded = load_checkpoint(d1);
  save_checkpoint(*loaded.model, d2);

  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  };
  EXPECT_EQ(slurp(std::filesystem::path(d1) / "weights.bin"),
            slurp(std::filesystem::path(d2) / "weights.bin"));
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}
