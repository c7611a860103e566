// dsmoe: train/evaluate/analyze dense-training sparse-inference
// mixture-of-experts language models on plain text.
//
// Every subcommand is a thin adapter over the library; all randomness is
// controlled by --seed. Exit codes: 0 success, 1 usage error, 2 runtime or
// data error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsmoe/analysis.hpp"
#include "dsmoe/checkpoint.hpp"
#include "dsmoe/gradcheck.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/train.hpp"

namespace {

using namespace dsmoe;

ModelConfig load_config(const std::string& spec) {
  if (spec == "tiny") return ModelConfig::preset_tiny();
  std::ifstream in(spec);
  if (!in) throw DataError("cannot open config file " + spec);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + spec + ": " + e.what());
  }
  ModelConfig cfg = config_from_json(j);
  cfg.validate();
  return cfg;
}

SelectionStrategy parse_strategy(const std::string& name, int k, double eps) {
  if (name == "dense") return SelectionStrategy::Dense();
  if (name == "topk") return SelectionStrategy::TopK(k);
  if (name == "threshold") return SelectionStrategy::Threshold(eps);
  if (name == "threshold-topk") return SelectionStrategy::ThresholdTopK(eps);
  throw ConfigError("unknown strategy '" + name + "'");
}

std::vector<double> parse_grid(const std::string& csv) {
  std::vector<double> out;
  std::string token;
  std::istringstream is(csv);
  while (std::getline(is, token, ',')) {
    if (token.empty()) continue;
    out.push_back(std::stod(token));
  }
  if (out.empty()) throw ConfigError("empty grid '" + csv + "'");
  return out;
}

struct StrategyFlags {
  std::string name = "dense";
  int k = 2;
  double eps = 1.0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--strategy", name, "dense|topk|threshold|threshold-topk")
        ->check(CLI::IsMember({"dense", "topk", "threshold", "threshold-topk"}));
    cmd->add_option("--k", k, "expert count for topk");
    cmd->add_option("--eps", eps, "normalized-probability threshold");
  }
  SelectionStrategy get() const { return parse_strategy(name, k, eps); }
};

int cmd_train(const std::string& config, const std::string& data,
              const std::string& out, const std::string& mode_override,
              TrainConfig tc) {
  ModelConfig cfg = load_config(config);
  if (!mode_override.empty())
    cfg.train_mode = train_mode_from_string(mode_override);
  cfg.validate();
  tc.validate();
  TokenStream stream = TokenStream::from_file(data);
  auto model = build_model(cfg, tc.seed);

  std::filesystem::create_directories(out);
  std::ofstream cfg_out(std::filesystem::path(out) / "config.json",
                        std::ios::trunc);
  cfg_out << config_to_json(cfg).dump(2) << '\n';

  TrainResult r = train(*model, stream, tc, out);
  nlohmann::json summary{{"steps", tc.steps()},
                         {"initial_val_lm", r.initial_val_loss},
                         {"final_val_lm", r.final_val_loss},
                         {"last_checkpoint", r.last_checkpoint}};
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data,
             const StrategyFlags& sf, int64_t seq_len) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  TokenStream stream = TokenStream::from_file(data);
  std::vector<int32_t> val(stream.ids().begin() + stream.split(),
                           stream.ids().end());
  EvalResult r = eval_perplexity(*loaded.model, val, sf.get(), seq_len);
  nlohmann::json report{{"ppl", r.ppl},
                        {"mean_nll", r.mean_nll},
                        {"tokens", r.tokens_scored},
                        {"active_params", r.mean_active_params},
                        {"active_hidden_frac", r.active_hidden_frac},
                        {"total_params", count_params_total(loaded.model->config())}};
  std::cout << report.dump(2) << '\n';
  return 0;
}

int cmd_sweep(const std::string& ckpt, const std::string& data,
              const std::string& family, const std::string& grid,
              int64_t seq_len, const std::string& out_csv) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  TokenStream stream = TokenStream::from_file(data);
  std::vector<int32_t> val(stream.ids().begin() + stream.split(),
                           stream.ids().end());
  const SweepFamily fam =
      family == "topk" ? SweepFamily::kTopK : SweepFamily::kThreshold;
  auto points =
      sparsity_sweep(*loaded.model, val, fam, parse_grid(grid), seq_len);
  const std::string csv = sweep_csv(points);
  if (out_csv.empty()) {
    std::cout << csv;
  } else {
    std::ofstream f(out_csv, std::ios::trunc);
    if (!f) throw DataError("cannot write " + out_csv);
    f << csv;
    std::cout << "wrote " << out_csv << '\n';
  }
  for (const auto& p : points)
    if (p.is_knee)
      std::cout << "# knee: " << p.descriptor << " (ppl " << p.ppl << ")\n";
  return 0;
}

int cmd_stats(const std::string& ckpt, const std::string& data, double eps,
              int64_t seq_len) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  TokenStream stream = TokenStream::from_file(data);
  std::vector<int32_t> val(stream.ids().begin() + stream.split(),
                           stream.ids().end());
  EvalResult r = eval_perplexity(*loaded.model, val,
                                 SelectionStrategy::Threshold(eps), seq_len);
  UtilizationStat u = layer_utilization(r.att_gates, r.ffd_gates);
  std::cout << "layer,kind,mean,min,max\n";
  for (size_t l = 0; l < u.att.size(); ++l)
    std::cout << l << ",attention," << u.att[l].mean << ',' << u.att[l].min
              << ',' << u.att[l].max << '\n';
  for (size_t l = 0; l < u.ffd.size(); ++l)
    std::cout << l << ",ffn," << u.ffd[l].mean << ',' << u.ffd[l].min << ','
              << u.ffd[l].max << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& config, uint64_t seed) {
  ModelConfig cfg = load_config(config);
  auto model = build_model(cfg, seed);
  GradCheckOptions opt;
  opt.seed = seed;
  GradCheckReport report = gradcheck_model(*model, opt);
  for (const auto& g : report.groups)
    std::printf("[%s] %-12s sampled %4lld checked %4lld max rel err %.3e\n",
                g.failed == 0 ? "PASS" : "FAIL", g.group.c_str(),
                static_cast<long long>(g.sampled),
                static_cast<long long>(g.checked), g.max_rel_err);
  std::printf("%s in %.1fs\n", report.passed ? "all groups pass" : "FAILURES",
              report.seconds);
  return report.passed ? 0 : 2;
}

int cmd_params(const std::string& config, int k) {
  ModelConfig cfg = load_config(config);
  const ParamSections s = param_sections(cfg);
  nlohmann::json j{{"total", s.total()},
                   {"hidden_total", s.hidden_total()},
                   {"always_active", s.always_active()},
                   {"embed", s.embed},
                   {"pos", s.pos},
                   {"norms", s.norms},
                   {"out_proj", s.out_proj},
                   {"att_routers", s.att_routers},
                   {"ffd_routers", s.ffd_routers},
                   {"shared_kv", s.shared_kv},
                   {"att_expert_each", s.att_expert},
                   {"ffd_expert_each", s.ffd_expert}};
  if (k > 0) {
    // analytic fixed-K estimate: attention stays dense under topk
    const int64_t active =
        s.always_active() + s.att_experts_total +
        static_cast<int64_t>(cfg.n_layer) * std::min(k, cfg.n_ffd) *
            s.ffd_expert;
    j["active_params_topk"] = active;
    j["active_hidden_frac_topk"] =
        static_cast<double>(active - s.always_active() + s.att_routers +
                            s.ffd_routers + s.shared_kv) /
        static_cast<double>(s.hidden_total());
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_bench(const std::string& ckpt, const std::string& config,
              int64_t batch, int64_t seq_len, int64_t decode,
              const StrategyFlags& sf, int reps, uint64_t seed) {
  std::unique_ptr<DsMoeModel> model;
  if (!ckpt.empty()) {
    model = std::move(load_checkpoint(ckpt).model);
  } else {
    model = build_model(load_config(config), seed);
  }
  BenchResult r =
      throughput_bench(*model, batch, seq_len, decode, sf.get(), reps, seed);
  nlohmann::json j{
      {"prefill_tokens_per_s", {{"mean", r.prefill_tokens_per_s_mean},
                                {"std", r.prefill_tokens_per_s_std}}},
      {"decode_tokens_per_s", {{"mean", r.decode_tokens_per_s_mean},
                               {"std", r.decode_tokens_per_s_std}}},
      {"prefill_wall_s", r.prefill_wall_s_mean},
      {"decode_wall_s", r.decode_wall_s_mean},
      {"active_flops_per_token", r.active_flops_per_token},
      {"reps", r.reps}};
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_generate(const std::string& ckpt, const std::string& prompt,
                 int64_t n, const StrategyFlags& sf, double temperature,
                 uint64_t seed) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  const auto prompt_ids = ByteTokenizer::encode(prompt);
  Sampler sampler{temperature, seed};
  const auto out = generate(*loaded.model, prompt_ids, n, sf.get(), sampler);
  std::cout << prompt << ByteTokenizer::decode(out) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dense-training / sparse-inference mixture-of-experts LM"};
  app.require_subcommand(1);

  int threads = 1;
  app.add_option("--threads", threads,
                 "worker threads for expert evaluation (default 1)");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model on a text file");
  std::string config = "tiny", data, out = "out", mode;
  TrainConfig tc;
  int64_t steps = 1000;
  train_cmd->add_option("--config", config, "config JSON path or 'tiny'");
  train_cmd->add_option("--data", data, "UTF-8 text file")->required();
  train_cmd->add_option("--out", out, "output directory");
  train_cmd->add_option("--mode", mode, "dsmoe|smoe|dense (overrides config)")
      ->check(CLI::IsMember({"dsmoe", "smoe", "dense", ""}));
  train_cmd->add_option("--steps", steps, "optimizer steps");
  train_cmd->add_option("--batch-tokens", tc.batch_tokens, "tokens per step");
  train_cmd->add_option("--seq-len", tc.seq_len, "sequence length");
  train_cmd->add_option("--lr", tc.lr_peak, "peak learning rate");
  train_cmd->add_option("--warmup-tokens", tc.warmup_tokens,
                        "warmup tokens (default 2% of total)");
  train_cmd->add_option("--weight-decay", tc.weight_decay, "AdamW decay");
  train_cmd->add_option("--clip", tc.clip_norm, "gradient clip norm");
  train_cmd->add_option("--eval-interval", tc.eval_interval,
                        "steps between validation/checkpoint");
  train_cmd->add_option("--eval-tokens", tc.eval_tokens,
                        "validation token budget");
  train_cmd->add_option("--seed", tc.seed, "RNG seed");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "perplexity + active params");
  std::string ckpt;
  int64_t seq_len = 32;
  StrategyFlags eval_sf;
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval_cmd->add_option("--data", data, "UTF-8 text file (scores its validation split)")->required();
  eval_cmd->add_option("--seq-len", seq_len, "evaluation window");
  eval_sf.attach(eval_cmd);

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "sparsity sweep to CSV");
  std::string family = "topk", grid, sweep_out;
  StrategyFlags sweep_sf;
  sweep_cmd->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  sweep_cmd->add_option("--data", data, "UTF-8 text file (scores its validation split)")->required();
  sweep_cmd->add_option("--family", family, "topk|threshold")
      ->check(CLI::IsMember({"topk", "threshold"}));
  sweep_cmd->add_option("--grid", grid, "comma-separated K or eps values")
      ->required();
  sweep_cmd->add_option("--seq-len", seq_len, "evaluation window");
  sweep_cmd->add_option("--out", sweep_out, "CSV path (default stdout)");

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "per-layer expert utilization");
  double stats_eps = 1.0;
  stats_cmd->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  stats_cmd->add_option("--data", data, "UTF-8 text file (scores its validation split)")->required();
  stats_cmd->add_option("--eps", stats_eps, "threshold for the pass");
  stats_cmd->add_option("--seq-len", seq_len, "evaluation window");

  // gradcheck
  auto* grad_cmd =
      app.add_subcommand("gradcheck", "finite-difference gradient audit");
  uint64_t seed = 1;
  grad_cmd->add_option("--config", config, "config JSON path or 'tiny'");
  grad_cmd->add_option("--seed", seed, "RNG seed");

  // params
  auto* params_cmd = app.add_subcommand("params", "parameter accounting");
  int params_k = 0;
  params_cmd->add_option("--config", config, "config JSON path or 'tiny'");
  params_cmd->add_option("--k", params_k,
                         "also report analytic active params at this top-K");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "throughput benchmark");
  int64_t bench_batch = 4, bench_decode = 64;
  int bench_reps = 5;
  std::string bench_config = "tiny";
  StrategyFlags bench_sf;
  bench_cmd->add_option("--ckpt", ckpt, "checkpoint directory");
  bench_cmd->add_option("--config", bench_config,
                        "config (used when no --ckpt)");
  bench_cmd->add_option("--batch", bench_batch, "prefill batch size");
  bench_cmd->add_option("--seq-len", seq_len, "prefill sequence length");
  bench_cmd->add_option("--decode", bench_decode, "decode steps");
  bench_cmd->add_option("--reps", bench_reps, "repetitions (min 5)");
  bench_cmd->add_option("--seed", seed, "RNG seed");
  bench_sf.attach(bench_cmd);

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "decode from a prompt");
  std::string prompt = " ";
  int64_t gen_n = 64;
  double temperature = 0.0;
  StrategyFlags gen_sf;
  gen_cmd->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  gen_cmd->add_option("--prompt", prompt, "prompt text");
  gen_cmd->add_option("--n", gen_n, "tokens to generate");
  gen_cmd->add_option("--temperature", temperature, "0 = greedy");
  gen_cmd->add_option("--seed", seed, "sampling seed");
  gen_sf.attach(gen_cmd);

  // lets the app-level --threads appear after the subcommand name too
  for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; }))
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints usage/help
    return code == 0 ? 0 : 1;     // any usage error -> 1
  }

  thread_count() = std::max(threads, 1);

  try {
    if (*train_cmd) {
      tc.total_tokens = steps * tc.batch_tokens;
      return cmd_train(config, data, out, mode, tc);
    }
    if (*eval_cmd) return cmd_eval(ckpt, data, eval_sf, seq_len);
    if (*sweep_cmd)
      return cmd_sweep(ckpt, data, family, grid, seq_len, sweep_out);
    if (*stats_cmd) return cmd_stats(ckpt, data, stats_eps, seq_len);
    if (*grad_cmd) return cmd_gradcheck(config, seed);
    if (*params_cmd) return cmd_params(config, params_k);
    if (*bench_cmd)
      return cmd_bench(ckpt, ckpt.empty() ? bench_config : "", bench_batch,
                       seq_len, bench_decode, bench_sf, bench_reps, seed);
    if (*gen_cmd)
      return cmd_generate(ckpt, prompt, gen_n, gen_sf, temperature, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
