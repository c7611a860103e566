#pragma once

// Whole-model gradient verification: samples coordinates from every
// parameter group, compares the analytic gradient of the total training
// objective against central finite differences, and reports per group.
//
// The objective is composed by the same code path as the training step
// (cross entropy plus the mode's alpha-weighted router losses), so a pass
// certifies the gradients the optimizer actually consumes.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "dsmoe/train.hpp"

namespace dsmoe {

struct GradCheckOptions {
  double sample_fraction = 0.05;
  double h = 1e-5;
  double tol = 1e-4;
  uint64_t seed = 0;
  int64_t batch = 2;
  int64_t seq = 8;
};

struct GradCheckGroup {
  std::string group;
  int64_t sampled = 0;   // coordinates probed
  int64_t checked = 0;   // coordinates above the gradient floor
  int64_t failed = 0;    // relative error above tolerance
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  bool passed = false;
  double seconds = 0.0;
};

// Role-based grouping: "layers.3.moa.experts.1.w_q" -> "moa.w_q".
inline std::string param_group(const std::string& name) {
  std::string s = name;
  if (s.rfind("layers.", 0) == 0) s = s.substr(s.find('.', 7) + 1);
  if (auto pos = s.find(".experts."); pos != std::string::npos) {
    const auto tail = s.find('.', pos + 9);
    s = s.substr(0, pos) + s.substr(tail);
  }
  if (s.rfind("ln1.", 0) == 0 || s.rfind("ln2.", 0) == 0 ||
      s.rfind("final_norm.", 0) == 0)
    return "norms";
  if (s == "embed.weight") return "embed";
  if (s == "pos.weight") return "pos";
  if (s == "out_proj.weight") return "out_proj";
  return s;  // moa.router, moa.w_q, moa.w_k, ..., ffn.w_in, ffn.w_out
}

inline GradCheckReport gradcheck_model(DsMoeModel& model,
                                       const GradCheckOptions& opt = {}) {
  const ModelConfig& mc = model.config();
  const auto t0 = std::chrono::steady_clock::now();

  // Deterministic probe batch.
  Rng rng(mix64(opt.seed, 0xBADC0FFEull));
  const int64_t t_total = opt.batch * opt.seq;
  std::vector<int32_t> inputs(static_cast<size_t>(t_total));
  std::vector<int32_t> targets(static_cast<size_t>(t_total));
  for (auto& v : inputs)
    v = static_cast<int32_t>(rng.uniform_int(mc.vocab_size));
  for (auto& v : targets)
    v = static_cast<int32_t>(rng.uniform_int(mc.vocab_size));

  const StrategyPair strat = model.train_strategies();
  const bool use_aux = mc.train_mode != TrainMode::kDense;

  auto objective = [&]() {
    ModelForward fwd = model.forward(inputs, opt.batch, opt.seq, strat, false);
    const double lm = cross_entropy(fwd.logits, targets);
    AuxLosses aux = compose_aux(mc, fwd);
    return total_loss(lm, aux.aux_att, aux.aux_ffd, mc.alpha_att,
                      mc.alpha_ffd)
        .total;
  };

  // Analytic gradients of the same objective.
  model.zero_grads();
  {
    ModelForward fwd = model.forward(inputs, opt.batch, opt.seq, strat, true);
    AuxLosses aux = compose_aux(mc, fwd);
    Tensor grad_logits = cross_entropy_backward(fwd.logits, targets);
    model.backward(grad_logits, use_aux ? &aux.att_score_grads : nullptr,
                   use_aux ? &aux.ffd_score_grads : nullptr);
  }

  // Sample coordinates per group and probe.
  std::vector<GradCheckGroup> groups;
  auto group_of = [&](const std::string& g) -> GradCheckGroup& {
    for (auto& existing : groups)
      if (existing.group == g) return existing;
    groups.push_back(GradCheckGroup{g});
    return groups.back();
  };

  for (Param* p : model.params()) {
    GradCheckGroup& g = group_of(param_group(p->name));
    const int64_t n = p->numel();
    const int64_t want = std::max<int64_t>(
        1, static_cast<int64_t>(opt.sample_fraction * static_cast<double>(n)));
    std::set<int64_t> coords;
    while (static_cast<int64_t>(coords.size()) < std::min(want, n))
      coords.insert(rng.uniform_int(n));

    for (int64_t i : coords) {
      ++g.sampled;
      const double analytic = p->grad[i];
      const double orig = p->value[i];
      p->value[i] = orig + opt.h;
      const double fp = objective();
      p->value[i] = orig - opt.h;
      const double fm = objective();
      p->value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.h);
      if (std::max(std::abs(analytic), std::abs(numeric)) <= 1e-8) continue;
      ++g.checked;
      const double rel = grad_rel_err(analytic, numeric);
      g.max_rel_err = std::max(g.max_rel_err, rel);
      if (rel >= opt.tol) ++g.failed;
    }
  }

  GradCheckReport report;
  report.groups = std::move(groups);
  report.passed = true;
  for (const auto& g : report.groups)
    if (g.failed > 0) report.passed = false;
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

}  // namespace dsmoe
