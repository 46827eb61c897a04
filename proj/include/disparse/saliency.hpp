#pragma once

// Per-task, per-parameter importance scores under three criteria:
//   static      |Σ_b ∂L^k/∂B_j|, normalized to sum 1  (connection sensitivity)
//   grow        |Σ_b ∂L^k/∂θ_j|                       (gradient magnitude)
//   pretrained  |Σ_b ∂L^k/∂θ_j| · θ_j²                (gradient × weight²)
//
// Each task's scores come from its own loss L^k alone; the *_combined
// variants score the summed multitask loss over the full maskable vector and
// serve as the non-disentangled controls.
//
// Gradients are read from the effective-weight nodes of a masked forward, so
// inactive (masked) connections are scored too; the static criterion then
// uses dL/dB_j = dL/d(θ_j·B_j) · θ_j.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "disparse/model.hpp"

namespace disparse {

enum class SaliencyCriterion { Static, DynamicGrow, Pretrained };

inline const char* criterion_name(SaliencyCriterion c) {
  switch (c) {
    case SaliencyCriterion::Static: return "static";
    case SaliencyCriterion::DynamicGrow: return "dynamic-grow";
    case SaliencyCriterion::Pretrained: return "pretrained";
  }
  return "?";
}

// Whether per-batch gradients are summed signed before taking absolute
// values (single-large-batch reading) or folded with per-batch |·|.
enum class Accumulation { Signed, Abs };

inline const char* accumulation_name(Accumulation a) {
  return a == Accumulation::Signed ? "signed" : "abs";
}
inline Accumulation accumulation_from(const std::string& s) {
  if (s == "signed") return Accumulation::Signed;
  if (s == "abs") return Accumulation::Abs;
  throw std::invalid_argument("unknown saliency accumulation: " + s);
}

struct SaliencyOptions {
  Accumulation accumulation = Accumulation::Signed;
};

struct SaliencyVector {
  std::string task_id;  // "<combined>" for the summed-loss control
  SaliencyCriterion criterion = SaliencyCriterion::Static;
  std::vector<double> scores;  // shared-then-private layout (or full vector)
  std::size_t batch_count = 0;
};

inline constexpr const char* kCombinedTaskId = "<combined>";

namespace detail {

// Flattened maskable weights over the span the saliency covers.
inline std::vector<double> span_weights(const MultitaskModel& model,
                                        const std::optional<std::string>& task_id) {
  if (task_id) return model.flatten_task_view(*task_id);
  std::vector<double> v = model.flatten_shared();
  for (const auto& id : model.task_ids()) {
    auto p = model.flatten_head(id);
    v.insert(v.end(), p.begin(), p.end());
  }
  return v;
}

inline void append_grads(const Graph& g, const std::vector<Graph::Var>& eff,
                         std::vector<double>& out) {
  for (auto v : eff) {
    auto gr = g.grad(v);
    out.insert(out.end(), gr.begin(), gr.end());
  }
}

inline SaliencyVector accumulate(MultitaskModel& model, const MaskSet& masks,
                                 SaliencyCriterion crit, const std::vector<TaskSpec>& tasks,
                                 const std::optional<std::string>& task_id,
                                 const std::vector<Batch>& batches,
                                 const SaliencyOptions& opts) {
  if (batches.empty())
    throw std::invalid_argument("saliency: empty batch list");
  std::vector<double> theta = span_weights(model, task_id);
  std::vector<double> accum(theta.size(), 0.0);

  for (const Batch& batch : batches) {
    Graph g;
    ForwardResult fwd = masked_forward(g, model, masks, batch.x);
    Graph::Var loss = task_id ? per_task_loss(g, fwd, tasks, *task_id, batch.targets)
                              : multitask_loss(g, fwd, tasks, batch.targets);
    g.backward(loss);

    std::vector<double> raw;
    raw.reserve(theta.size());
    append_grads(g, fwd.shared_eff, raw);
    if (task_id) {
      append_grads(g, fwd.head_eff.at(*task_id), raw);
    } else {
      for (const auto& id : model.task_ids()) append_grads(g, fwd.head_eff.at(id), raw);
    }
    if (raw.size() != accum.size())
      throw std::logic_error("saliency: gradient span size mismatch");
    if (opts.accumulation == Accumulation::Signed)
      for (std::size_t i = 0; i < raw.size(); ++i) accum[i] += raw[i];
    else
      for (std::size_t i = 0; i < raw.size(); ++i) accum[i] += std::abs(raw[i]);
  }

  SaliencyVector sv;
  sv.task_id = task_id ? *task_id : kCombinedTaskId;
  sv.criterion = crit;
  sv.batch_count = batches.size();
  sv.scores.resize(accum.size());
  for (std::size_t i = 0; i < accum.size(); ++i) {
    double base = std::abs(accum[i]);
    switch (crit) {
      case SaliencyCriterion::Static: sv.scores[i] = base * std::abs(theta[i]); break;
      case SaliencyCriterion::DynamicGrow: sv.scores[i] = base; break;
      case SaliencyCriterion::Pretrained: sv.scores[i] = base * theta[i] * theta[i]; break;
    }
  }

  double total = 0.0;
  for (double s : sv.scores) total += s;
  if (total == 0.0)
    throw std::runtime_error(std::string("saliency: all-zero gradient vector for ") +
                             sv.task_id + " under criterion " + criterion_name(crit) +
                             "; scores are undefined");
  if (crit == SaliencyCriterion::Static)
    for (double& s : sv.scores) s /= total;
  return sv;
}

}  // namespace detail

inline SaliencyVector static_saliency(MultitaskModel& model, const MaskSet& masks,
                                      const std::vector<TaskSpec>& tasks,
                                      const std::string& task_id,
                                      const std::vector<Batch>& batches,
                                      const SaliencyOptions& opts = {}) {
  return detail::accumulate(model, masks, SaliencyCriterion::Static, tasks, task_id, batches,
                            opts);
}

inline SaliencyVector grow_saliency(MultitaskModel& model, const MaskSet& masks,
                                    const std::vector<TaskSpec>& tasks,
                                    const std::string& task_id,
                                    const std::vector<Batch>& batches,
                                    const SaliencyOptions& opts = {}) {
  return detail::accumulate(model, masks, SaliencyCriterion::DynamicGrow, tasks, task_id,
                            batches, opts);
}

inline SaliencyVector pretrained_saliency(MultitaskModel& model, const MaskSet& masks,
                                          const std::vector<TaskSpec>& tasks,
                                          const std::string& task_id,
                                          const std::vector<Batch>& batches,
                                          const SaliencyOptions& opts = {}) {
  return detail::accumulate(model, masks, SaliencyCriterion::Pretrained, tasks, task_id,
                            batches, opts);
}

// Summed-loss controls over the full maskable vector (shared, then every
// head in task order).
inline SaliencyVector combined_saliency(MultitaskModel& model, const MaskSet& masks,
                                        SaliencyCriterion crit,
                                        const std::vector<TaskSpec>& tasks,
                                        const std::vector<Batch>& batches,
                                        const SaliencyOptions& opts = {}) {
  return detail::accumulate(model, masks, crit, tasks, std::nullopt, batches, opts);
}

}  // namespace disparse
