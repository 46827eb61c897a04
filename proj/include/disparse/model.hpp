#pragma once

// Shared-trunk multi-head perceptron with explicit parameter partitioning
// into a shared span and one private span per task, binary masks aligned
// with those spans, masked forward evaluation, and the weighted multitask
// loss.

#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "disparse/rng.hpp"
#include "disparse/tensor.hpp"

namespace disparse {

enum class LossKind { CrossEntropy, Cosine, L1, Mse };

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::CrossEntropy: return "cross-entropy";
    case LossKind::Cosine: return "cosine";
    case LossKind::L1: return "l1";
    case LossKind::Mse: return "mse";
  }
  return "?";
}

inline LossKind loss_kind_from(const std::string& s) {
  if (s == "cross-entropy") return LossKind::CrossEntropy;
  if (s == "cosine") return LossKind::Cosine;
  if (s == "l1") return LossKind::L1;
  if (s == "mse") return LossKind::Mse;
  throw std::invalid_argument("unknown loss kind: " + s);
}

struct TaskSpec {
  std::string task_id;
  LossKind loss = LossKind::Mse;
  double lambda = 1.0;
};

// One maskable tensor's bit range within a span, plus its fan geometry.
struct LayerRange {
  std::string layer_id;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  std::size_t size() const { return end - begin; }
};

struct SpanLayout {
  std::vector<LayerRange> layers;
  std::size_t size = 0;
};

// Binary keep/prune vector over one parameter span. bits[j] == 1 keeps the
// j-th parameter of the covered span.
struct Mask {
  std::string partition_ref;
  std::vector<std::uint8_t> bits;
  SpanLayout layout;

  static Mask ones(std::string ref, SpanLayout lay) {
    Mask m;
    m.partition_ref = std::move(ref);
    m.bits.assign(lay.size, 1);
    m.layout = std::move(lay);
    return m;
  }
  static Mask zeros(std::string ref, SpanLayout lay) {
    Mask m = ones(std::move(ref), std::move(lay));
    std::fill(m.bits.begin(), m.bits.end(), std::uint8_t{0});
    return m;
  }
  // Free-standing mask over a single unnamed layer range.
  static Mask from_bits(std::string ref, std::vector<std::uint8_t> b) {
    Mask m;
    m.partition_ref = std::move(ref);
    m.bits = std::move(b);
    m.layout.layers.push_back({"span", 0, m.bits.size(), m.bits.size(), 1});
    m.layout.size = m.bits.size();
    return m;
  }

  std::size_t size() const { return bits.size(); }
  std::size_t kept() const {
    return static_cast<std::size_t>(
        std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  double density() const {
    return bits.empty() ? 1.0 : static_cast<double>(kept()) / static_cast<double>(bits.size());
  }
  double sparsity() const { return 1.0 - density(); }

  void validate() const {
    if (layout.size != bits.size())
      throw std::invalid_argument("Mask: layout covers " + std::to_string(layout.size) +
                                  " bits but mask has " + std::to_string(bits.size()));
    std::size_t cursor = 0;
    for (const auto& lr : layout.layers) {
      if (lr.begin != cursor || lr.end < lr.begin)
        throw std::invalid_argument("Mask: layer offsets do not partition the span");
      cursor = lr.end;
    }
    if (cursor != bits.size())
      throw std::invalid_argument("Mask: layer offsets do not cover the span");
    for (auto b : bits)
      if (b > 1) throw std::invalid_argument("Mask: bits must be 0 or 1");
  }
};

// Final model masks: one shared mask plus one private mask per task head.
struct MaskSet {
  Mask shared;
  std::map<std::string, Mask> heads;

  std::size_t total_bits() const {
    std::size_t n = shared.size();
    for (const auto& [id, m] : heads) n += m.size();
    return n;
  }
  std::size_t kept() const {
    std::size_t n = shared.kept();
    for (const auto& [id, m] : heads) n += m.kept();
    return n;
  }
  double achieved_sparsity() const {
    std::size_t t = total_bits();
    return t == 0 ? 0.0 : 1.0 - static_cast<double>(kept()) / static_cast<double>(t);
  }
};

enum class Activation { Relu, Tanh };

inline const char* activation_name(Activation a) {
  return a == Activation::Relu ? "relu" : "tanh";
}
inline Activation activation_from(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw std::invalid_argument("unknown activation: " + s);
}

struct ModelSpec {
  std::size_t input_dim = 16;
  std::vector<std::size_t> trunk_widths{64, 64, 64, 64};
  std::size_t head_hidden = 32;
  std::map<std::string, std::size_t> head_outputs;  // task id -> output dim
  Activation activation = Activation::Relu;
  bool mask_biases = false;
};

struct LinearLayer {
  std::string id;
  Tensor W;  // [in, out]
  Tensor b;  // [out]
};

struct Batch {
  Tensor x;                               // [n, input_dim]
  std::map<std::string, Tensor> targets;  // task id -> labels [n] or values [n, out]
};

class MultitaskModel {
 public:
  ModelSpec spec;
  std::vector<LinearLayer> trunk;
  std::map<std::string, std::vector<LinearLayer>> heads;

  static MultitaskModel init(const ModelSpec& spec, Rng& rng) {
    if (spec.input_dim == 0 || spec.trunk_widths.empty() || spec.head_outputs.empty())
      throw std::invalid_argument("ModelSpec: need input_dim, trunk widths and at least one head");
    MultitaskModel m;
    m.spec = spec;
    std::size_t in = spec.input_dim;
    for (std::size_t i = 0; i < spec.trunk_widths.size(); ++i) {
      std::size_t out = spec.trunk_widths[i];
      m.trunk.push_back(init_layer("trunk." + std::to_string(i), in, out, spec.activation, rng));
      in = out;
    }
    std::size_t trunk_out = in;
    for (const auto& [task, out_dim] : spec.head_outputs) {
      std::vector<LinearLayer> head;
      head.push_back(init_layer("head." + task + ".0", trunk_out, spec.head_hidden,
                                spec.activation, rng));
      head.push_back(init_layer("head." + task + ".1", spec.head_hidden, out_dim,
                                spec.activation, rng));
      m.heads.emplace(task, std::move(head));
    }
    return m;
  }

  std::vector<std::string> task_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, h] : heads) ids.push_back(id);
    return ids;
  }

  SpanLayout shared_layout() const { return layout_of(trunk); }

  SpanLayout head_layout(const std::string& task) const {
    return layout_of(head_at(task));
  }

  std::size_t shared_param_count() const { return shared_layout().size; }
  std::size_t head_param_count(const std::string& task) const { return head_layout(task).size; }
  std::size_t maskable_param_count() const {
    std::size_t n = shared_param_count();
    for (const auto& [id, h] : heads) n += layout_of(h).size;
    return n;
  }

  MaskSet ones_masks() const {
    MaskSet ms;
    ms.shared = Mask::ones("shared", shared_layout());
    for (const auto& [id, h] : heads)
      ms.heads.emplace(id, Mask::ones("task:" + id, layout_of(h)));
    return ms;
  }

  // Flattened maskable parameter values of a span, in layout order.
  std::vector<double> flatten_shared() const { return flatten(trunk); }
  std::vector<double> flatten_head(const std::string& task) const {
    return flatten(head_at(task));
  }

  // Shared-then-private parameter vector for one task (the per-task view the
  // saliency criteria rank).
  std::vector<double> flatten_task_view(const std::string& task) const {
    std::vector<double> v = flatten_shared();
    std::vector<double> p = flatten_head(task);
    v.insert(v.end(), p.begin(), p.end());
    return v;
  }

  void unflatten_shared(std::span<const double> values) { unflatten(trunk, values); }
  void unflatten_head(const std::string& task, std::span<const double> values) {
    unflatten(head_mut(task), values);
  }

  // Zero every parameter whose mask bit is off. Keeps masked weights at
  // exactly 0 through training when called after each optimizer step.
  void apply_masks(const MaskSet& ms) {
    apply_span(trunk, ms.shared);
    for (auto& [id, h] : heads) apply_span(h, ms.heads.at(id));
  }

  const std::vector<LinearLayer>& head_at(const std::string& task) const {
    auto it = heads.find(task);
    if (it == heads.end()) throw std::invalid_argument("unknown task: " + task);
    return it->second;
  }
  std::vector<LinearLayer>& head_mut(const std::string& task) {
    auto it = heads.find(task);
    if (it == heads.end()) throw std::invalid_argument("unknown task: " + task);
    return it->second;
  }

  // All trainable tensors (masked or not), deterministic order.
  template <class F>
  void for_each_parameter(F&& f) {
    for (auto& layer : trunk) {
      f(layer.id + ".W", layer.W);
      f(layer.id + ".b", layer.b);
    }
    for (auto& [id, h] : heads)
      for (auto& layer : h) {
        f(layer.id + ".W", layer.W);
        f(layer.id + ".b", layer.b);
      }
  }

  // Maskable tensors of a span in layout order: F(Tensor&, const LayerRange&).
  template <class F>
  void for_each_shared_tensor(F&& f) {
    for_each_span_tensor(trunk, shared_layout(), f);
  }
  template <class F>
  void for_each_head_tensor(const std::string& task, F&& f) {
    for_each_span_tensor(head_mut(task), head_layout(task), f);
  }

 private:
  static LinearLayer init_layer(std::string id, std::size_t in, std::size_t out,
                                Activation act, Rng& rng) {
    LinearLayer l;
    l.id = std::move(id);
    l.W = Tensor::zeros({in, out});
    double gain = act == Activation::Relu ? std::sqrt(2.0 / static_cast<double>(in))
                                          : std::sqrt(1.0 / static_cast<double>(in));
    for (double& v : l.W.data) v = rng.normal(0.0, gain);
    l.b = Tensor::zeros({out});
    return l;
  }

  SpanLayout layout_of(const std::vector<LinearLayer>& layers) const {
    SpanLayout lay;
    std::size_t cursor = 0;
    for (const auto& l : layers) {
      std::size_t in = l.W.shape[0], out = l.W.shape[1];
      lay.layers.push_back({l.id + ".W", cursor, cursor + in * out, in, out});
      cursor += in * out;
      if (spec.mask_biases) {
        lay.layers.push_back({l.id + ".b", cursor, cursor + out, 1, out});
        cursor += out;
      }
    }
    lay.size = cursor;
    return lay;
  }

  template <class F>
  void for_each_span_tensor(std::vector<LinearLayer>& layers, const SpanLayout& lay, F&& f) {
    std::size_t idx = 0;
    for (auto& l : layers) {
      f(l.W, lay.layers[idx++]);
      if (spec.mask_biases) f(l.b, lay.layers[idx++]);
    }
  }

  std::vector<double> flatten(const std::vector<LinearLayer>& layers) const {
    std::vector<double> v;
    for (const auto& l : layers) {
      v.insert(v.end(), l.W.data.begin(), l.W.data.end());
      if (spec.mask_biases) v.insert(v.end(), l.b.data.begin(), l.b.data.end());
    }
    return v;
  }

  void unflatten(std::vector<LinearLayer>& layers, std::span<const double> values) {
    std::size_t cursor = 0;
    for (auto& l : layers) {
      if (cursor + l.W.numel() > values.size())
        throw std::invalid_argument("unflatten: value vector too short");
      std::copy_n(values.begin() + cursor, l.W.numel(), l.W.data.begin());
      cursor += l.W.numel();
      if (spec.mask_biases) {
        std::copy_n(values.begin() + cursor, l.b.numel(), l.b.data.begin());
        cursor += l.b.numel();
      }
    }
    if (cursor != values.size())
      throw std::invalid_argument("unflatten: value vector length mismatch");
  }

  void apply_span(std::vector<LinearLayer>& layers, const Mask& m) {
    std::size_t cursor = 0;
    auto apply = [&](Tensor& t) {
      if (cursor + t.numel() > m.bits.size())
        throw std::invalid_argument("apply_masks: mask/partition length mismatch on " +
                                    m.partition_ref);
      for (std::size_t i = 0; i < t.numel(); ++i)
        if (!m.bits[cursor + i]) t.data[i] = 0.0;
      cursor += t.numel();
    };
    for (auto& l : layers) {
      apply(l.W);
      if (spec.mask_biases) apply(l.b);
    }
    if (cursor != m.bits.size())
      throw std::invalid_argument("apply_masks: mask/partition length mismatch on " +
                                  m.partition_ref);
  }
};

// Handles produced by one masked forward pass: task predictions plus the
// effective (post-mask) weight nodes per maskable tensor, in span layout
// order. The gradient at an effective-weight node is the dense gradient the
// growth criterion scores; multiplied by the raw weight it is the
// mask-sensitivity gradient the static criterion scores.
struct ForwardResult {
  std::map<std::string, Graph::Var> predictions;
  std::vector<Graph::Var> shared_eff;
  std::map<std::string, std::vector<Graph::Var>> head_eff;
};

inline ForwardResult masked_forward(Graph& g, MultitaskModel& model, const MaskSet& masks,
                                    const Tensor& batch_x) {
  if (batch_x.shape.size() != 2 || batch_x.shape[1] != model.spec.input_dim)
    throw std::invalid_argument("masked_forward: batch shape " + shape_str(batch_x.shape) +
                                " does not match input_dim " +
                                std::to_string(model.spec.input_dim));
  masks.shared.validate();
  if (masks.shared.size() != model.shared_param_count())
    throw std::invalid_argument("masked_forward: shared mask/partition length mismatch");

  ForwardResult res;
  auto act = [&](Graph::Var v) {
    return model.spec.activation == Activation::Relu ? g.relu(v) : g.tanh(v);
  };

  auto mask_slice = [&](const Mask& m, const LayerRange& lr, const Shape& shape) {
    Tensor t = Tensor::zeros(shape);
    for (std::size_t i = 0; i < lr.size(); ++i)
      t.data[i] = static_cast<double>(m.bits[lr.begin + i]);
    return g.constant(std::move(t));
  };

  // One span layer: effective weights = W ⊙ mask. Gradients w.r.t. masked-out
  // weights still flow to the effective node.
  auto run_span = [&](std::vector<LinearLayer>& layers, const SpanLayout& lay, const Mask& m,
                      Graph::Var h, std::vector<Graph::Var>& eff_out,
                      bool activate_last) -> Graph::Var {
    std::size_t idx = 0;
    for (std::size_t li = 0; li < layers.size(); ++li) {
      auto& layer = layers[li];
      auto weff = g.mul(g.leaf(layer.W), mask_slice(m, lay.layers[idx], layer.W.shape));
      eff_out.push_back(weff);
      ++idx;
      Graph::Var bias;
      if (model.spec.mask_biases) {
        bias = g.mul(g.leaf(layer.b), mask_slice(m, lay.layers[idx], layer.b.shape));
        eff_out.push_back(bias);
        ++idx;
      } else {
        bias = g.leaf(layer.b);
      }
      h = g.add_bias(g.matmul(h, weff), bias);
      if (activate_last || li + 1 < layers.size()) h = act(h);
    }
    return h;
  };

  auto x = g.constant(batch_x);
  SpanLayout shared_lay = model.shared_layout();
  Graph::Var trunk_out = run_span(model.trunk, shared_lay, masks.shared, x,
                                  res.shared_eff, /*activate_last=*/true);

  for (auto& [task, head] : model.heads) {
    auto it = masks.heads.find(task);
    if (it == masks.heads.end())
      throw std::invalid_argument("masked_forward: no mask for task " + task);
    it->second.validate();
    SpanLayout head_lay = model.head_layout(task);
    if (it->second.size() != head_lay.size)
      throw std::invalid_argument("masked_forward: head mask/partition length mismatch for " +
                                  task);
    std::vector<Graph::Var> eff;
    // Head hidden layer is activated, output layer is linear.
    Graph::Var pred = run_span(head, head_lay, it->second, trunk_out, eff,
                               /*activate_last=*/false);
    res.predictions.emplace(task, pred);
    res.head_eff.emplace(task, std::move(eff));
  }
  return res;
}

inline Graph::Var task_loss_node(Graph& g, const ForwardResult& fwd, const TaskSpec& task,
                                 const std::map<std::string, Tensor>& targets) {
  auto pit = fwd.predictions.find(task.task_id);
  if (pit == fwd.predictions.end())
    throw std::invalid_argument("loss: no prediction for task " + task.task_id);
  auto tit = targets.find(task.task_id);
  if (tit == targets.end())
    throw std::invalid_argument("loss: missing target for task " + task.task_id);
  auto target = g.constant(tit->second);
  switch (task.loss) {
    case LossKind::CrossEntropy: return g.softmax_cross_entropy(pit->second, target);
    case LossKind::Cosine: return g.cosine_loss(pit->second, target);
    case LossKind::L1: return g.l1(pit->second, target);
    case LossKind::Mse: return g.mse(pit->second, target);
  }
  throw std::logic_error("unreachable loss kind");
}

// L^k with unit weight: the objective every disentangled saliency
// differentiates.
inline Graph::Var per_task_loss(Graph& g, const ForwardResult& fwd,
                                const std::vector<TaskSpec>& tasks, const std::string& task_id,
                                const std::map<std::string, Tensor>& targets) {
  for (const auto& t : tasks)
    if (t.task_id == task_id) {
      TaskSpec unit = t;
      unit.lambda = 1.0;
      return task_loss_node(g, fwd, unit, targets);
    }
  throw std::invalid_argument("per_task_loss: unknown task " + task_id);
}

// Σ_k λ^k ℓ^k over all tasks.
inline Graph::Var multitask_loss(Graph& g, const ForwardResult& fwd,
                                 const std::vector<TaskSpec>& tasks,
                                 const std::map<std::string, Tensor>& targets) {
  if (tasks.empty()) throw std::invalid_argument("multitask_loss: no tasks");
  bool any_positive = false;
  for (const auto& t : tasks) {
    if (t.lambda < 0.0) throw std::invalid_argument("multitask_loss: negative lambda");
    any_positive = any_positive || t.lambda > 0.0;
  }
  if (!any_positive) throw std::invalid_argument("multitask_loss: all task weights are zero");
  Graph::Var total;
  for (const auto& t : tasks) {
    auto term = g.scale(task_loss_node(g, fwd, t, targets), t.lambda);
    total = total.valid() ? g.add(total, term) : term;
  }
  return total;
}

}  // namespace disparse
