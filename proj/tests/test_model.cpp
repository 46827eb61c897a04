#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "disparse/model.hpp"
#include "disparse/rng.hpp"

using namespace disparse;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.input_dim = 3;
  s.trunk_widths = {4, 4};
  s.head_hidden = 3;
  s.head_outputs = {{"a", 2}, {"b", 1}};
  s.activation = Activation::Tanh;
  return s;
}

// Plain-loop forward with no masking, used as the substitution oracle.
std::map<std::string, std::vector<double>> plain_forward(const MultitaskModel& m,
                                                         const Tensor& x) {
  auto run_layer = [&](const std::vector<double>& in, std::size_t rows,
                       const LinearLayer& l, bool activate) {
    std::size_t fin = l.W.shape[0], fout = l.W.shape[1];
    std::vector<double> out(rows * fout, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < fin; ++k) {
        double v = in[r * fin + k];
        if (v == 0.0) continue;
        for (std::size_t j = 0; j < fout; ++j) out[r * fout + j] += v * l.W.data[k * fout + j];
      }
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < fout; ++j) {
        out[r * fout + j] += l.b.data[j];
        if (activate)
          out[r * fout + j] = m.spec.activation == Activation::Relu
                                  ? std::max(0.0, out[r * fout + j])
                                  : std::tanh(out[r * fout + j]);
      }
    return out;
  };

  std::size_t rows = x.shape[0];
  std::vector<double> h = x.data;
  for (const auto& l : m.trunk) h = run_layer(h, rows, l, true);
  std::map<std::string, std::vector<double>> preds;
  for (const auto& [task, head] : m.heads) {
    std::vector<double> v = h;
    for (std::size_t i = 0; i < head.size(); ++i)
      v = run_layer(v, rows, head[i], i + 1 < head.size());
    preds[task] = v;
  }
  return preds;
}

Tensor random_batch(Rng& rng, std::size_t n, std::size_t d) {
  Tensor x = Tensor::zeros({n, d});
  for (double& v : x.data) v = rng.uniform(-1.0, 1.0);
  return x;
}

}  // namespace

TEST_CASE("all-ones masks match the unmasked forward bit-exactly", "[model]") {
  Rng rng(1, "init");
  auto model = MultitaskModel::init(tiny_spec(), rng);
  Rng drng(1, "data");
  Tensor x = random_batch(drng, 5, 3);

  Graph g;
  auto fwd = masked_forward(g, model, model.ones_masks(), x);
  auto oracle = plain_forward(model, x);
  for (const auto& [task, var] : fwd.predictions) {
    auto got = g.value(var);
    REQUIRE(std::equal(got.begin(), got.end(), oracle.at(task).begin()));
  }
}

TEST_CASE("all-zero trunk mask with zero biases gives constant task outputs", "[model]") {
  Rng rng(2, "init");
  auto model = MultitaskModel::init(tiny_spec(), rng);
  for (auto& l : model.trunk) std::fill(l.b.data.begin(), l.b.data.end(), 0.0);

  MaskSet ms = model.ones_masks();
  std::fill(ms.shared.bits.begin(), ms.shared.bits.end(), std::uint8_t{0});

  Rng drng(2, "data");
  Tensor x1 = random_batch(drng, 2, 3);
  Tensor x2 = random_batch(drng, 2, 3);

  Graph g1, g2;
  auto f1 = masked_forward(g1, model, ms, x1);
  auto f2 = masked_forward(g2, model, ms, x2);
  for (const auto& [task, var] : f1.predictions) {
    auto a = g1.value(var);
    auto b = g2.value(f2.predictions.at(task));
    REQUIRE(std::equal(a.begin(), a.end(), b.begin()));
    // Both rows identical: zero trunk output makes the head input constant.
    std::size_t cols = g1.shape(var)[1];
    for (std::size_t j = 0; j < cols; ++j) REQUIRE(a[j] == a[cols + j]);
  }
}

TEST_CASE("single masked bit equals weight substitution", "[model]") {
  Rng rng(3, "init");
  auto model = MultitaskModel::init(tiny_spec(), rng);
  Rng drng(3, "data");
  Tensor x = random_batch(drng, 4, 3);

  MaskSet ms = model.ones_masks();
  std::size_t flip = 7;  // inside trunk.0.W
  ms.shared.bits[flip] = 0;

  MultitaskModel subst = model;
  subst.trunk[0].W.data[flip] = 0.0;

  Graph g;
  auto fwd = masked_forward(g, model, ms, x);
  auto oracle = plain_forward(subst, x);
  for (const auto& [task, var] : fwd.predictions) {
    auto got = g.value(var);
    REQUIRE(std::equal(got.begin(), got.end(), oracle.at(task).begin()));
  }
}

TEST_CASE("mask length mismatch is rejected", "[model]") {
  Rng rng(4, "init");
  auto model = MultitaskModel::init(tiny_spec(), rng);
  MaskSet ms = model.ones_masks();
  ms.shared.bits.pop_back();
  Graph g;
  Tensor x = Tensor::zeros({1, 3});
  REQUIRE_THROWS_AS(masked_forward(g, model, ms, x), std::invalid_argument);
}

TEST_CASE("multitask loss arithmetic", "[model]") {
  // Constant predictions so per-task L1 losses are exactly 0.5 and 1.5.
  Graph g;
  ForwardResult fwd;
  fwd.predictions["a"] = g.constant(Tensor::matrix(1, 1, {0.5}));
  fwd.predictions["b"] = g.constant(Tensor::matrix(1, 1, {1.5}));
  std::map<std::string, Tensor> targets{{"a", Tensor::matrix(1, 1, {0.0})},
                                        {"b", Tensor::matrix(1, 1, {0.0})}};

  std::vector<TaskSpec> tasks{{"a", LossKind::L1, 1.0}, {"b", LossKind::L1, 1.0}};
  REQUIRE(g.value(multitask_loss(g, fwd, tasks, targets))[0] == 2.0);

  std::vector<TaskSpec> weighted{{"a", LossKind::L1, 2.0}, {"b", LossKind::L1, 0.0}};
  REQUIRE(g.value(multitask_loss(g, fwd, weighted, targets))[0] == 1.0);

  SECTION("zero loss at exact match") {
    ForwardResult f2;
    f2.predictions["a"] = g.constant(Tensor::matrix(1, 2, {0.25, -1.0}));
    std::map<std::string, Tensor> t2{{"a", Tensor::matrix(1, 2, {0.25, -1.0})}};
    std::vector<TaskSpec> one{{"a", LossKind::Mse, 1.0}};
    REQUIRE(g.value(multitask_loss(g, f2, one, t2))[0] == 0.0);
  }

  SECTION("missing target rejected") {
    std::map<std::string, Tensor> missing{{"a", Tensor::matrix(1, 1, {0.0})}};
    REQUIRE_THROWS_AS(multitask_loss(g, fwd, tasks, missing), std::invalid_argument);
  }

  SECTION("all-zero weights rejected") {
    std::vector<TaskSpec> zeroed{{"a", LossKind::L1, 0.0}, {"b", LossKind::L1, 0.0}};
    REQUIRE_THROWS_AS(multitask_loss(g, fwd, zeroed, targets), std::invalid_argument);
  }

  SECTION("per-task losses weighted-sum to the multitask loss") {
    double sum = 0.0;
    for (const auto& t : tasks)
      sum += t.lambda * g.value(per_task_loss(g, fwd, tasks, t.task_id, targets))[0];
    REQUIRE(sum == g.value(multitask_loss(g, fwd, tasks, targets))[0]);
  }

  SECTION("unknown task id rejected") {
    REQUIRE_THROWS_AS(per_task_loss(g, fwd, tasks, "zzz", targets), std::invalid_argument);
  }
}

TEST_CASE("per-task gradients are isolated to the task's own head", "[model]") {
  Rng rng(5, "init");
  auto model = MultitaskModel::init(tiny_spec(), rng);
  Rng drng(5, "data");
  Tensor x = random_batch(drng, 4, 3);
  std::map<std::string, Tensor> targets{
      {"a", Tensor::zeros({4, 2})},
      {"b", Tensor::zeros({4, 1})},
  };
  std::vector<TaskSpec> tasks{{"a", LossKind::Mse, 1.0}, {"b", LossKind::Mse, 1.0}};

  Graph g;
  auto fwd = masked_forward(g, model, model.ones_masks(), x);
  g.backward(per_task_loss(g, fwd, tasks, "a", targets));

  bool trunk_touched = false;
  for (const auto& l : model.trunk)
    for (double gv : l.W.grad) trunk_touched = trunk_touched || gv != 0.0;
  REQUIRE(trunk_touched);
  for (const auto& l : model.heads.at("b")) {
    for (double gv : l.W.grad) REQUIRE(gv == 0.0);
    for (double gv : l.b.grad) REQUIRE(gv == 0.0);
  }
  bool head_a_touched = false;
  for (const auto& l : model.heads.at("a"))
    for (double gv : l.W.grad) head_a_touched = head_a_touched || gv != 0.0;
  REQUIRE(head_a_touched);
}

TEST_CASE("flatten and unflatten round-trip the partition", "[model]") {
  Rng rng(6, "init");
  auto model = MultitaskModel::init(tiny_spec(), rng);
  auto shared = model.flatten_shared();
  auto head_a = model.flatten_head("a");
  REQUIRE(shared.size() == model.shared_param_count());
  REQUIRE(head_a.size() == model.head_param_count("a"));
  REQUIRE(model.maskable_param_count() ==
          shared.size() + head_a.size() + model.flatten_head("b").size());

  auto copy = model;
  for (auto& l : copy.trunk) std::fill(l.W.data.begin(), l.W.data.end(), 0.0);
  copy.unflatten_shared(shared);
  REQUIRE(copy.flatten_shared() == shared);

  auto view = model.flatten_task_view("a");
  REQUIRE(view.size() == shared.size() + head_a.size());
  REQUIRE(std::equal(shared.begin(), shared.end(), view.begin()));
}

TEST_CASE("masked weights stay masked under apply_masks", "[model]") {
  Rng rng(7, "init");
  auto model = MultitaskModel::init(tiny_spec(), rng);
  MaskSet ms = model.ones_masks();
  Rng mrng(7, "masks");
  for (auto& bit : ms.shared.bits) bit = mrng.uniform() < 0.5 ? 0 : 1;
  model.apply_masks(ms);
  auto flat = model.flatten_shared();
  for (std::size_t i = 0; i < flat.size(); ++i)
    if (!ms.shared.bits[i]) REQUIRE(flat[i] == 0.0);
}
