#pragma once

// Adam with step-decay learning rate. Moment buffers are keyed per parameter
// tensor; pruned or regrown weights get their buffers zeroed so stale
// momentum cannot move a masked weight off zero.

#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "disparse/model.hpp"

namespace disparse {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay_factor = 0.5;
  std::size_t decay_every = 1000;  // 0 disables decay
};

class Adam {
 public:
  Adam(MultitaskModel& model, AdamConfig cfg) : cfg_(cfg) {
    model.for_each_parameter([&](const std::string& id, Tensor& t) {
      index_.emplace(&t, slots_.size());
      slots_.push_back({&t, std::vector<double>(t.numel(), 0.0),
                        std::vector<double>(t.numel(), 0.0)});
      (void)id;
    });
  }

  double lr_at(std::size_t iteration) const {
    if (cfg_.decay_every == 0) return cfg_.lr;
    return cfg_.lr *
           std::pow(cfg_.decay_factor, static_cast<double>(iteration / cfg_.decay_every));
  }

  // One update from the grads currently stored on the parameters.
  void step() {
    double lr = lr_at(steps_);
    ++steps_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (Slot& s : slots_) {
      if (s.t->grad.size() != s.t->data.size()) continue;  // untouched this pass
      for (std::size_t i = 0; i < s.t->data.size(); ++i) {
        double g = s.t->grad[i];
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
        double mhat = s.m[i] / bc1;
        double vhat = s.v[i] / bc2;
        s.t->data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  void zero_state_at(const Tensor& t, std::size_t offset) {
    auto it = index_.find(&t);
    if (it == index_.end()) throw std::invalid_argument("Adam: unregistered tensor");
    Slot& s = slots_[it->second];
    if (offset >= s.m.size()) throw std::invalid_argument("Adam: state offset out of range");
    s.m[offset] = 0.0;
    s.v[offset] = 0.0;
  }

  std::size_t steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Tensor* t;
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  std::unordered_map<const Tensor*, std::size_t> index_;
  std::size_t steps_ = 0;
};

}  // namespace disparse
