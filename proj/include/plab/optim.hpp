#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "plab/errors.hpp"
#include "plab/tensor.hpp"

namespace plab {

/// Piecewise-constant learning-rate multiplier: `factor` per milestone passed.
struct StepSchedule {
  std::vector<int> milestones;
  double factor = 0.1;

  double multiplier(int epoch) const {
    double m = 1.0;
    for (int e : milestones)
      if (epoch >= e) m *= factor;
    return m;
  }
};

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 0.0;
  StepSchedule schedule;
};

/// SGD with (Nesterov) momentum, velocity kept per parameter.
///
///   g' = g + wd * p
///   v  = momentum * v + g'
///   p -= lr_epoch * (nesterov ? g' + momentum * v : v)
template <typename T>
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(std::move(cfg)) {
    if (!(cfg_.lr > 0)) throw ValueError("learning rate must be positive");
    if (cfg_.momentum < 0 || cfg_.momentum >= 1) throw ValueError("momentum must lie in [0, 1)");
  }

  const SgdConfig& config() const { return cfg_; }
  double effective_lr(int epoch) const { return cfg_.lr * cfg_.schedule.multiplier(epoch); }

  void step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, int epoch) {
    if (params.size() != grads.size()) throw ShapeError("sgd: parameter and gradient counts differ");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (params[i]->shape() != grads[i].shape())
        throw ShapeError("sgd: gradient shape " + shape_str(grads[i].shape()) + " for parameter " +
                         shape_str(params[i]->shape()));
      if (!grads[i].all_finite()) throw NumericError("sgd: non-finite gradient for parameter " + std::to_string(i));
    }
    if (velocity_.empty())
      for (const auto& g : grads) velocity_.emplace_back(g.shape());
    if (velocity_.size() != grads.size()) throw ShapeError("sgd: parameter set changed between steps");

    const T lr = T(effective_lr(epoch));
    const T mom = T(cfg_.momentum);
    const T wd = T(cfg_.weight_decay);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      T* p = params[i]->data();
      T* v = velocity_[i].data();
      const T* g = grads[i].data();
      for (std::size_t j = 0, n = grads[i].size(); j < n; ++j) {
        const T gj = g[j] + wd * p[j];
        v[j] = mom * v[j] + gj;
        p[j] -= lr * (cfg_.nesterov ? gj + mom * v[j] : v[j]);
      }
    }
  }

  void reset() { velocity_.clear(); }

 private:
  SgdConfig cfg_;
  std::vector<Tensor<T>> velocity_;
};

}  // namespace plab
