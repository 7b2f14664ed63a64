#pragma once

// Minibatch SGD over a dataset with optional poisons and defense noise.

#include <algorithm>
#include <numeric>
#include <vector>

#include "plab/autograd.hpp"
#include "plab/data.hpp"
#include "plab/nn.hpp"
#include "plab/noise.hpp"
#include "plab/optim.hpp"
#include "plab/perturbation.hpp"
#include "plab/rng.hpp"

namespace plab {

struct TrainConfig {
  int epochs = 20;
  std::size_t batch = 128;
  SgdConfig sgd{0.05, 0.9, true, 5e-4, StepSchedule{{8, 13, 17}, 0.1}};
  bool augment = true;
  std::uint64_t seed = 0;
};

/// What gets added to the base images during one epoch.
struct EpochInputs {
  const PoisonSet* poisons = nullptr;
  const FriendlyNoiseSet* friendly = nullptr;
  const NoiseSpec* noise = nullptr;  // resampled per example per epoch
};

/// Examples visited in epoch `epoch`, in order.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, {stream::shuffle, std::uint64_t(epoch)});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// One pass over `data`. Returns the mean minibatch loss.
template <typename T>
double train_epoch(Model<T>& model, Sgd<T>& opt, const Dataset& data, int epoch, const TrainConfig& cfg,
                   const EpochInputs& in = {}) {
  const auto order = epoch_order(data.size(), cfg.seed, epoch);
  Rng aug_rng = make_rng(cfg.seed, {stream::augment, std::uint64_t(epoch)});
  auto trainable = model.trainable();
  std::vector<Tensor<T>*> targets;
  for (auto& v : trainable) targets.push_back(&v.mutable_value());

  double total = 0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
    const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch, order.size() - start));
    std::vector<AugmentParams> aug;
    if (cfg.augment) aug = draw_augment(idx.size(), aug_rng);
    Tensor<float> noise;
    ComposeInputs ci{in.poisons, in.friendly, nullptr, aug};
    if (in.noise && in.noise->active()) {
      noise = sample_batch_noise(*in.noise, data.image_shape(), epoch, idx);
      ci.random_noise = &noise;
    }
    const Tensor<float> x = compose(data, idx, ci);
    const auto labels = data.batch_labels(idx);
    Var<T> loss;
    if constexpr (std::is_same_v<T, float>) {
      loss = cross_entropy(model.logits(constant(x)), std::span<const int>(labels));
    } else {
      loss = cross_entropy(model.logits(constant(x.template cast<T>())), std::span<const int>(labels));
    }
    const auto grads = grad(loss, trainable);
    std::vector<Tensor<T>> g;
    g.reserve(grads.size());
    for (const auto& v : grads) g.push_back(v.value());
    opt.step(targets, g, epoch);
    total += double(loss.value().item());
    ++batches;
  }
  return total / double(std::max<std::size_t>(batches, 1));
}

/// Predicted classes for [N, C, H, W] images, evaluated in chunks.
template <typename T>
std::vector<int> predict(const Model<T>& model, const Tensor<float>& images, std::size_t chunk = 500) {
  GradMode off(false);
  const std::size_t n = images.dim(0), sz = images.size() / n;
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t b = std::min(chunk, n - s);
    Shape shape = images.shape();
    shape[0] = b;
    Tensor<float> x(shape, std::vector<float>(images.data() + s * sz, images.data() + (s + b) * sz));
    Tensor<T> z;
    if constexpr (std::is_same_v<T, float>) {
      z = model.logits(constant(x)).value();
    } else {
      z = model.logits(constant(x.template cast<T>())).value();
    }
    const std::size_t k = z.dim(1);
    for (std::size_t r = 0; r < b; ++r)
      out.push_back(int(std::max_element(z.data() + r * k, z.data() + (r + 1) * k) - (z.data() + r * k)));
  }
  return out;
}

}  // namespace plab
