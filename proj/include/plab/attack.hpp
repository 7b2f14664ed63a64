#pragma once

// Clean-label poison crafting: gradient matching, feature collision, a patch
// trigger backdoor, and variants that simulate defense noise while crafting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "plab/autograd.hpp"
#include "plab/data.hpp"
#include "plab/errors.hpp"
#include "plab/loss.hpp"
#include "plab/nn.hpp"
#include "plab/noise.hpp"
#include "plab/perturbation.hpp"
#include "plab/rng.hpp"

namespace plab {

enum class AttackKind { gradient_matching, feature_collision, backdoor_patch };

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::gradient_matching: return "gradient-matching";
    case AttackKind::feature_collision: return "feature-collision";
    case AttackKind::backdoor_patch: return "backdoor-patch";
  }
  return "?";
}

inline AttackKind parse_attack_kind(const std::string& s) {
  if (s == "gradient-matching") return AttackKind::gradient_matching;
  if (s == "feature-collision") return AttackKind::feature_collision;
  if (s == "backdoor-patch") return AttackKind::backdoor_patch;
  throw ValueError("unknown attack kind '" + s + "'");
}

struct AttackConfig {
  AttackKind kind = AttackKind::gradient_matching;
  double budget = 0.01;
  int xi = 16;             // 8-bit units
  int steps = 250;
  int restarts = 4;
  double step_size = 0;    // 8-bit units; 0 selects xi / 10
  bool augment = true;     // differentiable crop/flip of the poisons while crafting
  std::uint64_t seed = 0;

  float bound() const { return pixel_bound(xi); }
  float step() const { return float((step_size > 0 ? step_size : xi / 10.0) / 255.0); }

  void validate() const {
    if (!(budget > 0 && budget <= 0.5)) throw ValueError("attack budget must lie in (0, 0.5]");
    if (xi < 0 || xi > 255) throw ValueError("attack bound must lie in [0, 255]");
    if (steps < 0) throw ValueError("crafting steps must be non-negative");
    if (restarts < 1) throw ValueError("crafting needs at least one restart");
    if (step_size < 0) throw ValueError("crafting step size must be non-negative");
  }
};

/// Defense noise the attacker folds into crafting.
struct AdaptiveNoise {
  const FriendlyNoiseSet* friendly = nullptr;
  const NoiseSpec* random = nullptr;  // resampled at every crafting step
};

/// floor(budget * N) distinct indices of class y_adv, in increasing order.
inline std::vector<std::size_t> select_poison_indices(const Dataset& data, const TargetSpec& target, double budget,
                                                      std::uint64_t seed) {
  if (!(budget > 0 && budget <= 0.5)) throw ValueError("attack budget must lie in (0, 0.5]");
  const std::size_t count = std::size_t(std::floor(budget * double(data.size())));
  auto pool = data.indices_of_class(target.adv_label);
  if (count > pool.size())
    throw ValueError("budget asks for " + std::to_string(count) + " poisons but class " +
                     std::to_string(target.adv_label) + " has " + std::to_string(pool.size()) + " examples");
  Rng rng = make_rng(seed, {stream::poison_select, std::uint64_t(target.adv_label)});
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

namespace detail {

/// Parameter gradient of the mean cross-entropy on (x, labels).
template <typename T>
std::vector<Tensor<T>> param_gradient(const Model<T>& model, const Tensor<T>& x, std::span<const int> labels) {
  const auto params = model.trainable();
  const auto g = grad(cross_entropy(model.logits(constant(x)), labels), params);
  std::vector<Tensor<T>> out;
  for (const auto& v : g) out.push_back(v.value());
  return out;
}

/// Keeps delta inside the bound box and x + delta inside [0,1]. The box clamp
/// runs last so the stored bound holds exactly.
template <typename T>
void project_poison(std::span<T> delta, std::span<const T> x, T bound) {
  for (std::size_t k = 0; k < delta.size(); ++k) {
    delta[k] = std::clamp(delta[k], -x[k], T(1) - x[k]);
    delta[k] = std::clamp(delta[k], -bound, bound);
  }
}

/// Step multiplier: x0.1 at 3/8, 5/8 and 7/8 of the run.
inline double step_decay(int step, int steps) {
  double m = 1.0;
  for (int k : {3, 5, 7})
    if (8 * step >= k * steps) m *= 0.1;
  return m;
}

/// Builds x_hat = clamp(aug(x + delta) + eps + mu, 0, 1) as a graph in delta.
template <typename T>
Var<T> perturbed_input(const Var<T>& delta, const Tensor<T>& x, const std::vector<AugmentParams>& aug,
                       const Tensor<T>* extra) {
  Var<T> v = add(constant(x), delta);
  if (!aug.empty()) v = gather_pixels(v, augment_map(aug, x.dim(2), x.dim(3)));
  if (extra) v = add(v, constant(*extra));
  return extra || !aug.empty() ? clamp(v, T(0), T(1)) : v;
}

}  // namespace detail

/// Core gradient-matching loop: aligns the mean parameter gradient of the
/// poisons at `indices` with the gradient of (targets, target_labels).
template <typename T>
PoisonSet craft_matching(const Model<T>& model, const Dataset& data, std::vector<std::size_t> indices,
                         const Tensor<float>& targets, std::span<const int> target_labels, const AttackConfig& cfg,
                         const AdaptiveNoise& adaptive = {}) {
  cfg.validate();
  PoisonSet out;
  out.xi = cfg.xi;
  out.indices = std::move(indices);
  out.log.steps = cfg.steps;
  out.log.restarts = cfg.restarts;
  if (out.indices.empty()) return out;

  const Tensor<T> x = detail::as<T>(data.batch(out.indices));
  const auto labels = data.batch_labels(out.indices);
  const std::vector<Tensor<T>> g_target = detail::param_gradient(model, detail::as<T>(targets), target_labels);
  const auto params = model.trainable();
  const T bound = T(cfg.bound());
  const std::size_t P = out.indices.size(), n = x.size() / P;
  const bool noisy = adaptive.friendly || (adaptive.random && adaptive.random->active());
  if (adaptive.friendly && adaptive.friendly->size() != data.size())
    throw ShapeError("adaptive crafting: friendly noise does not cover the dataset");

  // Fixed part of the defense noise (friendly), plus a fresh random draw per step.
  auto noise_at = [&](int restart, int step) -> std::optional<Tensor<T>> {
    if (!noisy) return std::nullopt;
    Tensor<float> e(x.shape());
    if (adaptive.friendly)
      for (std::size_t p = 0; p < P; ++p) std::copy_n(adaptive.friendly->noise(out.indices[p]), n, e.data() + p * n);
    if (adaptive.random && adaptive.random->active()) {
      NoiseSpec spec = *adaptive.random;
      spec.seed = derive_seed(cfg.seed, {stream::craft, std::uint64_t(restart), 1});
      const Tensor<float> mu = sample_batch_noise(spec, data.image_shape(), step, out.indices);
      for (std::size_t k = 0; k < e.size(); ++k) e[k] += mu[k];
      ++out.log.noise_resamples;
    }
    return detail::as<T>(e);
  };

  auto loss_of = [&](const Var<T>& delta, const std::vector<AugmentParams>& aug, const Tensor<T>* extra,
                     bool create) {
    Var<T> xin = detail::perturbed_input(delta, x, aug, extra);
    Var<T> ce = cross_entropy(model.logits(xin), std::span<const int>(labels));
    return matching_loss(g_target, grad(ce, params, create));
  };

  // Deterministic evaluation: no augmentation, friendly noise only (if any).
  std::optional<Tensor<T>> eval_noise;
  if (adaptive.friendly) {
    AdaptiveNoise fixed{adaptive.friendly, nullptr};
    Tensor<float> e(x.shape());
    for (std::size_t p = 0; p < P; ++p) std::copy_n(fixed.friendly->noise(out.indices[p]), n, e.data() + p * n);
    eval_noise = detail::as<T>(e);
  }
  auto evaluate = [&](const Tensor<T>& d) {
    GradMode on(true);
    return double(loss_of(constant(d), {}, eval_noise ? &*eval_noise : nullptr, false).value().item());
  };

  const Tensor<T> zero(x.shape());
  out.log.initial_loss = evaluate(zero);

  Tensor<T> best = zero;
  double best_loss = out.log.initial_loss;
  std::vector<double> best_trace;
  const T step0 = T(cfg.step());
  for (int r = 0; r < cfg.restarts; ++r) {
    Rng rng = make_rng(cfg.seed, {stream::craft, std::uint64_t(r)});
    Tensor<T> d(x.shape());
    std::uniform_real_distribution<double> init(-double(bound), double(bound));
    for (T& v : d.values()) v = T(init(rng));
    detail::project_poison<T>(d.values(), x.values(), bound);
    std::vector<double> trace;
    bool failed = false;
    for (int s = 0; s < cfg.steps; ++s) {
      std::vector<AugmentParams> aug;
      if (cfg.augment) aug = draw_augment(P, rng);
      const auto extra = noise_at(r, s);
      Var<T> delta = leaf(d);
      Var<T> ml = loss_of(delta, aug, extra ? &*extra : nullptr, true);
      const double lv = double(ml.value().item());
      if (!std::isfinite(lv)) {
        failed = true;
        break;
      }
      trace.push_back(lv);
      const Tensor<T> g = grad(ml, {delta})[0].value();
      const T a = T(double(step0) * detail::step_decay(s, cfg.steps));
      for (std::size_t k = 0; k < d.size(); ++k) d[k] -= a * T((g[k] > 0) - (g[k] < 0));
      detail::project_poison<T>(d.values(), x.values(), bound);
    }
    if (failed) {
      ++out.log.failed_restarts;
      out.log.restart_losses.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double fl = evaluate(d);
    out.log.restart_losses.push_back(fl);
    if (std::isfinite(fl) && (out.log.best_restart < 0 || fl < best_loss)) {
      if (fl <= out.log.initial_loss) {
        best = d;
        best_loss = fl;
        best_trace = trace;
        out.log.best_restart = r;
      }
    }
  }
  out.log.final_loss = best_loss;
  out.log.step_losses = std::move(best_trace);
  out.deltas = best.template cast<float>().reshaped({P, data.channels(), data.height(), data.width()});
  // Float rounding must not break the stored bound.
  out.deltas = project_linf(std::move(out.deltas), out.bound());
  return out;
}

/// Poisons x_i + delta_i from class y_adv whose gradient mimics misclassifying x_t as y_adv.
template <typename T>
PoisonSet craft_gradient_matching(const Model<T>& model, const Dataset& data, const TargetSpec& target,
                                  const AttackConfig& cfg) {
  target.validate();
  const int adv[1] = {target.adv_label};
  return craft_matching(model, data, select_poison_indices(data, target, cfg.budget, cfg.seed), target.image, adv,
                        cfg);
}

/// Gradient matching with the defense's friendly noise and fresh random noise applied to the poisons at every step.
template <typename T>
PoisonSet craft_adaptive(const Model<T>& model, const Dataset& data, const TargetSpec& target, const AttackConfig& cfg,
                         const FriendlyNoiseSet* friendly, const NoiseSpec* random) {
  target.validate();
  const int adv[1] = {target.adv_label};
  return craft_matching(model, data, select_poison_indices(data, target, cfg.budget, cfg.seed), target.image, adv,
                        cfg, AdaptiveNoise{friendly, random});
}

/// Source-class test images with the trigger stamped on, all labeled y_adv.
inline std::pair<Tensor<float>, std::vector<int>> backdoor_targets(const Dataset& test, const TargetSpec& target) {
  const auto idx = test.indices_of_class(target.true_label);
  if (idx.empty()) throw ValueError("no test images of the source class");
  Tensor<float> x = test.batch(idx);
  if (target.trigger && target.trigger->size) x = target.trigger->apply(std::move(x));
  return {std::move(x), std::vector<int>(idx.size(), target.adv_label)};
}

/// Poisons whose training makes trigger-stamped source-class images classify as y_adv.
/// The stored poisons carry no patch.
template <typename T>
PoisonSet craft_backdoor(const Model<T>& model, const Dataset& train, const Dataset& test, const TargetSpec& target,
                         const AttackConfig& cfg) {
  target.validate();
  auto [x, labels] = backdoor_targets(test, target);
  return craft_matching(model, train, select_poison_indices(train, target, cfg.budget, cfg.seed), x,
                        std::span<const int>(labels), cfg);
}

/// Feature collision: each delta_i minimizes ||phi(x_i + delta_i) - phi(x_t)||^2
/// in the bound box, phi being the penultimate representation.
template <typename T>
PoisonSet craft_feature_collision(const Model<T>& model, const Dataset& data, const TargetSpec& target,
                                  const AttackConfig& cfg) {
  cfg.validate();
  target.validate();
  PoisonSet out;
  out.xi = cfg.xi;
  out.indices = select_poison_indices(data, target, cfg.budget, cfg.seed);
  out.log.steps = cfg.steps;
  out.log.restarts = cfg.restarts;
  if (out.indices.empty()) return out;

  const std::size_t P = out.indices.size();
  const Tensor<T> x = detail::as<T>(data.batch(out.indices));
  const std::size_t n = x.size() / P;
  Tensor<T> phi_t;
  {
    GradMode off(false);
    phi_t = model.features(constant(detail::as<T>(target.image))).value();
  }
  const std::size_t f = phi_t.size();
  Tensor<T> phi_rep({P, f});
  for (std::size_t p = 0; p < P; ++p) std::copy_n(phi_t.data(), f, phi_rep.data() + p * f);

  auto distances = [&](const Var<T>& delta) {
    Var<T> diff = sub(model.features(add(constant(x), delta)), constant(phi_rep));
    return row_sum(mul(diff, diff));  // [P]
  };
  auto eval = [&](const Tensor<T>& d) {
    GradMode off(false);
    return distances(constant(d)).value();
  };

  const T bound = T(cfg.bound());
  const Tensor<T> zero(x.shape());
  const Tensor<T> d0 = eval(zero);
  Tensor<T> best = zero, best_dist = d0;
  out.log.initial_loss = double(d0.sum()) / double(P);
  for (int r = 0; r < cfg.restarts; ++r) {
    Rng rng = make_rng(cfg.seed, {stream::craft, std::uint64_t(r), 2});
    Tensor<T> d(x.shape());
    std::uniform_real_distribution<double> init(-double(bound), double(bound));
    for (T& v : d.values()) v = T(init(rng));
    detail::project_poison<T>(d.values(), x.values(), bound);
    for (int s = 0; s < cfg.steps; ++s) {
      Var<T> delta = leaf(d);
      Var<T> loss = sum(distances(delta));
      if (!std::isfinite(double(loss.value().item()))) break;
      if (r == 0) out.log.step_losses.push_back(double(loss.value().item()) / double(P));
      const Tensor<T> g = grad(loss, {delta})[0].value();
      const T a = T(double(cfg.step()) * detail::step_decay(s, cfg.steps));
      for (std::size_t k = 0; k < d.size(); ++k) d[k] -= a * T((g[k] > 0) - (g[k] < 0));
      detail::project_poison<T>(d.values(), x.values(), bound);
    }
    const Tensor<T> dist = eval(d);
    out.log.restart_losses.push_back(double(dist.sum()) / double(P));
    // Poisons are independent, so each keeps its own best restart.
    for (std::size_t p = 0; p < P; ++p)
      if (dist[p] < best_dist[p]) {
        best_dist[p] = dist[p];
        std::copy_n(d.data() + p * n, n, best.data() + p * n);
      }
  }
  out.log.best_restart = 0;
  out.log.final_loss = double(best_dist.sum()) / double(P);
  out.deltas = best.template cast<float>().reshaped({P, data.channels(), data.height(), data.width()});
  out.deltas = project_linf(std::move(out.deltas), out.bound());
  return out;
}

/// Dispatches on cfg.kind. Backdoor crafting needs the test split for its trigger targets.
template <typename T>
PoisonSet craft(const Model<T>& model, const Dataset& train, const Dataset& test, const TargetSpec& target,
                const AttackConfig& cfg, const AdaptiveNoise& adaptive = {}) {
  switch (cfg.kind) {
    case AttackKind::gradient_matching:
      return craft_adaptive(model, train, target, cfg, adaptive.friendly, adaptive.random);
    case AttackKind::feature_collision: return craft_feature_collision(model, train, target, cfg);
    case AttackKind::backdoor_patch: {
      auto [x, labels] = backdoor_targets(test, target);
      return craft_matching(model, train, select_poison_indices(train, target, cfg.budget, cfg.seed), x,
                            std::span<const int>(labels), cfg, adaptive);
    }
  }
  throw ValueError("unknown attack kind");
}

/// Per-poison 1 - cos between the target gradient and that poison's own
/// gradient at x_i + delta_i.
template <typename T>
std::vector<double> per_poison_matching_loss(const Model<T>& model, const Dataset& data, const PoisonSet& poisons,
                                             const Tensor<float>& targets, std::span<const int> target_labels) {
  const auto g_t = detail::param_gradient(model, detail::as<T>(targets), target_labels);
  std::vector<T> flat_t;
  for (const auto& g : g_t) flat_t.insert(flat_t.end(), g.values().begin(), g.values().end());
  std::vector<double> out;
  const std::size_t n = data.image_size();
  for (std::size_t p = 0; p < poisons.size(); ++p) {
    const std::size_t idx[1] = {poisons.indices[p]};
    Tensor<float> xi = data.batch(idx);
    for (std::size_t k = 0; k < n; ++k) xi[k] += poisons.delta(p)[k];
    const int y[1] = {data.labels[idx[0]]};
    const auto g_p = detail::param_gradient(model, detail::as<T>(xi), y);
    std::vector<T> flat_p;
    for (const auto& g : g_p) flat_p.insert(flat_p.end(), g.values().begin(), g.values().end());
    out.push_back(double(matching_loss<T>(flat_t, flat_p)));
  }
  return out;
}

/// Rows of `poisons` whose per-poison matching loss lies strictly below the median.
inline std::vector<std::size_t> effective_poisons(const std::vector<double>& per_poison_loss) {
  if (per_poison_loss.empty()) return {};
  std::vector<double> sorted = per_poison_loss;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  const double median = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < m; ++p)
    if (per_poison_loss[p] < median) out.push_back(p);
  return out;
}

}  // namespace plab
