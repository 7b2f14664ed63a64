#pragma once

// Friendly noise (per-example perturbations that barely move the model's
// output) combined with per-epoch random noise during training.

#include <algorithm>
#include <chrono>
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
#include "plab/optim.hpp"
#include "plab/perturbation.hpp"
#include "plab/rng.hpp"
#include "plab/train.hpp"

namespace plab {

enum class NoiseNorm { l1, l2, linf };

inline std::string to_string(NoiseNorm n) {
  switch (n) {
    case NoiseNorm::l1: return "l1";
    case NoiseNorm::l2: return "l2";
    case NoiseNorm::linf: return "linf";
  }
  return "?";
}

inline NoiseNorm parse_noise_norm(const std::string& s) {
  if (s == "l1") return NoiseNorm::l1;
  if (s == "l2") return NoiseNorm::l2;
  if (s == "linf") return NoiseNorm::linf;
  throw ValueError("unknown norm '" + s + "'");
}

/// Per-row norm of [B, ...] perturbations, differentiable.
template <typename T>
Var<T> row_norm(const Var<T>& eps, NoiseNorm norm) {
  switch (norm) {
    case NoiseNorm::l1: return row_sum(abs(eps));
    case NoiseNorm::l2: return sqrt(row_sum(mul(eps, eps)));
    case NoiseNorm::linf: return row_max_abs(eps);
  }
  throw ValueError("unknown norm");
}

/// Per-example KL(f(x + eps) || f(x)) - lambda * ||eps||, as a [B] vector.
/// `clean_probs` holds f(x) for the same rows.
template <typename T>
Var<T> friendly_objective_rows(const Model<T>& model, const Tensor<T>& x, const Var<T>& eps, const Tensor<T>& clean_probs,
                               double lambda, NoiseNorm norm) {
  Var<T> p = softmax(model.logits(add(constant(x), eps)));
  Var<T> kl = kl_rows(p, clean_probs);
  if (lambda == 0) return kl;
  return sub(kl, scale(row_norm(eps, norm), T(lambda)));
}

/// Scalar objective for a batch (sum over rows).
template <typename T>
Var<T> friendly_objective(const Model<T>& model, const Tensor<T>& x, const Var<T>& eps, double lambda, NoiseNorm norm) {
  const Tensor<T> q = model.probabilities(x);
  return sum(friendly_objective_rows(model, x, eps, q, lambda, norm));
}

struct FriendlyConfig {
  int zeta = 16;  // 8-bit units
  double lambda = 1.0;
  NoiseNorm norm = NoiseNorm::l2;
  int steps = 20;
  double lr = 20.0;  // applied to the objective averaged over `batch` rows
  double momentum = 0.9;
  std::size_t batch = 128;
  double init = -1;  // 8-bit half-width of the uniform initialization; negative selects zeta / 2
  bool search = false;
  std::vector<double> lr_grid{10, 20, 50, 100};
  std::vector<double> lambda_grid{1, 10};
  std::size_t search_examples = 512;
  std::uint64_t seed = 0;

  float bound() const { return pixel_bound(zeta); }
  float init_bound() const { return float((init >= 0 ? init : zeta / 2.0) / 255.0); }

  void validate() const {
    if (zeta < 0 || zeta > 255) throw ValueError("friendly noise bound must lie in [0, 255]");
    if (lambda < 0) throw ValueError("lambda must be non-negative");
    if (steps < 0) throw ValueError("noise steps must be non-negative");
    if (!(lr > 0)) throw ValueError("noise learning rate must be positive");
    if (batch == 0) throw ValueError("noise batch must be positive");
    if (init > zeta) throw ValueError("noise initialization exceeds its bound");
  }
};

/// Outcome of optimizing one batch of friendly noise.
struct FriendlyBatchResult {
  Tensor<float> eps;                  // [B, C, H, W]
  std::vector<double> initial;        // objective per example at initialization
  std::vector<double> final;          // objective per example for the kept iterate
  std::vector<double> kl;             // KL of the kept iterate
  std::size_t failures = 0;
};

namespace detail {

template <typename T>
Tensor<T> friendly_init(std::size_t rows, std::size_t n, float half, std::uint64_t seed, std::span<const std::size_t> ids,
                        int attempt) {
  Tensor<T> e({rows, n});
  for (std::size_t r = 0; r < rows; ++r) {
    Rng rng = make_rng(seed, {stream::friendly_init, ids[r], std::uint64_t(attempt)});
    std::uniform_real_distribution<float> u(-half, half);
    for (std::size_t k = 0; k < n; ++k) e[r * n + k] = T(u(rng));
  }
  return e;
}

}  // namespace detail

/// Alg.-1 style descent on the friendly objective for one batch of clean
/// images `x` ([B, C, H, W]); `ids` seed each row's initialization.
template <typename T>
FriendlyBatchResult optimize_friendly_batch(const Model<T>& model, const Tensor<float>& x_in,
                                            std::span<const std::size_t> ids, const FriendlyConfig& cfg) {
  cfg.validate();
  const std::size_t B = x_in.dim(0), n = x_in.size() / B;
  const Tensor<T> x = detail::as<T>(x_in);
  const Tensor<T> q = model.probabilities(x);
  const T bound = T(cfg.bound());
  FriendlyBatchResult res;
  res.initial.assign(B, 0);
  res.final.assign(B, std::numeric_limits<double>::infinity());
  res.kl.assign(B, 0);

  auto evaluate = [&](const Tensor<T>& e, std::vector<double>& obj, std::vector<double>* kl_out) {
    GradMode off(false);
    Var<T> ev = constant(e.reshaped(x.shape()));
    const Tensor<T> o = friendly_objective_rows(model, x, ev, q, cfg.lambda, cfg.norm).value();
    if (kl_out) {
      const Tensor<T> k = kl_rows(softmax(model.logits(add(constant(x), ev))), q).value();
      for (std::size_t r = 0; r < B; ++r) (*kl_out)[r] = double(k[r]);
    }
    for (std::size_t r = 0; r < B; ++r) obj[r] = double(o[r]);
  };

  Tensor<T> e = detail::friendly_init<T>(B, n, cfg.init_bound(), cfg.seed, ids, 0);
  e = project_linf(std::move(e), bound);
  evaluate(e, res.initial, nullptr);
  // Non-finite start: redraw those rows once.
  std::vector<bool> retried(B, false);
  for (std::size_t r = 0; r < B; ++r)
    if (!std::isfinite(res.initial[r])) {
      const auto fresh = detail::friendly_init<T>(B, n, cfg.init_bound(), cfg.seed, ids, 1);
      std::copy_n(fresh.data() + r * n, n, e.data() + r * n);
      retried[r] = true;
    }
  if (std::find(retried.begin(), retried.end(), true) != retried.end()) evaluate(e, res.initial, nullptr);

  Tensor<T> best = e;
  std::vector<double> best_obj = res.initial;
  Tensor<T> velocity(e.shape());
  const T lr = T(cfg.lr), mom = T(cfg.momentum);
  std::vector<double> cur(B);
  auto keep_best = [&] {
    for (std::size_t r = 0; r < B; ++r)
      if (std::isfinite(cur[r]) && !(cur[r] > best_obj[r])) {
        best_obj[r] = cur[r];
        std::copy_n(e.data() + r * n, n, best.data() + r * n);
      }
  };
  for (int s = 0; s < cfg.steps; ++s) {
    Var<T> ev = leaf(e.reshaped(x.shape()));
    Var<T> obj = friendly_objective_rows(model, x, ev, q, cfg.lambda, cfg.norm);
    // The forward pass doubles as the evaluation of the previous step's iterate.
    if (s > 0) {
      for (std::size_t r = 0; r < B; ++r) cur[r] = double(obj.value()[r]);
      keep_best();
    }
    // Mean over a full configured batch, so a short final batch takes the same per-example steps.
    Var<T> mean = scale(sum(obj), T(1.0 / double(cfg.batch)));
    Tensor<T> g = grad(mean, {ev})[0].value();
    // Rows whose gradient went non-finite stop moving.
    for (std::size_t r = 0; r < B; ++r) {
      bool finite = true;
      for (std::size_t k = 0; k < n && finite; ++k) finite = std::isfinite(g[r * n + k]);
      if (!finite) std::fill_n(g.data() + r * n, n, T(0));
    }
    for (std::size_t k = 0; k < e.size(); ++k) {
      velocity[k] = mom * velocity[k] + g[k];
      e[k] -= lr * (g[k] + mom * velocity[k]);
    }
    e = project_linf(std::move(e), bound);
  }
  if (cfg.steps > 0) {
    evaluate(e, cur, nullptr);
    keep_best();
  }
  for (std::size_t r = 0; r < B; ++r)
    if (!std::isfinite(best_obj[r])) {
      std::fill_n(best.data() + r * n, n, T(0));
      ++res.failures;
    }
  evaluate(best, res.final, &res.kl);
  res.eps = project_linf(best.template cast<float>().reshaped(x_in.shape()), cfg.bound());
  return res;
}

struct FriendlyStats {
  double mean_kl = 0;
  double mean_linf = 0;
  std::size_t failures = 0;
  std::size_t worsened = 0;  // examples whose final objective exceeds the initial one
};

/// The images friendly noise is optimized for: base plus poisons, no augmentation.
inline Tensor<float> defended_inputs(const Dataset& data, std::span<const std::size_t> idx, const PoisonSet* poisons) {
  return compose(data, idx, ComposeInputs{poisons});
}

/// Runs friendly-noise descent over the whole dataset in batches.
template <typename T>
FriendlyNoiseSet generate_friendly_noise(const Model<T>& model, const Dataset& data, const FriendlyConfig& cfg_in,
                                         const PoisonSet* poisons = nullptr, FriendlyStats* stats = nullptr) {
  FriendlyConfig cfg = cfg_in;
  cfg.validate();
  if (cfg.search) {
    // Pick LR x lambda on a prefix: lowest mean KL among settings that use
    // at least 90% of the box on average.
    const std::size_t m = std::min(cfg.search_examples, data.size());
    double best_kl = std::numeric_limits<double>::infinity();
    std::optional<std::pair<double, double>> pick;
    for (double lr : cfg.lr_grid)
      for (double lambda : cfg.lambda_grid) {
        FriendlyConfig c = cfg;
        c.search = false;
        c.lr = lr;
        c.lambda = lambda;
        FriendlyStats st;
        Dataset head = data;
        std::vector<std::size_t> idx(m);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        head.images = data.batch(idx);
        head.labels.assign(data.labels.begin(), data.labels.begin() + std::ptrdiff_t(m));
        PoisonSet sub;
        const PoisonSet* sub_ptr = nullptr;
        if (poisons && poisons->size()) {
          sub.xi = poisons->xi;
          std::vector<float> rows;
          for (std::size_t p = 0; p < poisons->size(); ++p)
            if (poisons->indices[p] < m) {
              sub.indices.push_back(poisons->indices[p]);
              rows.insert(rows.end(), poisons->delta(p), poisons->delta(p) + poisons->example_size());
            }
          if (!sub.indices.empty()) {
            sub.deltas = Tensor<float>({sub.indices.size(), data.channels(), data.height(), data.width()}, rows);
            sub_ptr = &sub;
          }
        }
        generate_friendly_noise(model, head, c, sub_ptr, &st);
        const bool large = st.mean_linf >= 0.9 * double(cfg.bound());
        if (large && st.mean_kl < best_kl) {
          best_kl = st.mean_kl;
          pick = {lr, lambda};
        }
      }
    if (pick) {
      cfg.lr = pick->first;
      cfg.lambda = pick->second;
    }
    cfg.search = false;
  }

  FriendlyNoiseSet out;
  out.zeta = cfg.zeta;
  out.meta.lambda = cfg.lambda;
  out.meta.norm = to_string(cfg.norm);
  out.meta.steps = cfg.steps;
  out.meta.lr = cfg.lr;
  out.meta.batch = cfg.batch;
  out.meta.source_arch = to_string(model.spec().arch);
  out.meta.seed = cfg.seed;
  out.eps = Tensor<float>({data.size(), data.channels(), data.height(), data.width()});
  FriendlyStats st;
  const std::size_t n = data.image_size();
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < data.size(); start += cfg.batch) {
    const std::span<const std::size_t> ids(idx.data() + start, std::min(cfg.batch, data.size() - start));
    const auto res = optimize_friendly_batch(model, defended_inputs(data, ids, poisons), ids, cfg);
    std::copy_n(res.eps.data(), res.eps.size(), out.eps.data() + start * n);
    st.failures += res.failures;
    for (std::size_t r = 0; r < ids.size(); ++r) {
      st.mean_kl += res.kl[r];
      st.worsened += res.final[r] > res.initial[r];
    }
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    float m = 0;
    for (std::size_t k = 0; k < n; ++k) m = std::max(m, std::abs(out.eps[i * n + k]));
    st.mean_linf += m;
  }
  st.mean_kl /= double(data.size());
  st.mean_linf /= double(data.size());
  out.failures = st.failures;
  if (stats) *stats = st;
  return out;
}

struct DefenseSchedule {
  int def_epoch = 5;
  bool random_from_start = true;
  bool transfer = false;  // generate at epoch 0 from a pretrained model, then retrain the head only

  void validate(int epochs) const {
    if (def_epoch < 0 || (epochs > 0 && def_epoch >= epochs))
      throw ValueError("def_epoch must lie in [0, epochs)");
  }
};

struct DefenseConfig {
  bool friendly = true;
  FriendlyConfig noise;
  NoiseSpec random;
  DefenseSchedule schedule;
  const FriendlyNoiseSet* external = nullptr;  // use this noise instead of generating (architecture transfer)
};

/// A defense that adds nothing: no friendly noise, mu = 0.
inline DefenseConfig no_defense() {
  DefenseConfig d;
  d.friendly = false;
  d.random.mu = 0;
  return d;
}

struct TrainReport {
  std::vector<double> epoch_loss;
  std::optional<FriendlyNoiseSet> noise;  // friendly noise used from def_epoch on
  FriendlyStats noise_stats;
  double noise_seconds = 0;
  double train_seconds = 0;
  std::optional<double> test_accuracy;
  std::optional<bool> poison_success;
};

/// Defended (or, with no_defense(), plain) training: random noise only before
/// def_epoch, friendly noise generated once at def_epoch, both afterwards.
template <typename T>
TrainReport train_with_friends(const Dataset& train, Model<T>& model, const PoisonSet* poisons,
                               const DefenseConfig& def, const TrainConfig& cfg, const Dataset* test = nullptr,
                               const TargetSpec* target = nullptr) {
  using clock = std::chrono::steady_clock;
  const int def_epoch = def.schedule.transfer ? 0 : def.schedule.def_epoch;
  if (def.friendly && !def.schedule.transfer) def.schedule.validate(cfg.epochs);
  if (def.external && (def.external->size() != train.size() || def.external->example_size() != train.image_size()))
    throw ShapeError("supplied friendly noise does not align with the training set");
  def.random.validate();
  TrainReport rep;
  Sgd<T> opt(cfg.sgd);
  const bool use_random = def.random.active();
  const bool use_friendly = def.friendly && (def.external || def.noise.zeta > 0);

  auto generate = [&] {
    const auto t0 = clock::now();
    if (def.external) {
      rep.noise = *def.external;
    } else {
      FriendlyConfig fc = def.noise;
      rep.noise = generate_friendly_noise(model, train, fc, poisons, &rep.noise_stats);
    }
    rep.noise_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  };

  if (def.schedule.transfer) {
    if (use_friendly) generate();
    model.reinit_head(derive_seed(cfg.seed, {stream::init, 7}));
  }
  const auto t0 = clock::now();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (!def.schedule.transfer && use_friendly && epoch == def_epoch) {
      const auto pause = clock::now();
      generate();
      rep.train_seconds -= std::chrono::duration<double>(clock::now() - pause).count();
    }
    EpochInputs in;
    in.poisons = poisons;
    if (use_random && (def.schedule.random_from_start || epoch >= def_epoch)) in.noise = &def.random;
    if (rep.noise && epoch >= def_epoch) in.friendly = &*rep.noise;
    rep.epoch_loss.push_back(train_epoch(model, opt, train, epoch, cfg, in));
  }
  rep.train_seconds += std::chrono::duration<double>(clock::now() - t0).count();
  if (test) {
    const auto pred = predict(model, test->images);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == test->labels[i];
    rep.test_accuracy = double(ok) / double(pred.size());
  }
  if (target) rep.poison_success = predict(model, target->image)[0] == target->adv_label;
  return rep;
}

}  // namespace plab
