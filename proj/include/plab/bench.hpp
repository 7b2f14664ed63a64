#pragma once

// Paired poisoning benchmark: per seed one dataset and one crafting
// surrogate, per target one poison set, then one victim per defense condition
// trained from the same initialization.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "plab/attack.hpp"
#include "plab/data.hpp"
#include "plab/defense.hpp"
#include "plab/eval.hpp"
#include "plab/nn.hpp"
#include "plab/train.hpp"

namespace plab {

enum class Condition {
  undefended,
  friends,             // friendly noise plus random noise
  noise_only,          // random noise alone, at the combined magnitude of the two components
  friendly_only,       // friendly noise alone
  transfer_mlp,        // friends, with the friendly noise generated on an mlp
  adaptive_bernoulli,  // friends against poisons crafted through Bernoulli noise
  adaptive_friendly,   // friends against poisons crafted through the surrogate's friendly noise
};

inline std::string to_string(Condition c) {
  switch (c) {
    case Condition::undefended: return "undefended";
    case Condition::friends: return "friends";
    case Condition::noise_only: return "noise-only";
    case Condition::friendly_only: return "friendly-only";
    case Condition::transfer_mlp: return "transfer-mlp";
    case Condition::adaptive_bernoulli: return "adaptive-bernoulli";
    case Condition::adaptive_friendly: return "adaptive-friendly";
  }
  return "?";
}

/// Friends with its default components: friendly zeta=16 and Bernoulli mu=16.
inline DefenseConfig friends_defense() { return DefenseConfig{}; }

/// Random noise alone with magnitude zeta + mu of `friends`.
inline DefenseConfig noise_only_defense(const DefenseConfig& friends) {
  DefenseConfig d = friends;
  d.friendly = false;
  d.random.mu = friends.random.mu + friends.noise.zeta;
  return d;
}

inline DefenseConfig friendly_only_defense(const DefenseConfig& friends) {
  DefenseConfig d = friends;
  d.random.mu = 0;
  return d;
}

/// The random part of a defense, as an attacker folding it into crafting would sample it.
inline NoiseSpec attacker_noise(const DefenseConfig& d, std::uint64_t seed) {
  NoiseSpec s = d.random;
  s.seed = derive_seed(seed, {stream::craft, 77});
  return s;
}

struct BenchConfig {
  std::size_t seeds = 8;
  std::size_t targets = 8;
  std::uint64_t base_seed = 0;
  SynthConfig synth;
  ModelSpec victim;  // smallconv by default
  ModelSpec source;  // architecture the transferred friendly noise comes from
  TrainConfig train;
  AttackConfig attack;
  DefenseConfig defense = friends_defense();
  std::vector<Condition> conditions{Condition::undefended, Condition::friends};

  BenchConfig() {
    source.arch = Arch::mlp;
    source.hidden = {128};
  }
};

/// Everything shared by the targets of one seed.
struct SeedContext {
  std::uint64_t seed = 0;
  SplitDataset data;
  Model<float> surrogate;
  std::vector<TargetSpec> targets;
  double surrogate_accuracy = 0;
  std::optional<FriendlyNoiseSet> surrogate_noise;  // for friendly-aware crafting
};

struct BenchRun {
  std::uint64_t seed = 0;
  std::size_t target = 0;  // test index
  Condition condition = Condition::undefended;
  bool success = false;
  double target_margin = 0;  // true-label logit minus adversarial logit at the target
  double test_accuracy = 0;
  double craft_seconds = 0;
  double noise_seconds = 0;
  double train_seconds = 0;
  bool bounds_ok = true;  // stored deltas and friendly noise respect their bounds
};

inline ModelSpec spec_for(ModelSpec spec, const Dataset& train) {
  spec.channels = train.channels();
  spec.height = train.height();
  spec.width = train.width();
  spec.classes = train.classes;
  spec.mean = train.mean;
  spec.stddev = train.stddev;
  return spec;
}

inline std::uint64_t seed_for(const BenchConfig& cfg, std::size_t s) { return derive_seed(cfg.base_seed, {100, s}); }

/// Data, clean surrogate and targets for seed slot `s`.
inline SeedContext prepare_seed(const BenchConfig& cfg, std::size_t s, bool need_surrogate_noise = false) {
  const std::uint64_t seed = seed_for(cfg, s);
  SynthConfig sc = cfg.synth;
  sc.seed = seed;
  auto data = gen_synthetic(sc);
  Model<float> surrogate(spec_for(cfg.victim, data.train), derive_seed(seed, {stream::init, 1}));
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, {stream::shuffle, 1});
  train_with_friends(data.train, surrogate, nullptr, no_defense(), tc);
  SeedContext ctx{seed, std::move(data), std::move(surrogate), {}, 0, std::nullopt};
  ctx.surrogate_accuracy = test_accuracy(ctx.surrogate, ctx.data.test);
  ctx.targets = draw_targets(ctx.data.test, cfg.targets, seed);
  if (need_surrogate_noise) {
    FriendlyConfig fc = cfg.defense.noise;
    fc.seed = derive_seed(seed, {stream::friendly_init, 1});
    ctx.surrogate_noise = generate_friendly_noise(ctx.surrogate, ctx.data.train, fc);
  }
  return ctx;
}

inline AttackConfig attack_for(const BenchConfig& cfg, const SeedContext& ctx, const TargetSpec& t) {
  AttackConfig ac = cfg.attack;
  ac.seed = derive_seed(ctx.seed, {stream::craft, t.index});
  return ac;
}

/// Poisons for `t`, optionally crafted through defense noise.
inline PoisonSet craft_for(const BenchConfig& cfg, const SeedContext& ctx, const TargetSpec& t,
                           Condition c = Condition::undefended) {
  const AttackConfig ac = attack_for(cfg, ctx, t);
  AdaptiveNoise adaptive;
  NoiseSpec random;
  if (c == Condition::adaptive_bernoulli) {
    random = attacker_noise(cfg.defense, ac.seed);
    adaptive.random = &random;
  } else if (c == Condition::adaptive_friendly) {
    if (!ctx.surrogate_noise) throw ValueError("friendly-aware crafting needs the surrogate's friendly noise");
    adaptive.friendly = &*ctx.surrogate_noise;
  }
  return craft(ctx.surrogate, ctx.data.train, ctx.data.test, t, ac, adaptive);
}

struct VictimRun {
  Model<float> model;
  TrainReport report;
};

inline TrainConfig victim_train_config(const BenchConfig& cfg, const SeedContext& ctx, const TargetSpec& t) {
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(ctx.seed, {stream::shuffle, 2, t.index});
  return tc;
}

/// Friendly noise made by a `source` model trained, like the victim, up to def_epoch.
inline FriendlyNoiseSet source_noise(const ModelSpec& source, const Dataset& train, const PoisonSet* poisons,
                                     const DefenseConfig& def, const TrainConfig& tc, std::uint64_t init_seed) {
  Model<float> src(spec_for(source, train), init_seed);
  DefenseConfig warm = def;
  warm.friendly = false;
  TrainConfig short_tc = tc;
  short_tc.epochs = def.schedule.def_epoch;
  train_with_friends(train, src, poisons, warm, short_tc);
  return generate_friendly_noise(src, train, def.noise, poisons);
}

/// Victims trained on `poisons` with and without noise transferred from
/// `source`: {undefended, defended with transferred noise}.
inline std::pair<VictimRun, VictimRun> transferability_run(const ModelSpec& source, const ModelSpec& victim,
                                                           const Dataset& train, const Dataset& test,
                                                           const PoisonSet& poisons, const TargetSpec& target,
                                                           const DefenseConfig& def, const TrainConfig& tc,
                                                           std::uint64_t init_seed) {
  const ModelSpec vs = spec_for(victim, train);
  const ModelSpec ss = spec_for(source, train);
  if (ss.input_size() != vs.input_size()) throw ShapeError("source and victim disagree on the input shape");
  VictimRun plain{Model<float>(vs, init_seed), {}};
  plain.report = train_with_friends(train, plain.model, &poisons, no_defense(), tc, &test, &target);
  const FriendlyNoiseSet noise = source_noise(source, train, &poisons, def, tc, init_seed);
  DefenseConfig d = def;
  d.external = &noise;
  VictimRun defended{Model<float>(vs, init_seed), {}};
  defended.report = train_with_friends(train, defended.model, &poisons, d, tc, &test, &target);
  return {std::move(plain), std::move(defended)};
}

/// One victim for `t` under condition `c`. Adaptive conditions expect their own poisons.
inline VictimRun victim_run(const BenchConfig& cfg, const SeedContext& ctx, const TargetSpec& t,
                            const PoisonSet& poisons, Condition c) {
  const TrainConfig tc = victim_train_config(cfg, ctx, t);
  const std::uint64_t init_seed = derive_seed(ctx.seed, {stream::init, 2, t.index});
  DefenseConfig def = cfg.defense;
  def.noise.seed = derive_seed(ctx.seed, {stream::friendly_init, 2, t.index});
  def.random.seed = derive_seed(ctx.seed, {stream::random_noise, t.index});
  std::optional<FriendlyNoiseSet> transferred;
  switch (c) {
    case Condition::undefended: def = no_defense(); break;
    case Condition::noise_only: def = noise_only_defense(def); break;
    case Condition::friendly_only: def = friendly_only_defense(def); break;
    case Condition::transfer_mlp:
      transferred = source_noise(cfg.source, ctx.data.train, &poisons, def, tc, init_seed);
      def.external = &*transferred;
      break;
    default: break;
  }
  VictimRun run{Model<float>(spec_for(cfg.victim, ctx.data.train), init_seed), {}};
  run.report = train_with_friends(ctx.data.train, run.model, &poisons, def, tc, &ctx.data.test, &t);
  if (transferred) run.report.noise = std::move(transferred);
  return run;
}

struct BenchResult {
  std::vector<BenchRun> runs;
  std::vector<double> surrogate_accuracy;  // per seed

  std::vector<const BenchRun*> of(Condition c) const {
    std::vector<const BenchRun*> out;
    for (const auto& r : runs)
      if (r.condition == c) out.push_back(&r);
    return out;
  }

  std::size_t successes(Condition c) const {
    std::size_t n = 0;
    for (const auto* r : of(c)) n += r->success;
    return n;
  }

  double mean_accuracy(Condition c) const {
    const auto rs = of(c);
    double s = 0;
    for (const auto* r : rs) s += r->test_accuracy;
    return rs.empty() ? 0.0 : s / double(rs.size());
  }

  /// Success count per seed, in seed order.
  std::vector<double> per_seed_successes(Condition c) const {
    std::map<std::uint64_t, double> m;
    std::vector<std::uint64_t> order;
    for (const auto* r : of(c)) {
      if (!m.count(r->seed)) order.push_back(r->seed);
      m[r->seed] += r->success;
    }
    std::vector<double> out;
    for (auto s : order) out.push_back(m[s]);
    return out;
  }

  bool bounds_ok() const {
    for (const auto& r : runs)
      if (!r.bounds_ok) return false;
    return true;
  }
};

inline double target_margin(const Model<float>& m, const TargetSpec& t) {
  GradMode off(false);
  const Tensor<float> z = m.logits(constant(t.image)).value();
  return double(z[std::size_t(t.true_label)]) - double(z[std::size_t(t.adv_label)]);
}

inline bool poisons_ok(const Dataset& train, const PoisonSet& p) {
  if (!p.within_bound()) return false;
  for (std::size_t r = 0; r < p.size(); ++r)
    for (std::size_t k = 0; k < train.image_size(); ++k) {
      const float v = train.image(p.indices[r])[k] + p.delta(r)[k];
      if (v < 0.0f || v > 1.0f) return false;
    }
  return true;
}

/// Runs every condition for every (seed, target). `progress` sees each finished run.
inline BenchResult run_benchmark(const BenchConfig& cfg, const std::function<void(const BenchRun&)>& progress = {}) {
  using clock = std::chrono::steady_clock;
  BenchResult out;
  const auto has = [&](Condition c) {
    return std::find(cfg.conditions.begin(), cfg.conditions.end(), c) != cfg.conditions.end();
  };
  for (std::size_t s = 0; s < cfg.seeds; ++s) {
    const SeedContext ctx = prepare_seed(cfg, s, has(Condition::adaptive_friendly));
    out.surrogate_accuracy.push_back(ctx.surrogate_accuracy);
    for (const auto& t : ctx.targets) {
      std::map<Condition, std::pair<PoisonSet, double>> crafted;
      auto poisons_for = [&](Condition c) -> const std::pair<PoisonSet, double>& {
        const Condition key = c == Condition::adaptive_bernoulli || c == Condition::adaptive_friendly
                                  ? c
                                  : Condition::undefended;
        auto it = crafted.find(key);
        if (it == crafted.end()) {
          const auto t0 = clock::now();
          PoisonSet p = craft_for(cfg, ctx, t, key);
          it = crafted.emplace(key, std::make_pair(std::move(p), std::chrono::duration<double>(clock::now() - t0).count()))
                   .first;
        }
        return it->second;
      };
      for (Condition c : cfg.conditions) {
        const auto& [poisons, craft_s] = poisons_for(c);
        const auto run = victim_run(cfg, ctx, t, poisons, c);
        BenchRun r;
        r.seed = ctx.seed;
        r.target = t.index;
        r.condition = c;
        r.success = *run.report.poison_success;
        r.target_margin = target_margin(run.model, t);
        r.test_accuracy = *run.report.test_accuracy;
        r.craft_seconds = craft_s;
        r.noise_seconds = run.report.noise_seconds;
        r.train_seconds = run.report.train_seconds;
        r.bounds_ok = poisons_ok(ctx.data.train, poisons) && (!run.report.noise || run.report.noise->within_bound());
        out.runs.push_back(r);
        if (progress) progress(r);
      }
    }
  }
  return out;
}

}  // namespace plab
