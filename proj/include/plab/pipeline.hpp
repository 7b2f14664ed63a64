#pragma once

// Command surface: synth, craft, gen-noise, train, eval, probe. Each command
// reads its inputs from the output directory (or the configured data files),
// writes artifacts plus a config echo there, and never touches anything else.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "plab/attack.hpp"
#include "plab/bench.hpp"
#include "plab/checkpoint.hpp"
#include "plab/config.hpp"
#include "plab/data.hpp"
#include "plab/defense.hpp"
#include "plab/errors.hpp"
#include "plab/eval.hpp"
#include "plab/perturbation.hpp"

namespace plab {

inline constexpr const char* kOutputRootEnv = "PLAB_OUTPUT_ROOT";

enum ExitCode : int { exit_ok = 0, exit_config = 1, exit_dependency = 2, exit_numeric = 3 };

inline const std::vector<std::string>& pipeline_commands() {
  static const std::vector<std::string> cmds{"synth", "craft", "gen-noise", "train", "eval", "probe"};
  return cmds;
}

/// Artifact locations under one output directory.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path data(const std::string& name) const { return root / "data" / name; }
  std::filesystem::path surrogate() const { return root / "surrogate.plab"; }
  std::filesystem::path poisons() const { return root / "poisons.pset"; }
  std::filesystem::path target() const { return root / "target.report"; }
  std::filesystem::path friendly() const { return root / "friendly.fnds"; }
  std::filesystem::path train_noise() const { return root / "train-noise.fnds"; }
  std::filesystem::path model() const { return root / "model.plab"; }
  std::filesystem::path report(const std::string& cmd) const { return root / (cmd + ".report"); }
  std::filesystem::path config_echo(const std::string& cmd) const { return root / (cmd + ".config"); }
  std::filesystem::path timing(const std::string& cmd) const { return root / "timing" / (cmd + ".report"); }
  std::filesystem::path probe(const std::string& name) const { return root / "probe" / name; }
};

/// `output` resolved against the output-root environment variable when relative.
inline std::filesystem::path output_dir(const ExperimentConfig& cfg) {
  std::filesystem::path out = cfg.text("output");
  if (out.is_relative())
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) out = std::filesystem::path(root) / out;
  return out;
}

namespace detail {

inline void require(const std::filesystem::path& p, const std::string& needed_by) {
  if (!std::filesystem::exists(p)) throw DependencyError(needed_by + " needs " + p.string() + ", which does not exist");
}

inline SplitDataset load_data(const ExperimentConfig& cfg, const Layout& out, const std::string& cmd) {
  SplitDataset d;
  const std::string src = cfg.text("data.source");
  if (src == "synthetic") {
    for (const char* f : {"train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx"})
      require(out.data(f), cmd);
    d.train = load_idx(out.data("train-images.idx"), out.data("train-labels.idx"), "train");
    d.test = load_idx(out.data("test-images.idx"), out.data("test-labels.idx"), "test");
  } else if (src == "idx") {
    for (const char* k : {"data.train_images", "data.train_labels", "data.test_images", "data.test_labels"})
      require(cfg.text(k), cmd);
    d.train = load_idx(cfg.text("data.train_images"), cfg.text("data.train_labels"), "train");
    d.test = load_idx(cfg.text("data.test_images"), cfg.text("data.test_labels"), "test");
  } else {
    require(cfg.text("data.train_images"), cmd);
    require(cfg.text("data.test_images"), cmd);
    d.train = load_cifar_bin(cfg.text("data.train_images"), "train");
    d.test = load_cifar_bin(cfg.text("data.test_images"), "test");
  }
  if (d.train.image_shape() != d.test.image_shape()) throw ShapeError("train and test images differ in shape");
  d.train.classes = d.test.classes = std::max(d.train.classes, d.test.classes);
  d.test.mean = d.train.mean;
  d.test.stddev = d.train.stddev;
  return d;
}

inline TargetSpec config_target(const ExperimentConfig& cfg, const SplitDataset& d) {
  const auto idx = cfg.integer("attack.target");
  const std::uint64_t seed = derive_seed(cfg.seed(), {stream::target});
  TargetSpec t = idx >= 0 ? make_target(d.test, std::size_t(idx), seed) : draw_targets(d.test, 1, seed)[0];
  if (cfg.text("attack.kind") == "backdoor-patch")
    t.trigger = TriggerPatch::lower_right(d.train.channels(), d.train.height(), d.train.width(),
                                          std::size_t(cfg.integer("attack.trigger_size")));
  return t;
}

inline void save_target(const std::filesystem::path& path, const TargetSpec& t) {
  Report r;
  r.set("index", t.index);
  r.set("true_label", t.true_label);
  r.set("adv_label", t.adv_label);
  r.set("trigger_size", t.trigger ? t.trigger->size : std::size_t{0});
  io::write_file(path, r.str());
}

/// The crafted target if craft has run, otherwise the configured one.
inline TargetSpec current_target(const ExperimentConfig& cfg, const SplitDataset& d, const Layout& out) {
  TargetSpec t = config_target(cfg, d);
  if (!std::filesystem::exists(out.target())) return t;
  const Report r = Report::parse(io::read_file(out.target()));
  const auto index = r.get("index"), adv = r.get("adv_label");
  if (!index || !adv) throw FormatError(FormatError::Kind::bad_value, out.target().string() + ": missing fields");
  const std::size_t i = std::stoul(*index);
  if (i >= d.test.size()) throw ShapeError(out.target().string() + ": target index beyond the test split");
  TargetSpec from_file = make_target(d.test, i, 0);
  from_file.adv_label = std::stoi(*adv);
  from_file.trigger = t.trigger;
  from_file.validate();
  return from_file;
}

inline std::optional<PoisonSet> maybe_poisons(const Layout& out, const Dataset& train) {
  if (!std::filesystem::exists(out.poisons())) return std::nullopt;
  PoisonSet p = load_poisons(out.poisons());
  if (p.size() && (p.indices.back() >= train.size() || p.example_size() != train.image_size()))
    throw ShapeError(out.poisons().string() + " does not match the training set");
  return p;
}

inline Model<float> trained_model(const ExperimentConfig& cfg, const Dataset& train, const PoisonSet* poisons,
                                  const DefenseConfig& def, const TrainConfig& tc, TrainReport* rep = nullptr) {
  Model<float> m(model_spec(cfg, train), derive_seed(cfg.seed(), {stream::init}));
  auto r = train_with_friends(train, m, poisons, def, tc);
  if (rep) *rep = std::move(r);
  return m;
}

inline void check_finite(const Model<float>& m, const std::string& what) {
  for (const auto& [name, v] : m.params())
    if (!v.value().all_finite()) throw NumericError(what + ": parameter " + name + " is not finite");
}

class Timer {
 public:
  void phase(const std::string& name) {
    stop();
    current_ = name;
    start_ = std::chrono::steady_clock::now();
  }
  void stop() {
    if (current_.empty()) return;
    report_.set("seconds." + current_,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count());
    current_.clear();
  }
  const Report& report() {
    stop();
    return report_;
  }

 private:
  Report report_;
  std::string current_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

/// Runs one command; throws on failure (see run_command for exit codes).
inline void run_pipeline(const std::string& cmd, const ExperimentConfig& cfg) {
  if (std::find(pipeline_commands().begin(), pipeline_commands().end(), cmd) == pipeline_commands().end())
    throw ConfigError(0, "unknown command '" + cmd + "'");
  const Layout out{output_dir(cfg)};
  std::filesystem::create_directories(out.root);
  io::write_file(out.config_echo(cmd), cfg.echo());
  detail::Timer timer;
  Report rep;

  if (cmd == "synth") {
    if (cfg.text("data.source") != "synthetic") throw ConfigError(0, "synth needs data.source = synthetic");
    timer.phase("synth");
    const auto d = gen_synthetic(synth_config(cfg));
    save_idx(out.data("train-images.idx"), out.data("train-labels.idx"), d.train);
    save_idx(out.data("test-images.idx"), out.data("test-labels.idx"), d.test);
    rep.set("train_examples", d.train.size());
    rep.set("test_examples", d.test.size());
    rep.set("classes", d.train.classes);
  } else if (cmd == "craft") {
    const auto d = detail::load_data(cfg, out, cmd);
    const TargetSpec t = detail::config_target(cfg, d);
    timer.phase("surrogate");
    const TrainConfig tc = train_config(cfg);
    Model<float> surrogate = detail::trained_model(cfg, d.train, nullptr, no_defense(), tc);
    detail::check_finite(surrogate, "surrogate training");
    save_model(out.surrogate(), surrogate);
    timer.phase("craft");
    const DefenseConfig comp = defense_components(cfg);
    const AttackConfig ac = attack_config(cfg);
    AdaptiveNoise adaptive;
    std::optional<FriendlyNoiseSet> seen;
    NoiseSpec random;
    const auto mode = cfg.text("attack.adaptive");
    if (mode == "bernoulli") {
      random = attacker_noise(comp, ac.seed);
      random.dist = NoiseDist::bernoulli;
      adaptive.random = &random;
    } else if (mode == "friendly") {
      seen = generate_friendly_noise(surrogate, d.train, comp.noise);
      adaptive.friendly = &*seen;
    }
    const PoisonSet p = craft(surrogate, d.train, d.test, t, ac, adaptive);
    if (!std::isfinite(p.log.final_loss)) throw NumericError("crafting produced a non-finite matching loss");
    save_poisons(out.poisons(), p);
    detail::save_target(out.target(), t);
    rep.set("surrogate_accuracy", test_accuracy(surrogate, d.test));
    rep.set("target", t.index);
    rep.set("adv_label", t.adv_label);
    rep.set("poisons", p.size());
    rep.set("initial_matching_loss", p.log.initial_loss);
    rep.set("final_matching_loss", p.log.final_loss);
    rep.set("best_restart", p.log.best_restart);
    rep.set("failed_restarts", p.log.failed_restarts);
  } else if (cmd == "gen-noise") {
    const auto d = detail::load_data(cfg, out, cmd);
    const auto poisons = detail::maybe_poisons(out, d.train);
    const DefenseConfig comp = defense_components(cfg);
    timer.phase("warmup");
    TrainConfig tc = train_config(cfg);
    tc.epochs = comp.schedule.def_epoch;
    DefenseConfig warm = comp;
    warm.friendly = false;
    Model<float> m = detail::trained_model(cfg, d.train, poisons ? &*poisons : nullptr, warm, tc);
    detail::check_finite(m, "warm-up training");
    timer.phase("noise");
    FriendlyStats st;
    FriendlyNoiseSet f = generate_friendly_noise(m, d.train, comp.noise, poisons ? &*poisons : nullptr, &st);
    f.meta.warmup_epochs = comp.schedule.def_epoch;
    if (f.failures == d.train.size()) throw NumericError("friendly noise diverged on every example");
    save_friendly(out.friendly(), f);
    rep.set("source_arch", f.meta.source_arch);
    rep.set("poisoned", bool(poisons));
    rep.set("mean_kl", st.mean_kl);
    rep.set("mean_linf", st.mean_linf);
    rep.set("failures", st.failures);
    rep.set("worsened", st.worsened);
  } else if (cmd == "train") {
    const auto d = detail::load_data(cfg, out, cmd);
    const auto poisons = detail::maybe_poisons(out, d.train);
    DefenseConfig def = defense_config(cfg);
    std::optional<FriendlyNoiseSet> external;
    if (!cfg.text("defense.noise_file").empty() && def.friendly) {
      detail::require(cfg.text("defense.noise_file"), cmd);
      external = load_friendly(cfg.text("defense.noise_file"));
      def.external = &*external;
    }
    timer.phase("train");
    TrainReport tr;
    const TrainConfig tc = train_config(cfg);
    Model<float> m = detail::trained_model(cfg, d.train, poisons ? &*poisons : nullptr, def, tc, &tr);
    detail::check_finite(m, "training");
    save_model(out.model(), m);
    if (tr.noise) save_friendly(out.train_noise(), *tr.noise);
    rep.set("defense", cfg.text("defense.kind"));
    rep.set("poisoned", bool(poisons));
    rep.set("epochs", tr.epoch_loss.size());
    for (std::size_t e = 0; e < tr.epoch_loss.size(); ++e) rep.set("epoch." + std::to_string(e) + ".loss", tr.epoch_loss[e]);
    if (tr.noise) {
      rep.set("noise.mean_kl", tr.noise_stats.mean_kl);
      rep.set("noise.mean_linf", tr.noise_stats.mean_linf);
      rep.set("noise.failures", tr.noise->failures);
    }
    timer.report();
    Report t;
    t.set("seconds.noise", tr.noise_seconds);
    t.set("seconds.train", tr.train_seconds);
    io::write_file(out.timing(cmd), t.str());
    io::write_file(out.report(cmd), rep.str());
    return;
  } else if (cmd == "eval") {
    const auto d = detail::load_data(cfg, out, cmd);
    detail::require(out.model(), cmd);
    timer.phase("eval");
    Model<float> m(model_spec(cfg, d.train), 0);
    load_model(out.model(), m);
    const TargetSpec t = detail::current_target(cfg, d, out);
    EvalReport e;
    e.seed = cfg.seed();
    e.test_accuracy = test_accuracy(m, d.test);
    e.target_indices = {t.index};
    e.successes = {poison_success(m, t)};
    if (t.trigger) e.backdoor_rate = backdoor_success_rate(m, d.test, *t.trigger, t.adv_label);
    rep = e.report();
    rep.set("poisoned", std::filesystem::exists(out.poisons()));
  } else if (cmd == "probe") {
    const auto d = detail::load_data(cfg, out, cmd);
    detail::require(out.model(), cmd);
    detail::require(out.poisons(), cmd);
    timer.phase("probe");
    Model<float> mf(model_spec(cfg, d.train), 0);
    load_model(out.model(), mf);
    const Model<double> m = mf.cast<double>();
    const PoisonSet p = *detail::maybe_poisons(out, d.train);
    if (p.size() == 0) throw ValueError("probe needs at least one poison");
    const TargetSpec t = detail::current_target(cfg, d, out);
    const GridSpec gs = grid_spec(cfg);

    // Effective poisons under this model decide the default grid center.
    const int adv[1] = {t.adv_label};
    const auto per = per_poison_matching_loss(m, d.train, p, t.image, adv);
    const auto eff = effective_poisons(per);
    const auto center_cfg = cfg.integer("probe.center");
    std::size_t row = eff.empty() ? 0 : eff.front();
    if (center_cfg >= 0) {
      const auto pos = p.position(std::size_t(center_cfg));
      if (pos < 0) throw ValueError("probe.center is not a poisoned index");
      row = std::size_t(pos);
    }
    const Tensor<float> delta = detail::example(p.deltas, row).reshaped(d.train.image_shape());
    matching_loss_grid(m, d.train, p.indices[row], t, gs, &delta).save(out.probe("matching"));
    training_loss_grid(m, d.train, std::span<const std::size_t>(p.indices), &p, gs).save(out.probe("train"));

    const DefenseConfig comp = defense_components(cfg);
    std::optional<FriendlyNoiseSet> noise;
    if (std::filesystem::exists(out.train_noise())) noise = load_friendly(out.train_noise());
    else if (std::filesystem::exists(out.friendly())) noise = load_friendly(out.friendly());
    if (noise && noise->size() != d.train.size()) throw ShapeError("friendly noise does not match the training set");
    NoiseOverlay overlay{noise ? &*noise : nullptr, &comp.random, int(cfg.integer("probe.draws"))};
    training_loss_grid(m, d.train, std::span<const std::size_t>(p.indices), &p, gs, overlay)
        .save(out.probe("train-overlay"));

    // KL spread around poisons against unpoisoned examples of the same class.
    std::vector<std::size_t> clean;
    for (std::size_t i : d.train.indices_of_class(t.adv_label))
      if (p.position(i) < 0) clean.push_back(i);
    const std::size_t pairs = std::min(clean.size(), p.size());
    Tensor<float> poisoned = compose(d.train, std::span<const std::size_t>(p.indices), ComposeInputs{&p});
    Rng rng = make_rng(cfg.seed(), {stream::probe, 3});
    std::shuffle(clean.begin(), clean.end(), rng);
    clean.resize(pairs);
    std::vector<double> radii;
    for (double r : cfg.reals("probe.radii")) radii.push_back(r / 255.0);
    const int k = int(cfg.integer("probe.samples"));
    const std::uint64_t ps = derive_seed(cfg.seed(), {stream::probe, 4});
    const auto kp = kl_deviation_probe(m, poisoned, radii, k, ps);
    const auto kc = kl_deviation_probe(m, d.train.batch(clean), radii, k, ps);
    rep.set("target", t.index);
    rep.set("effective_poisons", eff.size());
    rep.set("center", p.indices[row]);
    rep.set("overlay_friendly", bool(noise));
    for (std::size_t r = 0; r < radii.size(); ++r) {
      const std::string key = "kl_std.r" + std::to_string(r);
      rep.set(key + ".radius", radii[r]);
      rep.set(key + ".poisoned", kp.mean_std(r));
      rep.set(key + ".clean", kc.mean_std(r));
      const std::vector<double> a(kp.std[r].begin(), kp.std[r].begin() + std::ptrdiff_t(pairs));
      const auto st = sign_test(a, kc.std[r]);
      rep.set(key + ".sign_wins", st.wins);
      rep.set(key + ".sign_pairs", st.wins + st.losses);
      rep.set(key + ".sign_p", st.p);
    }
  }
  io::write_file(out.report(cmd), rep.str());
  io::write_file(out.timing(cmd), timer.report().str());
}

/// run_pipeline with failures mapped to exit codes and reported on `err`.
inline int run_command(const std::string& cmd, const ExperimentConfig& cfg, std::ostream& err = std::cerr) {
  try {
    run_pipeline(cmd, cfg);
    return exit_ok;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const DependencyError& e) {
    err << "dependency error: " << e.what() << '\n';
    return exit_dependency;
  } catch (const FormatError& e) {
    err << "dependency error: " << e.what() << '\n';
    return exit_dependency;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return exit_numeric;
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return exit_config;
  }
}

}  // namespace plab
