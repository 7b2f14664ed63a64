#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>

#include <sys/wait.h>

#include "plab/pipeline.hpp"
#include "support.hpp"

using namespace plab;
using plab::testing::scratch_dir;

namespace {

ExperimentConfig from_text(const std::string& text) {
  ExperimentConfig c;
  apply_config_text(c, text);
  c.validate();
  return c;
}

std::size_t error_line(const std::string& text) {
  try {
    from_text(text);
  } catch (const ConfigError& e) {
    return e.line();
  }
  return 0;
}

std::string error_text(const std::string& text) {
  try {
    from_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// Small but complete pipeline settings.
ExperimentConfig tiny(const std::filesystem::path& out, std::uint64_t seed = 3) {
  ExperimentConfig c;
  apply_config_text(c, R"(
seed = )" + std::to_string(seed) + R"(
data.classes = 4
data.per_class = 30
data.test_per_class = 8
train.epochs = 3
train.milestones = 2
attack.steps = 6
attack.restarts = 1
attack.budget = 0.05
defense.def_epoch = 1
defense.steps = 3
probe.steps = 1
probe.samples = 3
)");
  c.set("output", out.string());
  c.validate();
  return c;
}

std::map<std::string, std::string> snapshot(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      const auto rel = std::filesystem::relative(e.path(), dir).string();
      if (rel.rfind("timing", 0) != 0) out[rel] = io::read_file(e.path());
    }
  return out;
}

void run_chain(const ExperimentConfig& base) {
  for (const char* cmd : {"synth", "craft", "gen-noise"}) run_pipeline(cmd, base);
  ExperimentConfig c = base;
  c.set("defense.kind", "friends");
  run_pipeline("train", c);
  run_pipeline("eval", c);
  run_pipeline("probe", c);
}

}  // namespace

// ---------------------------------------------------------------------------
// Parsing

TEST(Config, EmptyFileGivesDefaults) {
  const auto c = from_text("");
  EXPECT_EQ(c.integer("defense.zeta"), 16);
  EXPECT_EQ(c.integer("defense.mu"), 16);
  EXPECT_EQ(c.integer("attack.xi"), 16);
  EXPECT_EQ(c.real("attack.budget"), 0.01);
  EXPECT_EQ(c.integer("defense.def_epoch"), 5);
  EXPECT_EQ(c.text("defense.noise"), "bernoulli");
  EXPECT_EQ(c.real("defense.lambda"), 1.0);
  EXPECT_EQ(c.text("defense.norm"), "l2");
  const std::string echo = c.echo();
  for (const char* line : {"defense.zeta = 16\n", "defense.mu = 16\n", "attack.xi = 16\n", "attack.budget = 0.01\n",
                           "defense.def_epoch = 5\n", "defense.noise = bernoulli\n", "defense.lambda = 1\n",
                           "defense.norm = l2\n"})
    EXPECT_NE(echo.find(line), std::string::npos) << line;
  // The echo reads back to the same settings.
  EXPECT_EQ(from_text(echo).echo(), echo);
}

TEST(Config, DefaultsFeedTheModules) {
  const auto c = from_text("");
  const auto d = defense_components(c);
  EXPECT_EQ(d.noise.zeta, 16);
  EXPECT_EQ(d.random.mu, 16);
  EXPECT_EQ(d.random.dist, NoiseDist::bernoulli);
  EXPECT_EQ(d.schedule.def_epoch, 5);
  EXPECT_EQ(d.noise.norm, NoiseNorm::l2);
  const auto a = attack_config(c);
  EXPECT_EQ(a.xi, 16);
  EXPECT_EQ(a.budget, 0.01);
  EXPECT_EQ(a.steps, 250);
  EXPECT_EQ(a.restarts, 4);
  const auto t = train_config(c);
  EXPECT_EQ(t.epochs, 20);
  EXPECT_EQ(t.sgd.schedule.milestones, (std::vector<int>{8, 13, 17}));
  EXPECT_FALSE(defense_config(c).friendly);  // defense.kind defaults to none
  EXPECT_EQ(defense_config(c).random.mu, 0);
}

TEST(Config, RangeErrorsCarryTheirLine) {
  EXPECT_EQ(error_line("seed = 2\n\n# comment\ndefense.mu = -1\n"), 4u);
  EXPECT_NE(error_text("defense.mu = -1").find("out of range"), std::string::npos);
  EXPECT_EQ(error_line("attack.budget = 0.9"), 1u);
  EXPECT_EQ(error_line("attack.xi = 300"), 1u);
}

TEST(Config, DistinctMessagesForUnknownTypeAndRange) {
  const auto unknown = error_text("seed = 1\ndefense.bogus = 3");
  const auto type = error_text("train.epochs = ten");
  const auto range = error_text("train.epochs = -2");
  EXPECT_NE(unknown.find("line 2: unknown key 'defense.bogus'"), std::string::npos) << unknown;
  EXPECT_EQ(error_line("x = 1\ndefense.bogus = 3"), 1u);  // 'x' is unknown too and comes first
  EXPECT_NE(type.find("type error"), std::string::npos) << type;
  EXPECT_NE(range.find("out of range"), std::string::npos) << range;
  EXPECT_NE(error_text("defense.noise = cauchy").find("type error"), std::string::npos);
  EXPECT_NE(error_text("train.augment = maybe").find("type error"), std::string::npos);
  EXPECT_NE(error_text("model.conv = 4,x").find("type error"), std::string::npos);
  EXPECT_EQ(error_line("no equals sign here"), 1u);
}

TEST(Config, CommentsAndWhitespace) {
  const auto c = from_text("  # full-line comment\n\tattack.xi=8   # trailing\n\nmodel.conv = 4 , 6\n");
  EXPECT_EQ(c.integer("attack.xi"), 8);
  EXPECT_EQ(c.text("model.conv"), "4,6");
}

TEST(Config, FlagsOverrideFileValues) {
  const auto dir = scratch_dir();
  std::ofstream(dir / "c.cfg") << "defense.noise = bernoulli\nattack.xi = 8\n";
  const auto c = parse_config(dir / "c.cfg", {{"defense.noise", "gaussian"}});
  EXPECT_EQ(c.text("defense.noise"), "gaussian");
  EXPECT_EQ(c.integer("attack.xi"), 8);
  EXPECT_THROW(parse_config(dir / "c.cfg", {{"defense.nope", "1"}}), ConfigError);
  EXPECT_THROW(parse_config(dir / "missing.cfg"), ConfigError);
}

TEST(Config, CrossKeyChecks) {
  EXPECT_THROW(from_text("defense.kind = friends\ntrain.epochs = 5"), ConfigError);
  EXPECT_NO_THROW(from_text("defense.kind = noise-only\ntrain.epochs = 5"));
  EXPECT_THROW(from_text("data.source = idx"), ConfigError);
  EXPECT_THROW(from_text("model.conv = 4"), ConfigError);
  EXPECT_THROW(from_text("data.bg_low = 0.5\ndata.bg_high = 0.2"), ConfigError);
}

// ---------------------------------------------------------------------------
// Pipeline

TEST(Pipeline, ChainProducesReports) {
  const auto dir = scratch_dir();
  const auto c = tiny(dir / "run");
  run_chain(c);
  const Layout out{dir / "run"};
  for (const auto& p : {out.surrogate(), out.poisons(), out.friendly(), out.model(), out.train_noise(),
                        out.report("eval"), out.report("probe"), out.probe("matching.txt"), out.probe("train.pgm"),
                        out.probe("train-overlay.txt"), out.timing("train")})
    EXPECT_TRUE(std::filesystem::exists(p)) << p;
  for (const auto& cmd : pipeline_commands()) {
    ASSERT_TRUE(std::filesystem::exists(out.config_echo(cmd))) << cmd;
    // The sidecar alone reproduces the settings.
    const auto echo = io::read_file(out.config_echo(cmd));
    EXPECT_EQ(from_text(echo).echo(), echo);
  }
  const auto r = Report::parse(io::read_file(out.report("eval")));
  ASSERT_TRUE(r.get("test_accuracy"));
  ASSERT_TRUE(r.get("poison_success_rate"));
  const double acc = std::stod(*r.get("test_accuracy"));
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_EQ(*r.get("poisoned"), "true");
  EXPECT_FALSE(r.get("seconds.eval"));  // timing lives in its own file

  const auto p = load_poisons(out.poisons());
  EXPECT_EQ(p.size(), 6u);  // 5% of 120
  EXPECT_TRUE(p.within_bound());
  EXPECT_TRUE(load_friendly(out.friendly()).within_bound());
  EXPECT_TRUE(load_friendly(out.train_noise()).within_bound());
}

TEST(Pipeline, RerunIsByteIdentical) {
  const auto dir = scratch_dir();
  run_chain(tiny(dir / "a"));
  const auto first = snapshot(dir / "a");
  run_chain(tiny(dir / "a"));
  EXPECT_EQ(snapshot(dir / "a"), first);
  // A different output directory with the same settings gives the same bytes too.
  run_chain(tiny(dir / "b"));
  auto second = snapshot(dir / "b");
  auto strip = [](std::map<std::string, std::string> m) {
    for (auto it = m.begin(); it != m.end();)
      it = it->first.size() > 7 && it->first.substr(it->first.size() - 7) == ".config" ? m.erase(it) : std::next(it);
    return m;
  };
  EXPECT_EQ(strip(second), strip(first));
  run_chain(tiny(dir / "c", 4));
  EXPECT_NE(snapshot(dir / "c").at("model.plab"), first.at("model.plab"));
}

TEST(Pipeline, UndefendedTrainingUsesPresentPoisons) {
  const auto dir = scratch_dir();
  auto c = tiny(dir / "run");
  run_pipeline("synth", c);
  run_pipeline("train", c);
  const auto clean_model = io::read_file(dir / "run" / "model.plab");
  EXPECT_EQ(*Report::parse(io::read_file(dir / "run" / "train.report")).get("poisoned"), "false");
  run_pipeline("craft", c);
  run_pipeline("train", c);
  EXPECT_EQ(*Report::parse(io::read_file(dir / "run" / "train.report")).get("poisoned"), "true");
  EXPECT_NE(io::read_file(dir / "run" / "model.plab"), clean_model);
  EXPECT_FALSE(std::filesystem::exists(dir / "run" / "train-noise.fnds"));
}

TEST(Pipeline, InputsAreNotMutated) {
  const auto dir = scratch_dir();
  const auto c = tiny(dir / "run");
  run_pipeline("synth", c);
  run_pipeline("craft", c);
  const auto before = snapshot(dir / "run" / "data");
  const auto poisons = io::read_file(dir / "run" / "poisons.pset");
  auto d = c;
  d.set("defense.kind", "friends");
  run_pipeline("train", d);
  run_pipeline("probe", d);
  EXPECT_EQ(snapshot(dir / "run" / "data"), before);
  EXPECT_EQ(io::read_file(dir / "run" / "poisons.pset"), poisons);
}

TEST(Pipeline, MissingArtifactsNameTheFile) {
  const auto dir = scratch_dir();
  const auto c = tiny(dir / "run");
  try {
    run_pipeline("train", c);
    FAIL() << "expected a dependency error";
  } catch (const DependencyError& e) {
    EXPECT_NE(std::string(e.what()).find("train-images.idx"), std::string::npos) << e.what();
  }
  run_pipeline("synth", c);
  try {
    run_pipeline("eval", c);
    FAIL() << "expected a dependency error";
  } catch (const DependencyError& e) {
    EXPECT_NE(std::string(e.what()).find("model.plab"), std::string::npos) << e.what();
  }
  std::ostringstream err;
  EXPECT_EQ(run_command("probe", c, err), exit_dependency);
  EXPECT_NE(err.str().find("dependency error"), std::string::npos);
  EXPECT_THROW(run_pipeline("explode", c), ConfigError);
}

TEST(Pipeline, TruncatedArtifactIsAFormatError) {
  const auto dir = scratch_dir();
  const auto c = tiny(dir / "run");
  run_pipeline("synth", c);
  run_pipeline("train", c);
  const auto model = dir / "run" / "model.plab";
  const auto bytes = io::read_file(model);
  io::write_file(model, bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(run_pipeline("eval", c), FormatError);
  std::ostringstream err;
  EXPECT_EQ(run_command("eval", c, err), exit_dependency);
  EXPECT_FALSE(std::filesystem::exists(dir / "run" / "eval.report"));  // no partial report
}

TEST(Pipeline, OutputRootFromEnvironment) {
  const auto dir = scratch_dir();
  auto c = tiny("relative-run");
  ::setenv(kOutputRootEnv, dir.c_str(), 1);
  run_pipeline("synth", c);
  ::unsetenv(kOutputRootEnv);
  EXPECT_TRUE(std::filesystem::exists(dir / "relative-run" / "data" / "train-images.idx"));
  EXPECT_EQ(output_dir(tiny(dir / "abs")), dir / "abs");
}

TEST(Pipeline, SynthNeedsSyntheticSource) {
  const auto dir = scratch_dir();
  auto c = tiny(dir / "run");
  c.set("data.source", "idx");
  c.set("data.train_images", (dir / "x").string());
  c.set("data.train_labels", (dir / "y").string());
  c.set("data.test_images", (dir / "x").string());
  c.set("data.test_labels", (dir / "y").string());
  std::ostringstream err;
  EXPECT_EQ(run_command("synth", c, err), exit_config);
  EXPECT_EQ(run_command("train", c, err), exit_dependency);
}

TEST(Pipeline, ExternalIdxData) {
  const auto dir = scratch_dir();
  SynthConfig sc;
  sc.classes = 3;
  sc.per_class = 20;
  sc.test_per_class = 5;
  const auto d = gen_synthetic(sc);
  save_idx(dir / "tr-x", dir / "tr-y", d.train);
  save_idx(dir / "te-x", dir / "te-y", d.test);
  auto c = tiny(dir / "run");
  c.set("data.source", "idx");
  c.set("data.train_images", (dir / "tr-x").string());
  c.set("data.train_labels", (dir / "tr-y").string());
  c.set("data.test_images", (dir / "te-x").string());
  c.set("data.test_labels", (dir / "te-y").string());
  c.validate();
  run_pipeline("train", c);
  run_pipeline("eval", c);
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "eval.report"));
}

// Noise generated by an mlp feeds a smallconv victim through the noise file.
TEST(Pipeline, TransferredNoiseFile) {
  const auto dir = scratch_dir();
  auto src = tiny(dir / "mlp");
  src.set("model.arch", "mlp");
  src.set("model.hidden", "16");
  run_pipeline("synth", src);
  run_pipeline("gen-noise", src);
  const auto noise = load_friendly(dir / "mlp" / "friendly.fnds");
  EXPECT_EQ(noise.meta.source_arch, "mlp");
  auto victim = tiny(dir / "mlp");
  victim.set("defense.kind", "friends");
  victim.set("defense.noise_file", (dir / "mlp" / "friendly.fnds").string());
  run_pipeline("train", victim);
  EXPECT_EQ(io::read_file(dir / "mlp" / "train-noise.fnds"), encode_friendly(noise));
}

// ---------------------------------------------------------------------------
// Binary

#ifdef PLAB_CLI_PATH
TEST(Binary, ExitCodes) {
  const auto dir = scratch_dir();
  const std::string cli = PLAB_CLI_PATH;
  auto run = [&](const std::string& args) {
    const int status = std::system((cli + " " + args + " > " + (dir / "out.txt").string() + " 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  std::ofstream(dir / "bad.cfg") << "seed = 1\ndefense.mu = -1\n";
  EXPECT_EQ(run("train -c " + (dir / "bad.cfg").string()), 1);
  EXPECT_NE(io::read_file(dir / "out.txt").find("line 2"), std::string::npos);
  EXPECT_EQ(run("eval --output " + (dir / "nothing").string()), 2);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("train --train.epochs=abc"), 1);
  EXPECT_EQ(run("train --defense.noise=gaussian --defense friends --print-config"), 0);
  const auto echo = io::read_file(dir / "out.txt");
  EXPECT_NE(echo.find("defense.noise = gaussian"), std::string::npos);
  EXPECT_NE(echo.find("defense.kind = friends"), std::string::npos);
}
#endif
