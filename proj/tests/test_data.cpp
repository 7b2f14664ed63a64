#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>

#include "plab/data.hpp"
#include "plab/noise.hpp"
#include "plab/train.hpp"
#include "support.hpp"

using namespace plab;
using plab::testing::scratch_dir;

namespace {

SynthConfig tiny_config() {
  SynthConfig c;
  c.per_class = 20;
  c.test_per_class = 5;
  return c;
}

void write_bytes(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f.write(s.data(), std::streamsize(s.size()));
}

std::string be32(std::uint32_t v) {
  return {char(v >> 24), char((v >> 16) & 0xff), char((v >> 8) & 0xff), char(v & 0xff)};
}

FormatError::Kind format_kind(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a FormatError";
  return FormatError::Kind::bad_version;
}

Dataset small_dataset(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> byte(0, 255);
  Dataset d;
  d.classes = 4;
  d.images = Tensor<float>({n, c, h, w});
  for (float& v : d.images.values()) v = float(byte(rng)) / 255.0f;
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(int(i % 4));
  d.compute_stats();
  return d;
}

PoisonSet random_poisons(std::vector<std::size_t> idx, const Shape& example, int xi, std::uint64_t seed) {
  PoisonSet p;
  p.xi = xi;
  p.indices = std::move(idx);
  Shape shape{p.indices.size()};
  shape.insert(shape.end(), example.begin(), example.end());
  p.deltas = Tensor<float>(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-p.bound(), p.bound());
  for (float& v : p.deltas.values()) v = u(rng);
  return p;
}

std::vector<float> vals(const Tensor<float>& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic generator

TEST(Synthetic, SameSeedGivesIdenticalData) {
  const auto a = gen_synthetic(tiny_config());
  const auto b = gen_synthetic(tiny_config());
  EXPECT_EQ(vals(a.train.images), vals(b.train.images));
  EXPECT_EQ(a.train.labels, b.train.labels);
  EXPECT_EQ(vals(a.test.images), vals(b.test.images));
  auto other = tiny_config();
  other.seed = 2;
  EXPECT_NE(vals(gen_synthetic(other).train.images), vals(a.train.images));
}

TEST(Synthetic, DefaultCountsAndBalance) {
  const auto d = gen_synthetic({});
  EXPECT_EQ(d.train.size(), 5000u);
  EXPECT_EQ(d.test.size(), 1000u);
  EXPECT_EQ(d.train.image_shape(), (Shape{3, 16, 16}));
  for (int y = 0; y < 10; ++y) {
    EXPECT_EQ(d.train.indices_of_class(y).size(), 500u);
    EXPECT_EQ(d.test.indices_of_class(y).size(), 100u);
  }
}

TEST(Synthetic, PixelsAreEightBitValuesInRange) {
  const auto d = gen_synthetic(tiny_config());
  d.train.validate();
  d.test.validate();
  for (float v : d.train.images.values()) {
    const float scaled = v * 255.0f;
    ASSERT_NEAR(scaled, std::round(scaled), 1e-3f);
  }
}

TEST(Synthetic, StatsComeFromTrainSplit) {
  const auto d = gen_synthetic(tiny_config());
  EXPECT_EQ(d.test.mean, d.train.mean);
  EXPECT_EQ(d.test.stddev, d.train.stddev);
  // direct recomputation of channel 0 mean
  double s = 0;
  const std::size_t hw = 16 * 16;
  for (std::size_t i = 0; i < d.train.size(); ++i)
    for (std::size_t k = 0; k < hw; ++k) s += d.train.image(i)[k];
  EXPECT_NEAR(d.train.mean[0], s / double(d.train.size() * hw), 1e-5);
}

TEST(Synthetic, NearestCentroidSeparatesClasses) {
  const auto d = gen_synthetic({});
  const std::size_t n = d.train.image_size();
  std::vector<std::vector<double>> centroid(10, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < d.train.size(); ++i)
    for (std::size_t k = 0; k < n; ++k) centroid[d.train.labels[i]][k] += d.train.image(i)[k] / 500.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    int best = -1;
    double best_d = INFINITY;
    for (int y = 0; y < 10; ++y) {
      double dist = 0;
      for (std::size_t k = 0; k < n; ++k) dist += std::pow(d.test.image(i)[k] - centroid[y][k], 2);
      if (dist < best_d) best_d = dist, best = y;
    }
    correct += best == d.test.labels[i];
  }
  EXPECT_GT(double(correct) / double(d.test.size()), 0.60);
}

TEST(Synthetic, DegenerateSizesRejected) {
  auto c = tiny_config();
  c.classes = 1;
  EXPECT_THROW(gen_synthetic(c), ValueError);
  c = tiny_config();
  c.per_class = 0;
  EXPECT_THROW(gen_synthetic(c), ValueError);
  c = tiny_config();
  c.height = 0;
  EXPECT_THROW(gen_synthetic(c), ValueError);
  c = tiny_config();
  c.channels = 2;
  EXPECT_THROW(gen_synthetic(c), ValueError);
}

TEST(Synthetic, SmallconvLearnsDefaults) {
  const auto d = gen_synthetic({});
  ModelSpec spec;
  spec.mean = d.train.mean;
  spec.stddev = d.train.stddev;
  Model<float> m(spec, 11);
  TrainConfig cfg;
  cfg.seed = 11;
  Sgd<float> opt(cfg.sgd);
  for (int e = 0; e < cfg.epochs; ++e) train_epoch(m, opt, d.train, e, cfg, {});
  const auto pred = predict(m, d.test.images);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == d.test.labels[i];
  EXPECT_GE(double(ok) / double(pred.size()), 0.90);
}

// ---------------------------------------------------------------------------
// IDX

TEST(Idx, SingleWhitePixel) {
  const auto dir = scratch_dir();
  write_bytes(dir / "img", be32(0x803) + be32(1) + be32(1) + be32(1) + std::string(1, char(255)));
  write_bytes(dir / "lab", be32(0x801) + be32(1) + std::string(1, char(3)));
  const auto d = load_idx(dir / "img", dir / "lab");
  ASSERT_EQ(d.images.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(d.images[0], 1.0f);
  EXPECT_EQ(d.labels, std::vector<int>{3});
}

TEST(Idx, DistinctErrors) {
  const auto dir = scratch_dir();
  const std::string good_img = be32(0x803) + be32(2) + be32(2) + be32(2) + std::string(8, char(7));
  const std::string good_lab = be32(0x801) + be32(2) + std::string(2, char(1));

  write_bytes(dir / "img", be32(0x802) + good_img.substr(4));
  write_bytes(dir / "lab", good_lab);
  EXPECT_EQ(format_kind([&] { load_idx(dir / "img", dir / "lab"); }), FormatError::Kind::bad_magic);

  write_bytes(dir / "img", good_img.substr(0, good_img.size() - 1));
  EXPECT_EQ(format_kind([&] { load_idx(dir / "img", dir / "lab"); }), FormatError::Kind::truncated);

  write_bytes(dir / "img", good_img);
  write_bytes(dir / "lab", be32(0x801) + be32(3) + std::string(3, char(1)));
  EXPECT_EQ(format_kind([&] { load_idx(dir / "img", dir / "lab"); }), FormatError::Kind::count_mismatch);

  write_bytes(dir / "lab", good_lab);
  EXPECT_NO_THROW(load_idx(dir / "img", dir / "lab"));
  EXPECT_THROW(load_idx(dir / "missing", dir / "lab"), DependencyError);
}

TEST(Idx, RoundTripGrayAndColor) {
  const auto dir = scratch_dir();
  for (std::size_t c : {1u, 3u}) {
    const auto d = small_dataset(6, c, 5, 4, c);
    save_idx(dir / "img", dir / "lab", d);
    const auto back = load_idx(dir / "img", dir / "lab");
    EXPECT_EQ(back.images.shape(), d.images.shape());
    EXPECT_EQ(vals(back.images), vals(d.images));
    EXPECT_EQ(back.labels, d.labels);
  }
}

TEST(Idx, OffGridPixelsRefused) {
  const auto dir = scratch_dir();
  auto d = small_dataset(2, 1, 2, 2, 5);
  d.images[0] = 0.5f;
  EXPECT_THROW(save_idx(dir / "img", dir / "lab", d), ValueError);
}

// ---------------------------------------------------------------------------
// CIFAR binary

TEST(Cifar, ConstantRecord) {
  const auto dir = scratch_dir();
  write_bytes(dir / "b.bin", std::string(1, char(7)) + std::string(3072, char(128)));
  const auto d = load_cifar_bin(dir / "b.bin");
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.labels[0], 7);
  for (float v : d.images.values()) ASSERT_EQ(v, 128.0f / 255.0f);
}

TEST(Cifar, BadLengthAndLabel) {
  const auto dir = scratch_dir();
  write_bytes(dir / "b.bin", std::string(3074, char(1)));
  EXPECT_EQ(format_kind([&] { load_cifar_bin(dir / "b.bin"); }), FormatError::Kind::bad_length);
  write_bytes(dir / "b.bin", "");
  EXPECT_EQ(format_kind([&] { load_cifar_bin(dir / "b.bin"); }), FormatError::Kind::bad_length);
  write_bytes(dir / "b.bin", std::string(1, char(10)) + std::string(3072, char(0)));
  EXPECT_EQ(format_kind([&] { load_cifar_bin(dir / "b.bin"); }), FormatError::Kind::bad_value);
}

TEST(Cifar, RoundTrip) {
  const auto dir = scratch_dir();
  auto d = small_dataset(3, 3, 32, 32, 9);
  save_cifar_bin(dir / "b.bin", d);
  const auto back = load_cifar_bin(dir / "b.bin");
  EXPECT_EQ(vals(back.images), vals(d.images));
  EXPECT_EQ(back.labels, d.labels);
}

// ---------------------------------------------------------------------------
// Augmentation

TEST(Augment, FlipWithoutPaddingMirrorsRows) {
  const auto d = small_dataset(4, 3, 5, 6, 2);
  const auto out = augment(d.images, 1, {0, 1.0});
  const std::size_t W = 6;
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    const std::size_t x = i % W, rest = i / W;
    ASSERT_EQ(out[i], d.images[rest * W + (W - 1 - x)]);
  }
}

TEST(Augment, ZeroOffsetIsIdentity) {
  const auto d = small_dataset(3, 3, 4, 4, 3);
  std::vector<AugmentParams> none(3);
  EXPECT_EQ(vals(apply_augment(d.images, none)), vals(d.images));
}

TEST(Augment, ShiftMovesPixelsAndPadsWithZero) {
  const auto d = small_dataset(1, 1, 4, 4, 4);
  std::vector<AugmentParams> p{{1, -1, false}};
  const auto out = apply_augment(d.images, p);
  for (long y = 0; y < 4; ++y)
    for (long x = 0; x < 4; ++x) {
      const long sy = y + 1, sx = x - 1;
      const float want = sy < 4 && sx >= 0 ? d.images[std::size_t(sy * 4 + sx)] : 0.0f;
      ASSERT_EQ(out[std::size_t(y * 4 + x)], want) << y << "," << x;
    }
}

TEST(Augment, FlipRateNearHalf) {
  Rng rng = make_rng(5, {stream::augment});
  const auto p = draw_augment(10000, rng);
  std::size_t flips = 0;
  for (const auto& a : p) {
    flips += a.flip;
    ASSERT_LE(std::abs(a.dy), 2);
    ASSERT_LE(std::abs(a.dx), 2);
  }
  EXPECT_GE(flips, 4800u);
  EXPECT_LE(flips, 5200u);
}

TEST(Augment, PreservesShape) {
  const auto d = small_dataset(7, 3, 8, 8, 6);
  EXPECT_EQ(augment(d.images, 3).shape(), d.images.shape());
  EXPECT_THROW(apply_augment(d.images, std::vector<AugmentParams>(2)), ShapeError);
}

// ---------------------------------------------------------------------------
// Composition

TEST(Compose, NothingAddedIsIdentity) {
  const auto d = small_dataset(5, 3, 4, 4, 7);
  std::vector<std::size_t> idx{4, 0, 2};
  EXPECT_EQ(vals(compose(d, idx)), vals(d.batch(idx)));
}

TEST(Compose, ClampsAtOne) {
  Dataset d;
  d.classes = 2;
  d.images = Tensor<float>({1, 1, 1, 1}, {1.0f});
  d.labels = {0};
  auto p = random_poisons({0}, {1, 1, 1}, 16, 1);
  p.deltas[0] = p.bound();
  std::vector<std::size_t> idx{0};
  EXPECT_EQ(compose(d, idx, {.poisons = &p})[0], 1.0f);
}

// Property: composed values equal a scalar re-evaluation and stay in [0,1].
TEST(Compose, MatchesScalarOracle) {
  std::mt19937_64 gen(123);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 6 + gen() % 6, C = 1 + 2 * (gen() % 2), H = 3 + gen() % 4, W = 3 + gen() % 4;
    const auto d = small_dataset(n, C, H, W, gen());
    std::vector<std::size_t> pidx;
    for (std::size_t i = 0; i < n; ++i)
      if (gen() % 3 == 0) pidx.push_back(i);
    const auto p = random_poisons(pidx, {C, H, W}, 8 + int(gen() % 20), gen());

    FriendlyNoiseSet f;
    f.zeta = 16;
    f.eps = Tensor<float>({n, C, H, W});
    std::uniform_real_distribution<float> u(-f.bound(), f.bound());
    for (float& v : f.eps.values()) v = u(gen);

    std::vector<std::size_t> batch(1 + gen() % n);
    for (auto& b : batch) b = gen() % n;
    NoiseSpec ns{NoiseDist(gen() % 3), 16, gen()};
    const auto mu = sample_batch_noise(ns, {C, H, W}, 1, batch);
    Rng rng = make_rng(gen(), {stream::augment});
    const auto aug = draw_augment(batch.size(), rng);

    const auto x = compose(d, batch, {&p, &f, &mu, aug});
    ASSERT_EQ(x.shape(), (Shape{batch.size(), C, H, W}));
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t i = batch[b];
      const auto row = p.position(i);
      const auto& a = aug[b];
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t xx = 0; xx < W; ++xx) {
            const long sx0 = a.flip ? long(W - 1 - xx) : long(xx);
            const long sy = long(y) + a.dy, sx = sx0 + a.dx;
            double v = 0;
            if (sy >= 0 && sy < long(H) && sx >= 0 && sx < long(W)) {
              const std::size_t k = (c * H + std::size_t(sy)) * W + std::size_t(sx);
              v = d.image(i)[k];
              if (row >= 0) v += p.delta(std::size_t(row))[k];
            }
            const std::size_t k = (c * H + y) * W + xx;
            v += f.noise(i)[k] + mu[b * C * H * W + k];
            v = std::clamp(v, 0.0, 1.0);
            const float got = x[b * C * H * W + k];
            ASSERT_NEAR(got, v, 1e-6) << "trial " << trial;
            ASSERT_GE(got, 0.0f);
            ASSERT_LE(got, 1.0f);
          }
    }
  }
}

TEST(Compose, OnlyPoisonedRowsChange) {
  const auto d = small_dataset(8, 3, 4, 4, 8);
  const auto p = random_poisons({1, 5}, {3, 4, 4}, 16, 2);
  std::vector<std::size_t> all(8);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto x = compose(d, all, {.poisons = &p});
  const std::size_t n = d.image_size();
  for (std::size_t i = 0; i < 8; ++i) {
    bool same = true;
    for (std::size_t k = 0; k < n; ++k) same &= x[i * n + k] == d.image(i)[k];
    EXPECT_EQ(same, i != 1 && i != 5) << i;
  }
}

TEST(Compose, MisalignedInputsRejected) {
  const auto d = small_dataset(4, 3, 4, 4, 9);
  std::vector<std::size_t> idx{0, 1};
  const auto wrong_shape = random_poisons({0}, {3, 4, 5}, 16, 1);
  EXPECT_THROW(compose(d, idx, {.poisons = &wrong_shape}), ShapeError);
  const auto beyond = random_poisons({9}, {3, 4, 4}, 16, 1);
  EXPECT_THROW(compose(d, idx, {.poisons = &beyond}), ShapeError);
  FriendlyNoiseSet f;
  f.eps = Tensor<float>({3, 3, 4, 4});
  EXPECT_THROW(compose(d, idx, {.friendly = &f}), ShapeError);
  Tensor<float> mu({3, 3, 4, 4});
  EXPECT_THROW(compose(d, idx, {.random_noise = &mu}), ShapeError);
}

// ---------------------------------------------------------------------------
// Targets

TEST(Targets, AdversarialLabelDiffersAndIsDeterministic) {
  const auto d = gen_synthetic(tiny_config());
  const auto a = draw_targets(d.test, 20, 4);
  const auto b = draw_targets(d.test, 20, 4);
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NE(a[i].adv_label, a[i].true_label);
    EXPECT_EQ(a[i].true_label, d.test.labels[a[i].index]);
    EXPECT_EQ(a[i].index, b[i].index);
    EXPECT_EQ(a[i].adv_label, b[i].adv_label);
    EXPECT_TRUE(seen.insert(a[i].index).second);
  }
  EXPECT_THROW(draw_targets(d.test, d.test.size() + 1, 4), ValueError);
}

TEST(Targets, TriggerPatchStampsCorner) {
  const auto d = small_dataset(2, 3, 6, 6, 10);
  const auto patch = TriggerPatch::lower_right(3, 6, 6, 2);
  const auto out = patch.apply(d.images);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 6; ++x) {
          const std::size_t k = ((i * 3 + c) * 6 + y) * 6 + x;
          const bool in = y >= 4 && x >= 4;
          ASSERT_EQ(out[k], in ? patch.color[c] : d.images[k]);
        }
  TriggerPatch too_big = patch;
  too_big.size = 7;
  EXPECT_THROW(too_big.apply(d.images), ValueError);
  TargetSpec t;
  t.image = Tensor<float>({1, 3, 6, 6});
  t.true_label = t.adv_label = 2;
  EXPECT_THROW(t.validate(), ValueError);
}
