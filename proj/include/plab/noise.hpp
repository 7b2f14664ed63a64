#pragma once

// Random noise resampled per example per epoch.

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <string>

#include "plab/errors.hpp"
#include "plab/perturbation.hpp"
#include "plab/rng.hpp"
#include "plab/tensor.hpp"

namespace plab {

enum class NoiseDist { bernoulli, uniform, gaussian };

inline std::string to_string(NoiseDist d) {
  switch (d) {
    case NoiseDist::bernoulli: return "bernoulli";
    case NoiseDist::uniform: return "uniform";
    case NoiseDist::gaussian: return "gaussian";
  }
  return "?";
}

inline NoiseDist parse_noise_dist(const std::string& s) {
  if (s == "bernoulli") return NoiseDist::bernoulli;
  if (s == "uniform") return NoiseDist::uniform;
  if (s == "gaussian") return NoiseDist::gaussian;
  throw ValueError("unknown noise distribution '" + s + "'");
}

/// Gaussian draws are truncated at this many standard deviations, which gives
/// every distribution a hard L-infinity bound.
inline constexpr double kGaussianClip = 4.0;

struct NoiseSpec {
  NoiseDist dist = NoiseDist::bernoulli;
  int mu = 16;  // 8-bit units
  std::uint64_t seed = 0;

  float scale() const { return pixel_bound(mu); }
  float bound() const { return dist == NoiseDist::gaussian ? float(kGaussianClip) * scale() : scale(); }
  bool active() const { return mu > 0; }

  void validate() const {
    if (mu < 0) throw ValueError("random noise magnitude must be non-negative");
  }
};

/// Fills `out` with the draw for (spec.seed, epoch, index). The same triple
/// always yields the same values; each epoch gets a fresh draw.
inline void fill_random_noise(const NoiseSpec& spec, int epoch, std::size_t index, std::span<float> out) {
  spec.validate();
  if (!spec.active()) {
    std::fill(out.begin(), out.end(), 0.0f);
    return;
  }
  Rng rng = make_rng(spec.seed, {stream::random_noise, std::uint64_t(epoch), index});
  const float s = spec.scale();
  switch (spec.dist) {
    case NoiseDist::bernoulli: {
      std::uint64_t bits = 0;
      for (std::size_t k = 0; k < out.size(); ++k) {
        if (k % 64 == 0) bits = rng();
        out[k] = (bits >> (k % 64)) & 1u ? s : -s;
      }
      break;
    }
    case NoiseDist::uniform: {
      std::uniform_real_distribution<float> u(-s, s);
      for (float& v : out) v = std::clamp(u(rng), -s, s);
      break;
    }
    case NoiseDist::gaussian: {
      std::normal_distribution<float> g(0.0f, s);
      const float b = spec.bound();
      for (float& v : out) v = std::clamp(g(rng), -b, b);
      break;
    }
  }
}

inline Tensor<float> sample_random_noise(const NoiseSpec& spec, const Shape& shape, int epoch, std::size_t index) {
  Tensor<float> t(shape);
  fill_random_noise(spec, epoch, index, t.values());
  return t;
}

/// Noise for a batch of examples, stacked as [B, ...example_shape].
inline Tensor<float> sample_batch_noise(const NoiseSpec& spec, const Shape& example_shape, int epoch,
                                        std::span<const std::size_t> indices) {
  Shape shape{indices.size()};
  shape.insert(shape.end(), example_shape.begin(), example_shape.end());
  Tensor<float> t(shape);
  const std::size_t n = numel(example_shape);
  for (std::size_t b = 0; b < indices.size(); ++b)
    fill_random_noise(spec, epoch, indices[b], std::span<float>(t.data() + b * n, n));
  return t;
}

}  // namespace plab
