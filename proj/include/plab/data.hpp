#pragma once

// Datasets in [0,1] pixel space, file loaders, augmentation, and composition of
// base images with poison and defense perturbations.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "plab/autograd.hpp"
#include "plab/checkpoint.hpp"
#include "plab/errors.hpp"
#include "plab/perturbation.hpp"
#include "plab/rng.hpp"
#include "plab/tensor.hpp"

namespace plab {

struct Dataset {
  Tensor<float> images;  // [N, C, H, W], pixels in [0,1]
  std::vector<int> labels;
  std::size_t classes = 0;
  std::string split = "train";
  std::vector<float> mean;  // per channel, from the train split
  std::vector<float> stddev;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t image_size() const { return images.size() / images.dim(0); }
  Shape image_shape() const { return {channels(), height(), width()}; }
  const float* image(std::size_t i) const { return images.data() + i * image_size(); }

  void validate() const {
    if (images.rank() != 4) throw ShapeError("dataset images must be [N, C, H, W]");
    if (images.dim(0) != labels.size())
      throw ShapeError("dataset holds " + std::to_string(images.dim(0)) + " images but " +
                       std::to_string(labels.size()) + " labels");
    for (int y : labels)
      if (y < 0 || std::size_t(y) >= classes) throw ValueError("label " + std::to_string(y) + " out of range");
    for (float v : images.values())
      if (!(v >= 0.0f && v <= 1.0f)) throw ValueError("pixel outside [0,1]");
  }

  /// Images at `idx`, stacked as [B, C, H, W].
  Tensor<float> batch(std::span<const std::size_t> idx) const {
    const std::size_t n = image_size();
    std::vector<float> out(idx.size() * n);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (idx[b] >= size()) throw ShapeError("example index " + std::to_string(idx[b]) + " out of range");
      std::copy_n(image(idx[b]), n, out.begin() + std::ptrdiff_t(b * n));
    }
    return Tensor<float>({idx.size(), channels(), height(), width()}, std::move(out));
  }

  std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels.at(i));
    return out;
  }

  std::vector<std::size_t> indices_of_class(int y) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (labels[i] == y) out.push_back(i);
    return out;
  }

  /// Sets mean/std from this split's pixels.
  void compute_stats() {
    const std::size_t c = channels(), hw = height() * width();
    mean.assign(c, 0.0f);
    stddev.assign(c, 0.0f);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0, s2 = 0;
      for (std::size_t i = 0; i < size(); ++i) {
        const float* p = image(i) + ch * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          s += p[k];
          s2 += double(p[k]) * p[k];
        }
      }
      const double n = double(size() * hw), m = s / n;
      mean[ch] = float(m);
      stddev[ch] = float(std::sqrt(std::max(s2 / n - m * m, 1e-12)));
    }
  }
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t classes = 10;
  std::size_t per_class = 500;
  std::size_t test_per_class = 100;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  double pixel_noise = 0.06;    // std of additive Gaussian pixel noise
  double hue_jitter = 0.05;     // std of per-image hue offset around the class hue
  double foreign_color = 0.25;  // probability the shape takes a uniformly random hue
  double position_jitter = 2.0; // max center offset, in pixels at 16x16
  double bg_low = 0.0;          // background brightness range
  double bg_high = 0.35;
  std::size_t modes = 0;        // sub-populations per class; 0 ties one shape and hue to each class
  double mode_jitter = 1.0;     // center offset within a sub-population, in pixels at 16x16
  double contrast = 1.0;        // blend weight of the shape color over the background
};

namespace detail {

inline constexpr int kShapeCount = 10;

// Shape membership in coordinates scaled by the shape radius.
inline bool inside_shape(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v), r = std::hypot(u, v);
  switch (shape) {
    case 0: return r <= 1.0;
    case 1: return std::max(au, av) <= 0.8;
    case 2: return v >= -0.85 && v <= 0.8 && au <= 0.55 * (v + 0.85);
    case 3: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 4: return r <= 1.0 && r >= 0.55;
    case 5: return au <= 1.0 && (std::abs(v - 0.5) <= 0.22 || std::abs(v + 0.5) <= 0.22);
    case 6: return av <= 1.0 && (std::abs(u - 0.5) <= 0.22 || std::abs(u + 0.5) <= 0.22);
    case 7: return au + av <= 1.0;
    case 8: return (std::abs(u - v) <= 0.35 || std::abs(u + v) <= 0.35) && std::max(au, av) <= 0.9;
    case 9: return std::max(au, av) <= 0.9 && std::max(au, av) >= 0.55;
  }
  return false;
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double x = h * 6.0;
  const int sector = int(x) % 6;
  const double f = x - std::floor(x), p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline float quantize8(double v) { return float(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

// Everything that fixes one rendered image apart from pixel noise.
struct Style {
  int shape = 0;
  std::array<double, 3> fg{};
  std::array<double, 3> bg{};
  double cy = 0, cx = 0, radius = 1;
  double ramp_angle = 0, ramp_amp = 0;
};

// A class sub-population: shape, colors, placement and size, before per-image jitter.
struct Prototype {
  int shape = 0;
  double hue = 0, sat = 1, val = 1;
  double bg_hue = 0, bg_sat = 0, bg_val = 0;
  double dy = 0, dx = 0, radius = 4.5;
};

inline std::vector<std::vector<Prototype>> draw_prototypes(const SynthConfig& cfg) {
  std::vector<std::vector<Prototype>> out(cfg.classes);
  if (cfg.modes == 0) return out;
  Rng rng = make_rng(cfg.seed, {stream::synth, 0});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale = double(std::min(cfg.height, cfg.width)) / 16.0;
  for (auto& modes : out)
    for (std::size_t m = 0; m < cfg.modes; ++m) {
      Prototype p;
      p.shape = int(unit(rng) * kShapeCount) % kShapeCount;
      p.hue = unit(rng);
      p.sat = 0.55 + 0.45 * unit(rng);
      p.val = 0.6 + 0.4 * unit(rng);
      p.bg_hue = unit(rng);
      p.bg_sat = 0.5 * unit(rng);
      p.bg_val = cfg.bg_low + (cfg.bg_high - cfg.bg_low) * unit(rng);
      p.dy = cfg.position_jitter * scale * (2 * unit(rng) - 1);
      p.dx = cfg.position_jitter * scale * (2 * unit(rng) - 1);
      p.radius = scale * (3.8 + 2.2 * unit(rng));
      modes.push_back(p);
    }
  return out;
}

inline Style draw_style(const SynthConfig& cfg, int label, const std::vector<Prototype>& modes, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double scale = double(std::min(cfg.height, cfg.width)) / 16.0;
  const double mid_y = (double(cfg.height) - 1) / 2, mid_x = (double(cfg.width) - 1) / 2;
  Style st;
  st.ramp_angle = 2 * 3.141592653589793 * unit(rng);
  st.ramp_amp = 0.12 * unit(rng);
  if (modes.empty()) {
    // One shape per class, hue tied to the class.
    st.shape = label % kShapeCount;
    const double class_hue = (double(label) + 0.5 * double(label / kShapeCount)) / double(cfg.classes);
    const double hue = unit(rng) < cfg.foreign_color ? unit(rng) : class_hue + cfg.hue_jitter * gauss(rng);
    st.fg = hsv_to_rgb(hue, 0.55 + 0.45 * unit(rng), 0.6 + 0.4 * unit(rng));
    st.bg = hsv_to_rgb(unit(rng), 0.5 * unit(rng), cfg.bg_low + (cfg.bg_high - cfg.bg_low) * unit(rng));
    const double jit = cfg.position_jitter * scale;
    st.cy = mid_y + jit * (2 * unit(rng) - 1);
    st.cx = mid_x + jit * (2 * unit(rng) - 1);
    st.radius = scale * (3.8 + 2.2 * unit(rng));
    return st;
  }
  const Prototype& p = modes[std::size_t(unit(rng) * double(modes.size())) % modes.size()];
  st.shape = p.shape;
  st.fg = hsv_to_rgb(p.hue + cfg.hue_jitter * gauss(rng), std::clamp(p.sat + 0.1 * gauss(rng), 0.0, 1.0),
                     std::clamp(p.val + 0.1 * gauss(rng), 0.0, 1.0));
  st.bg = hsv_to_rgb(p.bg_hue + 0.05 * gauss(rng), std::clamp(p.bg_sat + 0.1 * gauss(rng), 0.0, 1.0),
                     std::clamp(p.bg_val + 0.08 * gauss(rng), 0.0, 1.0));
  st.cy = mid_y + p.dy + cfg.mode_jitter * scale * (2 * unit(rng) - 1);
  st.cx = mid_x + p.dx + cfg.mode_jitter * scale * (2 * unit(rng) - 1);
  st.radius = p.radius * (0.85 + 0.3 * unit(rng));
  return st;
}

inline void render_example(const SynthConfig& cfg, const Style& st, Rng& rng, float* out) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t C = cfg.channels, H = cfg.height, W = cfg.width;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      // 3x3 supersampling for soft edges.
      int hits = 0;
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx) {
          const double py = double(y) + (sy - 1) / 3.0, px = double(x) + (sx - 1) / 3.0;
          hits += inside_shape(st.shape, (px - st.cx) / st.radius, (py - st.cy) / st.radius);
        }
      const double cover = hits / 9.0;
      const double ramp = st.ramp_amp * (std::cos(st.ramp_angle) * (double(x) / double(W) - 0.5) +
                                         std::sin(st.ramp_angle) * (double(y) / double(H) - 0.5));
      for (std::size_t c = 0; c < C; ++c) {
        const double f = C == 3 ? st.fg[c] : (st.fg[0] + st.fg[1] + st.fg[2]) / 3;
        const double b = C == 3 ? st.bg[c] : (st.bg[0] + st.bg[1] + st.bg[2]) / 3;
        const double shape_px = cfg.contrast * f + (1 - cfg.contrast) * b;
        const double v = cover * shape_px + (1 - cover) * b + ramp + cfg.pixel_noise * gauss(rng);
        out[(c * H + y) * W + x] = quantize8(v);
      }
    }
}

inline Dataset render_split(const SynthConfig& cfg, const std::vector<std::vector<Prototype>>& protos,
                            std::size_t per_class, std::uint64_t split_tag, const std::string& split) {
  const std::size_t n = cfg.classes * per_class, img = cfg.channels * cfg.height * cfg.width;
  Dataset d;
  d.classes = cfg.classes;
  d.split = split;
  d.images = Tensor<float>({n, cfg.channels, cfg.height, cfg.width});
  d.labels.resize(n);
  Rng order = make_rng(cfg.seed, {stream::synth, split_tag, 0});
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = int(i % cfg.classes);
  std::shuffle(labels.begin(), labels.end(), order);
  for (std::size_t i = 0; i < n; ++i) {
    // One stream per example keeps every image independent of the split size.
    Rng rng = make_rng(cfg.seed, {stream::synth, split_tag, i + 1});
    d.labels[i] = labels[i];
    const Style st = draw_style(cfg, labels[i], protos[std::size_t(labels[i])], rng);
    render_example(cfg, st, rng, d.images.data() + i * img);
  }
  return d;
}

}  // namespace detail

/// Procedurally rendered colored shapes, one shape family per class, with
/// per-image color, position, size, background and pixel-noise jitter.
/// Pixels are multiples of 1/255, so 8-bit file formats round-trip exactly.
inline SplitDataset gen_synthetic(const SynthConfig& cfg) {
  if (cfg.classes < 2) throw ValueError("synthetic data needs at least 2 classes");
  if (cfg.per_class < 1 || cfg.test_per_class < 1) throw ValueError("synthetic data needs at least 1 example per class");
  if (cfg.channels != 1 && cfg.channels != 3) throw ValueError("synthetic data supports 1 or 3 channels");
  if (cfg.height < 4 || cfg.width < 4) throw ValueError("synthetic images must be at least 4x4");
  const auto protos = detail::draw_prototypes(cfg);
  SplitDataset out{detail::render_split(cfg, protos, cfg.per_class, 1, "train"),
                   detail::render_split(cfg, protos, cfg.test_per_class, 2, "test")};
  out.train.compute_stats();
  out.test.mean = out.train.mean;
  out.test.stddev = out.train.stddev;
  return out;
}

// ---------------------------------------------------------------------------
// IDX files (big-endian header, u8 payload)

namespace detail {

inline std::uint32_t get_be32(io::Reader& in) {
  const auto b = in.get_bytes(4);
  return (std::uint32_t(std::uint8_t(b[0])) << 24) | (std::uint32_t(std::uint8_t(b[1])) << 16) |
         (std::uint32_t(std::uint8_t(b[2])) << 8) | std::uint32_t(std::uint8_t(b[3]));
}

inline void put_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  os.write(b, 4);
}

inline std::uint8_t to_byte(float v) {
  const float s = v * 255.0f;
  const long r = std::lround(s);
  if (r < 0 || r > 255 || std::abs(s - float(r)) > 1e-3f)
    throw ValueError("pixel " + std::to_string(v) + " is not a multiple of 1/255");
  return std::uint8_t(r);
}

inline void check_payload(const io::Reader& in, std::size_t expected) {
  if (in.remaining() < expected) throw FormatError(FormatError::Kind::truncated, in.what() + ": file is truncated");
  if (in.remaining() > expected)
    throw FormatError(FormatError::Kind::count_mismatch, in.what() + ": payload longer than its header declares");
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImages3 = 0x00000803;  // N, H, W (one channel)
inline constexpr std::uint32_t kIdxImages4 = 0x00000804;  // N, C, H, W
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

/// Reads an IDX image file and its label file. Pixels are scaled by 1/255.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        const std::string& split = "train") {
  io::Reader img(io::read_file(images_path), images_path.string());
  const auto magic = detail::get_be32(img);
  if (magic != kIdxImages3 && magic != kIdxImages4)
    throw FormatError(FormatError::Kind::bad_magic, images_path.string() + ": bad IDX image magic");
  std::vector<std::size_t> dims(magic == kIdxImages3 ? 3 : 4);
  for (auto& d : dims) d = detail::get_be32(img);
  if (dims.size() == 3) dims.insert(dims.begin() + 1, 1);
  for (auto d : dims)
    if (d == 0) throw FormatError(FormatError::Kind::bad_value, images_path.string() + ": zero IDX extent");
  const std::size_t count = numel(dims);
  detail::check_payload(img, count);
  const std::string pix = img.get_bytes(count);

  io::Reader lab(io::read_file(labels_path), labels_path.string());
  if (detail::get_be32(lab) != kIdxLabels)
    throw FormatError(FormatError::Kind::bad_magic, labels_path.string() + ": bad IDX label magic");
  const std::size_t n_labels = detail::get_be32(lab);
  if (n_labels != dims[0])
    throw FormatError(FormatError::Kind::count_mismatch, images_path.string() + " holds " + std::to_string(dims[0]) +
                                                             " images but " + labels_path.string() + " declares " +
                                                             std::to_string(n_labels) + " labels");
  detail::check_payload(lab, n_labels);
  const std::string lbytes = lab.get_bytes(n_labels);

  Dataset d;
  d.split = split;
  std::vector<float> values(count);
  for (std::size_t i = 0; i < count; ++i) values[i] = float(std::uint8_t(pix[i])) / 255.0f;
  d.images = Tensor<float>(dims, std::move(values));
  int max_label = 0;
  for (char c : lbytes) {
    d.labels.push_back(std::uint8_t(c));
    max_label = std::max(max_label, d.labels.back());
  }
  d.classes = std::size_t(max_label) + 1;
  d.compute_stats();
  return d;
}

inline void save_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                     const Dataset& d) {
  std::ostringstream img;
  if (d.channels() == 1) {
    detail::put_be32(img, kIdxImages3);
  } else {
    detail::put_be32(img, kIdxImages4);
  }
  detail::put_be32(img, std::uint32_t(d.size()));
  if (d.channels() != 1) detail::put_be32(img, std::uint32_t(d.channels()));
  detail::put_be32(img, std::uint32_t(d.height()));
  detail::put_be32(img, std::uint32_t(d.width()));
  for (float v : d.images.values()) img.put(char(detail::to_byte(v)));

  std::ostringstream lab;
  detail::put_be32(lab, kIdxLabels);
  detail::put_be32(lab, std::uint32_t(d.size()));
  for (int y : d.labels) {
    if (y < 0 || y > 255) throw ValueError("IDX labels must fit in a byte");
    lab.put(char(y));
  }
  io::write_file(images_path, img.str());
  io::write_file(labels_path, lab.str());
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: records of one label byte + 3x32x32 channel-planar pixels

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

inline Dataset load_cifar_bin(const std::filesystem::path& path, const std::string& split = "train") {
  const std::string bytes = io::read_file(path);
  if (bytes.empty() || bytes.size() % kCifarRecord != 0)
    throw FormatError(FormatError::Kind::bad_length, path.string() + ": length " + std::to_string(bytes.size()) +
                                                         " is not a positive multiple of " +
                                                         std::to_string(kCifarRecord));
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset d;
  d.split = split;
  d.classes = 10;
  d.images = Tensor<float>({n, 3, 32, 32});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const char* rec = bytes.data() + i * kCifarRecord;
    d.labels[i] = std::uint8_t(rec[0]);
    if (d.labels[i] >= 10) throw FormatError(FormatError::Kind::bad_value, path.string() + ": label byte above 9");
    float* out = d.images.data() + i * (kCifarRecord - 1);
    for (std::size_t k = 0; k + 1 < kCifarRecord; ++k) out[k] = float(std::uint8_t(rec[k + 1])) / 255.0f;
  }
  d.compute_stats();
  return d;
}

inline void save_cifar_bin(const std::filesystem::path& path, const Dataset& d) {
  if (d.image_shape() != Shape{3, 32, 32}) throw ShapeError("CIFAR binary records hold 3x32x32 images");
  std::string bytes;
  bytes.reserve(d.size() * kCifarRecord);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] < 0 || d.labels[i] > 255) throw ValueError("CIFAR labels must fit in a byte");
    bytes.push_back(char(d.labels[i]));
    const float* p = d.image(i);
    for (std::size_t k = 0; k + 1 < kCifarRecord; ++k) bytes.push_back(char(detail::to_byte(p[k])));
  }
  io::write_file(path, bytes);
}

// ---------------------------------------------------------------------------
// Augmentation: zero-pad by `pad`, random crop back to H x W, random horizontal flip

struct AugmentOptions {
  int pad = 2;
  double flip_prob = 0.5;
};

/// Crop offset relative to the un-padded image (0 = centered crop) plus a flip.
struct AugmentParams {
  int dy = 0;
  int dx = 0;
  bool flip = false;
};

inline std::vector<AugmentParams> draw_augment(std::size_t n, Rng& rng, const AugmentOptions& opt = {}) {
  std::uniform_int_distribution<int> shift(-opt.pad, opt.pad);
  std::bernoulli_distribution flip(opt.flip_prob);
  std::vector<AugmentParams> out(n);
  for (auto& p : out) {
    p.dy = shift(rng);
    p.dx = shift(rng);
    p.flip = flip(rng);
  }
  return out;
}

/// Source-pixel map for gather_pixels; -1 marks padding.
inline std::shared_ptr<const std::vector<std::int32_t>> augment_map(std::span<const AugmentParams> params,
                                                                     std::size_t H, std::size_t W) {
  auto map = std::make_shared<std::vector<std::int32_t>>(params.size() * H * W);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t xo = p.flip ? W - 1 - x : x;
        const long sy = long(y) + p.dy, sx = long(xo) + p.dx;
        const bool in = sy >= 0 && sy < long(H) && sx >= 0 && sx < long(W);
        (*map)[(i * H + y) * W + x] = in ? std::int32_t(sy * long(W) + sx) : -1;
      }
  }
  return map;
}

inline Tensor<float> apply_augment(const Tensor<float>& batch, std::span<const AugmentParams> params) {
  if (batch.rank() != 4 || batch.dim(0) != params.size()) throw ShapeError("augment: one parameter set per image");
  const auto map = augment_map(params, batch.dim(2), batch.dim(3));
  GradMode off(false);
  return gather_pixels(constant(batch), map).value();
}

inline Tensor<float> augment(const Tensor<float>& batch, std::uint64_t seed, const AugmentOptions& opt = {}) {
  Rng rng = make_rng(seed, {stream::augment});
  const auto params = draw_augment(batch.dim(0), rng, opt);
  return apply_augment(batch, params);
}

// ---------------------------------------------------------------------------
// Composition of base images with perturbations

struct ComposeInputs {
  const PoisonSet* poisons = nullptr;
  const FriendlyNoiseSet* friendly = nullptr;  // one row per train example
  const Tensor<float>* random_noise = nullptr; // [B, C, H, W], aligned with the batch indices
  std::span<const AugmentParams> augment;       // empty = no augmentation
};

/// x_hat = clamp(aug(x + delta) + eps + mu, 0, 1) for the examples at `indices`.
inline Tensor<float> compose(const Dataset& base, std::span<const std::size_t> indices, const ComposeInputs& in = {}) {
  const std::size_t n = base.image_size();
  Tensor<float> x = base.batch(indices);
  if (in.poisons && in.poisons->size()) {
    in.poisons->validate();
    if (in.poisons->example_size() != n) throw ShapeError("poison deltas do not match the image shape");
    if (in.poisons->indices.back() >= base.size()) throw ShapeError("poison index beyond the dataset");
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const auto row = in.poisons->position(indices[b]);
      if (row < 0) continue;
      const float* d = in.poisons->delta(std::size_t(row));
      float* o = x.data() + b * n;
      for (std::size_t k = 0; k < n; ++k) o[k] += d[k];
    }
  }
  if (!in.augment.empty()) x = apply_augment(x, in.augment);
  if (in.friendly) {
    if (in.friendly->size() != base.size() || in.friendly->example_size() != n)
      throw ShapeError("friendly noise holds " + std::to_string(in.friendly->size()) + " rows for a dataset of " +
                       std::to_string(base.size()));
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const float* e = in.friendly->noise(indices[b]);
      float* o = x.data() + b * n;
      for (std::size_t k = 0; k < n; ++k) o[k] += e[k];
    }
  }
  if (in.random_noise) {
    if (in.random_noise->shape() != x.shape())
      throw ShapeError("random noise of shape " + shape_str(in.random_noise->shape()) + " for batch " +
                       shape_str(x.shape()));
    for (std::size_t k = 0; k < x.size(); ++k) x[k] += (*in.random_noise)[k];
  }
  for (float& v : x.values()) v = std::clamp(v, 0.0f, 1.0f);
  return x;
}

// ---------------------------------------------------------------------------
// Attack targets

struct TriggerPatch {
  std::size_t size = 3;
  std::size_t row = 0;  // top-left corner
  std::size_t col = 0;
  std::vector<float> color;  // one value per channel

  /// Default trigger: a size x size block in the lower-right corner.
  static TriggerPatch lower_right(std::size_t channels, std::size_t H, std::size_t W, std::size_t size = 3) {
    TriggerPatch p;
    p.size = size;
    p.row = H >= size ? H - size : 0;
    p.col = W >= size ? W - size : 0;
    p.color.assign(channels, 1.0f);
    if (channels == 3) p.color = {1.0f, 0.0f, 1.0f};
    return p;
  }

  void validate(std::size_t channels, std::size_t H, std::size_t W) const {
    if (row + size > H || col + size > W) throw ValueError("trigger patch does not fit inside the image");
    if (size && color.size() != channels) throw ValueError("trigger color needs one value per channel");
  }

  /// Copy of `batch` with the patch stamped on every image.
  Tensor<float> apply(Tensor<float> batch) const {
    const std::size_t C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    validate(C, H, W);
    for (std::size_t i = 0; i < batch.dim(0); ++i)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = row; y < row + size; ++y)
          for (std::size_t x = col; x < col + size; ++x) batch[((i * C + c) * H + y) * W + x] = color[c];
    return batch;
  }
};

struct TargetSpec {
  std::size_t index = 0;  // test-split index
  Tensor<float> image;    // [1, C, H, W]
  int true_label = 0;
  int adv_label = 1;
  std::optional<TriggerPatch> trigger;

  void validate() const {
    if (true_label == adv_label) throw ValueError("adversarial label must differ from the true label");
    if (trigger) trigger->validate(image.dim(1), image.dim(2), image.dim(3));
  }
};

/// Target at a test index with a seeded adversarial class different from its label.
inline TargetSpec make_target(const Dataset& test, std::size_t index, std::uint64_t seed) {
  if (index >= test.size()) throw ValueError("target index beyond the test split");
  TargetSpec t;
  t.index = index;
  const std::size_t idx[1] = {index};
  t.image = test.batch(idx);
  t.true_label = test.labels[index];
  Rng rng = make_rng(seed, {stream::target, index});
  std::uniform_int_distribution<int> pick(1, int(test.classes) - 1);
  t.adv_label = (t.true_label + pick(rng)) % int(test.classes);
  return t;
}

/// `count` distinct seeded targets drawn from the test split.
inline std::vector<TargetSpec> draw_targets(const Dataset& test, std::size_t count, std::uint64_t seed) {
  if (count > test.size()) throw ValueError("more targets than test examples");
  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, {stream::target});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<TargetSpec> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_target(test, order[i], seed));
  return out;
}

}  // namespace plab
