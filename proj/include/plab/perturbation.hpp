#pragma once

// Per-example perturbation sets and their file formats.
//
// PoisonSet file:   "PSET" | u16 xi | u32 count | count x (u32 index | tensor record)
// FriendlyNoiseSet: "FNDS" | u16 zeta | u32 meta_len | meta text (key=value lines)
//                   | u32 count | count x tensor record
// Tensor records use the checkpoint encoding.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "plab/checkpoint.hpp"
#include "plab/errors.hpp"
#include "plab/tensor.hpp"

namespace plab {

/// Bound in [0,1] pixel units for a radius given in 8-bit units.
inline float pixel_bound(int eight_bit) { return float(eight_bit) / 255.0f; }

struct CraftLog {
  double initial_loss = 0;  // matching loss with every delta at zero
  double final_loss = 0;    // matching loss of the kept restart
  int steps = 0;
  int restarts = 0;
  int best_restart = -1;
  std::vector<double> restart_losses;
  std::vector<double> step_losses;  // per step, kept restart
  std::size_t noise_resamples = 0;  // fresh random-noise draws made while crafting
  std::size_t failed_restarts = 0;
};

/// Clean-label poisons: perturbations for a sorted set of train indices.
/// Every index outside `indices` implicitly carries a zero perturbation.
struct PoisonSet {
  int xi = 16;
  std::vector<std::size_t> indices;  // strictly increasing
  Tensor<float> deltas;              // [P, C, H, W], row p belongs to indices[p]
  CraftLog log;

  std::size_t size() const { return indices.size(); }
  float bound() const { return pixel_bound(xi); }
  std::size_t example_size() const { return indices.empty() ? 0 : deltas.size() / indices.size(); }

  /// Row of `index` in `deltas`, or -1 when the example is not poisoned.
  std::ptrdiff_t position(std::size_t index) const {
    auto it = std::lower_bound(indices.begin(), indices.end(), index);
    return it != indices.end() && *it == index ? std::ptrdiff_t(it - indices.begin()) : -1;
  }

  const float* delta(std::size_t row) const { return deltas.data() + row * example_size(); }
  float* delta(std::size_t row) { return deltas.data() + row * example_size(); }

  bool within_bound() const {
    const float b = bound();
    return std::all_of(deltas.values().begin(), deltas.values().end(), [b](float v) { return std::abs(v) <= b; });
  }

  void validate() const {
    if (!std::is_sorted(indices.begin(), indices.end()) ||
        std::adjacent_find(indices.begin(), indices.end()) != indices.end())
      throw ValueError("poison indices must be distinct and increasing");
    if (!indices.empty() && (deltas.rank() != 4 || deltas.dim(0) != indices.size()))
      throw ShapeError("poison deltas must be [P, C, H, W] with one row per index");
  }
};

struct FriendlyNoiseMeta {
  double lambda = 1.0;
  std::string norm = "l2";
  int steps = 20;
  double lr = 20.0;
  int warmup_epochs = 5;
  std::size_t batch = 128;
  std::string source_arch = "smallconv";
  std::uint64_t seed = 0;

  std::string encode() const {
    std::ostringstream os;
    os.precision(17);
    os << "lambda=" << lambda << "\nnorm=" << norm << "\nsteps=" << steps << "\nlr=" << lr
       << "\nwarmup_epochs=" << warmup_epochs << "\nbatch=" << batch << "\nsource_arch=" << source_arch
       << "\nseed=" << seed << "\n";
    return os.str();
  }

  static FriendlyNoiseMeta decode(const std::string& text) {
    FriendlyNoiseMeta m;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
      try {
        if (k == "lambda") m.lambda = std::stod(v);
        else if (k == "norm") m.norm = v;
        else if (k == "steps") m.steps = std::stoi(v);
        else if (k == "lr") m.lr = std::stod(v);
        else if (k == "warmup_epochs") m.warmup_epochs = std::stoi(v);
        else if (k == "batch") m.batch = std::stoul(v);
        else if (k == "source_arch") m.source_arch = v;
        else if (k == "seed") m.seed = std::stoull(v);
      } catch (const std::exception&) {
        throw FormatError(FormatError::Kind::bad_value, "friendly noise metadata: bad value for " + k);
      }
    }
    return m;
  }
};

/// One optimized perturbation per train example.
struct FriendlyNoiseSet {
  int zeta = 16;
  Tensor<float> eps;  // [N, C, H, W]
  FriendlyNoiseMeta meta;
  std::size_t failures = 0;  // examples whose objective stayed non-finite (stored as zero)

  std::size_t size() const { return eps.rank() ? eps.dim(0) : 0; }
  float bound() const { return pixel_bound(zeta); }
  std::size_t example_size() const { return size() ? eps.size() / size() : 0; }
  const float* noise(std::size_t i) const { return eps.data() + i * example_size(); }

  bool within_bound() const {
    const float b = bound();
    return std::all_of(eps.values().begin(), eps.values().end(), [b](float v) { return std::abs(v) <= b; });
  }
};

namespace detail {

inline Shape example_shape(const Tensor<float>& batch) { return Shape(batch.shape().begin() + 1, batch.shape().end()); }

inline Tensor<float> example(const Tensor<float>& batch, std::size_t i) {
  const std::size_t n = batch.size() / batch.dim(0);
  return Tensor<float>(example_shape(batch),
                       std::vector<float>(batch.data() + i * n, batch.data() + (i + 1) * n));
}

/// Stacks per-example records into [N, ...]; all records must share a shape.
inline Tensor<float> stack(const std::vector<Tensor<float>>& rows, const std::string& what) {
  Shape shape{rows.size()};
  shape.insert(shape.end(), rows.front().shape().begin(), rows.front().shape().end());
  std::vector<float> values;
  values.reserve(numel(shape));
  for (const auto& r : rows) {
    if (r.shape() != rows.front().shape())
      throw FormatError(FormatError::Kind::bad_value, what + ": per-example tensors differ in shape");
    values.insert(values.end(), r.values().begin(), r.values().end());
  }
  return Tensor<float>(std::move(shape), std::move(values));
}

}  // namespace detail

inline std::string encode_poisons(const PoisonSet& p) {
  p.validate();
  std::ostringstream os;
  io::put_bytes(os, "PSET");
  io::put<std::uint16_t>(os, std::uint16_t(p.xi));
  io::put<std::uint32_t>(os, std::uint32_t(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) {
    io::put<std::uint32_t>(os, std::uint32_t(p.indices[i]));
    write_tensor_record(os, "delta", detail::example(p.deltas, i));
  }
  return os.str();
}

inline PoisonSet decode_poisons(std::string bytes, const std::string& what = "poison set") {
  io::Reader in(std::move(bytes), what);
  in.expect_magic("PSET");
  PoisonSet p;
  p.xi = in.get<std::uint16_t>();
  const auto count = in.get<std::uint32_t>();
  std::vector<Tensor<float>> rows;
  for (std::uint32_t i = 0; i < count; ++i) {
    p.indices.push_back(in.get<std::uint32_t>());
    rows.push_back(read_tensor_record(in).second);
  }
  if (!in.at_end()) throw FormatError(FormatError::Kind::count_mismatch, what + ": trailing bytes after records");
  if (count) p.deltas = detail::stack(rows, what);
  p.validate();
  if (!p.within_bound()) throw FormatError(FormatError::Kind::bad_value, what + ": delta exceeds its bound");
  return p;
}

inline std::string encode_friendly(const FriendlyNoiseSet& f) {
  std::ostringstream os;
  io::put_bytes(os, "FNDS");
  io::put<std::uint16_t>(os, std::uint16_t(f.zeta));
  std::string meta = f.meta.encode();
  io::put<std::uint32_t>(os, std::uint32_t(meta.size()));
  io::put_bytes(os, meta);
  io::put<std::uint32_t>(os, std::uint32_t(f.size()));
  for (std::size_t i = 0; i < f.size(); ++i) write_tensor_record(os, "eps", detail::example(f.eps, i));
  return os.str();
}

inline FriendlyNoiseSet decode_friendly(std::string bytes, const std::string& what = "friendly noise") {
  io::Reader in(std::move(bytes), what);
  in.expect_magic("FNDS");
  FriendlyNoiseSet f;
  f.zeta = in.get<std::uint16_t>();
  const auto meta_len = in.get<std::uint32_t>();
  f.meta = FriendlyNoiseMeta::decode(in.get_bytes(meta_len));
  const auto count = in.get<std::uint32_t>();
  std::vector<Tensor<float>> rows;
  rows.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) rows.push_back(read_tensor_record(in).second);
  if (!in.at_end()) throw FormatError(FormatError::Kind::count_mismatch, what + ": trailing bytes after records");
  if (count) f.eps = detail::stack(rows, what);
  if (!f.within_bound()) throw FormatError(FormatError::Kind::bad_value, what + ": noise exceeds its bound");
  return f;
}

inline void save_poisons(const std::filesystem::path& path, const PoisonSet& p) { io::write_file(path, encode_poisons(p)); }
inline PoisonSet load_poisons(const std::filesystem::path& path) {
  return decode_poisons(io::read_file(path), path.string());
}
inline void save_friendly(const std::filesystem::path& path, const FriendlyNoiseSet& f) {
  io::write_file(path, encode_friendly(f));
}
inline FriendlyNoiseSet load_friendly(const std::filesystem::path& path) {
  return decode_friendly(io::read_file(path), path.string());
}

}  // namespace plab
