#pragma once

// Metrics and diagnostic probes: accuracy, poison success, loss landscapes
// along random directions, KL spread in small boxes, and key=value reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "plab/attack.hpp"
#include "plab/checkpoint.hpp"
#include "plab/data.hpp"
#include "plab/errors.hpp"
#include "plab/loss.hpp"
#include "plab/nn.hpp"
#include "plab/noise.hpp"
#include "plab/perturbation.hpp"
#include "plab/rng.hpp"
#include "plab/train.hpp"

namespace plab {

// ---------------------------------------------------------------------------
// Metrics

template <typename T>
double test_accuracy(const Model<T>& model, const Dataset& data) {
  if (data.size() == 0) throw ValueError("accuracy of an empty split is undefined");
  const auto pred = predict(model, data.images);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == data.labels[i];
  return double(ok) / double(pred.size());
}

template <typename T>
bool poison_success(const Model<T>& model, const TargetSpec& target) {
  return predict(model, target.image)[0] == target.adv_label;
}

/// Share of test images not labeled `adv_label` that classify as `adv_label`
/// once the trigger is stamped on. The test split itself is left untouched.
template <typename T>
double backdoor_success_rate(const Model<T>& model, const Dataset& test, const TriggerPatch& trigger, int adv_label) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.labels[i] != adv_label) idx.push_back(i);
  if (idx.empty()) return 0.0;
  Tensor<float> x = test.batch(idx);
  if (trigger.size) x = trigger.apply(std::move(x));
  const auto pred = predict(model, x);
  return double(std::count(pred.begin(), pred.end(), adv_label)) / double(pred.size());
}

// ---------------------------------------------------------------------------
// Landscapes

enum class GridKind { matching_loss, train_loss };

inline std::string to_string(GridKind k) { return k == GridKind::matching_loss ? "matching-loss" : "train-loss"; }

struct GridSpec {
  double extent = 16.0 / 255.0;  // half-width along each axis, in max-norm units
  int steps = 10;                // cells on each side of the origin
  std::uint64_t seed = 0;

  void validate() const {
    if (!(extent >= 0) || !std::isfinite(extent)) throw ValueError("grid extent must be finite and non-negative");
    if (steps < 1) throw ValueError("grid needs at least one step per side");
  }
};

/// Values on a square grid around an input point. Rows follow the second
/// direction, columns the first. Axis coordinates are max-norm offsets: the
/// point at (a, b) is center + a * u / |u|_inf + b * v / |v|_inf.
struct LandscapeGrid {
  static constexpr std::size_t kAllPoisons = std::numeric_limits<std::size_t>::max();

  GridKind kind = GridKind::train_loss;
  std::size_t center = 0;  // dataset index, or kAllPoisons for the multi-poison average
  Tensor<double> u, v;     // orthonormal in the Euclidean sense, example shaped
  double extent = 0;
  double step = 0;
  std::size_t side = 1;
  std::vector<double> values;  // side x side, row-major

  double coord(std::size_t k) const { return side == 1 ? 0.0 : -extent + double(k) * step; }
  double at(std::size_t row, std::size_t col) const { return values.at(row * side + col); }
  double origin() const { return at(side / 2, side / 2); }
  double min() const { return *std::min_element(values.begin(), values.end()); }
  double max() const { return *std::max_element(values.begin(), values.end()); }

  /// Input-space offset of cell (row, col).
  Tensor<double> offset(std::size_t row, std::size_t col) const {
    Tensor<double> o(u.shape());
    const double a = coord(col) / u.abs_max(), b = coord(row) / v.abs_max();
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = a * u[k] + b * v[k];
    return o;
  }

  std::string header() const {
    std::ostringstream os;
    os.precision(17);
    os << "kind=" << to_string(kind) << " center=" << (center == kAllPoisons ? std::string("all") : std::to_string(center))
       << " extent=" << extent << " step=" << step << " side=" << side;
    return os.str();
  }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << header() << '\n';
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) os << (c ? " " : "") << at(r, c);
      os << '\n';
    }
    return os.str();
  }

  /// 8-bit grayscale, min black and max white.
  std::string to_pgm() const {
    std::ostringstream os;
    os << "P5\n" << side << ' ' << side << "\n255\n";
    const double lo = min(), hi = max();
    for (double x : values) {
      const double t = hi > lo ? (x - lo) / (hi - lo) : 0.0;
      os.put(char(std::uint8_t(std::lround(std::clamp(t, 0.0, 1.0) * 255.0))));
    }
    return os.str();
  }

  void save(const std::filesystem::path& stem) const {
    io::write_file(stem.string() + ".txt", to_text());
    io::write_file(stem.string() + ".pgm", to_pgm());
  }
};

/// Two seeded directions: Gaussian draws, then Gram-Schmidt.
inline std::pair<Tensor<double>, Tensor<double>> grid_directions(const Shape& shape, std::uint64_t seed) {
  Rng rng = make_rng(seed, {stream::probe, 1});
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor<double> u(shape), v(shape);
  for (double& x : u.values()) x = g(rng);
  for (double& x : v.values()) x = g(rng);
  auto normalize = [](Tensor<double>& t) {
    double s = 0;
    for (double x : t.values()) s += x * x;
    s = std::sqrt(s);
    for (double& x : t.values()) x /= s;
  };
  normalize(u);
  double d = 0;
  for (std::size_t k = 0; k < u.size(); ++k) d += u[k] * v[k];
  for (std::size_t k = 0; k < u.size(); ++k) v[k] -= d * u[k];
  normalize(v);
  return {std::move(u), std::move(v)};
}

namespace detail {

inline LandscapeGrid empty_grid(GridKind kind, std::size_t center, const Shape& shape, const GridSpec& spec) {
  spec.validate();
  LandscapeGrid g;
  g.kind = kind;
  g.center = center;
  std::tie(g.u, g.v) = grid_directions(shape, spec.seed);
  g.extent = spec.extent;
  g.side = spec.extent > 0 ? std::size_t(2 * spec.steps + 1) : 1;
  g.step = spec.extent > 0 ? spec.extent / spec.steps : 0.0;
  g.values.assign(g.side * g.side, 0.0);
  return g;
}

template <typename T>
std::vector<T> flat_param_gradient(const Model<T>& model, const Tensor<T>& x, std::span<const int> labels) {
  std::vector<T> out;
  for (const auto& g : param_gradient(model, x, labels)) out.insert(out.end(), g.values().begin(), g.values().end());
  return out;
}

}  // namespace detail

/// Matching loss of a single train example at clamp(x_i + base + offset),
/// against the target gradient `target_grad` (flattened, as from
/// target_gradient below).
template <typename T>
double matching_loss_at(const Model<T>& model, const Dataset& data, std::size_t index, std::span<const T> target_grad,
                        const Tensor<double>* base, const Tensor<double>& offset) {
  const std::size_t idx[1] = {index};
  Tensor<float> x0 = data.batch(idx);
  Tensor<T> x(x0.shape());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double b = base ? (*base)[k] : 0.0;
    x[k] = T(std::clamp(double(x0[k]) + b + offset[k], 0.0, 1.0));
  }
  const int y[1] = {data.labels[index]};
  const auto g = detail::flat_param_gradient(model, x, y);
  return double(matching_loss<T>(target_grad, g));
}

template <typename T>
std::vector<T> target_gradient(const Model<T>& model, const Tensor<float>& targets, std::span<const int> labels) {
  return detail::flat_param_gradient(model, detail::as<T>(targets), labels);
}

/// Matching-loss surface around train example `index` (optionally shifted by a crafted delta).
template <typename T>
LandscapeGrid matching_loss_grid(const Model<T>& model, const Dataset& data, std::size_t index, const TargetSpec& target,
                                 const GridSpec& spec, const Tensor<float>* base_delta = nullptr) {
  if (index >= data.size()) throw ValueError("grid center beyond the dataset");
  LandscapeGrid g = detail::empty_grid(GridKind::matching_loss, index, data.image_shape(), spec);
  const int adv[1] = {target.adv_label};
  const auto gt = target_gradient(model, target.image, adv);
  std::optional<Tensor<double>> base;
  if (base_delta) base = base_delta->template cast<double>();
  for (std::size_t r = 0; r < g.side; ++r)
    for (std::size_t c = 0; c < g.side; ++c)
      g.values[r * g.side + c] =
          matching_loss_at(model, data, index, std::span<const T>(gt), base ? &*base : nullptr, g.offset(r, c));
  return g;
}

/// Defense noise laid over the probed points: friendly rows by dataset index
/// and `draws` random-noise samples averaged per point.
struct NoiseOverlay {
  const FriendlyNoiseSet* friendly = nullptr;
  const NoiseSpec* random = nullptr;
  int draws = 1;
};

/// Mean cross-entropy over `indices` at clamp(x_i + delta_i + offset + eps_i + mu), averaged over
/// the overlay's random draws.
template <typename T>
double train_loss_at(const Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                     const PoisonSet* poisons, const NoiseOverlay& overlay, const Tensor<double>& offset) {
  if (indices.empty()) throw ValueError("training loss over no examples");
  const std::size_t n = data.image_size();
  const bool noisy = overlay.random && overlay.random->active();
  const int draws = noisy ? std::max(overlay.draws, 1) : 1;
  if (overlay.friendly && (overlay.friendly->size() != data.size() || overlay.friendly->example_size() != n))
    throw ShapeError("overlay friendly noise does not align with the dataset");
  const Tensor<float> x0 = data.batch(indices);
  const auto labels = data.batch_labels(indices);
  double total = 0;
  for (int d = 0; d < draws; ++d) {
    Tensor<T> x(x0.shape());
    Tensor<float> mu;
    if (noisy) mu = sample_batch_noise(*overlay.random, data.image_shape(), d, indices);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const std::ptrdiff_t row = poisons ? poisons->position(indices[b]) : -1;
      for (std::size_t k = 0; k < n; ++k) {
        double v = double(x0[b * n + k]) + offset[k];
        if (row >= 0) v += double(poisons->delta(std::size_t(row))[k]);
        if (overlay.friendly) v += double(overlay.friendly->noise(indices[b])[k]);
        if (noisy) v += double(mu[b * n + k]);
        x[b * n + k] = T(std::clamp(v, 0.0, 1.0));
      }
    }
    GradMode off(false);
    total += double(cross_entropy(model.logits(constant(x)), std::span<const int>(labels)).value().item());
  }
  return total / draws;
}

/// Training-loss surface around one example or, with several indices, the
/// average over all of them with shared directions.
template <typename T>
LandscapeGrid training_loss_grid(const Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                                 const PoisonSet* poisons, const GridSpec& spec, const NoiseOverlay& overlay = {}) {
  if (indices.empty()) throw ValueError("training loss grid over no examples");
  for (std::size_t i : indices)
    if (i >= data.size()) throw ValueError("grid center beyond the dataset");
  LandscapeGrid g = detail::empty_grid(GridKind::train_loss, indices.size() == 1 ? indices[0] : LandscapeGrid::kAllPoisons,
                                       data.image_shape(), spec);
  for (std::size_t r = 0; r < g.side; ++r)
    for (std::size_t c = 0; c < g.side; ++c)
      g.values[r * g.side + c] = train_loss_at(model, data, indices, poisons, overlay, g.offset(r, c));
  return g;
}

// ---------------------------------------------------------------------------
// KL spread

struct KlProbe {
  std::vector<double> radii;             // pixel units
  std::vector<std::vector<double>> std;  // [radius][example]

  double mean_std(std::size_t r) const {
    double s = 0;
    for (double x : std.at(r)) s += x;
    return std.at(r).empty() ? 0.0 : s / double(std.at(r).size());
  }
};

/// Default radii 2, 4, 8 and 16 in 8-bit units.
inline std::vector<double> default_probe_radii() { return {2 / 255.0, 4 / 255.0, 8 / 255.0, 16 / 255.0}; }

/// For each radius r and image, the sample std over k uniform draws u in the
/// r-box of KL(f(clamp(x + u)) || f(x)).
template <typename T>
KlProbe kl_deviation_probe(const Model<T>& model, const Tensor<float>& images, const std::vector<double>& radii,
                           int k = 10, std::uint64_t seed = 0) {
  if (k < 2) throw ValueError("the KL probe needs at least two samples");
  if (images.rank() != 4) throw ShapeError("probe images must be [N, C, H, W]");
  const std::size_t N = images.dim(0), n = images.size() / std::max<std::size_t>(N, 1);
  const Tensor<T> x = detail::as<T>(images);
  const Tensor<T> q = model.probabilities(x);
  const std::size_t K = q.dim(1);
  KlProbe out;
  out.radii = radii;
  for (std::size_t ri = 0; ri < radii.size(); ++ri) {
    const double r = radii[ri];
    if (!(r >= 0)) throw ValueError("probe radius must be non-negative");
    std::vector<std::vector<double>> kl(N);
    for (int s = 0; s < k; ++s) {
      Tensor<T> xs(x.shape());
      for (std::size_t i = 0; i < N; ++i) {
        Rng rng = make_rng(seed, {stream::probe, 2, ri, i, std::uint64_t(s)});
        std::uniform_real_distribution<double> u(-r, r);
        for (std::size_t j = 0; j < n; ++j)
          xs[i * n + j] = T(std::clamp(double(x[i * n + j]) + (r > 0 ? u(rng) : 0.0), 0.0, 1.0));
      }
      const Tensor<T> p = model.probabilities(xs);
      for (std::size_t i = 0; i < N; ++i)
        kl[i].push_back(double(kl_divergence<T>(std::span<const T>(p.data() + i * K, K),
                                                std::span<const T>(q.data() + i * K, K))));
    }
    std::vector<double> sd(N);
    for (std::size_t i = 0; i < N; ++i) {
      double m = 0;
      for (double v : kl[i]) m += v;
      m /= k;
      double ss = 0;
      for (double v : kl[i]) ss += (v - m) * (v - m);
      sd[i] = r > 0 ? std::sqrt(ss / (k - 1)) : 0.0;
    }
    out.std.push_back(std::move(sd));
  }
  return out;
}

struct SignTest {
  std::size_t wins = 0;    // pairs with a > b
  std::size_t losses = 0;  // pairs with a < b
  std::size_t ties = 0;
  double p = 1.0;          // P(X >= wins), X ~ Binomial(wins + losses, 1/2)
};

/// One-sided paired sign test for a > b; ties are dropped.
inline SignTest sign_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("sign test needs paired samples");
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) ++t.wins;
    else if (a[i] < b[i]) ++t.losses;
    else ++t.ties;
  }
  const std::size_t n = t.wins + t.losses;
  // Tail sum in log space keeps large n finite.
  double p = 0;
  for (std::size_t j = t.wins; j <= n; ++j)
    p += std::exp(std::lgamma(double(n) + 1) - std::lgamma(double(j) + 1) - std::lgamma(double(n - j) + 1) -
                  double(n) * std::log(2.0));
  t.p = n ? std::min(p, 1.0) : 1.0;
  return t;
}

// ---------------------------------------------------------------------------
// Reports

/// Ordered key=value lines.
class Report {
 public:
  Report& set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_)
      if (k == key) {
        v = value;
        return *this;
      }
    entries_.emplace_back(key, value);
    return *this;
  }
  Report& set(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    return set(key, os.str());
  }
  Report& set(const std::string& key, std::int64_t value) { return set(key, std::to_string(value)); }
  Report& set(const std::string& key, std::size_t value) { return set(key, std::to_string(value)); }
  Report& set(const std::string& key, int value) { return set(key, std::to_string(value)); }
  Report& set(const std::string& key, bool value) { return set(key, std::string(value ? "true" : "false")); }
  Report& set(const std::string& key, const char* value) { return set(key, std::string(value)); }

  std::optional<std::string> get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    return std::nullopt;
  }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
    return out;
  }

  static Report parse(const std::string& text) {
    Report r;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) r.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return r;
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct EvalReport {
  double test_accuracy = 0;
  std::vector<std::size_t> target_indices;
  std::vector<bool> successes;
  std::optional<double> backdoor_rate;
  std::map<std::string, double> seconds;  // per phase
  std::uint64_t seed = 0;

  double success_rate() const {
    if (successes.empty()) return 0.0;
    return double(std::count(successes.begin(), successes.end(), true)) / double(successes.size());
  }

  Report report() const {
    Report r;
    r.set("seed", std::to_string(seed));
    r.set("test_accuracy", test_accuracy);
    r.set("targets", successes.size());
    for (std::size_t i = 0; i < successes.size(); ++i)
      r.set("target." + std::to_string(target_indices.at(i)) + ".success", bool(successes[i]));
    r.set("poison_success_rate", success_rate());
    if (backdoor_rate) r.set("backdoor_success_rate", *backdoor_rate);
    for (const auto& [phase, s] : seconds) r.set("seconds." + phase, s);
    return r;
  }
};

}  // namespace plab
