#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "plab/autograd.hpp"
#include "plab/errors.hpp"
#include "plab/rng.hpp"
#include "plab/tensor.hpp"

namespace plab {

enum class Arch { mlp, smallconv, transfer_head };
enum class Activation { relu, tanh, identity };

inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::mlp: return "mlp";
    case Arch::smallconv: return "smallconv";
    case Arch::transfer_head: return "transfer-head";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "mlp") return Arch::mlp;
  if (s == "smallconv") return Arch::smallconv;
  if (s == "transfer-head") return Arch::transfer_head;
  throw ValueError("unknown architecture '" + s + "'");
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ValueError("unknown activation '" + s + "'");
}

/// Architecture description. Together with a seed it fixes every parameter.
///
/// mlp:           flatten -> [dense -> act] x hidden.size() -> dense
/// smallconv:     2 x [conv3x3 -> act -> avgpool2] -> dense
/// transfer-head: the smallconv stack, frozen, under a trainable dense head
///
/// Per-channel (x - mean) / stddev is applied as a fixed first layer; empty
/// vectors mean identity.
struct ModelSpec {
  Arch arch = Arch::smallconv;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t classes = 10;
  std::vector<std::size_t> hidden{128};
  std::array<std::size_t, 2> conv{8, 16};
  Activation activation = Activation::relu;
  std::vector<float> mean;
  std::vector<float> stddev;

  std::size_t input_size() const { return channels * height * width; }

  std::size_t feature_size() const {
    if (arch == Arch::mlp) return hidden.empty() ? input_size() : hidden.back();
    return conv[1] * (height / 4) * (width / 4);
  }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0) throw ValueError("model input extents must be positive");
    if (classes < 2) throw ValueError("a classifier needs at least two classes");
    if (arch != Arch::mlp && (height % 4 || width % 4))
      throw ValueError("conv stacks need height and width divisible by 4");
    if (arch != Arch::mlp && (conv[0] == 0 || conv[1] == 0)) throw ValueError("conv widths must be positive");
    for (auto h : hidden)
      if (h == 0) throw ValueError("hidden widths must be positive");
    if (!mean.empty() && mean.size() != channels) throw ValueError("normalization mean needs one value per channel");
    if (!stddev.empty() && stddev.size() != channels) throw ValueError("normalization std needs one value per channel");
    for (float s : stddev)
      if (!(s > 0)) throw ValueError("normalization std must be positive");
  }

  /// (name, shape, fan_in) for every parameter, in storage order.
  std::vector<std::tuple<std::string, Shape, std::size_t>> layout() const {
    std::vector<std::tuple<std::string, Shape, std::size_t>> out;
    if (arch == Arch::mlp) {
      std::size_t in = input_size();
      for (std::size_t i = 0; i < hidden.size(); ++i) {
        const std::string p = "fc" + std::to_string(i + 1);
        out.emplace_back(p + ".w", Shape{in, hidden[i]}, in);
        out.emplace_back(p + ".b", Shape{hidden[i]}, in);
        in = hidden[i];
      }
    } else {
      out.emplace_back("conv1.w", Shape{conv[0], channels * 9}, channels * 9);
      out.emplace_back("conv1.b", Shape{conv[0]}, channels * 9);
      out.emplace_back("conv2.w", Shape{conv[1], conv[0] * 9}, conv[0] * 9);
      out.emplace_back("conv2.b", Shape{conv[1]}, conv[0] * 9);
    }
    out.emplace_back("head.w", Shape{feature_size(), classes}, feature_size());
    out.emplace_back("head.b", Shape{classes}, feature_size());
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, shape, fan_in] : layout()) n += numel(shape);
    return n;
  }
};

template <typename T>
class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng = make_rng(seed, {stream::init});
    for (const auto& [name, shape, fan_in] : spec_.layout()) {
      Tensor<T> t(shape);
      if (name.back() == 'w') init_weights(t, name, fan_in, rng);
      params_.emplace_back(name, leaf(std::move(t)));
    }
  }

  Model(const Model& other) : spec_(other.spec_) {
    for (const auto& [name, v] : other.params_) params_.emplace_back(name, leaf(v.value()));
  }
  Model& operator=(const Model& other) {
    if (this != &other) {
      Model copy(other);
      *this = std::move(copy);
    }
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  ModelSpec& mutable_spec() { return spec_; }

  const std::vector<std::pair<std::string, Var<T>>>& params() const { return params_; }

  Var<T>& param(const std::string& name) {
    for (auto& [n, v] : params_)
      if (n == name) return v;
    throw ValueError("no parameter named '" + name + "'");
  }

  /// Parameters updated by training; the frozen feature stack is excluded for transfer-head.
  std::vector<Var<T>> trainable() const {
    std::vector<Var<T>> out;
    for (const auto& [name, v] : params_)
      if (spec_.arch != Arch::transfer_head || name.rfind("head.", 0) == 0) out.push_back(v);
    return out;
  }

  /// Redraws the dense head from `seed`, leaving the feature stack alone.
  void reinit_head(std::uint64_t seed) {
    Rng rng = make_rng(seed, {stream::init, 99});
    for (const auto& [name, shape, fan_in] : spec_.layout()) {
      if (name.rfind("head.", 0) != 0) continue;
      Tensor<T>& t = param(name).mutable_value();
      t.fill(T(0));
      if (name.back() == 'w') init_weights(t, name, fan_in, rng);
    }
  }

  /// Penultimate representation of pixel-space input [N, C, H, W].
  Var<T> features(const Var<T>& x) const {
    check_input(x.shape());
    const std::size_t n = x.shape()[0];
    Var<T> h = normalize(x);
    if (spec_.arch == Arch::mlp) {
      h = reshape(h, Shape{n, spec_.input_size()});
      for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        const std::string p = "fc" + std::to_string(i + 1);
        h = activate(add_channel_bias(matmul(h, get(p + ".w")), get(p + ".b")));
      }
      return h;
    }
    h = avg_pool2(activate(conv3x3(h, get("conv1.w"), get("conv1.b"))));
    h = avg_pool2(activate(conv3x3(h, get("conv2.w"), get("conv2.b"))));
    return reshape(h, Shape{n, spec_.feature_size()});
  }

  Var<T> logits(const Var<T>& x) const {
    return add_channel_bias(matmul(features(x), get("head.w")), get("head.b"));
  }

  /// Class probabilities for a batch, without recording a graph.
  Tensor<T> probabilities(const Tensor<T>& x) const {
    GradMode off(false);
    return softmax(logits(constant(x))).value();
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> out(spec_, 0);
    for (const auto& [name, v] : params_) out.param(name).mutable_value() = v.value().template cast<U>();
    return out;
  }

 private:
  const Var<T>& get(const std::string& name) const {
    for (const auto& [n, v] : params_)
      if (n == name) return v;
    throw ValueError("no parameter named '" + name + "'");
  }

  void init_weights(Tensor<T>& t, const std::string& name, std::size_t fan_in, Rng& rng) const {
    // Kaiming fan-in scaling; the output layer uses gain 1.
    const bool rectified = name.rfind("head.", 0) != 0 && spec_.activation == Activation::relu;
    std::normal_distribution<double> dist(0.0, std::sqrt((rectified ? 2.0 : 1.0) / double(fan_in)));
    for (T& v : t.values()) v = static_cast<T>(dist(rng));
  }

  void check_input(const Shape& s) const {
    if (s.size() != 4 || s[1] != spec_.channels || s[2] != spec_.height || s[3] != spec_.width)
      throw ShapeError("model expects [N," + std::to_string(spec_.channels) + "," + std::to_string(spec_.height) +
                       "," + std::to_string(spec_.width) + "] input, got " + shape_str(s));
  }

  Var<T> normalize(const Var<T>& x) const {
    if (spec_.mean.empty() && spec_.stddev.empty()) return x;
    std::vector<T> scale(spec_.channels, T(1)), shift(spec_.channels, T(0));
    for (std::size_t c = 0; c < spec_.channels; ++c) {
      const T s = spec_.stddev.empty() ? T(1) : T(spec_.stddev[c]);
      const T m = spec_.mean.empty() ? T(0) : T(spec_.mean[c]);
      scale[c] = T(1) / s;
      shift[c] = -m / s;
    }
    return channel_affine(x, std::move(scale), std::move(shift));
  }

  Var<T> activate(const Var<T>& h) const {
    switch (spec_.activation) {
      case Activation::relu: return relu(h);
      case Activation::tanh: return tanh(h);
      case Activation::identity: return h;
    }
    return h;
  }

  static Var<T> conv3x3(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const std::size_t n = x.shape()[0], h = x.shape()[2], wd = x.shape()[3], co = w.shape()[0];
    Var<T> y = matmul(w, im2col(x, 3));  // [co, n*h*w]
    y = swap01(reshape(y, Shape{co, n, h * wd}));
    return reshape(add_channel_bias(y, b), Shape{n, co, h, wd});
  }

  ModelSpec spec_;
  std::vector<std::pair<std::string, Var<T>>> params_;
};

}  // namespace plab
