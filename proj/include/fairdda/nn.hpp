#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fairdda/autodiff.hpp"

namespace fairdda {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled decay; only applied to parameters flagged with weight_decay.
  double weight_decay = 1e-3;
};

// One Adam update per parameter. Gradients are consumed and reset to zero.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, const AdamOptions& opt) {
  for (Parameter<T>* p : params) {
    ++p->step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p->step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p->step));
    const bool decay = p->weight_decay && opt.weight_decay != 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      const double m = opt.beta1 * p->first_moment[i] + (1.0 - opt.beta1) * g;
      const double v = opt.beta2 * p->second_moment[i] + (1.0 - opt.beta2) * g * g;
      p->first_moment[i] = static_cast<T>(m);
      p->second_moment[i] = static_cast<T>(v);
      double w = p->value[i];
      if (decay) w -= opt.lr * opt.weight_decay * w;
      w -= opt.lr * (m / bc1) / (std::sqrt(v / bc2) + opt.eps);
      p->value[i] = static_cast<T>(w);
    }
    p->zero_grad();
  }
}

template <typename T>
void adam_step(std::vector<Parameter<T>*> params, const AdamOptions& opt) {
  adam_step<T>(std::span<Parameter<T>* const>(params), opt);
}

// Embedding-table initializer: Xavier-uniform bound sqrt(6 / (rows + cols)), scaled by 1/sqrt(cols).
template <typename T>
Tensor<T> xavier_uniform_scaled(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double bound =
      std::sqrt(6.0 / static_cast<double>(rows + cols)) / std::sqrt(static_cast<double>(cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(rows, cols);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

enum class Activation { Identity, Relu };

// Fully connected layer y = x W (+ b).
template <typename T>
struct Linear {
  Parameter<T> weight;
  Parameter<T> bias;
  bool has_bias = true;

  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng)
      : has_bias(with_bias) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> w(in, out);
    for (auto& v : w.values()) v = static_cast<T>(dist(rng));
    weight = Parameter<T>(name + ".weight", std::move(w));
    if (has_bias) bias = Parameter<T>(name + ".bias", Tensor<T>(1, out));
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) {
    Var<T> y = matmul(x, tape.parameter(weight));
    return has_bias ? add_row_vector(y, tape.parameter(bias)) : y;
  }

  std::size_t in_features() const { return weight.value.rows(); }
  std::size_t out_features() const { return weight.value.cols(); }
};

struct LayerSpec {
  std::size_t out = 0;
  Activation activation = Activation::Identity;
  bool bias = true;
};

// Stack of affine layers with per-layer activation.
template <typename T>
class FeedForwardNet {
 public:
  FeedForwardNet() = default;
  FeedForwardNet(std::string name, std::size_t in, const std::vector<LayerSpec>& layers,
                 std::mt19937_64& rng) {
    std::size_t width = in;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers_.emplace_back(name + "." + std::to_string(i), width, layers[i].out, layers[i].bias, rng);
      activations_.push_back(layers[i].activation);
      width = layers[i].out;
    }
  }

  // Single affine layer in -> out.
  static FeedForwardNet classifier(std::size_t in, std::size_t classes, std::mt19937_64& rng) {
    return FeedForwardNet("classifier", in, {{classes, Activation::Identity, true}}, rng);
  }

  // Two layers d -> d -> d with ReLU in between and no output bias.
  static FeedForwardNet detector(std::size_t d, std::mt19937_64& rng) {
    return FeedForwardNet("detector", d,
                          {{d, Activation::Relu, true}, {d, Activation::Identity, false}}, rng);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (x.cols() != layers_[i].in_features()) {
        throw ShapeError("FeedForwardNet: layer " + std::to_string(i) + " expects " +
                         std::to_string(layers_[i].in_features()) + " inputs, got " +
                         std::to_string(x.cols()));
      }
      x = layers_[i](tape, x);
      if (activations_[i] == Activation::Relu) x = relu(x);
    }
    return x;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      if (l.has_bias) out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<const Parameter<T>*> parameters() const {
    std::vector<const Parameter<T>*> out;
    for (const auto& l : layers_) {
      out.push_back(&l.weight);
      if (l.has_bias) out.push_back(&l.bias);
    }
    return out;
  }

  std::size_t depth() const { return layers_.size(); }

 private:
  std::vector<Linear<T>> layers_;
  std::vector<Activation> activations_;
};

}  // namespace fairdda
