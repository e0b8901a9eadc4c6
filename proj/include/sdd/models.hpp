#pragma once

// Small convolutional classifiers and their per-position logit maps.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "sdd/errors.hpp"
#include "sdd/ops.hpp"
#include "sdd/tensor.hpp"

namespace sdd {

struct ConvBlockSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;

  bool operator==(const ConvBlockSpec&) const = default;
};

/// Block with padding (kernel - 1) / 2, which maps n to n / stride for n divisible by stride.
inline ConvBlockSpec conv_block(std::size_t out_channels, std::size_t kernel, std::size_t stride) {
  return {out_channels, kernel, stride, (kernel - 1) / 2};
}

struct ConvNetSpec {
  std::size_t in_channels = 1;
  std::size_t input_size = 32;
  std::vector<ConvBlockSpec> blocks;
  std::size_t num_classes = 0;

  std::size_t feature_channels() const { return blocks.empty() ? in_channels : blocks.back().out_channels; }

  /// Product of all block strides.
  std::size_t downsample_factor() const {
    std::size_t d = 1;
    for (const auto& b : blocks) d *= b.stride;
    return d;
  }

  /// Spatial size after each block, following the convolution size formula.
  std::vector<std::size_t> spatial_sizes() const {
    std::vector<std::size_t> sizes;
    std::size_t n = input_size;
    for (const auto& b : blocks) {
      if (b.kernel > n + 2 * b.padding) {
        throw ConfigError("conv block kernel " + std::to_string(b.kernel) + " exceeds padded input " +
                          std::to_string(n));
      }
      n = (n + 2 * b.padding - b.kernel) / b.stride + 1;
      sizes.push_back(n);
    }
    return sizes;
  }

  std::size_t feature_size() const {
    auto s = spatial_sizes();
    return s.empty() ? input_size : s.back();
  }

  void validate() const {
    if (blocks.empty()) throw ConfigError("network needs at least one conv block");
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
    if (in_channels == 0 || input_size == 0) throw ConfigError("input dims must be positive");
    for (const auto& b : blocks) {
      if (b.out_channels == 0 || b.kernel == 0 || b.stride == 0) {
        throw ConfigError("conv block fields must be positive");
      }
    }
    const std::size_t d = downsample_factor();
    if (input_size % d != 0) {
      throw ConfigError("input size " + std::to_string(input_size) + " not divisible by downsampling factor " +
                        std::to_string(d));
    }
    if (feature_size() * d != input_size) {
      throw ConfigError("final feature map " + std::to_string(feature_size()) + " does not equal input / " +
                        std::to_string(d));
    }
  }

  bool operator==(const ConvNetSpec&) const = default;
};

/// 4-block teacher: 32/64/128/128 channels, 4x4 features on 32x32 input.
inline ConvNetSpec reference_teacher(std::size_t num_classes, std::size_t in_channels = 1) {
  return {in_channels, 32, {conv_block(32, 3, 2), conv_block(64, 3, 2), conv_block(128, 3, 2), conv_block(128, 1, 1)},
          num_classes};
}

/// 2-block student: 16/32 channels, 4x4 features on 32x32 input.
inline ConvNetSpec reference_student(std::size_t num_classes, std::size_t in_channels = 1) {
  return {in_channels, 32, {conv_block(16, 5, 4), conv_block(32, 3, 2)}, num_classes};
}

/// Per-position class logits, B x K x h x w with h == w.
template <class T>
struct LogitMap {
  Tensor<T> values;

  std::size_t batch() const { return values.dim(0); }
  std::size_t classes() const { return values.dim(1); }
  std::size_t height() const { return values.dim(2); }
  std::size_t width() const { return values.dim(3); }
};

/// Projects features (B x c x h x w) with W (c x K) at every position, plus an optional bias.
template <class T>
LogitMap<T> logit_map(const Tensor<T>& features, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  if (features.ndim() != 4 || weight.ndim() != 2 || features.dim(1) != weight.dim(0)) {
    throw DimensionError("logit_map: feature channels of " + to_string(features.shape()) +
                         " do not match projection rows of " + to_string(weight.shape()));
  }
  if (features.dim(2) != features.dim(3)) {
    throw DimensionError("logit_map: feature map must be square, got " + to_string(features.shape()));
  }
  auto out = pointwise_project(features, weight);
  if (bias) out = add_channel_bias(out, *bias);
  return {out};
}

/// Mean over all spatial positions: B x K.
template <class T>
Tensor<T> global_logits(const LogitMap<T>& map) {
  return global_avg_pool(map.values);
}

template <class T>
class ConvNet {
 public:
  ConvNet() = default;

  /// Fan-in scaled uniform init: kernels U(+-sqrt(6/fan_in)), classifier U(+-1/sqrt(fan_in)), zero biases.
  static ConvNet init(const ConvNetSpec& spec, std::uint64_t seed) {
    spec.validate();
    ConvNet net;
    net.spec_ = spec;
    std::mt19937_64 rng(seed);
    auto uniform = [&](std::size_t n, double bound) {
      std::uniform_real_distribution<double> dist(-bound, bound);
      std::vector<T> v(n);
      for (auto& x : v) x = static_cast<T>(dist(rng));
      return v;
    };
    std::size_t cin = spec.in_channels;
    for (const auto& b : spec.blocks) {
      const std::size_t fan_in = cin * b.kernel * b.kernel;
      net.kernels_.emplace_back(Shape{b.out_channels, cin, b.kernel, b.kernel},
                                uniform(b.out_channels * fan_in, std::sqrt(6.0 / static_cast<double>(fan_in))), true);
      net.biases_.push_back(Tensor<T>::zeros({b.out_channels}, true));
      cin = b.out_channels;
    }
    net.classifier_ = Tensor<T>({cin, spec.num_classes},
                                uniform(cin * spec.num_classes, 1.0 / std::sqrt(static_cast<double>(cin))), true);
    net.classifier_bias_ = Tensor<T>::zeros({spec.num_classes}, true);
    return net;
  }

  const ConvNetSpec& spec() const { return spec_; }

  /// Penultimate feature map B x c x h x w.
  Tensor<T> forward_features(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != spec_.in_channels) {
      throw DimensionError("forward_features: input " + to_string(x.shape()) + " expects " +
                           std::to_string(spec_.in_channels) + " channels");
    }
    const std::size_t d = spec_.downsample_factor();
    if (x.dim(2) % d != 0 || x.dim(3) % d != 0) {
      throw ConfigError("forward_features: input " + to_string(x.shape()) + " not divisible by downsampling factor " +
                        std::to_string(d));
    }
    Tensor<T> h = x;
    for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
      const auto& b = spec_.blocks[i];
      h = relu(add_channel_bias(conv2d(h, kernels_[i], b.stride, b.padding), biases_[i]));
    }
    return h;
  }

  LogitMap<T> logit_map(const Tensor<T>& features) const {
    return sdd::logit_map(features, classifier_, &classifier_bias_);
  }

  LogitMap<T> forward_map(const Tensor<T>& x) const { return logit_map(forward_features(x)); }

  /// Conventional path: classifier applied to globally pooled features.
  Tensor<T> pooled_logits(const Tensor<T>& features) const {
    return add_channel_bias(matmul(global_avg_pool(features), classifier_), classifier_bias_);
  }

  /// Kernels and biases per block, then classifier weight and bias.
  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> ps;
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
      ps.push_back(kernels_[i]);
      ps.push_back(biases_[i]);
    }
    ps.push_back(classifier_);
    ps.push_back(classifier_bias_);
    return ps;
  }

  void set_trainable(bool on) {
    for (auto& p : parameters()) p.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

  const Tensor<T>& classifier() const { return classifier_; }
  const Tensor<T>& classifier_bias() const { return classifier_bias_; }
  const Tensor<T>& kernel(std::size_t block) const { return kernels_.at(block); }
  const Tensor<T>& bias(std::size_t block) const { return biases_.at(block); }

  /// Replaces all parameters (same order and shapes as parameters()).
  void load_parameters(const std::vector<Tensor<T>>& ps) {
    const auto current = parameters();
    if (ps.size() != current.size()) {
      throw DimensionError("expected " + std::to_string(current.size()) + " parameter tensors, got " +
                           std::to_string(ps.size()));
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i].shape() != current[i].shape()) {
        throw DimensionError("parameter " + std::to_string(i) + " has shape " + to_string(ps[i].shape()) +
                             ", expected " + to_string(current[i].shape()));
      }
    }
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
      kernels_[i] = ps[2 * i];
      biases_[i] = ps[2 * i + 1];
    }
    classifier_ = ps[ps.size() - 2];
    classifier_bias_ = ps.back();
  }

  /// Deep copy; the clone shares no storage with this network.
  ConvNet clone() const {
    ConvNet c;
    c.spec_ = spec_;
    auto copy = [](const Tensor<T>& t) { return Tensor<T>(t.shape(), t.values(), t.requires_grad()); };
    for (const auto& k : kernels_) c.kernels_.push_back(copy(k));
    for (const auto& b : biases_) c.biases_.push_back(copy(b));
    c.classifier_ = copy(classifier_);
    c.classifier_bias_ = copy(classifier_bias_);
    return c;
  }

 private:
  ConvNetSpec spec_;
  std::vector<Tensor<T>> kernels_;
  std::vector<Tensor<T>> biases_;
  Tensor<T> classifier_;
  Tensor<T> classifier_bias_;
};

}  // namespace sdd
