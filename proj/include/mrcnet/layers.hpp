#pragma once

#include <string>

#include "mrcnet/param.hpp"
#include "mrcnet/tape.hpp"

namespace mrc {

// Parameter-owning layer wrappers. Construction fixes shapes and init specs;
// collect() registers parameters under a qualified name; forward() records
// onto the caller's tape.

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;

  Conv2d(i64 cin, i64 cout, i64 kh, i64 kw, ConvSpec spec, bool bias = true)
      : spec_(spec), has_bias_(bias) {
    if (cin <= 0 || cout <= 0) throw ConfigError("Conv2d: channel counts must be positive");
    if (spec.groups < 1 || cin % spec.groups != 0 || cout % spec.groups != 0)
      throw ConfigError("Conv2d: channels not divisible by groups");
    const i64 cing = cin / spec.groups;
    w_ = ParamTensor<T>(Shape{cout, cing, kh, kw}, InitSpec::kaiming(cing * kh * kw));
    if (bias) b_ = ParamTensor<T>(Shape{1, cout, 1, 1}, InitSpec::zero());
  }

  static Conv2d square(i64 cin, i64 cout, i64 k, int stride, int pad, bool bias = true) {
    return Conv2d(cin, cout, k, k, ConvSpec::square(stride, pad), bias);
  }

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x) {
    auto w = t.param(w_);
    ValueRef<T> b = has_bias_ ? t.param(b_) : nullptr;
    return t.conv2d(x, w, b, spec_);
  }

  void collect(ParamStore<T>& store, const std::string& prefix) {
    store.add(prefix + ".w", &w_);
    if (has_bias_) store.add(prefix + ".b", &b_);
  }

  i64 in_channels() const { return w_.value.c() * spec_.groups; }
  i64 out_channels() const { return w_.value.n(); }
  const ConvSpec& spec() const { return spec_; }
  ParamTensor<T>& weight() { return w_; }
  ParamTensor<T>& bias() { return b_; }
  bool has_bias() const { return has_bias_; }

 private:
  ParamTensor<T> w_, b_;
  ConvSpec spec_;
  bool has_bias_ = true;
};

template <typename T>
class TransposedConv2d {
 public:
  TransposedConv2d() = default;

  TransposedConv2d(i64 cin, i64 cout, i64 k, int stride, int pad, int out_pad,
                   bool bias = true)
      : stride_(stride), pad_(pad), out_pad_(out_pad), has_bias_(bias) {
    if (cin <= 0 || cout <= 0)
      throw ConfigError("TransposedConv2d: channel counts must be positive");
    w_ = ParamTensor<T>(Shape{cin, cout, k, k}, InitSpec::kaiming(cin * k * k));
    if (bias) b_ = ParamTensor<T>(Shape{1, cout, 1, 1}, InitSpec::zero());
  }

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x) {
    auto w = t.param(w_);
    ValueRef<T> b = has_bias_ ? t.param(b_) : nullptr;
    return t.transposed_conv2d(x, w, b, stride_, pad_, out_pad_);
  }

  void collect(ParamStore<T>& store, const std::string& prefix) {
    store.add(prefix + ".w", &w_);
    if (has_bias_) store.add(prefix + ".b", &b_);
  }

  i64 out_channels() const { return w_.value.c(); }

 private:
  ParamTensor<T> w_, b_;
  int stride_ = 1, pad_ = 0, out_pad_ = 0;
  bool has_bias_ = true;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;

  explicit BatchNorm2d(i64 channels, T eps = T(1e-5), T momentum = T(0.1))
      : eps_(eps), momentum_(momentum) {
    if (channels <= 0) throw ConfigError("BatchNorm2d: channels must be positive");
    gamma_ = ParamTensor<T>(Shape{1, channels, 1, 1}, InitSpec::constant(1.0));
    beta_ = ParamTensor<T>(Shape{1, channels, 1, 1}, InitSpec::zero());
    running_mean_ = Tensor<T>(1, channels, 1, 1, T(0));
    running_var_ = Tensor<T>(1, channels, 1, 1, T(1));
  }

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x, bool training) {
    auto g = t.param(gamma_);
    auto b = t.param(beta_);
    return t.batch_norm(x, g, b, running_mean_, running_var_, training, momentum_, eps_);
  }

  void collect(ParamStore<T>& store, const std::string& prefix) {
    store.add(prefix + ".gamma", &gamma_);
    store.add(prefix + ".beta", &beta_);
  }

  void collect_buffers(BufferStore<T>& store, const std::string& prefix) {
    store.add(prefix + ".running_mean", &running_mean_);
    store.add(prefix + ".running_var", &running_var_);
  }

  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

 private:
  ParamTensor<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  T eps_ = T(1e-5), momentum_ = T(0.1);
};

template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;

  GroupNorm(i64 channels, int num_groups, T eps = T(1e-5))
      : num_groups_(num_groups), eps_(eps) {
    if (channels <= 0) throw ConfigError("GroupNorm: channels must be positive");
    if (num_groups < 1 || channels % num_groups != 0)
      throw ConfigError("GroupNorm: " + std::to_string(channels) +
                        " channels not divisible by " + std::to_string(num_groups) +
                        " groups");
    gamma_ = ParamTensor<T>(Shape{1, channels, 1, 1}, InitSpec::constant(1.0));
    beta_ = ParamTensor<T>(Shape{1, channels, 1, 1}, InitSpec::zero());
  }

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x) {
    auto g = t.param(gamma_);
    auto b = t.param(beta_);
    return t.group_norm(x, num_groups_, g, b, eps_);
  }

  void collect(ParamStore<T>& store, const std::string& prefix) {
    store.add(prefix + ".gamma", &gamma_);
    store.add(prefix + ".beta", &beta_);
  }

 private:
  ParamTensor<T> gamma_, beta_;
  int num_groups_ = 1;
  T eps_ = T(1e-5);
};

// conv -> batch norm -> relu
template <typename T>
class Cbr {
 public:
  Cbr() = default;

  Cbr(i64 cin, i64 cout, i64 k, int stride, int pad, T bn_eps = T(1e-5),
      T bn_momentum = T(0.1))
      : conv_(Conv2d<T>::square(cin, cout, k, stride, pad, /*bias=*/false)),
        bn_(cout, bn_eps, bn_momentum) {}

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x, bool training) {
    return t.relu(bn_.forward(t, conv_.forward(t, x), training));
  }

  void collect(ParamStore<T>& store, const std::string& prefix) {
    conv_.collect(store, prefix + ".conv");
    bn_.collect(store, prefix + ".bn");
  }

  void collect_buffers(BufferStore<T>& store, const std::string& prefix) {
    bn_.collect_buffers(store, prefix + ".bn");
  }

  Conv2d<T>& conv() { return conv_; }
  BatchNorm2d<T>& bn() { return bn_; }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
};

}  // namespace mrc
