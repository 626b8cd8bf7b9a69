#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mrcnet/layers.hpp"

namespace mrc {

enum class AttentionKind { Lssm, Se, Sge, Caa };

inline const char* attention_kind_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::Lssm: return "lssm";
    case AttentionKind::Se: return "se";
    case AttentionKind::Sge: return "sge";
    case AttentionKind::Caa: return "caa";
  }
  return "?";
}

inline AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "lssm") return AttentionKind::Lssm;
  if (s == "se") return AttentionKind::Se;
  if (s == "sge") return AttentionKind::Sge;
  if (s == "caa") return AttentionKind::Caa;
  throw ConfigError("unknown attention kind '" + s +
                    "' (registered: lssm, se, sge, caa)");
}

struct AttentionConfig {
  AttentionKind kind = AttentionKind::Lssm;
  i64 lssm_kernel = 1;   // strip-conv kernel; 1 reproduces the plain 1x1 form
  i64 se_reduction = 16;
  int sge_groups = 8;
  i64 caa_kernel = 11;   // strip depthwise kernel
};

// Shape-preserving attention transform, pluggable inside the pyramid.
template <typename T>
class AttentionModule {
 public:
  virtual ~AttentionModule() = default;
  virtual ValueRef<T> forward(Tape<T>& t, ValueRef<T> x) = 0;
  virtual void collect(ParamStore<T>& store, const std::string& prefix) = 0;
  virtual AttentionKind kind() const = 0;
};

// Lightweight spatial screening: directional mean pooling, a channel-mixing
// strip conv per direction, sigmoid gates multiplied back onto the input.
// Y = X * sigma(conv_h(mean over W)) * sigma(conv_w(mean over H)).
template <typename T>
class LssmBlock : public AttentionModule<T> {
 public:
  LssmBlock() = default;

  explicit LssmBlock(i64 channels, i64 kernel = 1) {
    if (kernel < 1 || kernel % 2 == 0)
      throw ConfigError("LssmBlock: kernel must be odd and positive");
    const int pad = static_cast<int>((kernel - 1) / 2);
    conv_h_ = Conv2d<T>(channels, channels, kernel, 1, ConvSpec{1, 1, pad, 0, 1});
    conv_w_ = Conv2d<T>(channels, channels, 1, kernel, ConvSpec{1, 1, 0, pad, 1});
  }

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x) override {
    auto gate_h = t.sigmoid(conv_h_.forward(t, t.pool_mean(x, Axis::W)));  // [N,C,H,1]
    auto gate_w = t.sigmoid(conv_w_.forward(t, t.pool_mean(x, Axis::H)));  // [N,C,1,W]
    return t.mul(t.mul(x, gate_h), gate_w);
  }

  void collect(ParamStore<T>& store, const std::string& prefix) override {
    conv_h_.collect(store, prefix + ".conv_h");
    conv_w_.collect(store, prefix + ".conv_w");
  }

  AttentionKind kind() const override { return AttentionKind::Lssm; }

 private:
  Conv2d<T> conv_h_, conv_w_;
};

// Squeeze-and-excitation: global pool, bottleneck 1x1 pair with reduction r,
// sigmoid, channel-wise rescale.
template <typename T>
class SeBlock : public AttentionModule<T> {
 public:
  SeBlock() = default;

  explicit SeBlock(i64 channels, i64 reduction = 16) {
    const i64 mid = std::max<i64>(1, channels / reduction);
    fc1_ = Conv2d<T>::square(channels, mid, 1, 1, 0);
    fc2_ = Conv2d<T>::square(mid, channels, 1, 1, 0);
  }

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x) override {
    auto s = t.global_avg_pool(x);
    auto gate = t.sigmoid(fc2_.forward(t, t.relu(fc1_.forward(t, s))));
    return t.mul(x, gate);
  }

  void collect(ParamStore<T>& store, const std::string& prefix) override {
    fc1_.collect(store, prefix + ".fc1");
    fc2_.collect(store, prefix + ".fc2");
  }

  AttentionKind kind() const override { return AttentionKind::Se; }

 private:
  Conv2d<T> fc1_, fc2_;
};

// Spatial group enhance: per channel group, the similarity between each
// position and the group's pooled descriptor is normalized over space,
// rescaled by a per-group affine pair, squashed with sigmoid and used as a
// spatial gate. Learnable state is one (scale, bias) pair per group.
template <typename T>
class SgeBlock : public AttentionModule<T> {
 public:
  SgeBlock() = default;

  explicit SgeBlock(i64 channels, int groups = 8) : groups_(groups) {
    if (groups < 1 || channels % groups != 0)
      throw ConfigError("SgeBlock: channels not divisible by groups");
    weight_ = ParamTensor<T>(Shape{1, groups, 1, 1}, InitSpec::constant(1.0));
    bias_ = ParamTensor<T>(Shape{1, groups, 1, 1}, InitSpec::zero());
    // fixed identity affine for the spatial normalization step
    norm_gamma_ = Tensor<T>(1, 1, 1, 1, T(1));
    norm_beta_ = Tensor<T>(1, 1, 1, 1, T(0));
  }

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x) override {
    const Shape s = x->val.shape();
    const i64 N = s[0], C = s[1], H = s[2], W = s[3];
    if (C % groups_ != 0)
      throw ShapeError("SgeBlock: input channels not divisible by groups");
    const i64 cg = C / groups_;
    const i64 B = N * groups_;
    auto xg = t.reshape(x, Shape{B, cg, H, W});
    auto pooled = t.global_avg_pool(xg);  // [B,cg,1,1]
    auto sim = t.matmul(t.reshape(pooled, Shape{B, 1, 1, cg}),
                        t.reshape(xg, Shape{B, 1, cg, H * W}));
    auto simmap = t.reshape(sim, Shape{B, 1, H, W});
    auto g1 = t.leaf(norm_gamma_);
    auto b1 = t.leaf(norm_beta_);
    auto norm = t.group_norm(simmap, 1, g1, b1, T(1e-5));
    auto per_img = t.reshape(norm, Shape{N, groups_, H, W});
    auto gated = t.add(t.mul(per_img, t.param(weight_)), t.param(bias_));
    auto gate = t.sigmoid(t.reshape(gated, Shape{B, 1, H, W}));
    return t.reshape(t.mul(xg, gate), s);
  }

  void collect(ParamStore<T>& store, const std::string& prefix) override {
    store.add(prefix + ".weight", &weight_);
    store.add(prefix + ".bias", &bias_);
  }

  AttentionKind kind() const override { return AttentionKind::Sge; }

 private:
  int groups_ = 8;
  ParamTensor<T> weight_, bias_;
  Tensor<T> norm_gamma_, norm_beta_;
};

// Context anchor attention: a fixed 7x7 local mean, a 1x1 conv, horizontal
// and vertical strip depthwise convs, a second 1x1 conv and a sigmoid gate.
// The local mean is a constant-weight depthwise conv, so it carries no
// learnable parameters.
template <typename T>
class CaaBlock : public AttentionModule<T> {
 public:
  CaaBlock() = default;

  explicit CaaBlock(i64 channels, i64 strip_kernel = 11) : channels_(channels) {
    if (strip_kernel < 1 || strip_kernel % 2 == 0)
      throw ConfigError("CaaBlock: strip kernel must be odd and positive");
    const int pad = static_cast<int>((strip_kernel - 1) / 2);
    conv1_ = Conv2d<T>::square(channels, channels, 1, 1, 0);
    dw_h_ = Conv2d<T>(channels, channels, 1, strip_kernel,
                      ConvSpec{1, 1, 0, pad, static_cast<int>(channels)});
    dw_v_ = Conv2d<T>(channels, channels, strip_kernel, 1,
                      ConvSpec{1, 1, pad, 0, static_cast<int>(channels)});
    conv2_ = Conv2d<T>::square(channels, channels, 1, 1, 0);
    pool_w_ = Tensor<T>(channels, 1, 7, 7, T(1) / T(49));
  }

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x) override {
    auto pw = t.leaf(pool_w_);
    auto pooled = t.conv2d(x, pw, nullptr,
                           ConvSpec{1, 1, 3, 3, static_cast<int>(channels_)});
    auto a = conv1_.forward(t, pooled);
    a = dw_v_.forward(t, dw_h_.forward(t, a));
    auto gate = t.sigmoid(conv2_.forward(t, a));
    return t.mul(x, gate);
  }

  void collect(ParamStore<T>& store, const std::string& prefix) override {
    conv1_.collect(store, prefix + ".conv1");
    dw_h_.collect(store, prefix + ".dw_h");
    dw_v_.collect(store, prefix + ".dw_v");
    conv2_.collect(store, prefix + ".conv2");
  }

  AttentionKind kind() const override { return AttentionKind::Caa; }

 private:
  i64 channels_ = 0;
  Conv2d<T> conv1_, dw_h_, dw_v_, conv2_;
  Tensor<T> pool_w_;
};

template <typename T>
std::unique_ptr<AttentionModule<T>> make_attention(i64 channels,
                                                   const AttentionConfig& cfg) {
  switch (cfg.kind) {
    case AttentionKind::Lssm:
      return std::make_unique<LssmBlock<T>>(channels, cfg.lssm_kernel);
    case AttentionKind::Se:
      return std::make_unique<SeBlock<T>>(channels, cfg.se_reduction);
    case AttentionKind::Sge:
      return std::make_unique<SgeBlock<T>>(channels, cfg.sge_groups);
    case AttentionKind::Caa:
      return std::make_unique<CaaBlock<T>>(channels, cfg.caa_kernel);
  }
  throw ConfigError("unknown attention kind");
}

// Closed-form learnable-parameter count per kind, used by the ablation
// report cross-check.
inline i64 attention_param_count(i64 channels, const AttentionConfig& cfg) {
  switch (cfg.kind) {
    case AttentionKind::Lssm:
      return 2 * (channels * channels * cfg.lssm_kernel + channels);
    case AttentionKind::Se: {
      const i64 mid = std::max<i64>(1, channels / cfg.se_reduction);
      return channels * mid + mid + mid * channels + channels;
    }
    case AttentionKind::Sge:
      return 2 * cfg.sge_groups;
    case AttentionKind::Caa:
      return 2 * (channels * channels + channels) +
             2 * (channels * cfg.caa_kernel + channels);
  }
  throw ConfigError("unknown attention kind");
}

}  // namespace mrc
