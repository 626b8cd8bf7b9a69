#pragma once

#include <string>
#include <vector>

#include "mrcnet/layers.hpp"

namespace mrc {

struct DcaConfig {
  i64 channels = 64;
  int groups = 8;
  int norm_groups = 1;  // grouping of the per-branch group norms
  double eps = 1e-5;

  void validate() const {
    if (groups < 1) throw ConfigError("DcaConfig: groups must be >= 1");
    if (channels < 1 || channels % groups != 0)
      throw ConfigError("DcaConfig: channels " + std::to_string(channels) +
                        " not divisible by groups " + std::to_string(groups));
  }
};

// Directional coupled attention. The input is folded into G channel groups
// along the batch axis; each group gets (1) sigmoid gates from pooled H/W
// strips fused by a shared 1x1 conv, (2) a parallel 3x3 local branch, and
// (3) a cross-branch spatial map built from softmax channel weights of one
// branch applied to the flattened features of the other.
template <typename T>
class DcaBlock {
 public:
  DcaBlock() = default;

  explicit DcaBlock(const DcaConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const i64 cg = cfg.channels / cfg.groups;
    conv_hw_ = Conv2d<T>::square(cg, cg, 1, 1, 0);
    conv3_ = Conv2d<T>::square(cg, cg, 3, 1, 1);
    gn1_ = GroupNorm<T>(cg, cfg.norm_groups, static_cast<T>(cfg.eps));
    gn2_ = GroupNorm<T>(cg, cfg.norm_groups, static_cast<T>(cfg.eps));
  }

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x) {
    const Shape s = x->val.shape();
    const i64 N = s[0], C = s[1], H = s[2], W = s[3];
    if (C != cfg_.channels)
      throw ShapeError("DcaBlock: input has " + std::to_string(C) +
                       " channels, block expects " + std::to_string(cfg_.channels));
    const i64 G = cfg_.groups;
    const i64 cg = C / G;
    const i64 B = N * G;

    auto xg = t.reshape(x, Shape{B, cg, H, W});

    // directional gates
    auto strip_h = t.pool_mean(xg, Axis::W);                       // [B,cg,H,1]
    auto strip_w = t.reshape(t.pool_mean(xg, Axis::H),             // [B,cg,1,W]
                             Shape{B, cg, W, 1});
    auto fused = conv_hw_.forward(t, t.concat({strip_h, strip_w}, Axis::H));
    auto pieces = t.split(fused, {H, W}, Axis::H);
    auto gate_h = t.sigmoid(pieces[0]);                            // [B,cg,H,1]
    auto gate_w = t.sigmoid(t.reshape(pieces[1], Shape{B, cg, 1, W}));
    auto x1 = t.mul(t.mul(xg, gate_h), gate_w);

    // parallel local branch
    auto x2 = conv3_.forward(t, xg);

    // cross-branch spatial attention
    auto w1 = t.softmax(t.global_avg_pool(gn1_.forward(t, x1)), Axis::C);
    auto w2 = t.softmax(t.global_avg_pool(gn2_.forward(t, x2)), Axis::C);
    auto w1_row = t.reshape(w1, Shape{B, 1, 1, cg});
    auto w2_row = t.reshape(w2, Shape{B, 1, 1, cg});
    auto x1_flat = t.reshape(x1, Shape{B, 1, cg, H * W});
    auto x2_flat = t.reshape(x2, Shape{B, 1, cg, H * W});
    auto spatial = t.add(t.matmul(w1_row, x2_flat), t.matmul(w2_row, x1_flat));
    auto map = t.sigmoid(t.reshape(spatial, Shape{B, 1, H, W}));

    auto out = t.mul(xg, map);
    return t.reshape(out, s);
  }

  void collect(ParamStore<T>& store, const std::string& prefix) {
    conv_hw_.collect(store, prefix + ".conv_hw");
    conv3_.collect(store, prefix + ".conv3");
    gn1_.collect(store, prefix + ".gn1");
    gn2_.collect(store, prefix + ".gn2");
  }

  const DcaConfig& config() const { return cfg_; }

 private:
  DcaConfig cfg_;
  Conv2d<T> conv_hw_, conv3_;
  GroupNorm<T> gn1_, gn2_;
};

struct MsruConfig {
  i64 channels = 64;
  double split_ratio = 0.5;
  i64 expansion = 2;
  DcaConfig dca;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  i64 split_channels() const {
    return static_cast<i64>(split_ratio * static_cast<double>(channels));
  }

  void validate() const {
    if (channels < 2) throw ConfigError("MsruConfig: channels must be >= 2");
    if (!(split_ratio > 0.0 && split_ratio < 1.0))
      throw ConfigError("MsruConfig: split_ratio must lie in (0,1)");
    const i64 s = split_channels();
    if (s < 1 || channels - s < 1)
      throw ConfigError("MsruConfig: split leaves an empty half");
    if (expansion < 1) throw ConfigError("MsruConfig: expansion must be >= 1");
    if (dca.channels != channels)
      throw ConfigError("MsruConfig: dca channel count disagrees");
    dca.validate();
  }
};

// Multi-scale residual unit: double 3x3 CBR with identity shortcut, channel
// split with a 3x3 branch on the first half, 1x1 expand/project interaction,
// then DCA refined output added back onto the first residual.
template <typename T>
class MsruBlock {
 public:
  MsruBlock() = default;

  explicit MsruBlock(const MsruConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const i64 C = cfg.channels;
    const i64 sc = cfg.split_channels();
    const T eps = static_cast<T>(cfg.bn_eps);
    const T mom = static_cast<T>(cfg.bn_momentum);
    cbr1_ = Cbr<T>(C, C, 3, 1, 1, eps, mom);
    cbr2_ = Cbr<T>(C, C, 3, 1, 1, eps, mom);
    conv_s1_ = Conv2d<T>::square(sc, sc, 3, 1, 1);
    conv_expand_ = Conv2d<T>::square(C, C * cfg.expansion, 1, 1, 0);
    conv_project_ = Conv2d<T>::square(C * cfg.expansion, C, 1, 1, 0);
    dca_ = DcaBlock<T>(cfg.dca);
  }

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x, bool training) {
    if (x->val.c() != cfg_.channels)
      throw ShapeError("MsruBlock: input has " + std::to_string(x->val.c()) +
                       " channels, block expects " + std::to_string(cfg_.channels));
    auto r1 = t.add(x, cbr2_.forward(t, cbr1_.forward(t, x, training), training));
    const i64 sc = cfg_.split_channels();
    auto halves = t.split(r1, {sc, cfg_.channels - sc}, Axis::C);
    auto f_split = t.concat({conv_s1_.forward(t, halves[0]), halves[1]}, Axis::C);
    auto f_interact = conv_project_.forward(t, conv_expand_.forward(t, f_split));
    return t.add(r1, dca_.forward(t, f_interact));
  }

  void collect(ParamStore<T>& store, const std::string& prefix) {
    cbr1_.collect(store, prefix + ".cbr1");
    cbr2_.collect(store, prefix + ".cbr2");
    conv_s1_.collect(store, prefix + ".conv_s1");
    conv_expand_.collect(store, prefix + ".conv_expand");
    conv_project_.collect(store, prefix + ".conv_project");
    dca_.collect(store, prefix + ".dca");
  }

  void collect_buffers(BufferStore<T>& store, const std::string& prefix) {
    cbr1_.collect_buffers(store, prefix + ".cbr1");
    cbr2_.collect_buffers(store, prefix + ".cbr2");
  }

  const MsruConfig& config() const { return cfg_; }

 private:
  MsruConfig cfg_;
  Cbr<T> cbr1_, cbr2_;
  Conv2d<T> conv_s1_, conv_expand_, conv_project_;
  DcaBlock<T> dca_;
};

struct BackboneConfig {
  i64 stem_channels = 32;  // C0
  int blocks_per_stage = 1;
  double split_ratio = 0.5;
  i64 expansion = 2;
  int dca_groups = 8;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  double gn_eps = 1e-5;

  MsruConfig msru_for(i64 channels) const {
    MsruConfig m;
    m.channels = channels;
    m.split_ratio = split_ratio;
    m.expansion = expansion;
    m.dca = DcaConfig{channels, dca_groups, 1, gn_eps};
    m.bn_eps = bn_eps;
    m.bn_momentum = bn_momentum;
    return m;
  }

  void validate() const {
    if (stem_channels < 1) throw ConfigError("BackboneConfig: stem channels must be >= 1");
    if (blocks_per_stage < 1)
      throw ConfigError("BackboneConfig: blocks_per_stage must be >= 1");
    for (i64 c : {2 * stem_channels, 4 * stem_channels, 8 * stem_channels})
      msru_for(c).validate();
  }

  i64 s3_channels() const { return 2 * stem_channels; }
  i64 s4_channels() const { return 4 * stem_channels; }
  i64 s5_channels() const { return 8 * stem_channels; }
};

template <typename T>
struct BackboneFeatures {
  ValueRef<T> s3, s4, s5;  // strides 8, 16, 32
};

// Stem of two stride-2 CBRs, then three stages of a stride-2 channel-doubling
// CBR followed by blocks_per_stage MSRU blocks.
template <typename T>
class Backbone {
 public:
  Backbone() = default;

  explicit Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const i64 c0 = cfg.stem_channels;
    const T eps = static_cast<T>(cfg.bn_eps);
    const T mom = static_cast<T>(cfg.bn_momentum);
    stem1_ = Cbr<T>(3, c0, 3, 2, 1, eps, mom);
    stem2_ = Cbr<T>(c0, c0, 3, 2, 1, eps, mom);
    i64 c = c0;
    for (int s = 0; s < 3; ++s) {
      down_[s] = Cbr<T>(c, 2 * c, 3, 2, 1, eps, mom);
      c *= 2;
      for (int b = 0; b < cfg.blocks_per_stage; ++b)
        stages_[s].emplace_back(cfg.msru_for(c));
    }
  }

  BackboneFeatures<T> forward(Tape<T>& t, ValueRef<T> image, bool training) {
    if (image->val.c() != 3)
      throw ShapeError("Backbone: expected a 3-channel image, got " +
                       shape_str(image->val.shape()));
    if (image->val.h() % 32 != 0 || image->val.w() % 32 != 0)
      throw ConfigError("Backbone: image extents must be divisible by 32, got " +
                        shape_str(image->val.shape()));
    auto x = stem2_.forward(t, stem1_.forward(t, image, training), training);
    BackboneFeatures<T> out;
    for (int s = 0; s < 3; ++s) {
      x = down_[s].forward(t, x, training);
      for (auto& blk : stages_[s]) x = blk.forward(t, x, training);
      if (s == 0) out.s3 = x;
      if (s == 1) out.s4 = x;
      if (s == 2) out.s5 = x;
    }
    return out;
  }

  void collect(ParamStore<T>& store, const std::string& prefix) {
    stem1_.collect(store, prefix + ".stem1");
    stem2_.collect(store, prefix + ".stem2");
    for (int s = 0; s < 3; ++s) {
      const std::string sp = prefix + ".stage" + std::to_string(s + 1);
      down_[s].collect(store, sp + ".down");
      for (size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].collect(store, sp + ".block" + std::to_string(b));
    }
  }

  void collect_buffers(BufferStore<T>& store, const std::string& prefix) {
    stem1_.collect_buffers(store, prefix + ".stem1");
    stem2_.collect_buffers(store, prefix + ".stem2");
    for (int s = 0; s < 3; ++s) {
      const std::string sp = prefix + ".stage" + std::to_string(s + 1);
      down_[s].collect_buffers(store, sp + ".down");
      for (size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].collect_buffers(store, sp + ".block" + std::to_string(b));
    }
  }

  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  Cbr<T> stem1_, stem2_;
  Cbr<T> down_[3];
  std::vector<MsruBlock<T>> stages_[3];
};

}  // namespace mrc
