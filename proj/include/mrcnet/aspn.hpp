#pragma once

#include <memory>
#include <string>

#include "mrcnet/attention.hpp"
#include "mrcnet/layers.hpp"

namespace mrc {

// Selective feature aggregation: upsample the high-level map with a stride-2
// transposed conv, screen both paths with the configured attention module,
// sigmoid-gate the aligned low-level features with the screened high-level
// ones, and add the upsampled features back.
template <typename T>
class SfaBlock {
 public:
  SfaBlock() = default;

  SfaBlock(i64 c_high, i64 c_low, i64 c_f, const AttentionConfig& att)
      : upconv_(c_high, c_f, 3, 2, 1, 1),
        align_(Conv2d<T>::square(c_low, c_f, 1, 1, 0)),
        att_high_(make_attention<T>(c_f, att)),
        att_low_(make_attention<T>(c_low, att)) {}

  ValueRef<T> forward(Tape<T>& t, ValueRef<T> x_high, ValueRef<T> x_low) {
    auto up = upconv_.forward(t, x_high);
    if (up->val.h() != x_low->val.h() || up->val.w() != x_low->val.w())
      throw ShapeError("SfaBlock: upsampled high-level map " +
                       shape_str(up->val.shape()) + " does not match low-level map " +
                       shape_str(x_low->val.shape()));
    auto low = t.sigmoid(align_.forward(t, att_low_->forward(t, x_low)));
    return t.add(t.mul(att_high_->forward(t, up), low), up);
  }

  void collect(ParamStore<T>& store, const std::string& prefix) {
    upconv_.collect(store, prefix + ".upconv");
    align_.collect(store, prefix + ".align");
    att_high_->collect(store, prefix + ".att_high");
    att_low_->collect(store, prefix + ".att_low");
  }

 private:
  TransposedConv2d<T> upconv_;
  Conv2d<T> align_;
  std::unique_ptr<AttentionModule<T>> att_high_, att_low_;
};

struct AspnConfig {
  i64 cf = 64;  // pyramid width
  i64 s3_channels = 64;
  i64 s4_channels = 128;
  i64 s5_channels = 256;
  AttentionConfig attention;

  void validate() const {
    if (cf < 1) throw ConfigError("AspnConfig: pyramid width must be >= 1");
    if (s3_channels < 1 || s4_channels < 1 || s5_channels < 1)
      throw ConfigError("AspnConfig: input channel counts must be positive");
  }
};

template <typename T>
struct PyramidFeatures {
  ValueRef<T> p3, p4, p5;  // strides 8, 16, 32, each cf channels
};

// Top-down pyramid: project S5 to the pyramid width, then fuse downward
// through two SFA stages.
template <typename T>
class Aspn {
 public:
  Aspn() = default;

  explicit Aspn(const AspnConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    p5_proj_ = Conv2d<T>::square(cfg.s5_channels, cfg.cf, 1, 1, 0);
    sfa45_ = SfaBlock<T>(cfg.cf, cfg.s4_channels, cfg.cf, cfg.attention);
    sfa34_ = SfaBlock<T>(cfg.cf, cfg.s3_channels, cfg.cf, cfg.attention);
  }

  PyramidFeatures<T> forward(Tape<T>& t, ValueRef<T> s3, ValueRef<T> s4,
                             ValueRef<T> s5) {
    check_dyadic(s4->val, s5->val, "S4", "S5");
    check_dyadic(s3->val, s4->val, "S3", "S4");
    PyramidFeatures<T> out;
    out.p5 = p5_proj_.forward(t, s5);
    out.p4 = sfa45_.forward(t, out.p5, s4);
    out.p3 = sfa34_.forward(t, out.p4, s3);
    return out;
  }

  void collect(ParamStore<T>& store, const std::string& prefix) {
    p5_proj_.collect(store, prefix + ".p5_proj");
    sfa45_.collect(store, prefix + ".sfa45");
    sfa34_.collect(store, prefix + ".sfa34");
  }

  const AspnConfig& config() const { return cfg_; }

 private:
  static void check_dyadic(const Tensor<T>& lo, const Tensor<T>& hi, const char* lo_name,
                           const char* hi_name) {
    if (lo.h() != 2 * hi.h() || lo.w() != 2 * hi.w())
      throw ConfigError(std::string("Aspn: ") + lo_name + " spatial size " +
                        shape_str(lo.shape()) + " is not twice " + hi_name + " " +
                        shape_str(hi.shape()));
  }

  AspnConfig cfg_;
  Conv2d<T> p5_proj_;
  SfaBlock<T> sfa45_, sfa34_;
};

}  // namespace mrc
