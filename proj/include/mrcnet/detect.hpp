#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <vector>

#include "mrcnet/aspn.hpp"
#include "mrcnet/metrics.hpp"
#include "mrcnet/mrdcb.hpp"

namespace mrc {

inline constexpr std::array<int, 3> kScaleStrides{8, 16, 32};

struct HeadConfig {
  int num_classes = 3;
  double score_threshold = 0.3;
  double nms_iou = 0.5;
  double lambda_reg = 1.0;

  void validate() const {
    if (num_classes < 1) throw ConfigError("HeadConfig: need at least one class");
    if (!(score_threshold > 0.0 && score_threshold < 1.0))
      throw ConfigError("HeadConfig: score threshold must lie in (0,1)");
    if (!(nms_iou > 0.0 && nms_iou <= 1.0))
      throw ConfigError("HeadConfig: nms iou must lie in (0,1]");
  }
};

struct ModelConfig {
  BackboneConfig backbone;
  i64 cf = 64;
  AttentionConfig attention;
  HeadConfig head;

  AspnConfig aspn() const {
    AspnConfig a;
    a.cf = cf;
    a.s3_channels = backbone.s3_channels();
    a.s4_channels = backbone.s4_channels();
    a.s5_channels = backbone.s5_channels();
    a.attention = attention;
    return a;
  }

  void validate() const {
    backbone.validate();
    aspn().validate();
    head.validate();
  }
};

// Anchor-free dense head: one 1x1 conv per scale mapping the pyramid width to
// num_classes logits plus 4 box offsets (l, t, r, b) in stride units.
template <typename T>
class DetectModel {
 public:
  DetectModel() = default;

  explicit DetectModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    backbone_ = Backbone<T>(cfg.backbone);
    aspn_ = Aspn<T>(cfg.aspn());
    const i64 out_ch = cfg.head.num_classes + 4;
    for (auto& h : heads_) h = Conv2d<T>::square(cfg.cf, out_ch, 1, 1, 0);
    collect(store_, "model");
    backbone_.collect_buffers(buffers_, "model.backbone");
  }

  DetectModel(const DetectModel&) = delete;
  DetectModel& operator=(const DetectModel&) = delete;

  std::array<ValueRef<T>, 3> forward(Tape<T>& t, ValueRef<T> images, bool training) {
    auto feats = backbone_.forward(t, images, training);
    auto pyr = aspn_.forward(t, feats.s3, feats.s4, feats.s5);
    return {heads_[0].forward(t, pyr.p3), heads_[1].forward(t, pyr.p4),
            heads_[2].forward(t, pyr.p5)};
  }

  std::array<Tensor<T>, 3> forward_maps(const Tensor<T>& images, bool training = false) {
    Tape<T> t(false);
    auto maps = forward(t, t.leaf(images), training);
    return {maps[0]->val, maps[1]->val, maps[2]->val};
  }

  ParamStore<T>& params() { return store_; }
  BufferStore<T>& buffers() { return buffers_; }
  const ModelConfig& config() const { return cfg_; }

  void init_params(u64 seed) {
    Rng rng(seed);
    store_.init_all(rng);
  }

 private:
  void collect(ParamStore<T>& store, const std::string& prefix) {
    backbone_.collect(store, prefix + ".backbone");
    aspn_.collect(store, prefix + ".aspn");
    heads_[0].collect(store, prefix + ".head.p3");
    heads_[1].collect(store, prefix + ".head.p4");
    heads_[2].collect(store, prefix + ".head.p5");
  }

  ModelConfig cfg_;
  Backbone<T> backbone_;
  Aspn<T> aspn_;
  std::array<Conv2d<T>, 3> heads_;
  ParamStore<T> store_;
  BufferStore<T> buffers_;
};

// --- target assignment --------------------------------------------------

struct AssignedCell {
  int scale;  // 0..2
  i64 cy, cx;
};

// A ground-truth box lands in the single cell containing its center at the
// scale whose stride is nearest to sqrt(area) in log2; ties take the finer
// stride. A cell claimed twice keeps its first box.
inline int pick_scale_for_box(const Box& b) {
  const double side = std::sqrt(std::max(1e-9, b.area()));
  const double target = std::log2(side);
  int best = 0;
  double best_d = 1e300;
  for (int s = 0; s < 3; ++s) {
    const double d = std::abs(target - std::log2(static_cast<double>(kScaleStrides[s])));
    if (d < best_d) {
      best_d = d;
      best = s;
    }
  }
  return best;
}

template <typename T>
struct ScaleTargets {
  std::shared_ptr<Tensor<T>> cls;       // [N, ncls, h, w], 0/1
  std::shared_ptr<Tensor<T>> reg;       // [N, 4, h, w]
  std::shared_ptr<Tensor<T>> pos_mask;  // [N, 1, h, w]
};

template <typename T>
struct AssignResult {
  std::array<ScaleTargets<T>, 3> scales;
  i64 num_pos = 0;
};

template <typename T>
AssignResult<T> assign_targets(const std::vector<std::vector<GroundTruthBox>>& gts,
                               const std::array<Shape, 3>& map_shapes, int ncls) {
  AssignResult<T> out;
  for (int s = 0; s < 3; ++s) {
    const Shape& ms = map_shapes[s];
    out.scales[s].cls = std::make_shared<Tensor<T>>(ms[0], ncls, ms[2], ms[3]);
    out.scales[s].reg = std::make_shared<Tensor<T>>(ms[0], 4, ms[2], ms[3]);
    out.scales[s].pos_mask = std::make_shared<Tensor<T>>(ms[0], 1, ms[2], ms[3]);
  }
  const i64 batch = map_shapes[0][0];
  if (static_cast<i64>(gts.size()) != batch)
    throw ShapeError("assign_targets: ground truth for " + std::to_string(gts.size()) +
                     " images, maps carry batch " + std::to_string(batch));

  for (i64 n = 0; n < batch; ++n) {
    for (const GroundTruthBox& g : gts[static_cast<size_t>(n)]) {
      if (!g.box.valid()) throw ShapeError("assign_targets: degenerate ground-truth box");
      if (g.class_id < 0 || g.class_id >= ncls)
        throw ShapeError("assign_targets: class id out of range");
      const int s = pick_scale_for_box(g.box);
      const double stride = kScaleStrides[s];
      const Shape& ms = map_shapes[s];
      const double cx = 0.5 * (g.box.x1 + g.box.x2);
      const double cy = 0.5 * (g.box.y1 + g.box.y2);
      const i64 ix = std::clamp<i64>(static_cast<i64>(std::floor(cx / stride)), 0, ms[3] - 1);
      const i64 iy = std::clamp<i64>(static_cast<i64>(std::floor(cy / stride)), 0, ms[2] - 1);
      auto& tg = out.scales[s];
      if (tg.pos_mask->at(n, 0, iy, ix) != T(0)) continue;  // cell already claimed
      tg.pos_mask->at(n, 0, iy, ix) = T(1);
      tg.cls->at(n, g.class_id, iy, ix) = T(1);
      const double ccx = (static_cast<double>(ix) + 0.5) * stride;
      const double ccy = (static_cast<double>(iy) + 0.5) * stride;
      tg.reg->at(n, 0, iy, ix) = static_cast<T>((ccx - g.box.x1) / stride);
      tg.reg->at(n, 1, iy, ix) = static_cast<T>((ccy - g.box.y1) / stride);
      tg.reg->at(n, 2, iy, ix) = static_cast<T>((g.box.x2 - ccx) / stride);
      tg.reg->at(n, 3, iy, ix) = static_cast<T>((g.box.y2 - ccy) / stride);
      ++out.num_pos;
    }
  }
  return out;
}

// --- loss -----------------------------------------------------------------

template <typename T>
struct DetectionLoss {
  ValueRef<T> total;
  double total_value = 0.0;
  double cls_value = 0.0;
  double reg_value = 0.0;
  i64 num_pos = 0;
};

// BCE over every cell/class plus smooth-L1 on the stride-normalized offsets
// of positive cells; both terms divided by max(1, #positives).
template <typename T>
DetectionLoss<T> detection_loss(Tape<T>& t, const std::array<ValueRef<T>, 3>& maps,
                                const std::vector<std::vector<GroundTruthBox>>& gts,
                                int ncls, double lambda_reg) {
  std::array<Shape, 3> shapes;
  for (int s = 0; s < 3; ++s) {
    shapes[s] = maps[s]->val.shape();
    if (shapes[s][1] != ncls + 4)
      throw ShapeError("detection_loss: map carries " + std::to_string(shapes[s][1]) +
                       " channels, expected " + std::to_string(ncls + 4));
  }
  auto targets = assign_targets<T>(gts, shapes, ncls);
  const T norm = T(1) / static_cast<T>(std::max<i64>(1, targets.num_pos));

  ValueRef<T> cls_sum, reg_sum;
  for (int s = 0; s < 3; ++s) {
    auto parts = t.split(maps[s], {ncls, 4}, Axis::C);
    auto cls_term = t.sum_all(t.bce_with_logits(parts[0], targets.scales[s].cls));
    auto reg_elem = t.smooth_l1(parts[1], targets.scales[s].reg, T(1));
    auto reg_term = t.sum_all(t.mul(reg_elem, t.leaf(*targets.scales[s].pos_mask)));
    cls_sum = cls_sum ? t.add(cls_sum, cls_term) : cls_term;
    reg_sum = reg_sum ? t.add(reg_sum, reg_term) : reg_term;
  }
  auto cls_loss = t.scale(cls_sum, norm);
  auto reg_loss = t.scale(reg_sum, norm);
  auto total = t.add(cls_loss, t.scale(reg_loss, static_cast<T>(lambda_reg)));

  DetectionLoss<T> out;
  out.total = total;
  out.total_value = static_cast<double>(total->val[0]);
  out.cls_value = static_cast<double>(cls_loss->val[0]);
  out.reg_value = static_cast<double>(reg_loss->val[0]);
  out.num_pos = targets.num_pos;
  return out;
}

// --- decode -----------------------------------------------------------------

// Greedy per-class NMS; candidates ranked by score, ties by insertion order.
inline std::vector<Detection> nms_per_class(std::vector<Detection> dets, double thr) {
  std::vector<size_t> order(dets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return dets[a].score > dets[b].score;
  });
  std::vector<bool> removed(dets.size(), false);
  std::vector<Detection> kept;
  for (size_t i = 0; i < order.size(); ++i) {
    if (removed[order[i]]) continue;
    const Detection& di = dets[order[i]];
    kept.push_back(di);
    for (size_t j = i + 1; j < order.size(); ++j) {
      if (removed[order[j]]) continue;
      const Detection& dj = dets[order[j]];
      if (dj.class_id == di.class_id && iou(di.box, dj.box) > thr)
        removed[order[j]] = true;
    }
  }
  return kept;
}

// Decode one image of the raw maps: per cell, scores are sigmoid(logit) and
// the box is the cell center pushed out by relu(l,t,r,b) in stride units,
// clipped to the image.
template <typename T>
std::vector<Detection> decode(const std::array<Tensor<T>, 3>& maps, i64 image_index,
                              int ncls, double score_threshold, double nms_iou,
                              i64 img_h, i64 img_w) {
  std::vector<Detection> cands;
  for (int s = 0; s < 3; ++s) {
    const Tensor<T>& m = maps[s];
    const double stride = kScaleStrides[s];
    for (i64 iy = 0; iy < m.h(); ++iy) {
      for (i64 ix = 0; ix < m.w(); ++ix) {
        const double cx = (static_cast<double>(ix) + 0.5) * stride;
        const double cy = (static_cast<double>(iy) + 0.5) * stride;
        const double l = std::max(0.0, static_cast<double>(m.at(image_index, ncls + 0, iy, ix)));
        const double to = std::max(0.0, static_cast<double>(m.at(image_index, ncls + 1, iy, ix)));
        const double r = std::max(0.0, static_cast<double>(m.at(image_index, ncls + 2, iy, ix)));
        const double b = std::max(0.0, static_cast<double>(m.at(image_index, ncls + 3, iy, ix)));
        Box box{cx - l * stride, cy - to * stride, cx + r * stride, cy + b * stride};
        box.x1 = std::clamp(box.x1, 0.0, static_cast<double>(img_w));
        box.y1 = std::clamp(box.y1, 0.0, static_cast<double>(img_h));
        box.x2 = std::clamp(box.x2, 0.0, static_cast<double>(img_w));
        box.y2 = std::clamp(box.y2, 0.0, static_cast<double>(img_h));
        if (!box.valid()) continue;
        for (int c = 0; c < ncls; ++c) {
          const double logit = static_cast<double>(m.at(image_index, c, iy, ix));
          const double score = 1.0 / (1.0 + std::exp(-logit));
          if (score < score_threshold) continue;
          cands.push_back({box, c, score});
        }
      }
    }
  }
  return nms_per_class(std::move(cands), nms_iou);
}

// Raw maps that decode exactly back to the given ground truth (one detection
// per box): positive cells get a large logit and exact offsets. Exact
// recovery requires every box to cover its assigned cell center, since decode
// clamps offsets at zero; boxes wider than their stride always qualify.
template <typename T>
std::array<Tensor<T>, 3> encode_ground_truth(
    const std::vector<std::vector<GroundTruthBox>>& gts, i64 img_h, i64 img_w, int ncls,
    T pos_logit = T(12), T neg_logit = T(-12)) {
  const i64 batch = static_cast<i64>(gts.size());
  std::array<Shape, 3> shapes;
  for (int s = 0; s < 3; ++s)
    shapes[s] = Shape{batch, static_cast<i64>(ncls) + 4, img_h / kScaleStrides[s],
                      img_w / kScaleStrides[s]};
  auto targets = assign_targets<T>(gts, shapes, ncls);
  std::array<Tensor<T>, 3> maps;
  for (int s = 0; s < 3; ++s) {
    maps[s] = Tensor<T>(shapes[s], neg_logit);
    const auto& tg = targets.scales[s];
    for (i64 n = 0; n < batch; ++n)
      for (i64 iy = 0; iy < shapes[s][2]; ++iy)
        for (i64 ix = 0; ix < shapes[s][3]; ++ix) {
          for (i64 k = 0; k < 4; ++k)
            maps[s].at(n, ncls + k, iy, ix) = tg.reg->at(n, k, iy, ix);
          if (tg.pos_mask->at(n, 0, iy, ix) == T(0)) continue;
          for (int c = 0; c < ncls; ++c)
            if (tg.cls->at(n, c, iy, ix) != T(0)) maps[s].at(n, c, iy, ix) = pos_logit;
        }
  }
  return maps;
}

}  // namespace mrc
