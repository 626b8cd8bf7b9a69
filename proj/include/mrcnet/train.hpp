#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "mrcnet/config.hpp"
#include "mrcnet/data.hpp"
#include "mrcnet/detect.hpp"
#include "mrcnet/optim.hpp"

namespace mrc {

struct EpochLog {
  i64 epoch = 0;
  double loss_total = 0, loss_cls = 0, loss_reg = 0;
  double precision = 0, recall = 0, map50 = 0;
};

inline std::string metric_csv_header() {
  return "epoch,loss_total,loss_cls,loss_reg,precision,recall,map50";
}

// %.17g keeps the row an exact image of the computed doubles, so comparing
// two logs byte-for-byte is a full determinism check.
inline std::string metric_csv_row(const EpochLog& e) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                static_cast<long long>(e.epoch), e.loss_total, e.loss_cls, e.loss_reg,
                e.precision, e.recall, e.map50);
  return buf;
}

template <typename T>
void flip_sample(Tensor<T>& img, std::vector<GroundTruthBox>& boxes, bool hflip,
                 bool vflip) {
  const i64 H = img.h(), W = img.w();
  if (hflip) {
    for (i64 c = 0; c < img.c(); ++c)
      for (i64 y = 0; y < H; ++y)
        for (i64 x = 0; x < W / 2; ++x)
          std::swap(img.at(0, c, y, x), img.at(0, c, y, W - 1 - x));
    for (auto& b : boxes) {
      const double x1 = b.box.x1;
      b.box.x1 = static_cast<double>(W) - b.box.x2;
      b.box.x2 = static_cast<double>(W) - x1;
    }
  }
  if (vflip) {
    for (i64 c = 0; c < img.c(); ++c)
      for (i64 y = 0; y < H / 2; ++y)
        for (i64 x = 0; x < W; ++x)
          std::swap(img.at(0, c, y, x), img.at(0, c, H - 1 - y, x));
    for (auto& b : boxes) {
      const double y1 = b.box.y1;
      b.box.y1 = static_cast<double>(H) - b.box.y2;
      b.box.y2 = static_cast<double>(H) - y1;
    }
  }
}

// Owns the optimizer and the epoch counter; one instance drives one model.
// Epoch e draws its shuffle and augmentation stream from derive_seed(seed, e),
// so resuming from a checkpoint replays the identical remaining schedule.
template <typename T>
class Trainer {
 public:
  Trainer(DetectModel<T>& model, const TrainConfig& cfg,
          std::vector<LoadedSample<T>> train_set, std::vector<LoadedSample<T>> val_set)
      : model_(&model),
        cfg_(cfg),
        opt_(model.params(), cfg.adamw()),
        train_(std::move(train_set)),
        val_(std::move(val_set)) {
    cfg.validate();
    if (train_.empty()) throw ConfigError("train: empty training split");
  }

  EpochLog run_epoch() {
    const i64 epoch = ++epochs_completed_;
    Rng rng(derive_seed(cfg_.seed, static_cast<u64>(epoch)));
    std::vector<size_t> order(train_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());

    const int ncls = model_->config().head.num_classes;
    double sum_total = 0, sum_cls = 0, sum_reg = 0;
    i64 batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg_.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg_.batch_size));
      std::vector<Tensor<T>> imgs;
      std::vector<std::vector<GroundTruthBox>> gts;
      for (size_t k = start; k < end; ++k) {
        Tensor<T> img = train_[order[k]].image;
        std::vector<GroundTruthBox> boxes = train_[order[k]].boxes;
        const bool hf = cfg_.augment_hflip && rng.bernoulli(0.5);
        const bool vf = cfg_.augment_vflip && rng.bernoulli(0.5);
        if (hf || vf) flip_sample(img, boxes, hf, vf);
        imgs.push_back(std::move(img));
        gts.push_back(std::move(boxes));
      }
      Tensor<T> batch = stack(imgs);

      model_->params().zero_grads();
      Tape<T> t;
      auto maps = model_->forward(t, t.leaf(batch), /*training=*/true);
      auto loss = detection_loss(t, maps, gts, ncls, model_->config().head.lambda_reg);
      t.backward(loss.total);
      opt_.step();

      sum_total += loss.total_value;
      sum_cls += loss.cls_value;
      sum_reg += loss.reg_value;
      ++batches;
    }

    EvalReport rep = evaluate();
    EpochLog log;
    log.epoch = epoch;
    log.loss_total = sum_total / static_cast<double>(batches);
    log.loss_cls = sum_cls / static_cast<double>(batches);
    log.loss_reg = sum_reg / static_cast<double>(batches);
    log.precision = rep.precision;
    log.recall = rep.recall;
    log.map50 = rep.map50;
    return log;
  }

  EvalReport evaluate() { return evaluate_on(val_); }

  EvalReport evaluate_on(const std::vector<LoadedSample<T>>& set) {
    const int ncls = model_->config().head.num_classes;
    const auto& head = model_->config().head;
    std::vector<ImageEval> evals;
    for (size_t start = 0; start < set.size(); start += static_cast<size_t>(cfg_.batch_size)) {
      const size_t end = std::min(set.size(), start + static_cast<size_t>(cfg_.batch_size));
      std::vector<Tensor<T>> imgs;
      for (size_t k = start; k < end; ++k) imgs.push_back(set[k].image);
      Tensor<T> batch = stack(imgs);
      auto maps = model_->forward_maps(batch, /*training=*/false);
      for (size_t k = start; k < end; ++k) {
        ImageEval ie;
        ie.dets = decode(maps, static_cast<i64>(k - start), ncls, head.score_threshold,
                         head.nms_iou, batch.h(), batch.w());
        ie.gts = set[k].boxes;
        evals.push_back(std::move(ie));
      }
    }
    return map50(evals, ncls);
  }

  AdamW<T>& optimizer() { return opt_; }
  i64 epochs_completed() const { return epochs_completed_; }
  void set_epochs_completed(i64 n) { epochs_completed_ = n; }

 private:
  static Tensor<T> stack(const std::vector<Tensor<T>>& imgs) {
    if (imgs.empty()) throw UsageError("stack: empty batch");
    const Shape s0 = imgs[0].shape();
    Tensor<T> out(static_cast<i64>(imgs.size()), s0[1], s0[2], s0[3]);
    const i64 per = s0[1] * s0[2] * s0[3];
    for (size_t i = 0; i < imgs.size(); ++i) {
      if (imgs[i].shape() != s0)
        throw ShapeError("stack: mixed image shapes in one batch");
      std::copy(imgs[i].data(), imgs[i].data() + per,
                out.data() + static_cast<i64>(i) * per);
    }
    return out;
  }

  DetectModel<T>* model_;
  TrainConfig cfg_;
  AdamW<T> opt_;
  std::vector<LoadedSample<T>> train_, val_;
  i64 epochs_completed_ = 0;
};

}  // namespace mrc
