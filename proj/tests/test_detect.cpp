#include "doctest.h"

#include <cstdio>
#include <filesystem>

#include "mrcnet/checkpoint.hpp"
#include "mrcnet/gradcheck.hpp"
#include "mrcnet/train.hpp"
#include "support/test_utils.hpp"

using namespace mrc;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

// independent decode re-implementation with its own nms
template <typename T>
std::vector<Detection> oracle_decode(const std::array<Tensor<T>, 3>& maps, i64 n,
                                     int ncls, double thr, double nms_thr, i64 img_h,
                                     i64 img_w) {
  std::vector<Detection> cand;
  for (int s = 0; s < 3; ++s) {
    const double stride = kScaleStrides[s];
    const Tensor<T>& m = maps[s];
    for (i64 y = 0; y < m.h(); ++y)
      for (i64 x = 0; x < m.w(); ++x) {
        const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
        double off[4];
        for (int k = 0; k < 4; ++k)
          off[k] = std::max(0.0, double(m.at(n, ncls + k, y, x))) * stride;
        Box b{cx - off[0], cy - off[1], cx + off[2], cy + off[3]};
        b.x1 = std::max(0.0, std::min(double(img_w), b.x1));
        b.x2 = std::max(0.0, std::min(double(img_w), b.x2));
        b.y1 = std::max(0.0, std::min(double(img_h), b.y1));
        b.y2 = std::max(0.0, std::min(double(img_h), b.y2));
        if (b.x2 <= b.x1 || b.y2 <= b.y1) continue;
        for (int c = 0; c < ncls; ++c) {
          const double sc = 1.0 / (1.0 + std::exp(-double(m.at(n, c, y, x))));
          if (sc >= thr) cand.push_back({b, c, sc});
        }
      }
  }
  // own greedy nms
  std::vector<size_t> order(cand.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return cand[a].score > cand[b].score; });
  std::vector<bool> dead(cand.size(), false);
  std::vector<Detection> out;
  for (size_t i = 0; i < order.size(); ++i) {
    if (dead[order[i]]) continue;
    out.push_back(cand[order[i]]);
    for (size_t j = i + 1; j < order.size(); ++j) {
      if (dead[order[j]] || cand[order[j]].class_id != cand[order[i]].class_id) continue;
      if (iou(cand[order[i]].box, cand[order[j]].box) > nms_thr) dead[order[j]] = true;
    }
  }
  return out;
}

bool same_detections(std::vector<Detection> a, std::vector<Detection> b) {
  if (a.size() != b.size()) return false;
  auto key = [](const Detection& d) {
    return std::make_tuple(d.class_id, -d.score, d.box.x1, d.box.y1, d.box.x2, d.box.y2);
  };
  std::sort(a.begin(), a.end(), [&](auto& p, auto& q) { return key(p) < key(q); });
  std::sort(b.begin(), b.end(), [&](auto& p, auto& q) { return key(p) < key(q); });
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].class_id != b[i].class_id) return false;
    if (std::abs(a[i].score - b[i].score) > 1e-12) return false;
    if (std::abs(a[i].box.x1 - b[i].box.x1) > 1e-9) return false;
    if (std::abs(a[i].box.y2 - b[i].box.y2) > 1e-9) return false;
  }
  return true;
}

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.backbone.stem_channels = 4;
  mc.backbone.dca_groups = 2;
  mc.cf = 8;
  mc.head.num_classes = 3;
  return mc;
}

template <typename T>
std::vector<LoadedSample<T>> synthetic_samples(i64 count, i64 size, u64 seed,
                                               bool train) {
  Rng rng(seed);
  std::vector<LoadedSample<T>> out;
  for (i64 i = 0; i < count; ++i) {
    LoadedSample<T> s;
    s.image = random_tensor<T>({1, 3, size, size}, rng, 0.0, 1.0);
    const i64 n_boxes = rng.uniform_int(1, 2);
    for (i64 b = 0; b < n_boxes; ++b) {
      const double x = rng.uniform(2, size - 12), y = rng.uniform(2, size - 12);
      s.boxes.push_back({Box{x, y, x + rng.uniform(4, 9), y + rng.uniform(4, 9)},
                         static_cast<int>(rng.uniform_int(0, 2))});
    }
    s.is_train = train;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("model_forward: per-scale map shapes") {
  ModelConfig mc;  // desk defaults, 3 classes, cf 64
  DetectModel<float> model(mc);
  auto maps = model.forward_maps(Tensor<float>(1, 3, 64, 64, 0.3f));
  CHECK(maps[0].shape() == Shape{1, 7, 8, 8});
  CHECK(maps[1].shape() == Shape{1, 7, 4, 4});
  CHECK(maps[2].shape() == Shape{1, 7, 2, 2});
}

TEST_CASE("zero-init model emits all-zero logits (decoded scores 0.5)") {
  DetectModel<float> model(tiny_config());  // no init: conv weights all zero
  auto maps = model.forward_maps(Tensor<float>(1, 3, 32, 32, 0.7f));
  for (auto& m : maps) CHECK(testutil::max_abs(m) == 0.0f);
}

TEST_CASE("decode: very negative logits yield no detections") {
  std::array<Tensor<double>, 3> maps{Tensor<double>(1, 7, 8, 8, -40.0),
                                     Tensor<double>(1, 7, 4, 4, -40.0),
                                     Tensor<double>(1, 7, 2, 2, -40.0)};
  CHECK(decode(maps, 0, 3, 0.3, 0.5, 64, 64).empty());
}

TEST_CASE("decode: single hot cell follows the decode formula and clips") {
  std::array<Tensor<double>, 3> maps{Tensor<double>(1, 7, 8, 8, -40.0),
                                     Tensor<double>(1, 7, 4, 4, -40.0),
                                     Tensor<double>(1, 7, 2, 2, -40.0)};
  // stride-8 cell (0,0): center (4,4), offsets (1,1,1,1) in stride units
  maps[0].at(0, 1, 0, 0) = 9.0;
  for (int k = 0; k < 4; ++k) maps[0].at(0, 3 + k, 0, 0) = 1.0;
  auto dets = decode(maps, 0, 3, 0.3, 0.5, 64, 64);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].class_id == 1);
  CHECK(dets[0].box.x1 == doctest::Approx(0.0));  // -4 clipped
  CHECK(dets[0].box.y1 == doctest::Approx(0.0));
  CHECK(dets[0].box.x2 == doctest::Approx(12.0));
  CHECK(dets[0].box.y2 == doctest::Approx(12.0));
  CHECK(dets[0].score == doctest::Approx(1.0 / (1.0 + std::exp(-9.0))));
}

TEST_CASE("decode agrees with an independent re-implementation on random maps") {
  Rng rng(90);
  for (int it = 0; it < 25; ++it) {
    std::array<Tensor<double>, 3> maps{
        random_tensor<double>({2, 7, 8, 8}, rng, -4, 4),
        random_tensor<double>({2, 7, 4, 4}, rng, -4, 4),
        random_tensor<double>({2, 7, 2, 2}, rng, -4, 4)};
    for (i64 n = 0; n < 2; ++n) {
      auto got = decode(maps, n, 3, 0.4, 0.5, 64, 64);
      auto want = oracle_decode(maps, n, 3, 0.4, 0.5, 64, 64);
      REQUIRE(same_detections(got, want));
    }
  }
}

TEST_CASE("encode/decode consistency recovers the ground truth exactly") {
  Rng rng(91);
  for (int it = 0; it < 20; ++it) {
    std::vector<std::vector<GroundTruthBox>> gts(1);
    const int nb = static_cast<int>(rng.uniform_int(1, 4));
    for (int b = 0; b < nb; ++b) {
      // boxes built around a stride-8 cell center so each one covers the
      // center of its assigned cell (the exact-recovery precondition), and
      // well separated so no two share a cell
      const double ccx = 4.0 + 16.0 * (b % 2), ccy = 4.0 + 16.0 * (b / 2);
      const double x = ccx - rng.uniform_int(2, 4), y = ccy - rng.uniform_int(2, 4);
      const double x2 = ccx + rng.uniform_int(2, 6), y2 = ccy + rng.uniform_int(2, 6);
      gts[0].push_back({Box{x, y, x2, y2}, static_cast<int>(rng.uniform_int(0, 2))});
    }
    auto maps = encode_ground_truth<double>(gts, 64, 64, 3);
    auto dets = decode(maps, 0, 3, 0.5, 0.5, 64, 64);
    REQUIRE(dets.size() == gts[0].size());
    auto m = match_and_count(dets, gts[0], 0.999);  // require essentially IoU 1
    CHECK(m.tp == static_cast<int>(gts[0].size()));
    for (const auto& d : dets) {
      bool exact = false;
      for (const auto& g : gts[0])
        if (g.class_id == d.class_id && iou(g.box, d.box) == doctest::Approx(1.0))
          exact = true;
      CHECK(exact);
    }
  }
}

TEST_CASE("detection loss: closed form with no ground truth and zero logits") {
  Tape<double> t;
  std::array<ValueRef<double>, 3> maps{t.leaf(Tensor<double>(2, 7, 8, 8), true),
                                       t.leaf(Tensor<double>(2, 7, 4, 4), true),
                                       t.leaf(Tensor<double>(2, 7, 2, 2), true)};
  std::vector<std::vector<GroundTruthBox>> gts(2);
  auto loss = detection_loss(t, maps, gts, 3, 1.0);
  const double cells = 2.0 * (64 + 16 + 4);
  CHECK(loss.cls_value == doctest::Approx(cells * 3.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(loss.reg_value == 0.0);
  CHECK(loss.num_pos == 0);
}

TEST_CASE("detection loss: perfect maps have zero regression term") {
  std::vector<std::vector<GroundTruthBox>> gts(1);
  gts[0].push_back({Box{8, 8, 16, 16}, 0});
  gts[0].push_back({Box{30, 26, 38, 38}, 2});
  auto raw = encode_ground_truth<double>(gts, 64, 64, 3);
  Tape<double> t;
  std::array<ValueRef<double>, 3> maps{t.leaf(raw[0], true), t.leaf(raw[1], true),
                                       t.leaf(raw[2], true)};
  auto loss = detection_loss(t, maps, gts, 3, 1.0);
  CHECK(loss.reg_value == 0.0);
  CHECK(loss.num_pos == 2);
  CHECK(loss.total_value >= 0.0);
}

TEST_CASE("detection loss: random maps match a scalar recomputation oracle") {
  Rng rng(92);
  for (int it = 0; it < 10; ++it) {
    std::array<Tensor<double>, 3> raw{
        random_tensor<double>({2, 7, 8, 8}, rng, -2, 2),
        random_tensor<double>({2, 7, 4, 4}, rng, -2, 2),
        random_tensor<double>({2, 7, 2, 2}, rng, -2, 2)};
    std::vector<std::vector<GroundTruthBox>> gts(2);
    gts[0].push_back({Box{3, 3, 11, 12}, 0});
    gts[0].push_back({Box{20, 24, 52, 55}, 1});
    gts[1].push_back({Box{40, 8, 47, 14}, 2});

    Tape<double> t;
    std::array<ValueRef<double>, 3> maps{t.leaf(raw[0], true), t.leaf(raw[1], true),
                                         t.leaf(raw[2], true)};
    auto loss = detection_loss(t, maps, gts, 3, 1.0);

    // oracle: re-derive the assignment and both terms in plain loops
    double cls = 0, reg = 0;
    i64 npos = 0;
    std::array<Tensor<double>, 3> cls_t{Tensor<double>(2, 3, 8, 8),
                                        Tensor<double>(2, 3, 4, 4),
                                        Tensor<double>(2, 3, 2, 2)};
    std::array<Tensor<double>, 3> reg_t{Tensor<double>(2, 4, 8, 8),
                                        Tensor<double>(2, 4, 4, 4),
                                        Tensor<double>(2, 4, 2, 2)};
    std::array<Tensor<double>, 3> pos{Tensor<double>(2, 1, 8, 8),
                                      Tensor<double>(2, 1, 4, 4),
                                      Tensor<double>(2, 1, 2, 2)};
    for (i64 n = 0; n < 2; ++n)
      for (const auto& g : gts[static_cast<size_t>(n)]) {
        const double side = std::sqrt((g.box.x2 - g.box.x1) * (g.box.y2 - g.box.y1));
        int best = 0;
        double bd = 1e18;
        const int strides[3] = {8, 16, 32};
        for (int s = 0; s < 3; ++s) {
          const double d = std::abs(std::log2(side) - std::log2(double(strides[s])));
          if (d < bd) {
            bd = d;
            best = s;
          }
        }
        const double st = strides[best];
        const i64 ix = std::min<i64>(i64(std::floor((g.box.x1 + g.box.x2) / 2 / st)),
                                     pos[best].w() - 1);
        const i64 iy = std::min<i64>(i64(std::floor((g.box.y1 + g.box.y2) / 2 / st)),
                                     pos[best].h() - 1);
        if (pos[best].at(n, 0, iy, ix) != 0.0) continue;
        pos[best].at(n, 0, iy, ix) = 1;
        cls_t[best].at(n, g.class_id, iy, ix) = 1;
        const double ccx = (ix + 0.5) * st, ccy = (iy + 0.5) * st;
        reg_t[best].at(n, 0, iy, ix) = (ccx - g.box.x1) / st;
        reg_t[best].at(n, 1, iy, ix) = (ccy - g.box.y1) / st;
        reg_t[best].at(n, 2, iy, ix) = (g.box.x2 - ccx) / st;
        reg_t[best].at(n, 3, iy, ix) = (g.box.y2 - ccy) / st;
        ++npos;
      }
    for (int s = 0; s < 3; ++s) {
      for (i64 n = 0; n < 2; ++n)
        for (i64 y = 0; y < raw[s].h(); ++y)
          for (i64 x = 0; x < raw[s].w(); ++x) {
            for (i64 c = 0; c < 3; ++c) {
              const double v = raw[s].at(n, c, y, x);
              const double tgt = cls_t[s].at(n, c, y, x);
              cls += std::max(v, 0.0) - v * tgt + std::log1p(std::exp(-std::abs(v)));
            }
            if (pos[s].at(n, 0, y, x) != 0.0)
              for (i64 k = 0; k < 4; ++k) {
                const double d = raw[s].at(n, 3 + k, y, x) - reg_t[s].at(n, k, y, x);
                reg += std::abs(d) < 1 ? 0.5 * d * d : std::abs(d) - 0.5;
              }
          }
    }
    const double norm = std::max<i64>(1, npos);
    REQUIRE(loss.cls_value == doctest::Approx(cls / norm).epsilon(1e-10));
    REQUIRE(loss.reg_value == doctest::Approx(reg / norm).epsilon(1e-10));
    REQUIRE(loss.total_value >= 0.0);
    REQUIRE(loss.num_pos == npos);
  }
}

TEST_CASE("end-to-end gradient through head and loss passes finite differences") {
  auto rep = gradcheck::head_and_loss();
  CHECK_MESSAGE(rep.pass, "worst: ", rep.worst_param, " rel ", rep.max_rel_err);
  CHECK(rep.coords_checked >= 16 * 6);
}

TEST_CASE("adamw: zero gradient with zero decay leaves parameters unchanged") {
  ParamStore<float> store;
  ParamTensor<float> p(Shape{1, 4, 1, 1}, InitSpec::uniform(1.0));
  Rng rng(93);
  p.initialize(rng);
  store.add("p", &p);
  const Tensor<float> before = p.value;
  AdamW<float> opt(store, {0.1, 0.9, 0.999, 1e-8, 0.0});
  opt.step();
  CHECK(p.value.bitwise_equal(before));
}

TEST_CASE("adamw: single-step closed form") {
  ParamStore<double> store;
  ParamTensor<double> p(Shape{1, 1, 1, 1}, InitSpec::constant(1.0));
  store.add("theta", &p);
  p.grad[0] = 1.0;
  AdamW<double> opt(store, {0.1, 0.9, 0.999, 1e-8, 0.0});
  opt.step();
  // m_hat = v_hat = 1 after bias correction, so theta' = 1 - 0.1/(1 + eps)
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(opt.step_count() == 1);
}

TEST_CASE("adamw: decoupled decay shrinks before the adaptive step") {
  ParamStore<double> store;
  ParamTensor<double> p(Shape{1, 1, 1, 1}, InitSpec::constant(2.0));
  store.add("theta", &p);
  p.grad[0] = 0.0;
  AdamW<double> opt(store, {0.1, 0.9, 0.999, 1e-8, 0.01});
  opt.step();
  CHECK(p.value[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.01)).epsilon(1e-12));
}

TEST_CASE("adamw: ten steps down a quadratic bowl decrease the loss") {
  ParamStore<double> store;
  ParamTensor<double> p(Shape{1, 1, 1, 1}, InitSpec::constant(3.0));
  store.add("theta", &p);
  AdamW<double> opt(store, {0.1, 0.9, 0.999, 1e-8, 0.0});
  auto loss = [&]() { return (p.value[0] - 1.0) * (p.value[0] - 1.0); };
  double prev = loss();
  for (int step = 1; step <= 10; ++step) {
    p.reset_grad();
    p.grad[0] = 2.0 * (p.value[0] - 1.0);
    opt.step();
    const double cur = loss();
    if (step > 2) REQUIRE(cur < prev);
    prev = cur;
  }
}

TEST_CASE("adamw: non-finite gradient aborts with the parameter name") {
  ParamStore<double> store;
  ParamTensor<double> ok(Shape{1, 1, 1, 1}, InitSpec::constant(1.0));
  ParamTensor<double> bad(Shape{1, 1, 1, 1}, InitSpec::constant(1.0));
  store.add("layer.ok", &ok);
  store.add("layer.bad", &bad);
  bad.grad[0] = std::nan("");
  AdamW<double> opt(store, {0.1, 0.9, 0.999, 1e-8, 0.0});
  try {
    opt.step();
    FAIL("expected abort");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("layer.bad") != std::string::npos);
  }
  CHECK(ok.value[0] == 1.0);  // nothing was touched
}

TEST_CASE("checkpoint: save/load reproduces forward outputs bitwise") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "mrc_ckpt_test.bin").string();
  ModelConfig mc = tiny_config();
  DetectModel<float> a(mc);
  a.init_params(777);
  // push the batch-norm buffers away from the identity so they are exercised
  {
    Rng rng(94);
    Tensor<float> img = random_tensor<float>({2, 3, 32, 32}, rng, 0.0, 1.0);
    (void)a.forward_maps(img, /*training=*/true);
  }
  save_checkpoint(path, "{}", a.params(), a.buffers());

  DetectModel<float> b(mc);
  load_checkpoint(path, b.params(), b.buffers());
  Rng rng(95);
  for (int it = 0; it < 10; ++it) {
    Tensor<float> img = random_tensor<float>({1, 3, 32, 32}, rng, 0.0, 1.0);
    auto ma = a.forward_maps(img);
    auto mb = b.forward_maps(img);
    for (int s = 0; s < 3; ++s) REQUIRE(ma[s].bitwise_equal(mb[s]));
  }
  fs::remove(path);
}

TEST_CASE("trainer: one epoch on 8 samples without augmentation emits one row") {
  ModelConfig mc = tiny_config();
  DetectModel<float> model(mc);
  model.init_params(101);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 1;
  tc.augment_hflip = false;
  tc.augment_vflip = false;
  tc.seed = 5;
  Trainer<float> trainer(model, tc, synthetic_samples<float>(8, 32, 1001, true),
                         synthetic_samples<float>(2, 32, 1002, false));
  EpochLog log = trainer.run_epoch();
  CHECK(log.epoch == 1);
  CHECK(log.loss_total > 0.0);
  CHECK(metric_csv_row(log).find(",") != std::string::npos);
  CHECK_THROWS_AS((Trainer<float>{model, tc, {}, {}}), ConfigError);
}

TEST_CASE("trainer: checkpoint resume reproduces the next epoch bitwise") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "mrc_resume_test.bin").string();
  ModelConfig mc = tiny_config();
  TrainConfig tc;
  tc.batch_size = 4;
  tc.seed = 11;
  auto train_set = synthetic_samples<float>(8, 32, 2001, true);
  auto val_set = synthetic_samples<float>(2, 32, 2002, false);

  DetectModel<float> a(mc);
  a.init_params(55);
  Trainer<float> ta(a, tc, train_set, val_set);
  ta.run_epoch();
  ta.run_epoch();
  save_checkpoint(path, "{}", a.params(), a.buffers(), &ta.optimizer());
  EpochLog next_a = ta.run_epoch();

  DetectModel<float> b(mc);
  Trainer<float> tb(b, tc, train_set, val_set);
  load_checkpoint(path, b.params(), b.buffers(), &tb.optimizer());
  tb.set_epochs_completed(2);
  EpochLog next_b = tb.run_epoch();

  CHECK(metric_csv_row(next_a) == metric_csv_row(next_b));
  fs::remove(path);
}

TEST_CASE("trainer: identical seeds give identical metric logs") {
  ModelConfig mc = tiny_config();
  TrainConfig tc;
  tc.batch_size = 4;
  tc.seed = 21;
  auto train_set = synthetic_samples<float>(8, 32, 3001, true);
  auto val_set = synthetic_samples<float>(2, 32, 3002, false);
  std::string log1, log2;
  for (std::string* target : {&log1, &log2}) {
    DetectModel<float> m(mc);
    m.init_params(99);
    Trainer<float> tr(m, tc, train_set, val_set);
    for (int e = 0; e < 3; ++e) *target += metric_csv_row(tr.run_epoch()) + "\n";
  }
  CHECK(log1 == log2);
}
