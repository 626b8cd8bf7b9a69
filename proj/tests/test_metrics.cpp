#include "doctest.h"

#include <algorithm>
#include <numeric>

#include "mrcnet/cost.hpp"
#include "mrcnet/metrics.hpp"
#include "support/test_utils.hpp"

using namespace mrc;

// --- independent oracles -----------------------------------------------------

namespace {

double oracle_iou(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0 || h <= 0) return 0;
  const double inter = w * h;
  return inter /
         ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter);
}

// independent greedy matcher: detections in score order each claim the best
// remaining ground truth of their class
std::vector<MatchFlag> oracle_match(const std::vector<Detection>& dets,
                                    const std::vector<GroundTruthBox>& gts,
                                    double thr) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> used(gts.size(), false);
  std::vector<MatchFlag> flags(dets.size(), MatchFlag::FP);
  for (size_t oi : order) {
    double best = thr;
    i64 bj = -1;
    for (size_t j = 0; j < gts.size(); ++j) {
      if (used[j] || gts[j].class_id != dets[oi].class_id) continue;
      const double v = oracle_iou(dets[oi].box, gts[j].box);
      if (v >= thr && v > (bj < 0 ? 0.0 : best)) {
        best = v;
        bj = static_cast<i64>(j);
      }
    }
    if (bj >= 0) {
      used[static_cast<size_t>(bj)] = true;
      flags[oi] = MatchFlag::TP;
    }
  }
  return flags;
}

// AP re-derived from a different (equivalent) formulation: for each true
// positive, take the envelope precision at its rank and average over GT count
double oracle_ap(const std::vector<MatchFlag>& flags, i64 gt) {
  if (gt <= 0 || flags.empty()) return 0;
  const size_t n = flags.size();
  std::vector<double> prec(n);
  i64 tp = 0;
  for (size_t i = 0; i < n; ++i) {
    if (flags[i] == MatchFlag::TP) ++tp;
    prec[i] = double(tp) / double(i + 1);
  }
  double ap = 0;
  for (size_t i = 0; i < n; ++i) {
    if (flags[i] != MatchFlag::TP) continue;
    double env = 0;
    for (size_t j = i; j < n; ++j) env = std::max(env, prec[j]);
    ap += env;
  }
  return ap / double(gt);
}

Detection det(double x1, double y1, double x2, double y2, int cls, double score) {
  return Detection{Box{x1, y1, x2, y2}, cls, score};
}

GroundTruthBox gt(double x1, double y1, double x2, double y2, int cls) {
  return GroundTruthBox{Box{x1, y1, x2, y2}, cls};
}

}  // namespace

TEST_CASE("iou closed forms") {
  CHECK(iou(Box{0, 0, 2, 2}, Box{0, 0, 2, 2}) == doctest::Approx(1.0));
  CHECK(iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
  CHECK(iou(Box{0, 0, 1, 1}, Box{2, 2, 3, 3}) == 0.0);
}

TEST_CASE("match_and_count: exact detections are all TP") {
  std::vector<GroundTruthBox> gts{gt(0, 0, 4, 4, 0), gt(10, 10, 14, 14, 1)};
  std::vector<Detection> dets{det(0, 0, 4, 4, 0, 1.0), det(10, 10, 14, 14, 1, 1.0)};
  auto m = match_and_count(dets, gts);
  CHECK(m.tp == 2);
  CHECK(m.fp == 0);
  CHECK(m.fn == 0);
}

TEST_CASE("precision 0.75 from TP=3 FP=1") {
  std::vector<ImageEval> imgs(1);
  imgs[0].gts = {gt(0, 0, 4, 4, 0), gt(10, 10, 14, 14, 0), gt(20, 20, 24, 24, 0)};
  imgs[0].dets = {det(0, 0, 4, 4, 0, 0.9), det(10, 10, 14, 14, 0, 0.8),
                  det(20, 20, 24, 24, 0, 0.7), det(40, 40, 44, 44, 0, 0.6)};
  auto rep = map50(imgs, 1);
  CHECK(rep.precision == doctest::Approx(0.75));
  CHECK(rep.recall == doctest::Approx(1.0));
}

TEST_CASE("crafted overlaps agree with the independent greedy oracle") {
  std::vector<GroundTruthBox> gts{gt(0, 0, 10, 10, 0), gt(8, 0, 18, 10, 0),
                                  gt(30, 30, 40, 40, 0)};
  std::vector<Detection> dets{
      det(1, 0, 11, 10, 0, 0.95),  // overlaps gt0 strongly, gt1 weakly
      det(7, 0, 17, 10, 0, 0.90),  // overlaps both, gt0 may be taken
      det(9, 1, 19, 11, 0, 0.85),
      det(31, 29, 41, 39, 0, 0.80),
      det(2, 2, 5, 5, 0, 0.75),
  };
  auto m = match_and_count(dets, gts, 0.5);
  auto want = oracle_match(dets, gts, 0.5);
  REQUIRE(m.flags.size() == want.size());
  for (size_t i = 0; i < want.size(); ++i) CHECK(m.flags[i] == want[i]);
}

TEST_CASE("matching never claims one ground truth twice (property)") {
  Rng rng(80);
  for (int it = 0; it < 60; ++it) {
    std::vector<GroundTruthBox> gts;
    std::vector<Detection> dets;
    const int ng = static_cast<int>(rng.uniform_int(1, 5));
    const int nd = static_cast<int>(rng.uniform_int(1, 8));
    for (int i = 0; i < ng; ++i) {
      const double x = rng.uniform(0, 20), y = rng.uniform(0, 20);
      gts.push_back(gt(x, y, x + rng.uniform(2, 8), y + rng.uniform(2, 8),
                       static_cast<int>(rng.uniform_int(0, 1))));
    }
    for (int i = 0; i < nd; ++i) {
      const double x = rng.uniform(0, 20), y = rng.uniform(0, 20);
      dets.push_back(det(x, y, x + rng.uniform(2, 8), y + rng.uniform(2, 8),
                         static_cast<int>(rng.uniform_int(0, 1)), rng.uniform(0.1, 1)));
    }
    auto m = match_and_count(dets, gts, 0.5);
    CHECK(m.tp + m.fn == static_cast<int>(gts.size()));
    CHECK(m.tp + m.fp == static_cast<int>(dets.size()));
    auto want = oracle_match(dets, gts, 0.5);
    for (size_t i = 0; i < want.size(); ++i) REQUIRE(m.flags[i] == want[i]);
  }
}

TEST_CASE("average precision: closed forms and PR-sweep oracle") {
  using F = MatchFlag;
  // perfect ranking covering all GTs
  CHECK(average_precision({F::TP, F::TP, F::TP}, {0.9, 0.8, 0.7}, 3) ==
        doctest::Approx(1.0));
  // [TP, FP, TP] with 2 GTs: envelope gives 1 at r=1/2 and 2/3 at r=1
  const double expect = oracle_ap({F::TP, F::FP, F::TP}, 2);
  CHECK(expect == doctest::Approx(5.0 / 6.0));
  CHECK(average_precision({F::TP, F::FP, F::TP}, {0.9, 0.8, 0.7}, 2) ==
        doctest::Approx(expect));
  // zero detections
  CHECK(average_precision({}, {}, 3) == 0.0);

  Rng rng(81);
  for (int it = 0; it < 100; ++it) {
    const int n = static_cast<int>(rng.uniform_int(1, 12));
    std::vector<F> flags;
    std::vector<double> scores;
    int tp = 0;
    for (int i = 0; i < n; ++i) {
      const bool is_tp = rng.bernoulli(0.5);
      flags.push_back(is_tp ? F::TP : F::FP);
      tp += is_tp;
      scores.push_back(1.0 - 0.01 * i);
    }
    const i64 gt_count = tp + rng.uniform_int(0, 3);
    if (gt_count == 0) continue;
    REQUIRE(average_precision(flags, scores, gt_count) ==
            doctest::Approx(oracle_ap(flags, gt_count)).epsilon(1e-12));
  }
}

TEST_CASE("AP is monotone when an FP flips to TP at the same rank") {
  using F = MatchFlag;
  Rng rng(82);
  for (int it = 0; it < 50; ++it) {
    const int n = static_cast<int>(rng.uniform_int(2, 10));
    std::vector<F> flags;
    std::vector<double> scores;
    std::vector<int> fp_ranks;
    for (int i = 0; i < n; ++i) {
      flags.push_back(rng.bernoulli(0.4) ? F::TP : F::FP);
      if (flags.back() == F::FP) fp_ranks.push_back(i);
      scores.push_back(1.0 - 0.01 * i);
    }
    if (fp_ranks.empty()) continue;
    const i64 gt_count = n;  // large enough for the flipped variant too
    const double before = average_precision(flags, scores, gt_count);
    auto flipped = flags;
    flipped[static_cast<size_t>(
        fp_ranks[static_cast<size_t>(rng.uniform_int(0, static_cast<i64>(fp_ranks.size()) - 1))])] =
        F::TP;
    const double after = average_precision(flipped, scores, gt_count);
    REQUIRE(after >= before - 1e-12);
  }
}

TEST_CASE("scores under a positive monotone transform keep flags and AP") {
  std::vector<GroundTruthBox> gts{gt(0, 0, 10, 10, 0), gt(20, 20, 30, 30, 0)};
  std::vector<Detection> dets{det(0, 0, 10, 10, 0, 0.6), det(19, 20, 29, 30, 0, 0.4),
                              det(5, 5, 9, 9, 0, 0.2)};
  auto m1 = match_and_count(dets, gts, 0.5);
  std::vector<ImageEval> imgs1{{dets, gts}};
  auto r1 = map50(imgs1, 1);
  for (auto& d : dets) d.score = 0.05 + 0.9 * d.score;  // monotone
  auto m2 = match_and_count(dets, gts, 0.5);
  std::vector<ImageEval> imgs2{{dets, gts}};
  auto r2 = map50(imgs2, 1);
  for (size_t i = 0; i < m1.flags.size(); ++i) CHECK(m1.flags[i] == m2.flags[i]);
  CHECK(r1.map50 == doctest::Approx(r2.map50).epsilon(1e-12));
}

TEST_CASE("report edge cases: zero detections, empty evaluation") {
  std::vector<ImageEval> imgs(1);
  imgs[0].gts = {gt(0, 0, 4, 4, 0)};
  auto rep = map50(imgs, 2);
  CHECK(rep.map50 == 0.0);  // AP 0 for the class with GT; class without GT excluded
  CHECK_FALSE(rep.empty);

  std::vector<ImageEval> none(2);
  auto rep2 = map50(none, 2);
  CHECK(rep2.empty);
}

TEST_CASE("report serializes to json with per-class rows") {
  std::vector<ImageEval> imgs(1);
  imgs[0].gts = {gt(0, 0, 4, 4, 1)};
  imgs[0].dets = {det(0, 0, 4, 4, 1, 0.9)};
  auto rep = map50(imgs, 2);
  const std::string js = rep.to_json({"short", "open"});
  CHECK(js.find("\"map50\":1") != std::string::npos);
  CHECK(js.find("\"open\"") != std::string::npos);
}

// --- cost model ---------------------------------------------------------------

namespace handsum {

// written from the architecture definition, not from the tape
i64 conv(i64 cout, i64 cing, i64 kh, i64 kw, i64 ho, i64 wo, i64 batch) {
  return 2 * cout * cing * kh * kw * ho * wo * batch;
}
i64 tconv(i64 cin, i64 cout, i64 k, i64 ho, i64 wo, i64 batch) {
  return 2 * cin * cout * k * k * ho * wo * batch;
}

i64 cbr(i64 cin, i64 cout, i64 ho, i64 wo) {
  return conv(cout, cin, 3, 3, ho, wo, 1) + 2 * cout * ho * wo;  // bn + relu
}

i64 dca(i64 c, i64 g, i64 h, i64 w) {
  const i64 cg = c / g;
  const i64 B = g;  // one sample, groups folded into the batch axis
  i64 f = 0;
  f += B * cg * h;                       // pool over W
  f += B * cg * w;                       // pool over H
  f += conv(cg, cg, 1, 1, h + w, 1, B);  // fused strip conv
  f += B * cg * h + B * cg * w;          // two sigmoids on the strips
  f += 2 * B * cg * h * w;               // two gate multiplies
  f += conv(cg, cg, 3, 3, h, w, B);      // local branch
  f += 2 * (B * cg * h * w + B * cg + B * cg);  // gn + pool + softmax per branch
  f += 2 * (2 * B * cg * h * w);         // two weight-by-feature matmuls
  f += B * h * w;                        // sum of the two spatial maps
  f += B * h * w;                        // sigmoid
  f += B * cg * h * w;                   // final gating multiply
  return f;
}

i64 msru(i64 c, i64 g, i64 h, i64 w) {
  i64 f = 0;
  f += 2 * cbr(c, c, h, w);
  f += c * h * w;                          // first residual add
  f += conv(c / 2, c / 2, 3, 3, h, w, 1);  // split branch conv
  f += conv(2 * c, c, 1, 1, h, w, 1);      // expand
  f += conv(c, 2 * c, 1, 1, h, w, 1);      // project
  f += dca(c, g, h, w);
  f += c * h * w;                          // second residual add
  return f;
}

i64 lssm(i64 c, i64 h, i64 w) {
  i64 f = 0;
  f += c * h + c * w;                  // directional pools
  f += conv(c, c, 1, 1, h, 1, 1) + conv(c, c, 1, 1, 1, w, 1);
  f += c * h + c * w;                  // sigmoids
  f += 2 * c * h * w;                  // two gate multiplies
  return f;
}

i64 sfa(i64 c_high, i64 c_low, i64 cf, i64 h, i64 w) {
  i64 f = 0;
  f += tconv(c_high, cf, 3, h, w, 1);
  f += lssm(c_low, h, w);
  f += conv(cf, c_low, 1, 1, h, w, 1);
  f += cf * h * w;  // sigmoid on the aligned low path
  f += lssm(cf, h, w);
  f += cf * h * w;  // gating multiply
  f += cf * h * w;  // residual add
  return f;
}

i64 desk_model_flops() {
  i64 f = 0;
  // stem: 64 -> 32 -> 16
  f += conv(32, 3, 3, 3, 32, 32, 1) + 2 * 32 * 32 * 32;
  f += conv(32, 32, 3, 3, 16, 16, 1) + 2 * 32 * 16 * 16;
  // stages: 8x8 / 4x4 / 2x2
  f += cbr(32, 64, 8, 8) + msru(64, 8, 8, 8);
  f += cbr(64, 128, 4, 4) + msru(128, 8, 4, 4);
  f += cbr(128, 256, 2, 2) + msru(256, 8, 2, 2);
  // neck
  f += conv(64, 256, 1, 1, 2, 2, 1);      // p5 projection
  f += sfa(64, 128, 64, 4, 4);            // p5 -> p4
  f += sfa(64, 64, 64, 8, 8);             // p4 -> p3
  // heads at 8/4/2
  f += conv(7, 64, 1, 1, 8, 8, 1) + conv(7, 64, 1, 1, 4, 4, 1) +
       conv(7, 64, 1, 1, 2, 2, 1);
  return f;
}

i64 desk_model_params() {
  auto conv_p = [](i64 cin, i64 cout, i64 k, bool bias) {
    return cout * cin * k * k + (bias ? cout : 0);
  };
  auto cbr_p = [&](i64 cin, i64 cout) { return conv_p(cin, cout, 3, false) + 2 * cout; };
  auto dca_p = [&](i64 c, i64 g) {
    const i64 cg = c / g;
    return conv_p(cg, cg, 1, true) + conv_p(cg, cg, 3, true) + 2 * (2 * cg);
  };
  auto msru_p = [&](i64 c, i64 g) {
    return 2 * cbr_p(c, c) + conv_p(c / 2, c / 2, 3, true) + conv_p(c, 2 * c, 1, true) +
           conv_p(2 * c, c, 1, true) + dca_p(c, g);
  };
  auto lssm_p = [&](i64 c) { return 2 * conv_p(c, c, 1, true); };
  auto sfa_p = [&](i64 ch, i64 cl, i64 cf) {
    return ch * cf * 9 + cf            // transposed conv + bias
           + conv_p(cl, cf, 1, true)   // align
           + lssm_p(cf) + lssm_p(cl);
  };
  i64 p = 0;
  p += cbr_p(3, 32) + cbr_p(32, 32);
  p += cbr_p(32, 64) + msru_p(64, 8);
  p += cbr_p(64, 128) + msru_p(128, 8);
  p += cbr_p(128, 256) + msru_p(256, 8);
  p += conv_p(256, 64, 1, true);
  p += sfa_p(64, 128, 64) + sfa_p(64, 64, 64);
  p += 3 * conv_p(64, 7, 1, true);
  return p;
}

}  // namespace handsum

TEST_CASE("cost closed forms for a single conv") {
  CHECK(conv_param_count(2, 4, 3, 3, true) == 76);
  CHECK(conv_flop_count(2, 4, 3, 3, 8, 8) == 9216);
}

TEST_CASE("desk-scale model params and flops match the hand-summed oracle") {
  ModelConfig cfg;  // desk defaults: c0=32, cf=64, 3 classes, lssm attention
  DetectModel<float> model(cfg);
  CHECK(count_params(model) == handsum::desk_model_params());
  CHECK(count_flops(model, Shape{1, 3, 64, 64}) == handsum::desk_model_flops());
}

TEST_CASE("count_flops is linear in batch size; params ignore input shape") {
  ModelConfig cfg;
  cfg.backbone.stem_channels = 8;
  cfg.backbone.dca_groups = 2;
  cfg.cf = 16;
  DetectModel<float> model(cfg);
  const i64 f1 = count_flops(model, Shape{1, 3, 32, 32});
  const i64 f4 = count_flops(model, Shape{4, 3, 32, 32});
  CHECK(f4 == 4 * f1);
  const i64 p = count_params(model);
  (void)count_flops(model, Shape{2, 3, 64, 64});
  CHECK(count_params(model) == p);
}
