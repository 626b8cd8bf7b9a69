#include "mrcnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mrc {

double iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

MatchResult match_and_count(const std::vector<Detection>& dets,
                            const std::vector<GroundTruthBox>& gts, double iou_thr) {
  MatchResult res;
  res.flags.assign(dets.size(), MatchFlag::FP);

  // stable sort keeps insertion order on score ties
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return dets[a].score > dets[b].score;
  });

  std::vector<bool> claimed(gts.size(), false);
  for (size_t oi : order) {
    const Detection& d = dets[oi];
    double best = 0.0;
    i64 best_j = -1;
    for (size_t j = 0; j < gts.size(); ++j) {
      if (claimed[j] || gts[j].class_id != d.class_id) continue;
      const double v = iou(d.box, gts[j].box);
      if (v >= iou_thr && v > best) {
        best = v;
        best_j = static_cast<i64>(j);
      }
    }
    if (best_j >= 0) {
      claimed[static_cast<size_t>(best_j)] = true;
      res.flags[oi] = MatchFlag::TP;
      ++res.tp;
    } else {
      ++res.fp;
    }
  }
  res.fn = static_cast<int>(gts.size()) - res.tp;
  return res;
}

double average_precision(const std::vector<MatchFlag>& ranked_flags,
                         const std::vector<double>& ranked_scores, i64 gt_count) {
  (void)ranked_scores;  // ranking already applied; kept for interface symmetry
  if (gt_count <= 0) return 0.0;
  if (ranked_flags.empty()) return 0.0;

  const size_t n = ranked_flags.size();
  std::vector<double> prec(n), rec(n);
  i64 tp = 0, fp = 0;
  for (size_t i = 0; i < n; ++i) {
    if (ranked_flags[i] == MatchFlag::TP) ++tp;
    else ++fp;
    prec[i] = static_cast<double>(tp) / static_cast<double>(tp + fp);
    rec[i] = static_cast<double>(tp) / static_cast<double>(gt_count);
  }
  // precision envelope: max precision at recall >= r
  for (size_t i = n - 1; i-- > 0;) prec[i] = std::max(prec[i], prec[i + 1]);

  double ap = 0.0;
  double prev_rec = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ap += (rec[i] - prev_rec) * prec[i];
    prev_rec = rec[i];
  }
  return ap;
}

EvalReport map50(const std::vector<ImageEval>& images, int num_classes,
                 double iou_thr) {
  EvalReport report;

  struct Ranked {
    double score;
    size_t seq;  // global insertion order, breaks score ties deterministically
    MatchFlag flag;
  };
  std::vector<std::vector<Ranked>> per_class(static_cast<size_t>(num_classes));
  std::vector<i64> gt_counts(static_cast<size_t>(num_classes), 0);
  std::vector<int> tps(num_classes, 0), fps(num_classes, 0), fns(num_classes, 0);

  size_t seq = 0;
  for (const ImageEval& img : images) {
    MatchResult m = match_and_count(img.dets, img.gts, iou_thr);
    for (size_t i = 0; i < img.dets.size(); ++i) {
      const int c = img.dets[i].class_id;
      if (c < 0 || c >= num_classes) continue;
      per_class[static_cast<size_t>(c)].push_back({img.dets[i].score, seq++, m.flags[i]});
      if (m.flags[i] == MatchFlag::TP) ++tps[c];
      else ++fps[c];
    }
    for (const GroundTruthBox& g : img.gts) {
      if (g.class_id < 0 || g.class_id >= num_classes) continue;
      ++gt_counts[static_cast<size_t>(g.class_id)];
    }
  }

  i64 total_tp = 0, total_fp = 0, total_gt = 0, total_dets = 0;
  double ap_sum = 0.0;
  i64 ap_classes = 0;
  for (int c = 0; c < num_classes; ++c) {
    auto& ranked = per_class[static_cast<size_t>(c)];
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.seq < b.seq;
    });
    std::vector<MatchFlag> flags;
    std::vector<double> scores;
    flags.reserve(ranked.size());
    for (const Ranked& r : ranked) {
      flags.push_back(r.flag);
      scores.push_back(r.score);
    }
    const i64 gt = gt_counts[static_cast<size_t>(c)];
    ClassEval ce;
    ce.gt_count = gt;
    ce.tp = tps[c];
    ce.fp = fps[c];
    ce.fn = static_cast<int>(gt) - tps[c];
    ce.ap = average_precision(flags, scores, gt);
    report.per_class[c] = ce;
    if (gt > 0) {
      ap_sum += ce.ap;
      ++ap_classes;
    }
    total_tp += tps[c];
    total_fp += fps[c];
    total_gt += gt;
    total_dets += static_cast<i64>(ranked.size());
  }

  report.empty = (total_gt == 0 && total_dets == 0);
  report.map50 = ap_classes > 0 ? ap_sum / static_cast<double>(ap_classes) : 0.0;
  report.precision =
      (total_tp + total_fp) > 0
          ? static_cast<double>(total_tp) / static_cast<double>(total_tp + total_fp)
          : 0.0;
  report.recall = total_gt > 0
                      ? static_cast<double>(total_tp) / static_cast<double>(total_gt)
                      : 0.0;
  return report;
}

std::string EvalReport::to_json(const std::vector<std::string>& class_names) const {
  std::ostringstream os;
  os.precision(17);
  os << "{\"empty\":" << (empty ? "true" : "false") << ",\"map50\":" << map50
     << ",\"precision\":" << precision << ",\"recall\":" << recall
     << ",\"per_class\":[";
  bool first = true;
  for (const auto& [cid, ce] : per_class) {
    if (!first) os << ",";
    first = false;
    os << "{\"class_id\":" << cid;
    if (cid >= 0 && static_cast<size_t>(cid) < class_names.size())
      os << ",\"name\":\"" << class_names[static_cast<size_t>(cid)] << "\"";
    os << ",\"ap\":" << ce.ap << ",\"tp\":" << ce.tp << ",\"fp\":" << ce.fp
       << ",\"fn\":" << ce.fn << ",\"gt\":" << ce.gt_count << "}";
  }
  os << "]}";
  return os.str();
}

}  // namespace mrc
