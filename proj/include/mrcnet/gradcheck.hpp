#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mrcnet/aspn.hpp"
#include "mrcnet/detect.hpp"
#include "mrcnet/mrdcb.hpp"

namespace mrc {

struct GradCheckReport {
  std::string name;
  bool pass = true;
  double max_rel_err = 0.0;
  i64 coords_checked = 0;
  std::string worst_param;
};

struct FdSettings {
  double rel_tol = 1e-4;
  double abs_floor = 1e-8;  // near-zero gradients compare absolutely
  i64 coords_per_tensor = 16;
  u64 seed = 99;
};

// Central finite differences with h = 1e-3 * max(1, |theta|) against the
// analytic gradients already accumulated in the store. loss_fn must recompute
// the full forward loss from the current parameter values.
template <typename T>
GradCheckReport fd_check_params(const std::string& name, ParamStore<T>& store,
                                const std::function<double()>& loss_fn,
                                const FdSettings& fd = {}) {
  GradCheckReport rep;
  rep.name = name;
  Rng rng(fd.seed);
  for (auto* p : store.items()) {
    const i64 n = p->value.numel();
    if (n == 0) continue;
    std::vector<i64> coords;
    if (n <= fd.coords_per_tensor) {
      for (i64 i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (i64 k = 0; k < fd.coords_per_tensor; ++k)
        coords.push_back(rng.uniform_int(0, n - 1));
    }
    for (i64 i : coords) {
      const double theta = static_cast<double>(p->value[i]);
      const double h = 1e-3 * std::max(1.0, std::abs(theta));
      p->value[i] = static_cast<T>(theta + h);
      const double lp = loss_fn();
      p->value[i] = static_cast<T>(theta - h);
      const double lm = loss_fn();
      p->value[i] = static_cast<T>(theta);
      const double numeric = (lp - lm) / (2.0 * h);
      const double analytic = static_cast<double>(p->grad[i]);
      const double denom = std::max(std::abs(analytic), std::abs(numeric));
      const double err = std::abs(analytic - numeric);
      const double rel = denom > 0.0 ? err / denom : 0.0;
      ++rep.coords_checked;
      const bool ok = err <= fd.rel_tol * denom || err <= fd.abs_floor;
      if (!ok) rep.pass = false;
      if (rel > rep.max_rel_err && err > fd.abs_floor) {
        rep.max_rel_err = rel;
        rep.worst_param = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

namespace gradcheck {

template <typename Block, typename ForwardFn>
GradCheckReport check_block(const std::string& name, Block& block, ParamStore<double>& store,
                            const Tensor<double>& input, ForwardFn&& fwd,
                            const FdSettings& fd = {}) {
  store.zero_grads();
  {
    Tape<double> t;
    auto out = fwd(t, block, t.leaf(input));
    t.backward(t.sum_all(out));
  }
  auto loss_fn = [&]() {
    Tape<double> t(false);
    auto out = fwd(t, block, t.leaf(input));
    double s = 0;
    for (i64 i = 0; i < out->val.numel(); ++i) s += out->val[i];
    return s;
  };
  return fd_check_params<double>(name, store, loss_fn, fd);
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (i64 i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline GradCheckReport msru(const FdSettings& fd = {}) {
  BackboneConfig bc;
  bc.stem_channels = 4;
  bc.dca_groups = 2;
  MsruConfig cfg = bc.msru_for(8);
  MsruBlock<double> block(cfg);
  ParamStore<double> store;
  block.collect(store, "msru");
  Rng rng(4021);
  store.init_all(rng);
  Tensor<double> x = random_tensor({2, 8, 4, 4}, rng);
  return check_block("msru", block, store, x,
                     [](Tape<double>& t, MsruBlock<double>& b, ValueRef<double> in) {
                       return b.forward(t, in, /*training=*/true);
                     },
                     fd);
}

inline GradCheckReport dca(const FdSettings& fd = {}) {
  DcaConfig cfg{8, 2, 1, 1e-5};
  DcaBlock<double> block(cfg);
  ParamStore<double> store;
  block.collect(store, "dca");
  Rng rng(4022);
  store.init_all(rng);
  Tensor<double> x = random_tensor({1, 8, 4, 4}, rng);
  return check_block("dca", block, store, x,
                     [](Tape<double>& t, DcaBlock<double>& b, ValueRef<double> in) {
                       return b.forward(t, in);
                     },
                     fd);
}

inline GradCheckReport lssm(const FdSettings& fd = {}) {
  LssmBlock<double> block(4, 1);
  ParamStore<double> store;
  block.collect(store, "lssm");
  Rng rng(4023);
  store.init_all(rng);
  Tensor<double> x = random_tensor({1, 4, 5, 3}, rng);
  return check_block("lssm", block, store, x,
                     [](Tape<double>& t, LssmBlock<double>& b, ValueRef<double> in) {
                       return b.forward(t, in);
                     },
                     fd);
}

inline GradCheckReport attention(AttentionKind kind, const FdSettings& fd = {}) {
  AttentionConfig ac;
  ac.kind = kind;
  ac.se_reduction = 4;
  ac.sge_groups = 2;
  ac.caa_kernel = 5;
  auto block = make_attention<double>(8, ac);
  ParamStore<double> store;
  block->collect(store, attention_kind_name(kind));
  Rng rng(4025);
  store.init_all(rng);
  Tensor<double> x = random_tensor({1, 8, 4, 4}, rng);
  store.zero_grads();
  {
    Tape<double> t;
    auto out = block->forward(t, t.leaf(x));
    t.backward(t.sum_all(out));
  }
  auto loss_fn = [&]() {
    Tape<double> t(false);
    auto out = block->forward(t, t.leaf(x));
    double s = 0;
    for (i64 i = 0; i < out->val.numel(); ++i) s += out->val[i];
    return s;
  };
  return fd_check_params<double>(attention_kind_name(kind), store, loss_fn, fd);
}

inline GradCheckReport sfa(const FdSettings& fd = {}) {
  AttentionConfig ac;  // lssm attention inside
  SfaBlock<double> block(8, 4, 8, ac);
  ParamStore<double> store;
  block.collect(store, "sfa");
  Rng rng(4024);
  store.init_all(rng);
  Tensor<double> xh = random_tensor({1, 8, 2, 2}, rng);
  Tensor<double> xl = random_tensor({1, 4, 4, 4}, rng);
  store.zero_grads();
  {
    Tape<double> t;
    auto out = block.forward(t, t.leaf(xh), t.leaf(xl));
    t.backward(t.sum_all(out));
  }
  auto loss_fn = [&]() {
    Tape<double> t(false);
    auto out = block.forward(t, t.leaf(xh), t.leaf(xl));
    double s = 0;
    for (i64 i = 0; i < out->val.numel(); ++i) s += out->val[i];
    return s;
  };
  return fd_check_params<double>("sfa", store, loss_fn, fd);
}

// End-to-end: tiny detector, detection loss, FD over head parameters plus a
// random sample of backbone/neck tensors.
inline GradCheckReport head_and_loss(const FdSettings& fd = {}) {
  ModelConfig mc;
  mc.backbone.stem_channels = 4;
  mc.backbone.dca_groups = 2;
  mc.cf = 8;
  mc.head.num_classes = 3;
  DetectModel<double> model(mc);
  model.init_params(4026);

  Rng rng(4027);
  Tensor<double> images = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
  std::vector<std::vector<GroundTruthBox>> gts(2);
  gts[0].push_back({Box{4, 4, 12, 12}, 0});
  gts[0].push_back({Box{16, 18, 27, 26}, 2});
  gts[1].push_back({Box{8, 2, 18, 14}, 1});

  auto run_loss = [&](Tape<double>& t) {
    auto maps = model.forward(t, t.leaf(images), /*training=*/true);
    return detection_loss(t, maps, gts, mc.head.num_classes, mc.head.lambda_reg);
  };
  model.params().zero_grads();
  {
    Tape<double> t;
    auto loss = run_loss(t);
    t.backward(loss.total);
  }
  auto loss_fn = [&]() {
    Tape<double> t(false);
    return run_loss(t).total_value;
  };

  // head parameters at the strict tolerance; deep backbone/neck samples at a
  // looser one, since central-difference truncation grows with depth at the
  // fixed step h = 1e-3 (verified to shrink as h^2)
  ParamStore<double> head_params, deep_params;
  Rng pick(4028);
  std::vector<ParamTensor<double>*> rest;
  for (auto* p : model.params().items()) {
    if (p->name.find(".head.") != std::string::npos)
      head_params.items().push_back(p);
    else
      rest.push_back(p);
  }
  for (int k = 0; k < 8 && !rest.empty(); ++k) {
    const size_t j = static_cast<size_t>(pick.uniform_int(0, static_cast<i64>(rest.size()) - 1));
    deep_params.items().push_back(rest[j]);
    rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(j));
  }
  GradCheckReport head_rep = fd_check_params<double>("head+loss", head_params, loss_fn, fd);
  FdSettings deep_fd = fd;
  deep_fd.rel_tol = std::max(fd.rel_tol, 5e-3);
  GradCheckReport deep_rep =
      fd_check_params<double>("deep-sample", deep_params, loss_fn, deep_fd);
  head_rep.pass = head_rep.pass && deep_rep.pass;
  head_rep.coords_checked += deep_rep.coords_checked;
  if (deep_rep.max_rel_err > head_rep.max_rel_err) {
    head_rep.max_rel_err = deep_rep.max_rel_err;
    head_rep.worst_param = deep_rep.worst_param;
  }
  return head_rep;
}

inline std::vector<GradCheckReport> run_suite(const std::string& which,
                                              const FdSettings& fd = {}) {
  std::vector<GradCheckReport> out;
  const bool all = which == "all";
  if (all || which == "mrdcb") {
    out.push_back(msru(fd));
    out.push_back(dca(fd));
  }
  if (all || which == "aspn") {
    out.push_back(lssm(fd));
    out.push_back(sfa(fd));
    out.push_back(attention(AttentionKind::Se, fd));
    out.push_back(attention(AttentionKind::Sge, fd));
    out.push_back(attention(AttentionKind::Caa, fd));
  }
  if (all || which == "head") {
    out.push_back(head_and_loss(fd));
  }
  if (out.empty())
    throw UsageError("gradcheck: unknown module '" + which +
                     "' (expected mrdcb, aspn, head or all)");
  return out;
}

}  // namespace gradcheck
}  // namespace mrc
