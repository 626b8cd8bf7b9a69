#pragma once

#include <cmath>
#include <vector>

#include "mrcnet/param.hpp"

namespace mrc {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("AdamW: learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("AdamW: betas must lie in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("AdamW: eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("AdamW: negative weight decay");
  }
};

// AdamW with decoupled decay: theta <- theta - lr*wd*theta first, then the
// bias-corrected adaptive step. A non-finite gradient aborts the whole step
// before any parameter is touched.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {
    cfg.validate();
    m_.reserve(store.size());
    v_.reserve(store.size());
    for (auto* p : store.items()) {
      m_.push_back(Tensor<T>::zeros_like(p->value));
      v_.push_back(Tensor<T>::zeros_like(p->value));
    }
  }

  void step() {
    for (auto* p : store_->items()) {
      if (!p->grad.all_finite())
        throw Error("AdamW: non-finite gradient in parameter '" + p->name +
                    "'; step aborted");
    }
    ++step_count_;
    const T lr = static_cast<T>(cfg_.lr);
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T eps = static_cast<T>(cfg_.eps);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T bc1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, step_count_));
    const T bc2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, step_count_));
    for (size_t pi = 0; pi < store_->items().size(); ++pi) {
      ParamTensor<T>& p = *store_->items()[pi];
      Tensor<T>& m = m_[pi];
      Tensor<T>& v = v_[pi];
      for (i64 i = 0; i < p.value.numel(); ++i) {
        const T g = p.grad[i];
        p.value[i] -= lr * wd * p.value[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  i64 step_count() const { return step_count_; }
  void set_step_count(i64 n) { step_count_ = n; }
  std::vector<Tensor<T>>& moment1() { return m_; }
  std::vector<Tensor<T>>& moment2() { return v_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  ParamStore<T>* store_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  i64 step_count_ = 0;
};

}  // namespace mrc
