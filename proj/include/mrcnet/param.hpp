#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mrcnet/rng.hpp"
#include "mrcnet/tensor.hpp"

namespace mrc {

struct InitSpec {
  enum class Kind { Zero, Constant, Uniform, KaimingUniform };

  Kind kind = Kind::Zero;
  double value = 0.0;    // Constant
  double bound = 0.0;    // Uniform: U(-bound, bound)
  i64 fan_in = 1;        // KaimingUniform

  static InitSpec zero() { return {}; }
  static InitSpec constant(double c) { return {Kind::Constant, c, 0.0, 1}; }
  static InitSpec uniform(double b) { return {Kind::Uniform, 0.0, b, 1}; }
  static InitSpec kaiming(i64 fan_in) { return {Kind::KaimingUniform, 0.0, 0.0, fan_in}; }
};

// A learnable tensor paired with its gradient buffer. Gradients accumulate
// additively across backward passes until reset_grad().
template <typename T>
struct ParamTensor {
  Tensor<T> value;
  Tensor<T> grad;
  std::string name;
  InitSpec init;

  ParamTensor() = default;
  ParamTensor(Shape s, InitSpec spec) : value(s), grad(s), init(spec) {
    // deterministic init kinds take effect immediately; a freshly built model
    // is the exact zero-init configuration (norm scales at 1, weights at 0)
    if (init.kind == InitSpec::Kind::Constant)
      value.fill(static_cast<T>(init.value));
  }

  void reset_grad() { grad.fill(T(0)); }

  void initialize(Rng& rng) {
    switch (init.kind) {
      case InitSpec::Kind::Zero:
        value.fill(T(0));
        break;
      case InitSpec::Kind::Constant:
        value.fill(static_cast<T>(init.value));
        break;
      case InitSpec::Kind::Uniform:
        for (i64 i = 0; i < value.numel(); ++i)
          value[i] = static_cast<T>(rng.uniform(-init.bound, init.bound));
        break;
      case InitSpec::Kind::KaimingUniform: {
        // relu-gain Kaiming: U(-b, b) with b = sqrt(6 / fan_in)
        double b = std::sqrt(6.0 / static_cast<double>(std::max<i64>(1, init.fan_in)));
        for (i64 i = 0; i < value.numel(); ++i)
          value[i] = static_cast<T>(rng.uniform(-b, b));
        break;
      }
    }
  }
};

// Non-learnable persistent state (batch-norm running statistics), registered
// alongside parameters so checkpoints capture it.
template <typename T>
class BufferStore {
 public:
  void add(const std::string& name, Tensor<T>* t) { items_.emplace_back(name, t); }
  std::vector<std::pair<std::string, Tensor<T>*>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor<T>*>>& items() const { return items_; }
  size_t size() const { return items_.size(); }

 private:
  std::vector<std::pair<std::string, Tensor<T>*>> items_;
};

// Ordered view over a model's parameters. Registration order is the
// deterministic iteration order used by init, the optimizer and checkpoints.
template <typename T>
class ParamStore {
 public:
  void add(const std::string& qualified_name, ParamTensor<T>* p) {
    p->name = qualified_name;
    items_.push_back(p);
  }

  std::vector<ParamTensor<T>*>& items() { return items_; }
  const std::vector<ParamTensor<T>*>& items() const { return items_; }
  size_t size() const { return items_.size(); }

  ParamTensor<T>* find(const std::string& name) const {
    for (auto* p : items_)
      if (p->name == name) return p;
    return nullptr;
  }

  i64 total_numel() const {
    i64 total = 0;
    for (auto* p : items_) total += p->value.numel();
    return total;
  }

  void init_all(Rng& rng) {
    for (auto* p : items_) p->initialize(rng);
  }

  void zero_grads() {
    for (auto* p : items_) p->reset_grad();
  }

 private:
  std::vector<ParamTensor<T>*> items_;
};

}  // namespace mrc
