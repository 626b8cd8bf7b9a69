#pragma once

#include <string>
#include <vector>

#include "mrcnet/detect.hpp"

namespace mrc {

// Cost conventions, stated once and used everywhere:
//   conv params          Cout * (Cin/groups) * kh * kw (+ Cout with bias)
//   norm params          2 * C
//   conv FLOPs           2 * Cout * (Cin/groups) * kh * kw * H' * W' per sample
//   transposed conv      2 * Cin * Cout * kh * kw * Hout * Wout per sample
//   elementwise/pool/norm/activation: 1 FLOP per output element
//   matmul               2 * batch * M * K * N
//   reshape/concat/split 0
// FLOPs are reported as 2 x MACs.

inline i64 conv_param_count(i64 cin, i64 cout, i64 kh, i64 kw, bool bias,
                            i64 groups = 1) {
  return cout * (cin / groups) * kh * kw + (bias ? cout : 0);
}

inline i64 conv_flop_count(i64 cin, i64 cout, i64 kh, i64 kw, i64 out_h, i64 out_w,
                           i64 groups = 1) {
  return 2 * cout * (cin / groups) * kh * kw * out_h * out_w;
}

template <typename T>
i64 count_params(DetectModel<T>& model) {
  return model.params().total_numel();
}

// Total forward-pass FLOPs for the given input shape, tallied by replaying
// the model through a non-recording tape whose ops each know their cost.
template <typename T>
i64 count_flops(DetectModel<T>& model, Shape input_shape) {
  Tape<T> t(false);
  auto maps = model.forward(t, t.leaf(Tensor<T>(input_shape)), /*training=*/false);
  (void)maps;
  return t.flops();
}

struct CostRow {
  std::string name;
  i64 params = 0;
  i64 numel = 0;
};

template <typename T>
std::vector<CostRow> param_table(DetectModel<T>& model) {
  std::vector<CostRow> rows;
  for (auto* p : model.params().items())
    rows.push_back({p->name, p->value.numel(), p->value.numel()});
  return rows;
}

}  // namespace mrc
