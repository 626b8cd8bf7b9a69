#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "mrcnet/param.hpp"
#include "mrcnet/tensor.hpp"

namespace mrc {

// A value recorded on a tape. Gradients are allocated lazily on first use;
// a value whose grad was never touched contributes zero downstream.
template <typename T>
struct Value {
  Tensor<T> val;
  Tensor<T> grad;
  bool requires_grad = false;
  bool grad_alloc = false;
  ParamTensor<T>* param = nullptr;
};

template <typename T>
using ValueRef = std::shared_ptr<Value<T>>;

struct ConvSpec {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  int groups = 1;

  static ConvSpec square(int stride, int pad, int groups = 1) {
    return ConvSpec{stride, stride, pad, pad, groups};
  }
};

namespace detail {

// C[m,n] += A[m,k] * B[k,n], all row-major. The k-inner saxpy form keeps the
// n loop contiguous so the compiler vectorizes it.
template <typename T>
void gemm_acc(i64 M, i64 K, i64 N, const T* A, const T* B, T* C) {
  for (i64 m = 0; m < M; ++m) {
    T* crow = C + m * N;
    const T* arow = A + m * K;
    for (i64 k = 0; k < K; ++k) {
      const T a = arow[k];
      if (a == T(0)) continue;
      const T* brow = B + k * N;
      for (i64 n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

inline i64 floor_div(i64 a, i64 b) {
  return (a >= 0) ? a / b : -((-a + b - 1) / b);
}

inline i64 conv_out_extent(i64 in, i64 k, int stride, int pad, const char* dim) {
  i64 out = floor_div(in + 2 * static_cast<i64>(pad) - k, stride) + 1;
  if (out < 0)
    throw ShapeError(std::string("conv2d: negative output extent along ") + dim);
  return out;
}

// Unpack one sample into col[(c*kh+i)*kw+j][oh*Wo+ow].
template <typename T>
void im2col(const Tensor<T>& x, i64 n, i64 kh, i64 kw, const ConvSpec& sp, i64 ho,
            i64 wo, std::vector<T>& col) {
  const i64 C = x.c(), H = x.h(), W = x.w();
  const i64 P = ho * wo;
  col.assign(static_cast<size_t>(C * kh * kw * P), T(0));
  const T* xd = x.data() + n * C * H * W;
  for (i64 c = 0; c < C; ++c) {
    for (i64 i = 0; i < kh; ++i) {
      for (i64 j = 0; j < kw; ++j) {
        T* crow = col.data() + ((c * kh + i) * kw + j) * P;
        for (i64 oh = 0; oh < ho; ++oh) {
          const i64 ih = oh * sp.stride_h - sp.pad_h + i;
          if (ih < 0 || ih >= H) continue;
          const T* xrow = xd + (c * H + ih) * W;
          T* orow = crow + oh * wo;
          for (i64 ow = 0; ow < wo; ++ow) {
            const i64 iw = ow * sp.stride_w - sp.pad_w + j;
            if (iw >= 0 && iw < W) orow[ow] = xrow[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const std::vector<T>& col, i64 n, i64 kh, i64 kw, const ConvSpec& sp,
                i64 ho, i64 wo, Tensor<T>& dx) {
  const i64 C = dx.c(), H = dx.h(), W = dx.w();
  const i64 P = ho * wo;
  T* xd = dx.data() + n * C * H * W;
  for (i64 c = 0; c < C; ++c) {
    for (i64 i = 0; i < kh; ++i) {
      for (i64 j = 0; j < kw; ++j) {
        const T* crow = col.data() + ((c * kh + i) * kw + j) * P;
        for (i64 oh = 0; oh < ho; ++oh) {
          const i64 ih = oh * sp.stride_h - sp.pad_h + i;
          if (ih < 0 || ih >= H) continue;
          T* xrow = xd + (c * H + ih) * W;
          const T* orow = crow + oh * wo;
          for (i64 ow = 0; ow < wo; ++ow) {
            const i64 iw = ow * sp.stride_w - sp.pad_w + j;
            if (iw >= 0 && iw < W) xrow[iw] += orow[ow];
          }
        }
      }
    }
  }
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape o{};
  for (int i = 0; i < 4; ++i) {
    if (a[i] == b[i] || b[i] == 1)
      o[i] = a[i];
    else if (a[i] == 1)
      o[i] = b[i];
    else
      throw ShapeError("broadcast mismatch between " + shape_str(a) + " and " +
                       shape_str(b));
  }
  return o;
}

inline std::array<i64, 4> row_major_strides(const Shape& s) {
  return {s[1] * s[2] * s[3], s[2] * s[3], s[3], 1};
}

}  // namespace detail

// Reverse-mode tape. Forward ops validate contracts, compute their result,
// tally their cost, and (while recording) push a backward closure. backward()
// replays the closures in reverse exactly once.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  i64 flops() const { return flops_; }

  ValueRef<T> leaf(Tensor<T> v, bool requires_grad = false) {
    auto node = std::make_shared<Value<T>>();
    node->val = std::move(v);
    node->requires_grad = recording_ && requires_grad;
    return node;
  }

  ValueRef<T> param(ParamTensor<T>& p) {
    auto node = leaf(p.value, true);
    node->param = &p;
    if (recording_) param_leaves_.push_back(node);
    return node;
  }

  ValueRef<T> constant(T v) { return leaf(Tensor<T>(1, 1, 1, 1, v), false); }

  // --- convolution ------------------------------------------------------

  ValueRef<T> conv2d(ValueRef<T> x, ValueRef<T> w, ValueRef<T> b, const ConvSpec& sp) {
    if (sp.stride_h <= 0 || sp.stride_w <= 0)
      throw ConfigError("conv2d: stride must be positive");
    if (sp.pad_h < 0 || sp.pad_w < 0) throw ConfigError("conv2d: negative padding");
    const i64 g = sp.groups;
    const i64 cout = w->val.n(), cing = w->val.c(), kh = w->val.h(), kw = w->val.w();
    if (g < 1 || cout % g != 0)
      throw ConfigError("conv2d: output channels not divisible by groups");
    if (x->val.c() != cing * g)
      throw ShapeError("conv2d: input " + shape_str(x->val.shape()) +
                       " incompatible with weight " + shape_str(w->val.shape()) +
                       " at groups " + std::to_string(g));
    if (b && b->val.numel() != cout)
      throw ShapeError("conv2d: bias has " + std::to_string(b->val.numel()) +
                       " elements, expected " + std::to_string(cout));
    const i64 N = x->val.n(), H = x->val.h(), W = x->val.w();
    const i64 ho = detail::conv_out_extent(H, kh, sp.stride_h, sp.pad_h, "H");
    const i64 wo = detail::conv_out_extent(W, kw, sp.stride_w, sp.pad_w, "W");
    Tensor<T> out(N, cout, ho, wo);

    const i64 P = ho * wo;
    const i64 Kg = cing * kh * kw;
    const i64 coutg = cout / g;
    std::vector<T> col;
    for (i64 n = 0; n < N && P > 0; ++n) {
      T* od = out.data() + n * cout * P;
      if (b) {
        for (i64 m = 0; m < cout; ++m) {
          const T bv = b->val[m];
          std::fill(od + m * P, od + (m + 1) * P, bv);
        }
      }
      detail::im2col(x->val, n, kh, kw, sp, ho, wo, col);
      for (i64 gi = 0; gi < g; ++gi) {
        detail::gemm_acc(coutg, Kg, P, w->val.data() + gi * coutg * Kg,
                         col.data() + gi * Kg * P, od + gi * coutg * P);
      }
    }
    debug_check_finite(out, "conv2d");
    flops_ += 2 * cout * Kg * P * N;

    auto node = make(std::move(out), any_grad({x, w, b}));
    if (should_record(node)) {
      ConvSpec spc = sp;
      record([this, x, w, b, node, spc, kh, kw, ho, wo, Kg, coutg, g, P]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        const i64 N = x->val.n();
        const i64 cout = w->val.n();
        std::vector<T> col, dcol;
        Tensor<T>* dw = x_grad_target(w);
        Tensor<T>* dxp = x_grad_target(x);
        Tensor<T>* db = b ? x_grad_target(b) : nullptr;
        for (i64 n = 0; n < N && P > 0; ++n) {
          const T* dyd = dy->data() + n * cout * P;
          if (db) {
            for (i64 m = 0; m < cout; ++m) {
              T s = 0;
              const T* row = dyd + m * P;
              for (i64 p = 0; p < P; ++p) s += row[p];
              (*db)[m] += s;
            }
          }
          if (dw || dxp) detail::im2col(x->val, n, kh, kw, spc, ho, wo, col);
          if (dw) {
            // dW[m,k] += sum_p dY[m,p] * col[k,p]
            for (i64 gi = 0; gi < g; ++gi) {
              const T* dyg = dyd + gi * coutg * P;
              const T* colg = col.data() + gi * Kg * P;
              T* dwg = dw->data() + gi * coutg * Kg;
              for (i64 m = 0; m < coutg; ++m) {
                const T* dyrow = dyg + m * P;
                for (i64 k = 0; k < Kg; ++k) {
                  const T* crow = colg + k * P;
                  T s = 0;
                  for (i64 p = 0; p < P; ++p) s += dyrow[p] * crow[p];
                  dwg[m * Kg + k] += s;
                }
              }
            }
          }
          if (dxp) {
            dcol.assign(col.size(), T(0));
            // dcol[k,p] = sum_m W[m,k] * dY[m,p]
            for (i64 gi = 0; gi < g; ++gi) {
              const T* dyg = dyd + gi * coutg * P;
              const T* wg = w->val.data() + gi * coutg * Kg;
              T* dcg = dcol.data() + gi * Kg * P;
              for (i64 k = 0; k < Kg; ++k) {
                T* drow = dcg + k * P;
                for (i64 m = 0; m < coutg; ++m) {
                  const T wv = wg[m * Kg + k];
                  if (wv == T(0)) continue;
                  const T* dyrow = dyg + m * P;
                  for (i64 p = 0; p < P; ++p) drow[p] += wv * dyrow[p];
                }
              }
            }
            detail::col2im_acc(dcol, n, kh, kw, spc, ho, wo, *dxp);
          }
        }
      });
    }
    return node;
  }

  // Transposed convolution. Weight layout [Cin, Cout, kh, kw]; each input
  // element scatters w into the output at stride offsets.
  ValueRef<T> transposed_conv2d(ValueRef<T> x, ValueRef<T> w, ValueRef<T> b, int stride,
                                int pad, int out_pad) {
    if (stride <= 0) throw ConfigError("transposed_conv2d: stride must be positive");
    if (pad < 0 || out_pad < 0)
      throw ConfigError("transposed_conv2d: negative padding");
    const i64 cin = w->val.n(), cout = w->val.c(), kh = w->val.h(), kw = w->val.w();
    if (x->val.c() != cin)
      throw ShapeError("transposed_conv2d: input " + shape_str(x->val.shape()) +
                       " incompatible with weight " + shape_str(w->val.shape()));
    if (b && b->val.numel() != cout)
      throw ShapeError("transposed_conv2d: bad bias length");
    const i64 N = x->val.n(), H = x->val.h(), W = x->val.w();
    const i64 ho = (H - 1) * stride - 2 * pad + kh + out_pad;
    const i64 wo = (W - 1) * stride - 2 * pad + kw + out_pad;
    if (ho <= 0 || wo <= 0)
      throw ShapeError("transposed_conv2d: computed output size " + std::to_string(ho) +
                       "x" + std::to_string(wo) + " is not positive");
    Tensor<T> out(N, cout, ho, wo);
    for (i64 n = 0; n < N; ++n) {
      if (b) {
        for (i64 m = 0; m < cout; ++m) {
          T* row = out.data() + (n * cout + m) * ho * wo;
          std::fill(row, row + ho * wo, b->val[m]);
        }
      }
      for (i64 ci = 0; ci < cin; ++ci) {
        for (i64 ih = 0; ih < H; ++ih) {
          for (i64 iw = 0; iw < W; ++iw) {
            const T xv = x->val.at(n, ci, ih, iw);
            if (xv == T(0)) continue;
            for (i64 co = 0; co < cout; ++co) {
              const T* wrow = w->val.data() + ((ci * cout + co) * kh) * kw;
              T* orow = out.data() + (n * cout + co) * ho * wo;
              for (i64 i = 0; i < kh; ++i) {
                const i64 oh = ih * stride - pad + i;
                if (oh < 0 || oh >= ho) continue;
                for (i64 j = 0; j < kw; ++j) {
                  const i64 ow = iw * stride - pad + j;
                  if (ow >= 0 && ow < wo) orow[oh * wo + ow] += xv * wrow[i * kw + j];
                }
              }
            }
          }
        }
      }
    }
    debug_check_finite(out, "transposed_conv2d");
    flops_ += 2 * cin * cout * kh * kw * ho * wo * N;

    auto node = make(std::move(out), any_grad({x, w, b}));
    if (should_record(node)) {
      record([x, w, b, node, stride, pad, ho, wo, kh, kw, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        const i64 N = x->val.n(), H = x->val.h(), W = x->val.w();
        const i64 cin = w->val.n(), cout = w->val.c();
        Tensor<T>* dxp = x_grad_target(x);
        Tensor<T>* dwp = x_grad_target(w);
        Tensor<T>* dbp = b ? x_grad_target(b) : nullptr;
        if (dbp) {
          for (i64 n = 0; n < N; ++n)
            for (i64 co = 0; co < cout; ++co) {
              const T* row = dy->data() + (n * cout + co) * ho * wo;
              T s = 0;
              for (i64 p = 0; p < ho * wo; ++p) s += row[p];
              (*dbp)[co] += s;
            }
        }
        for (i64 n = 0; n < N && (dxp || dwp); ++n) {
          for (i64 ci = 0; ci < cin; ++ci) {
            for (i64 ih = 0; ih < H; ++ih) {
              for (i64 iw = 0; iw < W; ++iw) {
                const T xv = x->val.at(n, ci, ih, iw);
                T dx_acc = 0;
                for (i64 co = 0; co < cout; ++co) {
                  const T* wrow = w->val.data() + (ci * cout + co) * kh * kw;
                  T* dwrow = dwp ? dwp->data() + (ci * cout + co) * kh * kw : nullptr;
                  const T* dyrow = dy->data() + (n * cout + co) * ho * wo;
                  for (i64 i = 0; i < kh; ++i) {
                    const i64 oh = ih * stride - pad + i;
                    if (oh < 0 || oh >= ho) continue;
                    for (i64 j = 0; j < kw; ++j) {
                      const i64 ow = iw * stride - pad + j;
                      if (ow < 0 || ow >= wo) continue;
                      const T g = dyrow[oh * wo + ow];
                      dx_acc += g * wrow[i * kw + j];
                      if (dwrow) dwrow[i * kw + j] += g * xv;
                    }
                  }
                }
                if (dxp) dxp->at(n, ci, ih, iw) += dx_acc;
              }
            }
          }
        }
      });
    }
    return node;
  }

  // --- pooling ------------------------------------------------------------

  // Mean over the named axis. axis == W keeps the height strip [N,C,H,1];
  // axis == H keeps the width strip [N,C,1,W].
  ValueRef<T> pool_mean(ValueRef<T> x, Axis axis) {
    if (axis != Axis::H && axis != Axis::W)
      throw ConfigError("pool_mean: axis must be H or W");
    const Shape& s = x->val.shape();
    const i64 ext = x->val.extent(axis);
    if (ext < 1)
      throw ShapeError(std::string("pool_mean: zero-extent pooled axis ") +
                       axis_name(axis));
    Shape os = s;
    os[static_cast<int>(axis)] = 1;
    Tensor<T> out(os);
    const T inv = T(1) / static_cast<T>(ext);
    if (axis == Axis::W) {
      for (i64 n = 0; n < s[0]; ++n)
        for (i64 c = 0; c < s[1]; ++c)
          for (i64 h = 0; h < s[2]; ++h) {
            const T* row = x->val.data() + x->val.index(n, c, h, 0);
            T acc = 0;
            for (i64 w = 0; w < ext; ++w) acc += row[w];
            out.at(n, c, h, 0) = acc * inv;
          }
    } else {
      for (i64 n = 0; n < s[0]; ++n)
        for (i64 c = 0; c < s[1]; ++c)
          for (i64 w = 0; w < s[3]; ++w) {
            T acc = 0;
            for (i64 h = 0; h < ext; ++h) acc += x->val.at(n, c, h, w);
            out.at(n, c, 0, w) = acc * inv;
          }
    }
    debug_check_finite(out, "pool_mean");
    flops_ += out.numel();

    auto node = make(std::move(out), x->requires_grad);
    if (should_record(node)) {
      record([x, node, axis, ext, inv, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* dx = x_grad_target(x);
        if (!dx) return;
        const Shape& s = x->val.shape();
        for (i64 n = 0; n < s[0]; ++n)
          for (i64 c = 0; c < s[1]; ++c) {
            if (axis == Axis::W) {
              for (i64 h = 0; h < s[2]; ++h) {
                const T g = dy->at(n, c, h, 0) * inv;
                T* row = dx->data() + dx->index(n, c, h, 0);
                for (i64 w = 0; w < ext; ++w) row[w] += g;
              }
            } else {
              for (i64 w = 0; w < s[3]; ++w) {
                const T g = dy->at(n, c, 0, w) * inv;
                for (i64 h = 0; h < ext; ++h) dx->at(n, c, h, w) += g;
              }
            }
          }
      });
    }
    return node;
  }

  ValueRef<T> global_avg_pool(ValueRef<T> x) {
    const Shape& s = x->val.shape();
    const i64 hw = s[2] * s[3];
    if (hw < 1) throw ShapeError("global_avg_pool: empty spatial extent");
    Tensor<T> out(s[0], s[1], 1, 1);
    const T inv = T(1) / static_cast<T>(hw);
    for (i64 n = 0; n < s[0]; ++n)
      for (i64 c = 0; c < s[1]; ++c) {
        const T* base = x->val.data() + x->val.index(n, c, 0, 0);
        T acc = 0;
        for (i64 p = 0; p < hw; ++p) acc += base[p];
        out.at(n, c, 0, 0) = acc * inv;
      }
    debug_check_finite(out, "global_avg_pool");
    flops_ += out.numel();

    auto node = make(std::move(out), x->requires_grad);
    if (should_record(node)) {
      record([x, node, hw, inv, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* dx = x_grad_target(x);
        if (!dx) return;
        const Shape& s = x->val.shape();
        for (i64 n = 0; n < s[0]; ++n)
          for (i64 c = 0; c < s[1]; ++c) {
            const T g = dy->at(n, c, 0, 0) * inv;
            T* base = dx->data() + dx->index(n, c, 0, 0);
            for (i64 p = 0; p < hw; ++p) base[p] += g;
          }
      });
    }
    return node;
  }

  // --- activations ---------------------------------------------------------

  ValueRef<T> relu(ValueRef<T> x) {
    Tensor<T> out = x->val;
    for (i64 i = 0; i < out.numel(); ++i) out[i] = out[i] > T(0) ? out[i] : T(0);
    flops_ += out.numel();
    auto node = make(std::move(out), x->requires_grad);
    if (should_record(node)) {
      record([x, node, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* dx = x_grad_target(x);
        if (!dx) return;
        for (i64 i = 0; i < dy->numel(); ++i)
          if (x->val[i] > T(0)) (*dx)[i] += (*dy)[i];
      });
    }
    return node;
  }

  ValueRef<T> sigmoid(ValueRef<T> x) {
    Tensor<T> out = x->val;
    for (i64 i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(out[i]);
    debug_check_finite(out, "sigmoid");
    flops_ += out.numel();
    auto node = make(std::move(out), x->requires_grad);
    if (should_record(node)) {
      record([x, node, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* dx = x_grad_target(x);
        if (!dx) return;
        for (i64 i = 0; i < dy->numel(); ++i) {
          const T y = node->val[i];
          (*dx)[i] += (*dy)[i] * y * (T(1) - y);
        }
      });
    }
    return node;
  }

  // Max-subtracted softmax along one axis.
  ValueRef<T> softmax(ValueRef<T> x, Axis axis) {
    Tensor<T> out = x->val;
    for_each_line(out.shape(), axis, [&](i64 base, i64 stride, i64 count) {
      T mx = out[base];
      for (i64 i = 1; i < count; ++i) mx = std::max(mx, out[base + i * stride]);
      T denom = 0;
      for (i64 i = 0; i < count; ++i) {
        T e = std::exp(out[base + i * stride] - mx);
        out[base + i * stride] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (i64 i = 0; i < count; ++i) out[base + i * stride] *= inv;
    });
    debug_check_finite(out, "softmax");
    flops_ += out.numel();
    auto node = make(std::move(out), x->requires_grad);
    if (should_record(node)) {
      record([x, node, axis, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* dx = x_grad_target(x);
        if (!dx) return;
        for_each_line(node->val.shape(), axis, [&](i64 base, i64 stride, i64 count) {
          T dot = 0;
          for (i64 i = 0; i < count; ++i)
            dot += (*dy)[base + i * stride] * node->val[base + i * stride];
          for (i64 i = 0; i < count; ++i) {
            const i64 k = base + i * stride;
            (*dx)[k] += node->val[k] * ((*dy)[k] - dot);
          }
        });
      });
    }
    return node;
  }

  // --- normalization --------------------------------------------------------

  // Batch norm over (N,H,W) per channel. Train mode normalizes by batch
  // statistics (biased variance) and folds them into the running buffers with
  // the given momentum; eval mode normalizes by the running buffers.
  ValueRef<T> batch_norm(ValueRef<T> x, ValueRef<T> gamma, ValueRef<T> beta,
                         Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                         T momentum, T eps) {
    const Shape& s = x->val.shape();
    const i64 C = s[1];
    if (gamma->val.numel() != C || beta->val.numel() != C ||
        running_mean.numel() != C || running_var.numel() != C)
      throw ShapeError("batch_norm: affine/stat buffers do not match channel count " +
                       std::to_string(C));
    if (eps <= T(0)) throw ConfigError("batch_norm: eps must be positive");
    const i64 M = s[0] * s[2] * s[3];

    auto xhat = std::make_shared<Tensor<T>>(s);
    auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(C), T(0));
    Tensor<T> out(s);

    for (i64 c = 0; c < C && M > 0; ++c) {
      T mean, var;
      if (training) {
        T acc = 0;
        for_channel(s, c, [&](i64 i) { acc += x->val[i]; });
        mean = acc / static_cast<T>(M);
        T vacc = 0;
        for_channel(s, c, [&](i64 i) {
          const T d = x->val[i] - mean;
          vacc += d * d;
        });
        var = vacc / static_cast<T>(M);
        running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean;
        running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
      } else {
        mean = running_mean[c];
        var = running_var[c];
      }
      const T istd = T(1) / std::sqrt(var + eps);
      (*invstd)[static_cast<size_t>(c)] = istd;
      const T g = gamma->val[c], bta = beta->val[c];
      for_channel(s, c, [&](i64 i) {
        const T xh = (x->val[i] - mean) * istd;
        (*xhat)[i] = xh;
        out[i] = g * xh + bta;
      });
    }
    debug_check_finite(out, "batch_norm");
    flops_ += out.numel();

    auto node = make(std::move(out), any_grad({x, gamma, beta}));
    if (should_record(node)) {
      record([x, gamma, beta, node, xhat, invstd, training, M, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        const Shape& s = x->val.shape();
        const i64 C = s[1];
        Tensor<T>* dx = x_grad_target(x);
        Tensor<T>* dg = x_grad_target(gamma);
        Tensor<T>* db = x_grad_target(beta);
        for (i64 c = 0; c < C && M > 0; ++c) {
          T sum_dy = 0, sum_dy_xh = 0;
          for_channel(s, c, [&](i64 i) {
            sum_dy += (*dy)[i];
            sum_dy_xh += (*dy)[i] * (*xhat)[i];
          });
          if (dg) (*dg)[c] += sum_dy_xh;
          if (db) (*db)[c] += sum_dy;
          if (dx) {
            const T g = gamma->val[c];
            const T istd = (*invstd)[static_cast<size_t>(c)];
            if (training) {
              const T invM = T(1) / static_cast<T>(M);
              for_channel(s, c, [&](i64 i) {
                (*dx)[i] += g * istd *
                            ((*dy)[i] - sum_dy * invM - (*xhat)[i] * sum_dy_xh * invM);
              });
            } else {
              for_channel(s, c, [&](i64 i) { (*dx)[i] += g * istd * (*dy)[i]; });
            }
          }
        }
      });
    }
    return node;
  }

  // Group norm over (C/g, H, W) per sample per group; per-channel affine.
  ValueRef<T> group_norm(ValueRef<T> x, int num_groups, ValueRef<T> gamma,
                         ValueRef<T> beta, T eps) {
    const Shape& s = x->val.shape();
    const i64 C = s[1];
    if (num_groups < 1 || (C > 0 && C % num_groups != 0))
      throw ConfigError("group_norm: channel count " + std::to_string(C) +
                        " not divisible by " + std::to_string(num_groups) + " groups");
    if (gamma->val.numel() != C || beta->val.numel() != C)
      throw ShapeError("group_norm: affine size mismatch");
    if (eps <= T(0)) throw ConfigError("group_norm: eps must be positive");
    const i64 cg = num_groups > 0 && C > 0 ? C / num_groups : 0;
    const i64 gsize = cg * s[2] * s[3];

    auto xhat = std::make_shared<Tensor<T>>(s);
    auto invstd =
        std::make_shared<Tensor<T>>(s[0], static_cast<i64>(num_groups), 1, 1);
    Tensor<T> out(s);
    const i64 hw = s[2] * s[3];
    for (i64 n = 0; n < s[0]; ++n) {
      for (i64 g = 0; g < num_groups && gsize > 0; ++g) {
        const i64 base = x->val.index(n, g * cg, 0, 0);
        T acc = 0;
        for (i64 i = 0; i < gsize; ++i) acc += x->val[base + i];
        const T mean = acc / static_cast<T>(gsize);
        T vacc = 0;
        for (i64 i = 0; i < gsize; ++i) {
          const T d = x->val[base + i] - mean;
          vacc += d * d;
        }
        const T istd = T(1) / std::sqrt(vacc / static_cast<T>(gsize) + eps);
        invstd->at(n, g, 0, 0) = istd;
        for (i64 ci = 0; ci < cg; ++ci) {
          const T gw = gamma->val[g * cg + ci], bw = beta->val[g * cg + ci];
          for (i64 p = 0; p < hw; ++p) {
            const i64 i = base + ci * hw + p;
            const T xh = (x->val[i] - mean) * istd;
            (*xhat)[i] = xh;
            out[i] = gw * xh + bw;
          }
        }
      }
    }
    debug_check_finite(out, "group_norm");
    flops_ += out.numel();

    auto node = make(std::move(out), any_grad({x, gamma, beta}));
    if (should_record(node)) {
      record([x, gamma, beta, node, xhat, invstd, num_groups, cg, gsize, hw, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        const Shape& s = x->val.shape();
        Tensor<T>* dx = x_grad_target(x);
        Tensor<T>* dg = x_grad_target(gamma);
        Tensor<T>* db = x_grad_target(beta);
        for (i64 n = 0; n < s[0]; ++n) {
          for (i64 g = 0; g < num_groups && gsize > 0; ++g) {
            const i64 base = x->val.index(n, g * cg, 0, 0);
            T s1 = 0, s2 = 0;  // sums of dxhat and dxhat*xhat over the group
            for (i64 ci = 0; ci < cg; ++ci) {
              const T gw = gamma->val[g * cg + ci];
              T cd = 0, cdx = 0;
              for (i64 p = 0; p < hw; ++p) {
                const i64 i = base + ci * hw + p;
                cd += (*dy)[i];
                cdx += (*dy)[i] * (*xhat)[i];
                s1 += (*dy)[i] * gw;
                s2 += (*dy)[i] * gw * (*xhat)[i];
              }
              if (db) (*db)[g * cg + ci] += cd;
              if (dg) (*dg)[g * cg + ci] += cdx;
            }
            if (dx) {
              const T istd = invstd->at(n, g, 0, 0);
              const T invM = T(1) / static_cast<T>(gsize);
              for (i64 ci = 0; ci < cg; ++ci) {
                const T gw = gamma->val[g * cg + ci];
                for (i64 p = 0; p < hw; ++p) {
                  const i64 i = base + ci * hw + p;
                  (*dx)[i] += istd * ((*dy)[i] * gw - s1 * invM - (*xhat)[i] * s2 * invM);
                }
              }
            }
          }
        }
      });
    }
    return node;
  }

  // --- structure ops ---------------------------------------------------------

  ValueRef<T> reshape(ValueRef<T> x, Shape s) {
    Tensor<T> out = x->val.reshaped(s);
    auto node = make(std::move(out), x->requires_grad);
    if (should_record(node)) {
      record([x, node, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* dx = x_grad_target(x);
        if (!dx) return;
        for (i64 i = 0; i < dy->numel(); ++i) (*dx)[i] += (*dy)[i];
      });
    }
    return node;
  }

  ValueRef<T> concat(const std::vector<ValueRef<T>>& xs, Axis axis) {
    if (xs.empty()) throw UsageError("concat: no inputs");
    const int ax = static_cast<int>(axis);
    Shape os = xs[0]->val.shape();
    i64 total = 0;
    for (auto& x : xs) {
      const Shape& s = x->val.shape();
      for (int i = 0; i < 4; ++i) {
        if (i != ax && s[i] != os[i])
          throw ShapeError("concat: extent mismatch between " + shape_str(os) +
                           " and " + shape_str(s));
      }
      total += s[ax];
    }
    os[ax] = total;
    Tensor<T> out(os);
    const auto ostr = detail::row_major_strides(os);
    i64 outer = 1;
    for (int i = 0; i < ax; ++i) outer *= os[i];
    const i64 inner = ostr[ax];  // elements per unit of the concat axis
    i64 offset = 0;
    for (auto& x : xs) {
      const i64 ext = x->val.shape()[ax];
      const i64 blk = ext * inner;
      for (i64 o = 0; o < outer; ++o) {
        const T* src = x->val.data() + o * blk;
        T* dst = out.data() + o * total * inner + offset * inner;
        std::copy(src, src + blk, dst);
      }
      offset += ext;
    }
    bool rg = false;
    for (auto& x : xs) rg = rg || x->requires_grad;
    auto node = make(std::move(out), rg);
    if (should_record(node)) {
      record([xs, node, ax, outer, inner, total, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        i64 offset = 0;
        for (auto& x : xs) {
          const i64 ext = x->val.shape()[ax];
          const i64 blk = ext * inner;
          if (Tensor<T>* dx = x_grad_target(x)) {
            for (i64 o = 0; o < outer; ++o) {
              const T* src = dy->data() + o * total * inner + offset * inner;
              T* dst = dx->data() + o * blk;
              for (i64 i = 0; i < blk; ++i) dst[i] += src[i];
            }
          }
          offset += ext;
        }
      });
    }
    return node;
  }

  std::vector<ValueRef<T>> split(ValueRef<T> x, const std::vector<i64>& sizes,
                                 Axis axis) {
    const int ax = static_cast<int>(axis);
    const Shape& s = x->val.shape();
    i64 total = 0;
    for (i64 sz : sizes) {
      if (sz < 0) throw ShapeError("split: negative piece size");
      total += sz;
    }
    if (total != s[ax])
      throw ShapeError("split: piece sizes sum to " + std::to_string(total) +
                       ", axis extent is " + std::to_string(s[ax]));
    const auto str = detail::row_major_strides(s);
    i64 outer = 1;
    for (int i = 0; i < ax; ++i) outer *= s[i];
    const i64 inner = str[ax];

    std::vector<ValueRef<T>> out;
    i64 offset = 0;
    for (i64 sz : sizes) {
      Shape ps = s;
      ps[ax] = sz;
      Tensor<T> piece(ps);
      const i64 blk = sz * inner;
      for (i64 o = 0; o < outer; ++o) {
        const T* src = x->val.data() + o * s[ax] * inner + offset * inner;
        std::copy(src, src + blk, piece.data() + o * blk);
      }
      auto node = make(std::move(piece), x->requires_grad);
      if (should_record(node)) {
        const i64 off = offset;
        record([x, node, ax, outer, inner, off, sz, this]() {
          Tensor<T>* dy = maybe_grad(node);
          if (!dy) return;
          Tensor<T>* dx = x_grad_target(x);
          if (!dx) return;
          const i64 axext = x->val.shape()[ax];
          const i64 blk = sz * inner;
          for (i64 o = 0; o < outer; ++o) {
            const T* src = dy->data() + o * blk;
            T* dst = dx->data() + o * axext * inner + off * inner;
            for (i64 i = 0; i < blk; ++i) dst[i] += src[i];
          }
        });
      }
      out.push_back(std::move(node));
      offset += sz;
    }
    return out;
  }

  // --- elementwise with broadcasting -----------------------------------------

  ValueRef<T> add(ValueRef<T> a, ValueRef<T> b) { return binary(a, b, true); }
  ValueRef<T> mul(ValueRef<T> a, ValueRef<T> b) { return binary(a, b, false); }

  ValueRef<T> scale(ValueRef<T> x, T s) {
    Tensor<T> out = x->val;
    for (i64 i = 0; i < out.numel(); ++i) out[i] *= s;
    flops_ += out.numel();
    auto node = make(std::move(out), x->requires_grad);
    if (should_record(node)) {
      record([x, node, s, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* dx = x_grad_target(x);
        if (!dx) return;
        for (i64 i = 0; i < dy->numel(); ++i) (*dx)[i] += s * (*dy)[i];
      });
    }
    return node;
  }

  // --- batched matrix product -------------------------------------------------
  //
  // (N, C) index the batch; (H, W) are the matrix dims: out[n,c] = a[n,c] x b[n,c].
  ValueRef<T> matmul(ValueRef<T> a, ValueRef<T> b) {
    const Shape& sa = a->val.shape();
    const Shape& sb = b->val.shape();
    if (sa[0] != sb[0] || sa[1] != sb[1] || sa[3] != sb[2])
      throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " +
                       shape_str(sb));
    const i64 B = sa[0] * sa[1], M = sa[2], K = sa[3], N = sb[3];
    Tensor<T> out(sa[0], sa[1], M, N);
    for (i64 bi = 0; bi < B; ++bi) {
      detail::gemm_acc(M, K, N, a->val.data() + bi * M * K, b->val.data() + bi * K * N,
                       out.data() + bi * M * N);
    }
    debug_check_finite(out, "matmul");
    flops_ += 2 * B * M * K * N;

    auto node = make(std::move(out), any_grad({a, b}));
    if (should_record(node)) {
      record([a, b, node, B, M, K, N, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* da = x_grad_target(a);
        Tensor<T>* db = x_grad_target(b);
        for (i64 bi = 0; bi < B; ++bi) {
          const T* dyb = dy->data() + bi * M * N;
          const T* ab = a->val.data() + bi * M * K;
          const T* bb = b->val.data() + bi * K * N;
          if (da) {
            T* dab = da->data() + bi * M * K;
            for (i64 m = 0; m < M; ++m)
              for (i64 k = 0; k < K; ++k) {
                T s = 0;
                for (i64 n2 = 0; n2 < N; ++n2) s += dyb[m * N + n2] * bb[k * N + n2];
                dab[m * K + k] += s;
              }
          }
          if (db) {
            T* dbb = db->data() + bi * K * N;
            for (i64 k = 0; k < K; ++k)
              for (i64 m = 0; m < M; ++m) {
                const T av = ab[m * K + k];
                if (av == T(0)) continue;
                for (i64 n2 = 0; n2 < N; ++n2) dbb[k * N + n2] += av * dyb[m * N + n2];
              }
          }
        }
      });
    }
    return node;
  }

  // --- reductions & losses -----------------------------------------------------

  ValueRef<T> sum_all(ValueRef<T> x) {
    T acc = 0;
    for (i64 i = 0; i < x->val.numel(); ++i) acc += x->val[i];
    Tensor<T> out(1, 1, 1, 1, acc);
    flops_ += std::max<i64>(1, x->val.numel());
    auto node = make(std::move(out), x->requires_grad);
    if (should_record(node)) {
      record([x, node, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* dx = x_grad_target(x);
        if (!dx) return;
        const T g = (*dy)[0];
        for (i64 i = 0; i < dx->numel(); ++i) (*dx)[i] += g;
      });
    }
    return node;
  }

  // Elementwise binary cross-entropy on logits against constant targets,
  // computed in the overflow-safe form.
  ValueRef<T> bce_with_logits(ValueRef<T> x, std::shared_ptr<Tensor<T>> target) {
    if (!x->val.same_shape(*target))
      throw ShapeError("bce_with_logits: target shape mismatch");
    Tensor<T> out(x->val.shape());
    for (i64 i = 0; i < out.numel(); ++i) {
      const T v = x->val[i], y = (*target)[i];
      out[i] = std::max(v, T(0)) - v * y + std::log1p(std::exp(-std::abs(v)));
    }
    debug_check_finite(out, "bce_with_logits");
    flops_ += out.numel();
    auto node = make(std::move(out), x->requires_grad);
    if (should_record(node)) {
      record([x, node, target, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* dx = x_grad_target(x);
        if (!dx) return;
        for (i64 i = 0; i < dy->numel(); ++i)
          (*dx)[i] += (*dy)[i] * (stable_sigmoid(x->val[i]) - (*target)[i]);
      });
    }
    return node;
  }

  ValueRef<T> smooth_l1(ValueRef<T> x, std::shared_ptr<Tensor<T>> target, T beta) {
    if (!x->val.same_shape(*target)) throw ShapeError("smooth_l1: target shape mismatch");
    if (beta <= T(0)) throw ConfigError("smooth_l1: beta must be positive");
    Tensor<T> out(x->val.shape());
    for (i64 i = 0; i < out.numel(); ++i) {
      const T d = x->val[i] - (*target)[i];
      const T ad = std::abs(d);
      out[i] = ad < beta ? T(0.5) * d * d / beta : ad - T(0.5) * beta;
    }
    flops_ += out.numel();
    auto node = make(std::move(out), x->requires_grad);
    if (should_record(node)) {
      record([x, node, target, beta, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* dx = x_grad_target(x);
        if (!dx) return;
        for (i64 i = 0; i < dy->numel(); ++i) {
          const T d = x->val[i] - (*target)[i];
          const T g = std::abs(d) < beta ? d / beta : (d > T(0) ? T(1) : T(-1));
          (*dx)[i] += (*dy)[i] * g;
        }
      });
    }
    return node;
  }

  // --- backward --------------------------------------------------------------

  void backward(const ValueRef<T>& loss) {
    if (!recording_) throw UsageError("backward: tape was not recording");
    if (consumed_) throw UsageError("backward: tape already consumed");
    consumed_ = true;
    if (loss->val.numel() != 1) throw UsageError("backward: loss must be scalar");
    ensure_grad(*loss);
    loss->grad[0] = T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    for (auto& leaf : param_leaves_) {
      if (!leaf->grad_alloc) continue;
      Tensor<T>& dst = leaf->param->grad;
      for (i64 i = 0; i < dst.numel(); ++i) dst[i] += leaf->grad[i];
    }
  }

 private:
  ValueRef<T> make(Tensor<T> v, bool requires_grad) {
    auto node = std::make_shared<Value<T>>();
    node->val = std::move(v);
    node->requires_grad = recording_ && requires_grad;
    return node;
  }

  bool should_record(const ValueRef<T>& out) const {
    return recording_ && out->requires_grad;
  }

  void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

  static bool any_grad(std::initializer_list<ValueRef<T>> vs) {
    for (auto& v : vs)
      if (v && v->requires_grad) return true;
    return false;
  }

  static void ensure_grad(Value<T>& v) {
    if (!v.grad_alloc) {
      v.grad = Tensor<T>::zeros_like(v.val);
      v.grad_alloc = true;
    }
  }

  static Tensor<T>* maybe_grad(const ValueRef<T>& v) {
    return v->grad_alloc ? &v->grad : nullptr;
  }

  // Gradient sink for an input: null when the input does not need gradients.
  static Tensor<T>* x_grad_target(const ValueRef<T>& v) {
    if (!v->requires_grad) return nullptr;
    ensure_grad(*v);
    return &v->grad;
  }

  static T stable_sigmoid(T v) {
    if (v >= T(0)) {
      const T e = std::exp(-v);
      return T(1) / (T(1) + e);
    }
    const T e = std::exp(v);
    return e / (T(1) + e);
  }

  template <typename F>
  static void for_each_line(const Shape& s, Axis axis, F&& f) {
    const auto str = detail::row_major_strides(s);
    const int ax = static_cast<int>(axis);
    const i64 count = s[ax];
    if (count == 0 || shape_numel(s) == 0) return;
    Shape rest = s;
    rest[ax] = 1;
    for (i64 n = 0; n < rest[0]; ++n)
      for (i64 c = 0; c < rest[1]; ++c)
        for (i64 h = 0; h < rest[2]; ++h)
          for (i64 w = 0; w < rest[3]; ++w) {
            const i64 base = n * str[0] + c * str[1] + h * str[2] + w * str[3];
            f(base, str[ax], count);
          }
  }

  template <typename F>
  static void for_channel(const Shape& s, i64 c, F&& f) {
    const i64 hw = s[2] * s[3];
    const i64 cstride = s[1] * hw;
    for (i64 n = 0; n < s[0]; ++n) {
      const i64 base = n * cstride + c * hw;
      for (i64 p = 0; p < hw; ++p) f(base + p);
    }
  }

  ValueRef<T> binary(ValueRef<T> a, ValueRef<T> b, bool is_add) {
    const Shape os = detail::broadcast_shape(a->val.shape(), b->val.shape());
    Tensor<T> out(os);
    const Shape& sa = a->val.shape();
    const Shape& sb = b->val.shape();
    const auto stra = detail::row_major_strides(sa);
    const auto strb = detail::row_major_strides(sb);
    i64 o = 0;
    for (i64 n = 0; n < os[0]; ++n)
      for (i64 c = 0; c < os[1]; ++c)
        for (i64 h = 0; h < os[2]; ++h)
          for (i64 w = 0; w < os[3]; ++w, ++o) {
            const i64 ia = (sa[0] == 1 ? 0 : n) * stra[0] + (sa[1] == 1 ? 0 : c) * stra[1] +
                           (sa[2] == 1 ? 0 : h) * stra[2] + (sa[3] == 1 ? 0 : w) * stra[3];
            const i64 ib = (sb[0] == 1 ? 0 : n) * strb[0] + (sb[1] == 1 ? 0 : c) * strb[1] +
                           (sb[2] == 1 ? 0 : h) * strb[2] + (sb[3] == 1 ? 0 : w) * strb[3];
            out[o] = is_add ? a->val[ia] + b->val[ib] : a->val[ia] * b->val[ib];
          }
    debug_check_finite(out, is_add ? "add" : "mul");
    flops_ += out.numel();

    auto node = make(std::move(out), any_grad({a, b}));
    if (should_record(node)) {
      record([a, b, node, is_add, os, this]() {
        Tensor<T>* dy = maybe_grad(node);
        if (!dy) return;
        Tensor<T>* da = x_grad_target(a);
        Tensor<T>* db = x_grad_target(b);
        const Shape& sa = a->val.shape();
        const Shape& sb = b->val.shape();
        const auto stra = detail::row_major_strides(sa);
        const auto strb = detail::row_major_strides(sb);
        i64 o = 0;
        for (i64 n = 0; n < os[0]; ++n)
          for (i64 c = 0; c < os[1]; ++c)
            for (i64 h = 0; h < os[2]; ++h)
              for (i64 w = 0; w < os[3]; ++w, ++o) {
                const i64 ia = (sa[0] == 1 ? 0 : n) * stra[0] +
                               (sa[1] == 1 ? 0 : c) * stra[1] +
                               (sa[2] == 1 ? 0 : h) * stra[2] +
                               (sa[3] == 1 ? 0 : w) * stra[3];
                const i64 ib = (sb[0] == 1 ? 0 : n) * strb[0] +
                               (sb[1] == 1 ? 0 : c) * strb[1] +
                               (sb[2] == 1 ? 0 : h) * strb[2] +
                               (sb[3] == 1 ? 0 : w) * strb[3];
                const T g = (*dy)[o];
                if (is_add) {
                  if (da) (*da)[ia] += g;
                  if (db) (*db)[ib] += g;
                } else {
                  if (da) (*da)[ia] += g * b->val[ib];
                  if (db) (*db)[ib] += g * a->val[ia];
                }
              }
      });
    }
    return node;
  }

  bool recording_;
  bool consumed_ = false;
  i64 flops_ = 0;
  std::vector<std::function<void()>> steps_;
  std::vector<ValueRef<T>> param_leaves_;
};

}  // namespace mrc
