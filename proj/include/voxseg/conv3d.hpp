#ifndef VOXSEG_CONV3D_HPP
#define VOXSEG_CONV3D_HPP

#include <algorithm>
#include <cstring>

#include "voxseg/tensor.hpp"
#include "voxseg/thread_pool.hpp"

namespace voxseg {

// Learnable weights of one 3-D convolution: weight (Co, Ci, k, k, k), bias (Co).
// Same-size output via symmetric zero padding of (k-1)/2. The bias may be left
// undefined; convolutions feeding batch norm omit it (BN would cancel it).
template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;

  int kernel() const { return static_cast<int>(weight.dim(2)); }
  int64_t out_channels() const { return weight.dim(0); }
  int64_t in_channels() const { return weight.dim(1); }

  void validate() const {
    check(weight.defined() && weight.ndim() == 5, ErrorKind::Shape,
          "conv3d: weight must be 5-D (Co,Ci,k,k,k)");
    const int64_t k = weight.dim(2);
    check(k == weight.dim(3) && k == weight.dim(4), ErrorKind::Shape,
          "conv3d: kernel must be cubic, got " + shape_str(weight.shape()));
    check(k == 1 || k == 3 || k == 5 || k == 7 || k == 9, ErrorKind::Shape,
          "conv3d: kernel size " + std::to_string(k) + " not in {1,3,5,7,9}");
    if (bias.defined())
      check(bias.ndim() == 1 && bias.dim(0) == weight.dim(0), ErrorKind::Shape,
            "conv3d: bias shape " + shape_str(bias.shape()) + " does not match out_channels " +
                std::to_string(weight.dim(0)));
  }
};

namespace detail {

// Copies x (N,C,D,H,W) into a zero-padded buffer (N,C,D+2p,H+2p,W+2p).
template <typename T>
std::vector<T> pad3d(const T* x, int64_t N, int64_t C, int64_t D, int64_t H, int64_t W, int p) {
  const int64_t pd = D + 2 * p, ph = H + 2 * p, pw = W + 2 * p;
  std::vector<T> out(static_cast<size_t>(N * C * pd * ph * pw), T(0));
  parallel_for(N * C, 1, [&](int64_t i0, int64_t i1) {
    for (int64_t nc = i0; nc < i1; ++nc) {
      const T* src = x + nc * D * H * W;
      T* dst = out.data() + nc * pd * ph * pw;
      for (int64_t z = 0; z < D; ++z)
        for (int64_t y = 0; y < H; ++y)
          std::memcpy(dst + ((z + p) * ph + (y + p)) * pw + p, src + (z * H + y) * W,
                      W * sizeof(T));
    }
  });
  return out;
}

// acc[x] += sum_kx wr[kx] * row[x + kx]; restrict-qualified so the x loop
// vectorizes (acc is a private scratch buffer, never aliased). The fixed-K
// variant keeps the kx reduction in registers, touching acc once per element.
template <typename T, int K>
inline void accumulate_taps_fixed(const T* __restrict row, const T* __restrict wr,
                                  T* __restrict acc, int64_t W) {
  for (int64_t x = 0; x < W; ++x) {
    T t = 0;
    for (int kx = 0; kx < K; ++kx) t += wr[kx] * row[x + kx];
    acc[x] += t;
  }
}

template <typename T>
inline void accumulate_taps(const T* __restrict row, const T* __restrict wr,
                            T* __restrict acc, int k, int64_t W) {
  switch (k) {
    case 3: accumulate_taps_fixed<T, 3>(row, wr, acc, W); return;
    case 5: accumulate_taps_fixed<T, 5>(row, wr, acc, W); return;
    case 7: accumulate_taps_fixed<T, 7>(row, wr, acc, W); return;
    case 9: accumulate_taps_fixed<T, 9>(row, wr, acc, W); return;
    default: break;
  }
  for (int kx = 0; kx < k; ++kx) {
    const T wv = wr[kx];
    const T* __restrict r = row + kx;
    for (int64_t x = 0; x < W; ++x) acc[x] += wv * r[x];
  }
}

// out[n,co,z,y,x] (+)= bias[co] + sum_{ci,kz,ky,kx} w[co,ci,kz,ky,kx] * P[n,ci,z+kz,y+ky,x+kx]
// P is the zero-padded input. Deterministic: each output voxel has one writer
// and a fixed reduction order.
template <typename T, bool Accumulate>
void conv_correlate(const T* padded, const T* weight, const T* bias, T* out, int64_t N,
                    int64_t Ci, int64_t Co, int64_t D, int64_t H, int64_t W, int k) {
  const int64_t ph = H + k - 1, pw = W + k - 1;
  const int64_t pd = D + k - 1;
  const int64_t zblk = 8;
  const int64_t zchunks = (D + zblk - 1) / zblk;
  parallel_for(N * Co * zchunks, 1, [&](int64_t u0, int64_t u1) {
    std::vector<T> acc(static_cast<size_t>(W));
    for (int64_t u = u0; u < u1; ++u) {
      const int64_t zc = u % zchunks;
      const int64_t co = (u / zchunks) % Co;
      const int64_t n = u / (zchunks * Co);
      const int64_t z0 = zc * zblk, z1 = std::min(D, z0 + zblk);
      const T* Wco = weight + co * Ci * k * k * k;
      for (int64_t z = z0; z < z1; ++z) {
        for (int64_t y = 0; y < H; ++y) {
          std::fill(acc.begin(), acc.end(), bias ? bias[co] : T(0));
          for (int64_t ci = 0; ci < Ci; ++ci) {
            const T* Pc = padded + (n * Ci + ci) * pd * ph * pw;
            const T* Wc = Wco + ci * k * k * k;
            for (int kz = 0; kz < k; ++kz)
              for (int ky = 0; ky < k; ++ky)
                accumulate_taps(Pc + ((z + kz) * ph + (y + ky)) * pw, Wc + (kz * k + ky) * k,
                                acc.data(), k, W);
          }
          T* o = out + (((n * Co + co) * D + z) * H + y) * W;
          if constexpr (Accumulate)
            for (int64_t x = 0; x < W; ++x) o[x] += acc[x];
          else
            std::memcpy(o, acc.data(), W * sizeof(T));
        }
      }
    }
  });
}

// 1x1x1 fast path: pure channel mixing, no padding.
template <typename T, bool Accumulate>
void conv_pointwise(const T* x, const T* weight, const T* bias, T* out, int64_t N, int64_t Ci,
                    int64_t Co, int64_t S) {
  const int64_t blk = 1 << 14;
  const int64_t schunks = (S + blk - 1) / blk;
  parallel_for(N * Co * schunks, 1, [&](int64_t u0, int64_t u1) {
    for (int64_t u = u0; u < u1; ++u) {
      const int64_t sc = u % schunks;
      const int64_t co = (u / schunks) % Co;
      const int64_t n = u / (schunks * Co);
      const int64_t s0 = sc * blk, s1 = std::min(S, s0 + blk);
      T* __restrict o = out + (n * Co + co) * S;
      if constexpr (!Accumulate) {
        const T b = bias ? bias[co] : T(0);
        for (int64_t s = s0; s < s1; ++s) o[s] = b;
      } else if (bias) {
        const T b = bias[co];
        for (int64_t s = s0; s < s1; ++s) o[s] += b;
      }
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const T wv = weight[co * Ci + ci];
        const T* __restrict xc = x + (n * Ci + ci) * S;
        for (int64_t s = s0; s < s1; ++s) o[s] += wv * xc[s];
      }
    }
  });
}

// Explicit-lane dot product: reassociated deterministically so it vectorizes
// without -ffast-math.
template <typename T>
inline T dot_lanes(const T* __restrict a, const T* __restrict b, int64_t n) {
  T l0 = 0, l1 = 0, l2 = 0, l3 = 0, l4 = 0, l5 = 0, l6 = 0, l7 = 0;
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    l0 += a[i] * b[i];
    l1 += a[i + 1] * b[i + 1];
    l2 += a[i + 2] * b[i + 2];
    l3 += a[i + 3] * b[i + 3];
    l4 += a[i + 4] * b[i + 4];
    l5 += a[i + 5] * b[i + 5];
    l6 += a[i + 6] * b[i + 6];
    l7 += a[i + 7] * b[i + 7];
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((l0 + l1) + (l2 + l3)) + ((l4 + l5) + (l6 + l7)) + tail;
}

template <typename T>
inline void dw_row(const T* __restrict dy, const T* __restrict p, T* __restrict out, int k,
                   int64_t W) {
  for (int kx = 0; kx < k; ++kx) out[kx] += dot_lanes(dy, p + kx, W);
}

// dW[co,ci,kz,ky,kx] += sum_{n,z,y,x} dY[n,co,z,y,x] * P[n,ci,z+kz,y+ky,x+kx].
// Parallel over (co,ci,kz) slices so each dW element has a single writer.
template <typename T>
void conv_grad_weight(const T* padded, const T* dy, T* dw, int64_t N, int64_t Ci, int64_t Co,
                      int64_t D, int64_t H, int64_t W, int k) {
  const int64_t pd = D + k - 1, ph = H + k - 1, pw = W + k - 1;
  parallel_for(Co * Ci * k, 1, [&](int64_t u0, int64_t u1) {
    std::vector<T> acc(static_cast<size_t>(k) * k);
    for (int64_t u = u0; u < u1; ++u) {
      const int64_t kz = u % k;
      const int64_t ci = (u / k) % Ci;
      const int64_t co = u / (k * Ci);
      std::fill(acc.begin(), acc.end(), T(0));
      for (int64_t n = 0; n < N; ++n) {
        const T* Pc = padded + (n * Ci + ci) * pd * ph * pw;
        const T* dyc = dy + (n * Co + co) * D * H * W;
        for (int64_t z = 0; z < D; ++z) {
          for (int64_t y = 0; y < H; ++y) {
            const T* dyrow = dyc + (z * H + y) * W;
            const T* prow = Pc + ((z + kz) * ph + y) * pw;
            for (int ky = 0; ky < k; ++ky)
              dw_row(dyrow, prow + ky * pw, acc.data() + ky * k, k, W);
          }
        }
      }
      T* dst = dw + ((co * Ci + ci) * k + kz) * k * k;
      for (int64_t i = 0; i < k * k; ++i) dst[i] += acc[i];
    }
  });
}

template <typename T>
void conv_grad_weight_pointwise(const T* x, const T* dy, T* dw, int64_t N, int64_t Ci, int64_t Co,
                                int64_t S) {
  parallel_for(Co * Ci, 1, [&](int64_t u0, int64_t u1) {
    for (int64_t u = u0; u < u1; ++u) {
      const int64_t ci = u % Ci;
      const int64_t co = u / Ci;
      T acc = 0;
      for (int64_t n = 0; n < N; ++n)
        acc += dot_lanes(dy + (n * Co + co) * S, x + (n * Ci + ci) * S, S);
      dw[co * Ci + ci] += acc;
    }
  });
}

template <typename T>
void sum_rows_into(const T* src, T* dst, int64_t rows, int64_t row_len) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* s = src + r * row_len;
    for (int64_t i = 0; i < row_len; ++i) dst[i] += s[i];
  }
}

}  // namespace detail

// Same-size 3-D cross-correlation plus bias; differentiable w.r.t. input,
// weights, and bias.
template <typename T>
Tensor<T> conv3d(Graph<T>* g, const Tensor<T>& x, const ConvParams<T>& p) {
  p.validate();
  check(x.defined() && x.ndim() == 5, ErrorKind::Shape,
        "conv3d: input must be 5-D (N,C,D,H,W), got " + shape_str(x.shape()));
  check(x.dim(1) == p.in_channels(), ErrorKind::Shape,
        "conv3d: input channel dim " + std::to_string(x.dim(1)) + " != weight in_channels " +
            std::to_string(p.in_channels()) + " (dim 1)");
  const int k = p.kernel();
  const int pad = (k - 1) / 2;
  const int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int64_t Co = p.out_channels();
  const int64_t S = D * H * W;

  const bool has_bias = p.bias.defined();
  const Tensor<T> bias_or_empty = p.bias;
  bool rg = tracks_grad(g, {&x, &p.weight});
  if (has_bias) rg = rg || tracks_grad(g, {&p.bias});
  Tensor<T> out = Tensor<T>::zeros({N, Co, D, H, W}, rg);
  const T* bias_ptr = has_bias ? p.bias.data() : nullptr;
  if (k == 1) {
    detail::conv_pointwise<T, false>(x.data(), p.weight.data(), bias_ptr, out.data(), N, Ci, Co,
                                     S);
  } else {
    std::vector<T> padded = detail::pad3d(x.data(), N, Ci, D, H, W, pad);
    detail::conv_correlate<T, false>(padded.data(), p.weight.data(), bias_ptr, out.data(), N, Ci,
                                     Co, D, H, W, k);
  }

  if (out.requires_grad()) {
    std::vector<Tensor<T>> ins = {x, p.weight};
    if (has_bias) ins.push_back(p.bias);
    Tensor<T> xx = x, w = p.weight, b = bias_or_empty, y = out;
    g->record("conv3d", ins, y,
              [xx, w, b, y, has_bias, N, Ci, Co, D, H, W, S, k, pad]() mutable {
      const T* dy = y.grad_ref().data();
      if (w.requires_grad()) {
        if (k == 1) {
          detail::conv_grad_weight_pointwise(xx.data(), dy, w.grad().data(), N, Ci, Co, S);
        } else {
          std::vector<T> padded = detail::pad3d(xx.data(), N, Ci, D, H, W, pad);
          detail::conv_grad_weight(padded.data(), dy, w.grad().data(), N, Ci, Co, D, H, W, k);
        }
      }
      if (has_bias && b.requires_grad()) {
        T* db = b.grad().data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t co = 0; co < Co; ++co) {
            const T* row = dy + (n * Co + co) * S;
            T l0 = 0, l1 = 0, l2 = 0, l3 = 0;
            int64_t i = 0;
            for (; i + 4 <= S; i += 4) {
              l0 += row[i];
              l1 += row[i + 1];
              l2 += row[i + 2];
              l3 += row[i + 3];
            }
            for (; i < S; ++i) l0 += row[i];
            db[co] += (l0 + l1) + (l2 + l3);
          }
      }
      if (xx.requires_grad()) {
        if (k == 1) {
          // dX = W^T applied across channels.
          std::vector<T> wt(static_cast<size_t>(Ci) * Co);
          for (int64_t co = 0; co < Co; ++co)
            for (int64_t ci = 0; ci < Ci; ++ci) wt[ci * Co + co] = w.data()[co * Ci + ci];
          detail::conv_pointwise<T, true>(dy, wt.data(), nullptr, xx.grad().data(), N, Co, Ci, S);
        } else {
          // dX = correlation of padded dY with channel-swapped, spatially
          // flipped weights.
          std::vector<T> wf(static_cast<size_t>(Ci) * Co * k * k * k);
          const T* wd = w.data();
          for (int64_t co = 0; co < Co; ++co)
            for (int64_t ci = 0; ci < Ci; ++ci)
              for (int kz = 0; kz < k; ++kz)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx)
                    wf[(((ci * Co + co) * k + (k - 1 - kz)) * k + (k - 1 - ky)) * k +
                       (k - 1 - kx)] = wd[(((co * Ci + ci) * k + kz) * k + ky) * k + kx];
          std::vector<T> dypad = detail::pad3d(dy, N, Co, D, H, W, pad);
          detail::conv_correlate<T, true>(dypad.data(), wf.data(), nullptr, xx.grad().data(), N,
                                          Co, Ci, D, H, W, k);
        }
      }
    });
  }
  return out;
}

}  // namespace voxseg

#endif  // VOXSEG_CONV3D_HPP
