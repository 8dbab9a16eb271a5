#ifndef VOXSEG_OPS_HPP
#define VOXSEG_OPS_HPP

#include <array>
#include <cmath>
#include <cstring>

#include "voxseg/conv3d.hpp"
#include "voxseg/tensor.hpp"
#include "voxseg/thread_pool.hpp"

namespace voxseg {

enum class BNMode { Train, Eval };

// Per-channel batch-normalization state. gamma/beta are learnable; the running
// statistics are updated as a side effect of train-mode forward passes and
// consumed in eval mode.
template <typename T>
struct BNParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  Tensor<T> tracked;  // scalar batch counter; eval before any update is an error
  T epsilon = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);
  BNMode mode = BNMode::Train;

  int64_t channels() const { return gamma.dim(0); }
};

template <typename T>
struct PReLUParams {
  Tensor<T> slope;  // per-channel negative slope
};

namespace detail {

template <typename T>
void elementwise_check(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  check(a.defined() && b.defined(), ErrorKind::Shape, std::string(op) + ": undefined operand");
  check(a.shape() == b.shape(), ErrorKind::Shape,
        std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
            shape_str(b.shape()));
}

// Deterministic chunked sum: fixed chunk boundaries, partials combined in
// chunk order, accumulation in double.
template <typename T, typename F>
double chunked_sum(int64_t n, const F& term) {
  const int64_t blk = 1 << 14;
  const int64_t n_chunks = (n + blk - 1) / blk;
  std::vector<double> partials(static_cast<size_t>(n_chunks), 0.0);
  parallel_for(n, blk, [&](int64_t i0, int64_t i1) {
    double s = 0.0;
    for (int64_t i = i0; i < i1; ++i) s += term(i);
    partials[static_cast<size_t>(i0 / blk)] = s;
  });
  double total = 0.0;
  for (double p : partials) total += p;
  return total;
}

template <typename T, typename F>
void elementwise_apply(int64_t n, const F& fn) {
  parallel_for(n, 1 << 14, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) fn(i);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pointwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::elementwise_check(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape(), tracks_grad(g, {&a, &b}));
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  detail::elementwise_apply<T>(a.numel(), [&](int64_t i) { po[i] = pa[i] + pb[i]; });
  if (out.requires_grad()) {
    Tensor<T> ta = a, tb = b, y = out;
    g->record("add", {ta, tb}, y, [ta, tb, y]() mutable {
      const T* dy = y.grad_ref().data();
      const int64_t n = y.numel();
      if (ta.requires_grad()) {
        T* da = ta.grad().data();
        detail::elementwise_apply<T>(n, [&](int64_t i) { da[i] += dy[i]; });
      }
      if (tb.requires_grad()) {
        T* db = tb.grad().data();
        detail::elementwise_apply<T>(n, [&](int64_t i) { db[i] += dy[i]; });
      }
    });
  }
  return out;
}

// Elementwise product (equal shapes).
template <typename T>
Tensor<T> mul(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::elementwise_check(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape(), tracks_grad(g, {&a, &b}));
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  detail::elementwise_apply<T>(a.numel(), [&](int64_t i) { po[i] = pa[i] * pb[i]; });
  if (out.requires_grad()) {
    Tensor<T> ta = a, tb = b, y = out;
    g->record("mul", {ta, tb}, y, [ta, tb, y]() mutable {
      const T* dy = y.grad_ref().data();
      const int64_t n = y.numel();
      if (ta.requires_grad()) {
        T* da = ta.grad().data();
        const T* vb = tb.data();
        detail::elementwise_apply<T>(n, [&](int64_t i) { da[i] += dy[i] * vb[i]; });
      }
      if (tb.requires_grad()) {
        T* db = tb.grad().data();
        const T* va = ta.data();
        detail::elementwise_apply<T>(n, [&](int64_t i) { db[i] += dy[i] * va[i]; });
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Graph<T>* g, const Tensor<T>& a, double c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape(), tracks_grad(g, {&a}));
  const T* pa = a.data();
  T* po = out.data();
  const T cv = static_cast<T>(c);
  detail::elementwise_apply<T>(a.numel(), [&](int64_t i) { po[i] = cv * pa[i]; });
  if (out.requires_grad()) {
    Tensor<T> ta = a, y = out;
    g->record("scale", {ta}, y, [ta, y, cv]() mutable {
      const T* dy = y.grad_ref().data();
      T* da = ta.grad().data();
      detail::elementwise_apply<T>(y.numel(), [&](int64_t i) { da[i] += cv * dy[i]; });
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Graph<T>* g, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape(), tracks_grad(g, {&x}));
  const T* px = x.data();
  T* po = out.data();
  detail::elementwise_apply<T>(x.numel(), [&](int64_t i) {
    const T v = px[i];
    if (v >= 0) {
      const T e = std::exp(-v);
      po[i] = T(1) / (T(1) + e);
    } else {
      const T e = std::exp(v);
      po[i] = e / (T(1) + e);
    }
  });
  if (out.requires_grad()) {
    Tensor<T> tx = x, y = out;
    g->record("sigmoid", {tx}, y, [tx, y]() mutable {
      const T* dy = y.grad_ref().data();
      const T* v = y.data();
      T* dx = tx.grad().data();
      detail::elementwise_apply<T>(y.numel(),
                                   [&](int64_t i) { dx[i] += dy[i] * v[i] * (T(1) - v[i]); });
    });
  }
  return out;
}

// Concatenation along the channel axis; all other dims must match.
template <typename T>
Tensor<T> concat_channels(Graph<T>* g, const std::vector<Tensor<T>>& parts) {
  check(!parts.empty(), ErrorKind::Shape, "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  check(s0.size() == 5, ErrorKind::Shape, "concat: expects 5-D tensors");
  int64_t c_total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    check(p.ndim() == 5 && p.dim(0) == s0[0] && p.dim(2) == s0[2] && p.dim(3) == s0[3] &&
              p.dim(4) == s0[4],
          ErrorKind::Shape,
          "concat: non-channel dims differ: " + shape_str(p.shape()) + " vs " + shape_str(s0));
    c_total += p.dim(1);
    rg = rg || p.requires_grad();
  }
  Tensor<T> out = Tensor<T>::zeros({s0[0], c_total, s0[2], s0[3], s0[4]}, g != nullptr && rg);
  const int64_t N = s0[0], S = s0[2] * s0[3] * s0[4];
  int64_t c_off = 0;
  for (const auto& p : parts) {
    const int64_t C = p.dim(1);
    for (int64_t n = 0; n < N; ++n)
      std::memcpy(out.data() + (n * c_total + c_off) * S, p.data() + n * C * S,
                  static_cast<size_t>(C * S) * sizeof(T));
    c_off += C;
  }
  if (out.requires_grad()) {
    std::vector<Tensor<T>> ins = parts;
    Tensor<T> y = out;
    g->record("concat", ins, y, [ins, y, N, S, c_total]() mutable {
      const T* dy = y.grad_ref().data();
      int64_t off = 0;
      for (auto& p : ins) {
        const int64_t C = p.dim(1);
        if (p.requires_grad()) {
          T* dp = p.grad().data();
          for (int64_t n = 0; n < N; ++n) {
            const T* src = dy + (n * c_total + off) * S;
            T* dst = dp + n * C * S;
            for (int64_t i = 0; i < C * S; ++i) dst[i] += src[i];
          }
        }
        off += C;
      }
    });
  }
  return out;
}

// Channel slice [c0, c1); copies (values are immutable so a copy is a view).
template <typename T>
Tensor<T> slice_channels(Graph<T>* g, const Tensor<T>& x, int64_t c0, int64_t c1) {
  check(x.ndim() == 5, ErrorKind::Shape, "slice_channels: expects 5-D tensor");
  check(0 <= c0 && c0 < c1 && c1 <= x.dim(1), ErrorKind::Shape,
        "slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
            ") out of bounds for C=" + std::to_string(x.dim(1)));
  const int64_t N = x.dim(0), C = x.dim(1), S = x.spatial_numel(), Cs = c1 - c0;
  Tensor<T> out = Tensor<T>::zeros({N, Cs, x.dim(2), x.dim(3), x.dim(4)}, tracks_grad(g, {&x}));
  for (int64_t n = 0; n < N; ++n)
    std::memcpy(out.data() + n * Cs * S, x.data() + (n * C + c0) * S,
                static_cast<size_t>(Cs * S) * sizeof(T));
  if (out.requires_grad()) {
    Tensor<T> tx = x, y = out;
    g->record("slice_channels", {tx}, y, [tx, y, N, C, S, c0, Cs]() mutable {
      const T* dy = y.grad_ref().data();
      T* dx = tx.grad().data();
      for (int64_t n = 0; n < N; ++n) {
        T* dst = dx + (n * C + c0) * S;
        const T* src = dy + n * Cs * S;
        for (int64_t i = 0; i < Cs * S; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// Replicates a single-channel tensor across C channels (gradient sums back).
template <typename T>
Tensor<T> expand_channels(Graph<T>* g, const Tensor<T>& x, int64_t c_out) {
  check(x.ndim() == 5 && x.dim(1) == 1, ErrorKind::Shape,
        "expand_channels: input must have C=1, got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), S = x.spatial_numel();
  Tensor<T> out =
      Tensor<T>::zeros({N, c_out, x.dim(2), x.dim(3), x.dim(4)}, tracks_grad(g, {&x}));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < c_out; ++c)
      std::memcpy(out.data() + (n * c_out + c) * S, x.data() + n * S,
                  static_cast<size_t>(S) * sizeof(T));
  if (out.requires_grad()) {
    Tensor<T> tx = x, y = out;
    g->record("expand_channels", {tx}, y, [tx, y, N, S, c_out]() mutable {
      const T* dy = y.grad_ref().data();
      T* dx = tx.grad().data();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < c_out; ++c) {
          const T* src = dy + (n * c_out + c) * S;
          T* dst = dx + n * S;
          for (int64_t i = 0; i < S; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

// 2x2x2 max pooling, stride 2. Gradient routes to the argmax (first in scan
// order on ties).
template <typename T>
Tensor<T> maxpool2(Graph<T>* g, const Tensor<T>& x) {
  check(x.ndim() == 5, ErrorKind::Shape, "maxpool2: expects 5-D tensor");
  const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  check(D % 2 == 0 && H % 2 == 0 && W % 2 == 0, ErrorKind::Shape,
        "maxpool2: spatial dims must be even, got " + shape_str(x.shape()));
  const int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
  Tensor<T> out = Tensor<T>::zeros({N, C, Do, Ho, Wo}, tracks_grad(g, {&x}));
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
  const T* px = x.data();
  T* po = out.data();
  int64_t* am = argmax->data();
  parallel_for(N * C, 1, [&](int64_t i0, int64_t i1) {
    for (int64_t nc = i0; nc < i1; ++nc) {
      const T* src = px + nc * D * H * W;
      T* dst = po + nc * Do * Ho * Wo;
      int64_t* adst = am + nc * Do * Ho * Wo;
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t xo = 0; xo < Wo; ++xo) {
            T best{};
            int64_t besti = -1;
            for (int dz = 0; dz < 2; ++dz)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const int64_t idx = ((2 * z + dz) * H + (2 * y + dy)) * W + (2 * xo + dx);
                  if (besti < 0 || src[idx] > best) {
                    best = src[idx];
                    besti = idx;
                  }
                }
            dst[(z * Ho + y) * Wo + xo] = best;
            adst[(z * Ho + y) * Wo + xo] = besti;
          }
    }
  });
  if (out.requires_grad()) {
    Tensor<T> tx = x, y = out;
    g->record("maxpool2", {tx}, y, [tx, y, argmax, N, C, D, H, W, Do, Ho, Wo]() mutable {
      const T* dy = y.grad_ref().data();
      T* dx = tx.grad().data();
      const int64_t* am = argmax->data();
      parallel_for(N * C, 1, [&](int64_t i0, int64_t i1) {
        for (int64_t nc = i0; nc < i1; ++nc) {
          const int64_t so = nc * Do * Ho * Wo;
          T* dst = dx + nc * D * H * W;
          for (int64_t i = 0; i < Do * Ho * Wo; ++i) dst[am[so + i]] += dy[so + i];
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batch_norm3d(Graph<T>* g, const Tensor<T>& x, BNParams<T>& p) {
  check(x.ndim() == 5, ErrorKind::Shape, "batch_norm3d: expects 5-D tensor");
  const int64_t N = x.dim(0), C = x.dim(1), S = x.spatial_numel();
  check(C == p.channels(), ErrorKind::Shape,
        "batch_norm3d: channel dim " + std::to_string(C) + " != params channels " +
            std::to_string(p.channels()));
  check(p.epsilon > 0, ErrorKind::Config, "batch_norm3d: epsilon must be positive");
  const int64_t M = N * S;

  Tensor<T> out =
      Tensor<T>::zeros(x.shape(), tracks_grad(g, {&x, &p.gamma, &p.beta}));
  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));

  if (p.mode == BNMode::Train) {
    T* rm = p.running_mean.data();
    T* rv = p.running_var.data();
    parallel_for(C, 1, [&](int64_t c0, int64_t c1) {
      for (int64_t c = c0; c < c1; ++c) {
        double sum = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          const T* row = x.data() + (n * C + c) * S;
          for (int64_t i = 0; i < S; ++i) sum += row[i];
        }
        const double mu = sum / static_cast<double>(M);
        double var = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          const T* row = x.data() + (n * C + c) * S;
          for (int64_t i = 0; i < S; ++i) {
            const double d = row[i] - mu;
            var += d * d;
          }
        }
        var /= static_cast<double>(M);
        (*mean)[c] = static_cast<T>(mu);
        (*invstd)[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(p.epsilon)));
        const double unbiased = M > 1 ? var * M / (M - 1) : var;
        rm[c] = static_cast<T>((1 - p.momentum) * rm[c] + p.momentum * static_cast<T>(mu));
        rv[c] = static_cast<T>((1 - p.momentum) * rv[c] + p.momentum * static_cast<T>(unbiased));
        const T gm = p.gamma.data()[c], bt = p.beta.data()[c];
        const T mu_t = (*mean)[c], is_t = (*invstd)[c];
        for (int64_t n = 0; n < N; ++n) {
          const T* row = x.data() + (n * C + c) * S;
          T* orow = out.data() + (n * C + c) * S;
          for (int64_t i = 0; i < S; ++i) orow[i] = gm * (row[i] - mu_t) * is_t + bt;
        }
      }
    });
    p.tracked.data()[0] += T(1);
  } else {
    check(p.tracked.data()[0] > 0, ErrorKind::Config,
          "batch_norm3d: eval mode with uninitialized running stats");
    parallel_for(C, 1, [&](int64_t c0, int64_t c1) {
      for (int64_t c = c0; c < c1; ++c) {
        const T mu = p.running_mean.data()[c];
        const T is = static_cast<T>(
            1.0 / std::sqrt(static_cast<double>(p.running_var.data()[c]) +
                            static_cast<double>(p.epsilon)));
        (*mean)[c] = mu;
        (*invstd)[c] = is;
        const T gm = p.gamma.data()[c], bt = p.beta.data()[c];
        for (int64_t n = 0; n < N; ++n) {
          const T* row = x.data() + (n * C + c) * S;
          T* orow = out.data() + (n * C + c) * S;
          for (int64_t i = 0; i < S; ++i) orow[i] = gm * (row[i] - mu) * is + bt;
        }
      }
    });
  }

  if (out.requires_grad()) {
    Tensor<T> tx = x, gm = p.gamma, bt = p.beta, y = out;
    const bool train = p.mode == BNMode::Train;
    g->record("batch_norm3d", {tx, gm, bt}, y,
              [tx, gm, bt, y, mean, invstd, N, C, S, M, train]() mutable {
      const T* dy = y.grad_ref().data();
      const T* xv = tx.data();
      // hoist grad allocations out of the parallel region
      T* dbt = bt.requires_grad() ? bt.grad().data() : nullptr;
      T* dgm = gm.requires_grad() ? gm.grad().data() : nullptr;
      T* dx_base = tx.requires_grad() ? tx.grad().data() : nullptr;
      parallel_for(C, 1, [&](int64_t c0, int64_t c1) {
        for (int64_t c = c0; c < c1; ++c) {
          const T mu = (*mean)[c], is = (*invstd)[c];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int64_t n = 0; n < N; ++n) {
            const T* dyr = dy + (n * C + c) * S;
            const T* xr = xv + (n * C + c) * S;
            for (int64_t i = 0; i < S; ++i) {
              sum_dy += dyr[i];
              sum_dy_xhat += dyr[i] * ((xr[i] - mu) * is);
            }
          }
          if (dbt) dbt[c] += static_cast<T>(sum_dy);
          if (dgm) dgm[c] += static_cast<T>(sum_dy_xhat);
          if (dx_base) {
            const T gv = gm.data()[c];
            T* dxr_base = dx_base;
            if (train) {
              const T mdy = static_cast<T>(sum_dy / M);
              const T mdyx = static_cast<T>(sum_dy_xhat / M);
              for (int64_t n = 0; n < N; ++n) {
                const T* dyr = dy + (n * C + c) * S;
                const T* xr = xv + (n * C + c) * S;
                T* dxr = dxr_base + (n * C + c) * S;
                for (int64_t i = 0; i < S; ++i) {
                  const T xhat = (xr[i] - mu) * is;
                  dxr[i] += gv * is * (dyr[i] - mdy - xhat * mdyx);
                }
              }
            } else {
              for (int64_t n = 0; n < N; ++n) {
                const T* dyr = dy + (n * C + c) * S;
                T* dxr = dxr_base + (n * C + c) * S;
                for (int64_t i = 0; i < S; ++i) dxr[i] += gv * is * dyr[i];
              }
            }
          }
        }
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> prelu(Graph<T>* g, const Tensor<T>& x, const PReLUParams<T>& p) {
  check(x.ndim() == 5, ErrorKind::Shape, "prelu: expects 5-D tensor");
  const int64_t N = x.dim(0), C = x.dim(1), S = x.spatial_numel();
  check(C == p.slope.dim(0), ErrorKind::Shape,
        "prelu: channel dim " + std::to_string(C) + " != slope channels " +
            std::to_string(p.slope.dim(0)));
  Tensor<T> out = Tensor<T>::zeros(x.shape(), tracks_grad(g, {&x, &p.slope}));
  const T* px = x.data();
  const T* slope = p.slope.data();
  T* po = out.data();
  parallel_for(N * C, 1, [&](int64_t i0, int64_t i1) {
    for (int64_t nc = i0; nc < i1; ++nc) {
      const T a = slope[nc % C];
      const T* xr = px + nc * S;
      T* orow = po + nc * S;
      for (int64_t i = 0; i < S; ++i) orow[i] = xr[i] > 0 ? xr[i] : a * xr[i];
    }
  });
  if (out.requires_grad()) {
    Tensor<T> tx = x, sl = p.slope, y = out;
    g->record("prelu", {tx, sl}, y, [tx, sl, y, N, C, S]() mutable {
      const T* dy = y.grad_ref().data();
      const T* xv = tx.data();
      // hoist grad allocations out of the parallel region
      T* dx_base = tx.requires_grad() ? tx.grad().data() : nullptr;
      T* dsl = sl.requires_grad() ? sl.grad().data() : nullptr;
      parallel_for(C, 1, [&](int64_t c0, int64_t c1) {
        for (int64_t c = c0; c < c1; ++c) {
          const T a = sl.data()[c];
          double da = 0.0;
          for (int64_t n = 0; n < N; ++n) {
            const int64_t off = (n * C + c) * S;
            const T* dyr = dy + off;
            const T* xr = xv + off;
            if (dx_base) {
              T* dxr = dx_base + off;
              for (int64_t i = 0; i < S; ++i) {
                if (xr[i] > 0) {
                  dxr[i] += dyr[i];
                } else {
                  dxr[i] += a * dyr[i];
                  da += dyr[i] * xr[i];
                }
              }
            } else {
              for (int64_t i = 0; i < S; ++i)
                if (xr[i] <= 0) da += dyr[i] * xr[i];
            }
          }
          if (dsl) dsl[c] += static_cast<T>(da);
        }
      });
    });
  }
  return out;
}

// Trilinear interpolation to a larger spatial size. Half-pixel sampling: each
// output coordinate maps to (o + 0.5) * in/out - 0.5, clamped at borders.
template <typename T>
Tensor<T> upsample_trilinear(Graph<T>* g, const Tensor<T>& x,
                             const std::array<int64_t, 3>& target) {
  check(x.ndim() == 5, ErrorKind::Shape, "upsample: expects 5-D tensor");
  const int64_t N = x.dim(0), C = x.dim(1);
  const std::array<int64_t, 3> in = {x.dim(2), x.dim(3), x.dim(4)};
  for (int a = 0; a < 3; ++a)
    check(target[a] >= in[a], ErrorKind::Shape,
          "upsample: target dim " + std::to_string(target[a]) + " < input dim " +
              std::to_string(in[a]) + " (axis " + std::to_string(a) +
              "); downsampling not supported");

  struct AxisTab {
    std::vector<int64_t> i0, i1;
    std::vector<T> w1;
  };
  auto tabs = std::make_shared<std::array<AxisTab, 3>>();
  for (int a = 0; a < 3; ++a) {
    AxisTab& t = (*tabs)[a];
    t.i0.resize(target[a]);
    t.i1.resize(target[a]);
    t.w1.resize(target[a]);
    const double ratio = static_cast<double>(in[a]) / static_cast<double>(target[a]);
    for (int64_t o = 0; o < target[a]; ++o) {
      double s = (o + 0.5) * ratio - 0.5;
      s = std::min(std::max(s, 0.0), static_cast<double>(in[a] - 1));
      const int64_t i0 = static_cast<int64_t>(s);
      t.i0[o] = i0;
      t.i1[o] = std::min(i0 + 1, in[a] - 1);
      t.w1[o] = static_cast<T>(s - static_cast<double>(i0));
    }
  }

  Tensor<T> out = Tensor<T>::zeros({N, C, target[0], target[1], target[2]}, tracks_grad(g, {&x}));
  const int64_t Si = in[0] * in[1] * in[2];
  const int64_t So = target[0] * target[1] * target[2];
  const auto& tz = (*tabs)[0];
  const auto& ty = (*tabs)[1];
  const auto& txa = (*tabs)[2];
  parallel_for(N * C, 1, [&](int64_t i0, int64_t i1) {
    for (int64_t nc = i0; nc < i1; ++nc) {
      const T* src = x.data() + nc * Si;
      T* dst = out.data() + nc * So;
      for (int64_t z = 0; z < target[0]; ++z) {
        const int64_t z0 = tz.i0[z] * in[1], z1 = tz.i1[z] * in[1];
        const T wz = tz.w1[z];
        for (int64_t y = 0; y < target[1]; ++y) {
          const int64_t r00 = (z0 + ty.i0[y]) * in[2], r01 = (z0 + ty.i1[y]) * in[2];
          const int64_t r10 = (z1 + ty.i0[y]) * in[2], r11 = (z1 + ty.i1[y]) * in[2];
          const T wy = ty.w1[y];
          T* orow = dst + (z * target[1] + y) * target[2];
          for (int64_t xo = 0; xo < target[2]; ++xo) {
            const int64_t x0 = txa.i0[xo], x1 = txa.i1[xo];
            const T wx = txa.w1[xo];
            const T c00 = src[r00 + x0] + wx * (src[r00 + x1] - src[r00 + x0]);
            const T c01 = src[r01 + x0] + wx * (src[r01 + x1] - src[r01 + x0]);
            const T c10 = src[r10 + x0] + wx * (src[r10 + x1] - src[r10 + x0]);
            const T c11 = src[r11 + x0] + wx * (src[r11 + x1] - src[r11 + x0]);
            const T c0 = c00 + wy * (c01 - c00);
            const T c1 = c10 + wy * (c11 - c10);
            orow[xo] = c0 + wz * (c1 - c0);
          }
        }
      }
    }
  });

  if (out.requires_grad()) {
    Tensor<T> tx = x, y = out;
    const std::array<int64_t, 3> tgt = target;
    const std::array<int64_t, 3> inn = in;
    g->record("upsample_trilinear", {tx}, y, [tx, y, tabs, tgt, inn, N, C, Si, So]() mutable {
      const T* dy = y.grad_ref().data();
      T* dx = tx.grad().data();
      const auto& tz = (*tabs)[0];
      const auto& ty = (*tabs)[1];
      const auto& txa = (*tabs)[2];
      parallel_for(N * C, 1, [&](int64_t i0, int64_t i1) {
        for (int64_t nc = i0; nc < i1; ++nc) {
          const T* dyr = dy + nc * So;
          T* dxr = dx + nc * Si;
          for (int64_t z = 0; z < tgt[0]; ++z) {
            const int64_t z0 = tz.i0[z] * inn[1], z1 = tz.i1[z] * inn[1];
            const T wz = tz.w1[z];
            for (int64_t y2 = 0; y2 < tgt[1]; ++y2) {
              const int64_t r00 = (z0 + ty.i0[y2]) * inn[2], r01 = (z0 + ty.i1[y2]) * inn[2];
              const int64_t r10 = (z1 + ty.i0[y2]) * inn[2], r11 = (z1 + ty.i1[y2]) * inn[2];
              const T wy = ty.w1[y2];
              const T* drow = dyr + (z * tgt[1] + y2) * tgt[2];
              for (int64_t xo = 0; xo < tgt[2]; ++xo) {
                const int64_t x0 = txa.i0[xo], x1 = txa.i1[xo];
                const T wx = txa.w1[xo];
                const T gv = drow[xo];
                const T g0 = gv * (T(1) - wz), g1 = gv * wz;
                const T g00 = g0 * (T(1) - wy), g01 = g0 * wy;
                const T g10 = g1 * (T(1) - wy), g11 = g1 * wy;
                dxr[r00 + x0] += g00 * (T(1) - wx);
                dxr[r00 + x1] += g00 * wx;
                dxr[r01 + x0] += g01 * (T(1) - wx);
                dxr[r01 + x1] += g01 * wx;
                dxr[r10 + x0] += g10 * (T(1) - wx);
                dxr[r10 + x1] += g10 * wx;
                dxr[r11 + x0] += g11 * (T(1) - wx);
                dxr[r11 + x1] += g11 * wx;
              }
            }
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Graph<T>* g, const Tensor<T>& x) {
  const T* px = x.data();
  const double total = detail::chunked_sum<T>(x.numel(), [&](int64_t i) { return double(px[i]); });
  Tensor<T> out = Tensor<T>::from_data({1}, {static_cast<T>(total)}, tracks_grad(g, {&x}));
  if (out.requires_grad()) {
    Tensor<T> tx = x, y = out;
    g->record("sum", {tx}, y, [tx, y]() mutable {
      const T dv = y.grad_ref()[0];
      T* dx = tx.grad().data();
      detail::elementwise_apply<T>(tx.numel(), [&](int64_t i) { dx[i] += dv; });
    });
  }
  return out;
}

// Weighted binary cross-entropy over all voxels:
//   L = -(1/N) * sum_i [ alpha * g_i * log(p_i) + (1 - g_i) * log(1 - p_i) ]
// p is clamped to [1e-7, 1 - 1e-7] before the logarithms; outside the clamp
// the derivative is zero.
template <typename T>
Tensor<T> wbce(Graph<T>* g, const Tensor<T>& p, const Tensor<T>& target, double alpha) {
  detail::elementwise_check(p, target, "wbce");
  check(alpha > 0, ErrorKind::Config, "wbce: alpha must be positive, got " + std::to_string(alpha));
  const int64_t n = p.numel();
  const T* pv = p.data();
  const T* gv = target.data();
  bool binary = true;
  for (int64_t i = 0; i < n; ++i) binary &= (gv[i] == T(0)) | (gv[i] == T(1));
  if (!binary)
    for (int64_t i = 0; i < n; ++i)
      if (gv[i] != T(0) && gv[i] != T(1))
        fail(ErrorKind::Data, "wbce: target must be binary, found " +
                                  std::to_string(double(gv[i])) + " at index " +
                                  std::to_string(i));
  constexpr T kLo = static_cast<T>(1e-7), kHi = static_cast<T>(1.0 - 1e-7);
  const T av = static_cast<T>(alpha);
  const double total = detail::chunked_sum<T>(n, [&](int64_t i) {
    const T pc = std::min(std::max(pv[i], kLo), kHi);
    // one log per voxel; sums accumulate in double
    return static_cast<double>(gv[i] != T(0) ? av * std::log(pc) : std::log(T(1) - pc));
  });
  const T loss = static_cast<T>(-total / static_cast<double>(n));
  Tensor<T> out = Tensor<T>::from_data({1}, {loss}, tracks_grad(g, {&p}));
  if (out.requires_grad()) {
    Tensor<T> tp = p, tg = target, y = out;
    g->record("wbce", {tp, tg}, y, [tp, tg, y, alpha, n]() mutable {
      if (!tp.requires_grad()) return;
      const T dv = y.grad_ref()[0];
      const T* pv = tp.data();
      const T* gv = tg.data();
      T* dp = tp.grad().data();
      const double inv_n = 1.0 / static_cast<double>(n);
      detail::elementwise_apply<T>(n, [&](int64_t i) {
        const double pd = static_cast<double>(pv[i]);
        if (pd <= static_cast<double>(kLo) || pd >= static_cast<double>(kHi))
          return;  // clamped region is flat
        const double gd = static_cast<double>(gv[i]);
        const double d = -(alpha * gd / pd - (1.0 - gd) / (1.0 - pd)) * inv_n;
        dp[i] += dv * static_cast<T>(d);
      });
    });
  }
  return out;
}

}  // namespace voxseg

#endif  // VOXSEG_OPS_HPP
