#include "muonseg/ops.hpp"

#include <cmath>
#include <cstring>

#include <Eigen/Core>

namespace muonseg::ops {
namespace {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}

template <typename T>
void accumulate(Tensor<T>& dst, const T* src) {
  T* d = dst.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += src[i];
}

// Grow-only per-thread buffer; im2col fills every element it exposes, so no
// zeroing is needed between uses.
template <typename T>
T* scratch(std::size_t n, int slot) {
  thread_local AlignedVector<T> buffers[2];
  AlignedVector<T>& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

struct VolumeDims {
  int n, c, d, h, w;
  std::size_t spatial() const { return static_cast<std::size_t>(d) * h * w; }
};

template <typename T>
VolumeDims volume_dims(const Tensor<T>& x, const char* op) {
  require(x.rank() == 5, std::string(op) + ": expected [N, C, D, H, W], got " +
                             shape_string(x.shape()));
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)};
}

// Column matrix [C * k^3, D*H*W] of one sample.
template <typename T>
void im2col(const T* x, int channels, int D, int H, int W, int k, T* cols) {
  const int pad = k / 2;
  const std::size_t V = static_cast<std::size_t>(D) * H * W;
  std::size_t row = 0;
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * V;
    for (int kd = 0; kd < k; ++kd) {
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw, ++row) {
          T* dst = cols + row * V;
          for (int d = 0; d < D; ++d) {
            const int sd = d + kd - pad;
            for (int h = 0; h < H; ++h) {
              T* out = dst + (static_cast<std::size_t>(d) * H + h) * W;
              const int sh = h + kh - pad;
              if (sd < 0 || sd >= D || sh < 0 || sh >= H) {
                std::fill(out, out + W, T(0));
                continue;
              }
              const T* src = xc + (static_cast<std::size_t>(sd) * H + sh) * W;
              const int lo = std::max(0, pad - kw);
              const int hi = std::min(W, W + pad - kw);
              std::fill(out, out + lo, T(0));
              std::memcpy(out + lo, src + lo + kw - pad, sizeof(T) * static_cast<std::size_t>(hi - lo));
              std::fill(out + hi, out + W, T(0));
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int channels, int D, int H, int W, int k, T* x) {
  const int pad = k / 2;
  const std::size_t V = static_cast<std::size_t>(D) * H * W;
  std::size_t row = 0;
  for (int c = 0; c < channels; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * V;
    for (int kd = 0; kd < k; ++kd) {
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw, ++row) {
          const T* src_row = cols + row * V;
          for (int d = 0; d < D; ++d) {
            const int sd = d + kd - pad;
            if (sd < 0 || sd >= D) continue;
            for (int h = 0; h < H; ++h) {
              const int sh = h + kh - pad;
              if (sh < 0 || sh >= H) continue;
              const T* in = src_row + (static_cast<std::size_t>(d) * H + h) * W;
              T* dst = xc + (static_cast<std::size_t>(sd) * H + sh) * W;
              const int lo = std::max(0, pad - kw);
              const int hi = std::min(W, W + pad - kw);
              for (int w = lo; w < hi; ++w) dst[w + kw - pad] += in[w];
            }
          }
        }
      }
    }
  }
}

// Linear interpolation along the middle axis of [outer, n, inner] into
// [outer, 2n, inner].
template <typename T>
void upsample_axis(const T* in, T* out, std::size_t outer, int n, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = in + o * n * inner;
    T* dst = out + o * 2 * n * inner;
    for (int j = 0; j < 2 * n; ++j) {
      double pos = j / 2.0 - 0.25;
      if (pos < 0.0) pos = 0.0;
      const int i0 = static_cast<int>(pos);
      const int i1 = std::min(i0 + 1, n - 1);
      const T lambda = static_cast<T>(pos - i0);
      const T* a = src + static_cast<std::size_t>(i0) * inner;
      const T* b = src + static_cast<std::size_t>(i1) * inner;
      T* r = dst + static_cast<std::size_t>(j) * inner;
      for (std::size_t q = 0; q < inner; ++q) r[q] = a[q] + lambda * (b[q] - a[q]);
    }
  }
}

template <typename T>
void upsample_axis_backward(const T* gout, T* gin, std::size_t outer, int n, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = gout + o * 2 * n * inner;
    T* dst = gin + o * n * inner;
    for (int j = 0; j < 2 * n; ++j) {
      double pos = j / 2.0 - 0.25;
      if (pos < 0.0) pos = 0.0;
      const int i0 = static_cast<int>(pos);
      const int i1 = std::min(i0 + 1, n - 1);
      const T lambda = static_cast<T>(pos - i0);
      const T* g = src + static_cast<std::size_t>(j) * inner;
      T* a = dst + static_cast<std::size_t>(i0) * inner;
      T* b = dst + static_cast<std::size_t>(i1) * inner;
      for (std::size_t q = 0; q < inner; ++q) {
        a[q] += (T(1) - lambda) * g[q];
        b[q] += lambda * g[q];
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> weight, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  const VolumeDims dims = volume_dims(xv, "conv3d");
  require(wv.rank() == 5 && wv.dim(2) == wv.dim(3) && wv.dim(3) == wv.dim(4) && wv.dim(2) % 2 == 1,
          "conv3d: weight must be [C_out, C_in, k, k, k] with odd k");
  require(wv.dim(1) == dims.c, "conv3d: input has " + std::to_string(dims.c) +
                                   " channels, weight expects " + std::to_string(wv.dim(1)));
  const int cout = wv.dim(0);
  const int k = wv.dim(2);
  require(bias.value().rank() == 1 && bias.value().dim(0) == cout, "conv3d: bias must be [C_out]");

  const std::size_t V = dims.spatial();
  const int K = dims.c * k * k * k;
  Tensor<T> y(Shape{dims.n, cout, dims.d, dims.h, dims.w});
  T* cols = k == 1 ? nullptr : scratch<T>(static_cast<std::size_t>(K) * V, 0);
  const ConstMatMap<T> wm(wv.data(), cout, K);
  for (int n = 0; n < dims.n; ++n) {
    const T* xn = xv.data() + static_cast<std::size_t>(n) * dims.c * V;
    const T* colp = xn;
    if (k != 1) {
      im2col(xn, dims.c, dims.d, dims.h, dims.w, k, cols);
      colp = cols;
    }
    MatMap<T> ym(y.data() + static_cast<std::size_t>(n) * cout * V, cout, static_cast<Eigen::Index>(V));
    ym.noalias() = wm * ConstMatMap<T>(colp, K, static_cast<Eigen::Index>(V));
    for (int co = 0; co < cout; ++co) ym.row(co).array() += bias.value()[co];
  }

  return x.tape->record(std::move(y), {x, weight, bias},
                        [x, weight, bias, dims, cout, k, K, V](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = tape.value(x.id);
    const Tensor<T>& wv = tape.value(weight.id);
    const bool need_x = tape.requires_grad(x);
    const bool need_w = tape.requires_grad(weight);
    const bool need_b = tape.requires_grad(bias);
    T* cols = need_w && k != 1 ? scratch<T>(static_cast<std::size_t>(K) * V, 0) : nullptr;
    T* dcols = need_x && k != 1 ? scratch<T>(static_cast<std::size_t>(K) * V, 1) : nullptr;
    const ConstMatMap<T> wm(wv.data(), cout, K);
    for (int n = 0; n < dims.n; ++n) {
      const ConstMatMap<T> gm(g.data() + static_cast<std::size_t>(n) * cout * V, cout,
                              static_cast<Eigen::Index>(V));
      if (need_b) {
        Tensor<T>& gb = tape.grad_buffer(bias.id);
        for (int co = 0; co < cout; ++co) gb[co] += gm.row(co).sum();
      }
      const T* xn = xv.data() + static_cast<std::size_t>(n) * dims.c * V;
      if (need_w) {
        const T* colp = xn;
        if (k != 1) {
          im2col(xn, dims.c, dims.d, dims.h, dims.w, k, cols);
          colp = cols;
        }
        MatMap<T> gw(tape.grad_buffer(weight.id).data(), cout, K);
        gw.noalias() += gm * ConstMatMap<T>(colp, K, static_cast<Eigen::Index>(V)).transpose();
      }
      if (need_x) {
        T* gx = tape.grad_buffer(x.id).data() + static_cast<std::size_t>(n) * dims.c * V;
        if (k == 1) {
          MatMap<T> gxm(gx, dims.c, static_cast<Eigen::Index>(V));
          gxm.noalias() += wm.transpose() * gm;
        } else {
          MatMap<T> dc(dcols, K, static_cast<Eigen::Index>(V));
          dc.noalias() = wm.transpose() * gm;
          col2im_add(dcols, dims.c, dims.d, dims.h, dims.w, k, gx);
        }
      }
    }
  });
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, bool train) {
  const Tensor<T>& xv = x.value();
  const VolumeDims dims = volume_dims(xv, "batch_norm");
  const int C = dims.c;
  require(gamma.value().size() == static_cast<std::size_t>(C) &&
              beta.value().size() == static_cast<std::size_t>(C),
          "batch_norm: gamma/beta must have one entry per channel");
  if (state.running_mean.size() != static_cast<std::size_t>(C)) state = BatchNormState<T>(C);
  const std::size_t V = dims.spatial();
  const double count = static_cast<double>(dims.n) * static_cast<double>(V);

  std::vector<T> mean(C), inv_std(C);
  if (train) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int n = 0; n < dims.n; ++n) {
        const T* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * V;
        for (std::size_t v = 0; v < V; ++v) s += p[v];
      }
      const double m = s / count;
      double ss = 0.0;
      for (int n = 0; n < dims.n; ++n) {
        const T* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * V;
        for (std::size_t v = 0; v < V; ++v) ss += (p[v] - m) * (p[v] - m);
      }
      const double var = ss / count;
      mean[c] = static_cast<T>(m);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + kNormEpsilon));
      const double unbiased = count > 1 ? ss / (count - 1.0) : var;
      state.running_mean[c] = static_cast<T>((1.0 - kBatchNormMomentum) * state.running_mean[c] +
                                             kBatchNormMomentum * m);
      state.running_var[c] = static_cast<T>((1.0 - kBatchNormMomentum) * state.running_var[c] +
                                            kBatchNormMomentum * unbiased);
    }
    state.initialized = true;
  } else {
    if (!state.initialized) {
      throw ValidationError("batch_norm: eval mode before any training step (running statistics "
                            "are uninitialised)");
    }
    for (int c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) +
                                                  kNormEpsilon));
    }
  }

  Tensor<T> xhat(xv.shape());
  Tensor<T> y(xv.shape());
  for (int n = 0; n < dims.n; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * V;
      const T g = gamma.value()[c], b = beta.value()[c];
      for (std::size_t v = 0; v < V; ++v) {
        const T xh = (xv[off + v] - mean[c]) * inv_std[c];
        xhat[off + v] = xh;
        y[off + v] = g * xh + b;
      }
    }
  }

  return x.tape->record(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, dims, V, count, train, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape<T>& tape, const Tensor<T>& g) {
        const int C = dims.c;
        for (int c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (int n = 0; n < dims.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * V;
            for (std::size_t v = 0; v < V; ++v) {
              sum_g += g[off + v];
              sum_gx += g[off + v] * xhat[off + v];
            }
          }
          if (tape.requires_grad(gamma)) tape.grad_buffer(gamma.id)[c] += static_cast<T>(sum_gx);
          if (tape.requires_grad(beta)) tape.grad_buffer(beta.id)[c] += static_cast<T>(sum_g);
          if (!tape.requires_grad(x)) continue;
          Tensor<T>& gx = tape.grad_buffer(x.id);
          const T scale = tape.value(gamma.id)[c] * inv_std[c];
          const T mean_g = static_cast<T>(sum_g / count);
          const T mean_gx = static_cast<T>(sum_gx / count);
          for (int n = 0; n < dims.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * V;
            for (std::size_t v = 0; v < V; ++v) {
              gx[off + v] += train ? scale * (g[off + v] - mean_g - xhat[off + v] * mean_gx)
                                   : scale * g[off + v];
            }
          }
        }
      });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> y(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  return x.tape->record(std::move(y), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = tape.value(x.id);
    Tensor<T>& gx = tape.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T(0)) gx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> y(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-xv[i]));
  Tensor<T> saved = y;
  return x.tape->record(std::move(y), {x}, [x, saved = std::move(saved)](Tape<T>& tape,
                                                                       const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * saved[i] * (T(1) - saved[i]);
  });
}

template <typename T>
Var<T> softmax_last(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const int d = xv.dim(-1);
  const std::size_t rows = xv.size() / static_cast<std::size_t>(d);
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T* out = y.data() + r * d;
    const T mx = *std::max_element(in, in + d);
    T s = 0;
    for (int j = 0; j < d; ++j) {
      out[j] = std::exp(in[j] - mx);
      s += out[j];
    }
    for (int j = 0; j < d; ++j) out[j] /= s;
  }
  Tensor<T> saved = y;
  return x.tape->record(std::move(y), {x},
                        [x, d, rows, saved = std::move(saved)](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x.id);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* s = saved.data() + r * d;
      const T* gr = g.data() + r * d;
      T dot = 0;
      for (int j = 0; j < d; ++j) dot += gr[j] * s[j];
      T* o = gx.data() + r * d;
      for (int j = 0; j < d; ++j) o[j] += s[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm_last(Var<T> x, Var<T> gamma, Var<T> beta) {
  const Tensor<T>& xv = x.value();
  const int d = xv.dim(-1);
  require(gamma.value().size() == static_cast<std::size_t>(d) &&
              beta.value().size() == static_cast<std::size_t>(d),
          "layer_norm: gamma/beta must match the last axis");
  const std::size_t rows = xv.size() / static_cast<std::size_t>(d);
  Tensor<T> y(xv.shape()), xhat(xv.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += in[j];
    m /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (in[j] - m) * (in[j] - m);
    var /= d;
    inv_std[r] = static_cast<T>(1.0 / std::sqrt(var + kNormEpsilon));
    for (int j = 0; j < d; ++j) {
      const T xh = static_cast<T>((in[j] - m) * inv_std[r]);
      xhat[r * d + j] = xh;
      y[r * d + j] = gamma.value()[j] * xh + beta.value()[j];
    }
  }
  return x.tape->record(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& gv = tape.value(gamma.id);
        const bool need_x = tape.requires_grad(x);
        std::vector<T> dxh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * d;
          const T* xh = xhat.data() + r * d;
          if (tape.requires_grad(gamma)) {
            Tensor<T>& gg = tape.grad_buffer(gamma.id);
            for (int j = 0; j < d; ++j) gg[j] += gr[j] * xh[j];
          }
          if (tape.requires_grad(beta)) {
            Tensor<T>& gb = tape.grad_buffer(beta.id);
            for (int j = 0; j < d; ++j) gb[j] += gr[j];
          }
          if (!need_x) continue;
          T sum = 0, sum_x = 0;
          for (int j = 0; j < d; ++j) {
            dxh[j] = gr[j] * gv[j];
            sum += dxh[j];
            sum_x += dxh[j] * xh[j];
          }
          T* gx = tape.grad_buffer(x.id).data() + r * d;
          const T inv_d = T(1) / static_cast<T>(d);
          for (int j = 0; j < d; ++j) {
            gx[j] += inv_std[r] * (dxh[j] - sum * inv_d - xh[j] * sum_x * inv_d);
          }
        }
      });
}

template <typename T>
Var<T> max_pool_2x(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const VolumeDims dims = volume_dims(xv, "max_pool_2x");
  require(dims.d % 2 == 0 && dims.h % 2 == 0 && dims.w % 2 == 0,
          "max_pool_2x: spatial extents must be even, got " + shape_string(xv.shape()));
  const int od = dims.d / 2, oh = dims.h / 2, ow = dims.w / 2;
  Tensor<T> y(Shape{dims.n, dims.c, od, oh, ow});
  std::vector<std::size_t> argmax(y.size());
  std::size_t o = 0;
  for (int nc = 0; nc < dims.n * dims.c; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * dims.spatial();
    for (int d = 0; d < od; ++d) {
      for (int h = 0; h < oh; ++h) {
        for (int w = 0; w < ow; ++w, ++o) {
          std::size_t best = 0;
          T best_v = T(0);
          bool first = true;
          for (int kd = 0; kd < 2; ++kd) {
            for (int kh = 0; kh < 2; ++kh) {
              for (int kw = 0; kw < 2; ++kw) {
                const std::size_t idx =
                    base + ((static_cast<std::size_t>(2 * d + kd) * dims.h + (2 * h + kh)) * dims.w +
                            (2 * w + kw));
                if (first || xv[idx] > best_v) {
                  best = idx;
                  best_v = xv[idx];
                  first = false;
                }
              }
            }
          }
          y[o] = best_v;
          argmax[o] = best;
        }
      }
    }
  }
  return x.tape->record(std::move(y), {x},
                        [x, argmax = std::move(argmax)](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
  });
}

template <typename T>
Var<T> upsample_2x(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const VolumeDims s = volume_dims(xv, "upsample_2x");
  const std::size_t nc = static_cast<std::size_t>(s.n) * s.c;
  // Separable passes: W, then H, then D.
  std::vector<T> t1(nc * s.d * s.h * 2 * s.w);
  upsample_axis(xv.data(), t1.data(), nc * s.d * s.h, s.w, 1);
  std::vector<T> t2(nc * s.d * 2 * s.h * 2 * s.w);
  upsample_axis(t1.data(), t2.data(), nc * s.d, s.h, static_cast<std::size_t>(2 * s.w));
  Tensor<T> y(Shape{s.n, s.c, 2 * s.d, 2 * s.h, 2 * s.w});
  upsample_axis(t2.data(), y.data(), nc, s.d, static_cast<std::size_t>(4 * s.h * s.w));
  return x.tape->record(std::move(y), {x}, [x, s, nc](Tape<T>& tape, const Tensor<T>& g) {
    std::vector<T> g2(nc * s.d * 2 * s.h * 2 * s.w, T(0));
    upsample_axis_backward(g.data(), g2.data(), nc, s.d, static_cast<std::size_t>(4 * s.h * s.w));
    std::vector<T> g1(nc * s.d * s.h * 2 * s.w, T(0));
    upsample_axis_backward(g2.data(), g1.data(), nc * s.d, s.h, static_cast<std::size_t>(2 * s.w));
    upsample_axis_backward(g1.data(), tape.grad_buffer(x.id).data(), nc * s.d * s.h, s.w, 1);
  });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.rank() >= 2 && av.rank() == bv.rank() && av.dim(0) == bv.dim(0),
          "concat_channels: rank/batch mismatch");
  for (int i = 2; i < av.rank(); ++i) {
    require(av.dim(i) == bv.dim(i), "concat_channels: spatial mismatch " +
                                        shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
  const std::size_t inner = av.size() / (static_cast<std::size_t>(n) * ca);
  Shape shape = av.shape();
  shape[1] = ca + cb;
  Tensor<T> y(shape);
  for (int i = 0; i < n; ++i) {
    T* dst = y.data() + static_cast<std::size_t>(i) * (ca + cb) * inner;
    std::copy_n(av.data() + static_cast<std::size_t>(i) * ca * inner, ca * inner, dst);
    std::copy_n(bv.data() + static_cast<std::size_t>(i) * cb * inner, cb * inner, dst + ca * inner);
  }
  return a.tape->record(std::move(y), {a, b},
                        [a, b, n, ca, cb, inner](Tape<T>& tape, const Tensor<T>& g) {
    for (int i = 0; i < n; ++i) {
      const T* src = g.data() + static_cast<std::size_t>(i) * (ca + cb) * inner;
      if (tape.requires_grad(a)) {
        T* ga = tape.grad_buffer(a.id).data() + static_cast<std::size_t>(i) * ca * inner;
        for (std::size_t k = 0; k < ca * inner; ++k) ga[k] += src[k];
      }
      if (tape.requires_grad(b)) {
        T* gb = tape.grad_buffer(b.id).data() + static_cast<std::size_t>(i) * cb * inner;
        for (std::size_t k = 0; k < cb * inner; ++k) gb[k] += src[ca * inner + k];
      }
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> y = a.value();
  accumulate(y, b.value().data());
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    if (tape.requires_grad(a)) accumulate(tape.grad_buffer(a.id), g.data());
    if (tape.requires_grad(b)) accumulate(tape.grad_buffer(b.id), g.data());
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> y = a.value();
  for (auto& v : y.values()) v *= factor;
  return a.tape->record(std::move(y), {a}, [a, factor](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& ga = tape.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

template <typename T>
Var<T> mul_channel_broadcast(Var<T> x, Var<T> mask) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& mv = mask.value();
  require(xv.rank() >= 2 && mv.rank() == xv.rank() && mv.dim(1) == 1 && mv.dim(0) == xv.dim(0),
          "mul_channel_broadcast: mask must be [N, 1, ...]");
  for (int i = 2; i < xv.rank(); ++i) {
    require(xv.dim(i) == mv.dim(i), "mul_channel_broadcast: spatial misalignment " +
                                        shape_string(xv.shape()) + " vs " + shape_string(mv.shape()));
  }
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t inner = mv.size() / static_cast<std::size_t>(n);
  Tensor<T> y(xv.shape());
  for (int i = 0; i < n; ++i) {
    const T* m = mv.data() + static_cast<std::size_t>(i) * inner;
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * inner;
      for (std::size_t k = 0; k < inner; ++k) y[off + k] = xv[off + k] * m[k];
    }
  }
  return x.tape->record(std::move(y), {x, mask}, [x, mask, n, c, inner](Tape<T>& tape,
                                                                        const Tensor<T>& g) {
    const Tensor<T>& xv = tape.value(x.id);
    const Tensor<T>& mv = tape.value(mask.id);
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * inner;
        const std::size_t moff = static_cast<std::size_t>(i) * inner;
        if (tape.requires_grad(x)) {
          T* gx = tape.grad_buffer(x.id).data();
          for (std::size_t k = 0; k < inner; ++k) gx[off + k] += g[off + k] * mv[moff + k];
        }
        if (tape.requires_grad(mask)) {
          T* gm = tape.grad_buffer(mask.id).data();
          for (std::size_t k = 0; k < inner; ++k) gm[moff + k] += g[off + k] * xv[off + k];
        }
      }
    }
  });
}

template <typename T>
Var<T> to_tokens(Var<T> x) {
  const VolumeDims s = volume_dims(x.value(), "to_tokens");
  const int S = static_cast<int>(s.spatial());
  Tensor<T> y(Shape{s.n, S, s.c});
  const Tensor<T>& xv = x.value();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int v = 0; v < S; ++v) {
        y[(static_cast<std::size_t>(n) * S + v) * s.c + c] = xv[(static_cast<std::size_t>(n) * s.c + c) * S + v];
      }
    }
  }
  return x.tape->record(std::move(y), {x}, [x, s, S](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x.id);
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        for (int v = 0; v < S; ++v) {
          gx[(static_cast<std::size_t>(n) * s.c + c) * S + v] += g[(static_cast<std::size_t>(n) * S + v) * s.c + c];
        }
      }
    }
  });
}

template <typename T>
Var<T> from_tokens(Var<T> tokens, int depth, int height, int width) {
  const Tensor<T>& tv = tokens.value();
  require(tv.rank() == 3 && tv.dim(1) == depth * height * width,
          "from_tokens: sequence length does not match the volume");
  const int N = tv.dim(0), S = tv.dim(1), C = tv.dim(2);
  Tensor<T> y(Shape{N, C, depth, height, width});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int v = 0; v < S; ++v) {
        y[(static_cast<std::size_t>(n) * C + c) * S + v] = tv[(static_cast<std::size_t>(n) * S + v) * C + c];
      }
    }
  }
  return tokens.tape->record(std::move(y), {tokens}, [tokens, N, S, C](Tape<T>& tape,
                                                                       const Tensor<T>& g) {
    Tensor<T>& gt = tape.grad_buffer(tokens.id);
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        for (int v = 0; v < S; ++v) {
          gt[(static_cast<std::size_t>(n) * S + v) * C + c] += g[(static_cast<std::size_t>(n) * C + c) * S + v];
        }
      }
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  require(wv.rank() == 2 && wv.dim(1) == xv.dim(-1), "linear: weight must be [d_out, d_in]");
  const int din = wv.dim(1), dout = wv.dim(0);
  require(bias.value().size() == static_cast<std::size_t>(dout), "linear: bias must be [d_out]");
  const auto rows = static_cast<Eigen::Index>(xv.size() / din);
  Shape shape = xv.shape();
  shape.back() = dout;
  Tensor<T> y(shape);
  MatMap<T> ym(y.data(), rows, dout);
  ym.noalias() = ConstMatMap<T>(xv.data(), rows, din) * ConstMatMap<T>(wv.data(), dout, din).transpose();
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (int j = 0; j < dout; ++j) ym(r, j) += bias.value()[j];
  }
  return x.tape->record(std::move(y), {x, weight, bias},
                        [x, weight, bias, rows, din, dout](Tape<T>& tape, const Tensor<T>& g) {
    const ConstMatMap<T> gm(g.data(), rows, dout);
    if (tape.requires_grad(x)) {
      MatMap<T> gx(tape.grad_buffer(x.id).data(), rows, din);
      gx.noalias() += gm * ConstMatMap<T>(tape.value(weight.id).data(), dout, din);
    }
    if (tape.requires_grad(weight)) {
      MatMap<T> gw(tape.grad_buffer(weight.id).data(), dout, din);
      gw.noalias() += gm.transpose() * ConstMatMap<T>(tape.value(x.id).data(), rows, din);
    }
    if (tape.requires_grad(bias)) {
      Tensor<T>& gb = tape.grad_buffer(bias.id);
      for (int j = 0; j < dout; ++j) gb[j] += gm.col(j).sum();
    }
  });
}

template <typename T>
Var<T> split_heads(Var<T> x, int heads) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "split_heads: expected [N, S, d]");
  const int N = xv.dim(0), S = xv.dim(1), d = xv.dim(2);
  require(heads > 0 && d % heads == 0, "model width " + std::to_string(d) +
                                           " is not divisible by " + std::to_string(heads) + " heads");
  const int dh = d / heads;
  Tensor<T> y(Shape{N * heads, S, dh});
  auto src_index = [=](int n, int h, int s, int j) {
    return (static_cast<std::size_t>(n) * S + s) * d + h * dh + j;
  };
  std::size_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < heads; ++h)
      for (int s = 0; s < S; ++s)
        for (int j = 0; j < dh; ++j) y[o++] = xv[src_index(n, h, s, j)];
  return x.tape->record(std::move(y), {x}, [x, N, S, heads, dh, src_index](Tape<T>& tape,
                                                                          const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x.id);
    std::size_t o = 0;
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < heads; ++h)
        for (int s = 0; s < S; ++s)
          for (int j = 0; j < dh; ++j) gx[src_index(n, h, s, j)] += g[o++];
  });
}

template <typename T>
Var<T> merge_heads(Var<T> x, int heads) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3 && xv.dim(0) % heads == 0, "merge_heads: expected [N*h, S, dh]");
  const int N = xv.dim(0) / heads, S = xv.dim(1), dh = xv.dim(2), d = dh * heads;
  Tensor<T> y(Shape{N, S, d});
  auto dst_index = [=](int n, int h, int s, int j) {
    return (static_cast<std::size_t>(n) * S + s) * d + h * dh + j;
  };
  std::size_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < heads; ++h)
      for (int s = 0; s < S; ++s)
        for (int j = 0; j < dh; ++j) y[dst_index(n, h, s, j)] = xv[o++];
  return x.tape->record(std::move(y), {x}, [x, N, S, heads, dh, dst_index](Tape<T>& tape,
                                                                          const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x.id);
    std::size_t o = 0;
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < heads; ++h)
        for (int s = 0; s < S; ++s)
          for (int j = 0; j < dh; ++j) gx[o++] += g[dst_index(n, h, s, j)];
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2),
          "matmul_nt: expected [B, M, K] x [B, N, K]");
  const int B = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(1);
  Tensor<T> y(Shape{B, M, N});
  for (int i = 0; i < B; ++i) {
    MatMap<T>(y.data() + static_cast<std::size_t>(i) * M * N, M, N).noalias() =
        ConstMatMap<T>(av.data() + static_cast<std::size_t>(i) * M * K, M, K) *
        ConstMatMap<T>(bv.data() + static_cast<std::size_t>(i) * N * K, N, K).transpose();
  }
  return a.tape->record(std::move(y), {a, b}, [a, b, B, M, K, N](Tape<T>& tape, const Tensor<T>& g) {
    for (int i = 0; i < B; ++i) {
      const ConstMatMap<T> gm(g.data() + static_cast<std::size_t>(i) * M * N, M, N);
      if (tape.requires_grad(a)) {
        MatMap<T>(tape.grad_buffer(a.id).data() + static_cast<std::size_t>(i) * M * K, M, K).noalias() +=
            gm * ConstMatMap<T>(tape.value(b.id).data() + static_cast<std::size_t>(i) * N * K, N, K);
      }
      if (tape.requires_grad(b)) {
        MatMap<T>(tape.grad_buffer(b.id).data() + static_cast<std::size_t>(i) * N * K, N, K).noalias() +=
            gm.transpose() *
            ConstMatMap<T>(tape.value(a.id).data() + static_cast<std::size_t>(i) * M * K, M, K);
      }
    }
  });
}

template <typename T>
Var<T> matmul_nn(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(1),
          "matmul_nn: expected [B, M, K] x [B, K, N]");
  const int B = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(2);
  Tensor<T> y(Shape{B, M, N});
  for (int i = 0; i < B; ++i) {
    MatMap<T>(y.data() + static_cast<std::size_t>(i) * M * N, M, N).noalias() =
        ConstMatMap<T>(av.data() + static_cast<std::size_t>(i) * M * K, M, K) *
        ConstMatMap<T>(bv.data() + static_cast<std::size_t>(i) * K * N, K, N);
  }
  return a.tape->record(std::move(y), {a, b}, [a, b, B, M, K, N](Tape<T>& tape, const Tensor<T>& g) {
    for (int i = 0; i < B; ++i) {
      const ConstMatMap<T> gm(g.data() + static_cast<std::size_t>(i) * M * N, M, N);
      if (tape.requires_grad(a)) {
        MatMap<T>(tape.grad_buffer(a.id).data() + static_cast<std::size_t>(i) * M * K, M, K).noalias() +=
            gm * ConstMatMap<T>(tape.value(b.id).data() + static_cast<std::size_t>(i) * K * N, K, N)
                     .transpose();
      }
      if (tape.requires_grad(b)) {
        MatMap<T>(tape.grad_buffer(b.id).data() + static_cast<std::size_t>(i) * K * N, K, N).noalias() +=
            ConstMatMap<T>(tape.value(a.id).data() + static_cast<std::size_t>(i) * M * K, M, K)
                .transpose() *
            gm;
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  double s = 0.0;
  for (T v : x.value().values()) s += v;
  return x.tape->record(Tensor<T>(Shape{1}, static_cast<T>(s)), {x},
                        [x](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x.id);
    for (auto& v : gx.values()) v += g[0];
  });
}

template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights) {
  require_same_shape(x.value(), weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += x.value()[i] * weights[i];
  return x.tape->record(Tensor<T>(Shape{1}, static_cast<T>(s)), {x},
                        [x, weights](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * weights[i];
  });
}

template <typename T>
Var<T> multihead_cross_attention(Var<T> q_src, Var<T> kv_src, const AttentionWeights<T>& w,
                                 int heads, Tensor<T>* weights_out) {
  require(q_src.value().rank() == 3 && kv_src.value().rank() == 3 &&
              q_src.dim(2) == kv_src.dim(2) && q_src.dim(0) == kv_src.dim(0),
          "cross attention: sources must be [N, S, d] with matching N and d");
  const int d = q_src.dim(2);
  require(heads > 0 && d % heads == 0, "model width " + std::to_string(d) +
                                           " is not divisible by " + std::to_string(heads) + " heads");
  const Var<T> qn = layer_norm_last(q_src, w.ln_q_gamma, w.ln_q_beta);
  const Var<T> kvn = layer_norm_last(kv_src, w.ln_kv_gamma, w.ln_kv_beta);
  const Var<T> q = split_heads(linear(qn, w.wq, w.bq), heads);
  const Var<T> k = split_heads(linear(kvn, w.wk, w.bk), heads);
  const Var<T> v = split_heads(linear(kvn, w.wv, w.bv), heads);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d / heads)));
  const Var<T> attn = softmax_last(scale(matmul_nt(q, k), inv_sqrt));
  if (weights_out) *weights_out = attn.value();
  return linear(merge_heads(matmul_nn(attn, v), heads), w.wo, w.bo);
}

template <typename T>
double global_grad_norm(std::span<const Parameter<T>> params) {
  double ss = 0.0;
  for (const Parameter<T>& p : params) {
    for (T g : p.grad.values()) ss += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(ss);
}

template <typename T>
double clip_by_global_norm(std::span<Parameter<T>> params, double max_norm) {
  const double norm = global_grad_norm(std::span<const Parameter<T>>(params.data(), params.size()));
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Parameter<T>& p : params) {
      for (T& g : p.grad.values()) g = static_cast<T>(g * factor);
    }
  }
  return norm;
}

#define MUONSEG_INSTANTIATE_OPS(T)                                                              \
  template Var<T> conv3d(Var<T>, Var<T>, Var<T>);                                               \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, BatchNormState<T>&, bool);                 \
  template Var<T> relu(Var<T>);                                                                 \
  template Var<T> sigmoid(Var<T>);                                                              \
  template Var<T> softmax_last(Var<T>);                                                         \
  template Var<T> layer_norm_last(Var<T>, Var<T>, Var<T>);                                      \
  template Var<T> max_pool_2x(Var<T>);                                                          \
  template Var<T> upsample_2x(Var<T>);                                                          \
  template Var<T> concat_channels(Var<T>, Var<T>);                                              \
  template Var<T> add(Var<T>, Var<T>);                                                          \
  template Var<T> scale(Var<T>, T);                                                             \
  template Var<T> mul_channel_broadcast(Var<T>, Var<T>);                                        \
  template Var<T> to_tokens(Var<T>);                                                            \
  template Var<T> from_tokens(Var<T>, int, int, int);                                           \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                               \
  template Var<T> split_heads(Var<T>, int);                                                     \
  template Var<T> merge_heads(Var<T>, int);                                                     \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                    \
  template Var<T> matmul_nn(Var<T>, Var<T>);                                                    \
  template Var<T> sum(Var<T>);                                                                  \
  template Var<T> weighted_sum(Var<T>, const Tensor<T>&);                                       \
  template Var<T> multihead_cross_attention(Var<T>, Var<T>, const AttentionWeights<T>&, int,    \
                                            Tensor<T>*);                                        \
  template double global_grad_norm(std::span<const Parameter<T>>);                              \
  template double clip_by_global_norm(std::span<Parameter<T>>, double);

MUONSEG_INSTANTIATE_OPS(float)
MUONSEG_INSTANTIATE_OPS(double)

}  // namespace muonseg::ops
