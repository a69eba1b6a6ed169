/* Copyright 2026 The Opseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include "opseg/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "opseg/rng.hpp"

namespace opseg {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_4d(const Tensor& t, const char* op) {
  require(t.defined() && t.ndim() == 4,
          std::string(op) + ": expected a 4-d [N,C,H,W] tensor");
}

double ipow(double v, int q) {
  double r = 1.0;
  for (int i = 0; i < q; ++i) r *= v;
  return r;
}

// Attaches a backward closure when recording is on and any parent is
// tracked. `apply` reads out.grad() and accumulates into the parents.
void record(Tensor& out, std::vector<Tensor> parents, std::function<void()> apply) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& p : parents) any = any || p.tracked();
  if (!any) return;
  auto node = std::make_shared<detail::Node>();
  node->parents = std::move(parents);
  node->apply = std::move(apply);
  out.set_node(std::move(node));
}

// input [C,H,W] (one sample) -> cols [C*h*w, Ho*Wo], zero-padded borders.
void im2col(const double* x, int C, int H, int W, int h, int w, int stride,
            int pad, int Ho, int Wo, double* cols) {
  const int P = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int r = 0; r < h; ++r) {
      for (int s = 0; s < w; ++s) {
        double* row = cols + ((static_cast<std::size_t>(c) * h + r) * w + s) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + r;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < Wo; ++ox) row[oy * Wo + ox] = 0.0;
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + s;
            row[oy * Wo + ox] = (ix < 0 || ix >= W) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, int C, int H, int W, int h, int w,
                int stride, int pad, int Ho, int Wo, double* dx) {
  const int P = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int r = 0; r < h; ++r) {
      for (int s = 0; s < w; ++s) {
        const double* row = cols + ((static_cast<std::size_t>(c) * h + r) * w + s) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + r;
          if (iy < 0 || iy >= H) continue;
          double* dst = dx + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + s;
            if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

void dgemm(bool ta, bool tb, int M, int N, int K, const double* A, int lda,
           const double* B, int ldb, double beta, double* C, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, M, N, K, 1.0, A, lda, B, ldb,
              beta, C, ldc);
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int pad) {
  require_4d(input, "conv2d");
  require_4d(kernel, "conv2d");
  require(stride >= 1, "conv2d: stride must be positive, got " + std::to_string(stride));
  require(pad >= 0, "conv2d: pad must be non-negative, got " + std::to_string(pad));
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int K = kernel.dim(0), Ck = kernel.dim(1), h = kernel.dim(2), w = kernel.dim(3);
  require(Ck == C, "conv2d: kernel channels (" + std::to_string(Ck) +
                       ") != input channels (" + std::to_string(C) + ")");
  require(h <= H + 2 * pad, "conv2d: kernel height " + std::to_string(h) +
                                " exceeds padded input height " + std::to_string(H + 2 * pad));
  require(w <= W + 2 * pad, "conv2d: kernel width " + std::to_string(w) +
                                " exceeds padded input width " + std::to_string(W + 2 * pad));
  const bool has_bias = bias.defined();
  if (has_bias)
    require(bias.ndim() == 1 && bias.dim(0) == K,
            "conv2d: bias extent != output channels (" + std::to_string(K) + ")");

  const int Ho = (H + 2 * pad - h) / stride + 1;
  const int Wo = (W + 2 * pad - w) / stride + 1;
  const int Chw = C * h * w;
  const int P = Ho * Wo;

  Tensor out({N, K, Ho, Wo});
  std::vector<double> cols(static_cast<std::size_t>(Chw) * P);
  const double* wmat = kernel.values().data();
  for (int n = 0; n < N; ++n) {
    const double* x = input.values().data() + static_cast<std::size_t>(n) * C * H * W;
    double* y = out.values().data() + static_cast<std::size_t>(n) * K * P;
    im2col(x, C, H, W, h, w, stride, pad, Ho, Wo, cols.data());
    dgemm(false, false, K, P, Chw, wmat, Chw, cols.data(), P, 0.0, y, P);
    if (has_bias) {
      const auto& b = bias.values();
      for (int k = 0; k < K; ++k) {
        double* row = y + static_cast<std::size_t>(k) * P;
        for (int p = 0; p < P; ++p) row[p] += b[k];
      }
    }
  }

  Tensor in = input, ker = kernel, bi = bias, o = out;
  std::vector<Tensor> parents = {input, kernel};
  if (has_bias) parents.push_back(bias);
  record(out, std::move(parents), [in, ker, bi, o, stride, pad, N, C, H, W, K, h, w,
                                   Ho, Wo, Chw, P]() mutable {
    const auto& dy = o.grad();
    std::vector<double> cols(static_cast<std::size_t>(Chw) * P);
    std::vector<double> dcols;
    const bool need_dx = in.tracked();
    const bool need_dw = ker.tracked();
    const bool need_db = bi.defined() && bi.tracked();
    if (need_dx) dcols.assign(static_cast<std::size_t>(Chw) * P, 0.0);
    for (int n = 0; n < N; ++n) {
      const double* dyn = dy.data() + static_cast<std::size_t>(n) * K * P;
      if (need_dw || need_dx) {
        if (need_dw) {
          const double* x = in.values().data() + static_cast<std::size_t>(n) * C * H * W;
          im2col(x, C, H, W, h, w, stride, pad, Ho, Wo, cols.data());
          dgemm(false, true, K, Chw, P, dyn, P, cols.data(), P, 1.0,
                ker.grad().data(), Chw);
        }
        if (need_dx) {
          dgemm(true, false, Chw, P, K, ker.values().data(), Chw, dyn, P, 0.0,
                dcols.data(), P);
          col2im_add(dcols.data(), C, H, W, h, w, stride, pad, Ho, Wo,
                     in.grad().data() + static_cast<std::size_t>(n) * C * H * W);
        }
      }
      if (need_db) {
        auto& db = bi.grad();
        for (int k = 0; k < K; ++k) {
          const double* row = dyn + static_cast<std::size_t>(k) * P;
          double s = 0.0;
          for (int p = 0; p < P; ++p) s += row[p];
          db[k] += s;
        }
      }
    }
  });
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  return conv2d(input, kernel, Tensor(), stride, pad);
}

Tensor elem_pow(const Tensor& input, int q) {
  require(q >= 1, "elem_pow: order q must be >= 1, got " + std::to_string(q));
  const auto& x = input.values();
  Tensor out(input.shape());
  auto& y = out.values();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = ipow(x[i], q);

  Tensor in = input, o = out;
  record(out, {input}, [in, o, q]() mutable {
    const auto& dy = o.grad();
    const auto& x = in.values();
    auto& dx = in.grad();
    for (std::size_t i = 0; i < x.size(); ++i)
      dx[i] += q * ipow(x[i], q - 1) * dy[i];
  });
  return out;
}

Tensor tanh(const Tensor& input) {
  Tensor out(input.shape());
  const auto& x = input.values();
  auto& y = out.values();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);

  Tensor in = input, o = out;
  record(out, {input}, [in, o]() mutable {
    const auto& dy = o.grad();
    const auto& y = o.values();
    auto& dx = in.grad();
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] += (1.0 - y[i] * y[i]) * dy[i];
  });
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  const auto& x = input.values();
  auto& y = out.values();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;

  Tensor in = input, o = out;
  record(out, {input}, [in, o]() mutable {
    const auto& dy = o.grad();
    const auto& x = in.values();
    auto& dx = in.grad();
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > 0.0) dx[i] += dy[i];
  });
  return out;
}

Tensor maxpool2d(const Tensor& input, int k, int stride) {
  require_4d(input, "maxpool2d");
  require(k >= 1 && stride >= 1, "maxpool2d: k and stride must be positive");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  require(k <= H, "maxpool2d: window " + std::to_string(k) +
                      " exceeds map height " + std::to_string(H));
  require(k <= W, "maxpool2d: window " + std::to_string(k) +
                      " exceeds map width " + std::to_string(W));
  const int Ho = (H - k) / stride + 1;
  const int Wo = (W - k) / stride + 1;

  Tensor out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const auto& x = input.values();
  auto& y = out.values();
  std::size_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t plane = (static_cast<std::size_t>(n) * C + c) * H * W;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox, ++oi) {
          double best = -1.0 / 0.0;
          std::size_t best_i = 0;
          for (int r = 0; r < k; ++r)
            for (int s = 0; s < k; ++s) {
              const std::size_t idx =
                  plane + static_cast<std::size_t>(oy * stride + r) * W + (ox * stride + s);
              if (x[idx] > best) {  // strict: first maximum wins on ties
                best = x[idx];
                best_i = idx;
              }
            }
          y[oi] = best;
          (*argmax)[oi] = best_i;
        }
    }

  Tensor in = input, o = out;
  record(out, {input}, [in, o, argmax]() mutable {
    const auto& dy = o.grad();
    auto& dx = in.grad();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[(*argmax)[i]] += dy[i];
  });
  return out;
}

Tensor avgpool2d(const Tensor& input, int k, int stride) {
  require_4d(input, "avgpool2d");
  require(k >= 1 && stride >= 1, "avgpool2d: k and stride must be positive");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  require(k <= H && k <= W, "avgpool2d: window exceeds map extent");
  const int Ho = (H - k) / stride + 1;
  const int Wo = (W - k) / stride + 1;
  const double inv = 1.0 / (k * k);

  Tensor out({N, C, Ho, Wo});
  const auto& x = input.values();
  auto& y = out.values();
  std::size_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t plane = (static_cast<std::size_t>(n) * C + c) * H * W;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox, ++oi) {
          double s = 0.0;
          for (int r = 0; r < k; ++r)
            for (int t = 0; t < k; ++t)
              s += x[plane + static_cast<std::size_t>(oy * stride + r) * W + (ox * stride + t)];
          y[oi] = s * inv;
        }
    }

  Tensor in = input, o = out;
  record(out, {input}, [in, o, k, stride, N, C, H, W, Ho, Wo, inv]() mutable {
    const auto& dy = o.grad();
    auto& dx = in.grad();
    std::size_t oi = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t plane = (static_cast<std::size_t>(n) * C + c) * H * W;
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox, ++oi) {
            const double g = dy[oi] * inv;
            for (int r = 0; r < k; ++r)
              for (int t = 0; t < k; ++t)
                dx[plane + static_cast<std::size_t>(oy * stride + r) * W + (ox * stride + t)] += g;
          }
      }
  });
  return out;
}

Tensor upsample2x(const Tensor& input) {
  require_4d(input, "upsample2x");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor out({N, C, 2 * H, 2 * W});
  const auto& x = input.values();
  auto& y = out.values();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t ip = (static_cast<std::size_t>(n) * C + c) * H * W;
      const std::size_t op = (static_cast<std::size_t>(n) * C + c) * 4 * H * W;
      for (int yy = 0; yy < 2 * H; ++yy) {
        const double* src = x.data() + ip + static_cast<std::size_t>(yy / 2) * W;
        double* dst = y.data() + op + static_cast<std::size_t>(yy) * 2 * W;
        for (int xx = 0; xx < 2 * W; ++xx) dst[xx] = src[xx / 2];
      }
    }

  Tensor in = input, o = out;
  record(out, {input}, [in, o, N, C, H, W]() mutable {
    const auto& dy = o.grad();
    auto& dx = in.grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t ip = (static_cast<std::size_t>(n) * C + c) * H * W;
        const std::size_t op = (static_cast<std::size_t>(n) * C + c) * 4 * H * W;
        for (int yy = 0; yy < 2 * H; ++yy)
          for (int xx = 0; xx < 2 * W; ++xx)
            dx[ip + static_cast<std::size_t>(yy / 2) * W + xx / 2] +=
                dy[op + static_cast<std::size_t>(yy) * 2 * W + xx];
      }
  });
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_4d(a, "concat_channels");
  require_4d(b, "concat_channels");
  require(a.dim(0) == b.dim(0), "concat_channels: batch extents differ (" +
                                    std::to_string(a.dim(0)) + " vs " +
                                    std::to_string(b.dim(0)) + ")");
  require(a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: spatial extents differ (" + std::to_string(a.dim(2)) +
              "x" + std::to_string(a.dim(3)) + " vs " + std::to_string(b.dim(2)) +
              "x" + std::to_string(b.dim(3)) + ")");
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;

  Tensor out({N, Ca + Cb, H, W});
  auto& y = out.values();
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.values().data() + static_cast<std::size_t>(n) * Ca * plane, Ca * plane,
                y.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane);
    std::copy_n(b.values().data() + static_cast<std::size_t>(n) * Cb * plane, Cb * plane,
                y.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane);
  }

  Tensor ta = a, tb = b, o = out;
  record(out, {a, b}, [ta, tb, o, N, Ca, Cb, plane]() mutable {
    const auto& dy = o.grad();
    if (ta.tracked()) {
      auto& da = ta.grad();
      for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Ca * plane; ++i)
          da[static_cast<std::size_t>(n) * Ca * plane + i] +=
              dy[static_cast<std::size_t>(n) * (Ca + Cb) * plane + i];
    }
    if (tb.tracked()) {
      auto& db = tb.grad();
      for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Cb * plane; ++i)
          db[static_cast<std::size_t>(n) * Cb * plane + i] +=
              dy[(static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane + i];
    }
  });
  return out;
}

Tensor slice_channels(const Tensor& input, int c0, int c1) {
  require_4d(input, "slice_channels");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  require(0 <= c0 && c0 < c1 && c1 <= C, "slice_channels: bad range [" +
                                             std::to_string(c0) + "," +
                                             std::to_string(c1) + ") for C=" +
                                             std::to_string(C));
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const int Cs = c1 - c0;
  Tensor out({N, Cs, H, W});
  for (int n = 0; n < N; ++n)
    std::copy_n(input.values().data() + (static_cast<std::size_t>(n) * C + c0) * plane,
                Cs * plane, out.values().data() + static_cast<std::size_t>(n) * Cs * plane);

  Tensor in = input, o = out;
  record(out, {input}, [in, o, N, C, c0, Cs, plane]() mutable {
    const auto& dy = o.grad();
    auto& dx = in.grad();
    for (int n = 0; n < N; ++n)
      for (std::size_t i = 0; i < Cs * plane; ++i)
        dx[(static_cast<std::size_t>(n) * C + c0) * plane + i] +=
            dy[static_cast<std::size_t>(n) * Cs * plane + i];
  });
  return out;
}

Tensor select_index(const Tensor& input, int axis, int index) {
  require(input.defined() && axis >= 0 && axis < input.ndim(),
          "select_index: axis out of range");
  const auto& shape = input.shape();
  require(index >= 0 && index < shape[static_cast<std::size_t>(axis)],
          "select_index: index " + std::to_string(index) + " out of extent " +
              std::to_string(shape[static_cast<std::size_t>(axis)]));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(shape[i]);
  for (int i = axis + 1; i < input.ndim(); ++i) inner *= static_cast<std::size_t>(shape[i]);
  const std::size_t extent = static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]);

  std::vector<int> out_shape;
  for (int i = 0; i < input.ndim(); ++i)
    if (i != axis) out_shape.push_back(shape[static_cast<std::size_t>(i)]);
  if (out_shape.empty()) out_shape.push_back(1);

  Tensor out(out_shape);
  const auto& x = input.values();
  auto& y = out.values();
  for (std::size_t oidx = 0; oidx < outer; ++oidx)
    std::copy_n(x.data() + (oidx * extent + index) * inner, inner,
                y.data() + oidx * inner);

  Tensor in = input, o = out;
  record(out, {input}, [in, o, outer, inner, extent, index]() mutable {
    const auto& dy = o.grad();
    auto& dx = in.grad();
    for (std::size_t oidx = 0; oidx < outer; ++oidx)
      for (std::size_t i = 0; i < inner; ++i)
        dx[(oidx * extent + index) * inner + i] += dy[oidx * inner + i];
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined() && a.shape() == b.shape(),
          "add: operand shapes differ");
  Tensor out(a.shape());
  const auto& xa = a.values();
  const auto& xb = b.values();
  auto& y = out.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] + xb[i];

  Tensor ta = a, tb = b, o = out;
  record(out, {a, b}, [ta, tb, o]() mutable {
    const auto& dy = o.grad();
    if (ta.tracked()) {
      auto& da = ta.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    }
    if (tb.tracked()) {
      auto& db = tb.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
    }
  });
  return out;
}

Tensor sum(const Tensor& input) {
  double s = 0.0;
  for (double v : input.values()) s += v;
  Tensor out({1}, {s});

  Tensor in = input, o = out;
  record(out, {input}, [in, o]() mutable {
    const double up = o.grad()[0];
    auto& dx = in.grad();
    for (auto& g : dx) g += up;
  });
  return out;
}

Tensor dropout(const Tensor& input, double rate, std::uint64_t seed) {
  require(rate >= 0.0 && rate < 1.0,
          "dropout: rate must lie in [0,1), got " + std::to_string(rate));
  if (rate == 0.0) return input;

  Rng rng(seed);
  const double scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(input.numel());
  for (auto& m : *mask) m = rng.uniform() >= rate ? scale : 0.0;

  Tensor out(input.shape());
  const auto& x = input.values();
  auto& y = out.values();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * (*mask)[i];

  Tensor in = input, o = out;
  record(out, {input}, [in, o, mask]() mutable {
    const auto& dy = o.grad();
    auto& dx = in.grad();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*mask)[i];
  });
  return out;
}

Tensor seg_loss(const Tensor& logits, const std::vector<std::uint8_t>& target,
                double ce_weight, double dice_weight) {
  require_4d(logits, "seg_loss");
  const int N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const std::size_t npx = static_cast<std::size_t>(N) * H * W;
  require(target.size() == npx, "seg_loss: target pixel count (" +
                                    std::to_string(target.size()) +
                                    ") != logit pixel count (" + std::to_string(npx) + ")");
  for (std::size_t i = 0; i < target.size(); ++i)
    require(target[i] < C, "seg_loss: target class " + std::to_string(int(target[i])) +
                               " outside 0.." + std::to_string(C - 1));
  require(ce_weight >= 0.0 && dice_weight >= 0.0 && ce_weight + dice_weight > 0.0,
          "seg_loss: weights must be non-negative and not both zero");

  const std::size_t plane = static_cast<std::size_t>(H) * W;
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  const auto& z = logits.values();

  double ce = 0.0;
  const int fg = C - 1;  // classes 1..C-1 enter the Dice mean
  std::vector<double> inter(static_cast<std::size_t>(C), 0.0);
  std::vector<double> psum(static_cast<std::size_t>(C), 0.0);
  std::vector<double> tsum(static_cast<std::size_t>(C), 0.0);

  for (int n = 0; n < N; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * C * plane;
    for (std::size_t px = 0; px < plane; ++px) {
      double zmax = -1.0 / 0.0;
      for (int c = 0; c < C; ++c) zmax = std::max(zmax, z[base + c * plane + px]);
      double lse = 0.0;
      for (int c = 0; c < C; ++c) lse += std::exp(z[base + c * plane + px] - zmax);
      lse = zmax + std::log(lse);
      const std::uint8_t t = target[static_cast<std::size_t>(n) * plane + px];
      ce += lse - z[base + t * plane + px];
      for (int c = 0; c < C; ++c) {
        const double p = std::exp(z[base + c * plane + px] - lse);
        (*probs)[base + c * plane + px] = p;
        psum[static_cast<std::size_t>(c)] += p;
      }
      inter[t] += (*probs)[base + t * plane + px];
      tsum[t] += 1.0;
    }
  }
  ce /= static_cast<double>(npx);

  const double eps = 1e-6;
  double dice_mean = 0.0;
  std::vector<double> dsc(static_cast<std::size_t>(C), 0.0);
  for (int c = 1; c < C; ++c) {
    dsc[static_cast<std::size_t>(c)] =
        (2.0 * inter[static_cast<std::size_t>(c)] + eps) /
        (psum[static_cast<std::size_t>(c)] + tsum[static_cast<std::size_t>(c)] + eps);
    dice_mean += dsc[static_cast<std::size_t>(c)];
  }
  dice_mean /= fg;

  Tensor out({1}, {ce_weight * ce + dice_weight * (1.0 - dice_mean)});

  Tensor lg = logits, o = out;
  auto tgt = std::make_shared<std::vector<std::uint8_t>>(target);
  auto inter_s = std::make_shared<std::vector<double>>(std::move(inter));
  auto psum_s = std::make_shared<std::vector<double>>(std::move(psum));
  auto tsum_s = std::make_shared<std::vector<double>>(std::move(tsum));
  record(out, {logits}, [lg, o, probs, tgt, inter_s, psum_s, tsum_s, ce_weight,
                         dice_weight, N, C, plane, npx, eps, fg]() mutable {
    const double up = o.grad()[0];
    auto& dz = lg.grad();
    // d(dice_loss)/dp_c = -(1/fg) * [2*1{t==c}*(P+T+eps) - (2I+eps)] / (P+T+eps)^2
    std::vector<double> dnum(static_cast<std::size_t>(C)), dden(static_cast<std::size_t>(C));
    for (int c = 1; c < C; ++c) {
      const double den = (*psum_s)[static_cast<std::size_t>(c)] +
                         (*tsum_s)[static_cast<std::size_t>(c)] + eps;
      dnum[static_cast<std::size_t>(c)] = 2.0 / den;
      dden[static_cast<std::size_t>(c)] =
          (2.0 * (*inter_s)[static_cast<std::size_t>(c)] + eps) / (den * den);
    }
    std::vector<double> g(static_cast<std::size_t>(C));
    for (int n = 0; n < N; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * C * plane;
      for (std::size_t px = 0; px < plane; ++px) {
        const std::uint8_t t = (*tgt)[static_cast<std::size_t>(n) * plane + px];
        double gdotp = 0.0;
        for (int c = 0; c < C; ++c) {
          double gc = 0.0;
          if (dice_weight != 0.0 && c >= 1) {
            const double ddsc_dp =
                (c == t ? dnum[static_cast<std::size_t>(c)] : 0.0) -
                dden[static_cast<std::size_t>(c)];
            gc += dice_weight * (-1.0 / fg) * ddsc_dp;
          }
          g[static_cast<std::size_t>(c)] = gc;
          gdotp += gc * (*probs)[base + c * plane + px];
        }
        for (int c = 0; c < C; ++c) {
          const double p = (*probs)[base + c * plane + px];
          double d = p * (g[static_cast<std::size_t>(c)] - gdotp);  // dice via softmax
          d += ce_weight * (p - (c == t ? 1.0 : 0.0)) / static_cast<double>(npx);
          dz[base + c * plane + px] += up * d;
        }
      }
    }
  });
  return out;
}

}  // namespace opseg
