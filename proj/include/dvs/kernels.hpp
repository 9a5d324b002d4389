#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "dvs/tensor.hpp"

namespace dvs {

// ---- convolution geometry ----

struct ConvGeom {
  long in_h = 0, in_w = 0;
  long k_h = 0, k_w = 0;
  long stride = 1;
  long pad_t = 0, pad_l = 0, pad_b = 0, pad_r = 0;

  long out_h() const { return (in_h + pad_t + pad_b - k_h) / stride + 1; }
  long out_w() const { return (in_w + pad_l + pad_r - k_w) / stride + 1; }
};

// TF-style SAME padding: output ceil(in/stride), extra padding goes low/high
// asymmetrically (hi gets the odd unit).  Even kernels at stride 1 need this
// to keep spatial size.
inline void same_pad(long in, long k, long stride, long& lo, long& hi) {
  const long out = (in + stride - 1) / stride;
  const long total = std::max(0l, (out - 1) * stride + k - in);
  lo = total / 2;
  hi = total - lo;
}

inline ConvGeom make_same_geom(long h, long w, long k, long stride) {
  ConvGeom g;
  g.in_h = h;
  g.in_w = w;
  g.k_h = g.k_w = k;
  g.stride = stride;
  same_pad(h, k, stride, g.pad_t, g.pad_b);
  same_pad(w, k, stride, g.pad_l, g.pad_r);
  return g;
}

// col layout: rows (ci*kH*kW + ky*kW + kx), cols (oh*outW + ow).
template <typename T>
void im2col(const T* x, long C, const ConvGeom& g, T* col) {
  const long OH = g.out_h(), OW = g.out_w();
  for (long c = 0; c < C; ++c)
    for (long ky = 0; ky < g.k_h; ++ky)
      for (long kx = 0; kx < g.k_w; ++kx) {
        T* row = col + ((c * g.k_h + ky) * g.k_w + kx) * OH * OW;
        for (long oh = 0; oh < OH; ++oh) {
          const long ih = oh * g.stride - g.pad_t + ky;
          if (ih < 0 || ih >= g.in_h) {
            std::memset(row + oh * OW, 0, std::size_t(OW) * sizeof(T));
            continue;
          }
          const T* src = x + (c * g.in_h + ih) * g.in_w;
          for (long ow = 0; ow < OW; ++ow) {
            const long iw = ow * g.stride - g.pad_l + kx;
            row[oh * OW + ow] = (iw < 0 || iw >= g.in_w) ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, long C, const ConvGeom& g, T* x) {
  const long OH = g.out_h(), OW = g.out_w();
  for (long c = 0; c < C; ++c)
    for (long ky = 0; ky < g.k_h; ++ky)
      for (long kx = 0; kx < g.k_w; ++kx) {
        const T* row = col + ((c * g.k_h + ky) * g.k_w + kx) * OH * OW;
        for (long oh = 0; oh < OH; ++oh) {
          const long ih = oh * g.stride - g.pad_t + ky;
          if (ih < 0 || ih >= g.in_h) continue;
          T* dst = x + (c * g.in_h + ih) * g.in_w;
          for (long ow = 0; ow < OW; ++ow) {
            const long iw = ow * g.stride - g.pad_l + kx;
            if (iw >= 0 && iw < g.in_w) dst[iw] += row[oh * OW + ow];
          }
        }
      }
}

// ---- conv2d ----

// x (N,Cin,H,W), w (Cout,Cin,kH,kW), optional b (Cout).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 long stride, long pad_t, long pad_l, long pad_b, long pad_r) {
  DVS_CHECK(x.rank() == 4 && w.rank() == 4, "conv2d: expects rank-4 x and w, got ",
            shape_str(x.shape()), " and ", shape_str(w.shape()));
  const long N = x.dim(0), Cin = x.dim(1);
  const long Cout = w.dim(0);
  DVS_CHECK(w.dim(1) == Cin, "conv2d: weight expects ", w.dim(1),
            " input channels, feature map has ", Cin);
  if (b.defined())
    DVS_CHECK(b.rank() == 1 && b.dim(0) == Cout, "conv2d: bias shape ",
              shape_str(b.shape()), " does not match ", Cout, " filters");
  ConvGeom g;
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.k_h = w.dim(2);
  g.k_w = w.dim(3);
  g.stride = stride;
  g.pad_t = pad_t;
  g.pad_l = pad_l;
  g.pad_b = pad_b;
  g.pad_r = pad_r;
  const long OH = g.out_h(), OW = g.out_w();
  DVS_CHECK(OH > 0 && OW > 0, "conv2d: kernel ", g.k_h, "x", g.k_w,
            " larger than padded input ", shape_str(x.shape()));
  const long K = Cin * g.k_h * g.k_w;

  auto cols = std::make_shared<std::vector<T>>(std::size_t(N * K * OH * OW));
  Tensor<T> out = Tensor<T>::raw({N, Cout, OH, OW});
  eigen::MapConst<T> W(w.data(), Cout, K);
  for (long n = 0; n < N; ++n) {
    T* col = cols->data() + n * K * OH * OW;
    im2col(x.data() + n * Cin * g.in_h * g.in_w, Cin, g, col);
    eigen::MapConst<T> Cm(col, K, OH * OW);
    eigen::MapMat<T> Y(out.data() + n * Cout * OH * OW, Cout, OH * OW);
    Y.noalias() = W * Cm;
  }
  if (b.defined()) {
    T* y = out.data();
    const T* bv = b.data();
    for (long n = 0; n < N; ++n)
      for (long c = 0; c < Cout; ++c) {
        const T bc = bv[c];
        T* p = y + (n * Cout + c) * OH * OW;
        for (long i = 0; i < OH * OW; ++i) p[i] += bc;
      }
  }
  finish_op(out, "conv2d", {x, w, b},
            [px = x.node(), pw = w.node(), pb = b.defined() ? b.node() : nullptr, g, N,
             Cin, Cout, K, OH, OW, cols](Node<T>& nd) {
              eigen::MapConst<T> W(pw->value.data(), Cout, K);
              for (long n = 0; n < N; ++n) {
                eigen::MapConst<T> G(nd.grad.data() + n * Cout * OH * OW, Cout, OH * OW);
                if (pw->requires_grad) {
                  pw->ensure_grad();
                  eigen::MapConst<T> Cm(cols->data() + n * K * OH * OW, K, OH * OW);
                  eigen::MapMat<T> dW(pw->grad.data(), Cout, K);
                  dW.noalias() += G * Cm.transpose();
                }
                if (px->requires_grad) {
                  px->ensure_grad();
                  std::vector<T> dcol(std::size_t(K * OH * OW));
                  eigen::MapMat<T> Dc(dcol.data(), K, OH * OW);
                  Dc.noalias() = W.transpose() * G;
                  col2im_add(dcol.data(), Cin, g,
                             px->grad.data() + n * Cin * g.in_h * g.in_w);
                }
              }
              if (pb && pb->requires_grad) {
                pb->ensure_grad();
                for (long n = 0; n < N; ++n)
                  for (long c = 0; c < Cout; ++c) {
                    T acc = T(0);
                    const T* gp = nd.grad.data() + (n * Cout + c) * OH * OW;
                    for (long i = 0; i < OH * OW; ++i) acc += gp[i];
                    pb->grad[std::size_t(c)] += acc;
                  }
              }
            });
  return out;
}

template <typename T>
Tensor<T> conv2d_same(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                      long stride = 1) {
  ConvGeom g = make_same_geom(x.dim(2), x.dim(3), w.dim(2), stride);
  return conv2d(x, w, b, stride, g.pad_t, g.pad_l, g.pad_b, g.pad_r);
}

// x (N,Cin,H,W), w (Cout,Cin,kH,kW); output (N,Cout,(H-1)*s-2p+kH, ...).
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           long stride, long pad) {
  DVS_CHECK(x.rank() == 4 && w.rank() == 4, "conv_transpose2d: expects rank-4 x and w");
  const long N = x.dim(0), Cin = x.dim(1), H = x.dim(2), Wd = x.dim(3);
  const long Cout = w.dim(0), kH = w.dim(2), kW = w.dim(3);
  DVS_CHECK(w.dim(1) == Cin, "conv_transpose2d: weight expects ", w.dim(1),
            " input channels, feature map has ", Cin);
  const long OH = (H - 1) * stride - 2 * pad + kH;
  const long OW = (Wd - 1) * stride - 2 * pad + kW;
  DVS_CHECK(OH > 0 && OW > 0, "conv_transpose2d: empty output for input ",
            shape_str(x.shape()));
  // The forward pass is the adjoint of a conv whose input grid is the output
  // here; reuse im2col/col2im through that virtual geometry.
  ConvGeom g;
  g.in_h = OH;
  g.in_w = OW;
  g.k_h = kH;
  g.k_w = kW;
  g.stride = stride;
  g.pad_t = g.pad_b = g.pad_l = g.pad_r = pad;
  DVS_CHECK(g.out_h() == H && g.out_w() == Wd,
            "conv_transpose2d: inconsistent geometry for stride ", stride, " pad ", pad);
  const long K = Cout * kH * kW;

  // wT rows ci, cols (co*kH*kW + ky*kW + kx)
  auto wT = std::make_shared<std::vector<T>>(std::size_t(Cin * K));
  {
    const T* wv = w.data();
    for (long co = 0; co < Cout; ++co)
      for (long ci = 0; ci < Cin; ++ci)
        for (long t = 0; t < kH * kW; ++t)
          (*wT)[std::size_t(ci * K + co * kH * kW + t)] =
              wv[(co * Cin + ci) * kH * kW + t];
  }
  Tensor<T> out = Tensor<T>::raw({N, Cout, OH, OW});
  std::fill(out.value().begin(), out.value().end(), T(0));
  eigen::MapConst<T> Wt(wT->data(), Cin, K);
  std::vector<T> colbuf(std::size_t(K * H * Wd));
  for (long n = 0; n < N; ++n) {
    eigen::MapConst<T> X(x.data() + n * Cin * H * Wd, Cin, H * Wd);
    eigen::MapMat<T> Cm(colbuf.data(), K, H * Wd);
    Cm.noalias() = Wt.transpose() * X;
    col2im_add(colbuf.data(), Cout, g, out.data() + n * Cout * OH * OW);
  }
  if (b.defined()) {
    DVS_CHECK(b.rank() == 1 && b.dim(0) == Cout, "conv_transpose2d: bias shape ",
              shape_str(b.shape()), " does not match ", Cout, " filters");
    T* y = out.data();
    const T* bv = b.data();
    for (long n = 0; n < N; ++n)
      for (long c = 0; c < Cout; ++c) {
        T* p = y + (n * Cout + c) * OH * OW;
        for (long i = 0; i < OH * OW; ++i) p[i] += bv[c];
      }
  }
  finish_op(
      out, "conv_transpose2d", {x, w, b},
      [px = x.node(), pw = w.node(), pb = b.defined() ? b.node() : nullptr, g, N, Cin,
       Cout, kH, kW, K, H, Wd, OH, OW, wT](Node<T>& nd) {
        eigen::MapConst<T> Wt(wT->data(), Cin, K);
        std::vector<T> gcol(std::size_t(K * H * Wd));
        std::vector<T> dwT;
        if (pw->requires_grad) dwT.assign(std::size_t(Cin * K), T(0));
        for (long n = 0; n < N; ++n) {
          im2col(nd.grad.data() + n * Cout * OH * OW, Cout, g, gcol.data());
          eigen::MapConst<T> Gc(gcol.data(), K, H * Wd);
          if (px->requires_grad) {
            px->ensure_grad();
            eigen::MapMat<T> dX(px->grad.data() + n * Cin * H * Wd, Cin, H * Wd);
            dX.noalias() += Wt * Gc;
          }
          if (pw->requires_grad) {
            eigen::MapConst<T> X(px->value.data() + n * Cin * H * Wd, Cin, H * Wd);
            eigen::MapMat<T> dWt(dwT.data(), Cin, K);
            dWt.noalias() += X * Gc.transpose();
          }
        }
        if (pw->requires_grad) {
          pw->ensure_grad();
          for (long co = 0; co < Cout; ++co)
            for (long ci = 0; ci < Cin; ++ci)
              for (long t = 0; t < kH * kW; ++t)
                pw->grad[std::size_t((co * Cin + ci) * kH * kW + t)] +=
                    dwT[std::size_t(ci * K + co * kH * kW + t)];
        }
        if (pb && pb->requires_grad) {
          pb->ensure_grad();
          for (long n = 0; n < N; ++n)
            for (long c = 0; c < Cout; ++c) {
              T acc = T(0);
              const T* gp = nd.grad.data() + (n * Cout + c) * OH * OW;
              for (long i = 0; i < OH * OW; ++i) acc += gp[i];
              pb->grad[std::size_t(c)] += acc;
            }
        }
      });
  return out;
}

// ---- bilinear sampling ----

namespace detail {
// Value and the four corner weights at one fractional site; out-of-bounds
// neighbors contribute zero, matching zero-padded convolution.
template <typename T>
T bilinear_at(const T* img, long H, long W, T py, T px) {
  const long y0 = long(std::floor(py)), x0 = long(std::floor(px));
  const T wy = py - T(y0), wx = px - T(x0);
  T v = T(0);
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const long yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
      const T wgt = (dy ? wy : T(1) - wy) * (dx ? wx : T(1) - wx);
      v += wgt * img[yy * W + xx];
    }
  return v;
}
}  // namespace detail

// x (N,C,H,W); px, py (N,K,H,W) absolute fractional coordinates.  Output
// (N,K*C,H,W): channel k*C+c holds x[:,c] sampled through map k.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& x, const Tensor<T>& px, const Tensor<T>& py) {
  DVS_CHECK(x.rank() == 4 && px.rank() == 4 && py.rank() == 4,
            "bilinear_sample: expects rank-4 tensors");
  check_same_shape("bilinear_sample", px, py);
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long K = px.dim(1);
  DVS_CHECK(px.dim(0) == N && px.dim(2) == H && px.dim(3) == W,
            "bilinear_sample: coordinate maps ", shape_str(px.shape()),
            " do not match features ", shape_str(x.shape()));
  check_finite("bilinear_sample coords", px.value());
  check_finite("bilinear_sample coords", py.value());

  Tensor<T> out = Tensor<T>::raw({N, K * C, H, W});
  const long HW = H * W;
  for (long n = 0; n < N; ++n)
    for (long k = 0; k < K; ++k) {
      const T* pxm = px.data() + (n * K + k) * HW;
      const T* pym = py.data() + (n * K + k) * HW;
      for (long c = 0; c < C; ++c) {
        const T* img = x.data() + (n * C + c) * HW;
        T* dst = out.data() + ((n * K + k) * C + c) * HW;
        for (long i = 0; i < HW; ++i)
          dst[i] = detail::bilinear_at(img, H, W, pym[i], pxm[i]);
      }
    }
  finish_op(out, "bilinear_sample", {x, px, py},
            [pimg = x.node(), ppx = px.node(), ppy = py.node(), N, C, H, W, K](Node<T>& nd) {
              const long HW = H * W;
              for (long n = 0; n < N; ++n)
                for (long k = 0; k < K; ++k) {
                  const T* pxm = ppx->value.data() + (n * K + k) * HW;
                  const T* pym = ppy->value.data() + (n * K + k) * HW;
                  for (long c = 0; c < C; ++c) {
                    const T* img = pimg->value.data() + (n * C + c) * HW;
                    const T* g = nd.grad.data() + ((n * K + k) * C + c) * HW;
                    for (long i = 0; i < HW; ++i) {
                      const T py_ = pym[i], px_ = pxm[i];
                      const long y0 = long(std::floor(py_)), x0 = long(std::floor(px_));
                      const T wy = py_ - T(y0), wx = px_ - T(x0);
                      for (int dy = 0; dy <= 1; ++dy)
                        for (int dx = 0; dx <= 1; ++dx) {
                          const long yy = y0 + dy, xx = x0 + dx;
                          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                          const T fy = dy ? wy : T(1) - wy;
                          const T fx = dx ? wx : T(1) - wx;
                          if (pimg->requires_grad) {
                            pimg->ensure_grad();
                            pimg->grad[std::size_t((n * C + c) * HW + yy * W + xx)] +=
                                g[i] * fy * fx;
                          }
                          const T pix = img[yy * W + xx];
                          if (ppx->requires_grad) {
                            ppx->ensure_grad();
                            ppx->grad[std::size_t((n * K + k) * HW + i)] +=
                                g[i] * fy * (dx ? pix : -pix);
                          }
                          if (ppy->requires_grad) {
                            ppy->ensure_grad();
                            ppy->grad[std::size_t((n * K + k) * HW + i)] +=
                                g[i] * fx * (dy ? pix : -pix);
                          }
                        }
                    }
                  }
                }
            });
  return out;
}

// ---- deformable 3x3 convolution ----

// x (N,C,H,W); dx, dy (N,9,H,W) per-tap displacements; w (Cout,C,3,3).
// Tap k = ky*3+kx samples x at (h+ky-1+dy_k, w+kx-1+dx_k).
template <typename T>
Tensor<T> deformable_conv3x3(const Tensor<T>& x, const Tensor<T>& dx, const Tensor<T>& dy,
                             const Tensor<T>& w, const Tensor<T>& b) {
  DVS_CHECK(x.rank() == 4, "deformable_conv3x3: expects rank-4 input");
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  DVS_CHECK(w.rank() == 4 && w.dim(1) == C && w.dim(2) == 3 && w.dim(3) == 3,
            "deformable_conv3x3: weight must be (Cout,", C, ",3,3), got ",
            shape_str(w.shape()));
  const Shape flow_shape{N, 9, H, W};
  DVS_CHECK(dx.shape() == flow_shape && dy.shape() == flow_shape,
            "deformable_conv3x3: flow shape ", shape_str(dx.shape()), "/",
            shape_str(dy.shape()), " does not match features ", shape_str(x.shape()));
  const long Cout = w.dim(0);
  const long HW = H * W;
  const long K = C * 9;

  auto cols = std::make_shared<std::vector<T>>(std::size_t(N * K * HW));
  Tensor<T> out = Tensor<T>::raw({N, Cout, H, W});
  eigen::MapConst<T> Wm(w.data(), Cout, K);
  for (long n = 0; n < N; ++n) {
    T* col = cols->data() + n * K * HW;
    for (long c = 0; c < C; ++c) {
      const T* img = x.data() + (n * C + c) * HW;
      for (long k = 0; k < 9; ++k) {
        const long ky = k / 3 - 1, kx = k % 3 - 1;
        const T* dxm = dx.data() + (n * 9 + k) * HW;
        const T* dym = dy.data() + (n * 9 + k) * HW;
        T* row = col + (c * 9 + k) * HW;
        for (long h = 0; h < H; ++h)
          for (long wo = 0; wo < W; ++wo) {
            const long i = h * W + wo;
            row[i] = detail::bilinear_at(img, H, W, T(h + ky) + dym[i],
                                         T(wo + kx) + dxm[i]);
          }
      }
    }
    eigen::MapConst<T> Cm(col, K, HW);
    eigen::MapMat<T> Y(out.data() + n * Cout * HW, Cout, HW);
    Y.noalias() = Wm * Cm;
  }
  if (b.defined()) {
    DVS_CHECK(b.rank() == 1 && b.dim(0) == Cout,
              "deformable_conv3x3: bias shape mismatch");
    T* y = out.data();
    for (long n = 0; n < N; ++n)
      for (long c = 0; c < Cout; ++c)
        for (long i = 0; i < HW; ++i) y[(n * Cout + c) * HW + i] += b.data()[c];
  }
  finish_op(
      out, "deformable_conv3x3", {x, dx, dy, w, b},
      [px = x.node(), pdx = dx.node(), pdy = dy.node(), pw = w.node(),
       pb = b.defined() ? b.node() : nullptr, N, C, H, W, Cout, K, HW,
       cols](Node<T>& nd) {
        eigen::MapConst<T> Wm(pw->value.data(), Cout, K);
        std::vector<T> dcol(std::size_t(K * HW));
        for (long n = 0; n < N; ++n) {
          eigen::MapConst<T> G(nd.grad.data() + n * Cout * HW, Cout, HW);
          if (pw->requires_grad) {
            pw->ensure_grad();
            eigen::MapConst<T> Cm(cols->data() + n * K * HW, K, HW);
            eigen::MapMat<T> dW(pw->grad.data(), Cout, K);
            dW.noalias() += G * Cm.transpose();
          }
          const bool need_x = px->requires_grad;
          const bool need_f = pdx->requires_grad || pdy->requires_grad;
          if (!need_x && !need_f) continue;
          eigen::MapMat<T> Dc(dcol.data(), K, HW);
          Dc.noalias() = Wm.transpose() * G;
          if (need_x) px->ensure_grad();
          if (pdx->requires_grad) pdx->ensure_grad();
          if (pdy->requires_grad) pdy->ensure_grad();
          for (long c = 0; c < C; ++c) {
            const T* img = px->value.data() + (n * C + c) * HW;
            for (long k = 0; k < 9; ++k) {
              const long ky = k / 3 - 1, kx = k % 3 - 1;
              const T* dxm = pdx->value.data() + (n * 9 + k) * HW;
              const T* dym = pdy->value.data() + (n * 9 + k) * HW;
              const T* gc = dcol.data() + (c * 9 + k) * HW;
              for (long h = 0; h < H; ++h)
                for (long wo = 0; wo < W; ++wo) {
                  const long i = h * W + wo;
                  const T g = gc[i];
                  if (g == T(0)) continue;
                  const T sy = T(h + ky) + dym[i];
                  const T sx = T(wo + kx) + dxm[i];
                  const long y0 = long(std::floor(sy)), x0 = long(std::floor(sx));
                  const T wy = sy - T(y0), wx = sx - T(x0);
                  for (int ddy = 0; ddy <= 1; ++ddy)
                    for (int ddx = 0; ddx <= 1; ++ddx) {
                      const long yy = y0 + ddy, xx = x0 + ddx;
                      if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                      const T fy = ddy ? wy : T(1) - wy;
                      const T fx = ddx ? wx : T(1) - wx;
                      const T pix = img[yy * W + xx];
                      if (need_x)
                        px->grad[std::size_t((n * C + c) * HW + yy * W + xx)] +=
                            g * fy * fx;
                      if (pdx->requires_grad)
                        pdx->grad[std::size_t((n * 9 + k) * HW + i)] +=
                            g * fy * (ddx ? pix : -pix);
                      if (pdy->requires_grad)
                        pdy->grad[std::size_t((n * 9 + k) * HW + i)] +=
                            g * fx * (ddy ? pix : -pix);
                    }
                }
            }
          }
        }
        if (pb && pb->requires_grad) {
          pb->ensure_grad();
          for (long n = 0; n < N; ++n)
            for (long c = 0; c < Cout; ++c) {
              T acc = T(0);
              const T* gp = nd.grad.data() + (n * Cout + c) * HW;
              for (long i = 0; i < HW; ++i) acc += gp[i];
              pb->grad[std::size_t(c)] += acc;
            }
        }
      });
  return out;
}

// ---- grouped 1x1 latent-filter convolution ----

// f (N,G*Cg,H,W); w either (Cg) shared across batch or (N,Cg) per sample.
// Output (N,G,H,W): map g is the 1x1 convolution of group g's channels by w.
template <typename T>
Tensor<T> kgconv(const Tensor<T>& f, const Tensor<T>& w, long groups) {
  DVS_CHECK(f.rank() == 4, "kgconv: expects rank-4 features");
  const long N = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  DVS_CHECK(groups > 0 && C % groups == 0, "kgconv: channel count ", C,
            " not divisible by ", groups, " groups");
  const long Cg = C / groups;
  const bool per_sample = w.rank() == 2;
  if (per_sample)
    DVS_CHECK(w.dim(0) == N && w.dim(1) == Cg, "kgconv: filter shape ",
              shape_str(w.shape()), " does not match (", N, ",", Cg, ")");
  else
    DVS_CHECK(w.rank() == 1 && w.dim(0) == Cg, "kgconv: filter length ",
              w.numel(), " != group width ", Cg);
  const long HW = H * W;
  Tensor<T> out = Tensor<T>::raw({N, groups, H, W});
  for (long n = 0; n < N; ++n) {
    const T* wv = per_sample ? w.data() + n * Cg : w.data();
    for (long g = 0; g < groups; ++g) {
      T* dst = out.data() + (n * groups + g) * HW;
      std::memset(dst, 0, std::size_t(HW) * sizeof(T));
      for (long c = 0; c < Cg; ++c) {
        const T* src = f.data() + ((n * groups + g) * Cg + c) * HW;
        const T wc = wv[c];
        for (long i = 0; i < HW; ++i) dst[i] += wc * src[i];
      }
    }
  }
  finish_op(out, "kgconv", {f, w},
            [pf = f.node(), pw = w.node(), N, groups, Cg, HW, per_sample](Node<T>& nd) {
              for (long n = 0; n < N; ++n) {
                const T* wv =
                    per_sample ? pw->value.data() + n * Cg : pw->value.data();
                for (long g = 0; g < groups; ++g) {
                  const T* go = nd.grad.data() + (n * groups + g) * HW;
                  for (long c = 0; c < Cg; ++c) {
                    const std::size_t fbase = std::size_t(((n * groups + g) * Cg + c) * HW);
                    if (pf->requires_grad) {
                      pf->ensure_grad();
                      const T wc = wv[c];
                      for (long i = 0; i < HW; ++i)
                        pf->grad[fbase + std::size_t(i)] += go[i] * wc;
                    }
                    if (pw->requires_grad) {
                      pw->ensure_grad();
                      T acc = T(0);
                      const T* src = pf->value.data() + fbase;
                      for (long i = 0; i < HW; ++i) acc += go[i] * src[i];
                      pw->grad[std::size_t(per_sample ? n * Cg + c : c)] += acc;
                    }
                  }
                }
              }
            });
  return out;
}

// ---- normalization family ----

enum class NormKind { instance, batch_stats, layer, pixel };

inline const char* norm_name(NormKind k) {
  switch (k) {
    case NormKind::instance: return "instance";
    case NormKind::batch_stats: return "batch_stats";
    case NormKind::layer: return "layer";
    case NormKind::pixel: return "pixel";
  }
  return "?";
}

constexpr double kNormEps = 1e-5;

namespace detail {
// Shared standardize-over-groups core.  index(i) -> group id; each group is
// normalized by its population mean/var.  Backward uses the standard
// x_hat-based formula.
template <typename T, typename GroupOf>
Tensor<T> normalize_grouped(const char* opname, const Tensor<T>& x, long n_groups,
                            GroupOf group_of) {
  const long M = x.numel();
  std::vector<T> mean(std::size_t(n_groups), T(0)), var(std::size_t(n_groups), T(0));
  std::vector<long> count(std::size_t(n_groups), 0);
  const T* xv = x.data();
  for (long i = 0; i < M; ++i) {
    mean[std::size_t(group_of(i))] += xv[i];
    ++count[std::size_t(group_of(i))];
  }
  for (long g = 0; g < n_groups; ++g) mean[std::size_t(g)] /= T(count[std::size_t(g)]);
  for (long i = 0; i < M; ++i) {
    const T d = xv[i] - mean[std::size_t(group_of(i))];
    var[std::size_t(group_of(i))] += d * d;
  }
  auto inv_std = std::make_shared<std::vector<T>>(std::size_t(n_groups));
  for (long g = 0; g < n_groups; ++g)
    (*inv_std)[std::size_t(g)] =
        T(1) / std::sqrt(var[std::size_t(g)] / T(count[std::size_t(g)]) + T(kNormEps));
  Tensor<T> out = Tensor<T>::raw(x.shape());
  T* y = out.data();
  for (long i = 0; i < M; ++i) {
    const long g = group_of(i);
    y[i] = (xv[i] - mean[std::size_t(g)]) * (*inv_std)[std::size_t(g)];
  }
  std::vector<long> counts = count;
  finish_op(out, opname, {x},
            [px = x.node(), n_groups, group_of, inv_std, counts, M](Node<T>& nd) {
              if (!px->requires_grad) return;
              px->ensure_grad();
              std::vector<T> gsum(std::size_t(n_groups), T(0)),
                  gxsum(std::size_t(n_groups), T(0));
              for (long i = 0; i < M; ++i) {
                const long g = group_of(i);
                gsum[std::size_t(g)] += nd.grad[std::size_t(i)];
                gxsum[std::size_t(g)] += nd.grad[std::size_t(i)] * nd.value[std::size_t(i)];
              }
              for (long i = 0; i < M; ++i) {
                const long g = group_of(i);
                const T inv_n = T(1) / T(counts[std::size_t(g)]);
                px->grad[std::size_t(i)] +=
                    (*inv_std)[std::size_t(g)] *
                    (nd.grad[std::size_t(i)] - gsum[std::size_t(g)] * inv_n -
                     nd.value[std::size_t(i)] * gxsum[std::size_t(g)] * inv_n);
              }
            });
  return out;
}
}  // namespace detail

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, NormKind kind, const Tensor<T>& gamma = {},
                    const Tensor<T>& beta = {}) {
  DVS_CHECK(x.rank() == 4, "normalize: expects (N,C,H,W), got ", shape_str(x.shape()));
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long HW = H * W, CHW = C * HW;
  Tensor<T> y;
  switch (kind) {
    case NormKind::instance:
      DVS_CHECK(HW >= 2, "normalize(instance): needs >=2 spatial elements, got ",
                shape_str(x.shape()));
      y = detail::normalize_grouped("normalize_instance", x, N * C,
                                    [HW](long i) { return i / HW; });
      break;
    case NormKind::batch_stats:
      DVS_CHECK(N * HW >= 2, "normalize(batch_stats): needs >=2 elements per channel");
      y = detail::normalize_grouped("normalize_batch", x, C, [HW, C, CHW](long i) {
        return (i % CHW) / HW;
      });
      break;
    case NormKind::layer:
      y = detail::normalize_grouped("normalize_layer", x, N,
                                    [CHW](long i) { return i / CHW; });
      break;
    case NormKind::pixel: {
      // y = x / sqrt(mean_c x^2 + eps), per (n,h,w) site
      const long M = x.numel();
      auto inv = std::make_shared<std::vector<T>>(std::size_t(N * HW));
      const T* xv = x.data();
      Tensor<T> out = Tensor<T>::raw(x.shape());
      T* yv = out.data();
      for (long n = 0; n < N; ++n)
        for (long i = 0; i < HW; ++i) {
          T acc = T(0);
          for (long c = 0; c < C; ++c) {
            const T v = xv[(n * C + c) * HW + i];
            acc += v * v;
          }
          (*inv)[std::size_t(n * HW + i)] =
              T(1) / std::sqrt(acc / T(C) + T(kNormEps));
        }
      for (long n = 0; n < N; ++n)
        for (long c = 0; c < C; ++c)
          for (long i = 0; i < HW; ++i)
            yv[(n * C + c) * HW + i] =
                xv[(n * C + c) * HW + i] * (*inv)[std::size_t(n * HW + i)];
      (void)M;
      finish_op(out, "normalize_pixel", {x},
                [px = x.node(), N, C, HW, inv](Node<T>& nd) {
                  if (!px->requires_grad) return;
                  px->ensure_grad();
                  for (long n = 0; n < N; ++n)
                    for (long i = 0; i < HW; ++i) {
                      T dot = T(0);
                      for (long c = 0; c < C; ++c) {
                        const std::size_t j = std::size_t((n * C + c) * HW + i);
                        dot += nd.grad[j] * nd.value[j];
                      }
                      dot /= T(C);
                      const T s = (*inv)[std::size_t(n * HW + i)];
                      for (long c = 0; c < C; ++c) {
                        const std::size_t j = std::size_t((n * C + c) * HW + i);
                        px->grad[j] += s * (nd.grad[j] - nd.value[j] * dot);
                      }
                    }
                });
      y = out;
      break;
    }
  }
  if (!gamma.defined() && !beta.defined()) return y;
  DVS_CHECK(gamma.defined() && beta.defined() && gamma.rank() == 1 &&
                beta.rank() == 1 && gamma.dim(0) == C && beta.dim(0) == C,
            "normalize: affine parameters must both be length-", C, " vectors");
  // per-channel affine via explicit broadcast-free ops
  Tensor<T> gmap = Tensor<T>::raw({N, C, H, W});
  Tensor<T> bmap = Tensor<T>::raw({N, C, H, W});
  for (long n = 0; n < N; ++n)
    for (long c = 0; c < C; ++c)
      for (long i = 0; i < HW; ++i) {
        gmap.data()[(n * C + c) * HW + i] = gamma.data()[c];
        bmap.data()[(n * C + c) * HW + i] = beta.data()[c];
      }
  finish_op(gmap, "broadcast_gamma", {gamma}, [pg = gamma.node(), N, C, HW](Node<T>& nd) {
    if (!pg->requires_grad) return;
    pg->ensure_grad();
    for (long n = 0; n < N; ++n)
      for (long c = 0; c < C; ++c)
        for (long i = 0; i < HW; ++i)
          pg->grad[std::size_t(c)] += nd.grad[std::size_t((n * C + c) * HW + i)];
  });
  finish_op(bmap, "broadcast_beta", {beta}, [pb = beta.node(), N, C, HW](Node<T>& nd) {
    if (!pb->requires_grad) return;
    pb->ensure_grad();
    for (long n = 0; n < N; ++n)
      for (long c = 0; c < C; ++c)
        for (long i = 0; i < HW; ++i)
          pb->grad[std::size_t(c)] += nd.grad[std::size_t((n * C + c) * HW + i)];
  });
  return add(mul(y, gmap), bmap);
}

// Per-(sample,channel) affine with style vectors (N,C) or shared (C).
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  DVS_CHECK(x.rank() == 4, "channel_affine: expects (N,C,H,W)");
  const long N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const bool per_sample = gamma.rank() == 2;
  if (per_sample) {
    DVS_CHECK(gamma.dim(0) == N && gamma.dim(1) == C && beta.shape() == gamma.shape(),
              "channel_affine: style shape ", shape_str(gamma.shape()),
              " does not match (", N, ",", C, ")");
  } else {
    DVS_CHECK(gamma.rank() == 1 && gamma.dim(0) == C && beta.shape() == gamma.shape(),
              "channel_affine: style length ", gamma.numel(), " != channels ", C);
  }
  Tensor<T> out = Tensor<T>::raw(x.shape());
  for (long n = 0; n < N; ++n)
    for (long c = 0; c < C; ++c) {
      const T g = gamma.data()[per_sample ? n * C + c : c];
      const T b = beta.data()[per_sample ? n * C + c : c];
      const T* src = x.data() + (n * C + c) * HW;
      T* dst = out.data() + (n * C + c) * HW;
      for (long i = 0; i < HW; ++i) dst[i] = src[i] * g + b;
    }
  finish_op(out, "channel_affine", {x, gamma, beta},
            [px = x.node(), pg = gamma.node(), pb = beta.node(), N, C, HW,
             per_sample](Node<T>& nd) {
              for (long n = 0; n < N; ++n)
                for (long c = 0; c < C; ++c) {
                  const std::size_t si = std::size_t(per_sample ? n * C + c : c);
                  const T* g = nd.grad.data() + (n * C + c) * HW;
                  const T* src = px->value.data() + (n * C + c) * HW;
                  if (px->requires_grad) {
                    px->ensure_grad();
                    const T gm = pg->value[si];
                    T* dst = px->grad.data() + (n * C + c) * HW;
                    for (long i = 0; i < HW; ++i) dst[i] += g[i] * gm;
                  }
                  if (pg->requires_grad) {
                    pg->ensure_grad();
                    T acc = T(0);
                    for (long i = 0; i < HW; ++i) acc += g[i] * src[i];
                    pg->grad[si] += acc;
                  }
                  if (pb->requires_grad) {
                    pb->ensure_grad();
                    T acc = T(0);
                    for (long i = 0; i < HW; ++i) acc += g[i];
                    pb->grad[si] += acc;
                  }
                }
            });
  return out;
}

// Instance-normalize then apply style scale/shift.
template <typename T>
Tensor<T> adain(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  return channel_affine(normalize(x, NormKind::instance), gamma, beta);
}

// ---- spectral normalization ----

struct PowerIterResult {
  std::vector<double> u, v;
  double sigma = 0.0;
};

// iters power-iteration steps on W viewed as (rows, cols); u seeds the
// iteration and the updated estimate is returned.  No graph participation.
template <typename T>
PowerIterResult power_iteration(const Tensor<T>& w, long rows,
                                const std::vector<double>& u0, long iters) {
  const long cols = w.numel() / rows;
  DVS_CHECK(rows * cols == w.numel(), "power_iteration: rows ", rows,
            " do not divide tensor of ", w.numel(), " elements");
  double wnorm = 0;
  for (long i = 0; i < w.numel(); ++i) wnorm += double(w.data()[i]) * double(w.data()[i]);
  DVS_CHECK(wnorm > 0, "power_iteration: zero weight matrix, sigma undefined");
  PowerIterResult r;
  r.u = u0;
  DVS_CHECK(long(r.u.size()) == rows, "power_iteration: u length ", r.u.size(),
            " != rows ", rows);
  r.v.assign(std::size_t(cols), 0.0);
  auto nrm = [](std::vector<double>& x) {
    double s = 0;
    for (double a : x) s += a * a;
    s = std::sqrt(s);
    if (s < 1e-12) s = 1e-12;
    for (double& a : x) a /= s;
  };
  const T* wd = w.data();
  for (long it = 0; it < iters; ++it) {
    for (long c = 0; c < cols; ++c) {
      double acc = 0;
      for (long rr = 0; rr < rows; ++rr) acc += double(wd[rr * cols + c]) * r.u[std::size_t(rr)];
      r.v[std::size_t(c)] = acc;
    }
    nrm(r.v);
    for (long rr = 0; rr < rows; ++rr) {
      double acc = 0;
      for (long c = 0; c < cols; ++c) acc += double(wd[rr * cols + c]) * r.v[std::size_t(c)];
      r.u[std::size_t(rr)] = acc;
    }
    nrm(r.u);
  }
  double sigma = 0;
  for (long rr = 0; rr < rows; ++rr) {
    double acc = 0;
    for (long c = 0; c < cols; ++c) acc += double(wd[rr * cols + c]) * r.v[std::size_t(c)];
    sigma += r.u[std::size_t(rr)] * acc;
  }
  r.sigma = sigma;
  return r;
}

// w / (u^T W v) as a graph op; u and v are constants of the current step.
template <typename T>
Tensor<T> spectral_scale(const Tensor<T>& w, long rows, const std::vector<double>& u,
                         const std::vector<double>& v) {
  const long cols = w.numel() / rows;
  DVS_CHECK(rows * cols == w.numel() && long(u.size()) == rows &&
                long(v.size()) == cols,
            "spectral_scale: dimension mismatch");
  double sigma = 0;
  const T* wd = w.data();
  for (long rr = 0; rr < rows; ++rr) {
    double acc = 0;
    for (long c = 0; c < cols; ++c) acc += double(wd[rr * cols + c]) * v[std::size_t(c)];
    sigma += u[std::size_t(rr)] * acc;
  }
  DVS_CHECK(std::abs(sigma) > 1e-12, "spectral_scale: estimated sigma vanished");
  Tensor<T> out = Tensor<T>::raw(w.shape());
  const T inv = T(1.0 / sigma);
  for (long i = 0; i < w.numel(); ++i) out.data()[i] = wd[i] * inv;
  finish_op(out, "spectral_scale", {w},
            [pw = w.node(), rows, cols, u, v, sigma](Node<T>& nd) {
              if (!pw->requires_grad) return;
              pw->ensure_grad();
              // dL/dW = g/sigma - (sum g.Wbar)/sigma * u v^T   (Wbar = W/sigma)
              double gdotwbar = 0;
              for (std::size_t i = 0; i < nd.grad.size(); ++i)
                gdotwbar += double(nd.grad[i]) * double(nd.value[i]);
              const double inv_s = 1.0 / sigma;
              for (long rr = 0; rr < rows; ++rr)
                for (long c = 0; c < cols; ++c) {
                  const std::size_t i = std::size_t(rr * cols + c);
                  pw->grad[i] += T(double(nd.grad[i]) * inv_s -
                                   gdotwbar * inv_s * u[std::size_t(rr)] * v[std::size_t(c)]);
                }
            });
  return out;
}

// ---- minibatch standard deviation concat ----

// Appends one channel holding the batch-wide mean of per-site standard
// deviations (single-scalar convention).  Differentiable.
template <typename T>
Tensor<T> minibatch_std_concat(const Tensor<T>& x) {
  DVS_CHECK(x.rank() == 4, "minibatch_std_concat: expects (N,C,H,W)");
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  DVS_CHECK(N >= 2, "minibatch_std_concat: batch of ", N, " has no spread; need N>=2");
  const long CHW = C * H * W, HW = H * W;
  constexpr double kVarEps = 1e-8;

  auto mean = std::make_shared<std::vector<T>>(std::size_t(CHW), T(0));
  auto stds = std::make_shared<std::vector<T>>(std::size_t(CHW), T(0));
  const T* xv = x.data();
  for (long n = 0; n < N; ++n)
    for (long j = 0; j < CHW; ++j) (*mean)[std::size_t(j)] += xv[n * CHW + j];
  for (long j = 0; j < CHW; ++j) (*mean)[std::size_t(j)] /= T(N);
  T scalar = T(0);
  for (long j = 0; j < CHW; ++j) {
    T acc = T(0);
    for (long n = 0; n < N; ++n) {
      const T d = xv[n * CHW + j] - (*mean)[std::size_t(j)];
      acc += d * d;
    }
    (*stds)[std::size_t(j)] = std::sqrt(acc / T(N) + T(kVarEps));
    scalar += (*stds)[std::size_t(j)];
  }
  scalar /= T(CHW);

  Tensor<T> out = Tensor<T>::raw({N, C + 1, H, W});
  for (long n = 0; n < N; ++n) {
    std::memcpy(out.data() + n * (C + 1) * HW, xv + n * CHW,
                std::size_t(CHW) * sizeof(T));
    T* extra = out.data() + (n * (C + 1) + C) * HW;
    for (long i = 0; i < HW; ++i) extra[i] = scalar;
  }
  finish_op(out, "minibatch_std_concat", {x},
            [px = x.node(), N, C, HW, CHW, mean, stds](Node<T>& nd) {
              if (!px->requires_grad) return;
              px->ensure_grad();
              T gscalar = T(0);
              for (long n = 0; n < N; ++n) {
                const T* ge = nd.grad.data() + (n * (C + 1) + C) * HW;
                for (long i = 0; i < HW; ++i) gscalar += ge[i];
              }
              const T coef = gscalar / T(CHW);
              for (long n = 0; n < N; ++n) {
                const T* gx = nd.grad.data() + n * (C + 1) * HW;
                T* dx = px->grad.data() + n * CHW;
                for (long j = 0; j < CHW; ++j) dx[j] += gx[j];
                for (long j = 0; j < CHW; ++j) {
                  const T d = px->value[std::size_t(n * CHW + j)] - (*mean)[std::size_t(j)];
                  dx[j] += coef * d / (T(N) * (*stds)[std::size_t(j)]);
                }
              }
            });
  return out;
}

// ---- resampling ----

template <typename T>
Tensor<T> down_avg2(const Tensor<T>& x) {
  DVS_CHECK(x.rank() == 4, "down_avg2: expects (N,C,H,W)");
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  DVS_CHECK(H % 2 == 0 && W % 2 == 0, "down_avg2: odd extents ", shape_str(x.shape()));
  const long OH = H / 2, OW = W / 2;
  Tensor<T> out = Tensor<T>::raw({N, C, OH, OW});
  for (long nc = 0; nc < N * C; ++nc) {
    const T* src = x.data() + nc * H * W;
    T* dst = out.data() + nc * OH * OW;
    for (long h = 0; h < OH; ++h)
      for (long w = 0; w < OW; ++w)
        dst[h * OW + w] = (src[(2 * h) * W + 2 * w] + src[(2 * h) * W + 2 * w + 1] +
                           src[(2 * h + 1) * W + 2 * w] +
                           src[(2 * h + 1) * W + 2 * w + 1]) *
                          T(0.25);
  }
  finish_op(out, "down_avg2", {x}, [px = x.node(), N, C, H, W, OH, OW](Node<T>& nd) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (long nc = 0; nc < N * C; ++nc) {
      const T* g = nd.grad.data() + nc * OH * OW;
      T* dst = px->grad.data() + nc * H * W;
      for (long h = 0; h < OH; ++h)
        for (long w = 0; w < OW; ++w) {
          const T q = g[h * OW + w] * T(0.25);
          dst[(2 * h) * W + 2 * w] += q;
          dst[(2 * h) * W + 2 * w + 1] += q;
          dst[(2 * h + 1) * W + 2 * w] += q;
          dst[(2 * h + 1) * W + 2 * w + 1] += q;
        }
    }
  });
  return out;
}

template <typename T>
Tensor<T> up_nearest2(const Tensor<T>& x) {
  DVS_CHECK(x.rank() == 4, "up_nearest2: expects (N,C,H,W)");
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long OH = H * 2, OW = W * 2;
  Tensor<T> out = Tensor<T>::raw({N, C, OH, OW});
  for (long nc = 0; nc < N * C; ++nc) {
    const T* src = x.data() + nc * H * W;
    T* dst = out.data() + nc * OH * OW;
    for (long h = 0; h < OH; ++h)
      for (long w = 0; w < OW; ++w) dst[h * OW + w] = src[(h / 2) * W + w / 2];
  }
  finish_op(out, "up_nearest2", {x}, [px = x.node(), N, C, H, W, OH, OW](Node<T>& nd) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (long nc = 0; nc < N * C; ++nc) {
      const T* g = nd.grad.data() + nc * OH * OW;
      T* dst = px->grad.data() + nc * H * W;
      for (long h = 0; h < OH; ++h)
        for (long w = 0; w < OW; ++w) dst[(h / 2) * W + w / 2] += g[h * OW + w];
    }
  });
  return out;
}

template <typename T>
Tensor<T> resample(const Tensor<T>& x, const std::string& mode) {
  if (mode == "down_avg2") return down_avg2(x);
  if (mode == "up_nearest2") return up_nearest2(x);
  fail("resample: unknown mode '", mode, "'");
}

// (N,C,H,W) -> (N,C): plain sum over the spatial grid.
template <typename T>
Tensor<T> spatial_sum(const Tensor<T>& x) {
  DVS_CHECK(x.rank() == 4, "spatial_sum: expects (N,C,H,W), got ", shape_str(x.shape()));
  const long N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::raw({N, C});
  for (long nc = 0; nc < N * C; ++nc) {
    T acc = 0;
    const T* v = x.data() + nc * HW;
    for (long i = 0; i < HW; ++i) acc += v[i];
    out.data()[nc] = acc;
  }
  finish_op(out, "spatial_sum", {x}, [px = x.node(), N, C, HW](Node<T>& nd) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (long nc = 0; nc < N * C; ++nc) {
      const T g = nd.grad[std::size_t(nc)];
      T* dst = px->grad.data() + nc * HW;
      for (long i = 0; i < HW; ++i) dst[i] += g;
    }
  });
  return out;
}

}  // namespace dvs
