#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "evnas/tensor.hpp"

namespace evnas {

struct Conv2dSpec {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  int groups = 1;
};

namespace detail {

inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline int ceil_div(int a, int b) { return a > 0 ? (a + b - 1) / b : -(-a / b); }

inline int conv_out_dim(int in, int kernel, const Conv2dSpec& s) {
  const int eff = s.dilation * (kernel - 1) + 1;
  const int out = (in + 2 * s.pad - eff) / s.stride + 1;
  if (out <= 0) throw std::invalid_argument("conv2d: output dimension would be empty");
  return out;
}

inline void check_4d(const Tensor& x, const char* who) {
  if (x.shape.size() != 4) throw std::invalid_argument(std::string(who) + ": expected a 4-d (N,C,H,W) tensor");
}

/// Output positions whose input index o*stride - pad + k*dilation lands in [0, in).
inline std::pair<int, int> valid_out_range(int in, int out, int k, const Conv2dSpec& s) {
  const int off = k * s.dilation - s.pad;
  const int lo = std::max(0, ceil_div(-off, s.stride));
  const int hi = std::min(out - 1, floor_div(in - 1 - off, s.stride));
  return {lo, hi};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Raw convolution kernels (no tape)
// ---------------------------------------------------------------------------

inline Tensor conv2d_fwd(const Tensor& x, const Tensor& w, const Conv2dSpec& s) {
  detail::check_4d(x, "conv2d input");
  if (w.shape.size() != 4) throw std::invalid_argument("conv2d: weight must be 4-d (Cout,Cin/g,KH,KW)");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), cin_g = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (cin != cin_g * s.groups || cout % s.groups != 0)
    throw std::invalid_argument("conv2d: channel/group mismatch between input " + Tensor::shape_str(x.shape) +
                                " and weight " + Tensor::shape_str(w.shape));
  const int oh = detail::conv_out_dim(h, kh, s), ow = detail::conv_out_dim(wd, kw, s);
  Tensor out({n, cout, oh, ow});
  const int cout_g = cout / s.groups;

  for (int ni = 0; ni < n; ++ni) {
    for (int oc = 0; oc < cout; ++oc) {
      const int ic0 = (oc / cout_g) * cin_g;
      float* out_plane = out.data.data() + (static_cast<size_t>(ni) * cout + oc) * oh * ow;
      for (int ick = 0; ick < cin_g; ++ick) {
        const float* x_plane = x.data.data() + (static_cast<size_t>(ni) * cin + ic0 + ick) * h * wd;
        const float* w_plane = w.data.data() + (static_cast<size_t>(oc) * cin_g + ick) * kh * kw;
        for (int ki = 0; ki < kh; ++ki) {
          const auto [oh_lo, oh_hi] = detail::valid_out_range(h, oh, ki, s);
          for (int kj = 0; kj < kw; ++kj) {
            const float wv = w_plane[ki * kw + kj];
            const auto [ow_lo, ow_hi] = detail::valid_out_range(wd, ow, kj, s);
            const int ih_off = ki * s.dilation - s.pad;
            const int iw_off = kj * s.dilation - s.pad;
            for (int oi = oh_lo; oi <= oh_hi; ++oi) {
              const float* xr = x_plane + (oi * s.stride + ih_off) * wd + iw_off;
              float* orow = out_plane + oi * ow;
              if (s.stride == 1) {
                for (int oj = ow_lo; oj <= ow_hi; ++oj) orow[oj] += wv * xr[oj];
              } else {
                for (int oj = ow_lo; oj <= ow_hi; ++oj) orow[oj] += wv * xr[oj * s.stride];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

/// Gradients w.r.t. input (gx) and weight (gw); either may be null.
inline void conv2d_bwd(const Tensor& x, const Tensor& w, const Conv2dSpec& s, const Tensor& gout, Tensor* gx,
                       Tensor* gw) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), cin_g = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int oh = gout.dim(2), ow = gout.dim(3);
  const int cout_g = cout / s.groups;

  for (int ni = 0; ni < n; ++ni) {
    for (int oc = 0; oc < cout; ++oc) {
      const int ic0 = (oc / cout_g) * cin_g;
      const float* g_plane = gout.data.data() + (static_cast<size_t>(ni) * cout + oc) * oh * ow;
      for (int ick = 0; ick < cin_g; ++ick) {
        const float* x_plane = x.data.data() + (static_cast<size_t>(ni) * cin + ic0 + ick) * h * wd;
        float* gx_plane = gx ? gx->data.data() + (static_cast<size_t>(ni) * cin + ic0 + ick) * h * wd : nullptr;
        const float* w_plane = w.data.data() + (static_cast<size_t>(oc) * cin_g + ick) * kh * kw;
        float* gw_plane = gw ? gw->data.data() + (static_cast<size_t>(oc) * cin_g + ick) * kh * kw : nullptr;
        for (int ki = 0; ki < kh; ++ki) {
          const auto [oh_lo, oh_hi] = detail::valid_out_range(h, oh, ki, s);
          for (int kj = 0; kj < kw; ++kj) {
            const auto [ow_lo, ow_hi] = detail::valid_out_range(wd, ow, kj, s);
            const int ih_off = ki * s.dilation - s.pad;
            const int iw_off = kj * s.dilation - s.pad;
            const float wv = w_plane[ki * kw + kj];
            double wacc = 0.0;
            for (int oi = oh_lo; oi <= oh_hi; ++oi) {
              const float* grow = g_plane + oi * ow;
              const float* xr = x_plane + (oi * s.stride + ih_off) * wd + iw_off;
              if (gx_plane) {
                float* gxr = gx_plane + (oi * s.stride + ih_off) * wd + iw_off;
                for (int oj = ow_lo; oj <= ow_hi; ++oj) gxr[oj * s.stride] += wv * grow[oj];
              }
              if (gw_plane) {
                double acc = 0.0;
                for (int oj = ow_lo; oj <= ow_hi; ++oj) acc += static_cast<double>(xr[oj * s.stride]) * grow[oj];
                wacc += acc;
              }
            }
            if (gw_plane) gw_plane[ki * kw + kj] += static_cast<float>(wacc);
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Tape operations
// ---------------------------------------------------------------------------

inline int input(Tape& t, Tensor x) { return t.push(std::move(x)); }

namespace detail {
inline void set_backward(Tape& t, int id, std::function<void(Tape&)> fn) {
  if (t.recording()) t.node(id).backward = std::move(fn);
}
}  // namespace detail

inline int conv2d(Tape& t, int x, Param& w, const Conv2dSpec& spec) {
  const int out = t.push(conv2d_fwd(t.value(x), w.value, spec));
  detail::set_backward(t, out, [out, x, wp = &w, spec](Tape& tp) {
    conv2d_bwd(tp.value(x), wp->value, spec, tp.grad(out), &tp.grad(x), &wp->grad);
    wp->mark_grad_live();
  });
  return out;
}

inline int relu(Tape& t, int x) {
  Tensor out = t.value(x);
  for (float& v : out.data) v = std::max(v, 0.0f);
  const int id = t.push(std::move(out));
  detail::set_backward(t, id, [id, x](Tape& tp) {
    const Tensor& xin = tp.value(x);
    const Tensor& g = tp.grad(id);
    Tensor& gx = tp.grad(x);
    for (size_t i = 0; i < g.data.size(); ++i)
      if (xin.data[i] > 0.0f) gx.data[i] += g.data[i];
  });
  return id;
}

inline int max_pool2d(Tape& t, int x, int kernel, int stride, int pad) {
  const Tensor& xv = t.value(x);
  detail::check_4d(xv, "max_pool2d");
  const Conv2dSpec s{stride, pad, 1, 1};
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int oh = detail::conv_out_dim(h, kernel, s), ow = detail::conv_out_dim(w, kernel, s);
  Tensor out({n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<int>>(out.numel());
  size_t o = 0;
  for (int nc = 0; nc < n * c; ++nc) {
    const float* plane = xv.data.data() + static_cast<size_t>(nc) * h * w;
    for (int oi = 0; oi < oh; ++oi) {
      for (int oj = 0; oj < ow; ++oj, ++o) {
        float best = -std::numeric_limits<float>::infinity();
        int best_idx = -1;
        for (int ki = 0; ki < kernel; ++ki) {
          const int ih = oi * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          for (int kj = 0; kj < kernel; ++kj) {
            const int iw = oj * stride - pad + kj;
            if (iw < 0 || iw >= w) continue;
            const float v = plane[ih * w + iw];
            if (v > best) {
              best = v;
              best_idx = ih * w + iw;
            }
          }
        }
        out.data[o] = best;
        (*argmax)[o] = nc * h * w + best_idx;
      }
    }
  }
  const int id = t.push(std::move(out));
  detail::set_backward(t, id, [id, x, argmax](Tape& tp) {
    const Tensor& g = tp.grad(id);
    Tensor& gx = tp.grad(x);
    for (size_t i = 0; i < g.data.size(); ++i) gx.data[(*argmax)[i]] += g.data[i];
  });
  return id;
}

/// Average pooling over the valid (in-bounds) part of each window.
inline int avg_pool2d(Tape& t, int x, int kernel, int stride, int pad) {
  const Tensor& xv = t.value(x);
  detail::check_4d(xv, "avg_pool2d");
  const Conv2dSpec s{stride, pad, 1, 1};
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int oh = detail::conv_out_dim(h, kernel, s), ow = detail::conv_out_dim(w, kernel, s);
  Tensor out({n, c, oh, ow});
  size_t o = 0;
  for (int nc = 0; nc < n * c; ++nc) {
    const float* plane = xv.data.data() + static_cast<size_t>(nc) * h * w;
    for (int oi = 0; oi < oh; ++oi) {
      for (int oj = 0; oj < ow; ++oj, ++o) {
        double sum = 0.0;
        int count = 0;
        for (int ki = 0; ki < kernel; ++ki) {
          const int ih = oi * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          for (int kj = 0; kj < kernel; ++kj) {
            const int iw = oj * stride - pad + kj;
            if (iw < 0 || iw >= w) continue;
            sum += plane[ih * w + iw];
            ++count;
          }
        }
        out.data[o] = static_cast<float>(sum / count);
      }
    }
  }
  const int id = t.push(std::move(out));
  detail::set_backward(t, id, [id, x, kernel, stride, pad](Tape& tp) {
    const Tensor& g = tp.grad(id);
    Tensor& gx = tp.grad(x);
    const int n = gx.dim(0), c = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
    const int oh = g.dim(2), ow = g.dim(3);
    size_t o = 0;
    for (int nc = 0; nc < n * c; ++nc) {
      float* gplane = gx.data.data() + static_cast<size_t>(nc) * h * w;
      for (int oi = 0; oi < oh; ++oi) {
        for (int oj = 0; oj < ow; ++oj, ++o) {
          int count = 0;
          for (int ki = 0; ki < kernel; ++ki) {
            const int ih = oi * stride - pad + ki;
            if (ih < 0 || ih >= h) continue;
            for (int kj = 0; kj < kernel; ++kj) {
              const int iw = oj * stride - pad + kj;
              if (iw < 0 || iw >= w) continue;
              ++count;
            }
          }
          const float share = g.data[o] / count;
          for (int ki = 0; ki < kernel; ++ki) {
            const int ih = oi * stride - pad + ki;
            if (ih < 0 || ih >= h) continue;
            for (int kj = 0; kj < kernel; ++kj) {
              const int iw = oj * stride - pad + kj;
              if (iw < 0 || iw >= w) continue;
              gplane[ih * w + iw] += share;
            }
          }
        }
      }
    }
  });
  return id;
}

/// (N,C,H,W) -> (N,C) spatial mean.
inline int global_avg_pool(Tape& t, int x) {
  const Tensor& xv = t.value(x);
  detail::check_4d(xv, "global_avg_pool");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, c});
  for (int i = 0; i < n * c; ++i) {
    double sum = 0.0;
    const float* p = xv.data.data() + static_cast<size_t>(i) * hw;
    for (int j = 0; j < hw; ++j) sum += p[j];
    out.data[i] = static_cast<float>(sum / hw);
  }
  const int id = t.push(std::move(out));
  detail::set_backward(t, id, [id, x, hw](Tape& tp) {
    const Tensor& g = tp.grad(id);
    Tensor& gx = tp.grad(x);
    for (size_t i = 0; i < g.data.size(); ++i) {
      const float share = g.data[i] / hw;
      float* p = gx.data.data() + i * hw;
      for (int j = 0; j < hw; ++j) p[j] += share;
    }
  });
  return id;
}

/// x(N,F) * w(O,F)^T + b(O) -> (N,O)
inline int linear(Tape& t, int x, Param& w, Param& b) {
  const Tensor& xv = t.value(x);
  if (xv.shape.size() != 2) throw std::invalid_argument("linear: expected a 2-d (N,F) input");
  const int n = xv.dim(0), f = xv.dim(1), o = w.value.dim(0);
  if (w.value.dim(1) != f || b.value.dim(0) != o)
    throw std::invalid_argument("linear: weight/bias shape mismatch with input " + Tensor::shape_str(xv.shape));
  Tensor out({n, o});
  for (int ni = 0; ni < n; ++ni) {
    const float* xr = xv.data.data() + static_cast<size_t>(ni) * f;
    for (int oi = 0; oi < o; ++oi) {
      const float* wr = w.value.data.data() + static_cast<size_t>(oi) * f;
      double acc = b.value.data[oi];
      for (int fi = 0; fi < f; ++fi) acc += static_cast<double>(xr[fi]) * wr[fi];
      out.data[static_cast<size_t>(ni) * o + oi] = static_cast<float>(acc);
    }
  }
  const int id = t.push(std::move(out));
  detail::set_backward(t, id, [id, x, wp = &w, bp = &b](Tape& tp) {
    const Tensor& g = tp.grad(id);
    const Tensor& xv = tp.value(x);
    Tensor& gx = tp.grad(x);
    const int n = xv.dim(0), f = xv.dim(1), o = g.dim(1);
    for (int ni = 0; ni < n; ++ni) {
      const float* gr = g.data.data() + static_cast<size_t>(ni) * o;
      const float* xr = xv.data.data() + static_cast<size_t>(ni) * f;
      float* gxr = gx.data.data() + static_cast<size_t>(ni) * f;
      for (int oi = 0; oi < o; ++oi) {
        const float gv = gr[oi];
        const float* wr = wp->value.data.data() + static_cast<size_t>(oi) * f;
        float* gwr = wp->grad.data.data() + static_cast<size_t>(oi) * f;
        for (int fi = 0; fi < f; ++fi) {
          gxr[fi] += gv * wr[fi];
          gwr[fi] += gv * xr[fi];
        }
        bp->grad.data[oi] += gv;
      }
    }
    wp->mark_grad_live();
    bp->mark_grad_live();
  });
  return id;
}

inline int add(Tape& t, int a, int b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv))
    throw std::invalid_argument("add: shape mismatch " + Tensor::shape_str(av.shape) + " vs " +
                                Tensor::shape_str(bv.shape));
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  const int id = t.push(std::move(out));
  detail::set_backward(t, id, [id, a, b](Tape& tp) {
    const Tensor& g = tp.grad(id);
    Tensor& ga = tp.grad(a);
    Tensor& gb = tp.grad(b);
    for (size_t i = 0; i < g.data.size(); ++i) {
      ga.data[i] += g.data[i];
      gb.data[i] += g.data[i];
    }
  });
  return id;
}

/// out = sum_i weights[i] * xs[i]; all inputs must share one shape.
inline int weighted_sum(Tape& t, std::span<const int> xs, std::span<const double> weights) {
  if (xs.empty() || xs.size() != weights.size())
    throw std::invalid_argument("weighted_sum: need matching non-empty inputs and weights");
  const Tensor& first = t.value(xs[0]);
  for (int x : xs)
    if (!t.value(x).same_shape(first))
      throw std::invalid_argument("weighted_sum: shape mismatch " + Tensor::shape_str(t.value(x).shape) + " vs " +
                                  Tensor::shape_str(first.shape));
  Tensor out(first.shape);
  for (size_t i = 0; i < xs.size(); ++i) {
    const float wv = static_cast<float>(weights[i]);
    const Tensor& xv = t.value(xs[i]);
    for (size_t j = 0; j < out.data.size(); ++j) out.data[j] += wv * xv.data[j];
  }
  const int id = t.push(std::move(out));
  detail::set_backward(t, id,
                       [id, xs_v = std::vector<int>(xs.begin(), xs.end()),
                        w_v = std::vector<double>(weights.begin(), weights.end())](Tape& tp) {
                         const Tensor& g = tp.grad(id);
                         for (size_t i = 0; i < xs_v.size(); ++i) {
                           const float wv = static_cast<float>(w_v[i]);
                           Tensor& gx = tp.grad(xs_v[i]);
                           for (size_t j = 0; j < g.data.size(); ++j) gx.data[j] += wv * g.data[j];
                         }
                       });
  return id;
}

inline int concat_channels(Tape& t, std::span<const int> xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const Tensor& first = t.value(xs[0]);
  detail::check_4d(first, "concat_channels");
  int total_c = 0;
  for (int x : xs) {
    const Tensor& v = t.value(x);
    if (v.dim(0) != first.dim(0) || v.dim(2) != first.dim(2) || v.dim(3) != first.dim(3))
      throw std::invalid_argument("concat_channels: incompatible shapes");
    total_c += v.dim(1);
  }
  const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
  Tensor out({n, total_c, h, w});
  const size_t plane = static_cast<size_t>(h) * w;
  for (int ni = 0; ni < n; ++ni) {
    size_t dst_c = 0;
    for (int x : xs) {
      const Tensor& v = t.value(x);
      const int c = v.dim(1);
      std::copy_n(v.data.data() + static_cast<size_t>(ni) * c * plane, static_cast<size_t>(c) * plane,
                  out.data.data() + (static_cast<size_t>(ni) * total_c + dst_c) * plane);
      dst_c += c;
    }
  }
  const int id = t.push(std::move(out));
  detail::set_backward(t, id, [id, xs_v = std::vector<int>(xs.begin(), xs.end()), total_c, plane](Tape& tp) {
    const Tensor& g = tp.grad(id);
    const int n = g.dim(0);
    for (int ni = 0; ni < n; ++ni) {
      size_t src_c = 0;
      for (int x : xs_v) {
        Tensor& gx = tp.grad(x);
        const int c = gx.dim(1);
        const float* src = g.data.data() + (static_cast<size_t>(ni) * total_c + src_c) * plane;
        float* dst = gx.data.data() + static_cast<size_t>(ni) * c * plane;
        for (size_t i = 0; i < static_cast<size_t>(c) * plane; ++i) dst[i] += src[i];
        src_c += c;
      }
    }
  });
  return id;
}

/// Zeros with the spatially strided shape of x; gradient of x is exactly 0.
inline int strided_zeros(Tape& t, int x, int stride) {
  const Tensor& xv = t.value(x);
  detail::check_4d(xv, "strided_zeros");
  const int oh = (xv.dim(2) + stride - 1) / stride, ow = (xv.dim(3) + stride - 1) / stride;
  return t.push(Tensor({xv.dim(0), xv.dim(1), oh, ow}));
}

/// Mean softmax cross-entropy over the batch; returns (scalar node, probs are
/// retained inside the closure).
inline int softmax_cross_entropy(Tape& t, int logits, const std::vector<int>& labels) {
  const Tensor& lv = t.value(logits);
  if (lv.shape.size() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be 2-d (N,K)");
  const int n = lv.dim(0), k = lv.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("softmax_cross_entropy: label count does not match batch size");
  auto probs = std::make_shared<Tensor>(lv.shape);
  double loss = 0.0;
  for (int ni = 0; ni < n; ++ni) {
    const int label = labels[ni];
    if (label < 0 || label >= k) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    const float* row = lv.data.data() + static_cast<size_t>(ni) * k;
    float m = row[0];
    for (int i = 1; i < k; ++i) m = std::max(m, row[i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) sum += std::exp(static_cast<double>(row[i]) - m);
    const double log_z = std::log(sum) + m;
    for (int i = 0; i < k; ++i)
      probs->data[static_cast<size_t>(ni) * k + i] = static_cast<float>(std::exp(row[i] - log_z));
    loss += log_z - row[label];
  }
  Tensor out({1});
  out.data[0] = static_cast<float>(loss / n);
  const int id = t.push(std::move(out));
  detail::set_backward(t, id, [id, logits, labels, probs, n, k](Tape& tp) {
    const float g = tp.grad(id).data[0] / n;
    Tensor& gx = tp.grad(logits);
    for (int ni = 0; ni < n; ++ni)
      for (int i = 0; i < k; ++i) {
        const size_t idx = static_cast<size_t>(ni) * k + i;
        gx.data[idx] += g * (probs->data[idx] - (labels[ni] == i ? 1.0f : 0.0f));
      }
  });
  return id;
}

/// Scalar (sum_i w[i] * x[i]) / numel. Reduction used by gradient tests.
inline int weighted_mean(Tape& t, int x, const std::vector<float>& w) {
  const Tensor& xv = t.value(x);
  if (w.size() != xv.numel()) throw std::invalid_argument("weighted_mean: weight count mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < w.size(); ++i) acc += static_cast<double>(w[i]) * xv.data[i];
  Tensor out({1});
  out.data[0] = static_cast<float>(acc / xv.numel());
  const int id = t.push(std::move(out));
  detail::set_backward(t, id, [id, x, w](Tape& tp) {
    const float g = tp.grad(id).data[0] / w.size();
    Tensor& gx = tp.grad(x);
    for (size_t i = 0; i < w.size(); ++i) gx.data[i] += g * w[i];
  });
  return id;
}

}  // namespace evnas
