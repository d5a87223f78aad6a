#include "ddi/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ddi/parallel.hpp"

namespace ddi {

namespace {

Tensor make_out(Shape shape, std::initializer_list<const Tensor*> inputs) {
  Tensor out(std::move(shape));
  out.set_requires_grad(should_record(inputs));
  return out;
}

void accumulate(std::vector<float>& dst, const std::vector<float>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd bwd) {
  Tensor out = make_out(x.shape(), {&x});
  const float* xv = x.data();
  float* ov = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = fwd(xv[i]);
  if (out.requires_grad()) {
    auto xi = x.impl();
    auto oi = out.impl();
    active_tape()->record(oi, [xi, oi, bwd] {
      auto& dx = xi->grad_buf();
      const auto& dy = oi->grad;
      for (size_t i = 0; i < dx.size(); ++i)
        dx[i] += dy[i] * bwd(xi->data[i], oi->data[i]);
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  DDI_CHECK(a.shape() == b.shape(), "add: shape mismatch ", shape_str(a.shape()),
            " vs ", shape_str(b.shape()));
  Tensor out = make_out(a.shape(), {&a, &b});
  const float* av = a.data();
  const float* bv = b.data();
  float* ov = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_tape()->record(oi, [ai, bi, oi] {
      accumulate(ai->grad_buf(), oi->grad);
      accumulate(bi->grad_buf(), oi->grad);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  DDI_CHECK(a.shape() == b.shape(), "sub: shape mismatch ", shape_str(a.shape()),
            " vs ", shape_str(b.shape()));
  Tensor out = make_out(a.shape(), {&a, &b});
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_tape()->record(oi, [ai, bi, oi] {
      accumulate(ai->grad_buf(), oi->grad);
      auto& db = bi->grad_buf();
      for (size_t i = 0; i < db.size(); ++i) db[i] -= oi->grad[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  DDI_CHECK(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()),
            " vs ", shape_str(b.shape()));
  Tensor out = make_out(a.shape(), {&a, &b});
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_tape()->record(oi, [ai, bi, oi] {
      auto& da = ai->grad_buf();
      auto& db = bi->grad_buf();
      const auto& dy = oi->grad;
      for (size_t i = 0; i < dy.size(); ++i) {
        da[i] += dy[i] * bi->data[i];
        db[i] += dy[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = make_out(a.shape(), {&a});
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * s;
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    active_tape()->record(oi, [ai, oi, s] {
      auto& da = ai->grad_buf();
      for (size_t i = 0; i < da.size(); ++i) da[i] += oi->grad[i] * s;
    });
  }
  return out;
}

Tensor one_minus(const Tensor& a) {
  Tensor out = make_out(a.shape(), {&a});
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = 1.f - a.data()[i];
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    active_tape()->record(oi, [ai, oi] {
      auto& da = ai->grad_buf();
      for (size_t i = 0; i < da.size(); ++i) da[i] -= oi->grad[i];
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](float v) { return v > 0.f ? v : 0.f; },
      [](float xi, float) { return xi > 0.f ? 1.f : 0.f; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, [](float v) { return 1.f / (1.f + std::exp(-v)); },
      [](float, float y) { return y * (1.f - y); });
}

Tensor tanh_act(const Tensor& x) {
  return unary_op(
      x, [](float v) { return std::tanh(v); },
      [](float, float y) { return 1.f - y * y; });
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  DDI_CHECK(shape_numel(new_shape) == x.numel(), "reshape: ", shape_str(x.shape()),
            " to ", shape_str(new_shape), " changes element count");
  Tensor out = make_out(std::move(new_shape), {&x});
  std::memcpy(out.data(), x.data(), sizeof(float) * x.numel());
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    active_tape()->record(oi, [xi, oi] { accumulate(xi->grad_buf(), oi->grad); });
  }
  return out;
}

Tensor flatten2d(const Tensor& x) {
  DDI_CHECK(x.rank() >= 2, "flatten2d needs rank >= 2, got ", shape_str(x.shape()));
  int n = x.dim(0);
  int rest = static_cast<int>(x.numel() / n);
  return reshape(x, {n, rest});
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  DDI_CHECK(!xs.empty(), "concat_channels: empty input list");
  int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int ctotal = 0;
  bool rec = false;
  for (const auto& t : xs) {
    DDI_CHECK(t.rank() == 4 && t.dim(0) == n && t.dim(2) == h && t.dim(3) == w,
              "concat_channels: incompatible shape ", shape_str(t.shape()));
    ctotal += t.dim(1);
    rec = rec || should_record({&t});
  }
  Tensor out({n, ctotal, h, w});
  out.set_requires_grad(rec);
  int64_t plane = static_cast<int64_t>(h) * w;
  for (int ni = 0; ni < n; ++ni) {
    int coff = 0;
    for (const auto& t : xs) {
      int c = t.dim(1);
      std::memcpy(out.data() + (static_cast<int64_t>(ni) * ctotal + coff) * plane,
                  t.data() + static_cast<int64_t>(ni) * c * plane,
                  sizeof(float) * c * plane);
      coff += c;
    }
  }
  if (rec) {
    std::vector<std::shared_ptr<TensorData>> ins;
    ins.reserve(xs.size());
    for (const auto& t : xs) ins.push_back(t.impl());
    auto oi = out.impl();
    active_tape()->record(oi, [ins, oi, n, ctotal, plane] {
      for (int ni = 0; ni < n; ++ni) {
        int coff = 0;
        for (const auto& xi : ins) {
          int c = xi->shape[1];
          auto& dx = xi->grad_buf();
          const float* dy =
              oi->grad.data() + (static_cast<int64_t>(ni) * ctotal + coff) * plane;
          float* dxp = dx.data() + static_cast<int64_t>(ni) * c * plane;
          for (int64_t i = 0; i < c * plane; ++i) dxp[i] += dy[i];
          coff += c;
        }
      }
    });
  }
  return out;
}

Tensor slice_channels(const Tensor& x, int start, int len) {
  DDI_CHECK(x.rank() == 4, "slice_channels: need NCHW, got ", shape_str(x.shape()));
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  DDI_CHECK(start >= 0 && len > 0 && start + len <= c, "slice_channels: [", start,
            ",", start + len, ") out of ", c, " channels");
  Tensor out = make_out({n, len, h, w}, {&x});
  int64_t plane = static_cast<int64_t>(h) * w;
  for (int ni = 0; ni < n; ++ni)
    std::memcpy(out.data() + static_cast<int64_t>(ni) * len * plane,
                x.data() + (static_cast<int64_t>(ni) * c + start) * plane,
                sizeof(float) * len * plane);
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    active_tape()->record(oi, [xi, oi, n, c, start, len, plane] {
      auto& dx = xi->grad_buf();
      for (int ni = 0; ni < n; ++ni) {
        float* dxp = dx.data() + (static_cast<int64_t>(ni) * c + start) * plane;
        const float* dy = oi->grad.data() + static_cast<int64_t>(ni) * len * plane;
        for (int64_t i = 0; i < len * plane; ++i) dxp[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  DDI_CHECK(x.rank() == 2, "slice_cols: need [N,M], got ", shape_str(x.shape()));
  int n = x.dim(0), m = x.dim(1);
  DDI_CHECK(start >= 0 && len > 0 && start + len <= m, "slice_cols: [", start, ",",
            start + len, ") out of ", m, " columns");
  Tensor out = make_out({n, len}, {&x});
  for (int i = 0; i < n; ++i)
    std::memcpy(out.data() + static_cast<int64_t>(i) * len,
                x.data() + static_cast<int64_t>(i) * m + start, sizeof(float) * len);
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    active_tape()->record(oi, [xi, oi, n, m, start, len] {
      auto& dx = xi->grad_buf();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < len; ++j)
          dx[static_cast<size_t>(i) * m + start + j] +=
              oi->grad[static_cast<size_t>(i) * len + j];
    });
  }
  return out;
}

Tensor broadcast_cols(const Tensor& x, int k) {
  DDI_CHECK(x.rank() == 2 && x.dim(1) == 1, "broadcast_cols: need [N,1], got ",
            shape_str(x.shape()));
  DDI_CHECK(k >= 1, "broadcast_cols: k must be >= 1, got ", k);
  int n = x.dim(0);
  Tensor out = make_out({n, k}, {&x});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) out.data()[static_cast<int64_t>(i) * k + j] = x.data()[i];
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    active_tape()->record(oi, [xi, oi, n, k] {
      auto& dx = xi->grad_buf();
      for (int i = 0; i < n; ++i) {
        float acc = 0.f;
        for (int j = 0; j < k; ++j) acc += oi->grad[static_cast<size_t>(i) * k + j];
        dx[i] += acc;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  DDI_CHECK(x.rank() == 2 && w.rank() == 2, "linear: need [N,in] x [out,in], got ",
            shape_str(x.shape()), " and ", shape_str(w.shape()));
  int n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  DDI_CHECK(w.dim(1) == in, "linear: inner dimension mismatch, input ",
            shape_str(x.shape()), " weight ", shape_str(w.shape()));
  if (b.defined())
    DDI_CHECK(b.numel() == out_dim, "linear: bias length ", b.numel(),
              " vs out features ", out_dim);
  Tensor out = b.defined() ? make_out({n, out_dim}, {&x, &w, &b})
                           : make_out({n, out_dim}, {&x, &w});
  const float* xv = x.data();
  const float* wv = w.data();
  float* ov = out.data();
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < out_dim; ++o) {
      float acc = b.defined() ? b.data()[o] : 0.f;
      const float* xr = xv + static_cast<int64_t>(i) * in;
      const float* wr = wv + static_cast<int64_t>(o) * in;
      for (int k = 0; k < in; ++k) acc += xr[k] * wr[k];
      ov[static_cast<int64_t>(i) * out_dim + o] = acc;
    }
  }
  if (out.requires_grad()) {
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    auto bi = b.defined() ? b.impl() : nullptr;
    active_tape()->record(oi, [xi, wi, bi, oi, n, in, out_dim] {
      auto& dx = xi->grad_buf();
      auto& dw = wi->grad_buf();
      const auto& dy = oi->grad;
      for (int i = 0; i < n; ++i) {
        for (int o = 0; o < out_dim; ++o) {
          float g = dy[static_cast<size_t>(i) * out_dim + o];
          if (g == 0.f) continue;
          const float* xr = xi->data.data() + static_cast<int64_t>(i) * in;
          const float* wr = wi->data.data() + static_cast<int64_t>(o) * in;
          float* dxr = dx.data() + static_cast<int64_t>(i) * in;
          float* dwr = dw.data() + static_cast<int64_t>(o) * in;
          for (int k = 0; k < in; ++k) {
            dxr[k] += g * wr[k];
            dwr[k] += g * xr[k];
          }
        }
      }
      if (bi) {
        auto& db = bi->grad_buf();
        for (int i = 0; i < n; ++i)
          for (int o = 0; o < out_dim; ++o)
            db[o] += dy[static_cast<size_t>(i) * out_dim + o];
      }
    });
  }
  return out;
}

namespace {

struct ConvDims {
  int n, ci, h, w, co, kh, kw, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& wgt, int stride, int padding) {
  DDI_CHECK(x.rank() == 4 && wgt.rank() == 4, "conv2d: need NCHW input and OIHW weight, got ",
            shape_str(x.shape()), " and ", shape_str(wgt.shape()));
  DDI_CHECK(stride >= 1, "conv2d: stride must be >= 1, got ", stride);
  DDI_CHECK(padding >= 0, "conv2d: padding must be >= 0, got ", padding);
  ConvDims d;
  d.n = x.dim(0);
  d.ci = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.co = wgt.dim(0);
  d.kh = wgt.dim(2);
  d.kw = wgt.dim(3);
  DDI_CHECK(wgt.dim(1) == d.ci, "conv2d: input channels ", d.ci,
            " vs weight expecting ", wgt.dim(1), " (input ", shape_str(x.shape()),
            ", weight ", shape_str(wgt.shape()), ")");
  d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
  d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
  DDI_CHECK(d.ho > 0 && d.wo > 0, "conv2d: kernel ", d.kh, "x", d.kw,
            " larger than padded input ", shape_str(x.shape()));
  return d;
}

// Valid output-column range for a given kernel column: ix = ox*stride + kx - p
// must land in [0, w).
inline void ox_range(int kx, int p, int stride, int w, int wo, int& lo, int& hi) {
  int shift = kx - p;  // ix at ox = 0
  lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  hi = std::min(wo - 1, (w - 1 - shift) / stride);
}

void conv_forward_channel(const ConvDims& d, int stride, int padding, const float* xv,
                          const float* wv, const float* bias, float* ov, int ni,
                          int co) {
  int64_t plane_in = static_cast<int64_t>(d.h) * d.w;
  int64_t plane_out = static_cast<int64_t>(d.ho) * d.wo;
  float* out_ch = ov + (static_cast<int64_t>(ni) * d.co + co) * plane_out;
  float init = bias ? bias[co] : 0.f;
  for (int64_t i = 0; i < plane_out; ++i) out_ch[i] = init;
  for (int ci = 0; ci < d.ci; ++ci) {
    const float* x_ch = xv + (static_cast<int64_t>(ni) * d.ci + ci) * plane_in;
    const float* w_ch =
        wv + ((static_cast<int64_t>(co) * d.ci + ci) * d.kh) * d.kw;
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        float wval = w_ch[ky * d.kw + kx];
        if (wval == 0.f) continue;
        int oxlo, oxhi;
        ox_range(kx, padding, stride, d.w, d.wo, oxlo, oxhi);
        for (int oy = 0; oy < d.ho; ++oy) {
          int iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= d.h) continue;
          const float* xrow = x_ch + static_cast<int64_t>(iy) * d.w + (kx - padding);
          float* orow = out_ch + static_cast<int64_t>(oy) * d.wo;
          if (stride == 1) {
            for (int ox = oxlo; ox <= oxhi; ++ox) orow[ox] += wval * xrow[ox];
          } else {
            for (int ox = oxlo; ox <= oxhi; ++ox)
              orow[ox] += wval * xrow[static_cast<int64_t>(ox) * stride];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding) {
  ConvDims d = conv_dims(x, w, stride, padding);
  if (bias.defined())
    DDI_CHECK(bias.numel() == d.co, "conv2d: bias length ", bias.numel(),
              " vs output channels ", d.co);
  Tensor out = bias.defined() ? make_out({d.n, d.co, d.ho, d.wo}, {&x, &w, &bias})
                              : make_out({d.n, d.co, d.ho, d.wo}, {&x, &w});
  const float* bv = bias.defined() ? bias.data() : nullptr;
  parallel_for(static_cast<int64_t>(d.n) * d.co, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i)
      conv_forward_channel(d, stride, padding, x.data(), w.data(), bv, out.data(),
                           static_cast<int>(i / d.co), static_cast<int>(i % d.co));
  });

  if (out.requires_grad()) {
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    active_tape()->record(oi, [xi, wi, bi, oi, d, stride, padding] {
      auto& dx = xi->grad_buf();
      auto& dw = wi->grad_buf();
      const auto& dy = oi->grad;
      int64_t plane_in = static_cast<int64_t>(d.h) * d.w;
      int64_t plane_out = static_cast<int64_t>(d.ho) * d.wo;
      for (int ni = 0; ni < d.n; ++ni) {
        for (int co = 0; co < d.co; ++co) {
          const float* dy_ch = dy.data() + (static_cast<int64_t>(ni) * d.co + co) * plane_out;
          for (int ci = 0; ci < d.ci; ++ci) {
            const float* x_ch =
                xi->data.data() + (static_cast<int64_t>(ni) * d.ci + ci) * plane_in;
            float* dx_ch = dx.data() + (static_cast<int64_t>(ni) * d.ci + ci) * plane_in;
            const float* w_ch =
                wi->data.data() + ((static_cast<int64_t>(co) * d.ci + ci) * d.kh) * d.kw;
            float* dw_ch = dw.data() + ((static_cast<int64_t>(co) * d.ci + ci) * d.kh) * d.kw;
            for (int ky = 0; ky < d.kh; ++ky) {
              for (int kx = 0; kx < d.kw; ++kx) {
                float wval = w_ch[ky * d.kw + kx];
                float dwacc = 0.f;
                int oxlo, oxhi;
                ox_range(kx, padding, stride, d.w, d.wo, oxlo, oxhi);
                for (int oy = 0; oy < d.ho; ++oy) {
                  int iy = oy * stride + ky - padding;
                  if (iy < 0 || iy >= d.h) continue;
                  const float* xrow = x_ch + static_cast<int64_t>(iy) * d.w + (kx - padding);
                  float* dxrow = dx_ch + static_cast<int64_t>(iy) * d.w + (kx - padding);
                  const float* dyrow = dy_ch + static_cast<int64_t>(oy) * d.wo;
                  for (int ox = oxlo; ox <= oxhi; ++ox) {
                    float g = dyrow[ox];
                    int64_t ix = static_cast<int64_t>(ox) * stride;
                    dwacc += g * xrow[ix];
                    dxrow[ix] += g * wval;
                  }
                }
                dw_ch[ky * d.kw + kx] += dwacc;
              }
            }
          }
          if (bi) {
            auto& db = bi->grad_buf();
            float acc = 0.f;
            for (int64_t i = 0; i < plane_out; ++i) acc += dy_ch[i];
            db[co] += acc;
          }
        }
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  return conv2d(x, w, Tensor(), stride, padding);
}

Tensor conv2d_masked(const Tensor& x, const Tensor& w, const Tensor& bias,
                     int stride, int padding, const std::vector<uint8_t>& open) {
  DDI_CHECK_T(NonDifferentiableError, !should_record({&x, &w}),
              "conv2d_masked is an inference path and cannot be recorded on a tape");
  ConvDims d = conv_dims(x, w, stride, padding);
  DDI_CHECK(static_cast<int>(open.size()) == d.co, "conv2d_masked: mask length ",
            open.size(), " vs output channels ", d.co);
  Tensor out({d.n, d.co, d.ho, d.wo});
  const float* bv = bias.defined() ? bias.data() : nullptr;
  for (int ni = 0; ni < d.n; ++ni)
    for (int co = 0; co < d.co; ++co)
      if (open[co])
        conv_forward_channel(d, stride, padding, x.data(), w.data(), bv, out.data(),
                             ni, co);
  return out;
}

Tensor avg_pool2d(const Tensor& x, int window, int stride) {
  DDI_CHECK(x.rank() == 4, "avg_pool2d: need NCHW, got ", shape_str(x.shape()));
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  DDI_CHECK(window >= 1 && window <= h && window <= w, "avg_pool2d: window ", window,
            " larger than input ", shape_str(x.shape()));
  DDI_CHECK(stride >= 1, "avg_pool2d: stride must be >= 1");
  int ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  Tensor out = make_out({n, c, ho, wo}, {&x});
  float inv = 1.f / (window * window);
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const float* xp = x.data() + (static_cast<int64_t>(ni) * c + ci) * h * w;
      float* op = out.data() + (static_cast<int64_t>(ni) * c + ci) * ho * wo;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          float acc = 0.f;
          for (int ky = 0; ky < window; ++ky)
            for (int kx = 0; kx < window; ++kx)
              acc += xp[(oy * stride + ky) * w + ox * stride + kx];
          op[oy * wo + ox] = acc * inv;
        }
    }
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    active_tape()->record(oi, [xi, oi, n, c, h, w, ho, wo, window, stride, inv] {
      auto& dx = xi->grad_buf();
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          float* dxp = dx.data() + (static_cast<int64_t>(ni) * c + ci) * h * w;
          const float* dyp = oi->grad.data() + (static_cast<int64_t>(ni) * c + ci) * ho * wo;
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              float g = dyp[oy * wo + ox] * inv;
              for (int ky = 0; ky < window; ++ky)
                for (int kx = 0; kx < window; ++kx)
                  dxp[(oy * stride + ky) * w + ox * stride + kx] += g;
            }
        }
    });
  }
  return out;
}

Tensor max_pool2d(const Tensor& x, int window, int stride) {
  DDI_CHECK(x.rank() == 4, "max_pool2d: need NCHW, got ", shape_str(x.shape()));
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  DDI_CHECK(window >= 1 && window <= h && window <= w, "max_pool2d: window ", window,
            " larger than input ", shape_str(x.shape()));
  DDI_CHECK(stride >= 1, "max_pool2d: stride must be >= 1");
  int ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  Tensor out = make_out({n, c, ho, wo}, {&x});
  // Ties go to the first (row-major) maximal element.
  auto argmax = std::make_shared<std::vector<int32_t>>(out.numel());
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const float* xp = x.data() + (static_cast<int64_t>(ni) * c + ci) * h * w;
      float* op = out.data() + (static_cast<int64_t>(ni) * c + ci) * ho * wo;
      int32_t* ap = argmax->data() + (static_cast<int64_t>(ni) * c + ci) * ho * wo;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          float best = xp[(oy * stride) * w + ox * stride];
          int32_t besti = (oy * stride) * w + ox * stride;
          for (int ky = 0; ky < window; ++ky)
            for (int kx = 0; kx < window; ++kx) {
              int idx = (oy * stride + ky) * w + ox * stride + kx;
              if (xp[idx] > best) {
                best = xp[idx];
                besti = idx;
              }
            }
          op[oy * wo + ox] = best;
          ap[oy * wo + ox] = besti;
        }
    }
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    int64_t planes = static_cast<int64_t>(n) * c;
    int64_t hw = static_cast<int64_t>(h) * w, howo = static_cast<int64_t>(ho) * wo;
    active_tape()->record(oi, [xi, oi, argmax, planes, hw, howo] {
      auto& dx = xi->grad_buf();
      for (int64_t p = 0; p < planes; ++p)
        for (int64_t i = 0; i < howo; ++i)
          dx[p * hw + (*argmax)[p * howo + i]] += oi->grad[p * howo + i];
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  DDI_CHECK(x.rank() == 4, "global_avg_pool: need NCHW, got ", shape_str(x.shape()));
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out = make_out({n, c, 1, 1}, {&x});
  int64_t hw = static_cast<int64_t>(h) * w;
  float inv = 1.f / static_cast<float>(hw);
  for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p) {
    const float* xp = x.data() + p * hw;
    float acc = 0.f;
    for (int64_t i = 0; i < hw; ++i) acc += xp[i];
    out.data()[p] = acc * inv;
  }
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    int64_t planes = static_cast<int64_t>(n) * c;
    active_tape()->record(oi, [xi, oi, planes, hw, inv] {
      auto& dx = xi->grad_buf();
      for (int64_t p = 0; p < planes; ++p) {
        float g = oi->grad[p] * inv;
        float* dxp = dx.data() + p * hw;
        for (int64_t i = 0; i < hw; ++i) dxp[i] += g;
      }
    });
  }
  return out;
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    float momentum, float eps) {
  DDI_CHECK(x.rank() == 4, "batch_norm2d: need NCHW, got ", shape_str(x.shape()));
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  DDI_CHECK(gamma.numel() == c && beta.numel() == c && running_mean.numel() == c &&
                running_var.numel() == c,
            "batch_norm2d: per-channel parameter length mismatch for ", c, " channels");
  DDI_CHECK_T(ModelError, !training || n > 0, "batch_norm2d: zero batch in train mode");
  int64_t hw = static_cast<int64_t>(h) * w;
  int64_t m = static_cast<int64_t>(n) * hw;  // elements per channel

  std::vector<float> mean_c(c), invstd_c(c);
  if (training) {
    for (int ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const float* xp = x.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) acc += xp[i];
      }
      float mu = static_cast<float>(acc / m);
      double vacc = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const float* xp = x.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          float d = xp[i] - mu;
          vacc += static_cast<double>(d) * d;
        }
      }
      float var = static_cast<float>(vacc / m);
      mean_c[ci] = mu;
      invstd_c[ci] = 1.f / std::sqrt(var + eps);
      float unbiased = m > 1 ? static_cast<float>(vacc / (m - 1)) : var;
      running_mean.data()[ci] = (1.f - momentum) * running_mean.data()[ci] + momentum * mu;
      running_var.data()[ci] = (1.f - momentum) * running_var.data()[ci] + momentum * unbiased;
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mean_c[ci] = running_mean.data()[ci];
      invstd_c[ci] = 1.f / std::sqrt(running_var.data()[ci] + eps);
    }
  }

  Tensor out = make_out(x.shape(), {&x, &gamma, &beta});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const float* xp = x.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
      float* op = out.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
      float g = gamma.data()[ci], b = beta.data()[ci], mu = mean_c[ci],
            is = invstd_c[ci];
      for (int64_t i = 0; i < hw; ++i) op[i] = (xp[i] - mu) * is * g + b;
    }

  if (out.requires_grad()) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    auto mean_s = std::make_shared<std::vector<float>>(std::move(mean_c));
    auto invstd_s = std::make_shared<std::vector<float>>(std::move(invstd_c));
    active_tape()->record(oi, [xi, gi, bi, oi, mean_s, invstd_s, n, c, hw, m, training] {
      auto& dx = xi->grad_buf();
      auto& dgamma = gi->grad_buf();
      auto& dbeta = bi->grad_buf();
      const auto& dy = oi->grad;
      for (int ci = 0; ci < c; ++ci) {
        float mu = (*mean_s)[ci], is = (*invstd_s)[ci], g = gi->data[ci];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int ni = 0; ni < n; ++ni) {
          int64_t base = (static_cast<int64_t>(ni) * c + ci) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            float xhat = (xi->data[base + i] - mu) * is;
            sum_dy += dy[base + i];
            sum_dy_xhat += static_cast<double>(dy[base + i]) * xhat;
          }
        }
        dbeta[ci] += static_cast<float>(sum_dy);
        dgamma[ci] += static_cast<float>(sum_dy_xhat);
        if (training) {
          float mean_dy = static_cast<float>(sum_dy / m);
          float mean_dy_xhat = static_cast<float>(sum_dy_xhat / m);
          for (int ni = 0; ni < n; ++ni) {
            int64_t base = (static_cast<int64_t>(ni) * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              float xhat = (xi->data[base + i] - mu) * is;
              dx[base + i] += g * is * (dy[base + i] - mean_dy - xhat * mean_dy_xhat);
            }
          }
        } else {
          float k = g * is;
          for (int ni = 0; ni < n; ++ni) {
            int64_t base = (static_cast<int64_t>(ni) * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) dx[base + i] += k * dy[base + i];
          }
        }
      }
    });
  }
  return out;
}

Tensor scale_channels(const Tensor& x, const Tensor& g) {
  DDI_CHECK(x.rank() == 4, "scale_channels: need NCHW input, got ", shape_str(x.shape()));
  DDI_CHECK(g.rank() == 2 && g.dim(0) == x.dim(0) &&
                (g.dim(1) == x.dim(1) || g.dim(1) == 1),
            "scale_channels: gate shape ", shape_str(g.shape()), " incompatible with ",
            shape_str(x.shape()));
  int n = x.dim(0), c = x.dim(1);
  int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  bool broadcast = g.dim(1) == 1;
  Tensor out = make_out(x.shape(), {&x, &g});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      float gv = g.data()[static_cast<int64_t>(ni) * g.dim(1) + (broadcast ? 0 : ci)];
      const float* xp = x.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
      float* op = out.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
      for (int64_t i = 0; i < hw; ++i) op[i] = xp[i] * gv;
    }
  if (out.requires_grad()) {
    auto xi = x.impl(), gi = g.impl(), oi = out.impl();
    int gcols = g.dim(1);
    active_tape()->record(oi, [xi, gi, oi, n, c, hw, gcols, broadcast] {
      auto& dx = xi->grad_buf();
      auto& dg = gi->grad_buf();
      const auto& dy = oi->grad;
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          int64_t gidx = static_cast<int64_t>(ni) * gcols + (broadcast ? 0 : ci);
          float gv = gi->data[gidx];
          int64_t base = (static_cast<int64_t>(ni) * c + ci) * hw;
          float acc = 0.f;
          for (int64_t i = 0; i < hw; ++i) {
            dx[base + i] += dy[base + i] * gv;
            acc += dy[base + i] * xi->data[base + i];
          }
          dg[gidx] += acc;
        }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out = make_out({1}, {&x});
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  out.data()[0] = static_cast<float>(acc);
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    active_tape()->record(oi, [xi, oi] {
      auto& dx = xi->grad_buf();
      float g = oi->grad[0];
      for (auto& v : dx) v += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.f / x.numel()); }

Tensor dot_const(const Tensor& x, const std::vector<float>& w) {
  DDI_CHECK(static_cast<int64_t>(w.size()) == x.numel(), "dot_const: weight count ",
            w.size(), " vs tensor of ", x.numel(), " elements");
  Tensor out = make_out({1}, {&x});
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(x.data()[i]) * w[i];
  out.data()[0] = static_cast<float>(acc);
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    auto ws = std::make_shared<std::vector<float>>(w);
    active_tape()->record(oi, [xi, oi, ws] {
      auto& dx = xi->grad_buf();
      float g = oi->grad[0];
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += g * (*ws)[i];
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  DDI_CHECK(logits.rank() == 2, "softmax_cross_entropy: need [N,K] logits, got ",
            shape_str(logits.shape()));
  int n = logits.dim(0), k = logits.dim(1);
  DDI_CHECK(static_cast<int>(labels.size()) == n, "softmax_cross_entropy: ",
            labels.size(), " labels for batch of ", n);
  for (int i = 0; i < n; ++i)
    DDI_CHECK_T(ModelError, labels[i] >= 0 && labels[i] < k, "label ", labels[i],
                " out of range [0,", k, ") at row ", i);

  auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(n) * k);
  double loss_acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* row = logits.data() + static_cast<int64_t>(i) * k;
    float mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    double logz = std::log(z) + mx;
    for (int j = 0; j < k; ++j)
      (*probs)[static_cast<size_t>(i) * k + j] =
          static_cast<float>(std::exp(static_cast<double>(row[j]) - logz));
    loss_acc += logz - row[labels[i]];
  }
  Tensor out = make_out({1}, {&logits});
  out.data()[0] = static_cast<float>(loss_acc / n);
  if (out.requires_grad()) {
    auto li = logits.impl(), oi = out.impl();
    auto lbl = std::make_shared<std::vector<int>>(labels);
    active_tape()->record(oi, [li, oi, probs, lbl, n, k] {
      auto& dx = li->grad_buf();
      float g = oi->grad[0] / n;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
          float p = (*probs)[static_cast<size_t>(i) * k + j];
          float onehot = (j == (*lbl)[i]) ? 1.f : 0.f;
          dx[static_cast<size_t>(i) * k + j] += g * (p - onehot);
        }
    });
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  DDI_CHECK(logits.rank() == 2, "argmax_rows: need [N,K], got ", shape_str(logits.shape()));
  int n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) {
    const float* row = logits.data() + static_cast<int64_t>(i) * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out[i] = best;
  }
  return out;
}

std::vector<float> softmax_row(const Tensor& logits, int row) {
  int k = logits.dim(1);
  const float* r = logits.data() + static_cast<int64_t>(row) * k;
  float mx = r[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, r[j]);
  double z = 0.0;
  for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(r[j]) - mx);
  std::vector<float> out(k);
  for (int j = 0; j < k; ++j)
    out[j] = static_cast<float>(std::exp(static_cast<double>(r[j]) - mx) / z);
  return out;
}

}  // namespace ddi
