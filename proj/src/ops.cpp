#include "magnifier/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gemm.hpp"
#include "magnifier/errors.hpp"

namespace magnifier {

namespace {

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T>
Var<T> unary(Var<T> a, Tensor<T> out,
             std::function<void(const Tensor<T>& g, const Tensor<T>& x, const Tensor<T>& y,
                                Tensor<T>& dx)>
                 local) {
  return a.tape->record(std::move(out), {a},
                        [id = a.id, local = std::move(local)](Tape<T>& t, std::size_t self) {
                          local(*t.grad_of(self), t.value(id), t.value(self), t.grad_buffer(id));
                        });
}

template <typename T>
void im2col(const T* x, std::size_t n, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho,
            std::size_t wo, T* cols) {
  const std::size_t p = ho * wo;
  const std::size_t np = n * p;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* dst = cols + ((ci * kh + ki) * kw + kj) * np;
        for (std::size_t b = 0; b < n; ++b) {
          const T* plane = x + (b * c + ci) * h * w;
          T* row = dst + b * p;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * stride + ki) -
                            static_cast<std::ptrdiff_t>(pad);
            T* out = row + oh * wo;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) {
              std::fill(out, out + wo, T{0});
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(ih) * w;
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kj) -
                              static_cast<std::ptrdiff_t>(pad);
              out[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w))
                            ? T{0}
                            : src[static_cast<std::size_t>(iw)];
            }
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, std::size_t n, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho,
            std::size_t wo, T* dx) {
  const std::size_t p = ho * wo;
  const std::size_t np = n * p;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* src = cols + ((ci * kh + ki) * kw + kj) * np;
        for (std::size_t b = 0; b < n; ++b) {
          T* plane = dx + (b * c + ci) * h * w;
          const T* row = src + b * p;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * stride + ki) -
                            static_cast<std::ptrdiff_t>(pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
            T* dst = plane + static_cast<std::size_t>(ih) * w;
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kj) -
                              static_cast<std::ptrdiff_t>(pad);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[static_cast<std::size_t>(iw)] += row[oh * wo + ow];
            }
          }
        }
      }
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.tape->record(std::move(out), {a, b},
                        [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
                          const auto& g = *t.grad_of(self);
                          if (t.requires_grad(ia)) accumulate(t.grad_buffer(ia), g);
                          if (t.requires_grad(ib)) accumulate(t.grad_buffer(ib), g);
                        });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b},
                        [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
                          const auto& g = *t.grad_of(self);
                          if (t.requires_grad(ia)) accumulate(t.grad_buffer(ia), g);
                          if (t.requires_grad(ib)) {
                            auto d = t.grad_buffer(ib).data();
                            auto gs = g.data();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gs[i];
                          }
                        });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b},
                        [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
                          auto g = t.grad_of(self)->data();
                          if (t.requires_grad(ia)) {
                            auto d = t.grad_buffer(ia).data();
                            auto y = t.value(ib).data();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * y[i];
                          }
                          if (t.requires_grad(ib)) {
                            auto d = t.grad_buffer(ib).data();
                            auto x = t.value(ia).data();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * x[i];
                          }
                        });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return unary<T>(a, std::move(out),
                  [s](const Tensor<T>& g, const Tensor<T>&, const Tensor<T>&, Tensor<T>& dx) {
                    auto d = dx.data();
                    auto gs = g.data();
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * gs[i];
                  });
}

template <typename T>
Var<T> one_minus(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = T{1} - v;
  return unary<T>(a, std::move(out),
                  [](const Tensor<T>& g, const Tensor<T>&, const Tensor<T>&, Tensor<T>& dx) {
                    auto d = dx.data();
                    auto gs = g.data();
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gs[i];
                  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  double margin = std::numeric_limits<double>::infinity();
  for (auto& v : out.data()) {
    margin = std::min(margin, static_cast<double>(std::abs(v)));
    v = v > T{0} ? v : T{0};
  }
  a.tape->note_kink(margin);
  return unary<T>(a, std::move(out),
                  [](const Tensor<T>& g, const Tensor<T>& x, const Tensor<T>&, Tensor<T>& dx) {
                    auto d = dx.data();
                    auto gs = g.data();
                    auto xs = x.data();
                    for (std::size_t i = 0; i < d.size(); ++i)
                      if (xs[i] > T{0}) d[i] += gs[i];
                  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data())
    v = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
  return unary<T>(a, std::move(out),
                  [](const Tensor<T>& g, const Tensor<T>&, const Tensor<T>& y, Tensor<T>& dx) {
                    auto d = dx.data();
                    auto gs = g.data();
                    auto ys = y.data();
                    for (std::size_t i = 0; i < d.size(); ++i)
                      d[i] += gs[i] * ys[i] * (T{1} - ys[i]);
                  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return unary<T>(a, std::move(out),
                  [](const Tensor<T>& g, const Tensor<T>&, const Tensor<T>& y, Tensor<T>& dx) {
                    auto d = dx.data();
                    auto gs = g.data();
                    auto ys = y.data();
                    for (std::size_t i = 0; i < d.size(); ++i)
                      d[i] += gs[i] * (T{1} - ys[i] * ys[i]);
                  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (auto v : a.value().data()) s += v;
  return unary<T>(a, Tensor<T>::scalar(s),
                  [](const Tensor<T>& g, const Tensor<T>&, const Tensor<T>&, Tensor<T>& dx) {
                    const T gv = g[0];
                    for (auto& d : dx.data()) d += gv;
                  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const auto n = static_cast<T>(a.value().size());
  T s{0};
  for (auto v : a.value().data()) s += v;
  return unary<T>(a, Tensor<T>::scalar(s / n),
                  [n](const Tensor<T>& g, const Tensor<T>&, const Tensor<T>&, Tensor<T>& dx) {
                    const T gv = g[0] / n;
                    for (auto& d : dx.data()) d += gv;
                  });
}

template <typename T>
Var<T> weighted_sum(std::span<const Var<T>> scalars, std::span<const T> weights) {
  if (scalars.empty()) throw ContractError("weighted_sum: no terms");
  if (scalars.size() != weights.size())
    throw DimensionError("weighted_sum: " + std::to_string(scalars.size()) + " terms but " +
                         std::to_string(weights.size()) + " weights");
  T s{0};
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].value().size() != 1)
      throw DimensionError("weighted_sum: term " + std::to_string(i) + " is not scalar");
    s += weights[i] * scalars[i].value()[0];
    ids.push_back(scalars[i].id);
  }
  std::vector<T> w(weights.begin(), weights.end());
  return scalars[0].tape->record(Tensor<T>::scalar(s), scalars,
                                 [ids, w](Tape<T>& t, std::size_t self) {
                                   const T g = (*t.grad_of(self))[0];
                                   for (std::size_t i = 0; i < ids.size(); ++i)
                                     if (t.requires_grad(ids[i])) t.grad_buffer(ids[i])[0] += w[i] * g;
                                 });
}

namespace {

template <typename T>
Var<T> linear_impl(Var<T> x, Var<T> w, const Var<T>* b) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(w.shape(), 2, "linear weight");
  const std::size_t batch = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  if (w.shape()[1] != in)
    throw DimensionError("linear: input features (axis 1) " + std::to_string(in) +
                         " != weight axis 1 " + std::to_string(w.shape()[1]));
  if (b) {
    require_rank(b->shape(), 1, "linear bias");
    if (b->shape()[0] != out_dim)
      throw DimensionError("linear: bias axis 0 does not match weight axis 0");
  }
  Tensor<T> y(Shape{batch, out_dim});
  detail::gemm_nt(batch, out_dim, in, x.value().data().data(), w.value().data().data(),
                  y.data().data());
  if (b) {
    auto bv = b->value().data();
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t o = 0; o < out_dim; ++o) y[i * out_dim + o] += bv[o];
  }
  const bool has_b = b != nullptr;
  const std::size_t ib = has_b ? b->id : 0;
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return x.tape->record(
      std::move(y), inputs,
      [ix = x.id, iw = w.id, ib, has_b, batch, in, out_dim](Tape<T>& t, std::size_t self) {
        const T* g = t.grad_of(self)->data().data();
        if (t.requires_grad(ix))
          detail::gemm_nn(batch, in, out_dim, g, t.value(iw).data().data(),
                          t.grad_buffer(ix).data().data());
        if (t.requires_grad(iw))
          detail::gemm_tn(out_dim, in, batch, g, t.value(ix).data().data(),
                          t.grad_buffer(iw).data().data());
        if (has_b && t.requires_grad(ib)) {
          auto db = t.grad_buffer(ib).data();
          for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t o = 0; o < out_dim; ++o) db[o] += g[i * out_dim + o];
        }
      });
}

}  // namespace

template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  return linear_impl<T>(x, w, nullptr);
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return linear_impl<T>(x, w, &b);
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const std::size_t batch = parts[0].shape().at(0);
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    require_rank(parts[i].shape(), 2, "concat input");
    if (parts[i].shape()[0] != batch)
      throw DimensionError("concat: input " + std::to_string(i) + " differs on axis 0");
    widths.push_back(parts[i].shape()[1]);
    ids.push_back(parts[i].id);
    total += widths.back();
  }
  Tensor<T> out(Shape{batch, total});
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& v = parts[i].value();
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(v.data().data() + b * widths[i], widths[i],
                  out.data().data() + b * total + off);
    off += widths[i];
  }
  return parts[0].tape->record(std::move(out), parts,
                               [ids, widths, batch, total](Tape<T>& t, std::size_t self) {
                                 const T* g = t.grad_of(self)->data().data();
                                 std::size_t off = 0;
                                 for (std::size_t i = 0; i < ids.size(); ++i) {
                                   if (t.requires_grad(ids[i])) {
                                     T* d = t.grad_buffer(ids[i]).data().data();
                                     for (std::size_t b = 0; b < batch; ++b)
                                       for (std::size_t j = 0; j < widths[i]; ++j)
                                         d[b * widths[i] + j] += g[b * total + off + j];
                                   }
                                   off += widths[i];
                                 }
                               });
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride,
              std::size_t padding) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  require_rank(bias.shape(), 1, "conv2d bias");
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const std::size_t co = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != c)
    throw DimensionError("conv2d: input channels (input axis 1) " + std::to_string(c) +
                         " != weight axis 1 " + std::to_string(ws[1]));
  if (bias.shape()[0] != co)
    throw DimensionError("conv2d: bias axis 0 " + std::to_string(bias.shape()[0]) +
                         " != weight axis 0 " + std::to_string(co));
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (h + 2 * padding < kh || w + 2 * padding < kw)
    throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds padded input on axes 2/3");
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t p = ho * wo, np = n * p, ck = c * kh * kw;

  std::vector<T> cols(ck * np);
  im2col(input.value().data().data(), n, c, h, w, kh, kw, stride, padding, ho, wo, cols.data());
  std::vector<T> tmp(co * np, T{0});
  detail::gemm_nn(co, np, ck, weight.value().data().data(), cols.data(), tmp.data());

  Tensor<T> out(Shape{n, co, ho, wo});
  auto bv = bias.value().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o) {
      const T* src = tmp.data() + o * np + b * p;
      T* dst = out.data().data() + (b * co + o) * p;
      for (std::size_t q = 0; q < p; ++q) dst[q] = src[q] + bv[o];
    }

  return input.tape->record(
      std::move(out), {input, weight, bias},
      [ix = input.id, iw = weight.id, ibias = bias.id, n, c, h, w, co, kh, kw, stride, padding,
       ho, wo](Tape<T>& t, std::size_t self) {
        const std::size_t p = ho * wo, np = n * p, ck = c * kh * kw;
        const T* g = t.grad_of(self)->data().data();
        std::vector<T> gt(co * np);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t o = 0; o < co; ++o)
            std::copy_n(g + (b * co + o) * p, p, gt.data() + o * np + b * p);
        if (t.requires_grad(ibias)) {
          auto db = t.grad_buffer(ibias).data();
          for (std::size_t o = 0; o < co; ++o) {
            T s{0};
            for (std::size_t q = 0; q < np; ++q) s += gt[o * np + q];
            db[o] += s;
          }
        }
        const bool need_w = t.requires_grad(iw), need_x = t.requires_grad(ix);
        if (!need_w && !need_x) return;
        std::vector<T> cols(ck * np);
        if (need_w) {
          im2col(t.value(ix).data().data(), n, c, h, w, kh, kw, stride, padding, ho, wo,
                 cols.data());
          detail::gemm_nt(co, ck, np, gt.data(), cols.data(), t.grad_buffer(iw).data().data());
        }
        if (need_x) {
          std::fill(cols.begin(), cols.end(), T{0});
          detail::gemm_tn(ck, np, co, t.value(iw).data().data(), gt.data(), cols.data());
          col2im(cols.data(), n, c, h, w, kh, kw, stride, padding, ho, wo,
                 t.grad_buffer(ix).data().data());
        }
      });
}

template <typename T>
Var<T> batchnorm(Var<T> input, Var<T> scale, Var<T> shift, BatchNormStats<T>& stats,
                 BnMode mode, T momentum, T eps) {
  const auto& s = input.shape();
  if (s.size() != 2 && s.size() != 4)
    throw DimensionError("batchnorm: expected rank 2 or 4 input, got " + shape_str(s));
  if (!(eps > T{0})) throw ConfigError("batchnorm: eps must be positive");
  const std::size_t n = s[0], c = s[1], inner = s.size() == 4 ? s[2] * s[3] : 1;
  require_rank(scale.shape(), 1, "batchnorm scale");
  require_rank(shift.shape(), 1, "batchnorm shift");
  if (scale.shape()[0] != c || shift.shape()[0] != c)
    throw DimensionError("batchnorm: scale/shift axis 0 must match input axis 1 (" +
                         std::to_string(c) + ")");
  if (stats.running_mean.size() != c || stats.running_var.size() != c)
    throw DimensionError("batchnorm: running statistics do not match input axis 1");

  const std::size_t m = n * inner;
  const T* x = input.value().data().data();
  const T* gamma = scale.value().data().data();
  const T* beta = shift.value().data().data();
  Tensor<T> out(s);
  T* y = out.data().data();
  // Per-channel normalized input and inverse std, reused by backward.
  std::vector<T> xhat(input.value().size());
  std::vector<T> inv_std(c);

  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (mode == BnMode::kTrain) {
      T acc{0};
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t q = 0; q < inner; ++q) acc += x[(b * c + ch) * inner + q];
      mu = acc / static_cast<T>(m);
      T sq{0};
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t q = 0; q < inner; ++q) {
          const T d = x[(b * c + ch) * inner + q] - mu;
          sq += d * d;
        }
      var = sq / static_cast<T>(m);
      const T unbiased = m > 1 ? sq / static_cast<T>(m - 1) : var;
      stats.running_mean[ch] = (T{1} - momentum) * stats.running_mean[ch] + momentum * mu;
      stats.running_var[ch] = (T{1} - momentum) * stats.running_var[ch] + momentum * unbiased;
    } else {
      mu = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    inv_std[ch] = T{1} / std::sqrt(var + eps);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t q = 0; q < inner; ++q) {
        const std::size_t i = (b * c + ch) * inner + q;
        xhat[i] = (x[i] - mu) * inv_std[ch];
        y[i] = gamma[ch] * xhat[i] + beta[ch];
      }
  }

  return input.tape->record(
      std::move(out), {input, scale, shift},
      [ix = input.id, ig = scale.id, ibeta = shift.id, n, c, inner, m, mode,
       xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        const T* g = t.grad_of(self)->data().data();
        const T* gamma = t.value(ig).data().data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_g{0}, sum_gx{0};
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t q = 0; q < inner; ++q) {
              const std::size_t i = (b * c + ch) * inner + q;
              sum_g += g[i];
              sum_gx += g[i] * xhat[i];
            }
          if (t.requires_grad(ig)) t.grad_buffer(ig)[ch] += sum_gx;
          if (t.requires_grad(ibeta)) t.grad_buffer(ibeta)[ch] += sum_g;
          if (!t.requires_grad(ix)) continue;
          T* dx = t.grad_buffer(ix).data().data();
          const T k = gamma[ch] * inv_std[ch];
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t q = 0; q < inner; ++q) {
              const std::size_t i = (b * c + ch) * inner + q;
              if (mode == BnMode::kTrain)
                dx[i] += k * (g[i] - sum_g / static_cast<T>(m) -
                              xhat[i] * sum_gx / static_cast<T>(m));
              else
                dx[i] += k * g[i];
            }
        }
      });
}

template <typename T>
Var<T> global_max_pool(Var<T> input) {
  require_rank(input.shape(), 4, "global_max_pool input");
  const auto& s = input.shape();
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  const T* x = input.value().data().data();
  Tensor<T> out(Shape{n, c});
  std::vector<std::size_t> argmax(n * c);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const T* plane = x + nc * hw;
    std::size_t best = 0;
    for (std::size_t q = 1; q < hw; ++q)
      if (plane[q] > plane[best]) best = q;
    argmax[nc] = best;
    out[nc] = plane[best];
    if (hw > 1) {
      T second = -std::numeric_limits<T>::infinity();
      for (std::size_t q = 0; q < hw; ++q)
        if (q != best) second = std::max(second, plane[q]);
      // Ties among exact zeros come from masked or rectified positions whose
      // values cannot move under small input perturbations.
      if (!(plane[best] == T{0} && second == T{0}))
        margin = std::min(margin, static_cast<double>(plane[best] - second));
    }
  }
  input.tape->note_kink(margin);
  return input.tape->record(std::move(out), {input},
                            [ix = input.id, hw, argmax = std::move(argmax)](Tape<T>& t,
                                                                             std::size_t self) {
                              const T* g = t.grad_of(self)->data().data();
                              T* dx = t.grad_buffer(ix).data().data();
                              for (std::size_t nc = 0; nc < argmax.size(); ++nc)
                                dx[nc * hw + argmax[nc]] += g[nc];
                            });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const std::size_t> targets) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy logits");
  const std::size_t b = logits.shape()[0], c = logits.shape()[1];
  if (targets.size() != b)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for batch axis 0 of " + std::to_string(b));
  for (auto tgt : targets)
    if (tgt >= c)
      throw IndexError("softmax_cross_entropy: target " + std::to_string(tgt) +
                       " outside [0," + std::to_string(c) + ")");
  const T* z = logits.value().data().data();
  std::vector<T> prob(b * c);
  T loss{0};
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = z + i * c;
    const T mx = *std::max_element(row, row + c);
    T denom{0};
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    const T log_denom = std::log(denom);
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] = std::exp(row[j] - mx - log_denom);
    loss += -(row[targets[i]] - mx - log_denom);
  }
  loss /= static_cast<T>(b);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return logits.tape->record(Tensor<T>::scalar(loss), {logits},
                             [iz = logits.id, b, c, prob = std::move(prob),
                              tg = std::move(tg)](Tape<T>& t, std::size_t self) {
                               const T g = (*t.grad_of(self))[0] / static_cast<T>(b);
                               T* dz = t.grad_buffer(iz).data().data();
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   dz[i * c + j] +=
                                       g * (prob[i * c + j] - (j == tg[i] ? T{1} : T{0}));
                             });
}

template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& targets) {
  require_same_shape(logits.shape(), targets.shape(), "bce_with_logits");
  for (auto v : targets.data())
    if (!(v >= T{0} && v <= T{1}))
      throw ContractError("bce_with_logits: targets must lie in [0,1]");
  const T* z = logits.value().data().data();
  const T* y = targets.data().data();
  const std::size_t n = targets.size();
  T loss{0};
  for (std::size_t i = 0; i < n; ++i)
    loss += std::max(z[i], T{0}) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
  loss /= static_cast<T>(n);
  return logits.tape->record(
      Tensor<T>::scalar(loss), {logits},
      [iz = logits.id, targets, n](Tape<T>& t, std::size_t self) {
        const T g = (*t.grad_of(self))[0] / static_cast<T>(n);
        const T* z = t.value(iz).data().data();
        T* dz = t.grad_buffer(iz).data().data();
        for (std::size_t i = 0; i < n; ++i) {
          const T sig = z[i] >= T{0} ? T{1} / (T{1} + std::exp(-z[i]))
                                     : std::exp(z[i]) / (T{1} + std::exp(z[i]));
          dz[i] += g * (sig - targets[i]);
        }
      });
}

template <typename T>
Var<T> gru_cell_step(Var<T> x, Var<T> h_prev, const GruWeights<T>& w) {
  require_rank(x.shape(), 2, "gru_cell_step x");
  require_rank(h_prev.shape(), 2, "gru_cell_step h_prev");
  if (x.shape()[0] != h_prev.shape()[0])
    throw DimensionError("gru_cell_step: x and h_prev differ on batch axis 0");
  const std::size_t in = x.shape()[1], hd = h_prev.shape()[1];
  auto check = [&](Var<T> v, std::size_t cols, const char* name) {
    const Shape want = cols ? Shape{hd, cols} : Shape{hd};
    require_same_shape(v.shape(), want, name);
  };
  check(w.w_z, in, "gru_cell_step W_z");
  check(w.w_r, in, "gru_cell_step W_r");
  check(w.w_h, in, "gru_cell_step W_h");
  check(w.u_z, hd, "gru_cell_step U_z");
  check(w.u_r, hd, "gru_cell_step U_r");
  check(w.u_h, hd, "gru_cell_step U_h");
  check(w.b_z, 0, "gru_cell_step b_z");
  check(w.b_r, 0, "gru_cell_step b_r");
  check(w.b_h, 0, "gru_cell_step b_h");

  auto z = sigmoid(add(linear(x, w.w_z, w.b_z), linear(h_prev, w.u_z)));
  auto r = sigmoid(add(linear(x, w.w_r, w.b_r), linear(h_prev, w.u_r)));
  auto cand = tanh(add(linear(x, w.w_h, w.b_h), linear(mul(r, h_prev), w.u_h)));
  return add(mul(one_minus(z), h_prev), mul(z, cand));
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  if (input.rank() < 2)
    throw DimensionError("bilinear_resize: input needs at least two axes, got " +
                         shape_str(input.shape()));
  if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: output size must be >= 1");
  const auto& s = input.shape();
  const std::size_t in_h = s[s.size() - 2], in_w = s[s.size() - 1];
  if (in_h == out_h && in_w == out_w) return input;
  const std::size_t planes = input.size() / (in_h * in_w);
  Shape os = s;
  os[os.size() - 2] = out_h;
  os[os.size() - 1] = out_w;
  Tensor<T> out(os);

  struct Tap {
    std::size_t i0, i1;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t outn) {
    std::vector<Tap> v(outn);
    const double ratio = static_cast<double>(in) / static_cast<double>(outn);
    for (std::size_t d = 0; d < outn; ++d) {
      double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const auto i1 = std::min(i0 + 1, in - 1);
      v[d] = Tap{i0, i1, src - static_cast<double>(i0)};
    }
    return v;
  };
  const auto ty = taps(in_h, out_h);
  const auto tx = taps(in_w, out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = input.data().data() + p * in_h * in_w;
    T* dst = out.data().data() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& a = ty[y];
        const auto& b = tx[x];
        const double top = (1.0 - b.frac) * src[a.i0 * in_w + b.i0] + b.frac * src[a.i0 * in_w + b.i1];
        const double bot = (1.0 - b.frac) * src[a.i1 * in_w + b.i0] + b.frac * src[a.i1 * in_w + b.i1];
        dst[y * out_w + x] = static_cast<T>((1.0 - a.frac) * top + a.frac * bot);
      }
  }
  return out;
}

#define MAGNIFIER_INSTANTIATE_OPS(T)                                                         \
  template Var<T> add(Var<T>, Var<T>);                                                      \
  template Var<T> sub(Var<T>, Var<T>);                                                      \
  template Var<T> mul(Var<T>, Var<T>);                                                      \
  template Var<T> scale(Var<T>, T);                                                         \
  template Var<T> one_minus(Var<T>);                                                        \
  template Var<T> relu(Var<T>);                                                             \
  template Var<T> sigmoid(Var<T>);                                                          \
  template Var<T> tanh(Var<T>);                                                             \
  template Var<T> sum(Var<T>);                                                              \
  template Var<T> mean(Var<T>);                                                             \
  template Var<T> weighted_sum(std::span<const Var<T>>, std::span<const T>);                \
  template Var<T> linear(Var<T>, Var<T>);                                                   \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                           \
  template Var<T> concat(std::span<const Var<T>>);                                          \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);                 \
  template Var<T> batchnorm(Var<T>, Var<T>, Var<T>, BatchNormStats<T>&, BnMode, T, T);      \
  template Var<T> global_max_pool(Var<T>);                                                  \
  template Var<T> softmax_cross_entropy(Var<T>, std::span<const std::size_t>);              \
  template Var<T> bce_with_logits(Var<T>, const Tensor<T>&);                                \
  template Var<T> gru_cell_step(Var<T>, Var<T>, const GruWeights<T>&);                      \
  template Tensor<T> bilinear_resize(const Tensor<T>&, std::size_t, std::size_t);

MAGNIFIER_INSTANTIATE_OPS(float)
MAGNIFIER_INSTANTIATE_OPS(double)

}  // namespace magnifier
