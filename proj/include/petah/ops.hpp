#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "petah/autograd.hpp"
#include "petah/tensor.hpp"

// Differentiable tensor operations. Each op validates shapes and finiteness at
// its boundary, computes the forward value, and (when a tape is given and the
// result requires gradients) records a backward step. Reduction orders are
// fixed so results are bitwise reproducible.

namespace petah {
namespace detail {

// C += A * B, A: m x k, B: k x n.
template <typename S>
void mm_nn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<std::int64_t>(i) * k;
        S* crow = c + static_cast<std::int64_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const S av = arow[kk];
            const S* brow = b + static_cast<std::int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T, A: m x k, B: n x k.
template <typename S>
void mm_nt(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<std::int64_t>(i) * k;
        S* crow = c + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const S* brow = b + static_cast<std::int64_t>(j) * k;
            S acc = S(0);
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// C += A^T * B, A: k x m, B: k x n.
template <typename S>
void mm_tn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int kk = 0; kk < k; ++kk) {
        const S* arow = a + static_cast<std::int64_t>(kk) * m;
        const S* brow = b + static_cast<std::int64_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const S av = arow[i];
            S* crow = c + static_cast<std::int64_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename S>
bool want_record(const TapeT<S>* tape, const VarPtr<S>& out) {
    return tape != nullptr && out->requires_grad;
}

}  // namespace detail

template <typename S>
VarPtr<S> add(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& a, const VarPtr<S>& b) {
    if (!a->value.same_shape(b->value)) {
        throw ShapeError("add: shape mismatch " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
    }
    require_finite(a->value, "add");
    require_finite(b->value, "add");
    TensorT<S> out(a->value.shape());
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
    auto res = make_var(std::move(out), a->requires_grad || b->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([a, b, res] {
            if (!res->has_grad()) return;
            if (a->requires_grad) a->accumulate_grad(res->grad);
            if (b->requires_grad) b->accumulate_grad(res->grad);
        });
    }
    return res;
}

// x + b where b's shape is a suffix of x's shape; b broadcasts over the
// leading dimensions. Covers bias terms and additive position embeddings.
template <typename S>
VarPtr<S> add_bias(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, const VarPtr<S>& b) {
    const Shape& xs = x->value.shape();
    const Shape& bs = b->value.shape();
    if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
        throw ShapeError("add_bias: " + shape_str(bs) + " is not a suffix of " + shape_str(xs));
    }
    require_finite(x->value, "add_bias");
    require_finite(b->value, "add_bias");
    const std::int64_t bn = b->value.numel();
    TensorT<S> out(xs);
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = x->value[i] + b->value[i % bn];
    auto res = make_var(std::move(out), x->requires_grad || b->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, b, res, bn] {
            if (!res->has_grad()) return;
            if (x->requires_grad) x->accumulate_grad(res->grad);
            if (b->requires_grad) {
                TensorT<S> gb(b->value.shape());
                const std::int64_t n2 = res->grad.numel();
                for (std::int64_t i = 0; i < n2; ++i) gb[i % bn] += res->grad[i];
                b->accumulate_grad(gb);
            }
        });
    }
    return res;
}

template <typename S>
VarPtr<S> scale(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, S factor) {
    require_finite(x->value, "scale");
    if (!std::isfinite(factor)) throw ValueError("scale: non-finite factor");
    TensorT<S> out(x->value.shape());
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = factor * x->value[i];
    auto res = make_var(std::move(out), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res, factor] {
            if (!res->has_grad()) return;
            TensorT<S> gx(x->value.shape());
            const std::int64_t n2 = gx.numel();
            for (std::int64_t i = 0; i < n2; ++i) gx[i] = factor * res->grad[i];
            x->accumulate_grad(gx);
        });
    }
    return res;
}

template <typename S>
VarPtr<S> relu(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x) {
    require_finite(x->value, "relu");
    TensorT<S> out(x->value.shape());
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = x->value[i] > S(0) ? x->value[i] : S(0);
    auto res = make_var(std::move(out), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res] {
            if (!res->has_grad()) return;
            TensorT<S> gx(x->value.shape());
            const std::int64_t n2 = gx.numel();
            for (std::int64_t i = 0; i < n2; ++i) gx[i] = x->value[i] > S(0) ? res->grad[i] : S(0);
            x->accumulate_grad(gx);
        });
    }
    return res;
}

// Exact GELU: x * Phi(x) with the Gaussian CDF.
template <typename S>
VarPtr<S> gelu(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x) {
    require_finite(x->value, "gelu");
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    TensorT<S> out(x->value.shape());
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(x->value[i]);
        out[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
    }
    auto res = make_var(std::move(out), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res] {
            if (!res->has_grad()) return;
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            TensorT<S> gx(x->value.shape());
            const std::int64_t n2 = gx.numel();
            for (std::int64_t i = 0; i < n2; ++i) {
                const double v = static_cast<double>(x->value[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx[i] = static_cast<S>((cdf + v * pdf)) * res->grad[i];
            }
            x->accumulate_grad(gx);
        });
    }
    return res;
}

template <typename S>
VarPtr<S> softmax(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, int axis) {
    const Shape& xs = x->value.shape();
    if (axis < 0 || axis >= static_cast<int>(xs.size())) throw ShapeError("softmax: axis out of range");
    require_finite(x->value, "softmax");
    std::int64_t outer = 1, inner = 1;
    const int len = xs[static_cast<std::size_t>(axis)];
    for (int i = 0; i < axis; ++i) outer *= xs[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < xs.size(); ++i) inner *= xs[i];
    TensorT<S> out(xs);
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            S mx = x->value[base];
            for (int j = 1; j < len; ++j) mx = std::max(mx, x->value[base + j * inner]);
            S sum = S(0);
            for (int j = 0; j < len; ++j) {
                const S e = std::exp(x->value[base + j * inner] - mx);
                out[base + j * inner] = e;
                sum += e;
            }
            const S inv = S(1) / sum;
            for (int j = 0; j < len; ++j) out[base + j * inner] *= inv;
        }
    }
    auto res = make_var(std::move(out), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res, outer, inner, len] {
            if (!res->has_grad()) return;
            TensorT<S> gx(x->value.shape());
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * len * inner + in;
                    S dot = S(0);
                    for (int j = 0; j < len; ++j) dot += res->grad[base + j * inner] * res->value[base + j * inner];
                    for (int j = 0; j < len; ++j) {
                        const std::int64_t k = base + j * inner;
                        gx[k] = res->value[k] * (res->grad[k] - dot);
                    }
                }
            }
            x->accumulate_grad(gx);
        });
    }
    return res;
}

// Layer normalization over the last dimension with learnable affine.
template <typename S>
VarPtr<S> layer_norm(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, const VarPtr<S>& gamma, const VarPtr<S>& beta, S eps) {
    const Shape& xs = x->value.shape();
    if (xs.empty()) throw ShapeError("layer_norm: scalar input");
    const int f = xs.back();
    if (gamma->value.shape() != Shape{f} || beta->value.shape() != Shape{f}) {
        throw ShapeError("layer_norm: affine parameters must have shape [" + std::to_string(f) + "]");
    }
    if (!(eps > S(0))) throw ValueError("layer_norm: eps must be positive");
    require_finite(x->value, "layer_norm");
    require_finite(gamma->value, "layer_norm");
    require_finite(beta->value, "layer_norm");
    const std::int64_t rows = x->value.numel() / f;
    TensorT<S> out(xs);
    TensorT<S> xhat(xs);
    TensorT<S> inv_std({static_cast<int>(rows)});
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* xr = x->value.raw() + r * f;
        S mean = S(0);
        for (int j = 0; j < f; ++j) mean += xr[j];
        mean /= static_cast<S>(f);
        S var = S(0);
        for (int j = 0; j < f; ++j) {
            const S d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<S>(f);
        const S istd = S(1) / std::sqrt(var + eps);
        inv_std[r] = istd;
        for (int j = 0; j < f; ++j) {
            const S h = (xr[j] - mean) * istd;
            xhat[r * f + j] = h;
            out[r * f + j] = gamma->value[j] * h + beta->value[j];
        }
    }
    auto res = make_var(std::move(out), x->requires_grad || gamma->requires_grad || beta->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, gamma, beta, res, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, f] {
            if (!res->has_grad()) return;
            const TensorT<S>& g = res->grad;
            if (gamma->requires_grad || beta->requires_grad) {
                TensorT<S> ggamma({f}), gbeta({f});
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (int j = 0; j < f; ++j) {
                        ggamma[j] += g[r * f + j] * xhat[r * f + j];
                        gbeta[j] += g[r * f + j];
                    }
                }
                if (gamma->requires_grad) gamma->accumulate_grad(ggamma);
                if (beta->requires_grad) beta->accumulate_grad(gbeta);
            }
            if (x->requires_grad) {
                TensorT<S> gx(x->value.shape());
                for (std::int64_t r = 0; r < rows; ++r) {
                    S mean_dh = S(0), mean_dh_h = S(0);
                    for (int j = 0; j < f; ++j) {
                        const S dh = g[r * f + j] * gamma->value[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * f + j];
                    }
                    mean_dh /= static_cast<S>(f);
                    mean_dh_h /= static_cast<S>(f);
                    for (int j = 0; j < f; ++j) {
                        const S dh = g[r * f + j] * gamma->value[j];
                        gx[r * f + j] = inv_std[r] * (dh - mean_dh - xhat[r * f + j] * mean_dh_h);
                    }
                }
                x->accumulate_grad(gx);
            }
        });
    }
    return res;
}

// Per-channel affine on N x C x H x W maps (frozen batch-norm folded to scale
// and shift).
template <typename S>
VarPtr<S> channel_affine(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, const VarPtr<S>& gamma, const VarPtr<S>& beta) {
    const Shape& xs = x->value.shape();
    if (xs.size() != 4) throw ShapeError("channel_affine: expected N x C x H x W, got " + shape_str(xs));
    const int n = xs[0], c = xs[1], hw = xs[2] * xs[3];
    if (gamma->value.shape() != Shape{c} || beta->value.shape() != Shape{c}) {
        throw ShapeError("channel_affine: affine parameters must have shape [" + std::to_string(c) + "]");
    }
    require_finite(x->value, "channel_affine");
    require_finite(gamma->value, "channel_affine");
    require_finite(beta->value, "channel_affine");
    TensorT<S> out(xs);
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            const std::int64_t base = (static_cast<std::int64_t>(ni) * c + ci) * hw;
            const S gm = gamma->value[ci], bt = beta->value[ci];
            for (int i = 0; i < hw; ++i) out[base + i] = gm * x->value[base + i] + bt;
        }
    }
    auto res = make_var(std::move(out), x->requires_grad || gamma->requires_grad || beta->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, gamma, beta, res, n, c, hw] {
            if (!res->has_grad()) return;
            const TensorT<S>& g = res->grad;
            TensorT<S> ggamma({c}), gbeta({c});
            TensorT<S> gx;
            if (x->requires_grad) gx = TensorT<S>(x->value.shape());
            for (int ni = 0; ni < n; ++ni) {
                for (int ci = 0; ci < c; ++ci) {
                    const std::int64_t base = (static_cast<std::int64_t>(ni) * c + ci) * hw;
                    const S gm = gamma->value[ci];
                    for (int i = 0; i < hw; ++i) {
                        ggamma[ci] += g[base + i] * x->value[base + i];
                        gbeta[ci] += g[base + i];
                        if (x->requires_grad) gx[base + i] = gm * g[base + i];
                    }
                }
            }
            if (gamma->requires_grad) gamma->accumulate_grad(ggamma);
            if (beta->requires_grad) beta->accumulate_grad(gbeta);
            if (x->requires_grad) x->accumulate_grad(gx);
        });
    }
    return res;
}

template <typename S>
VarPtr<S> matmul(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& a, const VarPtr<S>& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a->value.shape()) + " x " +
                         shape_str(b->value.shape()));
    }
    require_finite(a->value, "matmul");
    require_finite(b->value, "matmul");
    const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    TensorT<S> out({m, n});
    detail::mm_nn(a->value.raw(), b->value.raw(), out.raw(), m, k, n);
    auto res = make_var(std::move(out), a->requires_grad || b->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([a, b, res, m, k, n] {
            if (!res->has_grad()) return;
            if (a->requires_grad) {
                TensorT<S> ga({m, k});
                detail::mm_nt(res->grad.raw(), b->value.raw(), ga.raw(), m, n, k);
                a->accumulate_grad(ga);
            }
            if (b->requires_grad) {
                TensorT<S> gb({k, n});
                detail::mm_tn(a->value.raw(), res->grad.raw(), gb.raw(), k, m, n);
                b->accumulate_grad(gb);
            }
        });
    }
    return res;
}

template <typename S>
VarPtr<S> transpose(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& a) {
    if (a->value.ndim() != 2) throw ShapeError("transpose: expected 2D, got " + shape_str(a->value.shape()));
    require_finite(a->value, "transpose");
    const int m = a->value.dim(0), n = a->value.dim(1);
    TensorT<S> out({n, m});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out(j, i) = a->value(i, j);
    }
    auto res = make_var(std::move(out), a->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([a, res, m, n] {
            if (!res->has_grad()) return;
            TensorT<S> ga({m, n});
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < m; ++i) ga(i, j) = res->grad(j, i);
            }
            a->accumulate_grad(ga);
        });
    }
    return res;
}

// y = x W^T + b with x: R x q, W: p x q, b: p (optional).
template <typename S>
VarPtr<S> linear(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, const VarPtr<S>& w, const std::type_identity_t<VarPtr<S>>& b) {
    if (x->value.ndim() != 2 || w->value.ndim() != 2 || x->value.dim(1) != w->value.dim(1)) {
        throw ShapeError("linear: incompatible shapes x=" + shape_str(x->value.shape()) + " W=" +
                         shape_str(w->value.shape()));
    }
    const int rows = x->value.dim(0), q = x->value.dim(1), p = w->value.dim(0);
    if (b && b->value.shape() != Shape{p}) {
        throw ShapeError("linear: bias shape " + shape_str(b->value.shape()) + ", expected [" + std::to_string(p) + "]");
    }
    require_finite(x->value, "linear");
    require_finite(w->value, "linear");
    if (b) require_finite(b->value, "linear");
    TensorT<S> out({rows, p});
    if (b) {
        for (int r = 0; r < rows; ++r) {
            for (int j = 0; j < p; ++j) out(r, j) = b->value[j];
        }
    }
    detail::mm_nt(x->value.raw(), w->value.raw(), out.raw(), rows, q, p);
    const bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
    auto res = make_var(std::move(out), rg);
    if (detail::want_record(tape, res)) {
        tape->record([x, w, b, res, rows, q, p] {
            if (!res->has_grad()) return;
            if (x->requires_grad) {
                TensorT<S> gx({rows, q});
                detail::mm_nn(res->grad.raw(), w->value.raw(), gx.raw(), rows, p, q);
                x->accumulate_grad(gx);
            }
            if (w->requires_grad) {
                TensorT<S> gw({p, q});
                detail::mm_tn(res->grad.raw(), x->value.raw(), gw.raw(), p, rows, q);
                w->accumulate_grad(gw);
            }
            if (b && b->requires_grad) {
                TensorT<S> gb({p});
                for (int r = 0; r < rows; ++r) {
                    for (int j = 0; j < p; ++j) gb[j] += res->grad(r, j);
                }
                b->accumulate_grad(gb);
            }
        });
    }
    return res;
}

struct Conv2dDims {
    int batch, in_ch, in_h, in_w;
    int out_ch, k_h, k_w, out_h, out_w;
    int groups, in_per_group, out_per_group;
};

inline Conv2dDims conv2d_dims(const Shape& xs, const Shape& ws, int stride, int padding, int groups) {
    if (xs.size() != 4) throw ShapeError("conv2d: input must be N x C x H x W, got " + shape_str(xs));
    if (ws.size() != 4) throw ShapeError("conv2d: kernel must be P x C/g x Kh x Kw, got " + shape_str(ws));
    if (stride < 1) throw ShapeError("conv2d: stride must be positive");
    if (padding < 0) throw ShapeError("conv2d: padding must be non-negative");
    if (groups < 1) throw ShapeError("conv2d: groups must be positive");
    Conv2dDims d;
    d.batch = xs[0];
    d.in_ch = xs[1];
    d.in_h = xs[2];
    d.in_w = xs[3];
    d.out_ch = ws[0];
    d.k_h = ws[2];
    d.k_w = ws[3];
    d.groups = groups;
    if (d.in_ch % groups != 0 || d.out_ch % groups != 0) {
        throw ShapeError("conv2d: channels not divisible by groups");
    }
    d.in_per_group = d.in_ch / groups;
    d.out_per_group = d.out_ch / groups;
    if (ws[1] != d.in_per_group) {
        throw ShapeError("conv2d: kernel expects " + std::to_string(ws[1]) + " input channels per group, input has " +
                         std::to_string(d.in_per_group));
    }
    d.out_h = (d.in_h + 2 * padding - d.k_h) / stride + 1;
    d.out_w = (d.in_w + 2 * padding - d.k_w) / stride + 1;
    if (d.in_h + 2 * padding < d.k_h || d.in_w + 2 * padding < d.k_w || d.out_h < 1 || d.out_w < 1) {
        throw ShapeError("conv2d: non-positive output extent for input " + shape_str(xs) + " kernel " + shape_str(ws));
    }
    return d;
}

// Cross-correlation with stride, zero padding, and channel groups.
template <typename S>
VarPtr<S> conv2d(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, const VarPtr<S>& w, const std::type_identity_t<VarPtr<S>>& b, int stride, int padding,
                 int groups = 1) {
    const Conv2dDims d = conv2d_dims(x->value.shape(), w->value.shape(), stride, padding, groups);
    if (b && b->value.shape() != Shape{d.out_ch}) {
        throw ShapeError("conv2d: bias shape " + shape_str(b->value.shape()) + ", expected [" + std::to_string(d.out_ch) + "]");
    }
    require_finite(x->value, "conv2d");
    require_finite(w->value, "conv2d");
    if (b) require_finite(b->value, "conv2d");

    TensorT<S> out({d.batch, d.out_ch, d.out_h, d.out_w});
    const S* xp = x->value.raw();
    const S* wp = w->value.raw();
    S* op = out.raw();
    const std::int64_t in_plane = static_cast<std::int64_t>(d.in_h) * d.in_w;
    const std::int64_t out_plane = static_cast<std::int64_t>(d.out_h) * d.out_w;

    for (int n = 0; n < d.batch; ++n) {
        for (int oc = 0; oc < d.out_ch; ++oc) {
            const int g = oc / d.out_per_group;
            S* oplane = op + (static_cast<std::int64_t>(n) * d.out_ch + oc) * out_plane;
            if (b) {
                const S bv = b->value[oc];
                for (std::int64_t i = 0; i < out_plane; ++i) oplane[i] = bv;
            }
            for (int icl = 0; icl < d.in_per_group; ++icl) {
                const int ic = g * d.in_per_group + icl;
                const S* iplane = xp + (static_cast<std::int64_t>(n) * d.in_ch + ic) * in_plane;
                const S* wrow = wp + ((static_cast<std::int64_t>(oc) * d.in_per_group + icl) * d.k_h) * d.k_w;
                for (int kh = 0; kh < d.k_h; ++kh) {
                    for (int kw = 0; kw < d.k_w; ++kw) {
                        const S wv = wrow[kh * d.k_w + kw];
                        const int oh0 = std::max(0, (padding - kh + stride - 1) / stride);
                        const int oh1 = std::min(d.out_h - 1, (d.in_h - 1 + padding - kh) / stride);
                        const int ow0 = std::max(0, (padding - kw + stride - 1) / stride);
                        const int ow1 = std::min(d.out_w - 1, (d.in_w - 1 + padding - kw) / stride);
                        for (int oh = oh0; oh <= oh1; ++oh) {
                            const int ih = oh * stride - padding + kh;
                            const S* irow = iplane + static_cast<std::int64_t>(ih) * d.in_w;
                            S* orow = oplane + static_cast<std::int64_t>(oh) * d.out_w;
                            int iw = ow0 * stride - padding + kw;
                            for (int ow = ow0; ow <= ow1; ++ow, iw += stride) orow[ow] += wv * irow[iw];
                        }
                    }
                }
            }
        }
    }
    const bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
    auto res = make_var(std::move(out), rg);
    if (detail::want_record(tape, res)) {
        tape->record([x, w, b, res, d, stride, padding] {
            if (!res->has_grad()) return;
            const std::int64_t in_plane = static_cast<std::int64_t>(d.in_h) * d.in_w;
            const std::int64_t out_plane = static_cast<std::int64_t>(d.out_h) * d.out_w;
            const S* gp = res->grad.raw();
            TensorT<S> gx, gw;
            if (x->requires_grad) gx = TensorT<S>(x->value.shape());
            if (w->requires_grad) gw = TensorT<S>(w->value.shape());
            if (b && b->requires_grad) {
                TensorT<S> gb({d.out_ch});
                for (int n = 0; n < d.batch; ++n) {
                    for (int oc = 0; oc < d.out_ch; ++oc) {
                        const S* gplane = gp + (static_cast<std::int64_t>(n) * d.out_ch + oc) * out_plane;
                        S acc = S(0);
                        for (std::int64_t i = 0; i < out_plane; ++i) acc += gplane[i];
                        gb[oc] += acc;
                    }
                }
                b->accumulate_grad(gb);
            }
            if (x->requires_grad || w->requires_grad) {
                for (int n = 0; n < d.batch; ++n) {
                    for (int oc = 0; oc < d.out_ch; ++oc) {
                        const int g = oc / d.out_per_group;
                        const S* gplane = gp + (static_cast<std::int64_t>(n) * d.out_ch + oc) * out_plane;
                        for (int icl = 0; icl < d.in_per_group; ++icl) {
                            const int ic = g * d.in_per_group + icl;
                            const S* iplane = x->value.raw() + (static_cast<std::int64_t>(n) * d.in_ch + ic) * in_plane;
                            S* gxplane = x->requires_grad ? gx.raw() + (static_cast<std::int64_t>(n) * d.in_ch + ic) * in_plane : nullptr;
                            for (int kh = 0; kh < d.k_h; ++kh) {
                                for (int kw = 0; kw < d.k_w; ++kw) {
                                    const std::int64_t widx = ((static_cast<std::int64_t>(oc) * d.in_per_group + icl) * d.k_h + kh) * d.k_w + kw;
                                    const S wv = w->value[widx];
                                    S wacc = S(0);
                                    const int oh0 = std::max(0, (padding - kh + stride - 1) / stride);
                                    const int oh1 = std::min(d.out_h - 1, (d.in_h - 1 + padding - kh) / stride);
                                    const int ow0 = std::max(0, (padding - kw + stride - 1) / stride);
                                    const int ow1 = std::min(d.out_w - 1, (d.in_w - 1 + padding - kw) / stride);
                                    for (int oh = oh0; oh <= oh1; ++oh) {
                                        const int ih = oh * stride - padding + kh;
                                        const S* irow = iplane + static_cast<std::int64_t>(ih) * d.in_w;
                                        const S* grow = gplane + static_cast<std::int64_t>(oh) * d.out_w;
                                        S* gxrow = gxplane ? gxplane + static_cast<std::int64_t>(ih) * d.in_w : nullptr;
                                        int iw = ow0 * stride - padding + kw;
                                        for (int ow = ow0; ow <= ow1; ++ow, iw += stride) {
                                            wacc += irow[iw] * grow[ow];
                                            if (gxrow) gxrow[iw] += wv * grow[ow];
                                        }
                                    }
                                    if (w->requires_grad) gw[widx] += wacc;
                                }
                            }
                        }
                    }
                }
                if (x->requires_grad) x->accumulate_grad(gx);
                if (w->requires_grad) w->accumulate_grad(gw);
            }
        });
    }
    return res;
}

// Average pooling; padded positions are excluded from the divisor.
template <typename S>
VarPtr<S> avg_pool2d(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, int k, int stride, int padding = 0) {
    const Shape& xs = x->value.shape();
    if (xs.size() != 4) throw ShapeError("avg_pool2d: input must be N x C x H x W, got " + shape_str(xs));
    if (k < 1 || stride < 1 || padding < 0) throw ShapeError("avg_pool2d: invalid window parameters");
    require_finite(x->value, "avg_pool2d");
    const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
    const int oh = (h + 2 * padding - k) / stride + 1;
    const int ow = (w + 2 * padding - k) / stride + 1;
    if (h + 2 * padding < k || w + 2 * padding < k || oh < 1 || ow < 1) {
        throw ShapeError("avg_pool2d: non-positive output extent");
    }
    TensorT<S> out({n, c, oh, ow});
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            const S* plane = x->value.raw() + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
            S* oplane = out.raw() + (static_cast<std::int64_t>(ni) * c + ci) * oh * ow;
            for (int i = 0; i < oh; ++i) {
                const int h0 = std::max(0, i * stride - padding);
                const int h1 = std::min(h, i * stride - padding + k);
                for (int j = 0; j < ow; ++j) {
                    const int w0 = std::max(0, j * stride - padding);
                    const int w1 = std::min(w, j * stride - padding + k);
                    S acc = S(0);
                    for (int ih = h0; ih < h1; ++ih) {
                        for (int iw = w0; iw < w1; ++iw) acc += plane[ih * w + iw];
                    }
                    oplane[i * ow + j] = acc / static_cast<S>((h1 - h0) * (w1 - w0));
                }
            }
        }
    }
    auto res = make_var(std::move(out), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res, k, stride, padding, n, c, h, w, oh, ow] {
            if (!res->has_grad()) return;
            TensorT<S> gx(x->value.shape());
            for (int ni = 0; ni < n; ++ni) {
                for (int ci = 0; ci < c; ++ci) {
                    S* gplane = gx.raw() + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
                    const S* goplane = res->grad.raw() + (static_cast<std::int64_t>(ni) * c + ci) * oh * ow;
                    for (int i = 0; i < oh; ++i) {
                        const int h0 = std::max(0, i * stride - padding);
                        const int h1 = std::min(h, i * stride - padding + k);
                        for (int j = 0; j < ow; ++j) {
                            const int w0 = std::max(0, j * stride - padding);
                            const int w1 = std::min(w, j * stride - padding + k);
                            const S gv = goplane[i * ow + j] / static_cast<S>((h1 - h0) * (w1 - w0));
                            for (int ih = h0; ih < h1; ++ih) {
                                for (int iw = w0; iw < w1; ++iw) gplane[ih * w + iw] += gv;
                            }
                        }
                    }
                }
            }
            x->accumulate_grad(gx);
        });
    }
    return res;
}

// Row-major relabeling; element order is unchanged.
template <typename S>
VarPtr<S> reshape(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, Shape new_shape) {
    require_finite(x->value, "reshape");
    auto res = make_var(x->value.reshaped(std::move(new_shape)), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res] {
            if (!res->has_grad()) return;
            x->accumulate_grad(res->grad.reshaped(x->value.shape()));
        });
    }
    return res;
}

// N x C x H x W feature maps to a N x (H*W) x C token sequence.
template <typename S>
VarPtr<S> flatten_spatial(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x) {
    const Shape& xs = x->value.shape();
    if (xs.size() != 4) throw ShapeError("flatten_spatial: input must be N x C x H x W, got " + shape_str(xs));
    require_finite(x->value, "flatten_spatial");
    const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
    const int l = h * w;
    TensorT<S> out({n, l, c});
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            const S* plane = x->value.raw() + (static_cast<std::int64_t>(ni) * c + ci) * l;
            for (int t = 0; t < l; ++t) out[(static_cast<std::int64_t>(ni) * l + t) * c + ci] = plane[t];
        }
    }
    auto res = make_var(std::move(out), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res, n, c, l] {
            if (!res->has_grad()) return;
            TensorT<S> gx(x->value.shape());
            for (int ni = 0; ni < n; ++ni) {
                for (int ci = 0; ci < c; ++ci) {
                    S* plane = gx.raw() + (static_cast<std::int64_t>(ni) * c + ci) * l;
                    for (int t = 0; t < l; ++t) plane[t] = res->grad[(static_cast<std::int64_t>(ni) * l + t) * c + ci];
                }
            }
            x->accumulate_grad(gx);
        });
    }
    return res;
}

template <typename S>
VarPtr<S> slice_cols(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, int begin, int len) {
    if (x->value.ndim() != 2) throw ShapeError("slice_cols: expected 2D, got " + shape_str(x->value.shape()));
    const int rows = x->value.dim(0), cols = x->value.dim(1);
    if (begin < 0 || len < 1 || begin + len > cols) throw ShapeError("slice_cols: range out of bounds");
    require_finite(x->value, "slice_cols");
    TensorT<S> out({rows, len});
    for (int r = 0; r < rows; ++r) {
        for (int j = 0; j < len; ++j) out(r, j) = x->value(r, begin + j);
    }
    auto res = make_var(std::move(out), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res, begin, len, rows] {
            if (!res->has_grad()) return;
            TensorT<S> gx(x->value.shape());
            for (int r = 0; r < rows; ++r) {
                for (int j = 0; j < len; ++j) gx(r, begin + j) = res->grad(r, j);
            }
            x->accumulate_grad(gx);
        });
    }
    return res;
}

template <typename S>
VarPtr<S> concat_cols(std::type_identity_t<TapeT<S>*> tape, std::span<const VarPtr<S>> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int rows = parts[0]->value.dim(0);
    int total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        if (p->value.ndim() != 2 || p->value.dim(0) != rows) {
            throw ShapeError("concat_cols: all parts must be 2D with equal row count");
        }
        require_finite(p->value, "concat_cols");
        total += p->value.dim(1);
        rg = rg || p->requires_grad;
    }
    TensorT<S> out({rows, total});
    int off = 0;
    for (const auto& p : parts) {
        const int len = p->value.dim(1);
        for (int r = 0; r < rows; ++r) {
            for (int j = 0; j < len; ++j) out(r, off + j) = p->value(r, j);
        }
        off += len;
    }
    auto res = make_var(std::move(out), rg);
    if (detail::want_record(tape, res)) {
        std::vector<VarPtr<S>> held(parts.begin(), parts.end());
        tape->record([held = std::move(held), res, rows] {
            if (!res->has_grad()) return;
            int off = 0;
            for (const auto& p : held) {
                const int len = p->value.dim(1);
                if (p->requires_grad) {
                    TensorT<S> gp({rows, len});
                    for (int r = 0; r < rows; ++r) {
                        for (int j = 0; j < len; ++j) gp(r, j) = res->grad(r, off + j);
                    }
                    p->accumulate_grad(gp);
                }
                off += len;
            }
        });
    }
    return res;
}

// Drop the leading axis, selecting one sample from a batch.
template <typename S>
VarPtr<S> select_sample(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, int index) {
    const Shape& xs = x->value.shape();
    if (xs.size() < 2) throw ShapeError("select_sample: input must have a batch axis");
    if (index < 0 || index >= xs[0]) throw ShapeError("select_sample: index out of range");
    require_finite(x->value, "select_sample");
    Shape tail(xs.begin() + 1, xs.end());
    const std::int64_t block = shape_numel(tail);
    TensorT<S> out(tail);
    const S* src = x->value.raw() + static_cast<std::int64_t>(index) * block;
    std::copy(src, src + block, out.raw());
    auto res = make_var(std::move(out), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res, index, block] {
            if (!res->has_grad()) return;
            TensorT<S> gx(x->value.shape());
            S* dst = gx.raw() + static_cast<std::int64_t>(index) * block;
            std::copy(res->grad.raw(), res->grad.raw() + block, dst);
            x->accumulate_grad(gx);
        });
    }
    return res;
}

// Stack equally shaped samples along a new leading axis.
template <typename S>
VarPtr<S> stack_samples(std::type_identity_t<TapeT<S>*> tape, std::span<const VarPtr<S>> parts) {
    if (parts.empty()) throw ShapeError("stack_samples: no inputs");
    const Shape tail = parts[0]->value.shape();
    const std::int64_t block = shape_numel(tail);
    bool rg = false;
    for (const auto& p : parts) {
        if (p->value.shape() != tail) throw ShapeError("stack_samples: mismatched sample shapes");
        require_finite(p->value, "stack_samples");
        rg = rg || p->requires_grad;
    }
    Shape out_shape;
    out_shape.push_back(static_cast<int>(parts.size()));
    out_shape.insert(out_shape.end(), tail.begin(), tail.end());
    TensorT<S> out(out_shape);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        std::copy(parts[i]->value.raw(), parts[i]->value.raw() + block, out.raw() + static_cast<std::int64_t>(i) * block);
    }
    auto res = make_var(std::move(out), rg);
    if (detail::want_record(tape, res)) {
        std::vector<VarPtr<S>> held(parts.begin(), parts.end());
        tape->record([held = std::move(held), res, block] {
            if (!res->has_grad()) return;
            for (std::size_t i = 0; i < held.size(); ++i) {
                if (!held[i]->requires_grad) continue;
                TensorT<S> gp(held[i]->value.shape());
                const S* src = res->grad.raw() + static_cast<std::int64_t>(i) * block;
                std::copy(src, src + block, gp.raw());
                held[i]->accumulate_grad(gp);
            }
        });
    }
    return res;
}

// Mean over the token axis: N x L x d -> N x d.
template <typename S>
VarPtr<S> mean_tokens(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x) {
    const Shape& xs = x->value.shape();
    if (xs.size() != 3) throw ShapeError("mean_tokens: expected N x L x d, got " + shape_str(xs));
    require_finite(x->value, "mean_tokens");
    const int n = xs[0], l = xs[1], d = xs[2];
    TensorT<S> out({n, d});
    for (int ni = 0; ni < n; ++ni) {
        for (int t = 0; t < l; ++t) {
            for (int j = 0; j < d; ++j) out(ni, j) += x->value(ni, t, j);
        }
    }
    const S inv = S(1) / static_cast<S>(l);
    for (auto& v : out.data()) v *= inv;
    auto res = make_var(std::move(out), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res, n, l, d, inv] {
            if (!res->has_grad()) return;
            TensorT<S> gx(x->value.shape());
            for (int ni = 0; ni < n; ++ni) {
                for (int t = 0; t < l; ++t) {
                    for (int j = 0; j < d; ++j) gx(ni, t, j) = res->grad(ni, j) * inv;
                }
            }
            x->accumulate_grad(gx);
        });
    }
    return res;
}

template <typename S>
VarPtr<S> sum_all(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x) {
    require_finite(x->value, "sum_all");
    S acc = S(0);
    for (const S& v : x->value.data()) acc += v;
    auto res = make_var(TensorT<S>::scalar(acc), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res] {
            if (!res->has_grad()) return;
            TensorT<S> gx(x->value.shape());
            gx.fill(res->grad[0]);
            x->accumulate_grad(gx);
        });
    }
    return res;
}

template <typename S>
VarPtr<S> mean_all(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x) {
    require_finite(x->value, "mean_all");
    S acc = S(0);
    for (const S& v : x->value.data()) acc += v;
    const S inv = S(1) / static_cast<S>(x->value.numel());
    auto res = make_var(TensorT<S>::scalar(acc * inv), x->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([x, res, inv] {
            if (!res->has_grad()) return;
            TensorT<S> gx(x->value.shape());
            gx.fill(res->grad[0] * inv);
            x->accumulate_grad(gx);
        });
    }
    return res;
}

// Mean softmax cross-entropy over a batch of logits.
template <typename S>
VarPtr<S> cross_entropy(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& logits, const std::vector<int>& labels) {
    if (logits->value.ndim() != 2) throw ShapeError("cross_entropy: logits must be N x K");
    const int n = logits->value.dim(0), k = logits->value.dim(1);
    if (static_cast<int>(labels.size()) != n) throw ShapeError("cross_entropy: label count mismatch");
    for (int y : labels) {
        if (y < 0 || y >= k) throw ShapeError("cross_entropy: label out of range");
    }
    require_finite(logits->value, "cross_entropy");
    TensorT<S> probs({n, k});
    S loss = S(0);
    for (int i = 0; i < n; ++i) {
        const S* row = logits->value.raw() + static_cast<std::int64_t>(i) * k;
        S mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        S sum = S(0);
        for (int j = 0; j < k; ++j) {
            const S e = std::exp(row[j] - mx);
            probs(i, j) = e;
            sum += e;
        }
        const S inv = S(1) / sum;
        for (int j = 0; j < k; ++j) probs(i, j) *= inv;
        loss -= std::log(std::max(probs(i, labels[static_cast<std::size_t>(i)]), S(1e-30)));
    }
    loss /= static_cast<S>(n);
    auto res = make_var(TensorT<S>::scalar(loss), logits->requires_grad);
    if (detail::want_record(tape, res)) {
        tape->record([logits, res, probs = std::move(probs), labels, n, k] {
            if (!res->has_grad()) return;
            const S g = res->grad[0] / static_cast<S>(n);
            TensorT<S> gl({n, k});
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < k; ++j) {
                    const S onehot = (j == labels[static_cast<std::size_t>(i)]) ? S(1) : S(0);
                    gl(i, j) = g * (probs(i, j) - onehot);
                }
            }
            logits->accumulate_grad(gl);
        });
    }
    return res;
}

}  // namespace petah
