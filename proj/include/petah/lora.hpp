#pragma once

#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "petah/ops.hpp"

// Low-rank factor pairs and their factored forward paths. A factor binds to a
// named base parameter. Linear factors may cover a contiguous row slice of the
// base weight (per-head allocation); the slices of all factors bound to one
// weight partition its rows. Conv factors always cover the whole kernel.

namespace petah {

template <typename S>
struct LoraFactorsT {
    std::string target;  // full name of the base parameter this binds to
    VarPtr<S> A;         // r x q (linear) or r_c x q/g x k x k (conv)
    VarPtr<S> B;         // rows x r (linear) or p x r_c x 1 x 1 (conv)
    int rank = 0;
    S scale = S(1);
    int row_offset = 0;  // first base-weight row covered (linear slices)
    bool is_conv = false;
    int groups = 1;      // conv: channel groups shared with the base conv
    int stride = 1;      // conv: geometry the A path inherits from the base
    int padding = 0;
};

using LoraFactors = LoraFactorsT<float>;

template <typename S>
bool tensor_all_zero(const TensorT<S>& t) {
    for (const S& v : t.data()) {
        if (v != S(0)) return false;
    }
    return true;
}

template <typename S>
void validate_linear_factor(const LoraFactorsT<S>& f, const Shape& base_shape) {
    if (f.is_conv) throw ShapeError("lora: conv factor bound to linear parameter " + f.target);
    if (base_shape.size() != 2) throw ShapeError("lora: linear target must be 2D");
    const int p = base_shape[0], q = base_shape[1];
    if (f.A->value.ndim() != 2 || f.B->value.ndim() != 2) throw ShapeError("lora: linear factors must be 2D");
    const int r = f.A->value.dim(0);
    const int rows = f.B->value.dim(0);
    if (r != f.rank || f.B->value.dim(1) != r) throw ShapeError("lora: factor ranks disagree for " + f.target);
    if (f.A->value.dim(1) != q) throw ShapeError("lora: A columns must match target input width for " + f.target);
    if (f.row_offset < 0 || f.row_offset + rows > p) throw ShapeError("lora: row slice out of range for " + f.target);
    if (f.rank < 1 || f.rank > std::min(rows, q)) throw ShapeError("lora: rank out of range for " + f.target);
    if (!(f.scale > S(0))) throw ValueError("lora: scale must be positive");
}

template <typename S>
void validate_conv_factor(const LoraFactorsT<S>& f, const Shape& base_shape) {
    if (!f.is_conv) throw ShapeError("lora: linear factor bound to conv parameter " + f.target);
    if (base_shape.size() != 4) throw ShapeError("lora: conv target must be 4D");
    const int p = base_shape[0], qg = base_shape[1], kh = base_shape[2], kw = base_shape[3];
    const Shape& as = f.A->value.shape();
    const Shape& bs = f.B->value.shape();
    if (as.size() != 4 || bs.size() != 4) throw ShapeError("lora: conv factors must be 4D");
    if (f.groups < 1 || p % f.groups != 0) throw ShapeError("lora: bad group count for " + f.target);
    if (as != Shape{f.groups * f.rank, qg, kh, kw}) {
        throw ShapeError("lora: A shape " + shape_str(as) + " does not bind to kernel " + shape_str(base_shape));
    }
    if (bs != Shape{p, f.rank, 1, 1}) {
        throw ShapeError("lora: B shape " + shape_str(bs) + " does not bind to kernel " + shape_str(base_shape));
    }
    if (f.rank < 1 || f.rank > std::min(p, qg * f.groups * kh * kw)) {
        throw ShapeError("lora: rank out of range for " + f.target);
    }
    if (f.row_offset != 0) throw ShapeError("lora: conv factors cover all output channels");
    if (!(f.scale > S(0))) throw ValueError("lora: scale must be positive");
}

// W_0 x + scale * B (A x) + b for a single factor covering every row of W_0.
template <typename S>
VarPtr<S> lora_linear_forward(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, const VarPtr<S>& w, const std::type_identity_t<VarPtr<S>>& b,
                              const LoraFactorsT<S>& f) {
    validate_linear_factor(f, w->value.shape());
    if (f.row_offset != 0 || f.B->value.dim(0) != w->value.dim(0)) {
        throw ShapeError("lora_linear_forward: factor must cover the full weight " + f.target);
    }
    auto base = linear(tape, x, w, b);
    if (tape == nullptr && tensor_all_zero(f.B->value)) return base;
    auto t = linear<S>(tape, x, f.A, nullptr);
    auto u = linear<S>(tape, t, f.B, nullptr);
    return add(tape, base, scale(tape, u, f.scale));
}

// Factored forward for a weight whose rows are partitioned among one or more
// factors (one per head for attention projections). Factors must be ordered by
// row offset and cover the rows exactly.
template <typename S>
VarPtr<S> adapted_linear(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, const VarPtr<S>& w, const std::type_identity_t<VarPtr<S>>& b,
                         std::span<const LoraFactorsT<S>* const> factors) {
    auto base = linear(tape, x, w, b);
    if (factors.empty()) return base;
    int covered = 0;
    bool all_zero = true;
    for (const auto* f : factors) {
        validate_linear_factor(*f, w->value.shape());
        if (f->row_offset != covered) throw ShapeError("adapted_linear: factor slices must tile the weight rows");
        covered += f->B->value.dim(0);
        all_zero = all_zero && tensor_all_zero(f->B->value);
    }
    if (covered != w->value.dim(0)) throw ShapeError("adapted_linear: factor slices must cover the weight rows");
    if (tape == nullptr && all_zero) return base;
    std::vector<VarPtr<S>> deltas;
    deltas.reserve(factors.size());
    for (const auto* f : factors) {
        auto t = linear<S>(tape, x, f->A, nullptr);
        auto u = linear<S>(tape, t, f->B, nullptr);
        deltas.push_back(scale(tape, u, f->scale));
    }
    auto delta = deltas.size() == 1 ? deltas[0] : concat_cols<S>(tape, deltas);
    return add(tape, base, delta);
}

// conv2D(x, W) + scale * conv2D(conv2D(x, A), B) + b. The A path inherits the
// base conv's stride, padding, and groups; the B path is 1x1, stride 1, no
// padding.
template <typename S>
VarPtr<S> conv_lora_forward(std::type_identity_t<TapeT<S>*> tape, const VarPtr<S>& x, const VarPtr<S>& w, const std::type_identity_t<VarPtr<S>>& b, int stride,
                            int padding, int groups, const LoraFactorsT<S>& f) {
    validate_conv_factor(f, w->value.shape());
    if (f.stride != stride || f.padding != padding || f.groups != groups) {
        throw ShapeError("conv_lora_forward: factor geometry does not match the base conv for " + f.target);
    }
    auto base = conv2d<S>(tape, x, w, b, stride, padding, groups);
    if (tape == nullptr && tensor_all_zero(f.B->value)) return base;
    auto a_out = conv2d<S>(tape, x, f.A, nullptr, stride, padding, groups);
    auto b_out = conv2d<S>(tape, a_out, f.B, nullptr, 1, 0, groups);
    return add(tape, base, scale(tape, b_out, f.scale));
}

// base + scale * (B A) materialized in the base parameter's own shape. Conv
// deltas go through the 2D reshape: A -> r x (q k^2), dW_2D = B_2D A_2D,
// reshaped back to p x q x k x k (per group when grouped).
template <typename S>
TensorT<S> merged_delta(const LoraFactorsT<S>& f, const Shape& base_shape) {
    TensorT<S> delta(base_shape);
    if (!f.is_conv) {
        validate_linear_factor(f, base_shape);
        const int q = base_shape[1];
        const int rows = f.B->value.dim(0);
        TensorT<S> block({rows, q});
        detail::mm_nn(f.B->value.raw(), f.A->value.raw(), block.raw(), rows, f.rank, q);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < q; ++j) delta(f.row_offset + i, j) = f.scale * block(i, j);
        }
        return delta;
    }
    validate_conv_factor(f, base_shape);
    const int p = base_shape[0], qg = base_shape[1], kh = base_shape[2], kw = base_shape[3];
    const int g = f.groups, r = f.rank;
    const int pg = p / g;
    const int cols = qg * kh * kw;
    const TensorT<S> a2 = f.A->value.reshaped({g * r, cols});
    const TensorT<S> b2 = f.B->value.reshaped({p, r});
    for (int gi = 0; gi < g; ++gi) {
        TensorT<S> block({pg, cols});
        detail::mm_nn(b2.raw() + static_cast<std::int64_t>(gi) * pg * r, a2.raw() + static_cast<std::int64_t>(gi) * r * cols,
                      block.raw(), pg, r, cols);
        for (int i = 0; i < pg; ++i) {
            for (int j = 0; j < cols; ++j) delta[(static_cast<std::int64_t>(gi) * pg + i) * cols + j] = f.scale * block(i, j);
        }
    }
    return delta;
}

template <typename S>
TensorT<S> merge(const LoraFactorsT<S>& f, const TensorT<S>& base) {
    if (tensor_all_zero(f.B->value)) return base;
    TensorT<S> out = base;
    const TensorT<S> delta = merged_delta(f, base.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += delta[i];
    return out;
}

template <typename S>
TensorT<S> unmerge(const LoraFactorsT<S>& f, const TensorT<S>& merged) {
    if (tensor_all_zero(f.B->value)) return merged;
    TensorT<S> out = merged;
    const TensorT<S> delta = merged_delta(f, merged.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= delta[i];
    return out;
}

}  // namespace petah
