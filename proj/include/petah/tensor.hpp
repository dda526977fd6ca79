#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "petah/errors.hpp"
#include "petah/rng.hpp"

namespace petah {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative extent in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense n-dimensional array of scalars in row-major order. The scalar type is
// the compute precision: float for training/inference, double for gradient
// checking.
template <typename S>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape)
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), S(0)) {}

    TensorT(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
            throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
        }
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, S value) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static TensorT ones(Shape shape) { return full(std::move(shape), S(1)); }

    static TensorT scalar(S value) { return TensorT({1}, {value}); }

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    std::vector<S>& data() { return data_; }
    const std::vector<S>& data() const { return data_; }
    S* raw() { return data_.data(); }
    const S* raw() const { return data_.data(); }

    S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const S& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    template <typename... I>
    S& operator()(I... idx) {
        return data_[static_cast<std::size_t>(flat_index(idx...))];
    }
    template <typename... I>
    const S& operator()(I... idx) const {
        return data_[static_cast<std::size_t>(flat_index(idx...))];
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    // Pure relabeling of the same row-major data.
    TensorT reshaped(Shape new_shape) const {
        if (shape_numel(new_shape) != numel()) {
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                             " changes element count");
        }
        return TensorT(std::move(new_shape), data_);
    }

    void fill(S value) { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const {
        for (const S& v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    template <typename... I>
    std::int64_t flat_index(I... idx) const {
        const int ids[] = {static_cast<int>(idx)...};
        constexpr std::size_t n = sizeof...(idx);
        if (n != shape_.size()) throw ShapeError("index rank mismatch for shape " + shape_str(shape_));
        std::int64_t flat = 0;
        for (std::size_t k = 0; k < n; ++k) {
            flat = flat * shape_[k] + ids[k];
        }
        return flat;
    }

    Shape shape_;
    std::vector<S> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// NaN/Inf anywhere is a hard error at op boundaries.
template <typename S>
void require_finite(const TensorT<S>& t, std::string_view op) {
    if (!t.all_finite()) {
        throw ValueError(std::string(op) + ": non-finite value in tensor of shape " + shape_str(t.shape()));
    }
}

// Flatten a p x q x k x k kernel to p x (q*k*k). Row-major relabeling only.
template <typename S>
TensorT<S> reshape_kernel_4d_to_2d(const TensorT<S>& kernel) {
    if (kernel.ndim() != 4) throw ShapeError("reshape_kernel_4d_to_2d: expected 4D kernel, got " + shape_str(kernel.shape()));
    const int p = kernel.dim(0), q = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    return kernel.reshaped({p, q * kh * kw});
}

// Inverse relabeling: p x (q*k*k) back to p x q x k x k.
template <typename S>
TensorT<S> reshape_kernel_2d_to_4d(const TensorT<S>& matrix, int q, int k) {
    if (matrix.ndim() != 2) throw ShapeError("reshape_kernel_2d_to_4d: expected 2D matrix, got " + shape_str(matrix.shape()));
    const int p = matrix.dim(0);
    if (q <= 0 || k <= 0 || matrix.dim(1) != q * k * k) {
        throw ShapeError("reshape_kernel_2d_to_4d: " + shape_str(matrix.shape()) + " inconsistent with q=" +
                         std::to_string(q) + " k=" + std::to_string(k));
    }
    return matrix.reshaped({p, q, k, k});
}

template <typename S>
TensorT<S> uniform_tensor(Rng& rng, Shape shape, S lo, S hi) {
    TensorT<S> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<S>(rng.uniform(static_cast<float>(lo), static_cast<float>(hi)));
    return t;
}

template <typename S>
TensorT<S> normal_tensor(Rng& rng, Shape shape, S mean = S(0), S stddev = S(1)) {
    TensorT<S> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<S>(rng.normal(static_cast<float>(mean), static_cast<float>(stddev)));
    return t;
}

}  // namespace petah
