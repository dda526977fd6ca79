#pragma once

// Reference implementations used as test oracles. They are written
// independently of the library kernels: direct per-output gather loops with
// double accumulation, and a Jacobi SVD for rank measurements.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "petah/tensor.hpp"

namespace oracle {

using petah::Shape;
using petah::Tensor;
using petah::TensorD;

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad, int groups) {
    const int n = x.dim(0), ic = x.dim(1), ih = x.dim(2), iw = x.dim(3);
    const int oc = w.dim(0), icg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int ocg = oc / groups;
    const int oh = (ih + 2 * pad - kh) / stride + 1;
    const int ow = (iw + 2 * pad - kw) / stride + 1;
    Tensor out({n, oc, oh, ow});
    for (int ni = 0; ni < n; ++ni) {
        for (int o = 0; o < oc; ++o) {
            const int g = o / ocg;
            for (int i = 0; i < oh; ++i) {
                for (int j = 0; j < ow; ++j) {
                    double acc = b ? static_cast<double>((*b)[o]) : 0.0;
                    for (int c = 0; c < icg; ++c) {
                        const int cin = g * icg + c;
                        for (int u = 0; u < kh; ++u) {
                            for (int v = 0; v < kw; ++v) {
                                const int y = i * stride - pad + u;
                                const int z = j * stride - pad + v;
                                if (y < 0 || y >= ih || z < 0 || z >= iw) continue;
                                acc += static_cast<double>(x[((static_cast<std::int64_t>(ni) * ic + cin) * ih + y) * iw + z]) *
                                       static_cast<double>(w[((static_cast<std::int64_t>(o) * icg + c) * kh + u) * kw + v]);
                            }
                        }
                    }
                    out[((static_cast<std::int64_t>(ni) * oc + o) * oh + i) * ow + j] = static_cast<float>(acc);
                }
            }
        }
    }
    return out;
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b) {
    const int rows = x.dim(0), q = x.dim(1), p = w.dim(0);
    Tensor out({rows, p});
    for (int r = 0; r < rows; ++r) {
        for (int j = 0; j < p; ++j) {
            double acc = b ? static_cast<double>((*b)[j]) : 0.0;
            for (int c = 0; c < q; ++c) acc += static_cast<double>(x(r, c)) * static_cast<double>(w(j, c));
            out(r, j) = static_cast<float>(acc);
        }
    }
    return out;
}

inline Tensor avg_pool2d(const Tensor& x, int k, int stride, int pad) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int oh = (h + 2 * pad - k) / stride + 1;
    const int ow = (w + 2 * pad - k) / stride + 1;
    Tensor out({n, c, oh, ow});
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            for (int i = 0; i < oh; ++i) {
                for (int j = 0; j < ow; ++j) {
                    double acc = 0.0;
                    int count = 0;
                    for (int u = 0; u < k; ++u) {
                        for (int v = 0; v < k; ++v) {
                            const int y = i * stride - pad + u;
                            const int z = j * stride - pad + v;
                            if (y < 0 || y >= h || z < 0 || z >= w) continue;
                            acc += static_cast<double>(x[((static_cast<std::int64_t>(ni) * c + ci) * h + y) * w + z]);
                            ++count;
                        }
                    }
                    out[((static_cast<std::int64_t>(ni) * c + ci) * oh + i) * ow + j] =
                        static_cast<float>(acc / count);
                }
            }
        }
    }
    return out;
}

// Dense enumeration of multi-head attention on a single L x d sequence, all in
// double. Weights follow the library's out-by-in convention.
inline Tensor attention(const Tensor& x, const Tensor& wq, const Tensor& bq, const Tensor& wk, const Tensor& bk,
                        const Tensor& wv, const Tensor& bv, const Tensor& wproj, const Tensor& bproj, int h, int dk,
                        int dv) {
    const int l = x.dim(0), d = x.dim(1);
    const int hk = h * dk, hv = h * dv;
    auto proj = [&](const Tensor& w, const Tensor& b, int outw) {
        std::vector<double> y(static_cast<std::size_t>(l) * outw);
        for (int i = 0; i < l; ++i) {
            for (int j = 0; j < outw; ++j) {
                double acc = b[j];
                for (int c = 0; c < d; ++c) acc += static_cast<double>(x(i, c)) * static_cast<double>(w(j, c));
                y[static_cast<std::size_t>(i) * outw + j] = acc;
            }
        }
        return y;
    };
    const auto q = proj(wq, bq, hk), k = proj(wk, bk, hk), v = proj(wv, bv, hv);
    std::vector<double> ctx(static_cast<std::size_t>(l) * hv, 0.0);
    for (int head = 0; head < h; ++head) {
        for (int i = 0; i < l; ++i) {
            std::vector<double> scores(static_cast<std::size_t>(l));
            double mx = -1e300;
            for (int j = 0; j < l; ++j) {
                double s = 0.0;
                for (int c = 0; c < dk; ++c) {
                    s += q[static_cast<std::size_t>(i) * hk + head * dk + c] *
                         k[static_cast<std::size_t>(j) * hk + head * dk + c];
                }
                s /= std::sqrt(static_cast<double>(dk));
                scores[static_cast<std::size_t>(j)] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (int j = 0; j < l; ++j) {
                scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
                z += scores[static_cast<std::size_t>(j)];
            }
            for (int j = 0; j < l; ++j) {
                const double a = scores[static_cast<std::size_t>(j)] / z;
                for (int c = 0; c < dv; ++c) {
                    ctx[static_cast<std::size_t>(i) * hv + head * dv + c] +=
                        a * v[static_cast<std::size_t>(j) * hv + head * dv + c];
                }
            }
        }
    }
    Tensor out({l, d});
    for (int i = 0; i < l; ++i) {
        for (int j = 0; j < d; ++j) {
            double acc = bproj[j];
            for (int c = 0; c < hv; ++c) acc += ctx[static_cast<std::size_t>(i) * hv + c] * static_cast<double>(wproj(j, c));
            out(i, j) = static_cast<float>(acc);
        }
    }
    return out;
}

// Singular values by one-sided Jacobi (descending). Columns of the input are
// rotated until pairwise orthogonal; the singular values are the column norms.
inline std::vector<double> singular_values(const std::vector<double>& a_in, int rows, int cols) {
    // Work on the taller orientation so sweeps orthogonalize few columns.
    std::vector<double> a;
    int m = rows, n = cols;
    if (rows >= cols) {
        a = a_in;
    } else {
        m = cols;
        n = rows;
        a.resize(a_in.size());
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) a[static_cast<std::size_t>(j) * n + i] = a_in[static_cast<std::size_t>(i) * cols + j];
        }
    }
    auto col_dot = [&](int p, int q) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) s += a[static_cast<std::size_t>(i) * n + p] * a[static_cast<std::size_t>(i) * n + q];
        return s;
    };
    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double app = col_dot(p, p), aqq = col_dot(q, q), apq = col_dot(p, q);
                off = std::max(off, std::abs(apq) / (std::sqrt(app * aqq) + 1e-300));
                if (std::abs(apq) < 1e-300) continue;
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (int i = 0; i < m; ++i) {
                    const double vp = a[static_cast<std::size_t>(i) * n + p];
                    const double vq = a[static_cast<std::size_t>(i) * n + q];
                    a[static_cast<std::size_t>(i) * n + p] = c * vp - s * vq;
                    a[static_cast<std::size_t>(i) * n + q] = s * vp + c * vq;
                }
            }
        }
        if (off < 1e-14) break;
    }
    std::vector<double> sv(static_cast<std::size_t>(n));
    for (int p = 0; p < n; ++p) sv[static_cast<std::size_t>(p)] = std::sqrt(col_dot(p, p));
    std::sort(sv.rbegin(), sv.rend());
    return sv;
}

inline std::vector<double> singular_values(const Tensor& t) {
    std::vector<double> a(t.data().begin(), t.data().end());
    return singular_values(a, t.dim(0), t.dim(1));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double mx = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        mx = std::max(mx, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return mx;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b) {
    double mx = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double diff = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
        mx = std::max(mx, diff / (std::abs(static_cast<double>(b[i])) + 1e-8));
    }
    return mx;
}

// Relative error with a scale floor, for comparing float kernels against the
// double oracle: near-zero reference entries are judged on absolute error.
inline double max_scaled_err(const Tensor& a, const Tensor& b, double floor = 0.05) {
    double mx = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double diff = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
        mx = std::max(mx, diff / (std::abs(static_cast<double>(b[i])) + floor));
    }
    return mx;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.raw(), b.raw(), sizeof(float) * static_cast<std::size_t>(a.numel())) == 0;
}

}  // namespace oracle
