#pragma once

// Seeded double-precision gradcheck instances for every differentiable op and
// for both factored adapter paths. Shared between the unit tests (few seeds)
// and the acceptance run (many seeds).

#include <functional>
#include <string>
#include <vector>

#include "petah/gradcheck.hpp"
#include "petah/lora.hpp"
#include "petah/ops.hpp"
#include "petah/rng.hpp"

namespace cases {

using petah::GradCheckReport;
using petah::Rng;
using petah::Shape;
using petah::TapeD;
using petah::TensorD;
using petah::VarPtr;

using VarD = petah::VarPtr<double>;

inline TensorD rand_t(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
    TensorD t(shape);
    for (auto& v : t.data()) v = rng.uniform_double() * (hi - lo) + lo;
    return t;
}

// Uniform magnitudes bounded away from zero, for kinked activations.
inline TensorD rand_away_from_zero(Rng& rng, const Shape& shape, double min_mag = 0.05) {
    TensorD t(shape);
    for (auto& v : t.data()) {
        const double mag = min_mag + (1.0 - min_mag) * rng.uniform_double();
        v = rng.bernoulli(0.5f) ? mag : -mag;
    }
    return t;
}

// Scalar loss with distinct per-element weights so gradients are not uniform.
// The weights are drawn once and cached: gradcheck re-evaluates the loss many
// times and needs a fixed function.
struct LossWeights {
    explicit LossWeights(std::uint64_t seed) : rng(seed) {}

    VarD operator()(TapeD& tape, const VarD& x) {
        const int m = static_cast<int>(x->value.numel());
        if (w.empty()) w = rand_t(rng, {m, 1});
        auto flat = petah::reshape<double>(&tape, x, {1, m});
        auto wv = petah::make_var<double>(w, false, "loss_weights");
        return petah::sum_all<double>(&tape, petah::matmul<double>(&tape, flat, wv));
    }

    Rng rng;
    TensorD w;
};

struct OpCase {
    std::string name;
    std::function<GradCheckReport(std::uint64_t seed)> run;
};

constexpr double kEps = 1e-4;
constexpr double kTol = 1e-4;

inline GradCheckReport check(const std::vector<VarD>& params,
                             const std::function<VarD(TapeD&)>& loss_fn) {
    return petah::gradcheck<double>(loss_fn, std::span<const VarD>(params), kEps, kTol);
}

inline std::vector<OpCase> op_cases() {
    std::vector<OpCase> cs;

    cs.push_back({"add", [](std::uint64_t seed) {
        Rng rng(seed);
        auto a = petah::make_var(rand_t(rng, {3, 4}), true, "a");
        auto b = petah::make_var(rand_t(rng, {3, 4}), true, "b");
        LossWeights lw(seed + 1000);
        return check({a, b}, [&](TapeD& t) { return lw(t, petah::add<double>(&t, a, b)); });
    }});

    cs.push_back({"add_bias", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {2, 3, 4}), true, "x");
        auto b = petah::make_var(rand_t(rng, {4}), true, "b");
        LossWeights lw(seed + 1000);
        return check({x, b}, [&](TapeD& t) { return lw(t, petah::add_bias<double>(&t, x, b)); });
    }});

    cs.push_back({"scale", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {4, 3}), true, "x");
        const double f = 0.25 + rng.uniform_double();
        LossWeights lw(seed + 1000);
        return check({x}, [&](TapeD& t) { return lw(t, petah::scale<double>(&t, x, f)); });
    }});

    cs.push_back({"relu", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_away_from_zero(rng, {5, 4}), true, "x");
        LossWeights lw(seed + 1000);
        return check({x}, [&](TapeD& t) { return lw(t, petah::relu<double>(&t, x)); });
    }});

    cs.push_back({"gelu", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {5, 4}, -2.0, 2.0), true, "x");
        LossWeights lw(seed + 1000);
        return check({x}, [&](TapeD& t) { return lw(t, petah::gelu<double>(&t, x)); });
    }});

    cs.push_back({"softmax", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {2, 5, 3}, -2.0, 2.0), true, "x");
        LossWeights lw(seed + 1000);
        return check({x}, [&](TapeD& t) { return lw(t, petah::softmax<double>(&t, x, 1)); });
    }});

    cs.push_back({"layer_norm", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {3, 6}), true, "x");
        auto g = petah::make_var(rand_t(rng, {6}, 0.5, 1.5), true, "g");
        auto b = petah::make_var(rand_t(rng, {6}), true, "b");
        LossWeights lw(seed + 1000);
        return check({x, g, b}, [&](TapeD& t) {
            return lw(t, petah::layer_norm<double>(&t, x, g, b, 1e-5));
        });
    }});

    cs.push_back({"channel_affine", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {2, 3, 2, 2}), true, "x");
        auto g = petah::make_var(rand_t(rng, {3}, 0.5, 1.5), true, "g");
        auto b = petah::make_var(rand_t(rng, {3}), true, "b");
        LossWeights lw(seed + 1000);
        return check({x, g, b}, [&](TapeD& t) {
            return lw(t, petah::channel_affine<double>(&t, x, g, b));
        });
    }});

    cs.push_back({"matmul", [](std::uint64_t seed) {
        Rng rng(seed);
        auto a = petah::make_var(rand_t(rng, {3, 4}), true, "a");
        auto b = petah::make_var(rand_t(rng, {4, 2}), true, "b");
        LossWeights lw(seed + 1000);
        return check({a, b}, [&](TapeD& t) { return lw(t, petah::matmul<double>(&t, a, b)); });
    }});

    cs.push_back({"transpose", [](std::uint64_t seed) {
        Rng rng(seed);
        auto a = petah::make_var(rand_t(rng, {3, 5}), true, "a");
        LossWeights lw(seed + 1000);
        return check({a}, [&](TapeD& t) { return lw(t, petah::transpose<double>(&t, a)); });
    }});

    cs.push_back({"linear", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {3, 4}), true, "x");
        auto w = petah::make_var(rand_t(rng, {2, 4}), true, "w");
        auto b = petah::make_var(rand_t(rng, {2}), true, "b");
        LossWeights lw(seed + 1000);
        return check({x, w, b}, [&](TapeD& t) { return lw(t, petah::linear<double>(&t, x, w, b)); });
    }});

    cs.push_back({"conv2d", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {2, 2, 5, 5}), true, "x");
        auto w = petah::make_var(rand_t(rng, {3, 2, 3, 3}), true, "w");
        auto b = petah::make_var(rand_t(rng, {3}), true, "b");
        LossWeights lw(seed + 1000);
        return check({x, w, b}, [&](TapeD& t) {
            return lw(t, petah::conv2d<double>(&t, x, w, b, 2, 1, 1));
        });
    }});

    cs.push_back({"conv2d_grouped", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {1, 4, 4, 4}), true, "x");
        auto w = petah::make_var(rand_t(rng, {6, 2, 3, 3}), true, "w");
        auto b = petah::make_var(rand_t(rng, {6}), true, "b");
        LossWeights lw(seed + 1000);
        return check({x, w, b}, [&](TapeD& t) {
            return lw(t, petah::conv2d<double>(&t, x, w, b, 1, 1, 2));
        });
    }});

    cs.push_back({"avg_pool2d", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {2, 2, 5, 5}), true, "x");
        LossWeights lw(seed + 1000);
        return check({x}, [&](TapeD& t) { return lw(t, petah::avg_pool2d<double>(&t, x, 3, 2, 1)); });
    }});

    cs.push_back({"reshape", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {3, 4}), true, "x");
        LossWeights lw(seed + 1000);
        return check({x}, [&](TapeD& t) { return lw(t, petah::reshape<double>(&t, x, {2, 6})); });
    }});

    cs.push_back({"flatten_spatial", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {2, 3, 2, 2}), true, "x");
        LossWeights lw(seed + 1000);
        return check({x}, [&](TapeD& t) { return lw(t, petah::flatten_spatial<double>(&t, x)); });
    }});

    cs.push_back({"slice_cols", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {3, 6}), true, "x");
        LossWeights lw(seed + 1000);
        return check({x}, [&](TapeD& t) { return lw(t, petah::slice_cols<double>(&t, x, 1, 3)); });
    }});

    cs.push_back({"concat_cols", [](std::uint64_t seed) {
        Rng rng(seed);
        auto a = petah::make_var(rand_t(rng, {3, 2}), true, "a");
        auto b = petah::make_var(rand_t(rng, {3, 4}), true, "b");
        LossWeights lw(seed + 1000);
        return check({a, b}, [&](TapeD& t) {
            std::vector<VarD> parts{a, b};
            return lw(t, petah::concat_cols<double>(&t, parts));
        });
    }});

    cs.push_back({"select_sample", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {3, 2, 4}), true, "x");
        LossWeights lw(seed + 1000);
        return check({x}, [&](TapeD& t) { return lw(t, petah::select_sample<double>(&t, x, 1)); });
    }});

    cs.push_back({"stack_samples", [](std::uint64_t seed) {
        Rng rng(seed);
        auto a = petah::make_var(rand_t(rng, {2, 3}), true, "a");
        auto b = petah::make_var(rand_t(rng, {2, 3}), true, "b");
        LossWeights lw(seed + 1000);
        return check({a, b}, [&](TapeD& t) {
            std::vector<VarD> parts{a, b};
            return lw(t, petah::stack_samples<double>(&t, parts));
        });
    }});

    cs.push_back({"mean_tokens", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {2, 3, 4}), true, "x");
        LossWeights lw(seed + 1000);
        return check({x}, [&](TapeD& t) { return lw(t, petah::mean_tokens<double>(&t, x)); });
    }});

    cs.push_back({"sum_all", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {3, 4}), true, "x");
        return check({x}, [&](TapeD& t) { return petah::sum_all<double>(&t, x); });
    }});

    cs.push_back({"mean_all", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {3, 4}), true, "x");
        return check({x}, [&](TapeD& t) { return petah::mean_all<double>(&t, x); });
    }});

    cs.push_back({"cross_entropy", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = petah::make_var(rand_t(rng, {4, 5}, -2.0, 2.0), true, "x");
        std::vector<int> labels{0, 2, 4, 1};
        return check({x}, [&](TapeD& t) { return petah::cross_entropy<double>(&t, x, labels); });
    }});

    return cs;
}

// Factored adapter paths with the base weight frozen: gradients flow through
// A and B only.
inline std::vector<OpCase> adapter_cases() {
    std::vector<OpCase> cs;

    cs.push_back({"lora_linear_path", [](std::uint64_t seed) {
        Rng rng(seed);
        const int p = 5, q = 4, r = 2;
        auto x = petah::make_var(rand_t(rng, {3, q}), false, "x");
        auto w = petah::make_var(rand_t(rng, {p, q}), false, "w");
        auto b = petah::make_var(rand_t(rng, {p}), false, "b");
        petah::LoraFactorsT<double> f;
        f.target = "w";
        f.A = petah::make_var(rand_t(rng, {r, q}), true, "lora_a");
        f.B = petah::make_var(rand_t(rng, {p, r}), true, "lora_b");
        f.rank = r;
        f.scale = 1.0;
        LossWeights lw(seed + 1000);
        return check({f.A, f.B}, [&](TapeD& t) {
            return lw(t, petah::lora_linear_forward<double>(&t, x, w, b, f));
        });
    }});

    cs.push_back({"lora_per_head_path", [](std::uint64_t seed) {
        Rng rng(seed);
        const int q = 6, slice = 3, heads = 2, r = 2;
        auto x = petah::make_var(rand_t(rng, {4, q}), false, "x");
        auto w = petah::make_var(rand_t(rng, {slice * heads, q}), false, "w");
        auto b = petah::make_var(rand_t(rng, {slice * heads}), false, "b");
        std::vector<petah::LoraFactorsT<double>> fs(heads);
        std::vector<VarD> params;
        for (int h = 0; h < heads; ++h) {
            fs[h].target = "w";
            fs[h].A = petah::make_var(rand_t(rng, {r, q}), true, "a" + std::to_string(h));
            fs[h].B = petah::make_var(rand_t(rng, {slice, r}), true, "b" + std::to_string(h));
            fs[h].rank = r;
            fs[h].scale = 1.0;
            fs[h].row_offset = h * slice;
            params.push_back(fs[h].A);
            params.push_back(fs[h].B);
        }
        std::vector<const petah::LoraFactorsT<double>*> ptrs{&fs[0], &fs[1]};
        LossWeights lw(seed + 1000);
        return check(params, [&](TapeD& t) {
            return lw(t, petah::adapted_linear<double>(&t, x, w, b, ptrs));
        });
    }});

    cs.push_back({"conv_lora_path", [](std::uint64_t seed) {
        Rng rng(seed);
        const int p = 4, q = 3, k = 3, r = 2;
        auto x = petah::make_var(rand_t(rng, {2, q, 5, 5}), false, "x");
        auto w = petah::make_var(rand_t(rng, {p, q, k, k}), false, "w");
        auto b = petah::make_var(rand_t(rng, {p}), false, "b");
        petah::LoraFactorsT<double> f;
        f.target = "w";
        f.A = petah::make_var(rand_t(rng, {r, q, k, k}), true, "lora_a");
        f.B = petah::make_var(rand_t(rng, {p, r, 1, 1}), true, "lora_b");
        f.rank = r;
        f.scale = 1.0;
        f.is_conv = true;
        f.stride = 2;
        f.padding = 1;
        LossWeights lw(seed + 1000);
        return check({f.A, f.B}, [&](TapeD& t) {
            return lw(t, petah::conv_lora_forward<double>(&t, x, w, b, 2, 1, 1, f));
        });
    }});

    return cs;
}

}  // namespace cases
