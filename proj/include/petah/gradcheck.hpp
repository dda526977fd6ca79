#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "petah/autograd.hpp"
#include "petah/tensor.hpp"

// Central-difference gradient checking. The loss builder is called repeatedly
// with a fresh tape while parameter entries are perturbed in place, so it must
// read parameter values at call time rather than caching them.

namespace petah {

struct GradCheckEntry {
    std::string param;
    std::int64_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    bool passed = true;
    double max_rel_error = 0.0;
    std::int64_t checked = 0;
    GradCheckEntry worst;
    std::vector<GradCheckEntry> failures;
};

template <typename S>
GradCheckReport gradcheck(const std::function<VarPtr<S>(TapeT<S>&)>& loss_fn, std::span<const VarPtr<S>> params,
                          double eps, double tolerance) {
    if (!(eps >= 1e-5 && eps <= 1e-3)) throw ValueError("gradcheck: step size must lie in [1e-5, 1e-3]");
    if (!(tolerance > 0.0)) throw ValueError("gradcheck: tolerance must be positive");

    const auto eval_loss = [&]() -> double {
        TapeT<S> tape;
        auto loss = loss_fn(tape);
        if (loss->value.numel() != 1) throw ValueError("gradcheck: loss must be scalar");
        return static_cast<double>(loss->value[0]);
    };

    TapeT<S> tape;
    auto loss = loss_fn(tape);
    if (loss->value.numel() != 1) throw ValueError("gradcheck: loss must be scalar");
    auto grads = backward_gradients(tape, loss, params);

    GradCheckReport report;
    for (const auto& p : params) {
        const TensorT<S>& g = grads.at(p->name);
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            const S saved = p->value[i];
            p->value[i] = saved + static_cast<S>(eps);
            const double up = eval_loss();
            p->value[i] = saved - static_cast<S>(eps);
            const double down = eval_loss();
            p->value[i] = saved;

            GradCheckEntry e;
            e.param = p->name;
            e.index = i;
            e.analytic = static_cast<double>(g[i]);
            e.numeric = (up - down) / (2.0 * eps);
            const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-8});
            e.rel_error = std::abs(e.analytic - e.numeric) / denom;

            ++report.checked;
            if (e.rel_error > report.max_rel_error) {
                report.max_rel_error = e.rel_error;
                report.worst = e;
            }
            if (e.rel_error > tolerance) {
                report.passed = false;
                if (report.failures.size() < 16) report.failures.push_back(e);
            }
        }
    }
    return report;
}

}  // namespace petah
