#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "petah/tensor.hpp"

namespace petah {

// A tensor participating in differentiation. Leaves with requires_grad set are
// parameters; intermediate variables propagate the flag from their inputs.
template <typename S>
struct VariableT {
    TensorT<S> value;
    TensorT<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::string name;

    bool has_grad() const { return !grad.empty(); }

    void ensure_grad() {
        if (grad.empty()) grad = TensorT<S>(value.shape());
    }

    void zero_grad() {
        if (!grad.empty()) grad.fill(S(0));
    }

    void accumulate_grad(const TensorT<S>& g) {
        if (g.shape() != value.shape()) {
            throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                             shape_str(value.shape()) + " for '" + name + "'");
        }
        ensure_grad();
        S* dst = grad.raw();
        const S* src = g.raw();
        const std::int64_t n = g.numel();
        for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
    }
};

template <typename S>
using VarPtr = std::shared_ptr<VariableT<S>>;

template <typename S>
VarPtr<S> make_var(TensorT<S> value, bool requires_grad = false, std::string name = "") {
    auto v = std::make_shared<VariableT<S>>();
    v->value = std::move(value);
    v->requires_grad = requires_grad;
    v->name = std::move(name);
    return v;
}

// Ordered record of executed differentiable operations. Backward replays the
// record in exact reverse execution order; gradients accumulate additively
// for shared inputs. One tape per training run, single-threaded.
template <typename S>
class TapeT {
public:
    void record(std::function<void()> backward_step) { steps_.push_back(std::move(backward_step)); }

    std::size_t size() const { return steps_.size(); }

    void clear() { steps_.clear(); }

    void replay_backward() {
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> steps_;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

// Seed d(loss)/d(loss) = 1 and propagate through the tape.
template <typename S>
void backward(TapeT<S>& tape, const VarPtr<S>& loss) {
    if (!loss || loss->value.numel() != 1) {
        throw ShapeError("backward: loss must be a scalar tensor");
    }
    loss->ensure_grad();
    loss->grad[0] += S(1);
    tape.replay_backward();
}

// Gradients for a set of named parameters. Parameters disconnected from the
// loss receive zero gradients.
template <typename S>
std::map<std::string, TensorT<S>> backward_gradients(TapeT<S>& tape, const VarPtr<S>& loss,
                                                     std::span<const VarPtr<S>> params) {
    for (const auto& p : params) p->zero_grad();
    if (loss) loss->zero_grad();
    backward(tape, loss);
    std::map<std::string, TensorT<S>> out;
    for (const auto& p : params) {
        p->ensure_grad();
        out.emplace(p->name, p->grad);
    }
    return out;
}

}  // namespace petah
