#include "petah/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace petah {

std::int64_t SparsityMask::masked_elements() const {
    std::int64_t n = 0;
    for (const auto& [name, m] : masks) n += m.numel();
    return n;
}

std::int64_t SparsityMask::zero_count() const {
    std::int64_t z = 0;
    for (const auto& [name, m] : masks) {
        for (std::int64_t i = 0; i < m.numel(); ++i) z += m[i] == 0.0f ? 1 : 0;
    }
    return z;
}

double SparsityMask::achieved() const {
    const std::int64_t n = masked_elements();
    return n == 0 ? 0.0 : static_cast<double>(zero_count()) / static_cast<double>(n);
}

bool prunable(const LayerNode& node, const std::string& local) {
    switch (node.kind) {
        case NodeKind::Conv:
        case NodeKind::Linear:
            return local == "weight";
        case NodeKind::Attention:
            return local.rfind("w_", 0) == 0;
        default:
            return false;
    }
}

namespace {

void check_ratio(double s) {
    if (!(s >= 0.0) || s >= 1.0) throw ValueError("prune: sparsity ratio must lie in [0, 1)");
}

std::int64_t prune_count(double s, std::int64_t n) {
    const auto k = static_cast<std::int64_t>(std::ceil(s * static_cast<double>(n))) - 1;
    return std::max<std::int64_t>(0, k);
}

// Indices of the k smallest magnitudes; ties keep the earliest row-major
// entry by pruning later indices first.
void mark_smallest(const float* data, std::int64_t n, std::int64_t k, float* mask) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [data](std::int64_t a, std::int64_t b) {
        const float ma = std::fabs(data[a]), mb = std::fabs(data[b]);
        if (ma != mb) return ma < mb;
        return a > b;
    });
    for (std::int64_t i = 0; i < k; ++i) mask[order[static_cast<std::size_t>(i)]] = 0.0f;
}

std::vector<VarPtr<float>> prunable_params(const ModuleGraph& graph) {
    std::vector<VarPtr<float>> out;
    for (const auto& node : graph.nodes) {
        for (const auto& [local, p] : node.params) {
            if (prunable(node, local)) out.push_back(p);
        }
    }
    return out;
}

}  // namespace

Tensor prune_mask_for(const Tensor& w, double s) {
    check_ratio(s);
    Tensor mask = Tensor::full(w.shape(), 1.0f);
    mark_smallest(w.raw(), w.numel(), prune_count(s, w.numel()), mask.raw());
    return mask;
}

SparsityMask magnitude_prune(const ModuleGraph& graph, double s, PruneScope scope) {
    check_ratio(s);
    SparsityMask out;
    out.target = s;
    out.scope = scope;
    const auto params = prunable_params(graph);
    if (scope == PruneScope::PerLayer) {
        for (const auto& p : params) out.masks.emplace(p->name, prune_mask_for(p->value, s));
        return out;
    }

    // Global: one pooled ranking; ties ordered by position in the concatenated
    // row-major layout so the tie rule matches the per-layer one.
    std::int64_t total = 0;
    for (const auto& p : params) total += p->value.numel();
    std::vector<std::pair<std::size_t, std::int64_t>> entries;  // (param index, element index)
    entries.reserve(static_cast<std::size_t>(total));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::int64_t i = 0; i < params[pi]->value.numel(); ++i) entries.emplace_back(pi, i);
    }
    std::sort(entries.begin(), entries.end(), [&](const auto& a, const auto& b) {
        const float ma = std::fabs(params[a.first]->value[a.second]);
        const float mb = std::fabs(params[b.first]->value[b.second]);
        if (ma != mb) return ma < mb;
        return a.first != b.first ? a.first > b.first : a.second > b.second;
    });
    for (const auto& p : params) out.masks.emplace(p->name, Tensor::full(p->value.shape(), 1.0f));
    const std::int64_t k = prune_count(s, total);
    for (std::int64_t i = 0; i < k; ++i) {
        const auto& [pi, ei] = entries[static_cast<std::size_t>(i)];
        out.masks.at(params[pi]->name)[ei] = 0.0f;
    }
    return out;
}

namespace {

void check_binding(const ModuleGraph& graph, const SparsityMask& mask) {
    for (const auto& [name, m] : mask.masks) {
        const auto p = graph.find_param(name);  // throws on unknown name
        if (p->value.shape() != m.shape()) {
            throw ShapeError("mask for '" + name + "' has shape " + shape_str(m.shape()) + ", parameter is " +
                             shape_str(p->value.shape()));
        }
        for (std::int64_t i = 0; i < m.numel(); ++i) {
            if (m[i] != 0.0f && m[i] != 1.0f) throw ValueError("mask for '" + name + "' is not binary");
        }
    }
}

}  // namespace

void enforce_masks(ModuleGraph& graph, const std::map<std::string, Tensor>& masks) {
    for (const auto& [name, m] : masks) {
        const auto p = graph.find_param(name);
        for (std::int64_t i = 0; i < m.numel(); ++i) {
            if (m[i] == 0.0f) p->value[i] = 0.0f;
        }
    }
}

void apply_mask(ModuleGraph& graph, const SparsityMask& mask) {
    check_binding(graph, mask);
    // assign instead of multiply so pruned slots are +0.0 exactly, matching
    // what enforce_masks writes after each optimizer step
    for (const auto& [name, m] : mask.masks) {
        const auto p = graph.find_param(name);
        for (std::int64_t i = 0; i < m.numel(); ++i) {
            if (m[i] == 0.0f) p->value[i] = 0.0f;
        }
    }
}

void attach_mask(AdaptedModel& m, const SparsityMask& mask) {
    apply_mask(m.graph, mask);
    m.masks = mask.masks;
}

double recount_sparsity(const ModuleGraph& graph, const SparsityMask& mask) {
    check_binding(graph, mask);
    std::int64_t zeros = 0, total = 0;
    for (const auto& [name, m] : mask.masks) {
        const auto p = graph.find_param(name);
        total += p->value.numel();
        for (std::int64_t i = 0; i < p->value.numel(); ++i) zeros += p->value[i] == 0.0f ? 1 : 0;
    }
    return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

}  // namespace petah
