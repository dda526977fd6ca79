#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "petah/adapters.hpp"

// Magnitude pruning masks and their composition with adapters. Masks bind to
// conv/linear/attention weight tensors only; biases, norms, positional tables,
// and the classifier head are never pruned.

namespace petah {

enum class PruneScope { PerLayer, Global };

struct SparsityMask {
    std::map<std::string, Tensor> masks;  // parameter name -> {0,1} tensor of the same shape
    double target = 0.0;
    PruneScope scope = PruneScope::PerLayer;

    bool empty() const { return masks.empty(); }
    std::int64_t masked_elements() const;
    std::int64_t zero_count() const;
    double achieved() const;  // zero fraction over all masked elements
};

// True for weight tensors the pruner may touch.
bool prunable(const LayerNode& node, const std::string& local);

// Mask for one tensor: zeroes the k = max(0, ceil(s*n) - 1) smallest-|w|
// entries, so the achieved fraction is within one element of s and a mask
// never empties a tensor. Among tied magnitudes the earliest entry in
// row-major order is retained.
Tensor prune_mask_for(const Tensor& w, double s);

SparsityMask magnitude_prune(const ModuleGraph& graph, double s, PruneScope scope = PruneScope::PerLayer);

// Elementwise-multiplies the bound weights; masked entries become exactly 0.
void apply_mask(ModuleGraph& graph, const SparsityMask& mask);

// Validates binding, applies the mask to the model's backbone, and stores it
// so training enforcement and the merge policy can see it.
void attach_mask(AdaptedModel& m, const SparsityMask& mask);

// Re-zeroes masked entries in place (used after every optimizer step).
void enforce_masks(ModuleGraph& graph, const std::map<std::string, Tensor>& masks);

// Recount of actual zeros in the graph's masked weights.
double recount_sparsity(const ModuleGraph& graph, const SparsityMask& mask);

}  // namespace petah
