#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "petah/lora.hpp"
#include "petah/model.hpp"

// Adaptation strategies and adapter injection. An AdaptedModel owns a deep
// copy of the backbone graph plus the factor tensors bound to it; the frozen
// backbone tensors are never written by training, only by merge/unmerge.

namespace petah {

enum class Strategy {
    LinearProbe,
    FullFt,
    AttnFt,
    LoraAttn,
    LoraAttnMlp,
    Petah,
};

const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);  // accepts the CLI spellings, e.g. "lora_attn"

struct AdaptationPolicy {
    Strategy strategy = Strategy::LinearProbe;
    int rank = 8;       // LoRA rank on attention (and MLP) linears
    int conv_rank = 1;  // rank of the convolutional factors (petah only)
    float scale = 1.0f;
};

void validate_policy(const AdaptationPolicy& policy);

// Closed-form adapter parameter counts. Per attention node the per-head
// allocation gives h*r*(2 d_k + d_v + 3 d) across Q/K/V plus r*(d + h*d_v)
// for the projection; per conv r_c*q*k^2 + r_c*p. The classifier head is
// excluded. Strategies without factors count zero.
struct AdapterCount {
    std::vector<std::pair<std::string, std::int64_t>> per_param;  // target name -> count
    std::int64_t total = 0;
};

AdapterCount count_adapter_params(const AdaptationPolicy& policy, const ModuleGraph& graph);

struct AdaptedModel {
    ModuleGraph graph;  // private deep copy; adapters index into it by name
    AdaptationPolicy policy;
    std::vector<std::unique_ptr<LoraFactors>> adapters;
    std::map<std::string, std::vector<const LoraFactors*>> by_target;  // ordered by row slice
    std::set<std::string> trainable;       // parameter names, factors included
    std::map<std::string, Tensor> masks;   // backbone sparsity masks, empty when dense
    bool merged = false;
    bool dense_override = false;  // factors were merged densely over a sparse backbone

    AdaptedModel() = default;
    AdaptedModel(AdaptedModel&&) = default;
    AdaptedModel& operator=(AdaptedModel&&) = default;
    AdaptedModel(const AdaptedModel&) = delete;
    AdaptedModel& operator=(const AdaptedModel&) = delete;

    FactorLookup factor_lookup() const;  // valid while this model is alive

    std::vector<VarPtr<float>> head_params() const;
    std::vector<VarPtr<float>> adapter_params() const;         // factor A/B tensors, creation order
    std::vector<VarPtr<float>> base_trainable_params() const;  // unfrozen backbone tensors (attn_ft, full_ft)
    std::vector<VarPtr<float>> trainable_params() const;       // head + adapters + unfrozen backbone

    std::int64_t adapter_param_count() const;  // element count over allocated factors
};

AdaptedModel inject(const ModuleGraph& graph, const AdaptationPolicy& policy, std::uint64_t seed);

// Zero-fills the classifier head, the starting point for a fresh task.
void reset_head(AdaptedModel& m);

VarPtr<float> forward(const AdaptedModel& m, const Tensor& batch, RunMode mode, Tape* tape = nullptr);

// Folds every factor into its base parameter (or subtracts it back out).
// Merging a masked backbone densifies the pruned weights, so it is refused
// unless force_dense is set; unmerge restores the factored form and re-applies
// the masks so pruned entries return to exact zeros.
void merge_all(AdaptedModel& m, bool force_dense = false);
void unmerge_all(AdaptedModel& m);

// Bitwise view of every parameter outside the trainable set, for integrity checks.
std::map<std::string, Tensor> snapshot_frozen(const AdaptedModel& m);
// Names of frozen parameters whose bytes changed since the snapshot.
std::vector<std::string> frozen_diff(const AdaptedModel& m, const std::map<std::string, Tensor>& snapshot);

}  // namespace petah
