#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "petah/adapters.hpp"
#include "petah/serialize.hpp"

// Per-task adapter bundles: the factor tensors plus the trained head,
// attachable to a backbone whose frozen parameters hash to the recorded
// fingerprint. Strategies that train backbone tensors (full_ft, attn_ft)
// cannot be expressed as a bundle; checkpoint those instead.

namespace petah {

// SHA-256 over arch plus (name, shape, payload bytes) of every non-head
// parameter, in graph order. Head training never changes it.
std::vector<std::uint8_t> backbone_fingerprint(const ModuleGraph& graph);

struct BundleFactor {
    std::string prefix;  // factor parameter stem, e.g. "stage4.block0.attn.w_q.head1"
    std::string target;  // base parameter the factor feeds
    Tensor A, B;
};

struct TaskAdapterBundle {
    std::string task;
    AdaptationPolicy policy;
    std::vector<BundleFactor> factors;
    Tensor head_weight, head_bias;
    std::vector<std::uint8_t> fingerprint;

    std::int64_t adapter_param_count() const;
};

TaskAdapterBundle make_bundle(const AdaptedModel& model, const std::string& task);

struct BundleSizes {
    std::uint64_t file = 0;
    std::uint64_t factor_bytes = 0;
    std::uint64_t head_bytes = 0;
};

BundleSizes save_adapter_bundle(const std::string& path, const TaskAdapterBundle& bundle);
TaskAdapterBundle load_adapter_bundle(const std::string& path);

// Rebuilds the adapted model on a backbone with a matching fingerprint;
// masks (usually the ones stored beside the backbone checkpoint) are carried
// onto the result. Fingerprint mismatch throws VerificationError.
AdaptedModel attach(const ModuleGraph& backbone, const TaskAdapterBundle& bundle,
                    const std::map<std::string, Tensor>& masks = {});

}  // namespace petah
