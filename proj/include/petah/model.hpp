#pragma once

#include <array>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "petah/lora.hpp"
#include "petah/ops.hpp"
#include "petah/rng.hpp"

// Module graphs for the miniature hybrid network (conv stem, Meta4D conv
// stages, Meta3D transformer stage) and the ViT baseline. A graph is a flat,
// ordered pipeline; residual blocks are delimited by begin/end marker nodes.

namespace petah {

enum class NodeKind {
    Conv,
    Linear,
    Attention,
    LayerNorm,
    BatchNormFrozen,
    Pool,
    Activation,
    FlattenSpatial,
    PosEmbed,
    ResidualBegin,
    ResidualEnd,
    ClassifierHead,
};

enum class PoolOp { Avg2d, TokenMean };
enum class Act { Relu, Gelu };
enum class RunMode { Train, Eval };

const char* node_kind_name(NodeKind kind);

struct LayerNode {
    NodeKind kind;
    std::string name;   // unique within the graph; parameter names derive from it
    std::string stage;  // stem, stage1..stage4, head
    std::map<std::string, VarPtr<float>> params;

    int stride = 1;
    int padding = 0;
    int groups = 1;
    int pool_k = 0;
    int pool_stride = 1;
    int pool_pad = 0;
    PoolOp pool_op = PoolOp::Avg2d;
    Act act = Act::Gelu;
    int heads = 0;
    int d_k = 0;
    int d_v = 0;
    int width = 0;
    float eps = 1e-5f;

    const VarPtr<float>& p(const std::string& local) const;
    bool has(const std::string& local) const { return params.count(local) != 0; }
};

struct ModelConfig {
    int resolution = 32;
    std::array<int, 4> widths{16, 32, 64, 96};
    std::array<int, 4> blocks{1, 1, 1, 2};
    int heads = 4;
    int d_k = 24;
    int d_v = 24;
    int mlp_ratio = 2;
    int num_classes = 10;
    int patch_size = 4;
};

void validate_config(const ModelConfig& cfg, bool vit);

struct ModuleGraph {
    std::string arch;  // "hybrid" or "vit"
    ModelConfig config;
    std::vector<LayerNode> nodes;

    std::vector<VarPtr<float>> parameters() const;           // node order, local-name order
    std::vector<VarPtr<float>> backbone_parameters() const;  // parameters() minus the classifier head
    VarPtr<float> find_param(const std::string& full_name) const;
    const LayerNode& node(const std::string& name) const;
    ModuleGraph clone() const;
};

ModuleGraph build_mini_hybrid(const ModelConfig& config, std::uint64_t seed = 0);
ModuleGraph build_mini_vit(const ModelConfig& config, std::uint64_t seed = 0);

// Maps a base parameter's full name to the factors bound to it (ordered by
// row slice). Absent or empty means the parameter runs unadapted.
using FactorLookup = std::function<std::span<const LoraFactors* const>(const std::string& param_name)>;

VarPtr<float> forward(const ModuleGraph& graph, const Tensor& batch, RunMode mode, Tape* tape = nullptr,
                      const FactorLookup* lookup = nullptr);

// Symbolic shape propagation from N x 3 x H x W; returns the logits shape and
// throws ShapeError where the real forward would.
Shape check_shapes(const ModuleGraph& graph, int batch);

// Single-sequence multi-head self-attention: L x d in, L x d out.
Tensor mhsa_forward(const Tensor& x, const LayerNode& node);

}  // namespace petah
