#include "petah/model.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace petah {

const char* node_kind_name(NodeKind kind) {
    switch (kind) {
        case NodeKind::Conv: return "conv";
        case NodeKind::Linear: return "linear";
        case NodeKind::Attention: return "attention";
        case NodeKind::LayerNorm: return "layer_norm";
        case NodeKind::BatchNormFrozen: return "batch_norm_frozen";
        case NodeKind::Pool: return "pool";
        case NodeKind::Activation: return "activation";
        case NodeKind::FlattenSpatial: return "flatten_spatial";
        case NodeKind::PosEmbed: return "pos_embed";
        case NodeKind::ResidualBegin: return "residual_begin";
        case NodeKind::ResidualEnd: return "residual_end";
        case NodeKind::ClassifierHead: return "classifier_head";
    }
    return "unknown";
}

const VarPtr<float>& LayerNode::p(const std::string& local) const {
    auto it = params.find(local);
    if (it == params.end()) throw ValueError("node " + name + " has no parameter '" + local + "'");
    return it->second;
}

void validate_config(const ModelConfig& cfg, bool vit) {
    for (int w : cfg.widths) {
        if (w < 1) throw ValueError("model config: widths must be positive");
    }
    for (int b : cfg.blocks) {
        if (b < 0) throw ValueError("model config: block counts must be non-negative");
    }
    if (cfg.heads < 1 || cfg.d_k < 1 || cfg.d_v < 1) throw ValueError("model config: heads and head dims must be positive");
    if (cfg.mlp_ratio < 1) throw ValueError("model config: MLP ratio must be positive");
    if (cfg.num_classes < 1) throw ValueError("model config: need at least one class");
    if (cfg.resolution < 4) throw ShapeError("model config: resolution too small for the stem");
    if (vit) {
        if (cfg.patch_size < 1) throw ValueError("model config: patch size must be positive");
        if (cfg.resolution % cfg.patch_size != 0) {
            throw ShapeError("model config: resolution not divisible by patch size");
        }
    }
}

std::vector<VarPtr<float>> ModuleGraph::parameters() const {
    std::vector<VarPtr<float>> out;
    for (const auto& n : nodes) {
        for (const auto& [local, p] : n.params) out.push_back(p);
    }
    return out;
}

std::vector<VarPtr<float>> ModuleGraph::backbone_parameters() const {
    std::vector<VarPtr<float>> out;
    for (const auto& n : nodes) {
        if (n.kind == NodeKind::ClassifierHead) continue;
        for (const auto& [local, p] : n.params) out.push_back(p);
    }
    return out;
}

VarPtr<float> ModuleGraph::find_param(const std::string& full_name) const {
    for (const auto& n : nodes) {
        for (const auto& [local, p] : n.params) {
            if (p->name == full_name) return p;
        }
    }
    throw ValueError("graph has no parameter '" + full_name + "'");
}

const LayerNode& ModuleGraph::node(const std::string& name) const {
    for (const auto& n : nodes) {
        if (n.name == name) return n;
    }
    throw ValueError("graph has no node '" + name + "'");
}

ModuleGraph ModuleGraph::clone() const {
    ModuleGraph out;
    out.arch = arch;
    out.config = config;
    out.nodes = nodes;
    for (auto& n : out.nodes) {
        for (auto& [local, p] : n.params) {
            p = make_var(p->value, p->requires_grad, p->name);
        }
    }
    return out;
}

namespace {

struct Builder {
    ModuleGraph g;
    Rng rng;

    explicit Builder(std::uint64_t seed) : rng(seed) {}

    LayerNode& add(NodeKind kind, std::string name, std::string stage) {
        LayerNode n;
        n.kind = kind;
        n.name = std::move(name);
        n.stage = std::move(stage);
        g.nodes.push_back(std::move(n));
        return g.nodes.back();
    }

    void param(LayerNode& n, const std::string& local, Tensor value) {
        n.params.emplace(local, make_var(std::move(value), false, n.name + "." + local));
    }

    Tensor fan_in_uniform(const Shape& shape, int fan_in) {
        const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
        return uniform_tensor<float>(rng, shape, -bound, bound);
    }

    void conv(const std::string& name, const std::string& stage, int in, int out, int k, int stride, int pad) {
        auto& n = add(NodeKind::Conv, name, stage);
        n.stride = stride;
        n.padding = pad;
        n.groups = 1;
        param(n, "weight", fan_in_uniform({out, in, k, k}, in * k * k));
        param(n, "bias", Tensor({out}));
    }

    void frozen_bn(const std::string& name, const std::string& stage, int channels) {
        auto& n = add(NodeKind::BatchNormFrozen, name, stage);
        param(n, "gamma", Tensor::ones({channels}));
        param(n, "beta", Tensor({channels}));
    }

    void layer_norm_node(const std::string& name, const std::string& stage, int width) {
        auto& n = add(NodeKind::LayerNorm, name, stage);
        param(n, "gamma", Tensor::ones({width}));
        param(n, "beta", Tensor({width}));
    }

    void act_node(const std::string& name, const std::string& stage, Act a) {
        add(NodeKind::Activation, name, stage).act = a;
    }

    void linear_node(const std::string& name, const std::string& stage, int in, int out) {
        auto& n = add(NodeKind::Linear, name, stage);
        param(n, "weight", fan_in_uniform({out, in}, in));
        param(n, "bias", Tensor({out}));
    }

    void meta4d_block(const std::string& prefix, const std::string& stage, int width, int ratio) {
        add(NodeKind::ResidualBegin, prefix + ".res1", stage);
        auto& mixer = add(NodeKind::Pool, prefix + ".mixer", stage);
        mixer.pool_op = PoolOp::Avg2d;
        mixer.pool_k = 3;
        mixer.pool_stride = 1;
        mixer.pool_pad = 1;
        add(NodeKind::ResidualEnd, prefix + ".res1end", stage);

        const int hidden = width * ratio;
        add(NodeKind::ResidualBegin, prefix + ".res2", stage);
        conv(prefix + ".mlp.conv1", stage, width, hidden, 1, 1, 0);
        frozen_bn(prefix + ".mlp.norm1", stage, hidden);
        act_node(prefix + ".mlp.act", stage, Act::Gelu);
        conv(prefix + ".mlp.conv2", stage, hidden, width, 1, 1, 0);
        frozen_bn(prefix + ".mlp.norm2", stage, width);
        add(NodeKind::ResidualEnd, prefix + ".res2end", stage);
    }

    void meta3d_block(const std::string& prefix, const std::string& stage, const ModelConfig& cfg) {
        const int d = cfg.widths[3];
        add(NodeKind::ResidualBegin, prefix + ".res1", stage);
        layer_norm_node(prefix + ".norm1", stage, d);
        auto& attn = add(NodeKind::Attention, prefix + ".attn", stage);
        attn.heads = cfg.heads;
        attn.d_k = cfg.d_k;
        attn.d_v = cfg.d_v;
        attn.width = d;
        const int hk = cfg.heads * cfg.d_k, hv = cfg.heads * cfg.d_v;
        param(attn, "w_q", fan_in_uniform({hk, d}, d));
        param(attn, "b_q", Tensor({hk}));
        param(attn, "w_k", fan_in_uniform({hk, d}, d));
        param(attn, "b_k", Tensor({hk}));
        param(attn, "w_v", fan_in_uniform({hv, d}, d));
        param(attn, "b_v", Tensor({hv}));
        param(attn, "w_proj", fan_in_uniform({d, hv}, hv));
        param(attn, "b_proj", Tensor({d}));
        add(NodeKind::ResidualEnd, prefix + ".res1end", stage);

        add(NodeKind::ResidualBegin, prefix + ".res2", stage);
        layer_norm_node(prefix + ".norm2", stage, d);
        linear_node(prefix + ".mlp.fc1", stage, d, d * cfg.mlp_ratio);
        act_node(prefix + ".mlp.act", stage, Act::Gelu);
        linear_node(prefix + ".mlp.fc2", stage, d * cfg.mlp_ratio, d);
        add(NodeKind::ResidualEnd, prefix + ".res2end", stage);
    }

    void pos_embed_node(const std::string& name, const std::string& stage, int tokens, int width) {
        auto& n = add(NodeKind::PosEmbed, name, stage);
        param(n, "table", normal_tensor<float>(rng, {tokens, width}, 0.0f, 0.02f));
    }

    void head(int width, int classes) {
        auto& pool = add(NodeKind::Pool, "head.pool", "head");
        pool.pool_op = PoolOp::TokenMean;
        auto& fc = add(NodeKind::ClassifierHead, "head.fc", "head");
        param(fc, "weight", Tensor({classes, width}));
        param(fc, "bias", Tensor({classes}));
    }

    ModuleGraph finish() {
        std::set<std::string> names;
        for (const auto& n : g.nodes) {
            if (!names.insert(n.name).second) throw ValueError("duplicate node name '" + n.name + "'");
        }
        check_shapes(g, 1);
        return std::move(g);
    }
};

// Spatial extent after a conv, insisting that stride-2 layers see an even
// input so the resolution divides the cumulative stride.
int strided_extent(int extent, int k, int stride, int pad) {
    if (stride == 2 && extent % 2 != 0) throw ShapeError("resolution does not divide the cumulative stride");
    return (extent + 2 * pad - k) / stride + 1;
}

}  // namespace

ModuleGraph build_mini_hybrid(const ModelConfig& config, std::uint64_t seed) {
    validate_config(config, false);
    Builder b(seed);
    b.g.arch = "hybrid";
    b.g.config = config;

    const int stem_mid = std::max(1, config.widths[0] / 2);
    int extent = config.resolution;
    b.conv("stem.conv1", "stem", 3, stem_mid, 3, 2, 1);
    extent = strided_extent(extent, 3, 2, 1);
    b.frozen_bn("stem.norm1", "stem", stem_mid);
    b.act_node("stem.act1", "stem", Act::Relu);
    b.conv("stem.conv2", "stem", stem_mid, config.widths[0], 3, 2, 1);
    extent = strided_extent(extent, 3, 2, 1);
    b.frozen_bn("stem.norm2", "stem", config.widths[0]);
    b.act_node("stem.act2", "stem", Act::Relu);

    int cur_w = config.widths[0];
    for (int s = 1; s <= 3; ++s) {
        if (config.blocks[static_cast<std::size_t>(s - 1)] == 0) continue;
        const std::string stage = "stage" + std::to_string(s);
        const int w = config.widths[static_cast<std::size_t>(s - 1)];
        if (w != cur_w) {
            b.conv(stage + ".down.conv", stage, cur_w, w, 3, 2, 1);
            extent = strided_extent(extent, 3, 2, 1);
            b.frozen_bn(stage + ".down.norm", stage, w);
            cur_w = w;
        }
        for (int blk = 0; blk < config.blocks[static_cast<std::size_t>(s - 1)]; ++blk) {
            b.meta4d_block(stage + ".block" + std::to_string(blk), stage, w, config.mlp_ratio);
        }
    }

    b.conv("stage4.embed.conv", "stage4", cur_w, config.widths[3], 1, 1, 0);
    b.frozen_bn("stage4.embed.norm", "stage4", config.widths[3]);
    b.add(NodeKind::FlattenSpatial, "stage4.flatten", "stage4");
    b.pos_embed_node("stage4.pos_embed", "stage4", extent * extent, config.widths[3]);
    for (int blk = 0; blk < config.blocks[3]; ++blk) {
        b.meta3d_block("stage4.block" + std::to_string(blk), "stage4", config);
    }
    b.head(config.widths[3], config.num_classes);
    return b.finish();
}

ModuleGraph build_mini_vit(const ModelConfig& config, std::uint64_t seed) {
    validate_config(config, true);
    Builder b(seed);
    b.g.arch = "vit";
    b.g.config = config;

    b.conv("patch.conv", "stem", 3, config.widths[3], config.patch_size, config.patch_size, 0);
    b.add(NodeKind::FlattenSpatial, "patch.flatten", "stem");
    const int grid = config.resolution / config.patch_size;
    b.pos_embed_node("encoder.pos_embed", "stage4", grid * grid, config.widths[3]);
    for (int blk = 0; blk < config.blocks[3]; ++blk) {
        b.meta3d_block("encoder.block" + std::to_string(blk), "stage4", config);
    }
    b.head(config.widths[3], config.num_classes);
    return b.finish();
}

namespace {

VarPtr<float> project(Tape* tape, const VarPtr<float>& x, const VarPtr<float>& w, const VarPtr<float>& b,
                      const FactorLookup* lookup) {
    if (lookup) {
        auto fs = (*lookup)(w->name);
        if (!fs.empty()) return adapted_linear<float>(tape, x, w, b, fs);
    }
    return linear(tape, x, w, b);
}

VarPtr<float> attention_block(Tape* tape, const VarPtr<float>& x, const LayerNode& node, const FactorLookup* lookup) {
    const Shape& s = x->value.shape();
    if (s.size() != 3 || s[2] != node.width) {
        throw ShapeError("attention " + node.name + ": expected N x L x " + std::to_string(node.width) + ", got " +
                         shape_str(s));
    }
    const int n = s[0], l = s[1], d = s[2];
    const int hk = node.heads * node.d_k, hv = node.heads * node.d_v;
    auto xf = reshape(tape, x, {n * l, d});
    auto q3 = reshape(tape, project(tape, xf, node.p("w_q"), node.p("b_q"), lookup), {n, l, hk});
    auto k3 = reshape(tape, project(tape, xf, node.p("w_k"), node.p("b_k"), lookup), {n, l, hk});
    auto v3 = reshape(tape, project(tape, xf, node.p("w_v"), node.p("b_v"), lookup), {n, l, hv});
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(node.d_k));

    std::vector<VarPtr<float>> per_sample;
    per_sample.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto qi = select_sample(tape, q3, i);
        auto ki = select_sample(tape, k3, i);
        auto vi = select_sample(tape, v3, i);
        std::vector<VarPtr<float>> heads;
        heads.reserve(static_cast<std::size_t>(node.heads));
        for (int h = 0; h < node.heads; ++h) {
            auto qh = slice_cols(tape, qi, h * node.d_k, node.d_k);
            auto kh = slice_cols(tape, ki, h * node.d_k, node.d_k);
            auto vh = slice_cols(tape, vi, h * node.d_v, node.d_v);
            auto scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
            auto att = softmax(tape, scores, 1);
            heads.push_back(matmul(tape, att, vh));
        }
        per_sample.push_back(heads.size() == 1 ? heads[0] : concat_cols<float>(tape, heads));
    }
    auto ctx = stack_samples<float>(tape, per_sample);
    auto cf = reshape(tape, ctx, {n * l, hv});
    auto out = project(tape, cf, node.p("w_proj"), node.p("b_proj"), lookup);
    return reshape(tape, out, {n, l, d});
}

VarPtr<float> apply_linear_like(Tape* tape, const VarPtr<float>& x, const LayerNode& node, const FactorLookup* lookup) {
    const auto& w = node.p("weight");
    const auto& b = node.p("bias");
    const Shape s = x->value.shape();
    if (s.size() == 3) {
        auto xf = reshape(tape, x, {s[0] * s[1], s[2]});
        auto y = project(tape, xf, w, b, lookup);
        return reshape(tape, y, {s[0], s[1], w->value.dim(0)});
    }
    if (s.size() == 2) return project(tape, x, w, b, lookup);
    throw ShapeError("linear " + node.name + ": expected 2D or 3D input, got " + shape_str(s));
}

}  // namespace

VarPtr<float> forward(const ModuleGraph& graph, const Tensor& batch, RunMode mode, Tape* tape,
                      const FactorLookup* lookup) {
    (void)mode;  // no stochastic layers; kept for interface stability
    const int res = graph.config.resolution;
    if (batch.ndim() != 4 || batch.dim(1) != 3 || batch.dim(2) != res || batch.dim(3) != res || batch.dim(0) < 1) {
        throw ShapeError("forward: input must be N x 3 x " + std::to_string(res) + " x " + std::to_string(res) +
                         ", got " + shape_str(batch.shape()));
    }
    auto cur = make_var(batch, false, "input");
    std::vector<VarPtr<float>> residuals;
    for (const auto& node : graph.nodes) {
        switch (node.kind) {
            case NodeKind::Conv: {
                const auto& w = node.p("weight");
                const auto& b = node.p("bias");
                const LoraFactors* f = nullptr;
                if (lookup) {
                    auto fs = (*lookup)(w->name);
                    if (fs.size() > 1) throw ShapeError("conv " + node.name + ": expected a single factor");
                    if (!fs.empty()) f = fs[0];
                }
                cur = f ? conv_lora_forward<float>(tape, cur, w, b, node.stride, node.padding, node.groups, *f)
                        : conv2d(tape, cur, w, b, node.stride, node.padding, node.groups);
                break;
            }
            case NodeKind::Linear:
            case NodeKind::ClassifierHead:
                cur = apply_linear_like(tape, cur, node, lookup);
                break;
            case NodeKind::Attention:
                cur = attention_block(tape, cur, node, lookup);
                break;
            case NodeKind::LayerNorm:
                cur = layer_norm(tape, cur, node.p("gamma"), node.p("beta"), node.eps);
                break;
            case NodeKind::BatchNormFrozen:
                cur = channel_affine(tape, cur, node.p("gamma"), node.p("beta"));
                break;
            case NodeKind::Pool:
                cur = node.pool_op == PoolOp::Avg2d
                          ? avg_pool2d(tape, cur, node.pool_k, node.pool_stride, node.pool_pad)
                          : mean_tokens(tape, cur);
                break;
            case NodeKind::Activation:
                cur = node.act == Act::Relu ? relu(tape, cur) : gelu(tape, cur);
                break;
            case NodeKind::FlattenSpatial:
                cur = flatten_spatial(tape, cur);
                break;
            case NodeKind::PosEmbed:
                cur = add_bias(tape, cur, node.p("table"));
                break;
            case NodeKind::ResidualBegin:
                residuals.push_back(cur);
                break;
            case NodeKind::ResidualEnd: {
                if (residuals.empty()) throw ShapeError("unmatched residual_end at " + node.name);
                auto saved = residuals.back();
                residuals.pop_back();
                cur = add(tape, saved, cur);
                break;
            }
        }
    }
    if (!residuals.empty()) throw ShapeError("unterminated residual block");
    require_finite(cur->value, "forward");
    return cur;
}

Shape check_shapes(const ModuleGraph& graph, int batch) {
    if (batch < 1) throw ShapeError("check_shapes: batch must be positive");
    Shape cur{batch, 3, graph.config.resolution, graph.config.resolution};
    std::vector<Shape> residuals;
    int flatten_count = 0;
    for (const auto& node : graph.nodes) {
        switch (node.kind) {
            case NodeKind::Conv: {
                const Conv2dDims d =
                    conv2d_dims(cur, node.p("weight")->value.shape(), node.stride, node.padding, node.groups);
                cur = {d.batch, d.out_ch, d.out_h, d.out_w};
                break;
            }
            case NodeKind::Linear:
            case NodeKind::ClassifierHead: {
                const Shape& ws = node.p("weight")->value.shape();
                if (cur.empty() || cur.back() != ws[1]) {
                    throw ShapeError(node.name + ": input width " + shape_str(cur) + " does not match weight " +
                                     shape_str(ws));
                }
                cur.back() = ws[0];
                break;
            }
            case NodeKind::Attention:
                if (cur.size() != 3 || cur[2] != node.width) {
                    throw ShapeError(node.name + ": expected N x L x " + std::to_string(node.width) + ", got " +
                                     shape_str(cur));
                }
                break;
            case NodeKind::LayerNorm:
                if (cur.empty() || cur.back() != node.p("gamma")->value.dim(0)) {
                    throw ShapeError(node.name + ": feature width mismatch");
                }
                break;
            case NodeKind::BatchNormFrozen:
                if (cur.size() != 4 || cur[1] != node.p("gamma")->value.dim(0)) {
                    throw ShapeError(node.name + ": channel count mismatch");
                }
                break;
            case NodeKind::Pool:
                if (node.pool_op == PoolOp::Avg2d) {
                    if (cur.size() != 4) throw ShapeError(node.name + ": pooling expects feature maps");
                    const int oh = (cur[2] + 2 * node.pool_pad - node.pool_k) / node.pool_stride + 1;
                    const int ow = (cur[3] + 2 * node.pool_pad - node.pool_k) / node.pool_stride + 1;
                    if (cur[2] + 2 * node.pool_pad < node.pool_k || oh < 1 || ow < 1) {
                        throw ShapeError(node.name + ": non-positive pooled extent");
                    }
                    cur = {cur[0], cur[1], oh, ow};
                } else {
                    if (cur.size() != 3) throw ShapeError(node.name + ": token pooling expects N x L x d");
                    cur = {cur[0], cur[2]};
                }
                break;
            case NodeKind::Activation:
                break;
            case NodeKind::FlattenSpatial:
                if (cur.size() != 4) throw ShapeError(node.name + ": expected feature maps");
                cur = {cur[0], cur[2] * cur[3], cur[1]};
                ++flatten_count;
                break;
            case NodeKind::PosEmbed: {
                const Shape& ts = node.p("table")->value.shape();
                if (cur.size() != 3 || cur[1] != ts[0] || cur[2] != ts[1]) {
                    throw ShapeError(node.name + ": table " + shape_str(ts) + " does not match tokens " +
                                     shape_str(cur));
                }
                break;
            }
            case NodeKind::ResidualBegin:
                residuals.push_back(cur);
                break;
            case NodeKind::ResidualEnd:
                if (residuals.empty() || residuals.back() != cur) {
                    throw ShapeError(node.name + ": residual shapes disagree");
                }
                residuals.pop_back();
                break;
        }
    }
    if (!residuals.empty()) throw ShapeError("unterminated residual block");
    if (flatten_count != 1) throw ShapeError("graph must contain exactly one flatten_spatial boundary");
    return cur;
}

Tensor mhsa_forward(const Tensor& x, const LayerNode& node) {
    if (node.kind != NodeKind::Attention) throw ValueError("mhsa_forward: node is not an attention node");
    if (x.ndim() != 2 || x.dim(1) != node.width) {
        throw ShapeError("mhsa_forward: expected L x " + std::to_string(node.width) + ", got " + shape_str(x.shape()));
    }
    auto xin = make_var(x.reshaped({1, x.dim(0), x.dim(1)}), false, "mhsa_in");
    auto out = attention_block(nullptr, xin, node, nullptr);
    return out->value.reshaped({x.dim(0), x.dim(1)});
}

}  // namespace petah
