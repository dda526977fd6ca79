#include "petah/adapters.hpp"

#include <cmath>
#include <cstring>

namespace petah {

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::LinearProbe: return "linear_probe";
        case Strategy::FullFt: return "full_ft";
        case Strategy::AttnFt: return "attn_ft";
        case Strategy::LoraAttn: return "lora_attn";
        case Strategy::LoraAttnMlp: return "lora_attn_mlp";
        case Strategy::Petah: return "petah";
    }
    throw ValueError("unknown strategy");
}

Strategy parse_strategy(const std::string& name) {
    for (Strategy s : {Strategy::LinearProbe, Strategy::FullFt, Strategy::AttnFt, Strategy::LoraAttn,
                       Strategy::LoraAttnMlp, Strategy::Petah}) {
        if (name == strategy_name(s)) return s;
    }
    throw ValueError("unknown strategy '" + name + "'");
}

void validate_policy(const AdaptationPolicy& policy) {
    if (policy.rank < 1) throw ValueError("policy: rank must be positive");
    if (policy.conv_rank < 1) throw ValueError("policy: conv rank must be positive");
    if (!(policy.scale > 0.0f)) throw ValueError("policy: scale must be positive");
}

namespace {

bool uses_factors(Strategy s) {
    return s == Strategy::LoraAttn || s == Strategy::LoraAttnMlp || s == Strategy::Petah;
}

// One factor allocation: a per-head row slice of an attention weight, a whole
// MLP weight, or a whole conv kernel.
struct Site {
    std::string target;
    std::string prefix;  // factor tensor names derive from this
    int rank = 0;
    bool is_conv = false;
    int rows = 0;  // linear: rows covered by this slice
    int q = 0;     // linear: input width
    int row_offset = 0;
    int p = 0;  // conv geometry
    int qg = 0;
    int kh = 0;
    int kw = 0;
    int groups = 1;
    int stride = 1;
    int padding = 0;

    std::int64_t count() const {
        if (is_conv) {
            return static_cast<std::int64_t>(groups) * rank * qg * kh * kw + static_cast<std::int64_t>(p) * rank;
        }
        return static_cast<std::int64_t>(rank) * q + static_cast<std::int64_t>(rows) * rank;
    }
};

void attention_sites(const LayerNode& n, int rank, std::vector<Site>& out) {
    const int d = n.width;
    const struct {
        const char* local;
        int rows_per_head;
    } qkv[] = {{"w_q", n.d_k}, {"w_k", n.d_k}, {"w_v", n.d_v}};
    for (const auto& spec : qkv) {
        const std::string target = n.name + "." + spec.local;
        for (int h = 0; h < n.heads; ++h) {
            Site s;
            s.target = target;
            s.prefix = target + ".head" + std::to_string(h);
            s.rank = rank;
            s.rows = spec.rows_per_head;
            s.q = d;
            s.row_offset = h * spec.rows_per_head;
            out.push_back(std::move(s));
        }
    }
    Site proj;
    proj.target = n.name + ".w_proj";
    proj.prefix = proj.target;
    proj.rank = rank;
    proj.rows = d;
    proj.q = n.heads * n.d_v;
    out.push_back(std::move(proj));
}

void conv_site(const LayerNode& n, int rank, std::vector<Site>& out) {
    const Shape& w = n.p("weight")->value.shape();
    Site s;
    s.target = n.name + ".weight";
    s.prefix = s.target;
    s.rank = rank;
    s.is_conv = true;
    s.p = w[0];
    s.qg = w[1];
    s.kh = w[2];
    s.kw = w[3];
    s.groups = n.groups;
    s.stride = n.stride;
    s.padding = n.padding;
    out.push_back(std::move(s));
}

void linear_site(const LayerNode& n, int rank, std::vector<Site>& out) {
    const Shape& w = n.p("weight")->value.shape();
    Site s;
    s.target = n.name + ".weight";
    s.prefix = s.target;
    s.rank = rank;
    s.rows = w[0];
    s.q = w[1];
    out.push_back(std::move(s));
}

std::vector<Site> enumerate_sites(const AdaptationPolicy& policy, const ModuleGraph& graph) {
    std::vector<Site> sites;
    if (!uses_factors(policy.strategy)) return sites;
    for (const LayerNode& n : graph.nodes) {
        switch (n.kind) {
            case NodeKind::Attention:
                attention_sites(n, policy.rank, sites);
                break;
            case NodeKind::Linear:
                if (policy.strategy == Strategy::LoraAttnMlp) linear_site(n, policy.rank, sites);
                break;
            case NodeKind::Conv:
                if (policy.strategy == Strategy::Petah) conv_site(n, policy.conv_rank, sites);
                break;
            default:
                break;
        }
    }
    return sites;
}

}  // namespace

AdapterCount count_adapter_params(const AdaptationPolicy& policy, const ModuleGraph& graph) {
    validate_policy(policy);
    AdapterCount out;
    for (const Site& s : enumerate_sites(policy, graph)) {
        if (!out.per_param.empty() && out.per_param.back().first == s.target) {
            out.per_param.back().second += s.count();
        } else {
            out.per_param.emplace_back(s.target, s.count());
        }
        out.total += s.count();
    }
    return out;
}

AdaptedModel inject(const ModuleGraph& graph, const AdaptationPolicy& policy, std::uint64_t seed) {
    validate_policy(policy);
    AdaptedModel m;
    m.graph = graph.clone();
    m.policy = policy;

    const std::vector<Site> sites = enumerate_sites(policy, m.graph);
    if (uses_factors(policy.strategy) && sites.empty()) {
        throw ValueError(std::string("inject: graph has no layer eligible for strategy ") +
                         strategy_name(policy.strategy));
    }

    Rng rng(seed);
    for (const Site& s : sites) {
        const auto base = m.graph.find_param(s.target);
        auto f = std::make_unique<LoraFactors>();
        f->target = s.target;
        f->rank = s.rank;
        f->scale = policy.scale;
        if (s.is_conv) {
            f->is_conv = true;
            f->groups = s.groups;
            f->stride = s.stride;
            f->padding = s.padding;
            const int fan_in = s.qg * s.kh * s.kw;
            const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
            f->A = make_var(uniform_tensor<float>(rng, {s.groups * s.rank, s.qg, s.kh, s.kw}, -bound, bound), true,
                            s.prefix + ".lora_a");
            f->B = make_var(Tensor({s.p, s.rank, 1, 1}), true, s.prefix + ".lora_b");
            validate_conv_factor(*f, base->value.shape());
        } else {
            f->row_offset = s.row_offset;
            const float bound = 1.0f / std::sqrt(static_cast<float>(s.q));
            f->A = make_var(uniform_tensor<float>(rng, {s.rank, s.q}, -bound, bound), true, s.prefix + ".lora_a");
            f->B = make_var(Tensor({s.rows, s.rank}), true, s.prefix + ".lora_b");
            validate_linear_factor(*f, base->value.shape());
        }
        m.trainable.insert(f->A->name);
        m.trainable.insert(f->B->name);
        m.by_target[f->target].push_back(f.get());
        m.adapters.push_back(std::move(f));
    }

    for (LayerNode& n : m.graph.nodes) {
        for (auto& [local, p] : n.params) {
            bool train = n.kind == NodeKind::ClassifierHead;
            if (policy.strategy == Strategy::FullFt) train = true;
            if (policy.strategy == Strategy::AttnFt && n.kind == NodeKind::Attention) train = true;
            p->requires_grad = train;
            if (train) m.trainable.insert(p->name);
        }
    }
    return m;
}

void reset_head(AdaptedModel& m) {
    for (const auto& p : m.head_params()) {
        for (std::int64_t i = 0; i < p->value.numel(); ++i) p->value[i] = 0.0f;
    }
}

FactorLookup AdaptedModel::factor_lookup() const {
    return [this](const std::string& param_name) -> std::span<const LoraFactors* const> {
        auto it = by_target.find(param_name);
        if (it == by_target.end()) return {};
        return {it->second.data(), it->second.size()};
    };
}

std::vector<VarPtr<float>> AdaptedModel::head_params() const {
    std::vector<VarPtr<float>> out;
    for (const LayerNode& n : graph.nodes) {
        if (n.kind != NodeKind::ClassifierHead) continue;
        for (const auto& [local, p] : n.params) out.push_back(p);
    }
    return out;
}

std::vector<VarPtr<float>> AdaptedModel::adapter_params() const {
    std::vector<VarPtr<float>> out;
    out.reserve(adapters.size() * 2);
    for (const auto& f : adapters) {
        out.push_back(f->A);
        out.push_back(f->B);
    }
    return out;
}

std::vector<VarPtr<float>> AdaptedModel::base_trainable_params() const {
    std::vector<VarPtr<float>> out;
    for (const LayerNode& n : graph.nodes) {
        if (n.kind == NodeKind::ClassifierHead) continue;
        for (const auto& [local, p] : n.params) {
            if (p->requires_grad) out.push_back(p);
        }
    }
    return out;
}

std::vector<VarPtr<float>> AdaptedModel::trainable_params() const {
    std::vector<VarPtr<float>> out = head_params();
    for (auto& p : adapter_params()) out.push_back(p);
    for (auto& p : base_trainable_params()) out.push_back(p);
    return out;
}

std::int64_t AdaptedModel::adapter_param_count() const {
    std::int64_t total = 0;
    for (const auto& f : adapters) total += f->A->value.numel() + f->B->value.numel();
    return total;
}

VarPtr<float> forward(const AdaptedModel& m, const Tensor& batch, RunMode mode, Tape* tape) {
    if (m.merged || m.adapters.empty()) return forward(m.graph, batch, mode, tape, nullptr);
    const FactorLookup lookup = m.factor_lookup();
    return forward(m.graph, batch, mode, tape, &lookup);
}

namespace {

bool masks_have_zeros(const std::map<std::string, Tensor>& masks) {
    for (const auto& [name, mask] : masks) {
        for (std::int64_t i = 0; i < mask.numel(); ++i) {
            if (mask[i] == 0.0f) return true;
        }
    }
    return false;
}

}  // namespace

void merge_all(AdaptedModel& m, bool force_dense) {
    if (m.merged) return;
    const bool sparse = masks_have_zeros(m.masks);
    if (sparse && !force_dense) {
        throw ValueError(
            "merge: backbone is sparse and the rank deltas are dense; merging would destroy the "
            "pruning masks (use the dense override to merge anyway)");
    }
    for (const auto& f : m.adapters) {
        const auto w = m.graph.find_param(f->target);
        w->value = merge(*f, w->value);
    }
    m.merged = true;
    m.dense_override = sparse;
}

void unmerge_all(AdaptedModel& m) {
    if (!m.merged) return;
    for (auto it = m.adapters.rbegin(); it != m.adapters.rend(); ++it) {
        const auto w = m.graph.find_param((*it)->target);
        w->value = unmerge(**it, w->value);
    }
    for (const auto& [name, mask] : m.masks) {
        const auto w = m.graph.find_param(name);
        for (std::int64_t i = 0; i < mask.numel(); ++i) {
            if (mask[i] == 0.0f) w->value[i] = 0.0f;
        }
    }
    m.merged = false;
    m.dense_override = false;
}

std::map<std::string, Tensor> snapshot_frozen(const AdaptedModel& m) {
    std::map<std::string, Tensor> out;
    for (const LayerNode& n : m.graph.nodes) {
        for (const auto& [local, p] : n.params) {
            if (m.trainable.count(p->name) == 0) out.emplace(p->name, p->value);
        }
    }
    return out;
}

std::vector<std::string> frozen_diff(const AdaptedModel& m, const std::map<std::string, Tensor>& snapshot) {
    std::vector<std::string> changed;
    for (const auto& [name, before] : snapshot) {
        const auto p = m.graph.find_param(name);
        if (p->value.shape() != before.shape() ||
            std::memcmp(p->value.raw(), before.raw(), sizeof(float) * static_cast<std::size_t>(before.numel())) != 0) {
            changed.push_back(name);
        }
    }
    return changed;
}

}  // namespace petah
