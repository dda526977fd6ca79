#include <doctest.h>

#include <cstring>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "petah/adapters.hpp"
#include "support/oracles.hpp"

using namespace petah;

namespace {

Tensor rand_batch(Rng& rng, int n, int res) { return uniform_tensor<float>(rng, {n, 3, res, res}, -1.0f, 1.0f); }

// Give B factors and the head nonzero values so the delta paths actually
// carry signal.
void randomize_adapters(AdaptedModel& m, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& f : m.adapters) {
        f->B->value = uniform_tensor<float>(rng, f->B->value.shape(), -0.3f, 0.3f);
    }
    for (auto& p : m.head_params()) {
        p->value = uniform_tensor<float>(rng, p->value.shape(), -0.5f, 0.5f);
    }
}

// Enumeration oracle: count adapted weight matrices by walking the graph.
int eligible_targets(const ModuleGraph& g, Strategy s) {
    int n = 0;
    for (const auto& node : g.nodes) {
        if (node.kind == NodeKind::Attention) n += 4;
        if (node.kind == NodeKind::Conv && s == Strategy::Petah) n += 1;
        if (node.kind == NodeKind::Linear && s == Strategy::LoraAttnMlp) n += 1;
    }
    return n;
}

}  // namespace

TEST_CASE("strategy names roundtrip and reject unknowns") {
    for (Strategy s : {Strategy::LinearProbe, Strategy::FullFt, Strategy::AttnFt, Strategy::LoraAttn,
                       Strategy::LoraAttnMlp, Strategy::Petah}) {
        CHECK(parse_strategy(strategy_name(s)) == s);
    }
    CHECK_THROWS_AS(parse_strategy("lora"), ValueError);
    AdaptationPolicy bad;
    bad.rank = 0;
    CHECK_THROWS_AS(validate_policy(bad), ValueError);
    bad.rank = 8;
    bad.scale = 0.0f;
    CHECK_THROWS_AS(validate_policy(bad), ValueError);
}

TEST_CASE("linear probe trains exactly the classifier head") {
    auto g = build_mini_hybrid(ModelConfig{}, 3);
    auto m = inject(g, AdaptationPolicy{}, 11);
    CHECK(m.trainable == std::set<std::string>{"head.fc.bias", "head.fc.weight"});
    CHECK(m.adapters.empty());
    CHECK(m.adapter_param_count() == 0);
    CHECK(count_adapter_params(AdaptationPolicy{}, g).total == 0);
    for (const auto& node : m.graph.nodes) {
        for (const auto& [local, p] : node.params) {
            CHECK(p->requires_grad == (node.kind == NodeKind::ClassifierHead));
        }
    }
}

TEST_CASE("attention fine-tuning unfreezes attention plus head") {
    auto g = build_mini_hybrid(ModelConfig{}, 3);
    AdaptationPolicy policy;
    policy.strategy = Strategy::AttnFt;
    auto m = inject(g, policy, 11);
    CHECK(m.adapters.empty());
    for (const auto& node : m.graph.nodes) {
        const bool want = node.kind == NodeKind::Attention || node.kind == NodeKind::ClassifierHead;
        for (const auto& [local, p] : node.params) CHECK(p->requires_grad == want);
    }
    CHECK(m.base_trainable_params().size() == 2u * 8u);  // two attention nodes, eight tensors each
}

TEST_CASE("full fine-tuning unfreezes everything") {
    auto g = build_mini_vit(ModelConfig{}, 3);
    AdaptationPolicy policy;
    policy.strategy = Strategy::FullFt;
    auto m = inject(g, policy, 11);
    for (const auto& node : m.graph.nodes) {
        for (const auto& [local, p] : node.params) CHECK(p->requires_grad);
    }
}

TEST_CASE("petah adapts every attention linear and every conv") {
    auto g = build_mini_hybrid(ModelConfig{}, 3);
    AdaptationPolicy policy;
    policy.strategy = Strategy::Petah;
    policy.conv_rank = 1;
    auto m = inject(g, policy, 11);
    CHECK(static_cast<int>(m.by_target.size()) == eligible_targets(g, Strategy::Petah));
    int convs = 0;
    for (const auto& node : g.nodes) convs += node.kind == NodeKind::Conv ? 1 : 0;
    CHECK(convs >= 7);  // stem x2, downsamples, conv MLPs, embed
    for (const auto& f : m.adapters) {
        CHECK(tensor_all_zero(f->B->value));
        CHECK_FALSE(tensor_all_zero(f->A->value));
    }
    // MLP linears stay frozen and unadapted
    for (const auto& node : m.graph.nodes) {
        if (node.kind != NodeKind::Linear) continue;
        CHECK(m.by_target.count(node.name + ".weight") == 0);
        CHECK_FALSE(node.p("weight")->requires_grad);
    }
}

TEST_CASE("lora_attn on a four-block transformer adapts sixteen weight matrices") {
    ModelConfig cfg;
    cfg.blocks = {0, 0, 0, 4};
    auto g = build_mini_vit(cfg, 5);
    AdaptationPolicy policy;
    policy.strategy = Strategy::LoraAttn;
    auto m = inject(g, policy, 11);
    CHECK(m.by_target.size() == 16);
    std::set<std::string> targets;
    for (const auto& f : m.adapters) targets.insert(f->target);
    CHECK(targets.size() == 16);
    // per-head slices for q/k/v plus one projection pair per block
    CHECK(m.adapters.size() == 4u * (3u * static_cast<unsigned>(cfg.heads) + 1u));
    // patchify conv untouched under lora_attn
    CHECK(m.by_target.count("patch.conv.weight") == 0);
}

TEST_CASE("lora_attn_mlp extends lora_attn with the transformer MLP linears") {
    auto g = build_mini_hybrid(ModelConfig{}, 3);
    AdaptationPolicy policy;
    policy.strategy = Strategy::LoraAttnMlp;
    auto m = inject(g, policy, 11);
    CHECK(static_cast<int>(m.by_target.size()) == eligible_targets(g, Strategy::LoraAttnMlp));
    CHECK(m.by_target.count("stage4.block0.mlp.fc1.weight") == 1);
    CHECK(m.by_target.count("stage4.block0.mlp.fc2.weight") == 1);
    CHECK(m.by_target.count("stem.conv1.weight") == 0);
}

TEST_CASE("inject fails when no eligible layer exists") {
    auto g = build_mini_hybrid(ModelConfig{}, 3);
    // strip the attention stage down to a conv-only graph
    std::erase_if(g.nodes, [](const LayerNode& n) { return n.kind == NodeKind::Attention; });
    AdaptationPolicy policy;
    policy.strategy = Strategy::LoraAttn;
    CHECK_THROWS_AS(inject(g, policy, 1), ValueError);
}

TEST_CASE("zero-init adapters leave the forward pass bitwise unchanged") {
    const ModelConfig cfg;
    for (const char* arch : {"hybrid", "vit"}) {
        auto g = std::string(arch) == "hybrid" ? build_mini_hybrid(cfg, 7) : build_mini_vit(cfg, 7);
        Rng data_rng(91);
        // give the head signal so the comparison is not trivially zero
        g.find_param("head.fc.weight")->value = uniform_tensor<float>(data_rng, {cfg.num_classes, cfg.widths[3]}, -0.5f, 0.5f);
        for (Strategy s : {Strategy::LoraAttn, Strategy::LoraAttnMlp, Strategy::Petah}) {
            AdaptationPolicy policy;
            policy.strategy = s;
            policy.conv_rank = 2;
            auto m = inject(g, policy, 13);
            for (int trial = 0; trial < 3; ++trial) {
                const Tensor batch = rand_batch(data_rng, 2, cfg.resolution);
                auto base_out = forward(g, batch, RunMode::Eval);
                auto adapted_out = forward(m, batch, RunMode::Eval);
                CHECK(oracle::bitwise_equal(base_out->value, adapted_out->value));
            }
        }
    }
}

TEST_CASE("parameter counts match the closed-form spot values") {
    ModelConfig cfg;
    cfg.widths = {16, 32, 64, 128};
    cfg.blocks = {1, 1, 1, 1};
    cfg.heads = 4;
    cfg.d_k = 32;
    cfg.d_v = 32;
    auto g = build_mini_hybrid(cfg, 3);

    AdaptationPolicy policy;
    policy.strategy = Strategy::Petah;
    policy.rank = 8;
    policy.conv_rank = 2;
    const auto counts = count_adapter_params(policy, g);

    std::map<std::string, std::int64_t> by_name(counts.per_param.begin(), counts.per_param.end());
    // h r (2 d_k + d_v + 3 d) with h=4, r=8, d=128, d_k=d_v=32
    CHECK(by_name.at("stage4.block0.attn.w_q") + by_name.at("stage4.block0.attn.w_k") +
              by_name.at("stage4.block0.attn.w_v") ==
          15360);
    // r (d + h d_v)
    CHECK(by_name.at("stage4.block0.attn.w_proj") == 2048);
    // r_c q k^2 + r_c p with p=64, q=32, k=3, r_c=2
    CHECK(by_name.at("stage3.down.conv.weight") == 704);
}

TEST_CASE("closed-form counts equal allocated factor elements for random configs") {
    Rng rng(414);
    for (int trial = 0; trial < 20; ++trial) {
        ModelConfig cfg;
        cfg.resolution = 32;
        cfg.widths = {8 + 2 * static_cast<int>(rng.next_u32() % 5), 16, 24 + static_cast<int>(rng.next_u32() % 8),
                      32 + 8 * static_cast<int>(rng.next_u32() % 4)};
        cfg.blocks = {static_cast<int>(rng.next_u32() % 2), 1, static_cast<int>(rng.next_u32() % 3),
                      1 + static_cast<int>(rng.next_u32() % 2)};
        cfg.heads = 1 + static_cast<int>(rng.next_u32() % 4);
        cfg.d_k = 8 + static_cast<int>(rng.next_u32() % 9);
        cfg.d_v = 8 + static_cast<int>(rng.next_u32() % 9);
        const bool vit = trial % 3 == 0;
        auto g = vit ? build_mini_vit(cfg, trial) : build_mini_hybrid(cfg, trial);

        for (Strategy s : {Strategy::LoraAttn, Strategy::LoraAttnMlp, Strategy::Petah}) {
            AdaptationPolicy policy;
            policy.strategy = s;
            policy.rank = 1 + static_cast<int>(rng.next_u32() % 8);
            policy.conv_rank = 1 + static_cast<int>(rng.next_u32() % 3);
            auto m = inject(g, policy, trial + 100);
            CHECK(count_adapter_params(policy, g).total == m.adapter_param_count());
        }
    }
}

TEST_CASE("factored and merged forwards agree") {
    const ModelConfig cfg;
    auto g = build_mini_hybrid(cfg, 17);
    AdaptationPolicy policy;
    policy.strategy = Strategy::Petah;
    policy.rank = 4;
    policy.conv_rank = 2;
    auto m = inject(g, policy, 19);
    randomize_adapters(m, 23);

    Rng rng(29);
    const Tensor batch = rand_batch(rng, 2, cfg.resolution);
    const Tensor factored = forward(m, batch, RunMode::Eval)->value;
    merge_all(m);
    CHECK(m.merged);
    const Tensor merged = forward(m, batch, RunMode::Eval)->value;
    CHECK(oracle::max_scaled_err(factored, merged) < 1e-5);
}

TEST_CASE("merge and unmerge cycles recover the base weights") {
    const ModelConfig cfg;
    auto g = build_mini_hybrid(cfg, 31);
    AdaptationPolicy policy;
    policy.strategy = Strategy::Petah;
    auto m = inject(g, policy, 37);
    randomize_adapters(m, 41);

    std::map<std::string, Tensor> before;
    for (const auto& [target, fs] : m.by_target) before.emplace(target, m.graph.find_param(target)->value);

    for (int cycle = 0; cycle < 10; ++cycle) {
        merge_all(m);
        unmerge_all(m);
    }
    for (const auto& [target, want] : before) {
        const Tensor& got = m.graph.find_param(target)->value;
        CHECK(oracle::max_abs_diff(got, want) <= 1e-6);
    }
}

TEST_CASE("merge with zero factors is the identity and unmerge of it too") {
    auto g = build_mini_vit(ModelConfig{}, 43);
    AdaptationPolicy policy;
    policy.strategy = Strategy::LoraAttn;
    auto m = inject(g, policy, 47);
    std::map<std::string, Tensor> before;
    for (const auto& [target, fs] : m.by_target) before.emplace(target, m.graph.find_param(target)->value);
    merge_all(m);
    for (const auto& [target, want] : before) {
        CHECK(oracle::bitwise_equal(m.graph.find_param(target)->value, want));
    }
    unmerge_all(m);
    for (const auto& [target, want] : before) {
        CHECK(oracle::bitwise_equal(m.graph.find_param(target)->value, want));
    }
}

TEST_CASE("materialized deltas respect the rank bound") {
    auto g = build_mini_hybrid(ModelConfig{}, 53);
    AdaptationPolicy policy;
    policy.strategy = Strategy::Petah;
    policy.rank = 3;
    policy.conv_rank = 2;
    auto m = inject(g, policy, 59);
    randomize_adapters(m, 61);

    for (const auto& f : m.adapters) {
        const auto base = m.graph.find_param(f->target);
        const Tensor delta = merged_delta(*f, base->value.shape());
        Tensor flat = delta.ndim() == 4
                          ? delta.reshaped({delta.dim(0), delta.dim(1) * delta.dim(2) * delta.dim(3)})
                          : delta;
        const auto sv = oracle::singular_values(flat);
        int numerical_rank = 0;
        for (double s : sv) {
            if (s > 1e-6 * sv[0]) ++numerical_rank;
        }
        CHECK(numerical_rank <= f->rank);
    }
}

TEST_CASE("frozen snapshot detects any backbone drift") {
    auto g = build_mini_hybrid(ModelConfig{}, 67);
    AdaptationPolicy policy;
    policy.strategy = Strategy::LoraAttn;
    auto m = inject(g, policy, 71);
    const auto snap = snapshot_frozen(m);
    CHECK(frozen_diff(m, snap).empty());
    auto w = m.graph.find_param("stem.conv1.weight");
    w->value[0] += 1.0f;
    const auto changed = frozen_diff(m, snap);
    REQUIRE(changed.size() == 1);
    CHECK(changed[0] == "stem.conv1.weight");
}

TEST_CASE("adapter training signal reaches factors but not the frozen base") {
    const ModelConfig cfg;
    auto g = build_mini_hybrid(cfg, 73);
    AdaptationPolicy policy;
    policy.strategy = Strategy::Petah;
    auto m = inject(g, policy, 79);
    Rng rng(83);
    m.graph.find_param("head.fc.weight")->value =
        uniform_tensor<float>(rng, {cfg.num_classes, cfg.widths[3]}, -0.5f, 0.5f);

    Tape tape;
    const Tensor batch = rand_batch(rng, 2, cfg.resolution);
    auto logits = forward(m, batch, RunMode::Train, &tape);
    std::vector<int> labels{1, 2};
    auto loss = cross_entropy(&tape, logits, labels);
    const auto params = m.trainable_params();
    const auto grads = backward_gradients(tape, loss, std::span<const VarPtr<float>>(params.data(), params.size()));

    REQUIRE(grads.size() == params.size());
    // every B factor must see gradient, otherwise the adapters can never move
    int nonzero_b = 0;
    for (const auto& [name, g] : grads) {
        if (name.ends_with(".lora_b") && !tensor_all_zero(g)) ++nonzero_b;
    }
    CHECK(nonzero_b == static_cast<int>(m.adapters.size()));
    for (const auto& p : m.graph.backbone_parameters()) {
        if (m.trainable.count(p->name) == 0) CHECK_FALSE(p->has_grad());
    }
}
