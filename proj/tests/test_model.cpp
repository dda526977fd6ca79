#include <doctest.h>

#include "petah/model.hpp"
#include "support/oracles.hpp"

using namespace petah;

namespace {

Tensor rand_batch(Rng& rng, int n, int res) { return uniform_tensor<float>(rng, {n, 3, res, res}, -1.0f, 1.0f); }

}  // namespace

TEST_CASE("default hybrid forward produces logits of the configured shape") {
    ModelConfig cfg;
    auto g = build_mini_hybrid(cfg, 1);
    CHECK(check_shapes(g, 2) == Shape{2, 10});
    Rng rng(5);
    auto out = forward(g, rand_batch(rng, 2, 32), RunMode::Eval);
    CHECK(out->value.shape() == Shape{2, 10});
}

TEST_CASE("single class config") {
    ModelConfig cfg;
    cfg.num_classes = 1;
    auto g = build_mini_hybrid(cfg, 1);
    CHECK(check_shapes(g, 3) == Shape{3, 1});
}

TEST_CASE("degenerate hybrid with empty conv stages") {
    ModelConfig cfg;
    cfg.blocks = {0, 0, 0, 1};
    auto g = build_mini_hybrid(cfg, 1);
    CHECK(check_shapes(g, 2) == Shape{2, 10});
    // No downsamples: stem /4 on 32 leaves an 8x8 token grid.
    const auto& pe = g.node("stage4.pos_embed");
    CHECK(pe.p("table")->value.shape() == Shape{64, 96});
}

TEST_CASE("vit sequence length follows the patch grid") {
    ModelConfig cfg;
    auto g = build_mini_vit(cfg, 1);
    CHECK(check_shapes(g, 2) == Shape{2, 10});
    CHECK(g.node("encoder.pos_embed").p("table")->value.shape() == Shape{64, 96});
}

TEST_CASE("vit with depth zero still type-checks") {
    ModelConfig cfg;
    cfg.blocks = {1, 1, 1, 0};
    auto g = build_mini_vit(cfg, 1);
    CHECK(check_shapes(g, 1) == Shape{1, 10});
    Rng rng(6);
    auto out = forward(g, rand_batch(rng, 1, 32), RunMode::Eval);
    CHECK(out->value.shape() == Shape{1, 10});
}

TEST_CASE("attention parameter shapes are shared between the builders") {
    ModelConfig cfg;
    auto h = build_mini_hybrid(cfg, 1);
    auto v = build_mini_vit(cfg, 2);
    const auto& ah = h.node("stage4.block0.attn");
    const auto& av = v.node("encoder.block0.attn");
    for (const char* name : {"w_q", "w_k", "w_v", "w_proj", "b_q", "b_k", "b_v", "b_proj"}) {
        CHECK(ah.p(name)->value.shape() == av.p(name)->value.shape());
    }
}

TEST_CASE("attention element count matches the documented shapes") {
    ModelConfig cfg;
    auto g = build_mini_hybrid(cfg, 1);
    const auto& a = g.node("stage4.block0.attn");
    const int d = cfg.widths[3], hk = cfg.heads * cfg.d_k, hv = cfg.heads * cfg.d_v;
    CHECK(a.p("w_q")->value.numel() == d * hk);
    CHECK(a.p("w_k")->value.numel() == d * hk);
    CHECK(a.p("w_v")->value.numel() == d * hv);
    CHECK(a.p("w_proj")->value.numel() == hv * d);
}

TEST_CASE("bad configs are rejected") {
    ModelConfig cfg;
    cfg.resolution = 33;
    CHECK_THROWS_AS(build_mini_vit(cfg, 1), ShapeError);  // 33 % 4 != 0
    CHECK_THROWS_AS(build_mini_hybrid(cfg, 1), ShapeError);  // odd extent at a stride-2 conv
    ModelConfig cfg2;
    cfg2.widths = {0, 32, 64, 96};
    CHECK_THROWS_AS(build_mini_hybrid(cfg2, 1), ValueError);
}

TEST_CASE("zero input with the zero-initialized head gives equal logits") {
    ModelConfig cfg;
    auto g = build_mini_hybrid(cfg, 3);
    Tensor zero({2, 3, 32, 32});
    auto out = forward(g, zero, RunMode::Eval);
    for (int n = 0; n < 2; ++n) {
        for (int k = 1; k < 10; ++k) CHECK(out->value(n, k) == out->value(n, 0));
    }
}

TEST_CASE("eval forward is bitwise deterministic") {
    ModelConfig cfg;
    auto g = build_mini_hybrid(cfg, 4);
    Rng rng(7);
    Tensor batch = rand_batch(rng, 2, 32);
    auto a = forward(g, batch, RunMode::Eval);
    auto b = forward(g, batch, RunMode::Eval);
    CHECK(oracle::bitwise_equal(a->value, b->value));
}

TEST_CASE("same seed rebuilds an identical graph") {
    ModelConfig cfg;
    auto a = build_mini_hybrid(cfg, 11);
    auto b = build_mini_hybrid(cfg, 11);
    auto pa = a.parameters(), pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        CHECK(oracle::bitwise_equal(pa[i]->value, pb[i]->value));
    }
}

TEST_CASE("permuting the batch permutes the logits rows identically") {
    ModelConfig cfg;
    auto g = build_mini_hybrid(cfg, 8);
    Rng rng(9);
    Tensor batch = rand_batch(rng, 3, 32);
    auto out = forward(g, batch, RunMode::Eval);

    // Swap samples 0 and 2.
    Tensor permuted(batch.shape());
    const std::int64_t block = batch.numel() / 3;
    const int order[3] = {2, 1, 0};
    for (int i = 0; i < 3; ++i) {
        std::copy(batch.raw() + order[i] * block, batch.raw() + (order[i] + 1) * block, permuted.raw() + i * block);
    }
    auto out2 = forward(g, permuted, RunMode::Eval);
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 10; ++k) CHECK(out2->value(i, k) == out->value(order[i], k));
    }
}

TEST_CASE("forward rejects a mismatched input signature") {
    ModelConfig cfg;
    auto g = build_mini_hybrid(cfg, 1);
    CHECK_THROWS_AS(forward(g, Tensor({2, 1, 32, 32}), RunMode::Eval), ShapeError);
    CHECK_THROWS_AS(forward(g, Tensor({2, 3, 16, 16}), RunMode::Eval), ShapeError);
}

TEST_CASE("mhsa_forward matches the dense enumeration oracle") {
    ModelConfig cfg;
    cfg.widths[3] = 8;
    cfg.heads = 2;
    cfg.d_k = 3;
    cfg.d_v = 3;
    auto g = build_mini_vit(cfg, 13);
    const auto& node = g.node("encoder.block0.attn");
    Rng rng(14);
    Tensor x = uniform_tensor<float>(rng, {3, 8}, -1.0f, 1.0f);
    Tensor got = mhsa_forward(x, node);
    Tensor want = oracle::attention(x, node.p("w_q")->value, node.p("b_q")->value, node.p("w_k")->value,
                                    node.p("b_k")->value, node.p("w_v")->value, node.p("b_v")->value,
                                    node.p("w_proj")->value, node.p("b_proj")->value, 2, 3, 3);
    CHECK(oracle::max_abs_diff(got, want) < 1e-6);
}

TEST_CASE("single token attention reduces to a projection of V") {
    ModelConfig cfg;
    auto g = build_mini_vit(cfg, 15);
    const auto& node = g.node("encoder.block0.attn");
    Rng rng(16);
    Tensor x = uniform_tensor<float>(rng, {1, 96}, -1.0f, 1.0f);
    Tensor got = mhsa_forward(x, node);
    // With one token the attention weight is exactly 1: output = proj(v) + b.
    Tensor v = oracle::linear(x, node.p("w_v")->value, &node.p("b_v")->value);
    Tensor want = oracle::linear(v, node.p("w_proj")->value, &node.p("b_proj")->value);
    CHECK(oracle::max_abs_diff(got, want) < 1e-6);
}

TEST_CASE("zero query weights give uniform attention over value rows") {
    ModelConfig cfg;
    cfg.widths[3] = 8;
    cfg.heads = 2;
    cfg.d_k = 3;
    cfg.d_v = 3;
    auto g = build_mini_vit(cfg, 17);
    auto node = g.node("encoder.block0.attn");  // copy, then zero W_Q and b_q
    node.p("w_q")->value.fill(0.0f);
    node.p("b_q")->value.fill(0.0f);
    Rng rng(18);
    Tensor x = uniform_tensor<float>(rng, {4, 8}, -1.0f, 1.0f);
    Tensor got = mhsa_forward(x, node);

    // Oracle: uniform attention means each context row is the mean of V rows.
    Tensor v = oracle::linear(x, node.p("w_v")->value, &node.p("b_v")->value);
    Tensor vmean({1, 6});
    for (int j = 0; j < 6; ++j) {
        double acc = 0.0;
        for (int i = 0; i < 4; ++i) acc += v(i, j);
        vmean(0, j) = static_cast<float>(acc / 4.0);
    }
    Tensor projected = oracle::linear(vmean, node.p("w_proj")->value, &node.p("b_proj")->value);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 8; ++j) CHECK(got(i, j) == doctest::Approx(projected(0, j)).epsilon(1e-5));
    }
}

TEST_CASE("clone creates independent parameter storage") {
    ModelConfig cfg;
    auto g = build_mini_hybrid(cfg, 19);
    auto c = g.clone();
    auto p = g.parameters();
    auto pc = c.parameters();
    REQUIRE(p.size() == pc.size());
    CHECK(oracle::bitwise_equal(p[0]->value, pc[0]->value));
    pc[0]->value.fill(42.0f);
    CHECK_FALSE(oracle::bitwise_equal(p[0]->value, pc[0]->value));
}
