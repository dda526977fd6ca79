#include <doctest.h>

#include "petah/tensor.hpp"

using namespace petah;

TEST_CASE("tensor construction and indexing") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    for (int i = 0; i < 6; ++i) CHECK(t[i] == 0.0f);

    t(1, 2) = 5.0f;
    CHECK(t[5] == 5.0f);

    Tensor u({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    CHECK(u(0, 0) == 1.0f);
    CHECK(u(1, 0) == 3.0f);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0f}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, -1}), ShapeError);
}

TEST_CASE("tensor scalar and fill helpers") {
    auto s = Tensor::scalar(3.5f);
    CHECK(s.numel() == 1);
    CHECK(s.ndim() == 1);
    auto o = Tensor::ones({2, 2});
    CHECK(o(1, 1) == 1.0f);
    auto f = Tensor::full({3}, -2.0f);
    CHECK(f[2] == -2.0f);
}

TEST_CASE("reshape relabels without moving data") {
    Tensor t({2, 6});
    for (int i = 0; i < 12; ++i) t[i] = static_cast<float>(i);
    Tensor r = t.reshaped({3, 4});
    CHECK(r(0, 3) == 3.0f);
    CHECK(r(2, 0) == 8.0f);
    CHECK_THROWS_AS(t.reshaped({5, 2}), ShapeError);
}

TEST_CASE("finiteness guard") {
    Tensor t({2});
    t[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(require_finite(t, "op"), ValueError);
    t[0] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(require_finite(t, "op"), ValueError);
    t[0] = 1.0f;
    CHECK_NOTHROW(require_finite(t, "op"));
}

TEST_CASE("kernel 4d/2d reshape round trip") {
    // p=2, q=3, k=2 kernel with distinct entries.
    Tensor k4({2, 3, 2, 2});
    for (int i = 0; i < k4.numel(); ++i) k4[i] = static_cast<float>(i + 1);
    Tensor k2 = reshape_kernel_4d_to_2d(k4);
    CHECK(k2.shape() == Shape{2, 12});
    // Row-major flattening keeps each output channel's block contiguous.
    CHECK(k2(0, 0) == k4(0, 0, 0, 0));
    CHECK(k2(0, 11) == k4(0, 2, 1, 1));
    CHECK(k2(1, 4) == k4(1, 1, 0, 0));
    Tensor back = reshape_kernel_2d_to_4d(k2, 3, 2);
    CHECK(back.shape() == k4.shape());
    for (int i = 0; i < k4.numel(); ++i) CHECK(back[i] == k4[i]);
    CHECK_THROWS_AS(reshape_kernel_2d_to_4d(k2, 4, 2), ShapeError);
}
