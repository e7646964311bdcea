#include <cmath>

#include "doctest.h"
#include "grad_check.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/rng.hpp"

using namespace sigstyle;
using sigstyle::testing::gradient_error;

namespace {

Tensor rnd(Shape s, std::uint64_t seed, double std = 1.0) {
    Rng rng(seed);
    return rng.normal_tensor(std::move(s), std);
}

// Weighted sum so every output element contributes a distinct gradient.
ag::Var probe(const ag::Var& x) {
    Tensor w(x->value.shape());
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = std::sin(0.37 * static_cast<double>(i) + 0.1);
    return ag::mean(ag::mul(x, ag::constant(w)));
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("elementwise ops have correct gradients") {
    auto a = rnd({3, 4}, 1), b = rnd({3, 4}, 2);
    CHECK(gradient_error([](auto& v) { return probe(ag::add(v[0], v[1])); }, {a, b}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::sub(v[0], v[1])); }, {a, b}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::mul(v[0], v[1])); }, {a, b}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::silu(v[0])); }, {a}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::gelu(v[0])); }, {a}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::quick_gelu(v[0])); }, {a}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::scale_by(v[0], v[1])); }, {Tensor::scalar(0.7), b}) < kTol);
}

TEST_CASE("linear algebra ops have correct gradients") {
    CHECK(gradient_error([](auto& v) { return probe(ag::matmul(v[0], v[1])); }, {rnd({3, 5}, 3), rnd({5, 2}, 4)}) <
          kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::linear(v[0], v[1], v[2])); },
                         {rnd({4, 3}, 5), rnd({2, 3}, 6), rnd({2}, 7)}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::outer(v[0], v[1])); }, {rnd({3}, 8), rnd({4}, 9)}) < kTol);
    auto m = rnd({3, 4}, 10);
    CHECK(gradient_error([](auto& v) { return probe(ag::mul_rows(v[0], v[1])); }, {m, rnd({3}, 11)}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::add_rows(v[0], v[1])); }, {m, rnd({3}, 12)}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::mul_cols(v[0], v[1])); }, {m, rnd({4}, 13)}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::add_cols(v[0], v[1])); }, {m, rnd({4}, 14)}) < kTol);
}

TEST_CASE("image ops have correct gradients") {
    auto x = rnd({4, 5, 6}, 20);
    auto w3 = rnd({3, 4, 3, 3}, 21, 0.3), w1 = rnd({3, 4, 1, 1}, 22);
    auto bias = rnd({3}, 23);
    CHECK(gradient_error([](auto& v) { return probe(ag::conv2d(v[0], v[1], v[2], 1, ag::Padding::same(1))); },
                         {x, w3, bias}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::conv2d(v[0], v[1], v[2], 2, ag::Padding::same(1))); },
                         {x, w3, bias}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::conv2d(v[0], v[1], v[2], 1, ag::Padding{})); },
                         {x, w1, bias}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::group_norm(v[0], 2, v[1], v[2], 1e-5)); },
                         {x, rnd({4}, 24), rnd({4}, 25)}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::add_channel(v[0], v[1])); }, {x, rnd({4}, 26)}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::upsample_nearest2x(v[0])); }, {x}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::concat_channels(v[0], v[1])); }, {x, rnd({2, 5, 6}, 27)}) <
          kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::tokens_to_chw(ag::chw_to_tokens(v[0]), 5, 6)); }, {x}) <
          kTol);
}

TEST_CASE("sequence ops have correct gradients") {
    auto x = rnd({5, 6}, 30);
    CHECK(gradient_error([](auto& v) { return probe(ag::layer_norm(v[0], v[1], v[2], 1e-5)); },
                         {x, rnd({6}, 31), rnd({6}, 32)}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::concat_rows({v[0], v[1]})); }, {x, rnd({6}, 33)}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::slice_cols(v[0], 2, 3)); }, {x}) < kTol);
    CHECK(gradient_error([](auto& v) { return probe(ag::gather_rows(v[0], {4, 0, 4})); }, {x}) < kTol);
    CHECK(gradient_error([](auto& v) { return ag::mse(v[0], Tensor(Shape{5, 6}, 0.25)); }, {x}) < kTol);
}

TEST_CASE("attention has correct gradients for self and cross layouts") {
    auto q = rnd({4, 6}, 40), k = rnd({3, 6}, 41), v = rnd({3, 6}, 42);
    CHECK(gradient_error([](auto& a) { return probe(ag::attention(a[0], a[1], a[2], 2, false)); }, {q, k, v}) <
          kTol);
    auto s = rnd({4, 6}, 43);
    CHECK(gradient_error([](auto& a) { return probe(ag::attention(a[0], a[1], a[2], 3, true)); }, {s, s, s}) < kTol);
}

TEST_CASE("attention probabilities are row-stochastic and hook replacement is exact") {
    auto q = rnd({4, 6}, 50), k = rnd({5, 6}, 51), v = rnd({5, 6}, 52);
    Tensor p = ag::attention_probs(q, k, 2, false);
    REQUIRE(p.shape() == Shape{8, 5});
    for (std::int64_t r = 0; r < 8; ++r) {
        double sum = 0;
        for (std::int64_t c = 0; c < 5; ++c) {
            CHECK(p.at(r, c) >= 0.0);
            sum += p.at(r, c);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }

    // Returning the map just computed leaves the output unchanged.
    ag::ProbsHook same = [](const Tensor& probs) { return std::optional<Tensor>(probs); };
    auto plain = ag::attention(ag::constant(q), ag::constant(k), ag::constant(v), 2, false);
    auto hooked = ag::attention(ag::constant(q), ag::constant(k), ag::constant(v), 2, false, &same);
    CHECK(plain->value.bitwise_equal(hooked->value));

    ag::ProbsHook bad = [](const Tensor&) { return std::optional<Tensor>(Tensor({3, 3})); };
    CHECK_THROWS_AS(ag::attention(ag::constant(q), ag::constant(k), ag::constant(v), 2, false, &bad), DimensionError);
}

TEST_CASE("uniform attention map averages the value vectors") {
    // Two tokens, one head, hand-computed: output rows are the mean of v rows.
    Tensor q = Tensor::matrix({{1, 0}, {0, 1}});
    Tensor v = Tensor::matrix({{1, 3}, {5, -1}});
    ag::ProbsHook uniform = [](const Tensor& probs) { return std::optional<Tensor>(Tensor(probs.shape(), 0.5)); };
    auto out = ag::attention(ag::constant(q), ag::constant(q), ag::constant(v), 1, false, &uniform);
    CHECK(out->value.bitwise_equal(Tensor::matrix({{3, 1}, {3, 1}})));
}

TEST_CASE("gradients accumulate across shared subgraphs") {
    auto x = rnd({3}, 60);
    CHECK(gradient_error([](auto& v) { return probe(ag::mul(ag::add(v[0], v[0]), ag::silu(v[0]))); }, {x}) < kTol);
}
