#include <Eigen/Dense>

#include "doctest.h"
#include "sigstyle/backbone/toy.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/hypernet.hpp"
#include "sigstyle/rng.hpp"

using namespace sigstyle;

namespace {

OffsetPredictor randomized(const std::vector<AttentionAddress>& targets, std::uint64_t seed) {
    auto p = OffsetPredictor::init(targets, seed);
    Rng rng(seed + 1);
    for (auto& g : p.groups()) g[GroupField::gate] = Tensor::scalar(0.3 + rng.uniform());
    return p;
}

}  // namespace

TEST_CASE("fresh predictor gives exact zero offsets") {
    Backbone model = make_toy_backbone();
    auto targets = default_targets(model);
    auto p = OffsetPredictor::init(targets, 7);
    for (const auto& a : targets) {
        Tensor d = p.predict_offset(a);
        CHECK(d.shape() == Shape{a.dim_r, a.dim_c});
        CHECK(d.max_abs() == 0.0);
        CHECK(p.group(a)[GroupField::cons][0] == 1.0);
        CHECK(p.group(a)[GroupField::gate][0] == 0.0);
    }
    auto q = OffsetPredictor::init(targets, 7);
    for (const auto& [k, v] : p.state()) CHECK(v.bitwise_equal(q.state().at(k)));
    CHECK_THROWS_AS(OffsetPredictor::init({}, 1), ConfigError);
}

TEST_CASE("parameter count matches the closed form") {
    Backbone model = make_toy_backbone();
    auto targets = default_targets(model);
    REQUIRE(targets.size() == 12);
    auto count = [](const std::vector<AttentionAddress>& ts) {
        std::int64_t n = 0;
        for (const auto& a : ts) n += 1 + 3 * a.dim_r + 3 * a.dim_c + 1;
        return n;
    };
    CHECK(OffsetPredictor::init(targets, 1).parameter_count() == count(targets));
    // Every toy decoder matrix is 32 x 32: 12 * (2 + 6 * 32).
    CHECK(count(targets) == 12 * 194);
    std::vector<AttentionAddress> eight(targets.begin(), targets.begin() + 8);
    CHECK(OffsetPredictor::init(eight, 1).parameter_count() == 8 * 194);
}

TEST_CASE("hand-set predictor reproduces the outer-product oracle") {
    AttentionAddress a{Region::decoder, 0, AttnKind::self_attn, Projection::query, 2, 2};
    auto p = OffsetPredictor::init({a}, 3);
    auto& g = p.group(a);
    g[GroupField::cons] = Tensor::scalar(1.0);
    g[GroupField::row_map] = Tensor::vector({1, 2});
    g[GroupField::col_map] = Tensor::vector({3, 4});
    g[GroupField::row_scale] = Tensor::vector({1, 1});
    g[GroupField::col_scale] = Tensor::vector({1, 1});
    g[GroupField::row_shift] = Tensor::vector({0, 0});
    g[GroupField::col_shift] = Tensor::vector({0, 0});
    g[GroupField::gate] = Tensor::scalar(1.0);
    CHECK(p.predict_offset(a).bitwise_equal(Tensor::matrix({{3, 4}, {6, 8}})));
    g[GroupField::gate] = Tensor::scalar(2.0);
    CHECK(p.predict_offset(a).bitwise_equal(Tensor::matrix({{6, 8}, {12, 16}})));
    // Shifts: column shift then row transform.
    g[GroupField::gate] = Tensor::scalar(1.0);
    g[GroupField::col_shift] = Tensor::vector({1, 0});
    g[GroupField::row_scale] = Tensor::vector({2, 1});
    g[GroupField::row_shift] = Tensor::vector({0, -1});
    CHECK(p.predict_offset(a).bitwise_equal(Tensor::matrix({{8, 8}, {6, 7}})));
}

TEST_CASE("doubling the gate doubles every entry") {
    Backbone model = make_toy_backbone();
    auto p = randomized(default_targets(model), 11);
    for (auto& g : p.groups()) {
        Tensor before = p.predict_offset(g.address);
        g[GroupField::gate][0] *= 2.0;
        Tensor after = p.predict_offset(g.address);
        for (std::int64_t i = 0; i < before.numel(); ++i) CHECK(after[i] == 2.0 * before[i]);
    }
}

TEST_CASE("offset rank is at most three") {
    Backbone model = make_toy_backbone();
    auto p = randomized(default_targets(model), 13);
    for (const auto& g : p.groups()) {
        Tensor d = p.predict_offset(g.address);
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(d.data(), d.dim(0),
                                                                                                  d.dim(1));
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
        svd.setThreshold(1e-10);
        CHECK(svd.rank() <= 3);
        CHECK(svd.rank() >= 1);
    }
}

TEST_CASE("apply_offsets: identity at lambda 0, linearity, isolation, release") {
    Backbone model = make_toy_backbone();
    auto targets = default_targets(model);
    auto p = randomized(targets, 17);
    Rng rng(4);
    LatentGrid z{rng.normal_tensor(model.latent_shape()), std::nullopt};
    auto text = model.embed_prompt("a photo in the style of *");
    auto base_eps = model.predict_noise(z, 400, text);
    std::map<std::string, Tensor> before;
    for (const auto& a : model.attention_inventory()) before[a.str()] = model.read_weight(a);

    {
        auto scope = apply_offsets(model, p, {0.0, {}});
        CHECK(model.predict_noise(z, 400, text).data.bitwise_equal(base_eps.data));
    }
    std::map<std::string, Tensor> d1, d2;
    {
        auto scope = apply_offsets(model, p, {0.75, {}});
        for (const auto& a : targets) d1[a.str()] = model.read_offset(a);
        for (const auto& a : model.attention_inventory()) {
            const bool targeted = p.has_target(a);
            CHECK(model.read_weight(a).bitwise_equal(before[a.str()]) != targeted);
        }
        CHECK(!model.predict_noise(z, 400, text).data.bitwise_equal(base_eps.data));
    }
    {
        auto scope = apply_offsets(model, p, {1.5, {}});
        for (const auto& a : targets) d2[a.str()] = model.read_offset(a);
    }
    for (const auto& a : targets) {
        for (std::int64_t i = 0; i < d1[a.str()].numel(); ++i) CHECK(d2[a.str()][i] - 2.0 * d1[a.str()][i] == 0.0);
    }
    for (const auto& a : model.attention_inventory()) CHECK(model.read_weight(a).bitwise_equal(before[a.str()]));
    CHECK(model.predict_noise(z, 400, text).data.bitwise_equal(base_eps.data));
}

TEST_CASE("apply_offsets error paths") {
    Backbone model = make_toy_backbone();
    auto targets = default_targets(model);
    auto p = OffsetPredictor::init({targets[0], targets[1]}, 1);
    CHECK_THROWS_AS(apply_offsets(model, p, {1.0, {targets[2]}}), UnknownTargetError);
    CHECK_THROWS_AS(apply_offsets(model, p, {-1.0, {}}), ConfigError);
    AttentionAddress enc{Region::encoder, 0, AttnKind::self_attn, Projection::query, 16, 16};
    CHECK_THROWS_AS(apply_offsets(model, OffsetPredictor::init({enc}, 1), {1.0, {}}), ConfigError);
    AttentionAddress missing{Region::decoder, 9, AttnKind::self_attn, Projection::query, 32, 32};
    CHECK_THROWS_AS(apply_offsets(model, OffsetPredictor::init({missing}, 1), {1.0, {}}), UnknownAddressError);
    CHECK_THROWS_AS(p.predict_offset(targets[5]), UnknownTargetError);
}

TEST_CASE("predictor state round trip") {
    Backbone model = make_toy_backbone();
    auto targets = default_targets(model);
    auto p = randomized(targets, 21);
    auto q = OffsetPredictor::from_state(targets, p.state());
    for (const auto& a : targets) CHECK(p.predict_offset(a).bitwise_equal(q.predict_offset(a)));
    auto st = p.state();
    st.erase(st.begin());
    CHECK_THROWS_AS(OffsetPredictor::from_state(targets, st), ParseError);
}
