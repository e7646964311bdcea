#include <cmath>
#include <limits>

#include "doctest.h"
#include "fixtures.hpp"
#include "sigstyle/ddim.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/rng.hpp"

using namespace sigstyle;
using sigstyle::testing::small_toy;

namespace {

class StepLog : public AttentionHooks {
public:
    std::vector<HookContext> calls;
    std::optional<Tensor> on_self_attention(const HookContext& ctx, const LayerAddress&, const Tensor&) override {
        calls.push_back(ctx);
        return std::nullopt;
    }
};

double round_trip_error(const Backbone& model, const TextEmbedding& text, int T, int seeds) {
    double total = 0.0;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(derive_seed(77, static_cast<std::uint64_t>(s)));
        const Tensor z0 = rng.normal_tensor(model.latent_shape(), 0.5);
        SamplerConfig cfg;
        cfg.num_steps = T;
        const Tensor back = ddim_sample(model, ddim_invert(model, z0, text, cfg).final_latent(), text, cfg).final_latent();
        double e = 0.0;
        for (std::int64_t i = 0; i < z0.numel(); ++i) e += std::abs(back[i] - z0[i]);
        total += e / static_cast<double>(z0.numel());
    }
    return total / seeds;
}

}  // namespace

TEST_CASE("timestep boundaries") {
    CHECK(timestep_boundaries(1000, 1) == std::vector<int>{0, 999});
    const auto b = timestep_boundaries(1000, 50);
    REQUIRE(b.size() == 51);
    CHECK(b[0] == 0);
    CHECK(b[1] == 19);
    CHECK(b[2] == 39);
    CHECK(b[25] == 499);
    CHECK(b[50] == 999);
    for (std::size_t i = 1; i < b.size(); ++i) CHECK(b[i] > b[i - 1]);
    CHECK(timestep_boundaries(10, 3) == std::vector<int>{0, 3, 6, 9});
}

TEST_CASE("sampler config validation") {
    const auto sched = NoiseSchedule::scaled_linear(1000);
    SamplerConfig cfg;
    CHECK(cfg.num_steps == 50);
    CHECK(cfg.eta == 0.0);
    CHECK_NOTHROW(cfg.validate(sched));
    cfg.num_steps = 0;
    CHECK_THROWS_AS(cfg.validate(sched), ConfigError);
    cfg.num_steps = 1000;
    CHECK_THROWS_AS(cfg.validate(sched), ConfigError);
    cfg.num_steps = 999;
    CHECK_NOTHROW(cfg.validate(sched));
    cfg.eta = 0.5;
    CHECK_THROWS_AS(cfg.validate(sched), ConfigError);
    CHECK(default_guidance(BackboneVariant::toy) == 1.0);
    CHECK(default_guidance(BackboneVariant::real_pretrained) == 7.5);
}

TEST_CASE("single update matches the written-out formula") {
    const auto sched = NoiseSchedule::scaled_linear(1000);
    const Tensor z = Tensor::vector({0.3, -1.2, 2.0});
    const Tensor e = Tensor::vector({-0.5, 0.1, 0.7});
    const Tensor out = ddim_update(sched, z, e, 600, 580);
    const double af = sched.alpha_bar_at(600), at = sched.alpha_bar_at(580);
    for (int i = 0; i < 3; ++i) {
        const double x0 = (z[i] - std::sqrt(1 - af) * e[i]) / std::sqrt(af);
        CHECK(out[i] == doctest::Approx(std::sqrt(at) * x0 + std::sqrt(1 - at) * e[i]).epsilon(1e-14));
    }
}

TEST_CASE("zero predictor: sampling and inversion follow the closed form") {
    Backbone model = small_toy(4, true);
    const auto text = model.embed_prompt("a photo of a cat");
    const auto& sched = model.schedule();
    Rng rng(3);
    const Tensor z = rng.normal_tensor(model.latent_shape());
    for (int T : {1, 7, 50}) {
        SamplerConfig cfg;
        cfg.num_steps = T;
        const Trajectory down = ddim_sample(model, z, text, cfg);
        REQUIRE(down.latents.size() == static_cast<std::size_t>(T) + 1);
        CHECK(down.timestep_map.front() == 999);
        CHECK(down.timestep_map.back() == 0);
        const double down_ratio = std::sqrt(sched.alpha_bar_at(0) / sched.alpha_bar_at(999));
        const Trajectory up = ddim_invert(model, z, text, cfg);
        const double up_ratio = std::sqrt(sched.alpha_bar_at(999) / sched.alpha_bar_at(0));
        for (std::int64_t i = 0; i < z.numel(); ++i) {
            CHECK(std::abs(down.final_latent()[i] - z[i] * down_ratio) <= 1e-13 * std::abs(z[i] * down_ratio) + 1e-300);
            CHECK(std::abs(up.final_latent()[i] - z[i] * up_ratio) <= 1e-13 * std::abs(z[i] * up_ratio) + 1e-300);
        }
        const Tensor back = ddim_sample(model, up.final_latent(), text, cfg).final_latent();
        for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(std::abs(back[i] - z[i]) <= 1e-13 * std::abs(z[i]) + 1e-300);
    }
}

TEST_CASE("sampling is deterministic and T = 1 runs one update") {
    Backbone model = small_toy(4);
    const auto text = model.embed_prompt("a photo of a dog");
    Rng rng(4);
    const Tensor z = rng.normal_tensor(model.latent_shape());
    SamplerConfig cfg;
    cfg.num_steps = 10;
    const Trajectory a = ddim_sample(model, z, text, cfg);
    const Trajectory b = ddim_sample(model, z, text, cfg);
    REQUIRE(a.latents.size() == 11);
    for (std::size_t i = 0; i < a.latents.size(); ++i) CHECK(a.latents[i].bitwise_equal(b.latents[i]));
    const Trajectory ia = ddim_invert(model, z, text, cfg);
    const Trajectory ib = ddim_invert(model, z, text, cfg);
    CHECK(ia.direction == Direction::invert);
    for (std::size_t i = 0; i < ia.latents.size(); ++i) CHECK(ia.latents[i].bitwise_equal(ib.latents[i]));

    cfg.num_steps = 1;
    StepLog log;
    const Trajectory one = ddim_sample(model, z, text, cfg, &log);
    CHECK(one.latents.size() == 2);
    CHECK(one.timestep_map == std::vector<int>{999, 0});
    CHECK(log.calls.size() == model.list_attention_addresses({std::nullopt, AttnKind::self_attn, Projection::query}).size());
}

TEST_CASE("hooks see each step in order and guidance mixes two branches") {
    Backbone model = small_toy(4);
    const auto text = model.embed_prompt("a photo of a dog");
    const auto uncond = model.embed_prompt("");
    const std::size_t layers =
        model.list_attention_addresses({std::nullopt, AttnKind::self_attn, Projection::query}).size();
    Rng rng(6);
    const Tensor z = rng.normal_tensor(model.latent_shape());

    SamplerConfig cfg;
    cfg.num_steps = 4;
    StepLog single;
    ddim_sample(model, z, text, cfg, &single);
    REQUIRE(single.calls.size() == 4 * layers);
    for (std::size_t i = 0; i < single.calls.size(); ++i) {
        CHECK(single.calls[i].step == static_cast<int>(i / layers));
        CHECK(single.calls[i].branch == GuidanceBranch::conditional);
    }

    cfg.guidance_scale = 3.0;
    StepLog both;
    ddim_sample(model, z, text, cfg, &both);
    CHECK(both.calls.size() == 4 * 2 * layers);
    CHECK(both.calls[layers].branch == GuidanceBranch::unconditional);

    const Tensor ec = model.predict_noise({z, 999}, 999, text).data;
    const Tensor eu = model.predict_noise({z, 999}, 999, uncond).data;
    const Tensor g = guided_noise(model, z, 999, text, &uncond, 3.0, nullptr, 0);
    for (std::int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == doctest::Approx(eu[i] + 3.0 * (ec[i] - eu[i])).epsilon(1e-13));
}

TEST_CASE("non-finite latents and bad shapes are reported") {
    Backbone model = small_toy(4);
    const auto text = model.embed_prompt("a photo");
    SamplerConfig cfg;
    cfg.num_steps = 5;
    Tensor z = Tensor::zeros(model.latent_shape());
    z[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        ddim_sample(model, z, text, cfg);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
    CHECK_THROWS_AS(ddim_invert(model, Tensor::zeros({4, 5, 5}), text, cfg), DimensionError);
    CHECK(check_guidance_match(1.0, 1.0));
    CHECK_FALSE(check_guidance_match(1.0, 7.5));
}

TEST_CASE("toy round-trip error shrinks as T grows") {
    Backbone model = small_toy(4);
    const auto text = model.embed_prompt("a photo of a cat");
    const double e50 = round_trip_error(model, text, 50, 4);
    const double e100 = round_trip_error(model, text, 100, 4);
    const double e200 = round_trip_error(model, text, 200, 4);
    MESSAGE("round-trip error T=50 " << e50 << ", T=100 " << e100 << ", T=200 " << e200);
    CHECK(e100 < e50);
    CHECK(e200 < e100);
    CHECK(e50 < 10.0 * e200);
}
