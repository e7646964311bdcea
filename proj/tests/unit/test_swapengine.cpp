#include <filesystem>

#include "doctest.h"
#include "fixtures.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/rng.hpp"
#include "sigstyle/styletune.hpp"
#include "sigstyle/swapengine.hpp"

using namespace sigstyle;
using sigstyle::testing::ScratchDir;
using sigstyle::testing::small_toy;
using sigstyle::testing::stripes_image;

namespace {

SamplerConfig sampler(int T, double guidance = 1.0) {
    SamplerConfig cfg;
    cfg.num_steps = T;
    cfg.guidance_scale = guidance;
    return cfg;
}

StyleCheckpoint quick_style(const Backbone& model) {
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.steps = 8;
    cfg.seed = 2;
    return finetune(model, {stripes_image(model.image_size() * 5 / 4)}, cfg);
}

void check_same(const Trajectory& a, const Trajectory& b) {
    REQUIRE(a.latents.size() == b.latents.size());
    for (std::size_t i = 0; i < a.latents.size(); ++i) CHECK_MESSAGE(a.latents[i].bitwise_equal(b.latents[i]), i);
    CHECK(a.timestep_map == b.timestep_map);
}

std::map<TraceKey, Tensor> contents(const AttentionTrace& t) {
    std::map<TraceKey, Tensor> out;
    for (const auto& k : t.keys()) out[k] = t.get(k);
    return out;
}

}  // namespace

TEST_CASE("swap plan validation and layer resolution") {
    Backbone model = small_toy(4);
    SwapPlan plan;
    CHECK(plan.k == 25);
    CHECK_NOTHROW(plan.validate(50));
    CHECK_NOTHROW(plan.validate(25));
    CHECK_THROWS_AS(plan.validate(24), ConfigError);
    plan.k = -1;
    CHECK_THROWS_AS(plan.validate(50), ConfigError);

    SwapPlan all;
    const auto layers = all.resolved_layers(model);
    CHECK(layers.size() == 6);
    for (const auto& l : layers) CHECK(l.kind == AttnKind::self_attn);
    SwapPlan bad;
    bad.layers = {{Region::decoder, 0, AttnKind::cross_attn}};
    CHECK_THROWS_AS(bad.resolved_layers(model), ConfigError);
    bad.layers = {{Region::decoder, 9, AttnKind::self_attn}};
    CHECK_THROWS_AS(bad.resolved_layers(model), UnknownAddressError);

    CHECK(active_branches(all, 1.0) == std::set<GuidanceBranch>{GuidanceBranch::conditional});
    CHECK(active_branches(all, 5.0).size() == 2);
}

TEST_CASE("recording is transparent and complete") {
    Backbone model = small_toy(4);
    const auto text = model.embed_prompt("a photo of a house");
    Rng rng(1);
    const Tensor zT = rng.normal_tensor(model.latent_shape());
    for (double guidance : {1.0, 4.0}) {
        const auto cfg = sampler(8, guidance);
        SwapPlan plan;
        plan.k = 5;
        const Reconstruction rec = record_reconstruction(model, zT, text, cfg, plan);
        check_same(rec.trajectory, ddim_sample(model, zT, text, cfg));
        const std::size_t branches = active_branches(plan, guidance).size();
        CHECK(rec.trace.size() == 5 * 6 * branches);
        for (const auto& k : rec.trace.keys()) {
            CHECK(k.step < 5);
            CHECK_NOTHROW(check_row_stochastic(rec.trace.get(k), k.str()));
        }
        CHECK(rec.trace.meta().num_steps == 8);
        CHECK(rec.trace.meta().k_recorded == 5);
        CHECK(rec.trace.meta().guidance_scale == guidance);

        SwapPlan some = plan;
        some.layers = {{Region::decoder, 0, AttnKind::self_attn}};
        some.branches = {GuidanceBranch::conditional};
        CHECK(record_reconstruction(model, zT, text, cfg, some).trace.size() == 5);
    }
    SwapPlan too_many;
    too_many.k = 9;
    CHECK_THROWS_AS(record_reconstruction(model, zT, text, sampler(8), too_many), ConfigError);
}

TEST_CASE("injection uses traced maps bitwise and never reads past k") {
    Backbone model = small_toy(4);
    const auto content = model.embed_prompt("a photo of a house");
    const auto target = model.embed_prompt("a photo of a boat");
    Rng rng(2);
    const Tensor zT = rng.normal_tensor(model.latent_shape());
    for (double guidance : {1.0, 3.0}) {
        const auto cfg = sampler(8, guidance);
        SwapPlan plan;
        plan.k = 3;
        const Reconstruction rec = record_reconstruction(model, zT, content, cfg, plan);
        const auto before = contents(rec.trace);
        const std::size_t reads_before = rec.trace.read_log().size();

        InjectHooks hooks(rec.trace, plan, plan.resolved_layers(model));
        std::int64_t observed = 0;
        hooks.on_inject = [&](const TraceKey& k, const Tensor& map) {
            CHECK(map.bitwise_equal(before.at(k)));
            ++observed;
        };
        stylized_generate(model, zT, target, rec.trace, plan, cfg, {}, &hooks);
        const auto branches = static_cast<std::int64_t>(active_branches(plan, guidance).size());
        CHECK(hooks.injections() == 3 * 6 * branches);
        CHECK(observed == hooks.injections());
        CHECK(hooks.calls_at_or_after_k() == 5 * 6 * branches);
        const auto& log = rec.trace.read_log();
        CHECK(log.size() - reads_before == static_cast<std::size_t>(hooks.injections()));
        for (std::size_t i = reads_before; i < log.size(); ++i) CHECK(log[i].step < plan.k);

        const auto after = contents(rec.trace);
        for (const auto& [k, v] : before) CHECK(after.at(k).bitwise_equal(v));
    }
}

TEST_CASE("boundary identities") {
    Backbone model = small_toy(4);
    const StyleCheckpoint style = quick_style(model);
    const auto content = model.embed_prompt("a photo of a house");
    const auto target = model.embed_prompt("a photo of a house in the style of *", {{"*", style.token_embedding}});
    Rng rng(3);
    const Tensor zT = rng.normal_tensor(model.latent_shape());
    const auto cfg = sampler(6);

    SUBCASE("k = 0 is plain personalized sampling") {
        SwapPlan plan;
        plan.k = 0;
        const SwapResult r = run_attention_swap(model, zT, content, target, &style, 1.0, plan, cfg);
        CHECK(r.stats.injections == 0);
        CHECK(r.trace.size() == 0);
        Trajectory plain;
        {
            PatchScope scope = apply_checkpoint(model, style, 1.0);
            plain = ddim_sample(model, zT, target, cfg);
        }
        check_same(r.stylized, plain);
    }
    SUBCASE("k = T with the identity style and the content prompt reproduces reconstruction") {
        const StyleCheckpoint identity = identity_checkpoint(model, init_style_token(model, 1), 1);
        SwapPlan plan;
        plan.k = cfg.num_steps;
        const SwapResult r = run_attention_swap(model, zT, content, content, &identity, 1.0, plan, cfg);
        check_same(r.stylized, r.reconstruction);
    }
    SUBCASE("the style is removed after the run") {
        SwapPlan plan;
        plan.k = 2;
        run_attention_swap(model, zT, content, target, &style, 1.0, plan, cfg);
        CHECK(model.unet_parameters().offset_names().empty());
    }
}

TEST_CASE("lockstep and replay agree bitwise") {
    Backbone model = small_toy(4);
    const StyleCheckpoint style = quick_style(model);
    const auto content = model.embed_prompt("a photo of a house");
    const auto target = model.embed_prompt("a photo of a house in the style of *", {{"*", style.token_embedding}});
    Rng rng(4);
    const Tensor zT = rng.normal_tensor(model.latent_shape());
    Tensor mask(model.latent_shape());
    for (std::int64_t i = 0; i < mask.numel(); ++i) mask[i] = (i % 3) ? 1.0 : 0.0;
    const BranchBlend blend = [&](int, Tensor& z, const Tensor& rec) {
        for (std::int64_t i = 0; i < z.numel(); ++i) z[i] = mask[i] * z[i] + (1 - mask[i]) * rec[i];
    };
    for (double guidance : {1.0, 2.5}) {
        SwapPlan plan;
        plan.k = 4;
        const auto cfg = sampler(7, guidance);
        for (const BranchBlend* b : {static_cast<const BranchBlend*>(nullptr), &blend}) {
            const BranchBlend use = b ? *b : BranchBlend{};
            const SwapResult a = run_attention_swap(model, zT, content, target, &style, 0.8, plan, cfg, SwapMode::lockstep, use);
            const SwapResult r = run_attention_swap(model, zT, content, target, &style, 0.8, plan, cfg, SwapMode::replay, use);
            check_same(a.reconstruction, r.reconstruction);
            check_same(a.stylized, r.stylized);
            CHECK(a.stats.injections == r.stats.injections);
            CHECK(a.stats.records == r.stats.records);
            CHECK(a.trace.size() == r.trace.size());
        }
    }
}

TEST_CASE("trace mismatches, gaps and bad maps are rejected") {
    Backbone model = small_toy(4);
    const auto text = model.embed_prompt("a photo of a house");
    Rng rng(5);
    const Tensor zT = rng.normal_tensor(model.latent_shape());
    SwapPlan plan;
    plan.k = 3;
    Reconstruction rec = record_reconstruction(model, zT, text, sampler(6), plan);

    CHECK_THROWS_AS(stylized_generate(model, zT, text, rec.trace, plan, sampler(7)), IncompatibilityError);
    CHECK_THROWS_AS(stylized_generate(model, zT, text, rec.trace, plan, sampler(6, 2.0)), IncompatibilityError);
    SwapPlan more = plan;
    more.k = 4;
    CHECK_THROWS_AS(stylized_generate(model, zT, text, rec.trace, more, sampler(6)), IncompatibilityError);
    Backbone bigger = small_toy(8);
    CHECK_THROWS_AS(stylized_generate(bigger, rng.normal_tensor(bigger.latent_shape()), bigger.embed_prompt("a"),
                                      rec.trace, plan, sampler(6)),
                    IncompatibilityError);

    const TraceKey victim{2, {Region::middle, 1, AttnKind::self_attn}, GuidanceBranch::conditional};
    REQUIRE(rec.trace.contains(victim));
    AttentionTrace gappy = rec.trace;
    gappy.erase(victim);
    try {
        stylized_generate(model, zT, text, gappy, plan, sampler(6));
        FAIL("expected TraceGapError");
    } catch (const TraceGapError& e) {
        CHECK(std::string(e.what()).find("middle.1.self") != std::string::npos);
    }

    // Swap two maps of different shapes: encoder.0 runs at 4x4, middle at 2x2.
    AttentionTrace wrong({6, 3, model.latent_shape(), 1.0});
    for (const auto& k : rec.trace.keys()) {
        const TraceKey other{k.step, {Region::encoder, 0, AttnKind::self_attn}, k.branch};
        wrong.put(k, k.layer.region == Region::middle ? rec.trace.get(other) : rec.trace.get(k));
    }
    try {
        stylized_generate(model, zT, text, wrong, plan, sampler(6));
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        CHECK(std::string(e.what()).find("middle.0.self") != std::string::npos);
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }

    AttentionTrace skewed({6, 3, model.latent_shape(), 1.0});
    for (const auto& k : rec.trace.keys()) {
        Tensor m = rec.trace.get(k);
        if (k.step == 1) m[0] += 0.01;
        skewed.put(k, m);
    }
    CHECK_THROWS_AS(stylized_generate(model, zT, text, skewed, plan, sampler(6)), ValidationError);
    CHECK_THROWS_AS(skewed.put(rec.trace.keys().front(), rec.trace.get(rec.trace.keys().front())), ValidationError);
}

TEST_CASE("spilled traces behave like resident ones") {
    Backbone model = small_toy(4);
    const auto content = model.embed_prompt("a photo of a house");
    const auto target = model.embed_prompt("a photo of a boat");
    Rng rng(6);
    const Tensor zT = rng.normal_tensor(model.latent_shape());
    SwapPlan plan;
    plan.k = 3;
    const auto cfg = sampler(5);
    std::filesystem::path spill_path;
    {
        TraceOptions tight;
        tight.memory_budget_bytes = 4096;
        const SwapResult spilled =
            run_attention_swap(model, zT, content, target, nullptr, 1.0, plan, cfg, SwapMode::replay, {}, tight);
        const SwapResult resident = run_attention_swap(model, zT, content, target, nullptr, 1.0, plan, cfg);
        CHECK(spilled.trace.spilled_entries() > 0);
        CHECK(spilled.trace.resident_bytes() <= 4096);
        CHECK(resident.trace.spilled_entries() == 0);
        check_same(spilled.stylized, resident.stylized);
        const auto a = contents(spilled.trace), b = contents(resident.trace);
        for (const auto& [k, v] : b) CHECK(a.at(k).bitwise_equal(v));

        TraceOptions none;
        none.memory_budget_bytes = 0;
        AttentionTrace t({1, 1, {1}, 1.0}, none);
        t.put({0, {}, GuidanceBranch::conditional}, Tensor::matrix({{1.0}}));
        CHECK(t.spilled_entries() == 1);
        CHECK(t.get({0, {}, GuidanceBranch::conditional})[0] == 1.0);
        spill_path = std::filesystem::temp_directory_path();
    }
    for (const auto& e : std::filesystem::directory_iterator(spill_path)) {
        CHECK(e.path().filename().string().rfind("sigstyle-trace-" + std::to_string(::getpid()) + "-", 0) != 0);
    }
}

TEST_CASE("trace dump round trip") {
    ScratchDir dir("dump");
    Backbone model = small_toy(4);
    Rng rng(7);
    SwapPlan plan;
    plan.k = 2;
    const Reconstruction rec =
        record_reconstruction(model, rng.normal_tensor(model.latent_shape()), model.embed_prompt("a cat"), sampler(4, 2.0), plan);
    dump_trace(rec.trace, dir.path / "trace");
    CHECK(std::filesystem::exists(dir.path / "trace" / "index.json"));
    const AttentionTrace back = load_trace_dump(dir.path / "trace");
    CHECK(back.meta().num_steps == 4);
    CHECK(back.meta().guidance_scale == 2.0);
    CHECK(back.meta().latent_shape == model.latent_shape());
    const auto a = contents(rec.trace), b = contents(back);
    REQUIRE(a.size() == b.size());
    for (const auto& [k, v] : a) CHECK(b.at(k).bitwise_equal(v));
}
