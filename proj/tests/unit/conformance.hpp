#pragma once

// Interface contract checks shared by every backbone adapter.

#include <set>

#include "doctest.h"
#include "sigstyle/backbone/backbone.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/rng.hpp"

namespace sigstyle::testing {

// Records self-attention probabilities without changing them.
class RecordingHooks : public AttentionHooks {
public:
    std::vector<LayerAddress> order;
    std::optional<Tensor> on_self_attention(const HookContext&, const LayerAddress& layer, const Tensor&) override {
        order.push_back(layer);
        return std::nullopt;
    }
};

inline Image test_pattern(int size, std::uint64_t seed) {
    Rng rng(seed);
    Image img(3, size, size);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                img.at(c, y, x) = 0.5 + 0.3 * std::sin(0.11 * (x + 3 * c) + 0.07 * y) + 0.05 * rng.normal();
                img.at(c, y, x) = std::clamp(img.at(c, y, x), 0.0, 1.0);
            }
        }
    }
    return img;
}

inline void check_backbone_conformance(Backbone& model, const std::string& prompt_with_star) {
    const auto& shape = model.latent_shape();
    Rng rng(5);
    LatentGrid z{rng.normal_tensor(shape), std::nullopt};

    SUBCASE("inventory is complete, unique and consistent with weights") {
        const auto& inv = model.attention_inventory();
        REQUIRE(!inv.empty());
        std::set<AttentionAddress> seen(inv.begin(), inv.end());
        CHECK(seen.size() == inv.size());
        for (const auto& a : inv) {
            const Tensor w = model.read_weight(a);
            CHECK(w.shape() == Shape{a.dim_r, a.dim_c});
            CHECK(a.dim_r > 0);
            CHECK(a.dim_c > 0);
        }
        CHECK(model.list_attention_addresses().size() == inv.size());
    }

    SUBCASE("filters are conjunctive") {
        AddressFilter self_f{Region::decoder, AttnKind::self_attn, std::nullopt};
        AddressFilter cross_f{Region::decoder, AttnKind::cross_attn, std::nullopt};
        AddressFilter any_f{Region::decoder, std::nullopt, std::nullopt};
        auto a = model.list_attention_addresses(self_f);
        auto b = model.list_attention_addresses(cross_f);
        std::set<AttentionAddress> u(a.begin(), a.end());
        u.insert(b.begin(), b.end());
        auto c = model.list_attention_addresses(any_f);
        CHECK(u == std::set<AttentionAddress>(c.begin(), c.end()));
        CHECK(a.size() + b.size() == c.size());
    }

    SUBCASE("prediction is deterministic and hook transparent") {
        auto text = model.embed_prompt(prompt_with_star);
        auto e1 = model.predict_noise(z, 500, text);
        auto e2 = model.predict_noise(z, 500, text);
        CHECK(e1.data.shape() == shape);
        CHECK(e1.data.bitwise_equal(e2.data));
        RecordingHooks rec;
        auto e3 = model.predict_noise(z, 500, text, &rec);
        CHECK(e1.data.bitwise_equal(e3.data));
        CHECK(rec.order == model.unet().self_attention_layers());
    }

    SUBCASE("timestep range is enforced") {
        auto text = model.embed_prompt("");
        CHECK_THROWS_AS(model.predict_noise(z, -1, text), TimestepError);
        CHECK_THROWS_AS(model.predict_noise(z, model.schedule().num_train_steps(), text), TimestepError);
    }

    SUBCASE("token overrides are substituted verbatim") {
        Tensor v = rng.normal_tensor({model.embedding_width()});
        auto e = model.embed_prompt(prompt_with_star, {{"*", v}});
        bool found = false;
        for (std::size_t i = 0; i < e.pieces.size(); ++i) {
            if (e.pieces[i] != "*") continue;
            found = true;
            for (std::int64_t j = 0; j < v.numel(); ++j) {
                CHECK(e.token_rows.at(static_cast<std::int64_t>(i), j) == v[j]);
            }
        }
        CHECK(found);
        CHECK(model.embed_prompt(prompt_with_star).context.bitwise_equal(model.embed_prompt(prompt_with_star).context));
        CHECK_THROWS_AS(model.embed_prompt("a photo of a dog", {{"*", v}}), UnknownTokenError);
        CHECK_THROWS_AS(model.embed_prompt(prompt_with_star, {{"*", Tensor({v.numel() + 1})}}), DimensionError);
    }

    SUBCASE("patches are reversible and isolated") {
        auto dec = model.list_attention_addresses({Region::decoder, AttnKind::self_attn, Projection::query});
        REQUIRE(!dec.empty());
        const auto& a = dec.front();
        const Tensor original = model.read_weight(a);
        std::map<std::string, Tensor> enc_before;
        for (const auto& e : model.list_attention_addresses({Region::encoder, std::nullopt, std::nullopt})) {
            enc_before[e.str()] = model.read_weight(e);
        }
        auto text = model.embed_prompt(prompt_with_star);
        auto base_out = model.predict_noise(z, 300, text);

        model.patch_weight(a, original);  // w + 0
        CHECK(model.predict_noise(z, 300, text).data.bitwise_equal(base_out.data));

        Tensor bumped = original;
        for (auto& x : bumped.values()) x += 0.25;
        model.patch_weight(a, bumped);
        CHECK(model.read_weight(a).bitwise_equal(bumped));
        CHECK(!model.predict_noise(z, 300, text).data.bitwise_equal(base_out.data));
        for (const auto& e : model.list_attention_addresses({Region::encoder, std::nullopt, std::nullopt})) {
            CHECK(model.read_weight(e).bitwise_equal(enc_before[e.str()]));
        }
        CHECK(model.unet_parameters().base(model.parameter_name(a)).bitwise_equal(original));
        model.unpatch_weight(a);
        CHECK(model.read_weight(a).bitwise_equal(original));
        CHECK(model.predict_noise(z, 300, text).data.bitwise_equal(base_out.data));
        CHECK_THROWS_AS(model.patch_weight(a, Tensor({a.dim_r + 1, a.dim_c})), DimensionError);
    }

    SUBCASE("autoencoder contract") {
        const int s = model.image_size();
        Image zero(3, s, s);
        auto z0 = model.encode_image(zero);
        CHECK(z0.data.shape() == shape);
        CHECK(z0.data.bitwise_equal(model.encode_image(zero).data));
        CHECK_THROWS_AS(model.encode_image(Image(3, s + 8, s)), DimensionError);
        Image d0 = model.decode_latent({Tensor(shape), std::nullopt});
        CHECK(d0.width() == s);
        CHECK(d0.pixels.bitwise_equal(model.decode_latent({Tensor(shape), std::nullopt}).pixels));
        Tensor nan_latent(shape);
        nan_latent[0] = std::nan("");
        CHECK_THROWS_AS(model.decode_latent({nan_latent, std::nullopt}), NumericError);
        CHECK_THROWS_AS(model.decode_latent({Tensor({shape[0] + 1, shape[1], shape[2]}), std::nullopt}),
                        DimensionError);
    }
}

}  // namespace sigstyle::testing
