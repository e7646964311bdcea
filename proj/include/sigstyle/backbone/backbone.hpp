#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sigstyle/backbone/address.hpp"
#include "sigstyle/backbone/components.hpp"
#include "sigstyle/backbone/hooks.hpp"
#include "sigstyle/backbone/parameters.hpp"
#include "sigstyle/backbone/schedule.hpp"
#include "sigstyle/backbone/unet.hpp"
#include "sigstyle/image.hpp"

namespace sigstyle {

enum class BackboneVariant { real_pretrained, toy };

struct LatentGrid {
    Tensor data;
    std::optional<int> timestep;
};

struct TextEmbedding {
    std::vector<std::string> pieces;
    Tensor token_rows;  // [L, embedding_width], overrides substituted verbatim
    Tensor context;     // [L, context_width], what cross-attention consumes
};

using TokenOverrides = std::map<std::string, Tensor>;

// A latent diffusion model: text encoder, UNet with addressable attention
// projections, autoencoder and noise schedule.
//
// Single writer: patch_* must not race with predict_noise on the same handle.
// Distinct handles may run inference concurrently.
class Backbone {
public:
    struct Parts {
        BackboneVariant variant = BackboneVariant::toy;
        std::string model_id;
        NoiseSchedule schedule;
        UNetConfig unet_config;
        ParameterStore unet_params;
        std::unique_ptr<TextEncoder> text_encoder;
        ParameterStore text_params;
        std::unique_ptr<Autoencoder> autoencoder;
        ParameterStore vae_params;
        std::int64_t latent_size = 0;
    };

    explicit Backbone(Parts parts);
    Backbone(Backbone&&) noexcept = default;
    Backbone& operator=(Backbone&&) noexcept = default;
    Backbone(const Backbone&) = delete;
    Backbone& operator=(const Backbone&) = delete;

    BackboneVariant variant() const { return parts_.variant; }
    const std::string& model_id() const { return parts_.model_id; }
    int image_size() const { return parts_.autoencoder->image_size(); }
    const Shape& latent_shape() const { return latent_shape_; }
    const NoiseSchedule& schedule() const { return parts_.schedule; }
    const UNet& unet() const { return *unet_; }
    const std::vector<AttentionAddress>& attention_inventory() const { return unet_->inventory(); }
    std::int64_t embedding_width() const { return parts_.text_encoder->embedding_width(); }

    LatentGrid encode_image(const Image& image) const;
    Image decode_latent(const LatentGrid& latent) const;

    TextEmbedding embed_prompt(const std::string& prompt, const TokenOverrides& overrides = {}) const;
    // Context for `prompt` with every occurrence of `token` taking the graph
    // value `row` (used to differentiate through the style token).
    ag::Var encode_prompt_graph(const std::string& prompt, const std::string& token, const ag::Var& row) const;
    // Input embedding of a single word (first token of its tokenization).
    Tensor word_embedding(const std::string& word) const;

    LatentGrid predict_noise(const LatentGrid& latent, int t, const TextEmbedding& text,
                             AttentionHooks* hooks = nullptr, const HookContext& ctx = {}) const;
    // Differentiable prediction. `overrides` replace named UNet parameters;
    // `offsets` add to named linear weights (see ParameterStore).
    ag::Var predict_noise_graph(const ag::Var& latent, int t, const ag::Var& context,
                                const ParamOverrides* overrides = nullptr, const ParamOverrides* offsets = nullptr,
                                AttentionHooks* hooks = nullptr, const HookContext& ctx = {}) const;

    std::vector<AttentionAddress> list_attention_addresses(const AddressFilter& filter = {}) const;
    // Resolves an address (dims ignored) to the inventory entry; throws UnknownAddressError.
    const AttentionAddress& resolve(const AttentionAddress& addr) const;
    const std::string& parameter_name(const AttentionAddress& addr) const { return unet_->parameter_name(addr); }

    // Weight in effect: replacement patch (or base) plus any additive offset.
    Tensor read_weight(const AttentionAddress& addr) const;
    void patch_weight(const AttentionAddress& addr, Tensor matrix);
    void unpatch_weight(const AttentionAddress& addr);
    // Additive offset currently applied at addr (zeros when none).
    Tensor read_offset(const AttentionAddress& addr) const;
    void set_offset(const AttentionAddress& addr, Tensor delta);
    void clear_offset(const AttentionAddress& addr);

    // Name-level access used by direct decoder training.
    const ParameterStore& unet_parameters() const { return parts_.unet_params; }
    const ParameterStore& text_parameters() const { return parts_.text_params; }
    const ParameterStore& vae_parameters() const { return parts_.vae_params; }
    void patch_parameter(const std::string& name, Tensor value);
    void unpatch_parameter(const std::string& name);
    void clear_patches();

private:
    Parts parts_;
    std::unique_ptr<UNet> unet_;
    Shape latent_shape_;

    void check_latent(const Tensor& t, const char* what) const;
};

}  // namespace sigstyle
