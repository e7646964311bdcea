#include "sigstyle/backbone/backbone.hpp"

#include <algorithm>

#include "sigstyle/errors.hpp"

namespace sigstyle {

Backbone::Backbone(Parts parts) : parts_(std::move(parts)) {
    if (!parts_.text_encoder || !parts_.autoencoder) throw ConfigError("backbone is missing a component");
    unet_ = std::make_unique<UNet>(parts_.unet_config);
    for (const auto& [name, shape] : unet_->parameter_shapes()) {
        if (!parts_.unet_params.contains(name)) throw ConfigError("UNet weights lack '" + name + "'");
        if (parts_.unet_params.base(name).shape() != shape) {
            throw DimensionError("UNet weight '" + name + "' has shape " +
                                 shape_str(parts_.unet_params.base(name).shape()) + ", expected " + shape_str(shape));
        }
    }
    if (parts_.text_encoder->context_width() != parts_.unet_config.cross_attention_dim) {
        throw ConfigError("text encoder width does not match UNet cross-attention width");
    }
    latent_shape_ = {parts_.unet_config.in_channels, parts_.latent_size, parts_.latent_size};
    if (parts_.autoencoder->latent_channels() != parts_.unet_config.in_channels ||
        parts_.autoencoder->image_size() / parts_.autoencoder->downscale() != parts_.latent_size) {
        throw ConfigError("autoencoder latent layout does not match the UNet");
    }
}

void Backbone::check_latent(const Tensor& t, const char* what) const {
    if (t.shape() != latent_shape_) {
        throw DimensionError(std::string(what) + ": latent shape " + shape_str(t.shape()) + ", expected " +
                             shape_str(latent_shape_));
    }
    if (!t.all_finite()) throw NumericError(std::string(what) + ": latent contains non-finite values");
}

LatentGrid Backbone::encode_image(const Image& image) const {
    const int s = image_size();
    if (image.width() != s || image.height() != s || image.channels() != 3) {
        throw DimensionError("encode_image: expected " + std::to_string(s) + "x" + std::to_string(s) +
                             " RGB image, got " + shape_str(image.pixels.shape()));
    }
    return {parts_.autoencoder->encode(parts_.vae_params, image), std::nullopt};
}

Image Backbone::decode_latent(const LatentGrid& latent) const {
    check_latent(latent.data, "decode_latent");
    return parts_.autoencoder->decode(parts_.vae_params, latent.data);
}

TextEmbedding Backbone::embed_prompt(const std::string& prompt, const TokenOverrides& overrides) const {
    const auto& enc = *parts_.text_encoder;
    Tokenized tok = enc.tokenize(prompt);
    ag::Var rows = ag::gather_rows(parts_.text_params.var(enc.table_name()), tok.ids);
    Tensor token_rows = rows->value;
    const auto width = enc.embedding_width();
    for (const auto& [token, vec] : overrides) {
        if (vec.numel() != width) {
            throw DimensionError("override for '" + token + "' has width " + std::to_string(vec.numel()) +
                                 ", backbone embedding width is " + std::to_string(width));
        }
        const std::string key = enc.normalize_piece(token);
        bool found = false;
        for (std::size_t i = 0; i < tok.pieces.size(); ++i) {
            if (tok.pieces[i] != key) continue;
            found = true;
            std::copy(vec.data(), vec.data() + width, token_rows.data() + static_cast<std::int64_t>(i) * width);
        }
        if (!found) throw UnknownTokenError("override token '" + token + "' does not occur in prompt \"" + prompt + "\"");
    }
    TextEmbedding out;
    out.pieces = std::move(tok.pieces);
    out.context = enc.encode(parts_.text_params, ag::constant(token_rows))->value;
    out.token_rows = std::move(token_rows);
    return out;
}

ag::Var Backbone::encode_prompt_graph(const std::string& prompt, const std::string& token, const ag::Var& row) const {
    const auto& enc = *parts_.text_encoder;
    if (row->value.numel() != enc.embedding_width()) {
        throw DimensionError("token embedding width " + std::to_string(row->value.numel()) + " vs backbone " +
                             std::to_string(enc.embedding_width()));
    }
    Tokenized tok = enc.tokenize(prompt);
    const std::string key = enc.normalize_piece(token);
    const auto& table = parts_.text_params.var(enc.table_name());
    std::vector<ag::Var> parts;
    bool found = false;
    for (std::size_t i = 0; i < tok.ids.size(); ++i) {
        if (tok.pieces[i] == key) {
            parts.push_back(ag::reshape(row, {1, enc.embedding_width()}));
            found = true;
        } else {
            parts.push_back(ag::gather_rows(table, {tok.ids[i]}));
        }
    }
    if (!found) throw UnknownTokenError("token '" + token + "' does not occur in prompt \"" + prompt + "\"");
    return enc.encode(parts_.text_params, ag::concat_rows(parts));
}

Tensor Backbone::word_embedding(const std::string& word) const {
    const auto& enc = *parts_.text_encoder;
    Tokenized tok = enc.tokenize(word);
    // Skip start/end markers: pick the first piece matching the normalized word.
    const std::string key = enc.normalize_piece(word);
    std::int64_t id = -1;
    for (std::size_t i = 0; i < tok.pieces.size(); ++i) {
        if (tok.pieces[i] == key) {
            id = tok.ids[i];
            break;
        }
    }
    if (id < 0) throw UnknownTokenError("word '" + word + "' is not a single token");
    return ag::gather_rows(parts_.text_params.var(enc.table_name()), {id})->value.reshaped({enc.embedding_width()});
}

LatentGrid Backbone::predict_noise(const LatentGrid& latent, int t, const TextEmbedding& text, AttentionHooks* hooks,
                                   const HookContext& ctx) const {
    parts_.schedule.check_timestep(t);
    check_latent(latent.data, "predict_noise");
    auto out =
        predict_noise_graph(ag::constant(latent.data), t, ag::constant(text.context), nullptr, nullptr, hooks, ctx);
    return {std::move(out->value), t};
}

ag::Var Backbone::predict_noise_graph(const ag::Var& latent, int t, const ag::Var& context,
                                      const ParamOverrides* overrides, const ParamOverrides* offsets,
                                      AttentionHooks* hooks, const HookContext& ctx) const {
    parts_.schedule.check_timestep(t);
    if (latent->value.shape() != latent_shape_) {
        throw DimensionError("predict_noise: latent shape " + shape_str(latent->value.shape()) + ", expected " +
                             shape_str(latent_shape_));
    }
    UNetForwardOptions opts;
    opts.overrides = overrides;
    opts.offsets = offsets;
    opts.hooks = hooks;
    opts.hook_context = ctx;
    return unet_->forward(parts_.unet_params, latent, t, context, opts);
}

std::vector<AttentionAddress> Backbone::list_attention_addresses(const AddressFilter& filter) const {
    std::vector<AttentionAddress> out;
    for (const auto& a : unet_->inventory()) {
        if (filter.matches(a)) out.push_back(a);
    }
    return out;
}

const AttentionAddress& Backbone::resolve(const AttentionAddress& addr) const {
    for (const auto& a : unet_->inventory()) {
        if (a == addr) return a;
    }
    throw UnknownAddressError("backbone has no attention projection " + addr.str());
}

Tensor Backbone::read_weight(const AttentionAddress& addr) const {
    return parts_.unet_params.materialized(parameter_name(resolve(addr)));
}

Tensor Backbone::read_offset(const AttentionAddress& addr) const {
    const auto& name = parameter_name(resolve(addr));
    const Tensor* d = parts_.unet_params.offset(name);
    return d ? *d : Tensor::zeros_like(parts_.unet_params.base(name));
}

void Backbone::set_offset(const AttentionAddress& addr, Tensor delta) {
    const auto& a = resolve(addr);
    if (delta.shape() != Shape{a.dim_r, a.dim_c}) {
        throw DimensionError("offset for " + a.str() + " has shape " + shape_str(delta.shape()) + ", expected [" +
                             std::to_string(a.dim_r) + ", " + std::to_string(a.dim_c) + "]");
    }
    parts_.unet_params.set_offset(parameter_name(a), std::move(delta));
}

void Backbone::clear_offset(const AttentionAddress& addr) {
    parts_.unet_params.clear_offset(parameter_name(resolve(addr)));
}

void Backbone::patch_weight(const AttentionAddress& addr, Tensor matrix) {
    const auto& a = resolve(addr);
    if (matrix.shape() != Shape{a.dim_r, a.dim_c}) {
        throw DimensionError("patch for " + a.str() + " has shape " + shape_str(matrix.shape()) + ", expected [" +
                             std::to_string(a.dim_r) + ", " + std::to_string(a.dim_c) + "]");
    }
    parts_.unet_params.patch(parameter_name(a), std::move(matrix));
}

void Backbone::unpatch_weight(const AttentionAddress& addr) { parts_.unet_params.unpatch(parameter_name(resolve(addr))); }

void Backbone::patch_parameter(const std::string& name, Tensor value) { parts_.unet_params.patch(name, std::move(value)); }

void Backbone::unpatch_parameter(const std::string& name) { parts_.unet_params.unpatch(name); }

void Backbone::clear_patches() { parts_.unet_params.clear_patches(); }

}  // namespace sigstyle
