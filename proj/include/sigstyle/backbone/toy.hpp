#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sigstyle/backbone/backbone.hpp"

namespace sigstyle {

// Deterministic miniature backbone for tests and CPU experiments.
//
// Architecture (defaults):
//   latent 4 x 16 x 16, image 128 x 128 (8x box-average autoencoder)
//   UNet levels {16, 32} channels, one resnet per down level, two per up level
//   encoder: 2 transformer blocks (one per down level)
//   middle:  2 transformer blocks
//   decoder: 2 transformer blocks (both in the 8 x 8 up level)
//   every transformer block holds one self- and one cross-attention layer
//   text: word-level tokenizer, 32-wide embeddings, encoder is the identity
struct ToyConfig {
    std::uint64_t seed = 1234;
    std::int64_t latent_size = 16;
    std::vector<std::int64_t> block_out_channels{16, 32};
    std::vector<int> attention_heads{2, 2};
    std::int64_t text_width = 32;
    int norm_groups = 4;
    int mid_attention_layers = 2;
    double output_gain = 0.5;
    // Zero the output head so the UNet predicts exactly zero noise.
    bool zero_output = false;
};

// Lower-case word tokenizer over a fixed vocabulary with hashed buckets for
// unknown words. Sequences are <bos> words... <eos>; '*' is its own token.
class ToyTextEncoder final : public TextEncoder {
public:
    explicit ToyTextEncoder(std::int64_t width);

    Tokenized tokenize(std::string_view prompt) const override;
    std::string normalize_piece(std::string_view token) const override;
    std::int64_t embedding_width() const override { return width_; }
    std::int64_t context_width() const override { return width_; }
    std::string table_name() const override { return "token_embedding.weight"; }
    ag::Var encode(const ParameterStore& store, const ag::Var& rows) const override;

    std::int64_t vocab_size() const;
    static const std::vector<std::string>& vocabulary();

private:
    std::int64_t width_;
};

// Linear 8x8 box-average autoencoder. Pixels are mapped to [-1, 1], averaged
// over each 8x8 cell and projected onto 3 orthonormal columns of a 4x3
// matrix; decoding applies the transpose and bilinear upsampling.
class ToyAutoencoder final : public Autoencoder {
public:
    explicit ToyAutoencoder(int image_size) : image_size_(image_size) {}

    int image_size() const override { return image_size_; }
    std::int64_t latent_channels() const override { return 4; }
    int downscale() const override { return 8; }
    Tensor encode(const ParameterStore& store, const Image& image) const override;
    Image decode(const ParameterStore& store, const Tensor& latent) const override;

    // Latent basis, [4, 3].
    static Tensor basis();

private:
    int image_size_;
};

UNetConfig toy_unet_config(const ToyConfig& cfg);
Backbone make_toy_backbone(const ToyConfig& cfg = {});

}  // namespace sigstyle
