#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sigstyle/backbone/backbone.hpp"

namespace sigstyle {

// Byte-level BPE tokenizer in the CLIP format (vocab.json + merges.txt).
// Text is whitespace-collapsed and lower-cased; non-ASCII bytes count as
// letters when splitting words. Sequences are <bos> tokens <eos>, truncated
// and then padded to max_length.
class ClipTokenizer {
public:
    ClipTokenizer(std::map<std::string, std::int64_t> vocab, std::vector<std::pair<std::string, std::string>> merges,
                  int max_length = 77, std::string pad_token = "<|endoftext|>");
    // Reads vocab.json, merges.txt and (if present) tokenizer_config.json.
    static ClipTokenizer load(const std::filesystem::path& dir);

    Tokenized tokenize(std::string_view text) const;
    // Word-level split before BPE.
    std::vector<std::string> pretokenize(std::string_view text) const;
    // BPE symbols of one word, "</w>" on the last.
    std::vector<std::string> bpe(const std::string& word) const;
    // Text of a vocabulary token without the end-of-word marker.
    std::string piece_text(const std::string& token) const;

    int max_length() const { return max_length_; }
    std::int64_t vocab_size() const { return static_cast<std::int64_t>(vocab_.size()); }
    std::int64_t id_of(const std::string& token) const;

private:
    std::map<std::string, std::int64_t> vocab_;
    std::map<std::int64_t, std::string> inverse_;
    std::map<std::pair<std::string, std::string>, int> ranks_;
    int max_length_;
    std::int64_t bos_, eos_, pad_;
};

struct ClipTextConfig {
    std::int64_t hidden_size = 768;
    int num_hidden_layers = 12;
    int num_attention_heads = 12;
    std::int64_t intermediate_size = 3072;
    std::int64_t max_position_embeddings = 77;
    std::string hidden_act = "quick_gelu";
    double layer_norm_eps = 1e-5;
};

// CLIP text transformer (causal, pre-norm) over transformers parameter names
// with the "text_model." prefix removed. The context is the final
// layer-normed hidden state.
class ClipTextEncoder final : public TextEncoder {
public:
    ClipTextEncoder(ClipTokenizer tokenizer, ClipTextConfig config);

    Tokenized tokenize(std::string_view prompt) const override { return tokenizer_.tokenize(prompt); }
    std::string normalize_piece(std::string_view token) const override;
    std::int64_t embedding_width() const override { return config_.hidden_size; }
    std::int64_t context_width() const override { return config_.hidden_size; }
    std::string table_name() const override { return "embeddings.token_embedding.weight"; }
    ag::Var encode(const ParameterStore& store, const ag::Var& rows) const override;

    // Names and shapes of every parameter the configuration expects.
    std::map<std::string, Shape> parameter_shapes() const;
    const ClipTokenizer& tokenizer() const { return tokenizer_; }

private:
    ClipTokenizer tokenizer_;
    ClipTextConfig config_;
};

struct KlAutoencoderConfig {
    std::vector<std::int64_t> block_out_channels{128, 256, 512, 512};
    int layers_per_block = 2;
    std::int64_t latent_channels = 4;
    int norm_num_groups = 32;
    double scaling_factor = 0.18215;
    int sample_size = 512;
    bool use_quant_conv = true;
    bool use_post_quant_conv = true;
    bool mid_block_add_attention = true;
};

// AutoencoderKL (diffusers names). encode returns the posterior mean times
// the scaling factor; decode divides by it and maps [-1, 1] to [0, 1].
class KlAutoencoder final : public Autoencoder {
public:
    explicit KlAutoencoder(KlAutoencoderConfig config);

    int image_size() const override { return config_.sample_size; }
    std::int64_t latent_channels() const override { return config_.latent_channels; }
    int downscale() const override;
    Tensor encode(const ParameterStore& store, const Image& image) const override;
    Image decode(const ParameterStore& store, const Tensor& latent) const override;

    std::map<std::string, Shape> parameter_shapes() const;

private:
    KlAutoencoderConfig config_;
};

// Directory holding a diffusers text-to-image pipeline: unet/, vae/,
// text_encoder/, tokenizer/, scheduler/ (weights as .safetensors).
// Throws CapabilityError when the directory or a component is missing and
// ConfigError for architectures outside the supported set.
Backbone load_diffusers_backbone(const std::filesystem::path& dir);

// The SIGSTYLE_BACKBONE_DIR environment variable, when set and non-empty.
std::optional<std::filesystem::path> backbone_dir_from_env();

// "toy" builds the default toy backbone; anything else is a diffusers dir.
Backbone load_backbone(const std::string& spec);

}  // namespace sigstyle
