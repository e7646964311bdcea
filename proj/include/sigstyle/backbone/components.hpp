#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "sigstyle/autograd.hpp"
#include "sigstyle/backbone/parameters.hpp"
#include "sigstyle/image.hpp"

namespace sigstyle {

struct Tokenized {
    std::vector<std::int64_t> ids;
    // Normalized text of each position, used to locate override tokens.
    std::vector<std::string> pieces;
};

// Maps prompts to token embedding rows and contextualizes them for
// cross-attention. Token rows come from `table_name()` in the encoder's own
// parameter store.
class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual Tokenized tokenize(std::string_view prompt) const = 0;
    virtual std::string normalize_piece(std::string_view token) const = 0;
    virtual std::int64_t embedding_width() const = 0;
    virtual std::int64_t context_width() const = 0;
    virtual std::string table_name() const = 0;
    // rows [L, embedding_width] -> context [L, context_width]
    virtual ag::Var encode(const ParameterStore& store, const ag::Var& rows) const = 0;
};

// Image <-> latent autoencoder. encode returns the posterior mode.
class Autoencoder {
public:
    virtual ~Autoencoder() = default;
    virtual int image_size() const = 0;
    virtual std::int64_t latent_channels() const = 0;
    virtual int downscale() const = 0;
    virtual Tensor encode(const ParameterStore& store, const Image& image) const = 0;
    virtual Image decode(const ParameterStore& store, const Tensor& latent) const = 0;
};

}  // namespace sigstyle
