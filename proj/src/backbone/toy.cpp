#include "sigstyle/backbone/toy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <unordered_map>

#include "sigstyle/errors.hpp"
#include "sigstyle/hash.hpp"
#include "sigstyle/rng.hpp"

namespace sigstyle {

namespace {

constexpr std::int64_t kHashBuckets = 32;
constexpr double kEmbeddingStd = 0.5;

const std::unordered_map<std::string, std::int64_t>& vocab_index() {
    static const auto index = [] {
        std::unordered_map<std::string, std::int64_t> m;
        const auto& v = ToyTextEncoder::vocabulary();
        for (std::size_t i = 0; i < v.size(); ++i) m.emplace(v[i], static_cast<std::int64_t>(i));
        return m;
    }();
    return index;
}

}  // namespace

ToyTextEncoder::ToyTextEncoder(std::int64_t width) : width_(width) {
    if (width <= 0) throw ConfigError("toy text width must be positive");
}

const std::vector<std::string>& ToyTextEncoder::vocabulary() {
    static const std::vector<std::string> words{
        "<bos>",   "<eos>",  "*",        "a",       "an",       "the",       "photo",    "picture",  "image",
        "painting", "drawing", "sketch",  "of",      "in",       "on",        "at",       "with",     "and",
        "by",      "style",  "appearance", "art",   "artwork",  "texture",   "pattern",  "dog",      "cat",
        "horse",   "bird",   "person",   "man",     "woman",    "girl",      "boy",      "face",     "portrait",
        "house",   "building", "city",   "street",  "bridge",   "car",       "boat",     "tree",     "forest",
        "flower",  "garden", "river",    "lake",    "sea",      "mountain",  "sky",      "cloud",    "sun",
        "landscape", "red",  "blue",     "green",   "yellow",   "black",     "white",    "old",      "small",
        "large"};
    return words;
}

std::int64_t ToyTextEncoder::vocab_size() const {
    return static_cast<std::int64_t>(vocabulary().size()) + kHashBuckets;
}

std::string ToyTextEncoder::normalize_piece(std::string_view token) const {
    std::string out;
    for (char c : token) {
        if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

Tokenized ToyTextEncoder::tokenize(std::string_view prompt) const {
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) words.push_back(std::move(cur));
        cur.clear();
    };
    for (char ch : prompt) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isspace(u)) {
            flush();
        } else if (std::isalnum(u) || u >= 0x80 || ch == '\'' || ch == '-') {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else {
            flush();
            words.emplace_back(1, ch);
        }
    }
    flush();

    Tokenized out;
    const auto& index = vocab_index();
    const auto base = static_cast<std::int64_t>(vocabulary().size());
    out.ids.push_back(0);
    out.pieces.emplace_back("<bos>");
    for (auto& w : words) {
        auto it = index.find(w);
        const std::int64_t id =
            it != index.end() ? it->second : base + static_cast<std::int64_t>(fnv1a64(w) % kHashBuckets);
        out.ids.push_back(id);
        out.pieces.push_back(std::move(w));
    }
    out.ids.push_back(1);
    out.pieces.emplace_back("<eos>");
    return out;
}

ag::Var ToyTextEncoder::encode(const ParameterStore&, const ag::Var& rows) const {
    if (rows->value.rank() != 2 || rows->value.dim(1) != width_) {
        throw DimensionError("toy text encoder expects [L, " + std::to_string(width_) + "] rows");
    }
    return rows;
}

Tensor ToyAutoencoder::basis() {
    return Tensor::matrix({{0.5, 0.5, 0.5}, {0.5, -0.5, 0.5}, {0.5, 0.5, -0.5}, {0.5, -0.5, -0.5}});
}

Tensor ToyAutoencoder::encode(const ParameterStore&, const Image& image) const {
    if (image.channels() != 3 || image.width() != image_size_ || image.height() != image_size_) {
        throw DimensionError("toy autoencoder expects a " + std::to_string(image_size_) + "x" +
                             std::to_string(image_size_) + " RGB image");
    }
    const int s = image_size_ / 8;
    const Tensor a = basis();
    Tensor z({4, s, s});
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            double avg[3] = {0, 0, 0};
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int dy = 0; dy < 8; ++dy) {
                    for (int dx = 0; dx < 8; ++dx) acc += 2.0 * image.at(c, y * 8 + dy, x * 8 + dx) - 1.0;
                }
                avg[c] = acc / 64.0;
            }
            for (int l = 0; l < 4; ++l) {
                z[(static_cast<std::int64_t>(l) * s + y) * s + x] =
                    a.at(l, 0) * avg[0] + a.at(l, 1) * avg[1] + a.at(l, 2) * avg[2];
            }
        }
    }
    return z;
}

Image ToyAutoencoder::decode(const ParameterStore&, const Tensor& latent) const {
    const int s = image_size_ / 8;
    if (latent.shape() != Shape{4, s, s}) {
        throw DimensionError("toy autoencoder expects latent [4, " + std::to_string(s) + ", " + std::to_string(s) +
                             "], got " + shape_str(latent.shape()));
    }
    if (!latent.all_finite()) throw NumericError("latent contains non-finite values");
    const Tensor a = basis();
    Image small(3, s, s);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                double v = 0.0;
                for (int l = 0; l < 4; ++l) v += a.at(l, c) * latent[(static_cast<std::int64_t>(l) * s + y) * s + x];
                small.at(c, y, x) = v;
            }
        }
    }
    Image out = resize_bilinear(small, image_size_, image_size_);
    for (auto& v : out.pixels.values()) v = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
    return out;
}

UNetConfig toy_unet_config(const ToyConfig& cfg) {
    UNetConfig u;
    u.in_channels = 4;
    u.out_channels = 4;
    u.block_out_channels = cfg.block_out_channels;
    const auto n = cfg.block_out_channels.size();
    u.down_attention.assign(n, true);
    // Only the lowest-resolution up block carries attention.
    u.up_attention.assign(n, false);
    if (n > 0) u.up_attention[0] = true;
    u.layers_per_block = 1;
    u.mid_attention_layers = cfg.mid_attention_layers;
    u.attention_heads = cfg.attention_heads;
    u.cross_attention_dim = cfg.text_width;
    u.norm_num_groups = cfg.norm_groups;
    u.use_linear_projection = false;
    return u;
}

Backbone make_toy_backbone(const ToyConfig& cfg) {
    Backbone::Parts parts;
    parts.variant = BackboneVariant::toy;
    parts.model_id = "toy-unet/seed-" + std::to_string(cfg.seed);
    parts.schedule = NoiseSchedule::scaled_linear(1000);
    parts.unet_config = toy_unet_config(cfg);
    parts.latent_size = cfg.latent_size;

    UNet unet(parts.unet_config);
    unet.initialize(parts.unet_params, derive_seed(cfg.seed, 1), cfg.output_gain);
    if (cfg.zero_output) {
        for (const char* name : {"conv_out.weight", "conv_out.bias"}) {
            parts.unet_params.set_base(name, Tensor::zeros_like(parts.unet_params.base(name)));
        }
    }

    auto text = std::make_unique<ToyTextEncoder>(cfg.text_width);
    Rng rng(derive_seed(cfg.seed, 2));
    parts.text_params.set_base(text->table_name(),
                               rng.normal_tensor({text->vocab_size(), cfg.text_width}, kEmbeddingStd));
    parts.text_encoder = std::move(text);

    if (cfg.latent_size <= 0) throw ConfigError("toy latent size must be positive");
    parts.autoencoder = std::make_unique<ToyAutoencoder>(static_cast<int>(cfg.latent_size * 8));
    return Backbone(std::move(parts));
}

}  // namespace sigstyle
