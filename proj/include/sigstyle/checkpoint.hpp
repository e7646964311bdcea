#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sigstyle/backbone/backbone.hpp"
#include "sigstyle/hypernet.hpp"

namespace sigstyle {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kStyleTemplate = "a photo in the style of *";
inline constexpr const char* kAppearanceTemplate = "a photo in the appearance of *";

enum class StyleMode { style, appearance };
const char* to_string(StyleMode m);
StyleMode parse_style_mode(const std::string& s);

// A learned style: token embedding for "*", offset predictor and provenance.
// Arrays are persisted as little-endian f32; checkpoints produced by
// finetune already hold f32-representable values so save/load is exact.
struct StyleCheckpoint {
    int version = kCheckpointVersion;
    Tensor token_embedding;
    OffsetPredictor predictor;
    std::string base_model_id;
    double train_lambda = 1.0;
    std::int64_t steps_trained = 0;
    std::vector<std::string> style_image_hashes;
    std::string created_at;
    StyleMode mode = StyleMode::style;
    std::string prompt_template = kStyleTemplate;
    // Extra training provenance (informational).
    double learning_rate = 0.0;
    std::uint64_t seed = 0;
    std::string init_word;
    // Directly trained decoder parameters, stored as deltas from base.
    std::map<std::string, Tensor> direct_deltas;

    std::vector<AttentionAddress> targets() const { return predictor.targets(); }
};

// .sigstyle container: "SIGSTYLE" magic, u64 LE header length, JSON header,
// then the concatenated f32 arrays indexed by byte offset.
void save_checkpoint(const std::filesystem::path& path, const StyleCheckpoint& ckpt);
// Throws ParseError on corrupt input, IncompatibleCheckpointError on a
// version mismatch; when `model` is given also checks compatibility.
StyleCheckpoint load_checkpoint(const std::filesystem::path& path, const Backbone* model = nullptr);

// Embedding width (DimensionError), target addresses and shapes
// (UnknownAddressError / DimensionError), decoder-only targets (ConfigError).
// A base model id mismatch is logged as a warning.
void check_compatible(const StyleCheckpoint& ckpt, const Backbone& model);

// Identity style for `model`: fresh predictor (zero offsets) and the given token.
StyleCheckpoint identity_checkpoint(const Backbone& model, Tensor token, std::uint64_t seed = 0);

// Rounds every stored array to float precision.
void round_to_f32(StyleCheckpoint& ckpt);

// Applies offsets at strength lambda and any direct decoder deltas; the
// scope restores base weights when released.
PatchScope apply_checkpoint(Backbone& model, const StyleCheckpoint& ckpt, double lambda);

// UTC ISO-8601 timestamp, second resolution.
std::string utc_timestamp();

}  // namespace sigstyle
