#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sigstyle/backbone/backbone.hpp"
#include "sigstyle/checkpoint.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/hypernet.hpp"
#include "sigstyle/image.hpp"

namespace sigstyle {

inline constexpr const char* kStyleToken = "*";
inline constexpr const char* kDefaultInitWord = "art";

struct AugmentConfig {
    bool random_crop = true;
    bool horizontal_flip = true;
    // Smallest retained fraction of each side when cropping.
    double min_crop_fraction = 0.8;
};

struct TrainConfig {
    double learning_rate = 1e-6;
    std::int64_t steps = 1500;
    int batch_size = 1;
    double lambda = 1.0;
    AugmentConfig augment;
    std::uint64_t seed = 0;
    std::string prompt_template = kStyleTemplate;
    std::string init_word = kDefaultInitWord;
    // Alternate reading of the trainable set: also step decoder parameters
    // directly (stored in the checkpoint as deltas).
    bool train_decoder_direct = false;
    // Empty means the default decoder q/k/v targets.
    std::vector<AttentionAddress> targets;

    void validate() const;
    StyleMode mode() const;
};

// Neutral-word embedding plus small seeded noise (5% of the word's RMS).
Tensor init_style_token(const Backbone& model, std::uint64_t seed, const std::string& init_word = kDefaultInitWord);

struct AugmentDraw {
    int x = 0, y = 0, width = 0, height = 0;
    bool flip = false;
};

// Crop window and flip decision for a source of the given size.
AugmentDraw draw_augment(int width, int height, const AugmentConfig& cfg, std::uint64_t seed);
Image apply_augment(const Image& image, const AugmentDraw& draw, int out_size);
// Crop (>= min_crop_fraction of each side), resize to out_size, flip with p = 0.5.
// Throws SizeError when the retained crop would be smaller than out_size.
Image augment(const Image& image, const AugmentConfig& cfg, std::uint64_t seed, int out_size);

// Everything that is optimized, in double precision.
struct TrainState {
    OffsetPredictor predictor;
    Tensor token;
    std::map<std::string, Tensor> direct;
};

// Graph leaves mirroring a TrainState.
struct TrainVars {
    std::vector<std::array<ag::Var, kGroupFields>> groups;
    ag::Var token;
    std::map<std::string, ag::Var> direct;

    static TrainVars leaves(const TrainState& s);
    static TrainVars constants(const TrainState& s);
};

// x_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) noise
Tensor noised_latent(const Backbone& model, const Tensor& z0, int t, const Tensor& noise);

// Noise-prediction objective as a graph: mean((eps - eps_theta(x_t, t, tau(P_s)))^2)
// with offsets lambda * dW on the predictor targets and the style token in
// the prompt. Also returns the prediction through `prediction` when given.
ag::Var inversion_loss(const Backbone& model, const TrainState& state, const TrainVars& vars, const Tensor& z0, int t,
                       const Tensor& noise, const TrainConfig& cfg, ag::Var* prediction = nullptr);

// Adam without weight decay.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
    void step(const std::string& key, Tensor& param, const Tensor& grad);
    void next() { ++t_; }

private:
    double lr_, b1_, b2_, eps_;
    std::int64_t t_ = 1;
    std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

// One optimizer step on a single (latent, t, noise) sample; the backbone is
// only read. Throws NumericError (naming `step_index`) on a non-finite loss.
double train_step(const Backbone& model, TrainState& state, Adam& opt, const Tensor& z0, int t, const Tensor& noise,
                  const TrainConfig& cfg, std::int64_t step_index = 0);

struct FinetuneReport {
    std::vector<double> losses;
    Tensor initial_token;
};

using ProgressFn = std::function<void(std::int64_t step, double loss)>;

// Raised when training hits a non-finite loss; carries the last finite state.
class TrainingAborted : public NumericError {
public:
    TrainingAborted(const std::string& what, StyleCheckpoint last_good)
        : NumericError(what), last_good(std::move(last_good)) {}
    StyleCheckpoint last_good;
};

TrainState initial_state(const Backbone& model, const TrainConfig& cfg);

// Fine-tunes a style from one or more images (round-robin). Deterministic
// under cfg.seed; the returned checkpoint holds f32-rounded values.
StyleCheckpoint finetune(const Backbone& model, const std::vector<Image>& style_images, const TrainConfig& cfg,
                         FinetuneReport* report = nullptr, const ProgressFn& progress = {});

StyleCheckpoint make_checkpoint(const Backbone& model, const TrainState& state, const TrainConfig& cfg,
                                std::int64_t steps, std::vector<std::string> image_hashes);

}  // namespace sigstyle
