#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "sigstyle/apps.hpp"
#include "sigstyle/backbone/backbone.hpp"
#include "sigstyle/checkpoint.hpp"
#include "sigstyle/image.hpp"

namespace sigstyle {

// Published full-size-model values, reported next to ours for context only.
inline constexpr double kPublishedStyleLoss = 0.7641;
inline constexpr double kPublishedLpips = 0.5191;

inline constexpr std::uint64_t kToyExtractorSeed = 0x5eed'f00d;

struct FeatureLayer {
    std::string name;
    int channels = 0;
};

// Convolutional feature stack: 3x3 convolutions (padding 1) with ReLU, 2x2
// max pools where requested, feature taps after selected ReLUs. Input pixels
// in [0, 1] are normalized per channel as (x - shift) / scale.
class ConvFeatureExtractor {
public:
    struct Conv {
        Tensor weight;  // [out, in, 3, 3]
        Tensor bias;    // [out]
        bool pool_before = false;
        std::string tap;  // empty: not a feature layer
    };

    ConvFeatureExtractor(std::string name, std::vector<Conv> convs, std::array<double, 3> shift,
                         std::array<double, 3> scale);

    // Fixed-seed random stack: 3->8 (relu1), pool, 8->16 (relu2), pool,
    // 16->32 (relu3). He-normal weights, zero biases, input mapped to [-1, 1].
    static ConvFeatureExtractor toy(std::uint64_t seed = kToyExtractorSeed);
    // torchvision VGG16 ("features.N.weight"/"features.N.bias") tapped at
    // relu1_2, relu2_2, relu3_3, relu4_3, relu5_3. Throws CapabilityError
    // when the file is missing.
    static ConvFeatureExtractor vgg16(const std::filesystem::path& weights,
                                      std::array<double, 3> shift = {0.485, 0.456, 0.406},
                                      std::array<double, 3> scale = {0.229, 0.224, 0.225});

    const std::string& name() const { return name_; }
    std::vector<FeatureLayer> layers() const;
    const std::vector<Conv>& convs() const { return convs_; }
    // One [C, H, W] tensor per tap, in forward order. Deterministic.
    std::vector<Tensor> features(const Image& image) const;

private:
    std::string name_;
    std::vector<Conv> convs_;
    std::array<double, 3> shift_;
    std::array<double, 3> scale_;
};

// G = F F^T / (C N) for features [C, N] (or [C, H, W], flattened).
Tensor gram(const Tensor& features);
std::vector<Tensor> gram_matrices(const Image& image, const ConvFeatureExtractor& extractor);

// Sum over feature layers of the mean squared Gram difference.
double style_loss(const Image& a, const Image& b, const ConvFeatureExtractor& extractor);

// LPIPS-style distance: per-pixel unit-normalized features, channel-weighted
// squared differences, spatial mean, summed over layers.
struct PerceptualModel {
    ConvFeatureExtractor extractor;
    std::vector<Tensor> channel_weights;  // per layer, [C], non-negative

    // Toy extractor with unit channel weights.
    static PerceptualModel toy(std::uint64_t seed = kToyExtractorSeed);
    // dir/vgg16.safetensors plus dir/lpips_vgg.safetensors
    // ("lin{i}.model.1.weight"). Throws CapabilityError when missing.
    static PerceptualModel load(const std::filesystem::path& dir);
};

double perceptual_distance(const Image& a, const Image& b, const PerceptualModel& model);

// Loads the metric models named by `which` ("toy" or a weights directory).
struct MetricModels {
    ConvFeatureExtractor style;
    PerceptualModel perceptual;

    static MetricModels make(const std::string& which);
};

struct EvalContent {
    std::string id;
    Image image;
    std::string caption;
};

struct EvalStyle {
    std::string id;
    StyleCheckpoint checkpoint;
    Image image;  // reference style image for the style loss
};

// Every *.png in `dir`, sorted by name. The caption comes from a sibling
// <stem>.txt when present, else from the stem with '_' read as spaces.
std::vector<EvalContent> load_eval_contents(const std::filesystem::path& dir);
// Every *.sigstyle in `dir` with its reference image <stem>.png.
std::vector<EvalStyle> load_eval_styles(const std::filesystem::path& dir, const Backbone* model = nullptr);

struct MetricsRow {
    std::string content_id;
    std::string style_id;
    double style_loss = 0.0;
    double lpips = 0.0;
    // Content image against its own reconstruction from the same run.
    double reconstruction_lpips = 0.0;
    std::string error;  // non-empty: the pair failed and carries no metrics

    bool ok() const { return error.empty(); }
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    double mean_style_loss = 0.0;
    double mean_lpips = 0.0;
    double mean_reconstruction_lpips = 0.0;
    std::size_t failures = 0;
    std::string config_fingerprint;
    std::string protocol_json;  // resolved protocol settings
};

struct EvalConfig {
    TransferConfig transfer;
    // When set, rows.jsonl, report.csv and summary.json are written here.
    std::filesystem::path out_dir;
    // Skip pairs already recorded in out_dir/rows.jsonl under the same
    // fingerprint. Failed pairs are retried.
    bool resume = true;
};

// Global transfer for every (content, style) pair, in content-major order.
// Per-pair failures are recorded in the row and the run continues.
MetricsReport evaluate_suite(Backbone& model, const std::vector<EvalContent>& contents,
                             const std::vector<EvalStyle>& styles, const MetricModels& metrics, const EvalConfig& cfg);
MetricsReport evaluate_suite(Backbone& model, const std::filesystem::path& contents_dir,
                             const std::vector<EvalStyle>& styles, const MetricModels& metrics, const EvalConfig& cfg);

void write_report(const MetricsReport& report, const std::filesystem::path& out_dir);
std::string report_csv(const MetricsReport& report);
std::string report_summary_json(const MetricsReport& report);

}  // namespace sigstyle
