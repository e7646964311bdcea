#pragma once

#include <memory>
#include <optional>
#include <string>

#include "sigstyle/backbone/backbone.hpp"
#include "sigstyle/checkpoint.hpp"
#include "sigstyle/ddim.hpp"
#include "sigstyle/image.hpp"
#include "sigstyle/swapengine.hpp"

namespace sigstyle {

inline constexpr const char* kTransferTemplate = "{caption} in the style of *";
inline constexpr const char* kTextureTemplate = "{caption} in the appearance of *";

// Produces a text description of a content image (an external model).
class Captioner {
public:
    virtual ~Captioner() = default;
    virtual std::string caption(const Image& image) = 0;
};

// Fixed answer, for tests and offline runs.
class StubCaptioner final : public Captioner {
public:
    explicit StubCaptioner(std::string answer) : answer_(std::move(answer)) {}
    std::string caption(const Image&) override { return answer_; }

private:
    std::string answer_;
};

// POSTs {"image_png_base64": ...} as JSON to the endpoint and reads
// {"caption": ...} back. Plain http only.
class HttpCaptioner final : public Captioner {
public:
    explicit HttpCaptioner(std::string endpoint, int timeout_seconds = 30);
    std::string caption(const Image& image) override;

private:
    std::string host_;
    std::string path_;
    int timeout_;
};

enum class CaptionSource { user, captioner };

struct TransferConfig {
    SamplerConfig sampler;
    SwapPlan swap;
    double lambda = 1.0;
    std::string target_prompt_template = kTransferTemplate;
    // Used verbatim as the target prompt when set (bypasses the template).
    std::optional<std::string> target_prompt;
    CaptionSource caption_source = CaptionSource::user;
    std::string caption;
    SwapMode swap_mode = SwapMode::lockstep;
    TraceOptions trace;

    void validate() const;
};

// Caption for the content image: the user's text verbatim, or the client's
// answer. Throws CaptionerError when no usable caption can be produced.
std::string caption_content(const Image& image, const TransferConfig& cfg, Captioner* client);

// Replaces "{caption}" in the template.
std::string format_target_prompt(const std::string& tmpl, const std::string& caption);

// Binary region mask; white = transfer region.
struct Mask {
    Image grid;  // one channel, values in [0, 1]
    double threshold = 0.5;

    static Mask full(int height, int width, bool on);
    static Mask from_png(const std::filesystem::path& path, double threshold = 0.5);
    Image binary() const;
    // Area-average the binary mask onto the latent grid, then threshold at 0.5.
    Tensor latent(std::int64_t height, std::int64_t width) const;
};

struct TransferOutput {
    Image image;
    // Decoded content reconstruction from the same run.
    Image reconstruction;
    std::string content_prompt;
    std::string target_prompt;
    SwapResult swap;
};

TransferOutput global_transfer(Backbone& model, const Image& content, const StyleCheckpoint& style,
                               const TransferConfig& cfg, Captioner* client = nullptr);

// Per-step latent blend z = m * z_styled + (1 - m) * z_recon with a binary
// latent mask, applied after every denoising step.
TransferOutput local_transfer(Backbone& model, const Image& content, const StyleCheckpoint& style, const Mask& mask,
                              const TransferConfig& cfg, Captioner* client = nullptr);

// local_transfer with the appearance template; warns when the checkpoint
// was trained in style mode.
TransferOutput texture_transfer(Backbone& model, const Image& content, const StyleCheckpoint& appearance,
                                const Mask& mask, TransferConfig cfg, Captioner* client = nullptr);

struct GenerateConfig {
    SamplerConfig sampler;
    double lambda = 1.0;
    std::uint64_t seed = 0;
};

// Initial noise for generation from a seed.
Tensor seeded_noise(const Backbone& model, std::uint64_t seed);

// DDIM sampling from seeded noise with the style applied and "*" bound to
// the checkpoint's token. Throws PromptError when the prompt lacks "*".
Image style_guided_generate(Backbone& model, const std::string& prompt_with_star, const StyleCheckpoint& style,
                            const GenerateConfig& cfg, Trajectory* trajectory = nullptr);

}  // namespace sigstyle
