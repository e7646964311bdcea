#include "sigstyle/apps.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <regex>

#include "httplib.h"
#include "json.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/hypernet.hpp"
#include "sigstyle/log.hpp"
#include "sigstyle/rng.hpp"
#include "sigstyle/styletune.hpp"

namespace sigstyle {

namespace {

constexpr const char* kCaptionPlaceholder = "{caption}";
constexpr const char* kFallbackHint = "; pass the caption yourself (--caption) instead";

std::size_t count_of(const std::string& s, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + needle.size())) ++n;
    return n;
}

std::string base64(const std::vector<std::uint8_t>& bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

Image fit_to_model(const Backbone& model, const Image& image) {
    const int size = model.image_size();
    if (image.width() == size && image.height() == size) return image;
    log().info("resizing content image {}x{} to {}x{}", image.width(), image.height(), size, size);
    return resize_bilinear(image, size, size);
}

TransferOutput run_transfer(Backbone& model, const Image& content, const StyleCheckpoint& style, const Mask* mask,
                            const TransferConfig& cfg, Captioner* client) {
    cfg.validate();
    check_compatible(style, model);
    if (mask && (mask->grid.width() != content.width() || mask->grid.height() != content.height())) {
        throw DimensionError("mask is " + std::to_string(mask->grid.width()) + "x" + std::to_string(mask->grid.height()) +
                             ", content image is " + std::to_string(content.width()) + "x" +
                             std::to_string(content.height()));
    }
    TransferOutput out;
    out.content_prompt = caption_content(content, cfg, client);
    out.target_prompt = cfg.target_prompt ? *cfg.target_prompt : format_target_prompt(cfg.target_prompt_template, out.content_prompt);

    const TextEmbedding content_text = model.embed_prompt(out.content_prompt);
    TokenOverrides token;
    if (out.target_prompt.find(kStyleToken) != std::string::npos) token[kStyleToken] = style.token_embedding;
    const TextEmbedding target_text = model.embed_prompt(out.target_prompt, token);

    const Tensor z0 = model.encode_image(fit_to_model(model, content)).data;
    // Inversion and reconstruction share one guidance scale.
    const Tensor zT = ddim_invert(model, z0, content_text, cfg.sampler).final_latent();

    BranchBlend blend;
    if (mask) {
        const auto& shape = model.latent_shape();
        const Tensor m = mask->latent(shape[1], shape[2]);
        const auto plane = shape[1] * shape[2];
        blend = [m, plane](int, Tensor& z, const Tensor& rec) {
            for (std::int64_t i = 0; i < z.numel(); ++i) {
                if (m[i % plane] == 0.0) z[i] = rec[i];
            }
        };
    }
    out.swap = run_attention_swap(model, zT, content_text, target_text, &style, cfg.lambda, cfg.swap, cfg.sampler,
                                  cfg.swap_mode, blend, cfg.trace);
    out.image = model.decode_latent({out.swap.stylized.final_latent(), 0});
    out.reconstruction = model.decode_latent({out.swap.reconstruction.final_latent(), 0});
    return out;
}

}  // namespace

HttpCaptioner::HttpCaptioner(std::string endpoint, int timeout_seconds) : timeout_(timeout_seconds) {
    static const std::regex re(R"(^http://([^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(endpoint, m, re)) {
        throw ConfigError("captioner endpoint must look like http://host[:port]/path, got '" + endpoint + "'");
    }
    host_ = "http://" + m[1].str();
    path_ = m[2].matched ? m[2].str() : "/caption";
}

std::string HttpCaptioner::caption(const Image& image) {
    httplib::Client cli(host_);
    cli.set_connection_timeout(timeout_);
    cli.set_read_timeout(timeout_);
    const nlohmann::json body = {{"image_png_base64", base64(encode_png(image))}};
    auto res = cli.Post(path_, body.dump(), "application/json");
    if (!res) {
        throw CaptionerError("captioner at " + host_ + path_ + " unreachable (" + httplib::to_string(res.error()) + ")" +
                             kFallbackHint);
    }
    if (res->status != 200) {
        throw CaptionerError("captioner returned HTTP " + std::to_string(res->status) + kFallbackHint);
    }
    try {
        return nlohmann::json::parse(res->body).at("caption").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw CaptionerError(std::string("captioner reply is not {\"caption\": ...}: ") + e.what() + kFallbackHint);
    }
}

void TransferConfig::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
    if (count_of(target_prompt_template, kStyleToken) != 1) {
        throw ConfigError("target prompt template must contain '*' exactly once");
    }
    if (count_of(target_prompt_template, kCaptionPlaceholder) > 1) {
        throw ConfigError("target prompt template may contain {caption} at most once");
    }
    swap.validate(sampler.num_steps);
}

std::string caption_content(const Image& image, const TransferConfig& cfg, Captioner* client) {
    if (cfg.caption_source == CaptionSource::user) {
        if (trim(cfg.caption).empty()) throw CaptionerError("no caption given for the content image");
        return cfg.caption;
    }
    if (!client) throw CaptionerError(std::string("no captioner configured") + kFallbackHint);
    std::string text = trim(client->caption(image));
    if (text.empty()) throw CaptionerError(std::string("captioner returned an empty caption") + kFallbackHint);
    return text;
}

std::string format_target_prompt(const std::string& tmpl, const std::string& caption) {
    std::string out = tmpl;
    const std::string key = kCaptionPlaceholder;
    if (auto pos = out.find(key); pos != std::string::npos) out.replace(pos, key.size(), caption);
    return out;
}

Mask Mask::full(int height, int width, bool on) { return {Image(1, height, width, on ? 1.0 : 0.0), 0.5}; }

Mask Mask::from_png(const std::filesystem::path& path, double threshold) { return {read_png(path, true), threshold}; }

Image Mask::binary() const {
    Image out(1, grid.height(), grid.width());
    for (int y = 0; y < grid.height(); ++y) {
        for (int x = 0; x < grid.width(); ++x) out.at(0, y, x) = grid.at(0, y, x) >= threshold ? 1.0 : 0.0;
    }
    return out;
}

Tensor Mask::latent(std::int64_t height, std::int64_t width) const {
    const Image b = binary();
    const double sy = static_cast<double>(b.height()) / static_cast<double>(height);
    const double sx = static_cast<double>(b.width()) / static_cast<double>(width);
    Tensor out({height, width});
    for (std::int64_t i = 0; i < height; ++i) {
        for (std::int64_t j = 0; j < width; ++j) {
            // Exact area overlap of pixel cells with the latent cell.
            const double y0 = i * sy, y1 = (i + 1) * sy, x0 = j * sx, x1 = (j + 1) * sx;
            double sum = 0.0, area = 0.0;
            for (int y = static_cast<int>(std::floor(y0)); y < static_cast<int>(std::ceil(y1)); ++y) {
                const double wy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
                for (int x = static_cast<int>(std::floor(x0)); x < static_cast<int>(std::ceil(x1)); ++x) {
                    const double w = wy * (std::min<double>(x + 1, x1) - std::max<double>(x, x0));
                    sum += w * b.at(0, y, x);
                    area += w;
                }
            }
            out[i * width + j] = sum / area >= 0.5 ? 1.0 : 0.0;
        }
    }
    return out;
}

TransferOutput global_transfer(Backbone& model, const Image& content, const StyleCheckpoint& style,
                               const TransferConfig& cfg, Captioner* client) {
    return run_transfer(model, content, style, nullptr, cfg, client);
}

TransferOutput local_transfer(Backbone& model, const Image& content, const StyleCheckpoint& style, const Mask& mask,
                              const TransferConfig& cfg, Captioner* client) {
    return run_transfer(model, content, style, &mask, cfg, client);
}

TransferOutput texture_transfer(Backbone& model, const Image& content, const StyleCheckpoint& appearance,
                                const Mask& mask, TransferConfig cfg, Captioner* client) {
    if (appearance.mode != StyleMode::appearance) {
        log().warn("texture transfer expects an appearance checkpoint, got a {} checkpoint", to_string(appearance.mode));
    }
    if (cfg.target_prompt_template == kTransferTemplate) cfg.target_prompt_template = kTextureTemplate;
    return run_transfer(model, content, appearance, &mask, cfg, client);
}

Tensor seeded_noise(const Backbone& model, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x6e6f697365));
    return rng.normal_tensor(model.latent_shape());
}

Image style_guided_generate(Backbone& model, const std::string& prompt_with_star, const StyleCheckpoint& style,
                            const GenerateConfig& cfg, Trajectory* trajectory) {
    if (prompt_with_star.find(kStyleToken) == std::string::npos) {
        throw PromptError("prompt '" + prompt_with_star + "' does not mention the style token '*'");
    }
    if (!(cfg.lambda >= 0.0) || !std::isfinite(cfg.lambda)) throw ConfigError("lambda must be >= 0");
    check_compatible(style, model);
    const TextEmbedding text = model.embed_prompt(prompt_with_star, {{kStyleToken, style.token_embedding}});
    const Tensor zT = seeded_noise(model, cfg.seed);
    PatchScope scope = apply_checkpoint(model, style, cfg.lambda);
    Trajectory tr = ddim_sample(model, zT, text, cfg.sampler);
    scope.release();
    Image out = model.decode_latent({tr.final_latent(), 0});
    if (trajectory) *trajectory = std::move(tr);
    return out;
}

}  // namespace sigstyle
