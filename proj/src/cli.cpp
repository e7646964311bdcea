#include "sigstyle/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "sigstyle/apps.hpp"
#include "sigstyle/backbone/diffusers.hpp"
#include "sigstyle/checkpoint.hpp"
#include "sigstyle/config.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/log.hpp"
#include "sigstyle/metrics.hpp"
#include "sigstyle/styletune.hpp"

namespace sigstyle {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Options that, when given, write their value into a JSON overlay at a
// pointer. The overlay is applied after the --config file, so flags win and
// share the config's key names and validation.
class Overlay {
public:
    template <class T>
    CLI::Option* option(CLI::App* app, const std::string& flag, const std::string& pointer, const std::string& help) {
        auto value = std::make_shared<T>();
        CLI::Option* opt = app->add_option(flag, *value, help);
        setters_.push_back([opt, value, pointer](json& j) {
            if (opt->count()) j[json::json_pointer(pointer)] = *value;
        });
        return opt;
    }

    // Boolean switch that writes a fixed value.
    CLI::Option* flag(CLI::App* app, const std::string& flag, const std::string& pointer, bool value,
                      const std::string& help) {
        CLI::Option* opt = app->add_flag(flag, help);
        setters_.push_back([opt, value, pointer](json& j) {
            if (opt->count()) j[json::json_pointer(pointer)] = value;
        });
        return opt;
    }

    json build() const {
        json j = json::object();
        for (const auto& s : setters_) s(j);
        return j;
    }

private:
    std::vector<std::function<void(json&)>> setters_;
};

json to_json(const GenerateConfig& cfg) {
    return {{"sampler", sigstyle::to_json(cfg.sampler)}, {"lambda", cfg.lambda}, {"seed", cfg.seed}};
}

void update_from_json(GenerateConfig& cfg, const json& j) {
    if (!j.is_object()) throw ConfigError("generate config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "sampler") {
            sigstyle::update_from_json(cfg.sampler, v);
        } else if (key == "lambda") {
            cfg.lambda = v.get<double>();
        } else if (key == "seed") {
            cfg.seed = v.get<std::uint64_t>();
        } else {
            throw ConfigError("unknown generate config key '" + key + "' (known: sampler, lambda, seed)");
        }
    }
}

// Settings shared by every subcommand.
struct Common {
    std::string config_path;
    std::string backbone;
    std::string device;
    std::string log_level;
    std::string output_dir;
    bool dry_run = false;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--backbone", c.backbone, "'toy' or a diffusers weights directory (default: $SIGSTYLE_BACKBONE_DIR, else toy)");
    app->add_option("--device", c.device, "compute device (only 'cpu')");
    app->add_option("--log-level", c.log_level, "trace, debug, info, warn, error, critical, off");
    app->add_option("--output-dir", c.output_dir, "base directory for relative output paths");
    app->add_flag("--dry-run", c.dry_run, "print the resolved config as JSON and exit");
}

void add_transfer_flags(CLI::App* app, Overlay& o) {
    o.option<int>(app, "--num-steps", "/sampler/num_steps", "DDIM steps T (default 50)");
    o.option<double>(app, "--guidance-scale", "/sampler/guidance_scale", "classifier-free guidance scale (default 1)");
    o.option<double>(app, "--eta", "/sampler/eta", "DDIM eta (only 0)");
    o.option<std::uint64_t>(app, "--seed", "/sampler/seed", "seed (default 0)");
    o.option<int>(app, "--k", "/swap/k", "attention swap horizon (default 25)");
    o.option<std::vector<std::string>>(app, "--layers", "/swap/layers", "self-attention layers, region.block.self (default all)");
    o.option<std::vector<std::string>>(app, "--branches", "/swap/branches", "guidance branches: cond, uncond");
    o.option<double>(app, "--lambda", "/lambda", "offset strength (default 1)");
    o.option<std::string>(app, "--target-prompt-template", "/target_prompt_template", "template with {caption} and *");
    o.option<std::string>(app, "--target-prompt", "/target_prompt", "target prompt used verbatim");
    o.option<std::string>(app, "--caption-source", "/caption_source", "user or captioner");
    o.option<std::string>(app, "--caption", "/caption", "content caption");
    o.option<std::string>(app, "--swap-mode", "/swap_mode", "lockstep or two_pass");
    o.option<std::size_t>(app, "--memory-budget-bytes", "/trace/memory_budget_bytes", "resident attention trace budget");
    o.option<std::string>(app, "--spill-dir", "/trace/spill_dir", "attention trace spill directory");
}

json read_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config '" + path + "' must hold a JSON object");
    static const std::set<std::string> known{"backbone", "device", "log_level", "output_dir",
                                             "transfer", "tune",    "generate"};
    for (const auto& [key, v] : j.items()) {
        if (!known.count(key)) {
            throw ConfigError("unknown config key '" + key +
                              "' (known: backbone, device, log_level, output_dir, transfer, tune, generate)");
        }
    }
    return j;
}

// Resolved settings shared by every subcommand.
struct Resolved {
    std::string backbone = "toy";
    std::string device = "cpu";
    std::string log_level = "info";
    fs::path output_dir;

    json to_json() const {
        return {{"backbone", backbone}, {"device", device}, {"log_level", log_level}, {"output_dir", output_dir.string()}};
    }
};

Resolved resolve_common(const Common& c, const json& file) {
    Resolved r;
    if (auto env = backbone_dir_from_env()) r.backbone = env->string();
    auto str = [&](const char* key, std::string& dst, const std::string& flag) {
        if (file.contains(key)) dst = file.at(key).get<std::string>();
        if (!flag.empty()) dst = flag;
    };
    str("backbone", r.backbone, c.backbone);
    str("device", r.device, c.device);
    str("log_level", r.log_level, c.log_level);
    std::string out = r.output_dir.string();
    str("output_dir", out, c.output_dir);
    r.output_dir = out;
    if (r.device != "cpu") throw ConfigError("device '" + r.device + "' is not available; only 'cpu' is supported");
    set_log_level(r.log_level);
    return r;
}

fs::path output_path(const Resolved& r, const std::string& p) {
    fs::path path(p);
    if (path.is_relative() && !r.output_dir.empty()) path = r.output_dir / path;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    return path;
}

TransferConfig resolve_transfer(const json& file, const Overlay& o) {
    TransferConfig cfg;
    if (const char* cache = std::getenv("SIGSTYLE_CACHE_DIR"); cache && *cache) {
        cfg.trace.spill_dir = fs::path(cache) / "traces";
    }
    if (file.contains("transfer")) update_from_json(cfg, file.at("transfer"));
    update_from_json(cfg, o.build());
    return cfg;
}

void log_resolved(const std::string& command, const json& resolved) {
    log().info("sigstyle {} resolved config: {}", command, resolved.dump());
}

std::unique_ptr<Captioner> make_captioner(const TransferConfig& cfg, const std::string& url, int timeout) {
    if (cfg.caption_source != CaptionSource::captioner) return nullptr;
    if (url.empty()) throw ConfigError("--caption-source captioner needs --captioner-url");
    return std::make_unique<HttpCaptioner>(url, timeout);
}

bool is_usage_error(const std::exception& e) {
    return dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const PromptError*>(&e) ||
           dynamic_cast<const json::exception*>(&e);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Single-image style inversion and attention-swap style transfer", "sigstyle"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every subcommand");

    Common common;
    Overlay overlay;

    // tune
    std::vector<std::string> tune_styles;
    std::string tune_out, tune_mode;
    CLI::App* tune = app.add_subcommand("tune", "learn a style checkpoint from one or more style images");
    tune->add_option("--style", tune_styles, "style image(s); several images fuse their styles")->required()->check(CLI::ExistingFile);
    tune->add_option("--out", tune_out, "output .sigstyle checkpoint")->required();
    tune->add_option("--mode", tune_mode, "style or appearance (sets the training prompt)")
        ->check(CLI::IsMember({"style", "appearance"}));
    overlay.option<double>(tune, "--learning-rate", "/learning_rate", "Adam learning rate (default 1e-6)");
    overlay.option<std::int64_t>(tune, "--steps", "/steps", "optimizer steps (default 1500)");
    overlay.option<int>(tune, "--batch-size", "/batch_size", "samples per step (default 1)");
    overlay.option<double>(tune, "--lambda", "/lambda", "offset strength during training (default 1)");
    overlay.option<std::uint64_t>(tune, "--seed", "/seed", "seed (default 0)");
    overlay.option<std::string>(tune, "--prompt-template", "/prompt_template", "training prompt containing *");
    overlay.option<std::string>(tune, "--init-word", "/init_word", "word whose embedding initializes * (default art)");
    overlay.option<double>(tune, "--min-crop-fraction", "/augment/min_crop_fraction", "smallest crop side fraction");
    overlay.flag(tune, "--no-random-crop", "/augment/random_crop", false, "disable random cropping");
    overlay.flag(tune, "--no-horizontal-flip", "/augment/horizontal_flip", false, "disable random flips");
    overlay.flag(tune, "--train-decoder-direct", "/train_decoder_direct", true, "also train decoder parameters directly");
    overlay.option<std::vector<std::string>>(tune, "--targets", "/targets", "attention addresses to offset");
    add_common(tune, common);

    // transfer / local / texture
    std::string content_path, style_path, out_path, mask_path, recon_path, grid_path, captioner_url;
    double mask_threshold = 0.5;
    int captioner_timeout = 30;
    auto add_transfer_like = [&](const char* name, const char* help, bool masked) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--content", content_path, "content image")->required()->check(CLI::ExistingFile);
        sub->add_option("--style", style_path, ".sigstyle checkpoint")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out_path, "output PNG")->required();
        if (masked) {
            sub->add_option("--mask", mask_path, "region mask PNG (white = transfer)")->required()->check(CLI::ExistingFile);
            sub->add_option("--mask-threshold", mask_threshold, "binarization threshold (default 0.5)");
        }
        sub->add_option("--reconstruction", recon_path, "also write the content reconstruction");
        sub->add_option("--grid", grid_path, "also write a content | reconstruction | stylized grid");
        sub->add_option("--captioner-url", captioner_url, "http endpoint for --caption-source captioner");
        sub->add_option("--captioner-timeout", captioner_timeout, "captioner timeout in seconds");
        add_transfer_flags(sub, overlay);
        add_common(sub, common);
        return sub;
    };
    CLI::App* transfer = add_transfer_like("transfer", "global style transfer", false);
    CLI::App* local = add_transfer_like("local", "masked style transfer", true);
    CLI::App* texture = add_transfer_like("texture", "masked appearance transfer", true);

    // generate
    std::string prompt;
    CLI::App* generate = app.add_subcommand("generate", "style-guided text-to-image generation");
    generate->add_option("--prompt", prompt, "prompt containing *")->required();
    generate->add_option("--style", style_path, ".sigstyle checkpoint")->required()->check(CLI::ExistingFile);
    generate->add_option("--out", out_path, "output PNG")->required();
    overlay.option<int>(generate, "--num-steps", "/sampler/num_steps", "DDIM steps (default 50)");
    overlay.option<double>(generate, "--guidance-scale", "/sampler/guidance_scale",
                           "guidance scale (default 7.5 on real backbones, 1 on the toy)");
    overlay.option<double>(generate, "--eta", "/sampler/eta", "DDIM eta (only 0)");
    overlay.option<double>(generate, "--lambda", "/lambda", "offset strength (default 1)");
    overlay.option<std::uint64_t>(generate, "--seed", "/seed", "noise seed (default 0)");
    add_common(generate, common);

    // eval
    std::string contents_dir, styles_dir, eval_out, metrics_spec = "toy";
    bool no_resume = false;
    CLI::App* eval = app.add_subcommand("eval", "style loss and LPIPS over every content x style pair");
    eval->add_option("--contents", contents_dir, "directory of content PNGs (+ optional <stem>.txt captions)")
        ->required()
        ->check(CLI::ExistingDirectory);
    eval->add_option("--styles", styles_dir, "directory of <stem>.sigstyle + <stem>.png")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--out-dir", eval_out, "report directory")->required();
    eval->add_option("--metrics", metrics_spec, "'toy' or a directory with vgg16/lpips_vgg safetensors");
    eval->add_flag("--no-resume", no_resume, "recompute pairs already in rows.jsonl");
    add_transfer_flags(eval, overlay);
    add_common(eval, common);

    // grid
    std::vector<std::string> grid_images, grid_labels;
    int grid_columns = 0;
    CLI::App* grid = app.add_subcommand("grid", "tile images into one captioned PNG");
    grid->add_option("--images", grid_images, "input PNGs, row-major")->required()->check(CLI::ExistingFile);
    grid->add_option("--labels", grid_labels, "one label per image");
    grid->add_option("--out", out_path, "output PNG")->required();
    grid->add_option("--columns", grid_columns, "tiles per row (default: one row)");
    add_common(grid, common);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        err << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return kExitUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    bool resolving = true;
    try {
        const json file = read_config_file(common.config_path);
        const Resolved r = resolve_common(common, file);
        json resolved = {{"command", command}, {"cli", r.to_json()}};

        if (sub == tune) {
            TrainConfig cfg;
            if (file.contains("tune")) update_from_json(cfg, file.at("tune"));
            json o = overlay.build();
            if (!tune_mode.empty() && !o.contains("prompt_template")) {
                o["prompt_template"] = tune_mode == "appearance" ? kAppearanceTemplate : kStyleTemplate;
            }
            update_from_json(cfg, o);
            cfg.validate();
            resolved["tune"] = to_json(cfg);
            resolved["inputs"] = {{"style", tune_styles}, {"out", tune_out}};
            log_resolved(command, resolved);
            if (common.dry_run) {
                out << resolved.dump(2) << "\n";
                return kExitOk;
            }
            Backbone model = load_backbone(r.backbone);
            resolving = false;
            std::vector<Image> images;
            for (const auto& p : tune_styles) images.push_back(read_png(p));
            const std::int64_t every = std::max<std::int64_t>(1, cfg.steps / 10);
            FinetuneReport report;
            const StyleCheckpoint ckpt = finetune(model, images, cfg, &report, [&](std::int64_t step, double loss) {
                if ((step + 1) % every == 0) log().info("step {}/{} loss {:.6g}", step + 1, cfg.steps, loss);
            });
            const fs::path path = output_path(r, tune_out);
            save_checkpoint(path, ckpt);
            log().info("wrote {}", path.string());
            return kExitOk;
        }

        if (sub == transfer || sub == local || sub == texture) {
            TransferConfig cfg = resolve_transfer(file, overlay);
            if (sub == texture && cfg.target_prompt_template == kTransferTemplate) {
                cfg.target_prompt_template = kTextureTemplate;
            }
            cfg.validate();
            resolved["transfer"] = to_json(cfg);
            resolved["inputs"] = {{"content", content_path}, {"style", style_path}, {"out", out_path}};
            if (sub != transfer) resolved["inputs"]["mask"] = mask_path;
            log_resolved(command, resolved);
            if (common.dry_run) {
                out << resolved.dump(2) << "\n";
                return kExitOk;
            }
            auto captioner = make_captioner(cfg, captioner_url, captioner_timeout);
            Backbone model = load_backbone(r.backbone);
            cfg.sampler.validate(model.schedule());
            resolving = false;
            const Image content = read_png(content_path);
            const StyleCheckpoint ckpt = load_checkpoint(style_path, &model);
            TransferOutput result;
            if (sub == transfer) {
                result = global_transfer(model, content, ckpt, cfg, captioner.get());
            } else {
                const Mask mask = Mask::from_png(mask_path, mask_threshold);
                result = sub == local ? local_transfer(model, content, ckpt, mask, cfg, captioner.get())
                                      : texture_transfer(model, content, ckpt, mask, cfg, captioner.get());
            }
            log().info("target prompt: '{}'", result.target_prompt);
            write_png(output_path(r, out_path), result.image);
            if (!recon_path.empty()) write_png(output_path(r, recon_path), result.reconstruction);
            if (!grid_path.empty()) {
                emit_grid({content, result.reconstruction, result.image}, {"content", "reconstruction", "stylized"},
                          output_path(r, grid_path));
            }
            log().info("wrote {}", output_path(r, out_path).string());
            return kExitOk;
        }

        if (sub == generate) {
            GenerateConfig cfg;
            cfg.sampler.guidance_scale =
                default_guidance(r.backbone == "toy" ? BackboneVariant::toy : BackboneVariant::real_pretrained);
            if (file.contains("generate")) update_from_json(cfg, file.at("generate"));
            update_from_json(cfg, overlay.build());
            if (!(cfg.lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
            resolved["generate"] = to_json(cfg);
            resolved["inputs"] = {{"prompt", prompt}, {"style", style_path}, {"out", out_path}};
            log_resolved(command, resolved);
            if (common.dry_run) {
                out << resolved.dump(2) << "\n";
                return kExitOk;
            }
            Backbone model = load_backbone(r.backbone);
            cfg.sampler.validate(model.schedule());
            resolving = false;
            const StyleCheckpoint ckpt = load_checkpoint(style_path, &model);
            write_png(output_path(r, out_path), style_guided_generate(model, prompt, ckpt, cfg));
            log().info("wrote {}", output_path(r, out_path).string());
            return kExitOk;
        }

        if (sub == eval) {
            EvalConfig cfg;
            cfg.transfer = resolve_transfer(file, overlay);
            cfg.transfer.validate();
            cfg.out_dir = eval_out;
            if (cfg.out_dir.is_relative() && !r.output_dir.empty()) cfg.out_dir = r.output_dir / cfg.out_dir;
            cfg.resume = !no_resume;
            resolved["transfer"] = to_json(cfg.transfer);
            resolved["inputs"] = {{"contents", contents_dir}, {"styles", styles_dir}, {"out_dir", cfg.out_dir.string()},
                                  {"metrics", metrics_spec}, {"resume", cfg.resume}};
            log_resolved(command, resolved);
            if (common.dry_run) {
                out << resolved.dump(2) << "\n";
                return kExitOk;
            }
            Backbone model = load_backbone(r.backbone);
            cfg.transfer.sampler.validate(model.schedule());
            resolving = false;
            const MetricModels metrics = MetricModels::make(metrics_spec);
            const auto styles = load_eval_styles(styles_dir, &model);
            const MetricsReport report = evaluate_suite(model, fs::path(contents_dir), styles, metrics, cfg);
            log().info("{} pairs, {} failures, mean style loss {:.6g}, mean lpips {:.6g}", report.rows.size(),
                       report.failures, report.mean_style_loss, report.mean_lpips);
            return report.failures == 0 ? kExitOk : kExitRuntime;
        }

        // grid
        resolved["inputs"] = {{"images", grid_images}, {"labels", grid_labels}, {"out", out_path}, {"columns", grid_columns}};
        log_resolved(command, resolved);
        if (common.dry_run) {
            out << resolved.dump(2) << "\n";
            return kExitOk;
        }
        if (!grid_labels.empty() && grid_labels.size() != grid_images.size()) {
            throw ConfigError("--labels needs one label per image");
        }
        resolving = false;
        std::vector<Image> images;
        for (const auto& p : grid_images) images.push_back(read_png(p));
        emit_grid(images, grid_labels, output_path(r, out_path), grid_columns);
        return kExitOk;
    } catch (const std::exception& e) {
        const bool usage = resolving || is_usage_error(e);
        log().error("{}: {}", command, e.what());
        err << "error: " << e.what() << "\n";
        if (usage) err << "\n" << sub->help();
        return usage ? kExitUsage : kExitRuntime;
    }
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, std::cout, std::cerr);
}

}  // namespace sigstyle
