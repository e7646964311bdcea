#include "sigstyle/config.hpp"

#include <charconv>
#include <functional>
#include <map>

#include "sigstyle/errors.hpp"

namespace sigstyle {

namespace {

using nlohmann::json;
using Setter = std::function<void(const json&)>;

// Dispatches every key of `j` to its setter; unknown keys are rejected.
void apply_keys(const json& j, std::string_view what, const std::map<std::string, Setter>& setters) {
    if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        auto it = setters.find(key);
        if (it == setters.end()) {
            std::string known;
            for (const auto& [k, _] : setters) known += (known.empty() ? "" : ", ") + k;
            throw ConfigError("unknown key '" + key + "' in " + std::string(what) + " (known: " + known + ")");
        }
        try {
            it->second(value);
        } catch (const json::exception& e) {
            throw ConfigError(std::string(what) + "." + key + ": " + e.what());
        } catch (const ParseError& e) {
            throw ConfigError(std::string(what) + "." + key + ": " + e.what());
        }
    }
}

template <class T>
Setter set(T& field) {
    return [&field](const json& v) { field = v.get<T>(); };
}

}  // namespace

const char* to_string(SwapMode m) { return m == SwapMode::lockstep ? "lockstep" : "replay"; }

SwapMode parse_swap_mode(std::string_view s) {
    if (s == "lockstep") return SwapMode::lockstep;
    if (s == "replay") return SwapMode::replay;
    throw ConfigError("swap_mode must be lockstep or replay, got '" + std::string(s) + "'");
}

const char* to_string(CaptionSource s) { return s == CaptionSource::user ? "user" : "captioner"; }

CaptionSource parse_caption_source(std::string_view s) {
    if (s == "user") return CaptionSource::user;
    if (s == "captioner") return CaptionSource::captioner;
    throw ConfigError("caption_source must be user or captioner, got '" + std::string(s) + "'");
}

GuidanceBranch parse_guidance_branch(std::string_view s) {
    if (s == "cond") return GuidanceBranch::conditional;
    if (s == "uncond") return GuidanceBranch::unconditional;
    throw ConfigError("branch must be cond or uncond, got '" + std::string(s) + "'");
}

LayerAddress parse_layer_address(std::string_view s) {
    const auto a = s.find('.');
    const auto b = a == std::string_view::npos ? a : s.find('.', a + 1);
    if (b == std::string_view::npos || s.find('.', b + 1) != std::string_view::npos) {
        throw ParseError("layer address must look like region.block.kind, got '" + std::string(s) + "'");
    }
    LayerAddress out;
    out.region = parse_region(s.substr(0, a));
    const auto idx = s.substr(a + 1, b - a - 1);
    auto [ptr, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), out.block_index);
    if (ec != std::errc() || ptr != idx.data() + idx.size() || out.block_index < 0) {
        throw ParseError("bad block index in '" + std::string(s) + "'");
    }
    out.kind = parse_attn_kind(s.substr(b + 1));
    return out;
}

json to_json(const SamplerConfig& cfg) {
    return {{"num_steps", cfg.num_steps}, {"guidance_scale", cfg.guidance_scale}, {"eta", cfg.eta}, {"seed", cfg.seed}};
}

json to_json(const SwapPlan& plan) {
    json layers = json::array(), branches = json::array();
    for (const auto& l : plan.layers) layers.push_back(l.str());
    for (auto b : plan.branches) branches.push_back(to_string(b));
    return {{"k", plan.k}, {"layers", layers}, {"branches", branches}};
}

json to_json(const TraceOptions& opts) {
    return {{"memory_budget_bytes", opts.memory_budget_bytes}, {"spill_dir", opts.spill_dir.string()}};
}

json to_json(const TransferConfig& cfg) {
    return {{"sampler", to_json(cfg.sampler)},
            {"swap", to_json(cfg.swap)},
            {"lambda", cfg.lambda},
            {"target_prompt_template", cfg.target_prompt_template},
            {"target_prompt", cfg.target_prompt ? json(*cfg.target_prompt) : json(nullptr)},
            {"caption_source", to_string(cfg.caption_source)},
            {"caption", cfg.caption},
            {"swap_mode", to_string(cfg.swap_mode)},
            {"trace", to_json(cfg.trace)}};
}

json to_json(const AugmentConfig& cfg) {
    return {{"random_crop", cfg.random_crop},
            {"horizontal_flip", cfg.horizontal_flip},
            {"min_crop_fraction", cfg.min_crop_fraction}};
}

json to_json(const TrainConfig& cfg) {
    json targets = json::array();
    for (const auto& t : cfg.targets) targets.push_back(t.str());
    return {{"learning_rate", cfg.learning_rate},
            {"steps", cfg.steps},
            {"batch_size", cfg.batch_size},
            {"lambda", cfg.lambda},
            {"augment", to_json(cfg.augment)},
            {"seed", cfg.seed},
            {"prompt_template", cfg.prompt_template},
            {"init_word", cfg.init_word},
            {"train_decoder_direct", cfg.train_decoder_direct},
            {"targets", targets}};
}

void update_from_json(SamplerConfig& cfg, const json& j) {
    apply_keys(j, "sampler",
               {{"num_steps", set(cfg.num_steps)},
                {"guidance_scale", set(cfg.guidance_scale)},
                {"eta", set(cfg.eta)},
                {"seed", set(cfg.seed)}});
}

void update_from_json(SwapPlan& plan, const json& j) {
    apply_keys(j, "swap",
               {{"k", set(plan.k)},
                {"layers",
                 [&](const json& v) {
                     plan.layers.clear();
                     for (const auto& s : v) plan.layers.push_back(parse_layer_address(s.get<std::string>()));
                 }},
                {"branches", [&](const json& v) {
                     plan.branches.clear();
                     for (const auto& s : v) plan.branches.insert(parse_guidance_branch(s.get<std::string>()));
                 }}});
}

void update_from_json(TraceOptions& opts, const json& j) {
    apply_keys(j, "trace",
               {{"memory_budget_bytes", set(opts.memory_budget_bytes)},
                {"spill_dir", [&](const json& v) { opts.spill_dir = v.get<std::string>(); }}});
}

void update_from_json(TransferConfig& cfg, const json& j) {
    apply_keys(j, "transfer",
               {{"sampler", [&](const json& v) { update_from_json(cfg.sampler, v); }},
                {"swap", [&](const json& v) { update_from_json(cfg.swap, v); }},
                {"lambda", set(cfg.lambda)},
                {"target_prompt_template", set(cfg.target_prompt_template)},
                {"target_prompt",
                 [&](const json& v) {
                     if (v.is_null()) {
                         cfg.target_prompt.reset();
                     } else {
                         cfg.target_prompt = v.get<std::string>();
                     }
                 }},
                {"caption_source", [&](const json& v) { cfg.caption_source = parse_caption_source(v.get<std::string>()); }},
                {"caption", set(cfg.caption)},
                {"swap_mode", [&](const json& v) { cfg.swap_mode = parse_swap_mode(v.get<std::string>()); }},
                {"trace", [&](const json& v) { update_from_json(cfg.trace, v); }}});
}

void update_from_json(AugmentConfig& cfg, const json& j) {
    apply_keys(j, "augment",
               {{"random_crop", set(cfg.random_crop)},
                {"horizontal_flip", set(cfg.horizontal_flip)},
                {"min_crop_fraction", set(cfg.min_crop_fraction)}});
}

void update_from_json(TrainConfig& cfg, const json& j) {
    apply_keys(j, "tune",
               {{"learning_rate", set(cfg.learning_rate)},
                {"steps", set(cfg.steps)},
                {"batch_size", set(cfg.batch_size)},
                {"lambda", set(cfg.lambda)},
                {"augment", [&](const json& v) { update_from_json(cfg.augment, v); }},
                {"seed", set(cfg.seed)},
                {"prompt_template", set(cfg.prompt_template)},
                {"init_word", set(cfg.init_word)},
                {"train_decoder_direct", set(cfg.train_decoder_direct)},
                {"targets", [&](const json& v) {
                     cfg.targets.clear();
                     for (const auto& s : v) cfg.targets.push_back(parse_attention_address(s.get<std::string>()));
                 }}});
}

}  // namespace sigstyle
