#pragma once

#include <string>
#include <string_view>

#include "json.hpp"
#include "sigstyle/apps.hpp"
#include "sigstyle/ddim.hpp"
#include "sigstyle/styletune.hpp"
#include "sigstyle/swapengine.hpp"

namespace sigstyle {

// JSON forms of the run configurations. Keys are the C++ field names.
// The update_from_json functions overwrite only the keys present and throw
// ConfigError on unknown keys or wrongly typed values.

nlohmann::json to_json(const SamplerConfig& cfg);
nlohmann::json to_json(const SwapPlan& plan);
nlohmann::json to_json(const TraceOptions& opts);
nlohmann::json to_json(const TransferConfig& cfg);
nlohmann::json to_json(const AugmentConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);

void update_from_json(SamplerConfig& cfg, const nlohmann::json& j);
void update_from_json(SwapPlan& plan, const nlohmann::json& j);
void update_from_json(TraceOptions& opts, const nlohmann::json& j);
void update_from_json(TransferConfig& cfg, const nlohmann::json& j);
void update_from_json(AugmentConfig& cfg, const nlohmann::json& j);
void update_from_json(TrainConfig& cfg, const nlohmann::json& j);

// "region.block.kind", e.g. "decoder.1.self".
LayerAddress parse_layer_address(std::string_view s);

const char* to_string(SwapMode m);
SwapMode parse_swap_mode(std::string_view s);
const char* to_string(CaptionSource s);
CaptionSource parse_caption_source(std::string_view s);
GuidanceBranch parse_guidance_branch(std::string_view s);

}  // namespace sigstyle
