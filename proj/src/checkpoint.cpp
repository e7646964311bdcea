#include "sigstyle/checkpoint.hpp"

#include <bit>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>

#include "json.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/log.hpp"

namespace sigstyle {

namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'S', 'I', 'G', 'S', 'T', 'Y', 'L', 'E'};
constexpr const char* kTokenArray = "token_embedding";
constexpr const char* kPredictorPrefix = "predictor.";
constexpr const char* kDirectPrefix = "direct.";

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_tensor(Tensor& t) {
    for (auto& v : t.values()) v = round_f32(v);
}

}  // namespace

const char* to_string(StyleMode m) { return m == StyleMode::style ? "style" : "appearance"; }

StyleMode parse_style_mode(const std::string& s) {
    if (s == "style") return StyleMode::style;
    if (s == "appearance") return StyleMode::appearance;
    throw ParseError("unknown style mode '" + s + "'");
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void round_to_f32(StyleCheckpoint& ckpt) {
    round_tensor(ckpt.token_embedding);
    for (auto& g : ckpt.predictor.groups()) {
        for (auto& f : g.fields) round_tensor(f);
    }
    for (auto& [_, t] : ckpt.direct_deltas) round_tensor(t);
}

void save_checkpoint(const std::filesystem::path& path, const StyleCheckpoint& ckpt) {
    std::vector<std::pair<std::string, const Tensor*>> arrays;
    arrays.emplace_back(kTokenArray, &ckpt.token_embedding);
    const auto pstate = ckpt.predictor.state();
    for (const auto& [k, t] : pstate) arrays.emplace_back(kPredictorPrefix + k, &t);
    for (const auto& [k, t] : ckpt.direct_deltas) arrays.emplace_back(kDirectPrefix + k, &t);

    json h;
    h["format"] = "sigstyle";
    h["version"] = ckpt.version;
    h["base_model_id"] = ckpt.base_model_id;
    h["train_lambda"] = ckpt.train_lambda;
    h["steps_trained"] = ckpt.steps_trained;
    h["style_image_hashes"] = ckpt.style_image_hashes;
    h["created_at"] = ckpt.created_at;
    h["mode"] = to_string(ckpt.mode);
    h["prompt_template"] = ckpt.prompt_template;
    h["learning_rate"] = ckpt.learning_rate;
    h["seed"] = ckpt.seed;
    h["init_word"] = ckpt.init_word;
    h["embedding_width"] = ckpt.token_embedding.numel();
    json targets = json::array();
    for (const auto& a : ckpt.predictor.targets()) {
        targets.push_back({{"address", a.str()}, {"dim_r", a.dim_r}, {"dim_c", a.dim_c}});
    }
    h["targets"] = targets;

    std::vector<std::uint8_t> data;
    json index = json::array();
    for (const auto& [name, t] : arrays) {
        index.push_back({{"name", name}, {"shape", t->shape()}, {"offset", data.size()}, {"length", t->numel()}});
        for (double v : t->values()) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            for (int b = 0; b < 4; ++b) data.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
        }
    }
    h["arrays"] = index;

    const std::string header = h.dump();
    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    const std::uint64_t len = header.size();
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(len >> (8 * b)));
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), data.begin(), data.end());

    // Write to a sibling temp file first so a failed write never leaves a torn checkpoint.
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write " + tmp);
        f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("failed writing " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

StyleCheckpoint load_checkpoint(const std::filesystem::path& path, const Backbone* model) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::string where = path.string();
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw ParseError(where + ": not a .sigstyle checkpoint (bad magic or truncated)");
    }
    std::uint64_t hlen = 0;
    for (int b = 0; b < 8; ++b) hlen |= static_cast<std::uint64_t>(bytes[8 + b]) << (8 * b);
    if (hlen > bytes.size() - 16) throw ParseError(where + ": truncated header");
    const std::uint8_t* data = bytes.data() + 16 + hlen;
    const std::uint64_t data_len = bytes.size() - 16 - hlen;

    StyleCheckpoint c;
    try {
        const json h = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
        if (h.at("format").get<std::string>() != "sigstyle") throw ParseError(where + ": unknown format tag");
        c.version = h.at("version").get<int>();
        if (c.version != kCheckpointVersion) {
            throw IncompatibleCheckpointError(where + ": checkpoint version " + std::to_string(c.version) +
                                              ", this build reads version " + std::to_string(kCheckpointVersion));
        }
        c.base_model_id = h.at("base_model_id").get<std::string>();
        c.train_lambda = h.at("train_lambda").get<double>();
        c.steps_trained = h.at("steps_trained").get<std::int64_t>();
        c.style_image_hashes = h.at("style_image_hashes").get<std::vector<std::string>>();
        c.created_at = h.at("created_at").get<std::string>();
        c.mode = parse_style_mode(h.at("mode").get<std::string>());
        c.prompt_template = h.at("prompt_template").get<std::string>();
        c.learning_rate = h.at("learning_rate").get<double>();
        c.seed = h.at("seed").get<std::uint64_t>();
        c.init_word = h.at("init_word").get<std::string>();

        std::vector<AttentionAddress> targets;
        for (const auto& t : h.at("targets")) {
            auto a = parse_attention_address(t.at("address").get<std::string>());
            a.dim_r = t.at("dim_r").get<std::int64_t>();
            a.dim_c = t.at("dim_c").get<std::int64_t>();
            targets.push_back(a);
        }

        std::map<std::string, Tensor> pstate;
        bool have_token = false;
        for (const auto& e : h.at("arrays")) {
            const auto name = e.at("name").get<std::string>();
            Shape shape = e.at("shape").get<Shape>();
            const auto offset = e.at("offset").get<std::uint64_t>();
            const auto length = e.at("length").get<std::uint64_t>();
            if (static_cast<std::uint64_t>(shape_numel(shape)) != length || offset % 4 != 0 ||
                offset > data_len || length > (data_len - offset) / 4) {
                throw ParseError(where + ": array '" + name + "' lies outside the data section");
            }
            Tensor t(shape);
            for (std::uint64_t i = 0; i < length; ++i) {
                std::uint32_t bits = 0;
                for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(data[offset + i * 4 + b]) << (8 * b);
                t[static_cast<std::int64_t>(i)] = std::bit_cast<float>(bits);
            }
            if (name == kTokenArray) {
                c.token_embedding = std::move(t);
                have_token = true;
            } else if (name.rfind(kPredictorPrefix, 0) == 0) {
                pstate.emplace(name.substr(std::strlen(kPredictorPrefix)), std::move(t));
            } else if (name.rfind(kDirectPrefix, 0) == 0) {
                c.direct_deltas.emplace(name.substr(std::strlen(kDirectPrefix)), std::move(t));
            } else {
                throw ParseError(where + ": unexpected array '" + name + "'");
            }
        }
        if (!have_token) throw ParseError(where + ": missing token embedding");
        if (h.at("embedding_width").get<std::int64_t>() != c.token_embedding.numel()) {
            throw ParseError(where + ": embedding width disagrees with stored token");
        }
        c.predictor = OffsetPredictor::from_state(targets, pstate);
    } catch (const json::exception& e) {
        throw ParseError(where + ": malformed header: " + e.what());
    } catch (const ConfigError& e) {
        throw ParseError(where + ": " + e.what());
    }
    if (model) check_compatible(c, *model);
    return c;
}

void check_compatible(const StyleCheckpoint& ckpt, const Backbone& model) {
    if (ckpt.token_embedding.numel() != model.embedding_width()) {
        throw DimensionError("checkpoint token width " + std::to_string(ckpt.token_embedding.numel()) +
                             " does not match backbone embedding width " + std::to_string(model.embedding_width()));
    }
    const auto targets = ckpt.predictor.targets();
    check_target_set(targets);
    for (const auto& a : targets) {
        const auto& r = model.resolve(a);
        if (r.dim_r != a.dim_r || r.dim_c != a.dim_c) {
            throw DimensionError("checkpoint target " + a.str() + " is [" + std::to_string(a.dim_r) + ", " +
                                 std::to_string(a.dim_c) + "], backbone has [" + std::to_string(r.dim_r) + ", " +
                                 std::to_string(r.dim_c) + "]");
        }
    }
    for (const auto& [name, d] : ckpt.direct_deltas) {
        if (UNet::region_of_parameter(name) != Region::decoder) {
            throw ConfigError("checkpoint trains non-decoder parameter '" + name + "'");
        }
        if (!model.unet_parameters().contains(name)) throw UnknownAddressError("backbone has no parameter '" + name + "'");
        if (model.unet_parameters().base(name).shape() != d.shape()) {
            throw DimensionError("checkpoint delta for '" + name + "' has the wrong shape");
        }
    }
    if (ckpt.base_model_id != model.model_id()) {
        log().warn("checkpoint was trained on '{}' but is applied to '{}'", ckpt.base_model_id, model.model_id());
    }
}

StyleCheckpoint identity_checkpoint(const Backbone& model, Tensor token, std::uint64_t seed) {
    StyleCheckpoint c;
    c.token_embedding = std::move(token);
    c.predictor = OffsetPredictor::init(default_targets(model), seed);
    c.base_model_id = model.model_id();
    c.created_at = utc_timestamp();
    c.seed = seed;
    round_to_f32(c);
    return c;
}

PatchScope apply_checkpoint(Backbone& model, const StyleCheckpoint& ckpt, double lambda) {
    check_compatible(ckpt, model);
    PatchScope scope = apply_offsets(model, ckpt.predictor, {lambda, {}});
    for (const auto& [name, d] : ckpt.direct_deltas) {
        Tensor w = model.unet_parameters().base(name);
        for (std::int64_t i = 0; i < w.numel(); ++i) w[i] += d[i];
        model.patch_parameter(name, std::move(w));
        scope.track_parameter(name);
    }
    return scope;
}

}  // namespace sigstyle
