#include "sigstyle/backbone/diffusers.hpp"

#include <algorithm>
#include <cctype>
#include <climits>
#include <cstdlib>
#include <fstream>
#include <set>

#include "json.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/io/safetensors.hpp"
#include "sigstyle/log.hpp"
#include "sigstyle/backbone/toy.hpp"

namespace sigstyle {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kBos = "<|startoftext|>";
constexpr const char* kEos = "<|endoftext|>";
constexpr const char* kEndOfWord = "</w>";
constexpr double kVaeNormEps = 1e-6;

void append_utf8(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

// GPT-2 byte <-> printable code point table used by CLIP's vocabulary.
struct ByteTable {
    std::array<std::string, 256> encode;
    std::map<std::string, std::uint8_t> decode;

    ByteTable() {
        std::vector<int> printable;
        for (int b = '!'; b <= '~'; ++b) printable.push_back(b);
        for (int b = 0xA1; b <= 0xAC; ++b) printable.push_back(b);
        for (int b = 0xAE; b <= 0xFF; ++b) printable.push_back(b);
        std::array<std::uint32_t, 256> cp{};
        std::array<bool, 256> seen{};
        for (int b : printable) {
            cp[static_cast<std::size_t>(b)] = static_cast<std::uint32_t>(b);
            seen[static_cast<std::size_t>(b)] = true;
        }
        std::uint32_t next = 256;
        for (std::size_t b = 0; b < 256; ++b) {
            if (!seen[b]) cp[b] = next++;
        }
        for (std::size_t b = 0; b < 256; ++b) {
            append_utf8(encode[b], cp[b]);
            decode[encode[b]] = static_cast<std::uint8_t>(b);
        }
    }
};

const ByteTable& byte_table() {
    static const ByteTable t;
    return t;
}

// Splits a UTF-8 string into code-point substrings.
std::vector<std::string> utf8_chars(const std::string& s) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < s.size();) {
        const auto c = static_cast<unsigned char>(s[i]);
        const std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
        out.push_back(s.substr(i, len));
        i += len;
    }
    return out;
}

bool is_letter(unsigned char c) { return std::isalpha(c) || c >= 0x80; }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw CapabilityError("backbone file " + path.string() + " is missing");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

// Loads <dir>/<stem>.safetensors or the shards listed in its index.
std::map<std::string, Tensor> read_component_weights(const fs::path& dir, const std::string& stem) {
    const fs::path single = dir / (stem + ".safetensors");
    if (fs::exists(single)) return read_safetensors(single).tensors;
    const fs::path index = dir / (stem + ".safetensors.index.json");
    if (fs::exists(index)) {
        std::map<std::string, Tensor> out;
        std::set<std::string> shards;
        for (const auto& [_, file] : read_json(index).at("weight_map").items()) shards.insert(file.get<std::string>());
        for (const auto& shard : shards) {
            for (auto& [k, v] : read_safetensors(dir / shard).tensors) out[k] = std::move(v);
        }
        return out;
    }
    throw CapabilityError("no " + stem + ".safetensors in " + dir.string() +
                          " (only safetensors weights are supported)");
}

// Copies the expected parameters into `store`, reshaping 1x1-conv / linear
// spellings of the same matrix. Missing or surplus names are errors.
void fill_store(ParameterStore& store, std::map<std::string, Tensor> weights, const std::map<std::string, Shape>& shapes,
                const std::string& component) {
    for (const auto& [name, shape] : shapes) {
        auto it = weights.find(name);
        if (it == weights.end()) throw ConfigError(component + " weights lack '" + name + "'");
        Tensor t = std::move(it->second);
        weights.erase(it);
        if (t.shape() != shape) {
            if (t.numel() != shape_numel(shape)) {
                throw DimensionError(component + " weight '" + name + "' has shape " + shape_str(t.shape()) +
                                     ", expected " + shape_str(shape));
            }
            t.reshape(shape);
        }
        store.set_base(name, std::move(t));
    }
    if (!weights.empty()) {
        throw ConfigError(component + " weights hold unsupported parameter '" + weights.begin()->first + "'");
    }
}

template <class T>
void expect(const json& j, const char* key, const T& want, const std::string& component) {
    if (!j.contains(key) || j.at(key).is_null()) return;
    if (j.at(key).get<T>() != want) {
        throw ConfigError(component + " config '" + key + "' = " + j.at(key).dump() + " is not supported");
    }
}

void expect_null(const json& j, const char* key, const std::string& component) {
    if (j.contains(key) && !j.at(key).is_null()) {
        throw ConfigError(component + " config '" + key + "' = " + j.at(key).dump() + " is not supported");
    }
}

UNetConfig parse_unet_config(const json& j) {
    const std::string c = "unet";
    UNetConfig u;
    u.in_channels = j.value("in_channels", 4);
    u.out_channels = j.value("out_channels", 4);
    u.block_out_channels = j.at("block_out_channels").get<std::vector<std::int64_t>>();
    const auto n = u.block_out_channels.size();
    u.down_attention.clear();
    for (const auto& t : j.at("down_block_types")) {
        const auto s = t.get<std::string>();
        if (s != "CrossAttnDownBlock2D" && s != "DownBlock2D") throw ConfigError("unsupported down block " + s);
        u.down_attention.push_back(s == "CrossAttnDownBlock2D");
    }
    u.up_attention.clear();
    for (const auto& t : j.at("up_block_types")) {
        const auto s = t.get<std::string>();
        if (s != "CrossAttnUpBlock2D" && s != "UpBlock2D") throw ConfigError("unsupported up block " + s);
        u.up_attention.push_back(s == "CrossAttnUpBlock2D");
    }
    u.layers_per_block = j.value("layers_per_block", 2);
    u.mid_attention_layers = 1;
    // Older configs name the head count attention_head_dim.
    const json& heads = j.contains("num_attention_heads") && !j.at("num_attention_heads").is_null()
                            ? j.at("num_attention_heads")
                            : j.at("attention_head_dim");
    u.attention_heads = heads.is_array() ? heads.get<std::vector<int>>() : std::vector<int>(n, heads.get<int>());
    if (!j.at("cross_attention_dim").is_number_integer()) {
        throw ConfigError("per-block cross_attention_dim is not supported");
    }
    u.cross_attention_dim = j.at("cross_attention_dim").get<std::int64_t>();
    u.norm_num_groups = j.value("norm_num_groups", 32);
    u.norm_eps = j.value("norm_eps", 1e-5);
    u.use_linear_projection = j.value("use_linear_projection", false);

    if (j.contains("transformer_layers_per_block")) {
        const auto& t = j.at("transformer_layers_per_block");
        const bool ok = t.is_array() ? std::all_of(t.begin(), t.end(), [](const json& v) { return v == 1; }) : t == 1;
        if (!ok) throw ConfigError("unet: only one transformer layer per block is supported");
    }
    expect<std::string>(j, "mid_block_type", "UNetMidBlock2DCrossAttn", c);
    expect<bool>(j, "flip_sin_to_cos", true, c);
    expect<int>(j, "freq_shift", 0, c);
    expect<std::string>(j, "time_embedding_type", "positional", c);
    expect<std::string>(j, "act_fn", "silu", c);
    expect<bool>(j, "only_cross_attention", false, c);
    expect<bool>(j, "dual_cross_attention", false, c);
    expect<bool>(j, "center_input_sample", false, c);
    expect<std::string>(j, "resnet_time_scale_shift", "default", c);
    expect<int>(j, "conv_in_kernel", 3, c);
    expect<int>(j, "conv_out_kernel", 3, c);
    expect<int>(j, "downsample_padding", 1, c);
    expect<double>(j, "mid_block_scale_factor", 1.0, c);
    expect<double>(j, "resnet_out_scale_factor", 1.0, c);
    expect<std::string>(j, "attention_type", "default", c);
    for (const char* key : {"class_embed_type", "addition_embed_type", "time_cond_proj_dim", "encoder_hid_dim",
                            "num_class_embeds", "time_embedding_dim", "timestep_post_act"}) {
        expect_null(j, key, c);
    }
    return u;
}

NoiseSchedule parse_schedule(const json& j) {
    expect<std::string>(j, "prediction_type", "epsilon", "scheduler");
    expect_null(j, "trained_betas", "scheduler");
    expect<bool>(j, "rescale_betas_zero_snr", false, "scheduler");
    const int steps = j.value("num_train_timesteps", 1000);
    const double b0 = j.value("beta_start", 0.00085), b1 = j.value("beta_end", 0.012);
    const std::string kind = j.value("beta_schedule", "scaled_linear");
    if (kind == "scaled_linear") return NoiseSchedule::scaled_linear(steps, b0, b1);
    if (kind == "linear") return NoiseSchedule::linear(steps, b0, b1);
    throw ConfigError("scheduler: beta_schedule '" + kind + "' is not supported");
}

ClipTextConfig parse_text_config(const json& j) {
    ClipTextConfig t;
    t.hidden_size = j.value("hidden_size", t.hidden_size);
    t.num_hidden_layers = j.value("num_hidden_layers", t.num_hidden_layers);
    t.num_attention_heads = j.value("num_attention_heads", t.num_attention_heads);
    t.intermediate_size = j.value("intermediate_size", t.intermediate_size);
    t.max_position_embeddings = j.value("max_position_embeddings", t.max_position_embeddings);
    t.hidden_act = j.value("hidden_act", t.hidden_act);
    t.layer_norm_eps = j.value("layer_norm_eps", t.layer_norm_eps);
    if (t.hidden_act != "quick_gelu" && t.hidden_act != "gelu") {
        throw ConfigError("text encoder activation '" + t.hidden_act + "' is not supported");
    }
    return t;
}

KlAutoencoderConfig parse_vae_config(const json& j) {
    KlAutoencoderConfig v;
    v.block_out_channels = j.at("block_out_channels").get<std::vector<std::int64_t>>();
    v.layers_per_block = j.value("layers_per_block", 1);
    v.latent_channels = j.value("latent_channels", 4);
    v.norm_num_groups = j.value("norm_num_groups", 32);
    v.scaling_factor = j.value("scaling_factor", 0.18215);
    v.sample_size = j.value("sample_size", 512);
    if (j.contains("use_quant_conv") && !j.at("use_quant_conv").is_null()) v.use_quant_conv = j.at("use_quant_conv");
    if (j.contains("use_post_quant_conv") && !j.at("use_post_quant_conv").is_null()) {
        v.use_post_quant_conv = j.at("use_post_quant_conv");
    }
    v.mid_block_add_attention = j.value("mid_block_add_attention", true);
    expect<int>(j, "in_channels", 3, "vae");
    expect<int>(j, "out_channels", 3, "vae");
    expect<std::string>(j, "act_fn", "silu", "vae");
    expect_null(j, "shift_factor", "vae");
    expect_null(j, "latents_mean", "vae");
    for (const auto& t : j.at("down_block_types")) {
        if (t != "DownEncoderBlock2D") throw ConfigError("vae: unsupported down block " + t.dump());
    }
    for (const auto& t : j.at("up_block_types")) {
        if (t != "UpDecoderBlock2D") throw ConfigError("vae: unsupported up block " + t.dump());
    }
    return v;
}

}  // namespace

// ---- tokenizer -------------------------------------------------------------

ClipTokenizer::ClipTokenizer(std::map<std::string, std::int64_t> vocab,
                             std::vector<std::pair<std::string, std::string>> merges, int max_length,
                             std::string pad_token)
    : vocab_(std::move(vocab)), max_length_(max_length) {
    if (max_length_ < 2) throw ConfigError("tokenizer max_length must be at least 2");
    for (const auto& [tok, id] : vocab_) inverse_[id] = tok;
    for (std::size_t i = 0; i < merges.size(); ++i) ranks_.emplace(merges[i], static_cast<int>(i));
    bos_ = id_of(kBos);
    eos_ = id_of(kEos);
    pad_ = id_of(pad_token);
}

std::int64_t ClipTokenizer::id_of(const std::string& token) const {
    auto it = vocab_.find(token);
    if (it == vocab_.end()) throw ConfigError("tokenizer vocabulary lacks '" + token + "'");
    return it->second;
}

ClipTokenizer ClipTokenizer::load(const fs::path& dir) {
    const json vocab_json = read_json(dir / "vocab.json");
    std::map<std::string, std::int64_t> vocab;
    for (const auto& [tok, id] : vocab_json.items()) vocab[tok] = id.get<std::int64_t>();
    std::ifstream in(dir / "merges.txt");
    if (!in) throw CapabilityError("backbone file " + (dir / "merges.txt").string() + " is missing");
    std::vector<std::pair<std::string, std::string>> merges;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.rfind("#version", 0) == 0) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos) throw ParseError("bad merges.txt line '" + line + "'");
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    int max_length = 77;
    std::string pad = kEos;
    if (fs::exists(dir / "tokenizer_config.json")) {
        const json cfg = read_json(dir / "tokenizer_config.json");
        const auto ml = cfg.value("model_max_length", 77.0);
        if (ml > 0 && ml < 1e6) max_length = static_cast<int>(ml);
        if (cfg.contains("pad_token")) {
            const auto& p = cfg.at("pad_token");
            if (p.is_string()) pad = p.get<std::string>();
            if (p.is_object()) pad = p.at("content").get<std::string>();
        }
    }
    return ClipTokenizer(std::move(vocab), std::move(merges), max_length, pad);
}

std::vector<std::string> ClipTokenizer::pretokenize(std::string_view text) const {
    // Collapse whitespace and lower-case.
    std::string s;
    bool space = false;
    for (char ch : text) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isspace(u)) {
            space = !s.empty();
            continue;
        }
        if (space) s.push_back(' ');
        space = false;
        s.push_back(static_cast<char>(std::tolower(u)));
    }

    static const char* kContractions[] = {"'re", "'ve", "'ll", "'s", "'t", "'m", "'d"};
    std::vector<std::string> out;
    std::size_t i = 0;
    const auto n = s.size();
    auto at = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
    while (i < n) {
        if (std::isspace(at(i))) {
            ++i;
            continue;
        }
        bool matched = false;
        for (const char* special : {kBos, kEos}) {
            const std::string_view sp(special);
            if (s.compare(i, sp.size(), sp) == 0) {
                out.emplace_back(sp);
                i += sp.size();
                matched = true;
                break;
            }
        }
        if (matched) continue;
        if (s[i] == '\'') {
            for (const char* c : kContractions) {
                const std::string_view cv(c);
                if (s.compare(i, cv.size(), cv) == 0) {
                    out.emplace_back(cv);
                    i += cv.size();
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
        }
        std::size_t j = i + 1;
        if (is_letter(at(i))) {
            while (j < n && is_letter(at(j))) ++j;
        } else if (!std::isdigit(at(i))) {
            while (j < n && !std::isspace(at(j)) && !is_letter(at(j)) && !std::isdigit(at(j))) ++j;
        }
        out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

std::vector<std::string> ClipTokenizer::bpe(const std::string& word) const {
    const auto& table = byte_table();
    std::vector<std::string> sym;
    for (unsigned char b : word) sym.push_back(table.encode[b]);
    if (sym.empty()) return sym;
    sym.back() += kEndOfWord;
    while (sym.size() > 1) {
        int best = INT_MAX;
        std::size_t at = 0;
        for (std::size_t k = 0; k + 1 < sym.size(); ++k) {
            auto it = ranks_.find({sym[k], sym[k + 1]});
            if (it != ranks_.end() && it->second < best) {
                best = it->second;
                at = k;
            }
        }
        if (best == INT_MAX) break;
        const std::string a = sym[at], b = sym[at + 1];
        std::vector<std::string> merged;
        for (std::size_t k = 0; k < sym.size();) {
            if (k + 1 < sym.size() && sym[k] == a && sym[k + 1] == b) {
                merged.push_back(a + b);
                k += 2;
            } else {
                merged.push_back(sym[k]);
                ++k;
            }
        }
        sym = std::move(merged);
    }
    return sym;
}

std::string ClipTokenizer::piece_text(const std::string& token) const {
    if (token == kBos || token == kEos) return token;
    std::string t = token;
    const std::string eow = kEndOfWord;
    if (t.size() >= eow.size() && t.compare(t.size() - eow.size(), eow.size(), eow) == 0) t.resize(t.size() - eow.size());
    const auto& table = byte_table();
    std::string out;
    for (const auto& ch : utf8_chars(t)) {
        auto it = table.decode.find(ch);
        if (it != table.decode.end()) out.push_back(static_cast<char>(it->second));
    }
    return out;
}

Tokenized ClipTokenizer::tokenize(std::string_view text) const {
    Tokenized out;
    out.ids.push_back(bos_);
    out.pieces.emplace_back(kBos);
    const auto room = static_cast<std::size_t>(max_length_ - 2);
    for (const auto& word : pretokenize(text)) {
        std::vector<std::string> toks;
        if (word == kBos || word == kEos) {
            toks.push_back(word);
        } else {
            toks = bpe(word);
        }
        for (const auto& t : toks) {
            if (out.ids.size() - 1 >= room) break;
            auto it = vocab_.find(t);
            out.ids.push_back(it == vocab_.end() ? eos_ : it->second);
            out.pieces.push_back(piece_text(t));
        }
    }
    out.ids.push_back(eos_);
    out.pieces.emplace_back(kEos);
    const std::string pad_piece = piece_text(inverse_.at(pad_));
    while (out.ids.size() < static_cast<std::size_t>(max_length_)) {
        out.ids.push_back(pad_);
        out.pieces.push_back(pad_piece);
    }
    return out;
}

// ---- text encoder ----------------------------------------------------------

ClipTextEncoder::ClipTextEncoder(ClipTokenizer tokenizer, ClipTextConfig config)
    : tokenizer_(std::move(tokenizer)), config_(std::move(config)) {
    if (config_.hidden_size % config_.num_attention_heads != 0) {
        throw ConfigError("text hidden size is not divisible by the head count");
    }
    if (tokenizer_.max_length() > config_.max_position_embeddings) {
        throw ConfigError("tokenizer max_length exceeds the text encoder's position table");
    }
}

std::string ClipTextEncoder::normalize_piece(std::string_view token) const {
    std::string out;
    for (char c : token) {
        if (!std::isspace(static_cast<unsigned char>(c))) {
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    return out;
}

std::map<std::string, Shape> ClipTextEncoder::parameter_shapes() const {
    const auto d = config_.hidden_size, f = config_.intermediate_size;
    std::map<std::string, Shape> s;
    s["embeddings.token_embedding.weight"] = {tokenizer_.vocab_size(), d};
    s["embeddings.position_embedding.weight"] = {config_.max_position_embeddings, d};
    for (int l = 0; l < config_.num_hidden_layers; ++l) {
        const std::string p = "encoder.layers." + std::to_string(l);
        for (const char* n : {".layer_norm1", ".layer_norm2"}) {
            s[p + n + ".weight"] = {d};
            s[p + n + ".bias"] = {d};
        }
        for (const char* n : {".self_attn.q_proj", ".self_attn.k_proj", ".self_attn.v_proj", ".self_attn.out_proj"}) {
            s[p + n + ".weight"] = {d, d};
            s[p + n + ".bias"] = {d};
        }
        s[p + ".mlp.fc1.weight"] = {f, d};
        s[p + ".mlp.fc1.bias"] = {f};
        s[p + ".mlp.fc2.weight"] = {d, f};
        s[p + ".mlp.fc2.bias"] = {d};
    }
    s["final_layer_norm.weight"] = {d};
    s["final_layer_norm.bias"] = {d};
    return s;
}

ag::Var ClipTextEncoder::encode(const ParameterStore& store, const ag::Var& rows) const {
    const auto& v = rows->value;
    if (v.rank() != 2 || v.dim(1) != config_.hidden_size || v.dim(0) > config_.max_position_embeddings) {
        throw DimensionError("CLIP text encoder expects [L <= " + std::to_string(config_.max_position_embeddings) +
                             ", " + std::to_string(config_.hidden_size) + "] rows, got " + shape_str(v.shape()));
    }
    std::vector<std::int64_t> positions(static_cast<std::size_t>(v.dim(0)));
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(i);
    auto P = [&](const std::string& n) { return store.var(n); };
    auto lin = [&](const ag::Var& x, const std::string& p) { return ag::linear(x, P(p + ".weight"), P(p + ".bias")); };
    auto ln = [&](const ag::Var& x, const std::string& p) {
        return ag::layer_norm(x, P(p + ".weight"), P(p + ".bias"), config_.layer_norm_eps);
    };
    ag::Var x = ag::add(rows, ag::gather_rows(P("embeddings.position_embedding.weight"), positions));
    for (int l = 0; l < config_.num_hidden_layers; ++l) {
        const std::string p = "encoder.layers." + std::to_string(l);
        ag::Var h = ln(x, p + ".layer_norm1");
        ag::Var a = ag::attention(lin(h, p + ".self_attn.q_proj"), lin(h, p + ".self_attn.k_proj"),
                                  lin(h, p + ".self_attn.v_proj"), config_.num_attention_heads, true);
        x = ag::add(x, lin(a, p + ".self_attn.out_proj"));
        h = lin(ln(x, p + ".layer_norm2"), p + ".mlp.fc1");
        h = config_.hidden_act == "quick_gelu" ? ag::quick_gelu(h) : ag::gelu(h);
        x = ag::add(x, lin(h, p + ".mlp.fc2"));
    }
    return ln(x, "final_layer_norm");
}

// ---- autoencoder -----------------------------------------------------------

KlAutoencoder::KlAutoencoder(KlAutoencoderConfig config) : config_(std::move(config)) {
    if (config_.block_out_channels.empty()) throw ConfigError("vae needs at least one block");
    for (auto ch : config_.block_out_channels) {
        if (ch % config_.norm_num_groups != 0) throw ConfigError("vae channels not divisible by norm groups");
    }
    if (config_.sample_size % downscale() != 0) throw ConfigError("vae sample size not divisible by its downscale");
}

int KlAutoencoder::downscale() const { return 1 << (config_.block_out_channels.size() - 1); }

std::map<std::string, Shape> KlAutoencoder::parameter_shapes() const {
    std::map<std::string, Shape> s;
    auto conv = [&](const std::string& p, std::int64_t in, std::int64_t out, std::int64_t k) {
        s[p + ".weight"] = {out, in, k, k};
        s[p + ".bias"] = {out};
    };
    auto norm = [&](const std::string& p, std::int64_t ch) {
        s[p + ".weight"] = {ch};
        s[p + ".bias"] = {ch};
    };
    auto resnet = [&](const std::string& p, std::int64_t in, std::int64_t out) {
        norm(p + ".norm1", in);
        conv(p + ".conv1", in, out, 3);
        norm(p + ".norm2", out);
        conv(p + ".conv2", out, out, 3);
        if (in != out) conv(p + ".conv_shortcut", in, out, 1);
    };
    auto mid = [&](const std::string& p, std::int64_t ch) {
        resnet(p + ".resnets.0", ch, ch);
        if (config_.mid_block_add_attention) {
            norm(p + ".attentions.0.group_norm", ch);
            for (const char* n : {".to_q", ".to_k", ".to_v", ".to_out.0"}) {
                s[p + ".attentions.0" + n + ".weight"] = {ch, ch};
                s[p + ".attentions.0" + n + ".bias"] = {ch};
            }
        }
        resnet(p + ".resnets.1", ch, ch);
    };
    const auto& boc = config_.block_out_channels;
    const auto n = boc.size();
    const auto lat = config_.latent_channels;

    conv("encoder.conv_in", 3, boc[0], 3);
    std::int64_t out = boc[0];
    for (std::size_t i = 0; i < n; ++i) {
        const auto in = out;
        out = boc[i];
        for (int j = 0; j < config_.layers_per_block; ++j) {
            resnet("encoder.down_blocks." + std::to_string(i) + ".resnets." + std::to_string(j), j == 0 ? in : out,
                   out);
        }
        if (i + 1 != n) conv("encoder.down_blocks." + std::to_string(i) + ".downsamplers.0.conv", out, out, 3);
    }
    mid("encoder.mid_block", boc.back());
    norm("encoder.conv_norm_out", boc.back());
    conv("encoder.conv_out", boc.back(), 2 * lat, 3);
    if (config_.use_quant_conv) conv("quant_conv", 2 * lat, 2 * lat, 1);
    if (config_.use_post_quant_conv) conv("post_quant_conv", lat, lat, 1);

    conv("decoder.conv_in", lat, boc.back(), 3);
    mid("decoder.mid_block", boc.back());
    out = boc.back();
    for (std::size_t i = 0; i < n; ++i) {
        const auto prev = out;
        out = boc[n - 1 - i];
        for (int j = 0; j <= config_.layers_per_block; ++j) {
            resnet("decoder.up_blocks." + std::to_string(i) + ".resnets." + std::to_string(j), j == 0 ? prev : out,
                   out);
        }
        if (i + 1 != n) conv("decoder.up_blocks." + std::to_string(i) + ".upsamplers.0.conv", out, out, 3);
    }
    norm("decoder.conv_norm_out", boc[0]);
    conv("decoder.conv_out", boc[0], 3, 3);
    return s;
}

namespace {

struct VaeOps {
    const ParameterStore& store;
    int groups;

    ag::Var P(const std::string& n) const { return store.var(n); }
    ag::Var conv(const ag::Var& x, const std::string& p, int stride, ag::Padding pad) const {
        return ag::conv2d(x, P(p + ".weight"), P(p + ".bias"), stride, pad);
    }
    ag::Var gn(const ag::Var& x, const std::string& p) const {
        return ag::group_norm(x, groups, P(p + ".weight"), P(p + ".bias"), kVaeNormEps);
    }
    ag::Var resnet(const ag::Var& x, const std::string& p) const {
        ag::Var h = conv(ag::silu(gn(x, p + ".norm1")), p + ".conv1", 1, ag::Padding::same(1));
        h = conv(ag::silu(gn(h, p + ".norm2")), p + ".conv2", 1, ag::Padding::same(1));
        ag::Var skip = store.contains(p + ".conv_shortcut.weight") ? conv(x, p + ".conv_shortcut", 1, {}) : x;
        return ag::add(skip, h);
    }
    ag::Var mid(const ag::Var& x, const std::string& p, bool attention) const {
        ag::Var h = resnet(x, p + ".resnets.0");
        if (attention) {
            const std::string a = p + ".attentions.0";
            const auto hh = h->value.dim(1), ww = h->value.dim(2);
            ag::Var t = ag::chw_to_tokens(gn(h, a + ".group_norm"));
            auto lin = [&](const std::string& n) { return ag::linear(t, P(a + n + ".weight"), P(a + n + ".bias")); };
            ag::Var o = ag::attention(lin(".to_q"), lin(".to_k"), lin(".to_v"), 1, false);
            o = ag::linear(o, P(a + ".to_out.0.weight"), P(a + ".to_out.0.bias"));
            h = ag::add(ag::tokens_to_chw(o, hh, ww), h);
        }
        return resnet(h, p + ".resnets.1");
    }
};

}  // namespace

Tensor KlAutoencoder::encode(const ParameterStore& store, const Image& image) const {
    if (image.channels() != 3 || image.width() != config_.sample_size || image.height() != config_.sample_size) {
        throw DimensionError("vae expects a " + std::to_string(config_.sample_size) + "x" +
                             std::to_string(config_.sample_size) + " RGB image");
    }
    const VaeOps ops{store, config_.norm_num_groups};
    Tensor x = image.pixels;
    for (auto& v : x.values()) v = 2.0 * v - 1.0;
    ag::Var h = ops.conv(ag::constant(std::move(x)), "encoder.conv_in", 1, ag::Padding::same(1));
    const auto n = config_.block_out_channels.size();
    for (std::size_t i = 0; i < n; ++i) {
        const std::string p = "encoder.down_blocks." + std::to_string(i);
        for (int j = 0; j < config_.layers_per_block; ++j) h = ops.resnet(h, p + ".resnets." + std::to_string(j));
        if (i + 1 != n) h = ops.conv(h, p + ".downsamplers.0.conv", 2, ag::Padding{0, 0, 1, 1});
    }
    h = ops.mid(h, "encoder.mid_block", config_.mid_block_add_attention);
    h = ops.conv(ag::silu(ops.gn(h, "encoder.conv_norm_out")), "encoder.conv_out", 1, ag::Padding::same(1));
    if (config_.use_quant_conv) h = ops.conv(h, "quant_conv", 1, {});
    const auto lat = config_.latent_channels;
    const auto plane = h->value.dim(1) * h->value.dim(2);
    Tensor mean({lat, h->value.dim(1), h->value.dim(2)});
    for (std::int64_t i = 0; i < mean.numel(); ++i) mean[i] = h->value[i] * config_.scaling_factor;
    (void)plane;
    return mean;
}

Image KlAutoencoder::decode(const ParameterStore& store, const Tensor& latent) const {
    const auto s = config_.sample_size / downscale();
    if (latent.shape() != Shape{config_.latent_channels, s, s}) {
        throw DimensionError("vae expects latent [" + std::to_string(config_.latent_channels) + ", " +
                             std::to_string(s) + ", " + std::to_string(s) + "], got " + shape_str(latent.shape()));
    }
    if (!latent.all_finite()) throw NumericError("latent contains non-finite values");
    const VaeOps ops{store, config_.norm_num_groups};
    Tensor z = latent;
    for (auto& v : z.values()) v /= config_.scaling_factor;
    ag::Var h = ag::constant(std::move(z));
    if (config_.use_post_quant_conv) h = ops.conv(h, "post_quant_conv", 1, {});
    h = ops.conv(h, "decoder.conv_in", 1, ag::Padding::same(1));
    h = ops.mid(h, "decoder.mid_block", config_.mid_block_add_attention);
    const auto n = config_.block_out_channels.size();
    for (std::size_t i = 0; i < n; ++i) {
        const std::string p = "decoder.up_blocks." + std::to_string(i);
        for (int j = 0; j <= config_.layers_per_block; ++j) h = ops.resnet(h, p + ".resnets." + std::to_string(j));
        if (i + 1 != n) h = ops.conv(ag::upsample_nearest2x(h), p + ".upsamplers.0.conv", 1, ag::Padding::same(1));
    }
    h = ops.conv(ag::silu(ops.gn(h, "decoder.conv_norm_out")), "decoder.conv_out", 1, ag::Padding::same(1));
    Image out(h->value);
    for (auto& v : out.pixels.values()) v = std::clamp(v * 0.5 + 0.5, 0.0, 1.0);
    return out;
}

// ---- loader ----------------------------------------------------------------

Backbone load_diffusers_backbone(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw CapabilityError("backbone directory " + dir.string() +
                              " does not exist; set SIGSTYLE_BACKBONE_DIR to a diffusers pipeline or use the toy backbone");
    }
    Backbone::Parts parts;
    parts.variant = BackboneVariant::real_pretrained;
    parts.model_id = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    if (fs::exists(dir / "model_index.json")) {
        parts.model_id = read_json(dir / "model_index.json").value("_name_or_path", parts.model_id);
    }
    log().info("loading diffusers backbone '{}' from {}", parts.model_id, dir.string());

    const json unet_cfg = read_json(dir / "unet" / "config.json");
    parts.unet_config = parse_unet_config(unet_cfg);
    parts.latent_size = unet_cfg.at("sample_size").get<std::int64_t>();
    parts.schedule = parse_schedule(read_json(dir / "scheduler" / "scheduler_config.json"));
    {
        UNet shape_probe(parts.unet_config);
        fill_store(parts.unet_params, read_component_weights(dir / "unet", "diffusion_pytorch_model"),
                   shape_probe.parameter_shapes(), "unet");
    }

    auto text = std::make_unique<ClipTextEncoder>(ClipTokenizer::load(dir / "tokenizer"),
                                                  parse_text_config(read_json(dir / "text_encoder" / "config.json")));
    std::map<std::string, Tensor> text_weights;
    for (auto& [k, v] : read_component_weights(dir / "text_encoder", "model")) {
        std::string name = k.rfind("text_model.", 0) == 0 ? k.substr(11) : k;
        if (name == "embeddings.position_ids") continue;  // index buffer, not a weight
        text_weights[name] = std::move(v);
    }
    fill_store(parts.text_params, std::move(text_weights), text->parameter_shapes(), "text_encoder");
    parts.text_encoder = std::move(text);

    auto vae = std::make_unique<KlAutoencoder>(parse_vae_config(read_json(dir / "vae" / "config.json")));
    std::map<std::string, Tensor> vae_weights;
    static const std::pair<const char*, const char*> kLegacy[] = {
        {".attentions.0.query.", ".attentions.0.to_q."},
        {".attentions.0.key.", ".attentions.0.to_k."},
        {".attentions.0.value.", ".attentions.0.to_v."},
        {".attentions.0.proj_attn.", ".attentions.0.to_out.0."}};
    for (auto& [k, v] : read_component_weights(dir / "vae", "diffusion_pytorch_model")) {
        std::string name = k;
        for (const auto& [from, to] : kLegacy) {
            if (auto pos = name.find(from); pos != std::string::npos) name.replace(pos, std::string(from).size(), to);
        }
        vae_weights[name] = std::move(v);
    }
    fill_store(parts.vae_params, std::move(vae_weights), vae->parameter_shapes(), "vae");
    parts.autoencoder = std::move(vae);
    return Backbone(std::move(parts));
}

std::optional<fs::path> backbone_dir_from_env() {
    const char* v = std::getenv("SIGSTYLE_BACKBONE_DIR");
    if (!v || !*v) return std::nullopt;
    return fs::path(v);
}

Backbone load_backbone(const std::string& spec) {
    if (spec.empty() || spec == "toy") return make_toy_backbone();
    return load_diffusers_backbone(spec);
}

}  // namespace sigstyle
