#include "sigstyle/backbone/unet.hpp"

#include <cmath>

#include "sigstyle/errors.hpp"
#include "sigstyle/hash.hpp"

namespace sigstyle {

namespace {

constexpr double kTransformerNormEps = 1e-6;
constexpr double kLayerNormEps = 1e-5;

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

void UNetConfig::validate() const {
    const auto n = block_out_channels.size();
    if (n == 0) throw ConfigError("UNet needs at least one level");
    if (down_attention.size() != n || up_attention.size() != n || attention_heads.size() != n) {
        throw ConfigError("UNet per-level lists must all have " + std::to_string(n) + " entries");
    }
    if (layers_per_block < 1 || mid_attention_layers < 0) throw ConfigError("UNet layer counts out of range");
    for (std::size_t i = 0; i < n; ++i) {
        if (block_out_channels[i] % norm_num_groups != 0) throw ConfigError("channels not divisible by norm groups");
        if (attention_heads[i] <= 0 || block_out_channels[i] % attention_heads[i] != 0) {
            throw ConfigError("channels not divisible by attention heads");
        }
    }
}

Tensor timestep_features(int timestep, std::int64_t dim) {
    const auto half = dim / 2;
    Tensor out({dim});
    for (std::int64_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double arg = static_cast<double>(timestep) * freq;
        out[i] = std::cos(arg);
        out[half + i] = std::sin(arg);
    }
    return out;
}

Region UNet::region_of_parameter(const std::string& name) {
    if (starts_with(name, "down_blocks.") || starts_with(name, "conv_in.")) return Region::encoder;
    if (starts_with(name, "up_blocks.") || starts_with(name, "conv_norm_out.") || starts_with(name, "conv_out.")) {
        return Region::decoder;
    }
    return Region::middle;
}

UNet::UNet(UNetConfig config) : config_(std::move(config)) {
    config_.validate();
    build_plan();
}

const std::string& UNet::parameter_name(const AttentionAddress& addr) const {
    auto it = names_.find(addr);
    if (it == names_.end()) throw UnknownAddressError("backbone has no attention projection " + addr.str());
    return it->second;
}

std::vector<LayerAddress> UNet::self_attention_layers() const {
    std::vector<LayerAddress> out;
    for (const auto& a : inventory_) {
        if (a.kind == AttnKind::self_attn && a.projection == Projection::query) out.push_back(a.layer());
    }
    return out;
}

std::map<std::string, Shape> UNet::parameter_shapes() const { return shapes_; }

void UNet::build_plan() {
    const auto& c = config_;
    const auto temb = c.time_embed_dim();
    auto add = [&](const std::string& name, Shape s) { shapes_[name] = std::move(s); };
    auto conv = [&](const std::string& p, std::int64_t in, std::int64_t out, std::int64_t k) {
        add(p + ".weight", {out, in, k, k});
        add(p + ".bias", {out});
    };
    auto norm = [&](const std::string& p, std::int64_t ch) {
        add(p + ".weight", {ch});
        add(p + ".bias", {ch});
    };
    auto linear = [&](const std::string& p, std::int64_t in, std::int64_t out, bool bias) {
        add(p + ".weight", {out, in});
        if (bias) add(p + ".bias", {out});
    };
    auto resnet = [&](const std::string& p, std::int64_t in, std::int64_t out) {
        norm(p + ".norm1", in);
        conv(p + ".conv1", in, out, 3);
        linear(p + ".time_emb_proj", temb, out, true);
        norm(p + ".norm2", out);
        conv(p + ".conv2", out, out, 3);
        if (in != out) conv(p + ".conv_shortcut", in, out, 1);
    };
    int block_counter[3] = {0, 0, 0};
    auto transformer = [&](const std::string& p, std::int64_t ch, Region region) {
        norm(p + ".norm", ch);
        if (c.use_linear_projection) {
            linear(p + ".proj_in", ch, ch, true);
            linear(p + ".proj_out", ch, ch, true);
        } else {
            conv(p + ".proj_in", ch, ch, 1);
            conv(p + ".proj_out", ch, ch, 1);
        }
        const std::string b = p + ".transformer_blocks.0";
        norm(b + ".norm1", ch);
        norm(b + ".norm2", ch);
        norm(b + ".norm3", ch);
        const int idx = block_counter[static_cast<int>(region)]++;
        for (AttnKind kind : {AttnKind::self_attn, AttnKind::cross_attn}) {
            const std::string a = b + (kind == AttnKind::self_attn ? ".attn1" : ".attn2");
            const std::int64_t kv_in = kind == AttnKind::self_attn ? ch : c.cross_attention_dim;
            linear(a + ".to_q", ch, ch, false);
            linear(a + ".to_k", kv_in, ch, false);
            linear(a + ".to_v", kv_in, ch, false);
            linear(a + ".to_out.0", ch, ch, true);
            const std::pair<Projection, std::string> projs[] = {{Projection::query, ".to_q"},
                                                                {Projection::key, ".to_k"},
                                                                {Projection::value, ".to_v"},
                                                                {Projection::output, ".to_out.0"}};
            for (const auto& [proj, suffix] : projs) {
                AttentionAddress addr{region, idx, kind, proj, ch, 0};
                addr.dim_c = (proj == Projection::key || proj == Projection::value) ? kv_in : ch;
                inventory_.push_back(addr);
                names_[addr] = a + suffix + ".weight";
            }
        }
        linear(b + ".ff.net.0.proj", ch, ch * 8, true);
        linear(b + ".ff.net.2", ch * 4, ch, true);
    };

    const auto& boc = c.block_out_channels;
    const int n = c.levels();
    linear("time_embedding.linear_1", boc[0], temb, true);
    linear("time_embedding.linear_2", temb, temb, true);
    conv("conv_in", c.in_channels, boc[0], 3);

    std::int64_t out_ch = boc[0];
    for (int i = 0; i < n; ++i) {
        const auto in_ch = out_ch;
        out_ch = boc[static_cast<std::size_t>(i)];
        for (int j = 0; j < c.layers_per_block; ++j) {
            const std::string p = "down_blocks." + std::to_string(i);
            resnet(p + ".resnets." + std::to_string(j), j == 0 ? in_ch : out_ch, out_ch);
            if (c.down_attention[static_cast<std::size_t>(i)]) {
                transformer(p + ".attentions." + std::to_string(j), out_ch, Region::encoder);
            }
        }
        if (i != n - 1) conv("down_blocks." + std::to_string(i) + ".downsamplers.0.conv", out_ch, out_ch, 3);
    }

    const auto mid_ch = boc.back();
    resnet("mid_block.resnets.0", mid_ch, mid_ch);
    for (int l = 0; l < c.mid_attention_layers; ++l) {
        transformer("mid_block.attentions." + std::to_string(l), mid_ch, Region::middle);
        resnet("mid_block.resnets." + std::to_string(l + 1), mid_ch, mid_ch);
    }

    std::vector<std::int64_t> rev(boc.rbegin(), boc.rend());
    out_ch = rev[0];
    for (int i = 0; i < n; ++i) {
        const auto prev_out = out_ch;
        out_ch = rev[static_cast<std::size_t>(i)];
        const auto in_ch = rev[static_cast<std::size_t>(std::min(i + 1, n - 1))];
        const std::string p = "up_blocks." + std::to_string(i);
        for (int j = 0; j <= c.layers_per_block; ++j) {
            const auto skip = j == c.layers_per_block ? in_ch : out_ch;
            const auto res_in = j == 0 ? prev_out : out_ch;
            resnet(p + ".resnets." + std::to_string(j), res_in + skip, out_ch);
            if (c.up_attention[static_cast<std::size_t>(i)]) {
                transformer(p + ".attentions." + std::to_string(j), out_ch, Region::decoder);
            }
        }
        if (i != n - 1) conv(p + ".upsamplers.0.conv", out_ch, out_ch, 3);
    }
    norm("conv_norm_out", boc[0]);
    conv("conv_out", boc[0], c.out_channels, 3);
}

void UNet::initialize(ParameterStore& store, std::uint64_t seed, double output_gain) const {
    for (const auto& [name, shape] : shapes_) {
        Rng rng(derive_seed(seed, fnv1a64(name)));
        Tensor t(shape);
        const bool is_weight = name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
        if (is_weight && shape.size() == 1) {
            for (auto& v : t.values()) v = 1.0 + 0.05 * rng.normal();
        } else if (is_weight) {
            std::int64_t fan_in = 1;
            for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
            double gain = 1.0;
            if (starts_with(name, "conv_out.")) gain = output_gain;
            t = rng.normal_tensor(shape, gain / std::sqrt(static_cast<double>(fan_in)));
        } else {
            t = rng.normal_tensor(shape, 0.02);
        }
        store.set_base(name, std::move(t));
    }
}

ag::Var UNet::forward(const ParameterStore& store, const ag::Var& latent, int timestep, const ag::Var& context,
                      const UNetForwardOptions& options) const {
    const auto& c = config_;
    const auto& x_shape = latent->value.shape();
    if (x_shape.size() != 3 || x_shape[0] != c.in_channels) {
        throw DimensionError("UNet input must be [" + std::to_string(c.in_channels) + ", H, W], got " +
                             shape_str(x_shape));
    }
    const std::int64_t factor = std::int64_t{1} << (c.levels() - 1);
    if (x_shape[1] % factor != 0 || x_shape[2] % factor != 0) {
        throw DimensionError("latent spatial size must be divisible by " + std::to_string(factor));
    }
    if (context->value.rank() != 2 || context->value.dim(1) != c.cross_attention_dim) {
        throw DimensionError("text context must be [L, " + std::to_string(c.cross_attention_dim) + "], got " +
                             shape_str(context->value.shape()));
    }

    auto P = [&](const std::string& name) -> ag::Var {
        if (options.overrides) {
            if (auto it = options.overrides->find(name); it != options.overrides->end()) return it->second;
        }
        return store.var(name);
    };
    auto has = [&](const std::string& name) { return store.contains(name); };
    auto offset_of = [&](const std::string& name) -> const ag::Var* {
        if (options.offsets) {
            if (auto it = options.offsets->find(name); it != options.offsets->end()) return &it->second;
        }
        return store.offset_var(name);
    };
    auto lin = [&](const ag::Var& x, const std::string& p, bool bias) {
        const std::string wname = p + ".weight";
        ag::Var y = ag::linear(x, P(wname), bias ? P(p + ".bias") : nullptr);
        if (const ag::Var* d = offset_of(wname)) y = ag::add(y, ag::linear(x, *d, nullptr));
        return y;
    };
    auto conv = [&](const ag::Var& x, const std::string& p, int stride, int pad) {
        return ag::conv2d(x, P(p + ".weight"), P(p + ".bias"), stride, ag::Padding::same(pad));
    };
    auto gn = [&](const ag::Var& x, const std::string& p, double eps) {
        return ag::group_norm(x, c.norm_num_groups, P(p + ".weight"), P(p + ".bias"), eps);
    };

    const ag::Var temb_in = ag::constant(timestep_features(timestep, c.block_out_channels.front()).reshaped(
        {1, c.block_out_channels.front()}));
    ag::Var emb = lin(ag::silu(lin(temb_in, "time_embedding.linear_1", true)), "time_embedding.linear_2", true);
    const ag::Var emb_act = ag::silu(emb);

    auto resnet = [&](const ag::Var& x, const std::string& p) {
        ag::Var h = conv(ag::silu(gn(x, p + ".norm1", c.norm_eps)), p + ".conv1", 1, 1);
        ag::Var t = lin(emb_act, p + ".time_emb_proj", true);
        h = ag::add_channel(h, ag::reshape(t, {t->value.numel()}));
        h = conv(ag::silu(gn(h, p + ".norm2", c.norm_eps)), p + ".conv2", 1, 1);
        ag::Var skip = has(p + ".conv_shortcut.weight") ? conv(x, p + ".conv_shortcut", 1, 0) : x;
        return ag::add(skip, h);
    };

    int block_counter[3] = {0, 0, 0};
    auto attn = [&](const ag::Var& x, const ag::Var& kv, const std::string& p, int heads, const LayerAddress& layer) {
        ag::Var q = lin(x, p + ".to_q", false);
        ag::Var k = lin(kv, p + ".to_k", false);
        ag::Var v = lin(kv, p + ".to_v", false);
        ag::Var o;
        if (layer.kind == AttnKind::self_attn && options.hooks) {
            ag::ProbsHook hook = [&](const Tensor& probs) {
                return options.hooks->on_self_attention(options.hook_context, layer, probs);
            };
            o = ag::attention(q, k, v, heads, false, &hook);
        } else {
            o = ag::attention(q, k, v, heads, false, nullptr);
        }
        return lin(o, p + ".to_out.0", true);
    };

    auto transformer = [&](const ag::Var& x, const std::string& p, int heads, Region region) {
        const auto ch = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
        const int idx = block_counter[static_cast<int>(region)]++;
        ag::Var hs = gn(x, p + ".norm", kTransformerNormEps);
        ag::Var tokens;
        if (c.use_linear_projection) {
            tokens = lin(ag::chw_to_tokens(hs), p + ".proj_in", true);
        } else {
            tokens = ag::chw_to_tokens(conv(hs, p + ".proj_in", 1, 0));
        }
        const std::string b = p + ".transformer_blocks.0";
        auto ln = [&](const ag::Var& t, const std::string& n) {
            return ag::layer_norm(t, P(n + ".weight"), P(n + ".bias"), kLayerNormEps);
        };
        ag::Var n1 = ln(tokens, b + ".norm1");
        tokens = ag::add(attn(n1, n1, b + ".attn1", heads, {region, idx, AttnKind::self_attn}), tokens);
        ag::Var n2 = ln(tokens, b + ".norm2");
        tokens = ag::add(attn(n2, context, b + ".attn2", heads, {region, idx, AttnKind::cross_attn}), tokens);
        ag::Var n3 = ln(tokens, b + ".norm3");
        ag::Var proj = lin(n3, b + ".ff.net.0.proj", true);
        const auto inner = proj->value.dim(1) / 2;
        ag::Var ff = ag::mul(ag::slice_cols(proj, 0, inner), ag::gelu(ag::slice_cols(proj, inner, inner)));
        tokens = ag::add(lin(ff, b + ".ff.net.2", true), tokens);
        ag::Var out;
        if (c.use_linear_projection) {
            out = ag::tokens_to_chw(lin(tokens, p + ".proj_out", true), h, w);
        } else {
            out = conv(ag::tokens_to_chw(tokens, h, w), p + ".proj_out", 1, 0);
        }
        (void)ch;
        return ag::add(out, x);
    };

    const int n = c.levels();
    ag::Var h = conv(latent, "conv_in", 1, 1);
    std::vector<ag::Var> skips{h};
    for (int i = 0; i < n; ++i) {
        const std::string p = "down_blocks." + std::to_string(i);
        for (int j = 0; j < c.layers_per_block; ++j) {
            h = resnet(h, p + ".resnets." + std::to_string(j));
            if (c.down_attention[static_cast<std::size_t>(i)]) {
                h = transformer(h, p + ".attentions." + std::to_string(j), c.attention_heads[static_cast<std::size_t>(i)],
                                Region::encoder);
            }
            skips.push_back(h);
        }
        if (i != n - 1) {
            h = conv(h, p + ".downsamplers.0.conv", 2, 1);
            skips.push_back(h);
        }
    }

    h = resnet(h, "mid_block.resnets.0");
    for (int l = 0; l < c.mid_attention_layers; ++l) {
        h = transformer(h, "mid_block.attentions." + std::to_string(l), c.attention_heads.back(), Region::middle);
        h = resnet(h, "mid_block.resnets." + std::to_string(l + 1));
    }

    for (int i = 0; i < n; ++i) {
        const std::string p = "up_blocks." + std::to_string(i);
        const auto level = static_cast<std::size_t>(n - 1 - i);
        for (int j = 0; j <= c.layers_per_block; ++j) {
            ag::Var skip = skips.back();
            skips.pop_back();
            h = resnet(ag::concat_channels(h, skip), p + ".resnets." + std::to_string(j));
            if (c.up_attention[static_cast<std::size_t>(i)]) {
                h = transformer(h, p + ".attentions." + std::to_string(j), c.attention_heads[level], Region::decoder);
            }
        }
        if (i != n - 1) h = conv(ag::upsample_nearest2x(h), p + ".upsamplers.0.conv", 1, 1);
    }

    h = ag::silu(gn(h, "conv_norm_out", c.norm_eps));
    return conv(h, "conv_out", 1, 1);
}

}  // namespace sigstyle
