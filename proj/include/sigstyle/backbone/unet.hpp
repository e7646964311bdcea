#pragma once

#include <map>
#include <string>
#include <vector>

#include "sigstyle/autograd.hpp"
#include "sigstyle/backbone/address.hpp"
#include "sigstyle/backbone/hooks.hpp"
#include "sigstyle/backbone/parameters.hpp"
#include "sigstyle/rng.hpp"

namespace sigstyle {

// Topology of a latent-diffusion UNet using the diffusers parameter naming
// (down_blocks / mid_block / up_blocks). Level i of the down path mirrors
// up block (levels - 1 - i).
struct UNetConfig {
    std::int64_t in_channels = 4;
    std::int64_t out_channels = 4;
    std::vector<std::int64_t> block_out_channels{320, 640, 1280, 1280};
    std::vector<bool> down_attention{true, true, true, false};
    std::vector<bool> up_attention{false, true, true, true};
    int layers_per_block = 2;
    int mid_attention_layers = 1;
    std::vector<int> attention_heads{8, 8, 8, 8};
    std::int64_t cross_attention_dim = 768;
    int norm_num_groups = 32;
    double norm_eps = 1e-5;
    bool use_linear_projection = false;

    std::int64_t time_embed_dim() const { return block_out_channels.front() * 4; }
    int levels() const { return static_cast<int>(block_out_channels.size()); }
    void validate() const;
};

struct UNetForwardOptions {
    // Replacements for named parameters.
    const ParamOverrides* overrides = nullptr;
    // Additive terms for linear weights, applied as a separate product and
    // taking precedence over offsets held by the store.
    const ParamOverrides* offsets = nullptr;
    AttentionHooks* hooks = nullptr;
    HookContext hook_context;
};

class UNet {
public:
    explicit UNet(UNetConfig config);

    const UNetConfig& config() const { return config_; }
    // Every attention projection, in forward execution order.
    const std::vector<AttentionAddress>& inventory() const { return inventory_; }
    const std::string& parameter_name(const AttentionAddress& addr) const;
    // Self-attention layers in hook invocation order.
    std::vector<LayerAddress> self_attention_layers() const;

    // Region of a named UNet parameter (encoder = conv_in + down path,
    // middle = mid block + time embedding, decoder = up path + output head).
    static Region region_of_parameter(const std::string& name);

    // Fixed-seed initialization of every parameter (for synthetic backbones).
    void initialize(ParameterStore& store, std::uint64_t seed, double output_gain) const;
    // Names and shapes of every parameter this topology expects.
    std::map<std::string, Shape> parameter_shapes() const;

    // latent [C, H, W], context [L, cross_attention_dim]
    ag::Var forward(const ParameterStore& store, const ag::Var& latent, int timestep, const ag::Var& context,
                    const UNetForwardOptions& options) const;

private:
    struct Plan;
    UNetConfig config_;
    std::vector<AttentionAddress> inventory_;
    std::map<AttentionAddress, std::string> names_;
    std::map<std::string, Shape> shapes_;

    void build_plan();
};

// Sinusoidal timestep features (cos half first), length dim.
Tensor timestep_features(int timestep, std::int64_t dim);

}  // namespace sigstyle
