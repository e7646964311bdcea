#pragma once

#include <optional>

#include "sigstyle/backbone/address.hpp"
#include "sigstyle/tensor.hpp"

namespace sigstyle {

enum class GuidanceBranch { conditional, unconditional };

inline const char* to_string(GuidanceBranch b) { return b == GuidanceBranch::conditional ? "cond" : "uncond"; }

// Where in a sampling run a UNet evaluation happens. step is the denoising
// step index (0 = first, noisiest step) or -1 outside a sampler.
struct HookContext {
    int step = -1;
    GuidanceBranch branch = GuidanceBranch::conditional;
};

// Called once per self-attention layer per UNet evaluation, in forward
// execution order: encoder blocks, then middle, then decoder, each by
// ascending block_index. probs is [heads * num_queries, num_keys], rows are
// softmax distributions. Returning a map replaces the probabilities used to
// mix the layer's own value vectors.
class AttentionHooks {
public:
    virtual ~AttentionHooks() = default;
    virtual std::optional<Tensor> on_self_attention(const HookContext& ctx, const LayerAddress& layer,
                                                    const Tensor& probs) = 0;
};

}  // namespace sigstyle
