#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "sigstyle/tensor.hpp"

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A graph is built implicitly: every op returns a Var that keeps its inputs
// alive. Ops only record a backward closure when at least one input requires
// a gradient, so inference-only graphs cost nothing beyond the forward values.
// Image-shaped tensors are [C, H, W]; token sequences are [N, C].
namespace sigstyle::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Tensor& g);
    void accumulate_at(std::int64_t i, double g);
    Tensor& grad_buffer();
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Seeds d(root)/d(root) = 1 (root must be a single-element tensor) and
// propagates to every leaf that requires a gradient.
void backward(const Var& root);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// s must hold exactly one element.
Var scale_by(const Var& s, const Var& a);
Var silu(const Var& a);
Var gelu(const Var& a);
Var quick_gelu(const Var& a);
Var reshape(const Var& a, Shape shape);

// Linear algebra
Var matmul(const Var& a, const Var& b);
// x [N, in], w [out, in], bias [out] or null.
Var linear(const Var& x, const Var& w, const Var& bias = nullptr);
// a [r], b [c] -> [r, c]
Var outer(const Var& a, const Var& b);
// m [r, c] with per-row (length r) or per-column (length c) factors.
Var mul_rows(const Var& m, const Var& s);
Var add_rows(const Var& m, const Var& h);
Var mul_cols(const Var& m, const Var& s);
Var add_cols(const Var& m, const Var& h);

// Image ops on [C, H, W]
struct Padding {
    int top = 0, left = 0, bottom = 0, right = 0;
    static Padding same(int p) { return {p, p, p, p}; }
};
// w [O, C, kh, kw]
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, Padding pad);
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps);
// v [C] added to every spatial position of channel c.
Var add_channel(const Var& x, const Var& v);
Var upsample_nearest2x(const Var& x);
Var concat_channels(const Var& a, const Var& b);
// [C, H, W] <-> [H*W, C]
Var chw_to_tokens(const Var& x);
Var tokens_to_chw(const Var& x, std::int64_t h, std::int64_t w);

// Sequence ops on [N, C]
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& x, std::int64_t start, std::int64_t len);
// One-row gather from an embedding table [V, D].
Var gather_rows(const Var& table, const std::vector<std::int64_t>& ids);

// Observes (and optionally replaces) the post-softmax probabilities of an
// attention call. probs is laid out [heads * Nq, Nk], head-major.
using ProbsHook = std::function<std::optional<Tensor>(const Tensor& probs)>;

// Scaled dot-product attention over q [Nq, H*d], k [Nk, H*d], v [Nk, H*dv].
// When the hook returns a replacement map, the output uses it in place of the
// computed probabilities and no gradient flows into q or k.
Var attention(const Var& q, const Var& k, const Var& v, int heads, bool causal, const ProbsHook* hook = nullptr);

// Raw scaled dot-product probabilities (no autograd); exposed for oracles.
Tensor attention_probs(const Tensor& q, const Tensor& k, int heads, bool causal);

// Reductions
Var mean(const Var& a);
// mean((a - target)^2) with the target held constant.
Var mse(const Var& a, const Tensor& target);

}  // namespace sigstyle::ag
