#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <tuple>
#include <vector>

#include "sigstyle/backbone/backbone.hpp"
#include "sigstyle/checkpoint.hpp"
#include "sigstyle/ddim.hpp"

namespace sigstyle {

struct TraceKey {
    int step = 0;
    LayerAddress layer;
    GuidanceBranch branch = GuidanceBranch::conditional;

    auto operator<=>(const TraceKey&) const = default;
    std::string str() const;
};

struct TraceMeta {
    int num_steps = 0;
    int k_recorded = 0;
    Shape latent_shape;
    double guidance_scale = 1.0;
};

struct TraceOptions {
    // Maps beyond this many bytes of resident data are written to disk.
    std::size_t memory_budget_bytes = std::size_t{1} << 30;
    // Spill location; empty means a fresh directory under the system temp dir.
    std::filesystem::path spill_dir;
};

// Self-attention probability maps keyed by (step, layer, branch). Entries are
// write-once; reads return copies, so injection cannot mutate stored maps.
// Copies of a trace share one spill directory, removed with the last copy.
class AttentionTrace {
public:
    AttentionTrace() = default;
    AttentionTrace(TraceMeta meta, TraceOptions options = {});

    const TraceMeta& meta() const { return meta_; }
    // Throws ValidationError when the key already exists.
    void put(const TraceKey& key, const Tensor& map);
    bool contains(const TraceKey& key) const { return entries_.count(key) != 0; }
    // Throws TraceGapError when the key is missing.
    Tensor get(const TraceKey& key) const;
    void erase(const TraceKey& key);
    std::vector<TraceKey> keys() const;
    std::size_t size() const { return entries_.size(); }

    std::size_t resident_bytes() const { return resident_bytes_; }
    std::size_t spilled_entries() const;
    // Every get() call, in order; used to assert read discipline.
    const std::vector<TraceKey>& read_log() const { return *reads_; }

private:
    struct Entry {
        Shape shape;
        std::optional<Tensor> resident;
        std::filesystem::path file;
    };
    struct SpillDir;

    TraceMeta meta_;
    TraceOptions options_;
    std::map<TraceKey, Entry> entries_;
    std::size_t resident_bytes_ = 0;
    std::shared_ptr<SpillDir> spill_;
    std::shared_ptr<std::vector<TraceKey>> reads_ = std::make_shared<std::vector<TraceKey>>();
};

// Rows sum to 1 within tol and entries are >= 0. Throws ValidationError.
void check_row_stochastic(const Tensor& map, const std::string& where, double tol = 1e-4);

struct SwapPlan {
    int k = 25;
    // Empty means every self-attention layer of the backbone.
    std::vector<LayerAddress> layers;
    std::set<GuidanceBranch> branches{GuidanceBranch::conditional, GuidanceBranch::unconditional};

    // Throws ConfigError unless 0 <= k <= num_steps.
    void validate(int num_steps) const;
    std::vector<LayerAddress> resolved_layers(const Backbone& model) const;
};

// Branches that actually run under a guidance scale.
std::set<GuidanceBranch> active_branches(const SwapPlan& plan, double guidance_scale);

// Stores the layer's own probabilities for steps < k.
class RecordHooks final : public AttentionHooks {
public:
    RecordHooks(AttentionTrace& trace, const SwapPlan& plan, std::vector<LayerAddress> layers);
    std::optional<Tensor> on_self_attention(const HookContext& ctx, const LayerAddress& layer,
                                            const Tensor& probs) override;
    std::int64_t records() const { return records_; }

private:
    AttentionTrace* trace_;
    const SwapPlan* plan_;
    std::set<LayerAddress> layers_;
    std::int64_t records_ = 0;
};

// Replaces the layer's probabilities with the traced map for steps < k.
// Steps >= k never touch the trace.
class InjectHooks final : public AttentionHooks {
public:
    InjectHooks(const AttentionTrace& trace, const SwapPlan& plan, std::vector<LayerAddress> layers);
    std::optional<Tensor> on_self_attention(const HookContext& ctx, const LayerAddress& layer,
                                            const Tensor& probs) override;

    std::int64_t injections() const { return injections_; }
    std::int64_t calls_at_or_after_k() const { return late_calls_; }
    // Optional observer of every injected map.
    std::function<void(const TraceKey&, const Tensor&)> on_inject;

private:
    const AttentionTrace* trace_;
    const SwapPlan* plan_;
    std::set<LayerAddress> layers_;
    std::int64_t injections_ = 0;
    std::int64_t late_calls_ = 0;
};

struct Reconstruction {
    AttentionTrace trace;
    Trajectory trajectory;
};

// Content reconstruction from z_T on the model as given, recording maps for
// steps [0, plan.k). Throws ConfigError when k > T.
Reconstruction record_reconstruction(const Backbone& model, const Tensor& z_T, const TextEmbedding& content_text,
                                     const SamplerConfig& cfg, const SwapPlan& plan, const TraceOptions& options = {});

// Throws IncompatibilityError when the trace was recorded under a different
// step count, latent shape or guidance scale, or covers fewer than k steps.
void check_trace_matches(const AttentionTrace& trace, const SamplerConfig& cfg, const Shape& latent_shape,
                         const SwapPlan& plan);

// Called after each stylized step; may modify the latent (latent blending).
using LatentBlend = std::function<void(int step, Tensor& latent)>;

// Stylized sampling on the model as given (normally patched with a style),
// injecting traced maps for steps < plan.k.
Trajectory stylized_generate(const Backbone& model, const Tensor& z_T, const TextEmbedding& target_text,
                             const AttentionTrace& trace, const SwapPlan& plan, const SamplerConfig& cfg,
                             const LatentBlend& blend = {}, InjectHooks* hooks_out = nullptr);

enum class SwapMode { lockstep, replay };

struct SwapStats {
    std::int64_t records = 0;
    std::int64_t injections = 0;
    std::int64_t calls_at_or_after_k = 0;
};

struct SwapResult {
    Trajectory reconstruction;
    Trajectory stylized;
    AttentionTrace trace;
    SwapStats stats;
};

// Blends the stylized latent after step s with the reconstruction latent
// at the same point of the run; `recon_after_step` is reconstruction.latents[s + 1].
using BranchBlend = std::function<void(int step, Tensor& stylized, const Tensor& recon_after_step)>;

// Runs reconstruction (base weights) and stylized generation (style applied
// at `lambda`) from the same z_T. Lockstep interleaves the two per step;
// replay records the whole reconstruction first. Both give identical bits.
SwapResult run_attention_swap(Backbone& model, const Tensor& z_T, const TextEmbedding& content_text,
                              const TextEmbedding& target_text, const StyleCheckpoint* style, double lambda,
                              const SwapPlan& plan, const SamplerConfig& cfg, SwapMode mode = SwapMode::lockstep,
                              const BranchBlend& blend = {}, const TraceOptions& options = {});

// Debug dump: one little-endian f64 file per map plus index.json.
void dump_trace(const AttentionTrace& trace, const std::filesystem::path& dir);
AttentionTrace load_trace_dump(const std::filesystem::path& dir);

}  // namespace sigstyle
