#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "sigstyle/backbone/backbone.hpp"

namespace sigstyle {

struct SamplerConfig {
    int num_steps = 50;
    double guidance_scale = 1.0;
    // Only deterministic sampling is supported; anything but 0 is rejected.
    double eta = 0.0;
    std::uint64_t seed = 0;

    void validate(const NoiseSchedule& schedule) const;
};

// Default guidance for plain text-to-image sampling: 1.0 on the toy, 7.5 on
// real backbones.
double default_guidance(BackboneVariant variant);

enum class Direction { denoise, invert };

// latents[i] sits at timestep_map[i]; T transitions give T + 1 entries.
struct Trajectory {
    std::vector<Tensor> latents;
    std::vector<int> timestep_map;
    Direction direction = Direction::denoise;
    double guidance_scale = 1.0;

    int num_steps() const { return static_cast<int>(latents.size()) - 1; }
    const Tensor& final_latent() const { return latents.back(); }
};

// Schedule timesteps b_i = floor(i (N - 1) / T), i = 0..T (ascending).
std::vector<int> timestep_boundaries(int num_train_steps, int num_steps);

// One eta = 0 update from t_from to t_to with predicted noise eps:
//   x0 = (z - sqrt(1 - abar_from) eps) / sqrt(abar_from)
//   z' = sqrt(abar_to) x0 + sqrt(1 - abar_to) eps
Tensor ddim_update(const NoiseSchedule& schedule, const Tensor& z, const Tensor& eps, int t_from, int t_to);

// Classifier-free guidance: eps_u + s (eps_c - eps_u). With s == 1 only the
// conditional branch runs. Hooks see HookContext{step, branch}, conditional
// branch first.
Tensor guided_noise(const Backbone& model, const Tensor& z, int t, const TextEmbedding& cond,
                    const TextEmbedding* uncond, double guidance_scale, AttentionHooks* hooks, int step);

// Called after each step with the new latent; may modify it in place.
using StepCallback = std::function<void(int step, Tensor& latent)>;

// Single-step driver so two trajectories can advance in lockstep.
class DdimStepper {
public:
    DdimStepper(const Backbone& model, TextEmbedding text, const SamplerConfig& cfg, Direction direction);

    int num_steps() const { return cfg_.num_steps; }
    Direction direction() const { return direction_; }
    // Timestep of the latent before step s runs, and after.
    int timestep_from(int s) const;
    int timestep_to(int s) const;
    // Advances z by step s (0-based, in this stepper's direction). Throws
    // NumericError naming the step when the result is not finite.
    Tensor step(int s, const Tensor& z, AttentionHooks* hooks = nullptr) const;

    Trajectory start(const Tensor& z) const;

private:
    const Backbone* model_;
    TextEmbedding text_;
    std::optional<TextEmbedding> uncond_;
    SamplerConfig cfg_;
    Direction direction_;
    std::vector<int> bounds_;
};

// Deterministic sampling from z_T; the trajectory ends at z_0.
Trajectory ddim_sample(const Backbone& model, const Tensor& z_T, const TextEmbedding& text, const SamplerConfig& cfg,
                       AttentionHooks* hooks = nullptr, const StepCallback& after_step = {});

// Deterministic inversion from z_0; the trajectory ends at z_T.
Trajectory ddim_invert(const Backbone& model, const Tensor& z_0, const TextEmbedding& text, const SamplerConfig& cfg);

// Warns (and returns false) when the inversion and reconstruction guidance differ.
bool check_guidance_match(double inversion_scale, double reconstruction_scale);

}  // namespace sigstyle
