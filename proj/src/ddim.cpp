#include "sigstyle/ddim.hpp"

#include <cmath>

#include "sigstyle/errors.hpp"
#include "sigstyle/log.hpp"

namespace sigstyle {

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
    if (num_steps < 1) throw ConfigError("num_steps must be >= 1");
    if (num_steps > schedule.num_train_steps() - 1) {
        throw ConfigError("num_steps " + std::to_string(num_steps) + " exceeds the schedule length " +
                          std::to_string(schedule.num_train_steps()) + " - 1");
    }
    if (eta != 0.0) throw ConfigError("only deterministic sampling (eta = 0) is supported");
    if (!std::isfinite(guidance_scale)) throw ConfigError("guidance_scale must be finite");
}

double default_guidance(BackboneVariant variant) { return variant == BackboneVariant::toy ? 1.0 : 7.5; }

std::vector<int> timestep_boundaries(int num_train_steps, int num_steps) {
    std::vector<int> b(static_cast<std::size_t>(num_steps) + 1);
    for (int i = 0; i <= num_steps; ++i) {
        b[static_cast<std::size_t>(i)] =
            static_cast<int>(static_cast<std::int64_t>(i) * (num_train_steps - 1) / num_steps);
    }
    return b;
}

Tensor ddim_update(const NoiseSchedule& schedule, const Tensor& z, const Tensor& eps, int t_from, int t_to) {
    const double ab_from = schedule.alpha_bar_at(t_from), ab_to = schedule.alpha_bar_at(t_to);
    const double a_from = std::sqrt(ab_from), s_from = std::sqrt(1.0 - ab_from);
    const double a_to = std::sqrt(ab_to), s_to = std::sqrt(1.0 - ab_to);
    Tensor out(z.shape());
    for (std::int64_t i = 0; i < z.numel(); ++i) {
        const double x0 = (z[i] - s_from * eps[i]) / a_from;
        out[i] = a_to * x0 + s_to * eps[i];
    }
    return out;
}

Tensor guided_noise(const Backbone& model, const Tensor& z, int t, const TextEmbedding& cond,
                    const TextEmbedding* uncond, double guidance_scale, AttentionHooks* hooks, int step) {
    const LatentGrid grid{z, t};
    Tensor ec = model.predict_noise(grid, t, cond, hooks, {step, GuidanceBranch::conditional}).data;
    if (guidance_scale == 1.0 || !uncond) return ec;
    const Tensor eu = model.predict_noise(grid, t, *uncond, hooks, {step, GuidanceBranch::unconditional}).data;
    for (std::int64_t i = 0; i < ec.numel(); ++i) ec[i] = eu[i] + guidance_scale * (ec[i] - eu[i]);
    return ec;
}

DdimStepper::DdimStepper(const Backbone& model, TextEmbedding text, const SamplerConfig& cfg, Direction direction)
    : model_(&model), text_(std::move(text)), cfg_(cfg), direction_(direction) {
    cfg_.validate(model.schedule());
    bounds_ = timestep_boundaries(model.schedule().num_train_steps(), cfg_.num_steps);
    if (cfg_.guidance_scale != 1.0) uncond_ = model.embed_prompt("");
}

int DdimStepper::timestep_from(int s) const {
    const auto T = cfg_.num_steps;
    return direction_ == Direction::denoise ? bounds_[static_cast<std::size_t>(T - s)] : bounds_[static_cast<std::size_t>(s)];
}

int DdimStepper::timestep_to(int s) const {
    const auto T = cfg_.num_steps;
    return direction_ == Direction::denoise ? bounds_[static_cast<std::size_t>(T - s - 1)]
                                            : bounds_[static_cast<std::size_t>(s + 1)];
}

Tensor DdimStepper::step(int s, const Tensor& z, AttentionHooks* hooks) const {
    if (s < 0 || s >= cfg_.num_steps) throw ConfigError("step index " + std::to_string(s) + " out of range");
    if (z.shape() != model_->latent_shape()) {
        throw DimensionError("latent has shape " + shape_str(z.shape()) + ", backbone expects " +
                             shape_str(model_->latent_shape()));
    }
    const int t_from = timestep_from(s), t_to = timestep_to(s);
    if (!z.all_finite()) throw NumericError("non-finite latent entering step " + std::to_string(s));
    // Inversion evaluates the noise at the current (less noisy) timestep.
    const Tensor eps =
        guided_noise(*model_, z, t_from, text_, uncond_ ? &*uncond_ : nullptr, cfg_.guidance_scale, hooks, s);
    Tensor out = ddim_update(model_->schedule(), z, eps, t_from, t_to);
    if (!out.all_finite()) {
        throw NumericError(std::string(direction_ == Direction::denoise ? "sampling" : "inversion") +
                           " produced a non-finite latent at step " + std::to_string(s) + " (t = " +
                           std::to_string(t_from) + ")");
    }
    return out;
}

Trajectory DdimStepper::start(const Tensor& z) const {
    Trajectory tr;
    tr.direction = direction_;
    tr.guidance_scale = cfg_.guidance_scale;
    tr.latents.reserve(static_cast<std::size_t>(cfg_.num_steps) + 1);
    tr.latents.push_back(z);
    tr.timestep_map.push_back(timestep_from(0));
    return tr;
}

Trajectory ddim_sample(const Backbone& model, const Tensor& z_T, const TextEmbedding& text, const SamplerConfig& cfg,
                       AttentionHooks* hooks, const StepCallback& after_step) {
    const DdimStepper stepper(model, text, cfg, Direction::denoise);
    Trajectory tr = stepper.start(z_T);
    Tensor z = z_T;
    for (int s = 0; s < stepper.num_steps(); ++s) {
        z = stepper.step(s, z, hooks);
        if (after_step) after_step(s, z);
        tr.latents.push_back(z);
        tr.timestep_map.push_back(stepper.timestep_to(s));
    }
    return tr;
}

Trajectory ddim_invert(const Backbone& model, const Tensor& z_0, const TextEmbedding& text, const SamplerConfig& cfg) {
    const DdimStepper stepper(model, text, cfg, Direction::invert);
    Trajectory tr = stepper.start(z_0);
    Tensor z = z_0;
    for (int s = 0; s < stepper.num_steps(); ++s) {
        z = stepper.step(s, z);
        tr.latents.push_back(z);
        tr.timestep_map.push_back(stepper.timestep_to(s));
    }
    return tr;
}

bool check_guidance_match(double inversion_scale, double reconstruction_scale) {
    if (inversion_scale == reconstruction_scale) return true;
    log().warn("inversion guidance {} differs from reconstruction guidance {}; reconstruction will drift",
               inversion_scale, reconstruction_scale);
    return false;
}

}  // namespace sigstyle
