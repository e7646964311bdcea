#include "sigstyle/styletune.hpp"

#include <cmath>

#include "sigstyle/errors.hpp"
#include "sigstyle/log.hpp"
#include "sigstyle/rng.hpp"

namespace sigstyle {

namespace {

constexpr double kTokenNoise = 0.05;

std::size_t count_stars(const std::string& s) {
    std::size_t n = 0;
    for (char c : s) n += c == '*';
    return n;
}

struct Gradients {
    std::vector<std::array<Tensor, kGroupFields>> groups;
    Tensor token;
    std::map<std::string, Tensor> direct;
};

Tensor grad_or_zero(const ag::Var& v) { return v->grad.empty() ? Tensor::zeros_like(v->value) : v->grad; }

void add_into(Tensor& acc, const Tensor& g) {
    if (acc.empty()) {
        acc = g;
        return;
    }
    for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
}

// Loss and gradients averaged over the samples.
double accumulate(const Backbone& model, const TrainState& state, const std::vector<Tensor>& latents,
                  const std::vector<int>& timesteps, const std::vector<Tensor>& noises, const TrainConfig& cfg,
                  Gradients& out) {
    const auto n = latents.size();
    out.groups.assign(state.predictor.groups().size(), {});
    out.token = Tensor();
    out.direct.clear();
    double total = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        TrainVars vars = TrainVars::leaves(state);
        ag::Var loss = inversion_loss(model, state, vars, latents[s], timesteps[s], noises[s], cfg);
        const double value = loss->value[0];
        if (!std::isfinite(value)) return value;
        total += value;
        ag::backward(n == 1 ? loss : ag::scale(loss, 1.0 / static_cast<double>(n)));
        for (std::size_t g = 0; g < vars.groups.size(); ++g) {
            for (std::size_t f = 0; f < kGroupFields; ++f) add_into(out.groups[g][f], grad_or_zero(vars.groups[g][f]));
        }
        add_into(out.token, grad_or_zero(vars.token));
        for (const auto& [name, v] : vars.direct) add_into(out.direct[name], grad_or_zero(v));
    }
    return total / static_cast<double>(n);
}

void apply(TrainState& state, Adam& opt, const Gradients& g) {
    auto& groups = state.predictor.groups();
    for (std::size_t i = 0; i < groups.size(); ++i) {
        for (std::size_t f = 0; f < kGroupFields; ++f) {
            opt.step(groups[i].address.str() + "." + to_string(static_cast<GroupField>(f)), groups[i].fields[f],
                     g.groups[i][f]);
        }
    }
    opt.step("token", state.token, g.token);
    for (auto& [name, t] : state.direct) opt.step("direct." + name, t, g.direct.at(name));
    opt.next();
}

std::vector<AttentionAddress> resolve_targets(const Backbone& model, const TrainConfig& cfg) {
    if (cfg.targets.empty()) return default_targets(model);
    std::vector<AttentionAddress> out;
    for (const auto& a : cfg.targets) out.push_back(model.resolve(a));
    check_target_set(out);
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
    if (count_stars(prompt_template) != 1) throw ConfigError("prompt_template must contain '*' exactly once");
    if (!(augment.min_crop_fraction > 0.0 && augment.min_crop_fraction <= 1.0)) {
        throw ConfigError("min_crop_fraction must lie in (0, 1]");
    }
}

StyleMode TrainConfig::mode() const {
    return prompt_template.find("appearance") != std::string::npos ? StyleMode::appearance : StyleMode::style;
}

Tensor init_style_token(const Backbone& model, std::uint64_t seed, const std::string& init_word) {
    Tensor base = model.word_embedding(init_word);
    double ss = 0.0;
    for (double v : base.values()) ss += v * v;
    const double rms = std::sqrt(ss / static_cast<double>(base.numel()));
    Rng rng(seed);
    for (auto& v : base.values()) v += kTokenNoise * rms * rng.normal();
    return base;
}

AugmentDraw draw_augment(int width, int height, const AugmentConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    AugmentDraw d{0, 0, width, height, false};
    if (cfg.random_crop) {
        const int min_w = static_cast<int>(std::ceil(cfg.min_crop_fraction * width));
        const int min_h = static_cast<int>(std::ceil(cfg.min_crop_fraction * height));
        d.width = min_w + static_cast<int>(rng.uniform_int(width - min_w + 1));
        d.height = min_h + static_cast<int>(rng.uniform_int(height - min_h + 1));
        d.x = static_cast<int>(rng.uniform_int(width - d.width + 1));
        d.y = static_cast<int>(rng.uniform_int(height - d.height + 1));
    }
    if (cfg.horizontal_flip) d.flip = rng.uniform() < 0.5;
    return d;
}

Image apply_augment(const Image& image, const AugmentDraw& draw, int out_size) {
    Image out = (draw.x == 0 && draw.y == 0 && draw.width == image.width() && draw.height == image.height())
                    ? image
                    : crop(image, draw.x, draw.y, draw.width, draw.height);
    out = resize_bilinear(out, out_size, out_size);
    return draw.flip ? flip_horizontal(out) : out;
}

Image augment(const Image& image, const AugmentConfig& cfg, std::uint64_t seed, int out_size) {
    const double keep = cfg.random_crop ? cfg.min_crop_fraction : 1.0;
    const int min_w = static_cast<int>(std::ceil(keep * image.width()));
    const int min_h = static_cast<int>(std::ceil(keep * image.height()));
    if (min_w < out_size || min_h < out_size) {
        throw SizeError("style image " + std::to_string(image.width()) + "x" + std::to_string(image.height()) +
                        " is too small: the retained crop must be at least " + std::to_string(out_size) + " px");
    }
    return apply_augment(image, draw_augment(image.width(), image.height(), cfg, seed), out_size);
}

TrainVars TrainVars::leaves(const TrainState& s) {
    TrainVars v;
    for (const auto& g : s.predictor.groups()) {
        std::array<ag::Var, kGroupFields> f;
        for (std::size_t i = 0; i < kGroupFields; ++i) f[i] = ag::parameter(g.fields[i]);
        v.groups.push_back(std::move(f));
    }
    v.token = ag::parameter(s.token);
    for (const auto& [name, t] : s.direct) v.direct[name] = ag::parameter(t);
    return v;
}

TrainVars TrainVars::constants(const TrainState& s) {
    TrainVars v;
    for (const auto& g : s.predictor.groups()) {
        std::array<ag::Var, kGroupFields> f;
        for (std::size_t i = 0; i < kGroupFields; ++i) f[i] = ag::constant(g.fields[i]);
        v.groups.push_back(std::move(f));
    }
    v.token = ag::constant(s.token);
    for (const auto& [name, t] : s.direct) v.direct[name] = ag::constant(t);
    return v;
}

Tensor noised_latent(const Backbone& model, const Tensor& z0, int t, const Tensor& noise) {
    const double ab = model.schedule().alpha_bar_at(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    if (z0.shape() != noise.shape()) throw DimensionError("noise shape does not match latent shape");
    Tensor x(z0.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = a * z0[i] + b * noise[i];
    return x;
}

ag::Var inversion_loss(const Backbone& model, const TrainState& state, const TrainVars& vars, const Tensor& z0, int t,
                       const Tensor& noise, const TrainConfig& cfg, ag::Var* prediction) {
    ParamOverrides offsets;
    const auto& groups = state.predictor.groups();
    for (std::size_t i = 0; i < groups.size(); ++i) {
        offsets[model.parameter_name(groups[i].address)] = ag::scale(offset_graph(vars.groups[i]), cfg.lambda);
    }
    ParamOverrides overrides;
    for (const auto& [name, d] : vars.direct) overrides[name] = ag::add(model.unet_parameters().var(name), d);
    ag::Var context = model.encode_prompt_graph(cfg.prompt_template, kStyleToken, vars.token);
    ag::Var x_t = ag::constant(noised_latent(model, z0, t, noise));
    ag::Var pred = model.predict_noise_graph(x_t, t, context, overrides.empty() ? nullptr : &overrides, &offsets);
    if (prediction) *prediction = pred;
    return ag::mse(pred, noise);
}

void Adam::step(const std::string& key, Tensor& param, const Tensor& grad) {
    auto& [m, v] = moments_[key];
    if (m.empty()) {
        m = Tensor::zeros_like(param);
        v = Tensor::zeros_like(param);
    }
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::int64_t i = 0; i < param.numel(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * grad[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * grad[i] * grad[i];
        param[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
}

double train_step(const Backbone& model, TrainState& state, Adam& opt, const Tensor& z0, int t, const Tensor& noise,
                  const TrainConfig& cfg, std::int64_t step_index) {
    Gradients g;
    const double loss = accumulate(model, state, {z0}, {t}, {noise}, cfg, g);
    if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss at training step " + std::to_string(step_index) + " (t = " +
                           std::to_string(t) + ")");
    }
    apply(state, opt, g);
    return loss;
}

TrainState initial_state(const Backbone& model, const TrainConfig& cfg) {
    TrainState s;
    s.predictor = OffsetPredictor::init(resolve_targets(model, cfg), derive_seed(cfg.seed, 11));
    s.token = init_style_token(model, derive_seed(cfg.seed, 12), cfg.init_word);
    if (cfg.train_decoder_direct) {
        for (const auto& name : model.unet_parameters().names()) {
            if (UNet::region_of_parameter(name) == Region::decoder) {
                s.direct[name] = Tensor::zeros_like(model.unet_parameters().base(name));
            }
        }
    }
    return s;
}

StyleCheckpoint make_checkpoint(const Backbone& model, const TrainState& state, const TrainConfig& cfg,
                                std::int64_t steps, std::vector<std::string> image_hashes) {
    StyleCheckpoint c;
    c.token_embedding = state.token;
    c.predictor = state.predictor;
    c.base_model_id = model.model_id();
    c.train_lambda = cfg.lambda;
    c.steps_trained = steps;
    c.style_image_hashes = std::move(image_hashes);
    c.created_at = utc_timestamp();
    c.mode = cfg.mode();
    c.prompt_template = cfg.prompt_template;
    c.learning_rate = cfg.learning_rate;
    c.seed = cfg.seed;
    c.init_word = cfg.init_word;
    c.direct_deltas = state.direct;
    round_to_f32(c);
    return c;
}

StyleCheckpoint finetune(const Backbone& model, const std::vector<Image>& style_images, const TrainConfig& cfg,
                         FinetuneReport* report, const ProgressFn& progress) {
    cfg.validate();
    if (style_images.empty()) throw ConfigError("fine-tuning needs at least one style image");
    const int size = model.image_size();
    std::vector<std::string> hashes;
    for (const auto& img : style_images) {
        hashes.push_back(pixel_digest(img));
        // Fail early on unusable inputs rather than mid-run.
        augment(img, cfg.augment, 0, size);
    }

    TrainState state = initial_state(model, cfg);
    if (report) {
        report->losses.clear();
        report->initial_token = state.token;
    }
    const bool fixed_inputs = !cfg.augment.random_crop && !cfg.augment.horizontal_flip;
    std::vector<Tensor> cached;
    if (fixed_inputs) {
        for (const auto& img : style_images) cached.push_back(model.encode_image(augment(img, cfg.augment, 0, size)).data);
    }

    Adam opt(cfg.learning_rate);
    const auto n_images = static_cast<std::int64_t>(style_images.size());
    const int num_t = model.schedule().num_train_steps();
    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(cfg.seed, 0x1000 + static_cast<std::uint64_t>(step)));
        std::vector<Tensor> latents, noises;
        std::vector<int> ts;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto idx = static_cast<std::size_t>((step * cfg.batch_size + b) % n_images);
            const std::uint64_t aug_seed = rng.next_u64();
            latents.push_back(fixed_inputs ? cached[idx]
                                           : model.encode_image(augment(style_images[idx], cfg.augment, aug_seed, size)).data);
            ts.push_back(static_cast<int>(rng.uniform_int(num_t)));
            noises.push_back(rng.normal_tensor(model.latent_shape()));
        }
        Gradients g;
        const double loss = accumulate(model, state, latents, ts, noises, cfg, g);
        if (!std::isfinite(loss)) {
            const std::string msg = "non-finite loss at training step " + std::to_string(step) + "; returning state after " +
                                    std::to_string(step) + " completed steps";
            log().error("{}", msg);
            throw TrainingAborted(msg, make_checkpoint(model, state, cfg, step, hashes));
        }
        apply(state, opt, g);
        if (report) report->losses.push_back(loss);
        if (progress) progress(step, loss);
    }
    return make_checkpoint(model, state, cfg, cfg.steps, std::move(hashes));
}

}  // namespace sigstyle
