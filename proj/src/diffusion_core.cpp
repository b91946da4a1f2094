#include "spurgen/diffusion_core.hpp"

#include "spurgen/error.hpp"

namespace spurgen::diffusion {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw ConfigError("noise schedule needs at least one step");
    std::vector<double> betas(steps);
    for (int i = 0; i < steps; ++i) {
        betas[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
    }
    return NoiseSchedule(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) { return NoiseSchedule(std::move(betas)); }

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw ConfigError("noise schedule needs at least one step");
    alpha_bars_.resize(betas_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
        if (!(betas_[i] > 0.0 && betas_[i] < 1.0)) throw ConfigError("noise schedule betas must lie in (0,1)");
        prod *= 1.0 - betas_[i];
        alpha_bars_[i] = prod;
    }
}

std::size_t NoiseSchedule::index(int t) const {
    if (t < 1 || t > steps()) {
        throw ConfigError("timestep " + std::to_string(t) + " outside [1," + std::to_string(steps()) + "]");
    }
    return static_cast<std::size_t>(t - 1);
}

std::string to_string(SchedulerKind k) {
    return k == SchedulerKind::ddim_deterministic ? "ddim_deterministic" : "adapter_native";
}

SchedulerKind parse_scheduler_kind(const std::string& s) {
    if (s == "ddim_deterministic") return SchedulerKind::ddim_deterministic;
    if (s == "adapter_native") return SchedulerKind::adapter_native;
    throw ConfigError("unknown scheduler kind '" + s + "'");
}

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
    if (steps < 1 || steps > schedule.steps()) {
        throw ConfigError("sampler steps must lie in [1," + std::to_string(schedule.steps()) + "]");
    }
    if (!(guidance_scale >= 0.0) || !std::isfinite(guidance_scale)) {
        throw ConfigError("guidance scale must be a finite nonnegative number");
    }
}

LatentTensor forward_noise(const LatentTensor& z0, int t, const LatentTensor& eps, const NoiseSchedule& schedule) {
    if (z0.shape() != eps.shape()) throw ConfigError("forward_noise: eps shape differs from z0 shape");
    ag::Tensor out(z0.shape());
    forward_noise<double>(z0.tensor().span(), eps.tensor().span(), schedule.alpha_bar(t), out.span());
    return LatentTensor(std::move(out));
}

ag::Var forward_noise(const ag::Var& z0, int t, const ag::Var& eps, const NoiseSchedule& schedule) {
    const double ab = schedule.alpha_bar(t);
    return ag::add(ag::scale(z0, std::sqrt(ab)), ag::scale(eps, std::sqrt(1.0 - ab)));
}

LatentTensor predict_x0(const LatentTensor& z_t, int t, const LatentTensor& eps_pred, const NoiseSchedule& schedule) {
    if (z_t.shape() != eps_pred.shape()) throw ConfigError("predict_x0: eps shape differs from z_t shape");
    ag::Tensor out(z_t.shape());
    predict_x0<double>(z_t.tensor().span(), eps_pred.tensor().span(), schedule.alpha_bar(t), out.span());
    return LatentTensor(std::move(out));
}

ag::Var predict_x0(const ag::Var& z_t, int t, const ag::Var& eps_pred, const NoiseSchedule& schedule) {
    const double ab = schedule.alpha_bar(t);
    if (!(ab > 0.0)) throw DegenerateInputError("predict_x0: alpha_bar must be positive");
    return ag::scale(ag::sub(z_t, ag::scale(eps_pred, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
}

LatentTensor ImageCodec::encode(const ImageTensor& image) const {
    ag::NoGradGuard no_grad;
    return LatentTensor(encode(image.var()).value());
}

ImageTensor ImageCodec::decode(const LatentTensor& latent) const {
    ag::NoGradGuard no_grad;
    return to_image(decode(latent.var()).value());
}

NoiseDraw draw_noise(Rng& rng, const NoiseSchedule& schedule, const ag::Shape& latent_shape) {
    NoiseDraw d;
    d.t = static_cast<int>(rng.uniform_int(1, schedule.steps()));
    d.eps = ag::Tensor(latent_shape);
    for (auto& v : d.eps.data()) v = rng.normal();
    return d;
}

ag::Var denoising_loss(std::span<const ImageTensor> images, std::span<const std::string> prompts, const Models& models,
                       const NoiseSchedule& schedule, Rng& rng, std::vector<BranchItem>* trace) {
    if (images.empty()) throw DataError("denoising loss needs a nonempty batch");
    if (images.size() != prompts.size()) throw ConfigError("denoising loss needs one prompt per image");
    ag::Var total;
    for (std::size_t i = 0; i < images.size(); ++i) {
        ag::Var z0;
        {
            ag::NoGradGuard frozen_codec;
            z0 = ag::constant(models.codec.encode(images[i].var()).value());
        }
        NoiseDraw draw = draw_noise(rng, schedule, z0.shape());
        ag::Var eps = ag::constant(std::move(draw.eps));
        ag::Var z_t = forward_noise(z0, draw.t, eps, schedule);
        ag::Var emb = models.text_encoder.encode(prompts[i]);
        ag::Var pred = models.predictor.predict(z_t, draw.t, emb);
        if (pred.shape() != z_t.shape()) {
            throw ConfigError("noise predictor output " + ag::shape_str(pred.shape()) + " differs from latent shape " +
                              ag::shape_str(z_t.shape()));
        }
        ag::Var term = ag::mse(pred, eps);
        total = total ? ag::add(total, term) : term;
        if (trace) trace->push_back({z_t, draw.t, pred});
    }
    return ag::scale(total, 1.0 / static_cast<double>(images.size()));
}

ag::Var ldm_loss(std::span<const ImageTensor> images, std::span<const std::string> prompts, const Models& models,
                 const NoiseSchedule& schedule, Rng& rng, std::vector<BranchItem>* trace) {
    return denoising_loss(images, prompts, models, schedule, rng, trace);
}

ag::Var ppl_loss(std::span<const ImageTensor> prior_images, std::span<const std::string> prior_prompts,
                 const Models& models, const NoiseSchedule& schedule, Rng& rng, std::vector<BranchItem>* trace) {
    if (prior_images.empty()) throw DataError("prior-preservation loss needs a nonempty prior set");
    return denoising_loss(prior_images, prior_prompts, models, schedule, rng, trace);
}

std::vector<int> ddim_timesteps(int train_steps, int steps) {
    if (steps < 1 || steps > train_steps) throw ConfigError("sampler steps must lie in [1, T]");
    const int ratio = train_steps / steps;
    std::vector<int> ts(steps);
    for (int i = 0; i < steps; ++i) ts[i] = (steps - 1 - i) * ratio + 1;
    return ts;
}

LatentTensor initial_latent(std::uint64_t seed, const ag::Shape& shape) {
    Rng rng(seed);
    ag::Tensor z(shape);
    for (auto& v : z.data()) v = rng.normal();
    return LatentTensor(std::move(z));
}

ag::Tensor guided_noise(const NoisePredictor& predictor, const ag::Var& z, int t, const ag::Var& cond,
                        const ag::Var& uncond, double guidance_scale) {
    ag::Tensor eps_u = predictor.predict(z, t, uncond).value();
    if (guidance_scale == 0.0) return eps_u;
    const ag::Tensor eps_c = predictor.predict(z, t, cond).value();
    for (std::size_t i = 0; i < eps_u.numel(); ++i) eps_u[i] = eps_u[i] + guidance_scale * (eps_c[i] - eps_u[i]);
    return eps_u;
}

LatentTensor sample_latent(const std::string& prompt, const Models& models, const NoiseSchedule& schedule,
                           const SamplerConfig& config, int height, int width, SampleTrace* trace) {
    config.validate(schedule);
    ag::NoGradGuard no_grad;
    const ag::Shape shape = models.codec.latent_shape(height, width);
    LatentTensor z = initial_latent(config.seed, shape);
    const ag::Var cond = models.text_encoder.encode(prompt);
    const ag::Var uncond = models.text_encoder.encode("");

    if (config.scheduler_kind == SchedulerKind::adapter_native) {
        const NativeSampler* native = models.predictor.native_sampler();
        if (!native) throw ConfigError("adapter_native sampling requested but the noise predictor has no native sampler");
        return native->run(models.predictor, cond, uncond, z, config.steps, config.guidance_scale);
    }

    if (trace) trace->latents.push_back(z.tensor());
    const auto ts = ddim_timesteps(schedule.steps(), config.steps);
    const int ratio = schedule.steps() / config.steps;
    for (int t : ts) {
        const ag::Tensor eps = guided_noise(models.predictor, z.var(), t, cond, uncond, config.guidance_scale);
        const int t_prev = t - ratio;
        const double ab_prev = t_prev >= 1 ? schedule.alpha_bar(t_prev) : 1.0;
        ag::Tensor x0(shape), next(shape);
        predict_x0<double>(z.tensor().span(), eps.span(), schedule.alpha_bar(t), x0.span());
        forward_noise<double>(x0.span(), eps.span(), ab_prev, next.span());
        z = LatentTensor(std::move(next));
        if (trace) trace->latents.push_back(z.tensor());
    }
    return z;
}

ImageTensor sample(const std::string& prompt, const Models& models, const NoiseSchedule& schedule,
                   const SamplerConfig& config, int height, int width) {
    return models.codec.decode(sample_latent(prompt, models, schedule, config, height, width));
}

}  // namespace spurgen::diffusion
