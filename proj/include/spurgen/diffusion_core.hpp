#pragma once

// Latent-diffusion machinery: noise schedule, closed-form noising and its
// algebraic inverse, the denoising objective, and a deterministic DDIM
// sampler with classifier-free guidance.
//
// Timesteps are 1-indexed, t in [1, T].

#include "spurgen/autograd.hpp"
#include "spurgen/error.hpp"
#include "spurgen/image.hpp"
#include "spurgen/module.hpp"
#include "spurgen/rng.hpp"

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace spurgen::diffusion {

class NoiseSchedule {
public:
    /// Betas evenly spaced in [beta_start, beta_end].
    static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
    static NoiseSchedule from_betas(std::vector<double> betas);

    int steps() const { return static_cast<int>(betas_.size()); }
    double beta(int t) const { return betas_.at(index(t)); }
    double alpha_bar(int t) const { return alpha_bars_.at(index(t)); }
    const std::vector<double>& betas() const { return betas_; }
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }

private:
    explicit NoiseSchedule(std::vector<double> betas);
    std::size_t index(int t) const;

    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

/// out = sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps
template <std::floating_point T>
void forward_noise(std::span<const T> z0, std::span<const T> eps, T alpha_bar, std::span<T> out) {
    const T a = std::sqrt(alpha_bar), s = std::sqrt(T(1) - alpha_bar);
    for (std::size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + s * eps[i];
}

/// out = (z_t - sqrt(1 - alpha_bar) * eps_pred) / sqrt(alpha_bar), evaluated
/// as a product with 1/sqrt(alpha_bar). Throws when alpha_bar <= 0.
template <std::floating_point T>
void predict_x0(std::span<const T> z_t, std::span<const T> eps_pred, T alpha_bar, std::span<T> out) {
    if (!(alpha_bar > T(0))) throw DegenerateInputError("predict_x0: alpha_bar must be positive");
    const T inv = T(1) / std::sqrt(alpha_bar), s = std::sqrt(T(1) - alpha_bar);
    for (std::size_t i = 0; i < z_t.size(); ++i) out[i] = (z_t[i] - s * eps_pred[i]) * inv;
}

LatentTensor forward_noise(const LatentTensor& z0, int t, const LatentTensor& eps, const NoiseSchedule& schedule);
ag::Var forward_noise(const ag::Var& z0, int t, const ag::Var& eps, const NoiseSchedule& schedule);

/// Throws DegenerateInputError when alpha_bar(t) is zero.
LatentTensor predict_x0(const LatentTensor& z_t, int t, const LatentTensor& eps_pred, const NoiseSchedule& schedule);
ag::Var predict_x0(const ag::Var& z_t, int t, const ag::Var& eps_pred, const NoiseSchedule& schedule);

class ImageCodec : public Module {
public:
    virtual ag::Shape latent_shape(int height, int width) const = 0;
    virtual ag::Var encode(const ag::Var& image) const = 0;
    virtual ag::Var decode(const ag::Var& latent) const = 0;
    virtual bool differentiable_decode() const = 0;

    LatentTensor encode(const ImageTensor& image) const;
    /// Decodes and snaps to an 8-bit image.
    ImageTensor decode(const LatentTensor& latent) const;
};

class TextEncoder : public Module {
public:
    /// Prompt -> {L, E} embedding sequence. The empty prompt is the
    /// unconditional input used by classifier-free guidance.
    virtual ag::Var encode(const std::string& prompt) const = 0;
};

class NoisePredictor;

/// Scheduler implemented by a production adapter (e.g. a pseudo-numerical
/// method); the toy stack ships none.
class NativeSampler {
public:
    virtual ~NativeSampler() = default;
    virtual LatentTensor run(const NoisePredictor& predictor, const ag::Var& cond, const ag::Var& uncond,
                             const LatentTensor& initial, int steps, double guidance_scale) const = 0;
};

class NoisePredictor : public Module {
public:
    /// Predicted noise with the shape of z_t.
    virtual ag::Var predict(const ag::Var& z_t, int t, const ag::Var& text_embedding) const = 0;
    virtual const NativeSampler* native_sampler() const { return nullptr; }
};

struct Models {
    const ImageCodec& codec;
    const NoisePredictor& predictor;
    const TextEncoder& text_encoder;
};

enum class SchedulerKind { ddim_deterministic, adapter_native };
std::string to_string(SchedulerKind k);
SchedulerKind parse_scheduler_kind(const std::string& s);

struct SamplerConfig {
    int steps = 25;
    double guidance_scale = 7.5;
    std::uint64_t seed = 0;
    SchedulerKind scheduler_kind = SchedulerKind::ddim_deterministic;

    void validate(const NoiseSchedule& schedule) const;
};

/// Draws for one training example, in stream order: the timestep from
/// uniform_int(1, T), then one normal() per latent element in row-major order.
struct NoiseDraw {
    int t = 0;
    ag::Tensor eps;
};
NoiseDraw draw_noise(Rng& rng, const NoiseSchedule& schedule, const ag::Shape& latent_shape);

/// Per-example intermediates of a denoising loss, kept for losses that need
/// the one-step estimate.
struct BranchItem {
    ag::Var z_t;
    int t = 0;
    ag::Var eps_pred;
};

/// Mean over batch and latent elements of (eps - eps_theta(z_t, t, tau(y)))^2.
/// Examples are processed in order, each consuming one NoiseDraw.
ag::Var denoising_loss(std::span<const ImageTensor> images, std::span<const std::string> prompts, const Models& models,
                       const NoiseSchedule& schedule, Rng& rng, std::vector<BranchItem>* trace = nullptr);

/// Denoising objective on the personalization set.
ag::Var ldm_loss(std::span<const ImageTensor> images, std::span<const std::string> prompts, const Models& models,
                 const NoiseSchedule& schedule, Rng& rng, std::vector<BranchItem>* trace = nullptr);
/// Denoising objective on the prior-preservation set.
ag::Var ppl_loss(std::span<const ImageTensor> prior_images, std::span<const std::string> prior_prompts,
                 const Models& models, const NoiseSchedule& schedule, Rng& rng,
                 std::vector<BranchItem>* trace = nullptr);

/// Sampling timesteps, largest first: t_i = (steps - 1 - i) * (T / steps) + 1.
std::vector<int> ddim_timesteps(int train_steps, int steps);

/// Standard-normal latent drawn from Rng(seed) in row-major order.
LatentTensor initial_latent(std::uint64_t seed, const ag::Shape& shape);

/// eps_u + g * (eps_c - eps_u). g = 0 evaluates only the unconditional branch.
ag::Tensor guided_noise(const NoisePredictor& predictor, const ag::Var& z, int t, const ag::Var& cond,
                        const ag::Var& uncond, double guidance_scale);

struct SampleTrace {
    std::vector<ag::Tensor> latents;  // z_T, then each z_{prev} in order
};

LatentTensor sample_latent(const std::string& prompt, const Models& models, const NoiseSchedule& schedule,
                           const SamplerConfig& config, int height, int width, SampleTrace* trace = nullptr);
ImageTensor sample(const std::string& prompt, const Models& models, const NoiseSchedule& schedule,
                   const SamplerConfig& config, int height, int width);

}  // namespace spurgen::diffusion
