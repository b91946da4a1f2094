#pragma once

// Personalization fine-tuning with prior preservation and the spurious
// feature similarity term:
//
//   total = L_ldm + lambda * L_ppl + kappa * L_sfsl
//
// L_sfsl compares frozen reference class-wise features with features of the
// decoded one-step denoised estimate of each prior-branch example, so its
// gradient reaches both the noise predictor and the text encoder.

#include "spurgen/diffusion_core.hpp"
#include "spurgen/feature_core.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace spurgen::trainer {

struct PromptTemplate {
    std::string text = "a photo of a {identifier} {class_noun}";
    std::string identifier = "sks";
    std::string class_noun = "flower";
};

/// Renders the template. Without the identifier, the `{identifier}`
/// placeholder and one adjacent space are dropped, giving the prior prompt.
/// Throws ConfigError when `{identifier}` is absent, the identifier is empty,
/// or an unknown placeholder appears.
std::string make_prompt(const PromptTemplate& t, bool with_identifier);

struct PriorSet {
    std::vector<ImageTensor> images;
    std::vector<std::string> prompts;
    std::vector<std::uint64_t> seeds;
    diffusion::SamplerConfig provenance;
};

/// n images from `class_prompt`; image i uses seed sampler.seed + i.
PriorSet generate_prior_set(const std::string& class_prompt, int n, const diffusion::Models& models,
                            const diffusion::NoiseSchedule& schedule, const diffusion::SamplerConfig& sampler,
                            int height, int width);
/// Writes prior_NNNN.ppm files and prior_set.json into `dir`.
void save_prior_set(const std::filesystem::path& dir, const PriorSet& prior);
PriorSet load_prior_set(const std::filesystem::path& dir);

struct LossWeights {
    double lambda_ppl = 1.0;
    double kappa_sfsl = 1.0;
    features::SfslSign sfsl_sign = features::SfslSign::paper_plus;

    void validate() const;
};

struct SfslContext {
    const features::FeatureBank& bank;
    const features::FeatureExtractor& extractor;
};

struct TrainingBatch {
    std::span<const ImageTensor> ref_images;
    std::span<const std::string> ref_prompts;
    std::span<const ImageTensor> prior_images;
    std::span<const std::string> prior_prompts;
};

struct LossBreakdown {
    ag::Var total;
    double ldm = 0.0;
    double ppl = 0.0;
    double sfsl = 0.0;  // signed value; 0 when kappa == 0 (not evaluated)
    double total_value = 0.0;
};

/// RNG order: reference-branch draws, then prior-branch draws (see
/// diffusion::draw_noise). The SFSL term reuses the prior branch's z_t, t
/// and prediction and draws nothing.
LossBreakdown total_loss(const TrainingBatch& batch, const SfslContext* sfsl, const diffusion::Models& models,
                         const diffusion::NoiseSchedule& schedule, const LossWeights& weights, Rng& rng);

struct AdamWConfig {
    double learning_rate = 2e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

/// Adaptive moments with decoupled weight decay:
///   p <- p * (1 - lr * wd)
///   m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
///   p <- p - (lr / (1 - b1^t)) * m / (sqrt(v) / sqrt(1 - b2^t) + eps)
class AdamW {
public:
    AdamW(std::vector<NamedParameter> params, AdamWConfig config);
    void step();
    int steps_taken() const { return t_; }
    const AdamWConfig& config() const { return config_; }
    void set_learning_rate(double lr) { config_.learning_rate = lr; }

private:
    std::vector<NamedParameter> params_;
    AdamWConfig config_;
    std::vector<std::vector<double>> m_, v_;
    int t_ = 0;
};

struct TrainingConfig {
    int steps = 800;
    double learning_rate = 2e-6;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int batch_size = 1;
    LossWeights loss_weights;
    features::Reduction reduction = features::Reduction::mean_vector;
    bool train_text_encoder = true;
    std::string reference_image_dir;
    int class_id = 0;
    std::uint64_t seed = 0;
    PromptTemplate prompt;
    int prior_count = 0;  // 0 -> 8 x number of reference images
    int prior_steps = 25;
    double prior_guidance = 7.5;
    std::uint64_t prior_seed = 1000;
    std::string base_checkpoint;
    std::string extractor_checkpoint;
    std::string prior_dir;
    std::string output_dir;

    void validate() const;
    AdamWConfig optimizer() const { return {learning_rate, beta1, beta2, epsilon, weight_decay}; }

    /// Flat `key = value` form; unknown keys are rejected on parse.
    std::map<std::string, std::string> to_kv() const;
    static TrainingConfig from_kv(const std::map<std::string, std::string>& kv);
};

/// Parses `key = value` lines; '#' starts a comment, blank lines ignored.
std::map<std::string, std::string> parse_kv(const std::string& text);
std::string format_kv(const std::map<std::string, std::string>& kv);

struct StepRecord {
    int step = 0;  // 1-based
    double ldm = 0.0;
    double ppl = 0.0;
    double sfsl = 0.0;
    double total = 0.0;
    double lr = 0.0;

    bool operator==(const StepRecord&) const = default;
};

nlohmann::json to_json(const StepRecord& r);
StepRecord step_record_from_json(const nlohmann::json& j);
std::vector<StepRecord> read_training_log(const std::filesystem::path& path);

struct TrainableModels {
    const diffusion::ImageCodec& codec;
    diffusion::NoisePredictor& predictor;
    diffusion::TextEncoder& text_encoder;

    diffusion::Models view() const { return {codec, predictor, text_encoder}; }
};

/// Called after backward and before the optimizer update of each step.
using StepObserver = std::function<void(const StepRecord&, const std::vector<NamedParameter>& trainable)>;

struct FinetuneResult {
    std::vector<StepRecord> log;
    std::string parameter_hash;
};

/// Parameters optimized by a run: the predictor's, plus the text encoder's
/// when `train_text_encoder` is set.
std::vector<NamedParameter> trainable_parameters(const TrainingConfig& config, const TrainableModels& models);

/// Runs config.steps optimizer steps. Step i (0-based) uses reference and
/// prior examples (i * batch_size + j) mod set size, j < batch_size. When
/// config.output_dir is set the log is appended to train_log.jsonl there as
/// training proceeds and a non-finite loss leaves divergence_dump.json.
FinetuneResult finetune(const TrainingConfig& config, const TrainableModels& models,
                        std::span<const ImageTensor> references, const PriorSet& prior,
                        const SfslContext* sfsl, const diffusion::NoiseSchedule& schedule,
                        const StepObserver& observer = {});

}  // namespace spurgen::trainer
