#pragma once

// Desk-scale synthetic world with a planted spurious feature.
//
// Images are small RGB rasters on a gray background. Class c is a dark shape
// in the lower-right region; its planted feature is a colored patch in the
// top-left region. With correlation_strength p, a class image carries its
// own patch with probability p and otherwise a patch drawn uniformly from
// {none, patch_0, ..., patch_{K-1}}, so p = 0 makes patch and class
// independent. Everything below is sized so a full end-to-end run fits a
// single CPU core.

#include "spurgen/diffusion_core.hpp"
#include "spurgen/eval_harness.hpp"
#include "spurgen/feature_core.hpp"
#include "spurgen/trainer.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace spurgen::toy {

struct SynthDatasetConfig {
    int image_size = 16;
    int num_classes = 3;
    std::vector<std::string> class_nouns = {"bird", "car", "boat"};
    std::string feature_noun = "flower";
    double correlation_strength = 1.0;
    int train_per_class = 120;
    int train_feature_only_per_class = 40;
    int test_per_class = 40;
    int test_feature_only_per_class = 40;
    int test_shared_per_class = 20;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static SynthDatasetConfig from_json(const nlohmann::json& j);
};

enum class Split { train, test };
/// object: class object (maybe with a patch); feature_only: patch, no object;
/// shared: object l with the patch of some k != l.
enum class ItemKind { object, feature_only, shared };

std::string to_string(Split s);
std::string to_string(ItemKind k);

struct SynthItem {
    std::string image_id;
    Split split = Split::train;
    ItemKind kind = ItemKind::object;
    int object_class = -1;   // -1: no object
    int feature_class = -1;  // -1: no patch
    std::string caption;
    ImageTensor image;

    /// Any planted patch counts as the spurious feature.
    eval::ContentLabels labels() const;
    /// Only the patch of `target_class` counts as the spurious feature.
    eval::ContentLabels labels_for(int target_class) const;
};

struct SynthDataset {
    SynthDatasetConfig config;
    std::vector<SynthItem> items;

    /// Items matching split and kind; class filters of -2 match anything.
    std::vector<const SynthItem*> select(Split split, ItemKind kind, int object_class = -2,
                                         int feature_class = -2) const;
    const SynthItem& at(const std::string& image_id) const;
};

/// Draws one image. Consumes a fixed number of rng draws per call.
ImageTensor render_item(const SynthDatasetConfig& config, int object_class, int feature_class, Rng& rng);

SynthDataset synth_dataset(const SynthDatasetConfig& config);

/// Directory of <image_id>.ppm files plus labels.json:
///   {"config": {...}, "items": [{"image_id", "file", "split", "kind",
///    "object_class", "feature_class", "caption", "present_classes",
///    "has_spurious_feature", "feature_id"}]}
void save_dataset(const std::filesystem::path& dir, const SynthDataset& dataset);
SynthDataset load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Models

class IdentityCodec : public diffusion::ImageCodec {
public:
    ag::Shape latent_shape(int height, int width) const override { return {3, height, width}; }
    ag::Var encode(const ag::Var& image) const override { return image; }
    ag::Var decode(const ag::Var& latent) const override { return latent; }
    bool differentiable_decode() const override { return true; }
    std::vector<NamedParameter> named_parameters() const override { return {}; }
    nlohmann::json metadata() const override { return {{"type", "identity"}}; }
    using ImageCodec::decode;
    using ImageCodec::encode;
};

/// z = 2 * avgpool2(x) - 1, x = (upsample2(z) + 1) / 2. Exact on images that
/// are constant over aligned 2x2 blocks.
class DownsampleCodec : public diffusion::ImageCodec {
public:
    ag::Shape latent_shape(int height, int width) const override;
    ag::Var encode(const ag::Var& image) const override;
    ag::Var decode(const ag::Var& latent) const override;
    bool differentiable_decode() const override { return true; }
    std::vector<NamedParameter> named_parameters() const override { return {}; }
    nlohmann::json metadata() const override { return {{"type", "downsample2"}}; }
    using ImageCodec::decode;
    using ImageCodec::encode;
};

std::unique_ptr<diffusion::ImageCodec> make_codec(const std::string& type);

/// Whitespace tokens, lowercased, punctuation stripped. Unknown words map to
/// <unk>; the empty prompt is the single token <null>.
class Vocabulary {
public:
    explicit Vocabulary(std::vector<std::string> words);
    /// Base words plus the given nouns, deduplicated, order preserved.
    static Vocabulary standard(const std::vector<std::string>& extra_nouns);

    std::vector<int> tokenize(const std::string& prompt) const;
    int size() const { return static_cast<int>(words_.size()); }
    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
};

class ToyTextEncoder : public diffusion::TextEncoder {
public:
    ToyTextEncoder(Vocabulary vocab, int embed_dim, std::uint64_t seed);

    ag::Var encode(const std::string& prompt) const override;
    std::vector<NamedParameter> named_parameters() const override;
    nlohmann::json metadata() const override;
    static std::unique_ptr<ToyTextEncoder> from_metadata(const nlohmann::json& meta);
    std::unique_ptr<ToyTextEncoder> clone() const;

    int embed_dim() const { return embed_dim_; }
    const Vocabulary& vocabulary() const { return vocab_; }

private:
    Vocabulary vocab_;
    int embed_dim_;
    ag::Var table_;
};

struct PredictorConfig {
    int latent_channels = 3;
    int hidden = 32;
    int embed_dim = 8;
    int time_dim = 16;
    int blocks = 2;

    nlohmann::json to_json() const;
    static PredictorConfig from_json(const nlohmann::json& j);
};

/// Sinusoidal features of t: [sin(t w_i), cos(t w_i)], w_i = 10000^(-i/half).
std::vector<double> time_features(int t, int dim);

/// Convolutional noise predictor with coordinate channels. Conditioning
/// c = [time features; mean-pooled text] enters every stage as a per-channel
/// bias:
///   h = silu(conv_in([z; coords]) + A_0 c + a_0)
///   per block b:  u = silu(conv_b1(h) + A_b c + a_b + G_b pool(h))
///                 h = h + conv_b2(u)
///   eps = conv_out(silu(h))
class ToyNoisePredictor : public diffusion::NoisePredictor {
public:
    ToyNoisePredictor(PredictorConfig config, std::uint64_t seed);

    ag::Var predict(const ag::Var& z_t, int t, const ag::Var& text_embedding) const override;
    std::vector<NamedParameter> named_parameters() const override;
    nlohmann::json metadata() const override;
    static std::unique_ptr<ToyNoisePredictor> from_metadata(const nlohmann::json& meta);
    std::unique_ptr<ToyNoisePredictor> clone() const;

    const PredictorConfig& config() const { return config_; }

private:
    struct Block {
        ag::Var conv1_w, conv1_b, cond_w, cond_b, global_w, global_b, conv2_w, conv2_b;
    };
    PredictorConfig config_;
    ag::Var in_w_, in_b_, cond_w_, cond_b_, out_w_, out_b_;
    std::vector<Block> blocks_;
};

struct ClassifierSpec {
    std::string id;
    int hidden = 8;
    int feature_dim = 16;
    std::uint64_t seed = 0;
};

/// conv3x3(3->hidden), silu, avgpool2, conv3x3(hidden->D), silu, global mean
/// pool = phi (D), then logits = W phi + b.
class ToyClassifier : public features::FeatureExtractor, public eval::Classifier, public Module {
public:
    ToyClassifier(ClassifierSpec spec, int num_classes);

    // eval::Classifier
    std::string id() const override { return spec_.id; }
    int num_classes() const override { return num_classes_; }
    std::vector<double> logits(const ImageTensor& image) const override;

    // features::FeatureExtractor
    int feature_dim() const override { return spec_.feature_dim; }
    ag::Var features(const ag::Var& image) const override;
    features::ClassWeights class_weights(int class_id) const override;
    bool differentiable() const override { return true; }
    std::string checkpoint_id() const override;

    ag::Var logits(const ag::Var& image) const;
    std::vector<NamedParameter> named_parameters() const override;
    nlohmann::json metadata() const override;
    static std::unique_ptr<ToyClassifier> from_metadata(const nlohmann::json& meta);

    const ClassifierSpec& spec() const { return spec_; }

private:
    ClassifierSpec spec_;
    int num_classes_;
    ag::Var conv1_w_, conv1_b_, conv2_w_, conv2_b_, fc_w_, fc_b_;
};

/// Hand-set rule: predicts the class whose patch color dominates the
/// top-left region; the uniform distribution when there is no patch. Used as
/// an oracle and as a stub classifier in fixtures.
class ColorRuleClassifier : public eval::Classifier {
public:
    ColorRuleClassifier(std::string id, int num_classes) : id_(std::move(id)), num_classes_(num_classes) {}
    std::string id() const override { return id_; }
    int num_classes() const override { return num_classes_; }
    std::vector<double> logits(const ImageTensor& image) const override;

private:
    std::string id_;
    int num_classes_;
};

/// RGB color of the patch planted for class k.
std::array<double, 3> patch_color(int class_id);

struct ClassifierTrainConfig {
    int max_epochs = 40;
    double learning_rate = 5e-3;
    int batch_size = 16;
    double min_accuracy = 0.95;
};

/// Trains on the train-split object images until accuracy >= min_accuracy.
/// Returns the final train accuracy; throws DataError with the per-epoch
/// history when the budget runs out.
double train_classifier(ToyClassifier& classifier, const SynthDataset& dataset, const ClassifierTrainConfig& config,
                        std::uint64_t seed);
double train_accuracy(const ToyClassifier& classifier, const SynthDataset& dataset);

struct DiffusionPretrainConfig {
    int steps = 8000;
    int batch_size = 4;
    double learning_rate = 2e-3;
    double null_caption_rate = 0.1;
};

/// Denoising pretraining on all train-split items with their captions; a
/// caption is replaced by "" with probability null_caption_rate. The
/// learning rate follows a half-cosine decay to zero.
std::vector<double> pretrain_diffusion(ToyNoisePredictor& predictor, ToyTextEncoder& text_encoder,
                                       const diffusion::ImageCodec& codec, const SynthDataset& dataset,
                                       const diffusion::NoiseSchedule& schedule,
                                       const DiffusionPretrainConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Presets and bundles

struct EndToEndConfig {
    int target_class = 0;
    std::size_t select_n = 6;
    int finetune_steps = 200;
    double learning_rate = 5e-4;
    int sample_n = 64;
    int sampler_steps = 25;
    double guidance = 7.5;
    int prior_per_reference = 8;
    std::vector<double> kappas = {1.0};
    features::Reduction reduction = features::Reduction::mean_vector;
    std::vector<std::string> contexts = {"", "on the beach", "in the garden"};
    int recontext_n = 8;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static EndToEndConfig from_json(const nlohmann::json& j);
};

struct ToyPreset {
    std::string name;
    SynthDatasetConfig data;
    std::string codec = "downsample2";
    int text_embed_dim = 16;
    PredictorConfig predictor;
    std::vector<ClassifierSpec> ensemble;
    ClassifierTrainConfig classifier_training;
    DiffusionPretrainConfig diffusion_pretraining;
    EndToEndConfig e2e;

    nlohmann::json to_json() const;
    static ToyPreset from_json(const nlohmann::json& j);
};

/// "unit" (seconds, for unit tests), "ci" (acceptance scale) or "full".
ToyPreset toy_preset(const std::string& name);

struct ToyModelBundle {
    ToyPreset preset;
    std::uint64_t seed = 0;
    SynthDataset dataset;
    std::unique_ptr<diffusion::ImageCodec> codec;
    std::unique_ptr<ToyTextEncoder> text_encoder;
    std::unique_ptr<ToyNoisePredictor> predictor;
    /// The first classifier doubles as the feature extractor.
    std::vector<std::unique_ptr<ToyClassifier>> classifiers;
    diffusion::NoiseSchedule schedule = diffusion::NoiseSchedule::linear();
    std::vector<double> classifier_accuracy;

    const ToyClassifier& extractor() const { return *classifiers.front(); }
    diffusion::Models models() const { return {*codec, *predictor, *text_encoder}; }
    /// Hash over every model's parameters in a fixed order.
    std::string parameter_hash() const;
};

ToyModelBundle build_toy_models(const ToyPreset& preset, std::uint64_t seed);

/// Bundle directory layout:
///   bundle.json            {"preset", "seed", "classifier_accuracy", "classifiers": [ids]}
///   diffusion.ckpt         predictor.* and text_encoder.* parameters
///   classifier_<id>.ckpt   one per ensemble member
void save_bundle(const std::filesystem::path& dir, const ToyModelBundle& bundle);
ToyModelBundle load_bundle(const std::filesystem::path& dir);

/// Loads `<cache_root>/<preset>-<seed>-<config digest>` or builds and stores
/// it there (written to a temporary directory and renamed into place).
ToyModelBundle load_or_build_bundle(const ToyPreset& preset, std::uint64_t seed,
                                    const std::filesystem::path& cache_root);

// Diffusion checkpoint (kind "toy_diffusion"): metadata {"predictor",
// "text_encoder", "codec"} and parameters prefixed predictor. / text_encoder.
void save_diffusion_checkpoint(const std::filesystem::path& path, const diffusion::ImageCodec& codec,
                               const ToyNoisePredictor& predictor, const ToyTextEncoder& text_encoder);

struct DiffusionStack {
    std::unique_ptr<diffusion::ImageCodec> codec;
    std::unique_ptr<ToyNoisePredictor> predictor;
    std::unique_ptr<ToyTextEncoder> text_encoder;
    diffusion::Models models() const { return {*codec, *predictor, *text_encoder}; }
};
DiffusionStack load_diffusion_checkpoint(const std::filesystem::path& path);

// Classifier checkpoints: kind "toy_classifier" (trained convnet) or
// "color_rule" (no parameters, metadata {"id", "num_classes"}).
void save_classifier(const std::filesystem::path& path, const ToyClassifier& classifier);
void save_color_rule_classifier(const std::filesystem::path& path, const std::string& id, int num_classes);
std::unique_ptr<eval::Classifier> load_classifier(const std::filesystem::path& path);
std::unique_ptr<ToyClassifier> load_toy_classifier(const std::filesystem::path& path);

/// Mean local contrast squashed to [0,1]; stands in for a learned quality
/// metric in reports.
class ContrastQualityScorer : public eval::QualityScorer {
public:
    double score(const ImageTensor& image) const override;
};

// ---------------------------------------------------------------------------
// End-to-end run

struct ArmSpec {
    std::string tag;
    double kappa = 0.0;
    features::SfslSign sign = features::SfslSign::paper_plus;
    bool train_text_encoder = true;
    bool use_bank = true;
    bool sample = true;
};

/// Fixed arm list: vanilla (frozen text encoder, no bank), trainable text
/// encoder (no bank), a kappa = 0 run with the bank attached (not sampled),
/// then one arm per (kappa, sign) pair.
std::vector<ArmSpec> arm_specs(const EndToEndConfig& config);

struct ArmResult {
    ArmSpec spec;
    trainer::TrainingConfig training;
    std::vector<trainer::StepRecord> log;
    std::string parameter_hash;
    double max_identity_error = 0.0;  // max |total - (ldm + lambda ppl + kappa sfsl)| over steps
    std::map<std::string, double> spurious_accuracy;  // classifier id -> percent
    std::vector<std::string> sample_ids;
};

struct RecontextRow {
    std::string context;
    std::string prompt;
    std::map<std::string, double> spurious_accuracy;
};

struct ToyReport {
    int target_class = 0;
    std::string target_noun;
    std::vector<std::string> selected_ids;
    eval::SpuriousAccuracyTable table;
    std::vector<eval::AblationRow> ablation;
    std::vector<eval::QualityRow> quality;
    std::vector<RecontextRow> recontext;
    std::vector<ArmResult> arms;
    bool kappa0_matches_dreambooth = false;
    double max_identity_error = 0.0;
    double elapsed_seconds = 0.0;

    nlohmann::json to_json() const;
    std::string to_markdown() const;
};

/// filter -> feature bank -> prior set -> fine-tune each arm -> sample ->
/// per-classifier spurious accuracy -> ablation. Writes into out_dir:
///   report.md, report.json, spurious_accuracy.csv, ablation.csv,
///   quality.csv, recontext.csv, selected_ids.txt, filter_logs.jsonl,
///   arms/<tag>/{train_log.jsonl, samples.ppm, predictions.jsonl}.
/// A stage failure is rethrown with the stage name prefixed to the message.
ToyReport run_end_to_end(const ToyModelBundle& bundle, const EndToEndConfig& config,
                         const std::filesystem::path& out_dir);

/// Column headers of the report CSVs, for schema checks.
const std::vector<std::string>& ablation_csv_header();
const std::vector<std::string>& recontext_csv_header();

}  // namespace spurgen::toy
