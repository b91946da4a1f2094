#pragma once

// Class-wise neural features and the spurious-feature similarity loss.
//
// A robust classifier's penultimate activations phi(x) are reweighted by the
// final-layer weights of class k, psi_k(x) = w_k * phi(x) (elementwise), and
// the loss compares psi_k of reference spurious images with psi_k of images
// produced during fine-tuning by cosine similarity.

#include "spurgen/autograd.hpp"
#include "spurgen/error.hpp"
#include "spurgen/image.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace spurgen::features {

template <std::floating_point T>
constexpr T eps_norm() {
    if constexpr (sizeof(T) >= sizeof(double)) return T(1e-12);
    else return T(1e-8);
}

struct FeatureVector {
    std::vector<double> values;
    std::size_t dim() const { return values.size(); }
};

struct ClassWeights {
    int class_id = 0;
    std::vector<double> weights;
};

struct ClassWiseFeature {
    int class_id = 0;
    std::vector<double> values;
};

enum class Reduction { mean_vector, mean_pairwise };
enum class SfslSign { paper_plus, encourage_minus };

std::string to_string(Reduction r);
std::string to_string(SfslSign s);
Reduction parse_reduction(const std::string& s);
SfslSign parse_sfsl_sign(const std::string& s);

/// Robust feature extractor exposing penultimate activations and final-layer
/// class weights.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual int feature_dim() const = 0;
    virtual int num_classes() const = 0;
    /// {3,H,W} image in [0,1] -> {D} activations. Differentiable w.r.t. the
    /// image when differentiable() is true.
    virtual ag::Var features(const ag::Var& image) const = 0;
    virtual ClassWeights class_weights(int class_id) const = 0;
    virtual bool differentiable() const = 0;
    virtual std::string checkpoint_id() const = 0;
};

std::vector<FeatureVector> penultimate_features(std::span<const ImageTensor> images, const FeatureExtractor& extractor);

ClassWiseFeature class_wise_feature(const FeatureVector& phi, const ClassWeights& w);
/// Graph version used on the generated side of the loss.
ag::Var class_wise_feature(const ag::Var& phi, const ClassWeights& w);

/// a.b / (|a||b|), clamped to [-1,1]. Throws DegenerateInputError when either
/// norm is at or below eps_norm<T>().
template <std::floating_point T>
T cosine_similarity(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size() || a.empty()) throw ConfigError("cosine_similarity: dimension mismatch");
    T dot = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const T na = std::sqrt(aa), nb = std::sqrt(bb);
    if (!(na > eps_norm<T>()) || !(nb > eps_norm<T>())) {
        throw DegenerateInputError("cosine similarity of a near-zero-norm vector");
    }
    return std::clamp(dot / (na * nb), T(-1), T(1));
}

double cosine_similarity(const FeatureVector& a, const FeatureVector& b);

/// Immutable set of reference class-wise features for one class.
class FeatureBank {
public:
    FeatureBank(int class_id, std::vector<ClassWiseFeature> entries, std::vector<std::string> image_ids,
                Reduction reduction, std::string extractor_id);

    int class_id() const { return class_id_; }
    std::size_t dim() const { return entries_.front().values.size(); }
    std::size_t size() const { return entries_.size(); }
    Reduction reduction() const { return reduction_; }
    const std::string& extractor_id() const { return extractor_id_; }
    const std::vector<ClassWiseFeature>& entries() const { return entries_; }
    const std::vector<std::string>& image_ids() const { return image_ids_; }
    /// Mean of the entries, precomputed at construction.
    const std::vector<double>& mean_entry() const { return mean_; }

private:
    int class_id_;
    std::vector<ClassWiseFeature> entries_;
    std::vector<std::string> image_ids_;
    Reduction reduction_;
    std::string extractor_id_;
    std::vector<double> mean_;
};

double sfsl_loss(const FeatureBank& reference, std::span<const ClassWiseFeature> generated, SfslSign sign);
/// Differentiable counterpart: `generated` are psi_k graph nodes of class
/// `class_id`. Reference features are constants.
ag::Var sfsl_loss(const FeatureBank& reference, std::span<const ag::Var> generated, int class_id, SfslSign sign);

FeatureBank reference_feature_bank(std::span<const ImageTensor> images, std::span<const std::string> image_ids,
                                   const FeatureExtractor& extractor, int class_id, Reduction reduction);

// Feature cache: container magic "SPGFEAT\0", version 1. Header:
//   {"extractor_checkpoint_id", "dim", "reduction", "class_id",
//    "entries": [{"class_id", "image_id"}]}
// Payload: entries in order, each `dim` float64 values.
inline constexpr std::uint32_t kFeatureCacheVersion = 1;
void save_feature_cache(const std::filesystem::path& path, const FeatureBank& bank);
FeatureBank load_feature_cache(const std::filesystem::path& path);

}  // namespace spurgen::features
