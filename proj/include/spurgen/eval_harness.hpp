#pragma once

// Measurements over classifier predictions: spurious accuracy per classifier,
// the ensemble consistency filter, spurious-feature predicates, ablation
// averages, quality tables, prompt sweeps and rating distributions.

#include "spurgen/image.hpp"
#include "spurgen/trainer.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace spurgen::eval {

class Classifier {
public:
    virtual ~Classifier() = default;
    virtual std::string id() const = 0;
    virtual int num_classes() const = 0;
    virtual std::vector<double> logits(const ImageTensor& image) const = 0;
};

struct PredictionRecord {
    std::string image_id;
    std::string classifier_id;
    int predicted_class = 0;
    double confidence = 0.0;

    bool operator==(const PredictionRecord&) const = default;
};

/// Records unique per (image_id, classifier_id), confidences in [0,1].
///
/// Line-delimited file form: one JSON object per record with keys
/// image_id, classifier_id, predicted_class, confidence. An optional first
/// line {"meta": {...}} carries provenance such as preprocessing.
class PredictionLog {
public:
    void add(PredictionRecord r);
    void merge(const PredictionLog& other);

    const std::vector<PredictionRecord>& records() const { return records_; }
    const PredictionRecord* find(const std::string& image_id, const std::string& classifier_id) const;
    std::vector<std::string> classifier_ids() const;
    /// Log restricted to one classifier.
    PredictionLog for_classifier(const std::string& classifier_id) const;

    std::map<std::string, std::string>& provenance() { return provenance_; }
    const std::map<std::string, std::string>& provenance() const { return provenance_; }

    std::string to_jsonl() const;
    static PredictionLog from_jsonl(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static PredictionLog load(const std::filesystem::path& path);

    bool operator==(const PredictionLog& other) const { return records_ == other.records_; }

private:
    std::vector<PredictionRecord> records_;
    std::map<std::pair<std::string, std::string>, std::size_t> index_;
    std::map<std::string, std::string> provenance_;
};

/// Argmax class and max softmax probability per image.
PredictionLog classify(std::span<const ImageTensor> images, std::span<const std::string> image_ids,
                       const Classifier& classifier, int target_class);

/// Percent with two decimals, rounded half-to-even on the exact rational
/// 100 * count / total.
double percent_2dp(std::size_t count, std::size_t total);
/// Mean of values, rounded half-to-even to two decimals.
double mean_2dp(std::span<const double> values);

/// 100 * |{id in universe : predicted = k}| / |universe| for a single
/// classifier's log (or the named classifier of a mixed log).
double spurious_accuracy(const PredictionLog& log, int target_class, std::span<const std::string> universe,
                         const std::string& classifier_id = "");

/// Ids predicted as k by every log, ranked by descending minimum confidence
/// across classifiers (ties by ascending id), truncated to select_n. Throws
/// ShortfallError when fewer than select_n qualify.
std::vector<std::string> consistency_filter(std::span<const PredictionLog> logs, int target_class,
                                            std::size_t select_n);

struct ContentLabels {
    std::string image_id;
    std::set<int> present_classes;
    bool has_spurious_feature = false;
    std::string feature_id;
};

enum class SpuriousKind { class_extension, shared_feature, not_spurious };
std::string to_string(SpuriousKind k);

SpuriousKind spurious_predicate(const ContentLabels& labels, const PredictionRecord& prediction, int target_class);
/// Looks up the record's image in `labels`; throws DataError when absent.
SpuriousKind spurious_predicate(const std::map<std::string, ContentLabels>& labels,
                                const PredictionRecord& prediction, int target_class);

/// Spurious accuracy cells for one run: (class_id, classifier_id) -> percent.
struct AccuracyGrid {
    std::string config_tag;
    std::map<std::pair<int, std::string>, double> cells;
};

struct AblationRow {
    std::string config_tag;
    double mean = 0.0;
    std::size_t cells = 0;
};

/// Mean over all grid cells per run. All runs must cover the same grid.
std::vector<AblationRow> ablation_report(std::span<const AccuracyGrid> runs);
std::string ablation_csv(std::span<const AblationRow> rows);
std::string ablation_markdown(std::span<const AblationRow> rows);

std::string grid_csv(const AccuracyGrid& grid);
AccuracyGrid grid_from_csv(const std::string& text, const std::string& config_tag);

enum class Source { reference_dataset, generated };
std::string to_string(Source s);

/// Rows: classifier ids. Columns: (class_id, source). Cells in [0,100].
class SpuriousAccuracyTable {
public:
    void set(const std::string& classifier_id, int class_id, Source source, double percent);
    std::optional<double> get(const std::string& classifier_id, int class_id, Source source) const;
    std::vector<std::string> classifiers() const;
    std::vector<std::pair<int, Source>> columns() const;
    std::string to_csv() const;
    std::string to_markdown() const;

private:
    std::map<std::string, std::map<std::pair<int, Source>, double>> cells_;
};

class QualityScorer {
public:
    virtual ~QualityScorer() = default;
    /// Score in [0,1].
    virtual double score(const ImageTensor& image) const = 0;
};

struct QualityInput {
    int class_id = 0;
    std::vector<ImageTensor> real;
    std::vector<ImageTensor> generated;
};

struct QualityRow {
    int class_id = 0;
    std::optional<double> real_mean;  // empty -> N/A
    std::optional<double> generated_mean;
    std::size_t real_n = 0;
    std::size_t generated_n = 0;
};

/// Per-class mean scores; a null scorer yields N/A cells.
std::vector<QualityRow> quality_scores(std::span<const QualityInput> inputs, const QualityScorer* scorer);
std::string quality_csv(std::span<const QualityRow> rows);
std::string quality_markdown(std::span<const QualityRow> rows);

/// One prompt per context: the identifier prompt followed by the context.
/// An empty context leaves the base prompt unchanged.
std::vector<std::string> recontextualize_prompts(const trainer::PromptTemplate& base,
                                                 std::span<const std::string> contexts);

struct Rating {
    std::string user_id;
    std::string image_id;
    int score = 0;  // 1..5
};

std::vector<Rating> ratings_from_jsonl(const std::string& text);

struct RatingDistribution {
    std::array<std::size_t, 5> real{};       // counts of scores 1..5
    std::array<std::size_t, 5> generated{};
    double real_percent(int score) const;
    double generated_percent(int score) const;
};

RatingDistribution rating_distribution(std::span<const Rating> ratings,
                                       const std::function<bool(const std::string&)>& is_generated);
std::string rating_csv(const RatingDistribution& d);

}  // namespace spurgen::eval
