#include "spurgen/eval_harness.hpp"

#include "spurgen/error.hpp"
#include "spurgen/io.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace spurgen::eval {

void PredictionLog::add(PredictionRecord r) {
    if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) throw DataError("prediction confidence outside [0,1]");
    auto key = std::make_pair(r.image_id, r.classifier_id);
    if (index_.contains(key)) {
        throw DataError("duplicate prediction for image '" + r.image_id + "' and classifier '" + r.classifier_id + "'");
    }
    index_[key] = records_.size();
    records_.push_back(std::move(r));
}

void PredictionLog::merge(const PredictionLog& other) {
    for (const auto& r : other.records_) add(r);
}

const PredictionRecord* PredictionLog::find(const std::string& image_id, const std::string& classifier_id) const {
    auto it = index_.find({image_id, classifier_id});
    return it == index_.end() ? nullptr : &records_[it->second];
}

std::vector<std::string> PredictionLog::classifier_ids() const {
    std::vector<std::string> ids;
    for (const auto& r : records_)
        if (std::find(ids.begin(), ids.end(), r.classifier_id) == ids.end()) ids.push_back(r.classifier_id);
    return ids;
}

PredictionLog PredictionLog::for_classifier(const std::string& classifier_id) const {
    PredictionLog out;
    out.provenance_ = provenance_;
    for (const auto& r : records_)
        if (r.classifier_id == classifier_id) out.add(r);
    return out;
}

std::string PredictionLog::to_jsonl() const {
    std::string out;
    if (!provenance_.empty()) out += nlohmann::json{{"meta", provenance_}}.dump() + "\n";
    for (const auto& r : records_) {
        out += nlohmann::json{{"image_id", r.image_id},
                              {"classifier_id", r.classifier_id},
                              {"predicted_class", r.predicted_class},
                              {"confidence", r.confidence}}
                   .dump() +
               "\n";
    }
    return out;
}

PredictionLog PredictionLog::from_jsonl(const std::string& text) {
    PredictionLog log;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            if (j.contains("meta")) {
                for (const auto& [k, v] : j.at("meta").items()) log.provenance_[k] = v.get<std::string>();
                continue;
            }
            log.add({j.at("image_id").get<std::string>(), j.at("classifier_id").get<std::string>(),
                     j.at("predicted_class").get<int>(), j.at("confidence").get<double>()});
        } catch (const nlohmann::json::exception& e) {
            throw DataError("prediction log line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return log;
}

void PredictionLog::save(const std::filesystem::path& path) const { io::atomic_write_text(path, to_jsonl()); }

PredictionLog PredictionLog::load(const std::filesystem::path& path) { return from_jsonl(io::read_text(path)); }

PredictionLog classify(std::span<const ImageTensor> images, std::span<const std::string> image_ids,
                       const Classifier& classifier, int target_class) {
    if (images.size() != image_ids.size()) throw ConfigError("classify: one id per image required");
    if (target_class < 0 || target_class >= classifier.num_classes()) {
        throw ConfigError("target class " + std::to_string(target_class) + " outside label space of classifier '" +
                          classifier.id() + "' (" + std::to_string(classifier.num_classes()) + " classes)");
    }
    PredictionLog log;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto z = classifier.logits(images[i]);
        if (static_cast<int>(z.size()) != classifier.num_classes()) throw ConfigError("classifier returned wrong logit count");
        const auto best = std::max_element(z.begin(), z.end());
        double denom = 0.0;
        for (double v : z) denom += std::exp(v - *best);
        log.add({image_ids[i], classifier.id(), static_cast<int>(best - z.begin()), 1.0 / denom});
    }
    return log;
}

double percent_2dp(std::size_t count, std::size_t total) {
    if (total == 0) throw DataError("percentage over an empty set");
    const unsigned long long num = 10000ULL * count;
    unsigned long long q = num / total;
    const unsigned long long r = num % total;
    if (2 * r > total || (2 * r == total && (q % 2 == 1))) ++q;
    return static_cast<double>(q) / 100.0;
}

double mean_2dp(std::span<const double> values) {
    if (values.empty()) throw DataError("mean over an empty set");
    bool on_grid = true;
    long long hundredths = 0;
    for (double v : values) {
        const double scaled = v * 100.0;
        const double r = std::nearbyint(scaled);
        if (std::abs(scaled - r) > 1e-6) on_grid = false;
        hundredths += static_cast<long long>(r);
    }
    if (on_grid && hundredths >= 0) {
        // Exact rational mean of two-decimal values; q / 100 is then rounded
        // half-to-even at the second decimal.
        const unsigned long long n = values.size();
        const auto num = static_cast<unsigned long long>(hundredths);
        unsigned long long q = num / n;
        const unsigned long long r = num % n;
        if (2 * r > n || (2 * r == n && (q % 2 == 1))) ++q;
        return static_cast<double>(q) / 100.0;
    }
    const double m = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    return std::nearbyint(m * 100.0) / 100.0;
}

double spurious_accuracy(const PredictionLog& log, int target_class, std::span<const std::string> universe,
                         const std::string& classifier_id) {
    if (universe.empty()) throw DataError("spurious accuracy over an empty universe");
    std::string cid = classifier_id;
    if (cid.empty()) {
        const auto ids = log.classifier_ids();
        if (ids.size() != 1) throw ConfigError("log holds several classifiers; name one");
        cid = ids.front();
    }
    std::size_t hits = 0;
    for (const auto& id : universe) {
        const PredictionRecord* r = log.find(id, cid);
        if (!r) throw DataError("no prediction for image '" + id + "' from classifier '" + cid + "'");
        if (r->predicted_class == target_class) ++hits;
    }
    return percent_2dp(hits, universe.size());
}

std::vector<std::string> consistency_filter(std::span<const PredictionLog> logs, int target_class,
                                            std::size_t select_n) {
    if (logs.empty()) throw ConfigError("consistency filter needs at least one classifier log");
    if (select_n == 0) throw ConfigError("consistency filter select_n must be positive");

    std::set<std::string> ids;
    for (const auto& r : logs[0].records()) ids.insert(r.image_id);
    std::vector<std::string> classifier_of(logs.size());
    for (std::size_t c = 0; c < logs.size(); ++c) {
        const auto cids = logs[c].classifier_ids();
        if (cids.size() != 1) throw DataError("each consistency-filter log must hold exactly one classifier");
        classifier_of[c] = cids.front();
        std::set<std::string> these;
        for (const auto& r : logs[c].records()) these.insert(r.image_id);
        if (these != ids) throw DataError("classifier logs do not cover the same images");
    }

    std::vector<std::pair<double, std::string>> qualifying;
    for (const auto& id : ids) {
        double min_conf = 1.0;
        bool all = true;
        for (std::size_t c = 0; c < logs.size() && all; ++c) {
            const PredictionRecord* r = logs[c].find(id, classifier_of[c]);
            all = r->predicted_class == target_class;
            min_conf = std::min(min_conf, r->confidence);
        }
        if (all) qualifying.emplace_back(min_conf, id);
    }
    if (qualifying.size() < select_n) {
        throw ShortfallError("consistency filter shortfall: " + std::to_string(qualifying.size()) +
                                 " images qualify, " + std::to_string(select_n) + " requested",
                             qualifying.size());
    }
    std::sort(qualifying.begin(), qualifying.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < select_n; ++i) out.push_back(qualifying[i].second);
    return out;
}

std::string to_string(SpuriousKind k) {
    switch (k) {
        case SpuriousKind::class_extension: return "class_extension";
        case SpuriousKind::shared_feature: return "shared_feature";
        case SpuriousKind::not_spurious: return "not_spurious";
    }
    return "?";
}

SpuriousKind spurious_predicate(const ContentLabels& labels, const PredictionRecord& prediction, int target_class) {
    if (!labels.has_spurious_feature || labels.present_classes.contains(target_class) ||
        prediction.predicted_class != target_class) {
        return SpuriousKind::not_spurious;
    }
    // Any other depicted class means the feature was favoured over it.
    return labels.present_classes.empty() ? SpuriousKind::class_extension : SpuriousKind::shared_feature;
}

SpuriousKind spurious_predicate(const std::map<std::string, ContentLabels>& labels,
                                const PredictionRecord& prediction, int target_class) {
    auto it = labels.find(prediction.image_id);
    if (it == labels.end()) throw DataError("no content labels for image '" + prediction.image_id + "'");
    return spurious_predicate(it->second, prediction, target_class);
}

std::vector<AblationRow> ablation_report(std::span<const AccuracyGrid> runs) {
    if (runs.empty()) throw DataError("ablation report needs at least one run");
    std::vector<AblationRow> rows;
    for (const auto& run : runs) {
        if (run.cells.empty()) throw DataError("run '" + run.config_tag + "' has no cells");
        if (run.cells.size() != runs[0].cells.size() ||
            !std::equal(run.cells.begin(), run.cells.end(), runs[0].cells.begin(),
                        [](const auto& a, const auto& b) { return a.first == b.first; })) {
            throw DataError("ragged grid: run '" + run.config_tag + "' covers different class x classifier cells");
        }
        std::vector<double> values;
        for (const auto& [key, v] : run.cells) values.push_back(v);
        rows.push_back({run.config_tag, mean_2dp(values), values.size()});
    }
    return rows;
}

namespace {

std::string fixed2(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') cur += '"', ++i;
            else if (c == '"') quoted = false;
            else cur += c;
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

std::string ablation_csv(std::span<const AblationRow> rows) {
    std::string out = "config_tag,average_spurious_accuracy,cells\n";
    for (const auto& r : rows) out += csv_field(r.config_tag) + "," + fixed2(r.mean) + "," + std::to_string(r.cells) + "\n";
    return out;
}

std::string ablation_markdown(std::span<const AblationRow> rows) {
    std::string out = "| Ablation | Average Spurious Accuracy (%) |\n|---|---:|\n";
    for (const auto& r : rows) out += "| " + r.config_tag + " | " + fixed2(r.mean) + " |\n";
    return out;
}

std::string grid_csv(const AccuracyGrid& grid) {
    std::string out = "class_id,classifier_id,spurious_accuracy\n";
    for (const auto& [key, v] : grid.cells) out += std::to_string(key.first) + "," + csv_field(key.second) + "," + fixed2(v) + "\n";
    return out;
}

AccuracyGrid grid_from_csv(const std::string& text, const std::string& config_tag) {
    AccuracyGrid g{config_tag, {}};
    std::istringstream is(text);
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        const auto f = split_csv_line(line);
        if (f.size() != 3) throw DataError("accuracy grid row must have 3 fields: " + line);
        try {
            g.cells[{std::stoi(f[0]), f[1]}] = std::stod(f[2]);
        } catch (const std::logic_error&) {
            throw DataError("malformed accuracy grid row: " + line);
        }
    }
    return g;
}

std::string to_string(Source s) { return s == Source::reference_dataset ? "reference_dataset" : "generated"; }

void SpuriousAccuracyTable::set(const std::string& classifier_id, int class_id, Source source, double percent) {
    if (!(percent >= 0.0 && percent <= 100.0)) throw DataError("spurious accuracy cell outside [0,100]");
    cells_[classifier_id][{class_id, source}] = percent;
}

std::optional<double> SpuriousAccuracyTable::get(const std::string& classifier_id, int class_id, Source source) const {
    auto row = cells_.find(classifier_id);
    if (row == cells_.end()) return std::nullopt;
    auto cell = row->second.find({class_id, source});
    if (cell == row->second.end()) return std::nullopt;
    return cell->second;
}

std::vector<std::string> SpuriousAccuracyTable::classifiers() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : cells_) out.push_back(k);
    return out;
}

std::vector<std::pair<int, Source>> SpuriousAccuracyTable::columns() const {
    std::set<std::pair<int, Source>> cols;
    for (const auto& [k, row] : cells_)
        for (const auto& [c, v] : row) cols.insert(c);
    return {cols.begin(), cols.end()};
}

std::string SpuriousAccuracyTable::to_csv() const {
    const auto cols = columns();
    std::string out = "classifier_id";
    for (const auto& [cls, src] : cols) out += ",class" + std::to_string(cls) + ":" + to_string(src);
    out += "\n";
    for (const auto& cid : classifiers()) {
        out += csv_field(cid);
        for (const auto& [cls, src] : cols) {
            const auto v = get(cid, cls, src);
            out += "," + (v ? fixed2(*v) : std::string("N/A"));
        }
        out += "\n";
    }
    return out;
}

std::string SpuriousAccuracyTable::to_markdown() const {
    const auto cols = columns();
    std::string out = "| Model |";
    std::string rule = "|---|";
    for (const auto& [cls, src] : cols) {
        out += " class " + std::to_string(cls) + " (" + (src == Source::reference_dataset ? "reference" : "generated") + ") |";
        rule += "---:|";
    }
    out += "\n" + rule + "\n";
    for (const auto& cid : classifiers()) {
        out += "| " + cid + " |";
        for (const auto& [cls, src] : cols) {
            const auto v = get(cid, cls, src);
            out += " " + (v ? fixed2(*v) : std::string("N/A")) + " |";
        }
        out += "\n";
    }
    return out;
}

std::vector<QualityRow> quality_scores(std::span<const QualityInput> inputs, const QualityScorer* scorer) {
    std::vector<QualityRow> rows;
    auto mean_score = [scorer](const std::vector<ImageTensor>& imgs) -> std::optional<double> {
        if (!scorer || imgs.empty()) return std::nullopt;
        double acc = 0.0;
        for (const auto& img : imgs) {
            const double s = scorer->score(img);
            if (!(s >= 0.0 && s <= 1.0)) throw DataError("quality scorer returned a value outside [0,1]");
            acc += s;
        }
        return acc / static_cast<double>(imgs.size());
    };
    for (const auto& in : inputs) {
        rows.push_back({in.class_id, mean_score(in.real), mean_score(in.generated), in.real.size(), in.generated.size()});
    }
    return rows;
}

std::string quality_csv(std::span<const QualityRow> rows) {
    std::string out = "class_id,real_mean,real_n,generated_mean,generated_n\n";
    auto cell = [](const std::optional<double>& v) { return v ? fixed2(*v) : std::string("N/A"); };
    for (const auto& r : rows) {
        out += std::to_string(r.class_id) + "," + cell(r.real_mean) + "," + std::to_string(r.real_n) + "," +
               cell(r.generated_mean) + "," + std::to_string(r.generated_n) + "\n";
    }
    return out;
}

std::string quality_markdown(std::span<const QualityRow> rows) {
    std::string out = "| Class | Real | Generated |\n|---|---:|---:|\n";
    auto cell = [](const std::optional<double>& v, std::size_t n) {
        return (v ? fixed2(*v) : std::string("N/A")) + " (n=" + std::to_string(n) + ")";
    };
    for (const auto& r : rows) {
        out += "| " + std::to_string(r.class_id) + " | " + cell(r.real_mean, r.real_n) + " | " +
               cell(r.generated_mean, r.generated_n) + " |\n";
    }
    return out;
}

std::vector<std::string> recontextualize_prompts(const trainer::PromptTemplate& base,
                                                 std::span<const std::string> contexts) {
    if (contexts.empty()) throw ConfigError("recontextualization needs at least one context");
    const std::string prompt = trainer::make_prompt(base, true);
    std::vector<std::string> out;
    for (const auto& c : contexts) out.push_back(c.empty() ? prompt : prompt + " " + c);
    return out;
}

std::vector<Rating> ratings_from_jsonl(const std::string& text) {
    std::vector<Rating> out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            Rating r{j.at("user_id").get<std::string>(), j.at("image_id").get<std::string>(), j.at("score").get<int>()};
            if (r.score < 1 || r.score > 5) throw DataError("rating score outside 1..5 on line " + std::to_string(lineno));
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("ratings line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

double RatingDistribution::real_percent(int score) const {
    const auto n = std::accumulate(real.begin(), real.end(), std::size_t{0});
    return n == 0 ? 0.0 : 100.0 * static_cast<double>(real.at(score - 1)) / static_cast<double>(n);
}

double RatingDistribution::generated_percent(int score) const {
    const auto n = std::accumulate(generated.begin(), generated.end(), std::size_t{0});
    return n == 0 ? 0.0 : 100.0 * static_cast<double>(generated.at(score - 1)) / static_cast<double>(n);
}

RatingDistribution rating_distribution(std::span<const Rating> ratings,
                                       const std::function<bool(const std::string&)>& is_generated) {
    RatingDistribution d;
    for (const auto& r : ratings) {
        if (r.score < 1 || r.score > 5) throw DataError("rating score outside 1..5");
        (is_generated(r.image_id) ? d.generated : d.real)[r.score - 1]++;
    }
    return d;
}

std::string rating_csv(const RatingDistribution& d) {
    std::string out = "score,real_count,real_percent,generated_count,generated_percent\n";
    for (int s = 1; s <= 5; ++s) {
        out += std::to_string(s) + "," + std::to_string(d.real[s - 1]) + "," + fixed2(d.real_percent(s)) + "," +
               std::to_string(d.generated[s - 1]) + "," + fixed2(d.generated_percent(s)) + "\n";
    }
    return out;
}

}  // namespace spurgen::eval
