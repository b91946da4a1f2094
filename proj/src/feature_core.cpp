#include "spurgen/feature_core.hpp"

#include "spurgen/io.hpp"

namespace spurgen::features {

namespace {
constexpr io::Magic kFeatureMagic{'S', 'P', 'G', 'F', 'E', 'A', 'T', '\0'};

void check_dim(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw ConfigError(std::string(what) + ": dimension mismatch (" + std::to_string(a) + " vs " +
                          std::to_string(b) + ")");
    }
}
}  // namespace

std::string to_string(Reduction r) { return r == Reduction::mean_vector ? "mean_vector" : "mean_pairwise"; }
std::string to_string(SfslSign s) { return s == SfslSign::paper_plus ? "paper_plus" : "encourage_minus"; }

Reduction parse_reduction(const std::string& s) {
    if (s == "mean_vector") return Reduction::mean_vector;
    if (s == "mean_pairwise") return Reduction::mean_pairwise;
    throw ConfigError("unknown reduction '" + s + "' (expected mean_vector or mean_pairwise)");
}

SfslSign parse_sfsl_sign(const std::string& s) {
    if (s == "paper_plus") return SfslSign::paper_plus;
    if (s == "encourage_minus") return SfslSign::encourage_minus;
    throw ConfigError("unknown sfsl sign '" + s + "' (expected paper_plus or encourage_minus)");
}

std::vector<FeatureVector> penultimate_features(std::span<const ImageTensor> images, const FeatureExtractor& extractor) {
    std::vector<FeatureVector> out;
    out.reserve(images.size());
    for (const auto& img : images) {
        ag::Var phi = extractor.features(img.var());
        if (static_cast<int>(phi.numel()) != extractor.feature_dim()) {
            throw ConfigError("extractor returned " + std::to_string(phi.numel()) + " features, declared " +
                              std::to_string(extractor.feature_dim()));
        }
        out.push_back({phi.value().data()});
    }
    return out;
}

ClassWiseFeature class_wise_feature(const FeatureVector& phi, const ClassWeights& w) {
    check_dim(phi.dim(), w.weights.size(), "class_wise_feature");
    ClassWiseFeature psi{w.class_id, std::vector<double>(phi.dim())};
    for (std::size_t i = 0; i < phi.dim(); ++i) psi.values[i] = w.weights[i] * phi.values[i];
    return psi;
}

ag::Var class_wise_feature(const ag::Var& phi, const ClassWeights& w) {
    check_dim(phi.numel(), w.weights.size(), "class_wise_feature");
    return ag::mul(phi, ag::constant(ag::Tensor({static_cast<int>(w.weights.size())}, w.weights)));
}

double cosine_similarity(const FeatureVector& a, const FeatureVector& b) {
    return cosine_similarity<double>(a.values, b.values);
}

FeatureBank::FeatureBank(int class_id, std::vector<ClassWiseFeature> entries, std::vector<std::string> image_ids,
                         Reduction reduction, std::string extractor_id)
    : class_id_(class_id), entries_(std::move(entries)), image_ids_(std::move(image_ids)), reduction_(reduction),
      extractor_id_(std::move(extractor_id)) {
    if (entries_.empty()) throw DataError("feature bank must hold at least one reference feature");
    if (image_ids_.size() != entries_.size()) throw ConfigError("feature bank ids and entries differ in count");
    const std::size_t d = entries_.front().values.size();
    if (d == 0) throw ConfigError("feature bank entries must be non-empty vectors");
    mean_.assign(d, 0.0);
    for (const auto& e : entries_) {
        if (e.class_id != class_id_) throw ConfigError("feature bank entry belongs to a different class");
        check_dim(e.values.size(), d, "feature bank");
        for (std::size_t i = 0; i < d; ++i) mean_[i] += e.values[i];
    }
    for (auto& v : mean_) v /= static_cast<double>(entries_.size());
}

double sfsl_loss(const FeatureBank& reference, std::span<const ClassWiseFeature> generated, SfslSign sign) {
    if (generated.empty()) throw DataError("sfsl_loss: empty generated batch");
    double acc = 0.0;
    std::size_t terms = 0;
    for (const auto& g : generated) {
        if (g.class_id != reference.class_id()) throw ConfigError("sfsl_loss: generated feature class differs from bank class");
        check_dim(g.values.size(), reference.dim(), "sfsl_loss");
        if (reference.reduction() == Reduction::mean_vector) {
            acc += cosine_similarity<double>(reference.mean_entry(), g.values);
            ++terms;
        } else {
            for (const auto& r : reference.entries()) {
                acc += cosine_similarity<double>(r.values, g.values);
                ++terms;
            }
        }
    }
    // Same arithmetic as the graph version below so both agree bitwise.
    const double s = (sign == SfslSign::paper_plus ? 1.0 : -1.0) / static_cast<double>(terms);
    return acc * s;
}

ag::Var sfsl_loss(const FeatureBank& reference, std::span<const ag::Var> generated, int class_id, SfslSign sign) {
    if (generated.empty()) throw DataError("sfsl_loss: empty generated batch");
    if (class_id != reference.class_id()) throw ConfigError("sfsl_loss: generated feature class differs from bank class");
    const int d = static_cast<int>(reference.dim());
    std::vector<ag::Var> refs;
    if (reference.reduction() == Reduction::mean_vector) {
        refs.push_back(ag::constant(ag::Tensor({d}, reference.mean_entry())));
    } else {
        for (const auto& r : reference.entries()) refs.push_back(ag::constant(ag::Tensor({d}, r.values)));
    }
    ag::Var acc;
    std::size_t terms = 0;
    for (const auto& g : generated) {
        check_dim(g.numel(), reference.dim(), "sfsl_loss");
        for (const auto& r : refs) {
            ag::Var c = ag::cosine(r, g, eps_norm<double>());
            acc = acc ? ag::add(acc, c) : c;
            ++terms;
        }
    }
    const double s = (sign == SfslSign::paper_plus ? 1.0 : -1.0) / static_cast<double>(terms);
    return ag::scale(acc, s);
}

FeatureBank reference_feature_bank(std::span<const ImageTensor> images, std::span<const std::string> image_ids,
                                   const FeatureExtractor& extractor, int class_id, Reduction reduction) {
    if (images.empty()) throw DataError("reference_feature_bank: no reference images");
    if (image_ids.size() != images.size()) throw ConfigError("reference_feature_bank: one id per image required");
    if (class_id < 0 || class_id >= extractor.num_classes()) throw ConfigError("reference_feature_bank: class out of range");
    ag::NoGradGuard no_grad;
    const ClassWeights w = extractor.class_weights(class_id);
    std::vector<ClassWiseFeature> entries;
    for (const auto& phi : penultimate_features(images, extractor)) entries.push_back(class_wise_feature(phi, w));
    return FeatureBank(class_id, std::move(entries), {image_ids.begin(), image_ids.end()}, reduction,
                       extractor.checkpoint_id());
}

void save_feature_cache(const std::filesystem::path& path, const FeatureBank& bank) {
    nlohmann::json entries = nlohmann::json::array();
    std::vector<double> payload;
    for (std::size_t i = 0; i < bank.size(); ++i) {
        entries.push_back({{"class_id", bank.entries()[i].class_id}, {"image_id", bank.image_ids()[i]}});
        payload.insert(payload.end(), bank.entries()[i].values.begin(), bank.entries()[i].values.end());
    }
    const nlohmann::json header{{"extractor_checkpoint_id", bank.extractor_id()},
                                {"dim", bank.dim()},
                                {"reduction", to_string(bank.reduction())},
                                {"class_id", bank.class_id()},
                                {"entries", entries}};
    io::write_container(path, kFeatureMagic, kFeatureCacheVersion, header, payload);
}

FeatureBank load_feature_cache(const std::filesystem::path& path) {
    const auto c = io::read_container(path, kFeatureMagic);
    if (c.version != kFeatureCacheVersion) throw DataError("unsupported feature cache version in " + path.string());
    const auto& h = c.header;
    const auto dim = h.at("dim").get<std::size_t>();
    const auto& entries = h.at("entries");
    if (c.payload.size() != dim * entries.size()) throw DataError("feature cache payload size mismatch: " + path.string());
    std::vector<ClassWiseFeature> feats;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        feats.push_back({entries[i].at("class_id").get<int>(),
                         std::vector<double>(c.payload.begin() + static_cast<std::ptrdiff_t>(i * dim),
                                             c.payload.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim))});
        ids.push_back(entries[i].at("image_id").get<std::string>());
    }
    return FeatureBank(h.at("class_id").get<int>(), std::move(feats), std::move(ids),
                       parse_reduction(h.at("reduction").get<std::string>()),
                       h.at("extractor_checkpoint_id").get<std::string>());
}

}  // namespace spurgen::features
