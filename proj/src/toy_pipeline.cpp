#include "spurgen/toy_pipeline.hpp"

#include "spurgen/error.hpp"
#include "spurgen/io.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <unistd.h>

namespace fs = std::filesystem;

namespace spurgen::toy {

namespace {

constexpr int kObjectBox = 8;
constexpr int kPatchSize = 4;

std::string pad(std::size_t i, int width = 4) {
    std::ostringstream os;
    os << std::setw(width) << std::setfill('0') << i;
    return os.str();
}

std::string fixed2(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
}

std::string fixed6(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

bool object_pixel(int cls, int y, int x) {
    switch (cls) {
        case 0: return y >= 2 && y < 6;
        case 1: return x >= 2 && x < 6;
        case 2: return y < 2 || y >= 6 || x < 2 || x >= 6;
        case 3: return ((y / 2) + (x / 2)) % 2 == 0;
    }
    return false;
}

ag::Tensor normal_tensor(ag::Shape shape, double stddev, Rng& rng) {
    ag::Tensor t(std::move(shape));
    for (auto& v : t.data()) v = stddev * rng.normal();
    return t;
}

ag::Var coords(int h, int w) {
    ag::Tensor c({2, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            c[static_cast<std::size_t>(y) * w + x] = h > 1 ? 2.0 * y / (h - 1) - 1.0 : 0.0;
            c[static_cast<std::size_t>(h * w) + y * w + x] = w > 1 ? 2.0 * x / (w - 1) - 1.0 : 0.0;
        }
    return ag::constant(std::move(c));
}

void copy_values(const std::vector<NamedParameter>& from, const std::vector<NamedParameter>& to) {
    for (std::size_t i = 0; i < from.size(); ++i) to[i].var.node()->value = from[i].var.value();
}

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
    const std::string tag = "[" + name + "] ";
    try {
        return f();
    } catch (const ShortfallError& e) {
        throw ShortfallError(tag + e.what(), e.qualifying());
    } catch (const DataError& e) {
        throw DataError(tag + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(tag + e.what());
    } catch (const DegenerateInputError& e) {
        throw DegenerateInputError(tag + e.what());
    } catch (const DivergenceError& e) {
        throw DivergenceError(tag + e.what(), e.dump_path());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset

void SynthDatasetConfig::validate() const {
    if (image_size < 16 || image_size % 2 != 0) throw ConfigError("image_size must be even and at least 16");
    if (num_classes < 2 || num_classes > 4) throw ConfigError("num_classes must lie in [2,4]");
    if (static_cast<int>(class_nouns.size()) != num_classes) throw ConfigError("one class noun per class required");
    if (feature_noun.empty()) throw ConfigError("feature noun must be nonempty");
    if (!(correlation_strength >= 0.0 && correlation_strength <= 1.0)) {
        throw ConfigError("correlation_strength must lie in [0,1]");
    }
    if (train_per_class < 1 || test_per_class < 1 || test_feature_only_per_class < 1 ||
        train_feature_only_per_class < 0 || test_shared_per_class < 0) {
        throw ConfigError("dataset counts must be positive");
    }
}

nlohmann::json SynthDatasetConfig::to_json() const {
    return {{"image_size", image_size},
            {"num_classes", num_classes},
            {"class_nouns", class_nouns},
            {"feature_noun", feature_noun},
            {"correlation_strength", correlation_strength},
            {"train_per_class", train_per_class},
            {"train_feature_only_per_class", train_feature_only_per_class},
            {"test_per_class", test_per_class},
            {"test_feature_only_per_class", test_feature_only_per_class},
            {"test_shared_per_class", test_shared_per_class},
            {"seed", seed}};
}

SynthDatasetConfig SynthDatasetConfig::from_json(const nlohmann::json& j) {
    SynthDatasetConfig c;
    c.image_size = j.at("image_size");
    c.num_classes = j.at("num_classes");
    c.class_nouns = j.at("class_nouns").get<std::vector<std::string>>();
    c.feature_noun = j.at("feature_noun");
    c.correlation_strength = j.at("correlation_strength");
    c.train_per_class = j.at("train_per_class");
    c.train_feature_only_per_class = j.at("train_feature_only_per_class");
    c.test_per_class = j.at("test_per_class");
    c.test_feature_only_per_class = j.at("test_feature_only_per_class");
    c.test_shared_per_class = j.at("test_shared_per_class");
    c.seed = j.at("seed");
    return c;
}

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

std::string to_string(ItemKind k) {
    switch (k) {
        case ItemKind::object: return "object";
        case ItemKind::feature_only: return "feature_only";
        case ItemKind::shared: return "shared";
    }
    return "?";
}

namespace {

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw DataError("unknown split '" + s + "'");
}

ItemKind parse_kind(const std::string& s) {
    if (s == "object") return ItemKind::object;
    if (s == "feature_only") return ItemKind::feature_only;
    if (s == "shared") return ItemKind::shared;
    throw DataError("unknown item kind '" + s + "'");
}

}  // namespace

eval::ContentLabels SynthItem::labels() const {
    eval::ContentLabels l;
    l.image_id = image_id;
    if (object_class >= 0) l.present_classes.insert(object_class);
    l.has_spurious_feature = feature_class >= 0;
    l.feature_id = feature_class >= 0 ? "patch_" + std::to_string(feature_class) : "";
    return l;
}

eval::ContentLabels SynthItem::labels_for(int target_class) const {
    eval::ContentLabels l = labels();
    l.has_spurious_feature = feature_class == target_class;
    l.feature_id = l.has_spurious_feature ? "patch_" + std::to_string(target_class) : "";
    return l;
}

std::vector<const SynthItem*> SynthDataset::select(Split split, ItemKind kind, int object_class,
                                                   int feature_class) const {
    std::vector<const SynthItem*> out;
    for (const auto& it : items) {
        if (it.split != split || it.kind != kind) continue;
        if (object_class != -2 && it.object_class != object_class) continue;
        if (feature_class != -2 && it.feature_class != feature_class) continue;
        out.push_back(&it);
    }
    return out;
}

const SynthItem& SynthDataset::at(const std::string& image_id) const {
    for (const auto& it : items)
        if (it.image_id == image_id) return it;
    throw DataError("no dataset item '" + image_id + "'");
}

std::array<double, 3> patch_color(int class_id) {
    static const std::array<std::array<double, 3>, 4> colors = {{
        {0.85, 0.15, 0.15},
        {0.15, 0.75, 0.20},
        {0.20, 0.25, 0.90},
        {0.90, 0.85, 0.15},
    }};
    if (class_id < 0 || class_id >= static_cast<int>(colors.size())) throw ConfigError("no patch color for class");
    return colors[static_cast<std::size_t>(class_id)];
}

ImageTensor render_item(const SynthDatasetConfig& config, int object_class, int feature_class, Rng& rng) {
    const int n = config.image_size;
    // Draw order: background, object offset y/x, object tone, patch offset
    // y/x, patch color jitter r/g/b.
    const double bg = 0.42 + 0.16 * rng.uniform01();
    const int oy = n - kObjectBox - 2 * static_cast<int>(rng.uniform_int(0, 1));
    const int ox = n - kObjectBox - 2 * static_cast<int>(rng.uniform_int(0, 1));
    const double tone = 0.06 + 0.10 * rng.uniform01();
    const int py = 2 * static_cast<int>(rng.uniform_int(0, 1));
    const int px = 2 * static_cast<int>(rng.uniform_int(0, 1));
    std::array<double, 3> jitter{};
    for (auto& j : jitter) j = 0.08 * (rng.uniform01() - 0.5);

    ag::Tensor t({3, n, n}, bg);
    auto set = [&](int c, int y, int x, double v) { t[(static_cast<std::size_t>(c) * n + y) * n + x] = v; };
    if (object_class >= 0) {
        for (int y = 0; y < kObjectBox; ++y)
            for (int x = 0; x < kObjectBox; ++x)
                if (object_pixel(object_class, y, x))
                    for (int c = 0; c < 3; ++c) set(c, oy + y, ox + x, tone);
    }
    if (feature_class >= 0) {
        const auto col = patch_color(feature_class);
        for (int y = 0; y < kPatchSize; ++y)
            for (int x = 0; x < kPatchSize; ++x)
                for (int c = 0; c < 3; ++c) set(c, py + y, px + x, std::clamp(col[c] + jitter[c], 0.0, 1.0));
    }
    return to_image(t);
}

SynthDataset synth_dataset(const SynthDatasetConfig& config) {
    config.validate();
    SynthDataset ds;
    ds.config = config;
    Rng rng(config.seed);
    const int k_classes = config.num_classes;
    const double p = config.correlation_strength;
    auto draw_feature = [&](int cls) -> int {
        if (rng.uniform01() < p) return cls;
        const auto j = rng.uniform_int(0, k_classes);
        return static_cast<int>(j) - 1;
    };
    auto caption = [&](int obj) {
        return "a photo of a " + (obj >= 0 ? config.class_nouns[static_cast<std::size_t>(obj)] : config.feature_noun);
    };
    auto add = [&](Split split, ItemKind kind, int obj, int feat, const std::string& id) {
        SynthItem it;
        it.image_id = id;
        it.split = split;
        it.kind = kind;
        it.object_class = obj;
        it.feature_class = feat;
        it.caption = caption(obj);
        it.image = render_item(config, obj, feat, rng);
        ds.items.push_back(std::move(it));
    };

    for (Split split : {Split::train, Split::test}) {
        const std::string s = to_string(split);
        const int per_class = split == Split::train ? config.train_per_class : config.test_per_class;
        const int feat_only = split == Split::train ? config.train_feature_only_per_class : config.test_feature_only_per_class;
        for (int c = 0; c < k_classes; ++c)
            for (int i = 0; i < per_class; ++i) {
                const int f = draw_feature(c);
                add(split, ItemKind::object, c, f, s + "_obj_c" + std::to_string(c) + "_" + pad(i));
            }
        for (int k = 0; k < k_classes; ++k)
            for (int i = 0; i < feat_only; ++i) add(split, ItemKind::feature_only, -1, k, s + "_feat_k" + std::to_string(k) + "_" + pad(i));
        if (split == Split::test) {
            for (int k = 0; k < k_classes; ++k)
                for (int i = 0; i < config.test_shared_per_class; ++i) {
                    int l = static_cast<int>(rng.uniform_int(0, k_classes - 2));
                    if (l >= k) ++l;
                    add(split, ItemKind::shared, l, k, s + "_shared_k" + std::to_string(k) + "_" + pad(i));
                }
        }
    }
    return ds;
}

void save_dataset(const fs::path& dir, const SynthDataset& dataset) {
    fs::create_directories(dir);
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : dataset.items) {
        const std::string file = it.image_id + ".ppm";
        write_ppm(dir / file, it.image);
        const auto l = it.labels();
        items.push_back({{"image_id", it.image_id},
                         {"file", file},
                         {"split", to_string(it.split)},
                         {"kind", to_string(it.kind)},
                         {"object_class", it.object_class},
                         {"feature_class", it.feature_class},
                         {"caption", it.caption},
                         {"present_classes", l.present_classes},
                         {"has_spurious_feature", l.has_spurious_feature},
                         {"feature_id", l.feature_id}});
    }
    io::atomic_write_text(dir / "labels.json",
                          nlohmann::json{{"config", dataset.config.to_json()}, {"items", items}}.dump(1) + "\n");
}

SynthDataset load_dataset(const fs::path& dir) {
    SynthDataset ds;
    try {
        const auto j = nlohmann::json::parse(io::read_text(dir / "labels.json"));
        ds.config = SynthDatasetConfig::from_json(j.at("config"));
        for (const auto& e : j.at("items")) {
            SynthItem it;
            it.image_id = e.at("image_id");
            it.split = parse_split(e.at("split"));
            it.kind = parse_kind(e.at("kind"));
            it.object_class = e.at("object_class");
            it.feature_class = e.at("feature_class");
            it.caption = e.at("caption");
            it.image = read_ppm(dir / e.at("file").get<std::string>());
            ds.items.push_back(std::move(it));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed dataset labels in " + dir.string() + ": " + e.what());
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Codecs

ag::Shape DownsampleCodec::latent_shape(int height, int width) const {
    if (height % 2 != 0 || width % 2 != 0) throw ConfigError("downsample codec needs even image sides");
    return {3, height / 2, width / 2};
}

ag::Var DownsampleCodec::encode(const ag::Var& image) const { return ag::affine(ag::avg_pool2(image), 2.0, -1.0); }

ag::Var DownsampleCodec::decode(const ag::Var& latent) const { return ag::affine(ag::upsample2(latent), 0.5, 0.5); }

std::unique_ptr<diffusion::ImageCodec> make_codec(const std::string& type) {
    if (type == "identity") return std::make_unique<IdentityCodec>();
    if (type == "downsample2") return std::make_unique<DownsampleCodec>();
    throw ConfigError("unknown codec type '" + type + "'");
}

// ---------------------------------------------------------------------------
// Text encoder

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.size() < 2 || words_[0] != "<null>" || words_[1] != "<unk>") {
        throw ConfigError("vocabulary must start with <null> and <unk>");
    }
}

Vocabulary Vocabulary::standard(const std::vector<std::string>& extra_nouns) {
    std::vector<std::string> w = {"<null>", "<unk>", "a",    "an",    "photo", "of",     "sks",  "on",
                                  "the",    "in",    "beach", "garden", "mount", "fuji", "market"};
    for (const auto& n : extra_nouns)
        if (std::find(w.begin(), w.end(), n) == w.end()) w.push_back(n);
    return Vocabulary(std::move(w));
}

std::vector<int> Vocabulary::tokenize(const std::string& prompt) const {
    std::vector<int> ids;
    std::istringstream is(prompt);
    std::string tok;
    while (is >> tok) {
        std::string clean;
        for (char c : tok)
            if (std::isalnum(static_cast<unsigned char>(c))) clean += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (clean.empty()) continue;
        auto it = std::find(words_.begin(), words_.end(), clean);
        ids.push_back(it == words_.end() ? 1 : static_cast<int>(it - words_.begin()));
    }
    if (ids.empty()) ids.push_back(0);
    return ids;
}

ToyTextEncoder::ToyTextEncoder(Vocabulary vocab, int embed_dim, std::uint64_t seed)
    : vocab_(std::move(vocab)), embed_dim_(embed_dim) {
    if (embed_dim < 1) throw ConfigError("embedding dimension must be positive");
    Rng rng(seed);
    table_ = ag::parameter(normal_tensor({vocab_.size(), embed_dim}, 0.5, rng));
}

ag::Var ToyTextEncoder::encode(const std::string& prompt) const {
    const auto ids = vocab_.tokenize(prompt);
    return ag::embedding(table_, ids);
}

std::vector<NamedParameter> ToyTextEncoder::named_parameters() const { return {{"embedding", table_}}; }

nlohmann::json ToyTextEncoder::metadata() const {
    return {{"type", "toy_text_encoder"}, {"vocabulary", vocab_.words()}, {"embed_dim", embed_dim_}};
}

std::unique_ptr<ToyTextEncoder> ToyTextEncoder::from_metadata(const nlohmann::json& meta) {
    return std::make_unique<ToyTextEncoder>(Vocabulary(meta.at("vocabulary").get<std::vector<std::string>>()),
                                            meta.at("embed_dim").get<int>(), 0);
}

std::unique_ptr<ToyTextEncoder> ToyTextEncoder::clone() const {
    auto out = from_metadata(metadata());
    copy_values(named_parameters(), out->named_parameters());
    return out;
}

// ---------------------------------------------------------------------------
// Noise predictor

nlohmann::json PredictorConfig::to_json() const {
    return {{"latent_channels", latent_channels},
            {"hidden", hidden},
            {"embed_dim", embed_dim},
            {"time_dim", time_dim},
            {"blocks", blocks}};
}

PredictorConfig PredictorConfig::from_json(const nlohmann::json& j) {
    return {j.at("latent_channels"), j.at("hidden"), j.at("embed_dim"), j.at("time_dim"), j.at("blocks")};
}

std::vector<double> time_features(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("time feature dimension must be even");
    const int half = dim / 2;
    std::vector<double> f(static_cast<std::size_t>(dim));
    for (int i = 0; i < half; ++i) {
        const double w = std::pow(10000.0, -static_cast<double>(i) / half);
        f[static_cast<std::size_t>(i)] = std::sin(t * w);
        f[static_cast<std::size_t>(half + i)] = std::cos(t * w);
    }
    return f;
}

ToyNoisePredictor::ToyNoisePredictor(PredictorConfig config, std::uint64_t seed) : config_(config) {
    const int c = config.latent_channels, h = config.hidden, cond = config.time_dim + config.embed_dim;
    if (c < 1 || h < 1 || config.embed_dim < 1 || config.blocks < 0) throw ConfigError("predictor dimensions must be positive");
    time_features(1, config.time_dim);
    Rng rng(seed);
    const double conv_h = std::sqrt(1.0 / (h * 9));
    in_w_ = ag::parameter(normal_tensor({h, c + 2, 3, 3}, std::sqrt(2.0 / ((c + 2) * 9)), rng));
    in_b_ = ag::parameter(ag::Tensor({h}));
    cond_w_ = ag::parameter(normal_tensor({h, cond}, std::sqrt(1.0 / cond), rng));
    cond_b_ = ag::parameter(ag::Tensor({h}));
    for (int i = 0; i < config.blocks; ++i) {
        Block b;
        b.conv1_w = ag::parameter(normal_tensor({h, h, 3, 3}, std::sqrt(2.0) * conv_h, rng));
        b.conv1_b = ag::parameter(ag::Tensor({h}));
        b.cond_w = ag::parameter(normal_tensor({h, cond}, std::sqrt(1.0 / cond), rng));
        b.cond_b = ag::parameter(ag::Tensor({h}));
        b.global_w = ag::parameter(normal_tensor({h, h}, std::sqrt(1.0 / h), rng));
        b.global_b = ag::parameter(ag::Tensor({h}));
        b.conv2_w = ag::parameter(normal_tensor({h, h, 3, 3}, 0.5 * conv_h, rng));
        b.conv2_b = ag::parameter(ag::Tensor({h}));
        blocks_.push_back(std::move(b));
    }
    out_w_ = ag::parameter(normal_tensor({c, h, 3, 3}, 0.1 * conv_h, rng));
    out_b_ = ag::parameter(ag::Tensor({c}));
}

ag::Var ToyNoisePredictor::predict(const ag::Var& z_t, int t, const ag::Var& text_embedding) const {
    if (z_t.value().rank() != 3 || z_t.shape()[0] != config_.latent_channels) {
        throw ConfigError("noise predictor input " + ag::shape_str(z_t.shape()) + " has the wrong channel count");
    }
    const ag::Var txt = ag::mean_rows(text_embedding);
    if (static_cast<int>(txt.numel()) != config_.embed_dim) throw ConfigError("text embedding width mismatch");
    const ag::Var tf = ag::constant(ag::Tensor({config_.time_dim}, time_features(t, config_.time_dim)));
    const ag::Var cond = ag::concat(tf, txt);
    const ag::Var x = ag::concat_channels(z_t, coords(z_t.shape()[1], z_t.shape()[2]));
    ag::Var h = ag::silu(ag::add_channel_bias(ag::conv2d(x, in_w_, in_b_), ag::linear(cond, cond_w_, cond_b_)));
    for (const auto& b : blocks_) {
        const ag::Var bias = ag::add(ag::linear(cond, b.cond_w, b.cond_b),
                                     ag::linear(ag::global_mean_pool(h), b.global_w, b.global_b));
        const ag::Var u = ag::silu(ag::add_channel_bias(ag::conv2d(h, b.conv1_w, b.conv1_b), bias));
        h = ag::add(h, ag::conv2d(u, b.conv2_w, b.conv2_b));
    }
    return ag::conv2d(ag::silu(h), out_w_, out_b_);
}

std::vector<NamedParameter> ToyNoisePredictor::named_parameters() const {
    std::vector<NamedParameter> p = {
        {"in.weight", in_w_}, {"in.bias", in_b_}, {"in.cond.weight", cond_w_}, {"in.cond.bias", cond_b_}};
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string pre = "block" + std::to_string(i) + ".";
        const auto& b = blocks_[i];
        p.push_back({pre + "conv1.weight", b.conv1_w});
        p.push_back({pre + "conv1.bias", b.conv1_b});
        p.push_back({pre + "cond.weight", b.cond_w});
        p.push_back({pre + "cond.bias", b.cond_b});
        p.push_back({pre + "global.weight", b.global_w});
        p.push_back({pre + "global.bias", b.global_b});
        p.push_back({pre + "conv2.weight", b.conv2_w});
        p.push_back({pre + "conv2.bias", b.conv2_b});
    }
    p.push_back({"out.weight", out_w_});
    p.push_back({"out.bias", out_b_});
    return p;
}

nlohmann::json ToyNoisePredictor::metadata() const {
    auto j = config_.to_json();
    j["type"] = "toy_noise_predictor";
    return j;
}

std::unique_ptr<ToyNoisePredictor> ToyNoisePredictor::from_metadata(const nlohmann::json& meta) {
    return std::make_unique<ToyNoisePredictor>(PredictorConfig::from_json(meta), 0);
}

std::unique_ptr<ToyNoisePredictor> ToyNoisePredictor::clone() const {
    auto out = from_metadata(metadata());
    copy_values(named_parameters(), out->named_parameters());
    return out;
}

// ---------------------------------------------------------------------------
// Classifiers

ToyClassifier::ToyClassifier(ClassifierSpec spec, int num_classes) : spec_(std::move(spec)), num_classes_(num_classes) {
    if (spec_.id.empty()) throw ConfigError("classifier id must be nonempty");
    if (spec_.hidden < 1 || spec_.feature_dim < 1 || num_classes < 2) throw ConfigError("classifier dimensions invalid");
    const int h = spec_.hidden, d = spec_.feature_dim;
    Rng rng(spec_.seed);
    conv1_w_ = ag::parameter(normal_tensor({h, 3, 3, 3}, std::sqrt(2.0 / 27.0), rng));
    conv1_b_ = ag::parameter(ag::Tensor({h}));
    conv2_w_ = ag::parameter(normal_tensor({d, h, 3, 3}, std::sqrt(2.0 / (h * 9)), rng));
    conv2_b_ = ag::parameter(ag::Tensor({d}));
    fc_w_ = ag::parameter(normal_tensor({num_classes, d}, std::sqrt(1.0 / d), rng));
    fc_b_ = ag::parameter(ag::Tensor({num_classes}));
}

ag::Var ToyClassifier::features(const ag::Var& image) const {
    const ag::Var h1 = ag::avg_pool2(ag::silu(ag::conv2d(image, conv1_w_, conv1_b_)));
    return ag::global_mean_pool(ag::silu(ag::conv2d(h1, conv2_w_, conv2_b_)));
}

ag::Var ToyClassifier::logits(const ag::Var& image) const { return ag::linear(features(image), fc_w_, fc_b_); }

std::vector<double> ToyClassifier::logits(const ImageTensor& image) const {
    ag::NoGradGuard no_grad;
    return logits(image.var()).value().data();
}

features::ClassWeights ToyClassifier::class_weights(int class_id) const {
    if (class_id < 0 || class_id >= num_classes_) throw ConfigError("class id outside the classifier's label space");
    const auto& w = fc_w_.value().data();
    const auto d = static_cast<std::size_t>(spec_.feature_dim);
    return {class_id, std::vector<double>(w.begin() + static_cast<std::ptrdiff_t>(class_id * d),
                                          w.begin() + static_cast<std::ptrdiff_t>((class_id + 1) * d))};
}

std::string ToyClassifier::checkpoint_id() const {
    return "toy_classifier/" + spec_.id + "@" + parameter_hash(named_parameters()).substr(0, 16);
}

std::vector<NamedParameter> ToyClassifier::named_parameters() const {
    return {{"conv1.weight", conv1_w_}, {"conv1.bias", conv1_b_}, {"conv2.weight", conv2_w_},
            {"conv2.bias", conv2_b_},   {"fc.weight", fc_w_},     {"fc.bias", fc_b_}};
}

nlohmann::json ToyClassifier::metadata() const {
    return {{"type", "toy_classifier"},
            {"id", spec_.id},
            {"hidden", spec_.hidden},
            {"feature_dim", spec_.feature_dim},
            {"seed", spec_.seed},
            {"num_classes", num_classes_}};
}

std::unique_ptr<ToyClassifier> ToyClassifier::from_metadata(const nlohmann::json& meta) {
    ClassifierSpec s{meta.at("id"), meta.at("hidden"), meta.at("feature_dim"), meta.at("seed")};
    return std::make_unique<ToyClassifier>(s, meta.at("num_classes").get<int>());
}

std::vector<double> ColorRuleClassifier::logits(const ImageTensor& image) const {
    std::vector<double> z(static_cast<std::size_t>(num_classes_), 0.0);
    const int region = std::min({image.height(), image.width(), kPatchSize + 2});
    for (int y = 0; y < region; ++y)
        for (int x = 0; x < region; ++x)
            for (int k = 0; k < num_classes_; ++k) {
                const auto col = patch_color(k);
                bool close = true;
                for (int c = 0; c < 3; ++c) close = close && std::abs(image.at(c, y, x) - col[c]) < 0.1;
                if (close) z[static_cast<std::size_t>(k)] += 0.5;
            }
    return z;
}

double train_accuracy(const ToyClassifier& classifier, const SynthDataset& dataset) {
    const auto items = dataset.select(Split::train, ItemKind::object);
    std::size_t hits = 0;
    for (const auto* it : items) {
        const auto z = classifier.logits(it->image);
        if (std::max_element(z.begin(), z.end()) - z.begin() == it->object_class) ++hits;
    }
    return items.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(items.size());
}

double train_classifier(ToyClassifier& classifier, const SynthDataset& dataset, const ClassifierTrainConfig& config,
                        std::uint64_t seed) {
    const auto items = dataset.select(Split::train, ItemKind::object);
    if (items.empty()) throw DataError("no training images for the classifier");
    if (config.batch_size < 1 || config.max_epochs < 1) throw ConfigError("classifier training budget must be positive");
    const auto params = classifier.named_parameters();
    trainer::AdamW opt(params, {config.learning_rate, 0.9, 0.999, 1e-8, 0.0});
    Rng rng(seed);
    std::vector<std::size_t> order(items.size());
    std::vector<double> history;
    double acc = 0.0;
    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size() - 1; i > 0; --i) {
            std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
        }
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            zero_grads(params);
            ag::Var loss;
            for (std::size_t b = start; b < end; ++b) {
                const auto* it = items[order[b]];
                ag::Var l = ag::softmax_cross_entropy(classifier.logits(it->image.var()), it->object_class);
                loss = loss ? ag::add(loss, l) : l;
            }
            ag::backward(ag::scale(loss, 1.0 / static_cast<double>(end - start)));
            opt.step();
        }
        acc = train_accuracy(classifier, dataset);
        history.push_back(acc);
        if (acc >= config.min_accuracy) return acc;
    }
    std::string diag;
    for (std::size_t e = 0; e < history.size(); ++e) diag += (e ? ", " : "") + fixed2(100.0 * history[e]);
    throw DataError("classifier '" + classifier.id() + "' reached " + fixed2(100.0 * acc) + "% train accuracy after " +
                    std::to_string(config.max_epochs) + " epochs, below the required " +
                    fixed2(100.0 * config.min_accuracy) + "%; per-epoch accuracy: " + diag);
}

std::vector<double> pretrain_diffusion(ToyNoisePredictor& predictor, ToyTextEncoder& text_encoder,
                                       const diffusion::ImageCodec& codec, const SynthDataset& dataset,
                                       const diffusion::NoiseSchedule& schedule,
                                       const DiffusionPretrainConfig& config, std::uint64_t seed) {
    std::vector<const SynthItem*> items;
    for (const auto& it : dataset.items)
        if (it.split == Split::train) items.push_back(&it);
    if (items.empty()) throw DataError("no training images for diffusion pretraining");
    auto params = with_prefix("predictor.", predictor.named_parameters());
    auto te = with_prefix("text_encoder.", text_encoder.named_parameters());
    params.insert(params.end(), te.begin(), te.end());
    trainer::AdamW opt(params, {config.learning_rate, 0.9, 0.999, 1e-8, 0.0});
    Rng rng(seed);
    const diffusion::Models models{codec, predictor, text_encoder};
    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(config.steps));
    for (int step = 0; step < config.steps; ++step) {
        opt.set_learning_rate(0.5 * config.learning_rate * (1.0 + std::cos(std::numbers::pi * step / config.steps)));
        std::vector<ImageTensor> images;
        std::vector<std::string> prompts;
        for (int b = 0; b < config.batch_size; ++b) {
            const auto* it = items[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(items.size()) - 1))];
            images.push_back(it->image);
            prompts.push_back(rng.uniform01() < config.null_caption_rate ? std::string() : it->caption);
        }
        zero_grads(params);
        ag::Var loss = diffusion::denoising_loss(images, prompts, models, schedule, rng);
        if (!std::isfinite(loss.item())) throw DivergenceError("diffusion pretraining diverged at step " + std::to_string(step + 1), "");
        ag::backward(loss);
        opt.step();
        losses.push_back(loss.item());
    }
    return losses;
}

double ContrastQualityScorer::score(const ImageTensor& image) const {
    const int h = image.height(), w = image.width();
    double sum = 0.0, sq = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double l = 0.299 * image.at(0, y, x) + 0.587 * image.at(1, y, x) + 0.114 * image.at(2, y, x);
            sum += l;
            sq += l * l;
        }
    const double n = static_cast<double>(h) * w;
    const double var = std::max(0.0, sq / n - (sum / n) * (sum / n));
    return std::clamp(4.0 * std::sqrt(var), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Presets

nlohmann::json EndToEndConfig::to_json() const {
    return {{"target_class", target_class},
            {"select_n", select_n},
            {"finetune_steps", finetune_steps},
            {"learning_rate", learning_rate},
            {"sample_n", sample_n},
            {"sampler_steps", sampler_steps},
            {"guidance", guidance},
            {"prior_per_reference", prior_per_reference},
            {"kappas", kappas},
            {"reduction", features::to_string(reduction)},
            {"contexts", contexts},
            {"recontext_n", recontext_n},
            {"seed", seed}};
}

EndToEndConfig EndToEndConfig::from_json(const nlohmann::json& j) {
    EndToEndConfig c;
    c.target_class = j.at("target_class");
    c.select_n = j.at("select_n");
    c.finetune_steps = j.at("finetune_steps");
    c.learning_rate = j.at("learning_rate");
    c.sample_n = j.at("sample_n");
    c.sampler_steps = j.at("sampler_steps");
    c.guidance = j.at("guidance");
    c.prior_per_reference = j.at("prior_per_reference");
    c.kappas = j.at("kappas").get<std::vector<double>>();
    c.reduction = features::parse_reduction(j.at("reduction"));
    c.contexts = j.at("contexts").get<std::vector<std::string>>();
    c.recontext_n = j.at("recontext_n");
    c.seed = j.at("seed");
    return c;
}

nlohmann::json ToyPreset::to_json() const {
    nlohmann::json ens = nlohmann::json::array();
    for (const auto& s : ensemble) ens.push_back({{"id", s.id}, {"hidden", s.hidden}, {"feature_dim", s.feature_dim}, {"seed", s.seed}});
    return {{"name", name},
            {"data", data.to_json()},
            {"codec", codec},
            {"text_embed_dim", text_embed_dim},
            {"predictor", predictor.to_json()},
            {"ensemble", ens},
            {"classifier_training",
             {{"max_epochs", classifier_training.max_epochs},
              {"learning_rate", classifier_training.learning_rate},
              {"batch_size", classifier_training.batch_size},
              {"min_accuracy", classifier_training.min_accuracy}}},
            {"diffusion_pretraining",
             {{"steps", diffusion_pretraining.steps},
              {"batch_size", diffusion_pretraining.batch_size},
              {"learning_rate", diffusion_pretraining.learning_rate},
              {"null_caption_rate", diffusion_pretraining.null_caption_rate}}},
            {"e2e", e2e.to_json()}};
}

ToyPreset ToyPreset::from_json(const nlohmann::json& j) {
    ToyPreset p;
    p.name = j.at("name");
    p.data = SynthDatasetConfig::from_json(j.at("data"));
    p.codec = j.at("codec");
    p.text_embed_dim = j.at("text_embed_dim");
    p.predictor = PredictorConfig::from_json(j.at("predictor"));
    for (const auto& s : j.at("ensemble")) p.ensemble.push_back({s.at("id"), s.at("hidden"), s.at("feature_dim"), s.at("seed")});
    const auto& ct = j.at("classifier_training");
    p.classifier_training = {ct.at("max_epochs"), ct.at("learning_rate"), ct.at("batch_size"), ct.at("min_accuracy")};
    const auto& dp = j.at("diffusion_pretraining");
    p.diffusion_pretraining = {dp.at("steps"), dp.at("batch_size"), dp.at("learning_rate"), dp.at("null_caption_rate")};
    p.e2e = EndToEndConfig::from_json(j.at("e2e"));
    return p;
}

ToyPreset toy_preset(const std::string& name) {
    ToyPreset p;
    p.name = name;
    p.ensemble = {{"toy_a", 8, 16, 11}, {"toy_b", 6, 12, 23}, {"toy_c", 10, 16, 37}, {"toy_d", 8, 20, 41}};
    if (name == "unit") {
        p.data.train_per_class = 40;
        p.data.train_feature_only_per_class = 12;
        p.data.test_per_class = 12;
        p.data.test_feature_only_per_class = 16;
        p.data.test_shared_per_class = 6;
        p.text_embed_dim = 4;
        p.predictor.hidden = 6;
        p.predictor.blocks = 1;
        p.ensemble.resize(2);
        p.diffusion_pretraining.steps = 150;
        p.diffusion_pretraining.batch_size = 2;
        p.e2e.select_n = 3;
        p.e2e.finetune_steps = 6;
        p.e2e.sample_n = 4;
        p.e2e.sampler_steps = 5;
        p.e2e.prior_per_reference = 2;
        p.e2e.contexts = {"", "on the beach"};
        p.e2e.recontext_n = 2;
    } else if (name == "ci") {
        // Defaults above.
    } else if (name == "full") {
        p.data.train_per_class = 240;
        p.data.train_feature_only_per_class = 80;
        p.data.test_feature_only_per_class = 75;
        p.predictor.hidden = 48;
        p.diffusion_pretraining.steps = 16000;
        p.e2e.kappas = {0.5, 0.8, 1.0};
        p.e2e.sample_n = 75;
    } else {
        throw ConfigError("unknown toy preset '" + name + "' (expected unit, ci or full)");
    }
    return p;
}

// ---------------------------------------------------------------------------
// Bundles

std::string ToyModelBundle::parameter_hash() const {
    auto all = with_prefix("predictor.", predictor->named_parameters());
    auto te = with_prefix("text_encoder.", text_encoder->named_parameters());
    all.insert(all.end(), te.begin(), te.end());
    for (const auto& c : classifiers) {
        auto p = with_prefix("classifier." + c->id() + ".", c->named_parameters());
        all.insert(all.end(), p.begin(), p.end());
    }
    return spurgen::parameter_hash(all);
}

namespace {

SynthDatasetConfig bundle_data_config(const ToyPreset& preset, std::uint64_t seed) {
    SynthDatasetConfig d = preset.data;
    d.seed = preset.data.seed + seed;
    return d;
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t seed) { return base + 1000003ULL * seed; }

}  // namespace

ToyModelBundle build_toy_models(const ToyPreset& preset, std::uint64_t seed) {
    if (preset.ensemble.empty()) throw ConfigError("toy preset needs at least one classifier");
    ToyModelBundle b;
    b.preset = preset;
    b.seed = seed;
    b.dataset = synth_dataset(bundle_data_config(preset, seed));
    b.codec = make_codec(preset.codec);

    std::vector<std::string> nouns = preset.data.class_nouns;
    nouns.push_back(preset.data.feature_noun);
    b.text_encoder = std::make_unique<ToyTextEncoder>(Vocabulary::standard(nouns), preset.text_embed_dim, mix_seed(5, seed));
    PredictorConfig pc = preset.predictor;
    pc.embed_dim = preset.text_embed_dim;
    b.predictor = std::make_unique<ToyNoisePredictor>(pc, mix_seed(7, seed));

    for (const auto& spec : preset.ensemble) {
        ClassifierSpec s = spec;
        s.seed = mix_seed(spec.seed, seed);
        auto c = std::make_unique<ToyClassifier>(s, preset.data.num_classes);
        b.classifier_accuracy.push_back(train_classifier(*c, b.dataset, preset.classifier_training, s.seed + 1));
        b.classifiers.push_back(std::move(c));
    }
    pretrain_diffusion(*b.predictor, *b.text_encoder, *b.codec, b.dataset, b.schedule, preset.diffusion_pretraining,
                       mix_seed(13, seed));
    return b;
}

void save_diffusion_checkpoint(const fs::path& path, const diffusion::ImageCodec& codec,
                               const ToyNoisePredictor& predictor, const ToyTextEncoder& text_encoder) {
    auto params = with_prefix("predictor.", predictor.named_parameters());
    auto te = with_prefix("text_encoder.", text_encoder.named_parameters());
    params.insert(params.end(), te.begin(), te.end());
    save_checkpoint(path, "toy_diffusion",
                    {{"predictor", predictor.metadata()},
                     {"text_encoder", text_encoder.metadata()},
                     {"codec", codec.metadata()},
                     {"schedule", {{"type", "linear"}, {"steps", 1000}, {"beta_start", 1e-4}, {"beta_end", 0.02}}}},
                    params);
}

DiffusionStack load_diffusion_checkpoint(const fs::path& path) {
    const auto header = read_checkpoint_header(path);
    if (header.kind != "toy_diffusion") throw DataError(path.string() + " is not a diffusion checkpoint (kind '" + header.kind + "')");
    DiffusionStack s;
    try {
        s.codec = make_codec(header.metadata.at("codec").at("type"));
        s.predictor = ToyNoisePredictor::from_metadata(header.metadata.at("predictor"));
        s.text_encoder = ToyTextEncoder::from_metadata(header.metadata.at("text_encoder"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed diffusion checkpoint metadata in " + path.string() + ": " + e.what());
    }
    auto params = with_prefix("predictor.", s.predictor->named_parameters());
    auto te = with_prefix("text_encoder.", s.text_encoder->named_parameters());
    params.insert(params.end(), te.begin(), te.end());
    load_checkpoint_into(path, params);
    return s;
}

void save_classifier(const fs::path& path, const ToyClassifier& classifier) {
    save_checkpoint(path, "toy_classifier", classifier.metadata(), classifier.named_parameters());
}

void save_color_rule_classifier(const fs::path& path, const std::string& id, int num_classes) {
    save_checkpoint(path, "color_rule", {{"id", id}, {"num_classes", num_classes}}, {});
}

std::unique_ptr<ToyClassifier> load_toy_classifier(const fs::path& path) {
    const auto header = read_checkpoint_header(path);
    if (header.kind != "toy_classifier") throw DataError(path.string() + " is not a toy classifier checkpoint");
    std::unique_ptr<ToyClassifier> c;
    try {
        c = ToyClassifier::from_metadata(header.metadata);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed classifier metadata in " + path.string() + ": " + e.what());
    }
    load_checkpoint_into(path, c->named_parameters());
    return c;
}

std::unique_ptr<eval::Classifier> load_classifier(const fs::path& path) {
    const auto header = read_checkpoint_header(path);
    if (header.kind == "toy_classifier") return load_toy_classifier(path);
    if (header.kind == "color_rule") {
        return std::make_unique<ColorRuleClassifier>(header.metadata.at("id").get<std::string>(),
                                                     header.metadata.at("num_classes").get<int>());
    }
    throw DataError(path.string() + " holds unsupported classifier kind '" + header.kind + "'");
}

void save_bundle(const fs::path& dir, const ToyModelBundle& bundle) {
    fs::create_directories(dir);
    save_diffusion_checkpoint(dir / "diffusion.ckpt", *bundle.codec, *bundle.predictor, *bundle.text_encoder);
    std::vector<std::string> ids;
    for (const auto& c : bundle.classifiers) {
        save_classifier(dir / ("classifier_" + c->id() + ".ckpt"), *c);
        ids.push_back(c->id());
    }
    io::atomic_write_text(dir / "bundle.json", nlohmann::json{{"preset", bundle.preset.to_json()},
                                                              {"seed", bundle.seed},
                                                              {"classifier_accuracy", bundle.classifier_accuracy},
                                                              {"classifiers", ids}}
                                                       .dump(2) +
                                                   "\n");
}

ToyModelBundle load_bundle(const fs::path& dir) {
    ToyModelBundle b;
    std::vector<std::string> ids;
    try {
        const auto j = nlohmann::json::parse(io::read_text(dir / "bundle.json"));
        b.preset = ToyPreset::from_json(j.at("preset"));
        b.seed = j.at("seed");
        b.classifier_accuracy = j.at("classifier_accuracy").get<std::vector<double>>();
        ids = j.at("classifiers").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed bundle manifest in " + dir.string() + ": " + e.what());
    }
    b.dataset = synth_dataset(bundle_data_config(b.preset, b.seed));
    auto stack = load_diffusion_checkpoint(dir / "diffusion.ckpt");
    b.codec = std::move(stack.codec);
    b.predictor = std::move(stack.predictor);
    b.text_encoder = std::move(stack.text_encoder);
    for (const auto& id : ids) b.classifiers.push_back(load_toy_classifier(dir / ("classifier_" + id + ".ckpt")));
    return b;
}

ToyModelBundle load_or_build_bundle(const ToyPreset& preset, std::uint64_t seed, const fs::path& cache_root) {
    const std::string digest = io::sha256_hex(preset.to_json().dump() + "|" + std::to_string(seed)).substr(0, 12);
    const fs::path dir = cache_root / (preset.name + "-" + std::to_string(seed) + "-" + digest);
    if (fs::exists(dir / "bundle.json")) return load_bundle(dir);
    ToyModelBundle b = build_toy_models(preset, seed);
    fs::create_directories(cache_root);
    const fs::path tmp = cache_root / (".tmp-" + digest + "-" + std::to_string(::getpid()));
    fs::remove_all(tmp);
    save_bundle(tmp, b);
    std::error_code ec;
    fs::rename(tmp, dir, ec);
    if (ec) fs::remove_all(tmp);  // another process won the race; its copy is identical
    return b;
}

// ---------------------------------------------------------------------------
// End-to-end

std::vector<ArmSpec> arm_specs(const EndToEndConfig& config) {
    std::vector<ArmSpec> arms = {
        {"vanilla_dreambooth", 0.0, features::SfslSign::paper_plus, false, false, true},
        {"trainable_text_encoder", 0.0, features::SfslSign::paper_plus, true, false, true},
        {"kappa0_with_bank", 0.0, features::SfslSign::paper_plus, true, true, false},
    };
    for (double kappa : config.kappas) {
        if (!(kappa > 0.0)) throw ConfigError("kappa sweep values must be positive");
        for (auto sign : {features::SfslSign::paper_plus, features::SfslSign::encourage_minus}) {
            arms.push_back({"sfsl_k" + fixed6(kappa) + "_" + features::to_string(sign), kappa, sign, true, true, true});
        }
    }
    return arms;
}

const std::vector<std::string>& ablation_csv_header() {
    static const std::vector<std::string> h = {"config_tag", "average_spurious_accuracy", "cells"};
    return h;
}

const std::vector<std::string>& recontext_csv_header() {
    static const std::vector<std::string> h = {"context", "prompt", "classifier_id", "spurious_accuracy"};
    return h;
}

nlohmann::json ToyReport::to_json() const {
    nlohmann::json arms_j = nlohmann::json::array();
    for (const auto& a : arms) {
        nlohmann::json final_rec = a.log.empty() ? nlohmann::json(nullptr) : trainer::to_json(a.log.back());
        arms_j.push_back({{"tag", a.spec.tag},
                          {"kappa", a.spec.kappa},
                          {"sfsl_sign", features::to_string(a.spec.sign)},
                          {"train_text_encoder", a.spec.train_text_encoder},
                          {"feature_bank", a.spec.use_bank},
                          {"sampled", a.spec.sample},
                          {"steps", a.log.size()},
                          {"parameter_hash", a.parameter_hash},
                          {"max_identity_error", a.max_identity_error},
                          {"final_step", final_rec},
                          {"spurious_accuracy", a.spurious_accuracy},
                          {"sample_ids", a.sample_ids.size()}});
    }
    nlohmann::json abl = nlohmann::json::array();
    for (const auto& r : ablation) abl.push_back({{"config_tag", r.config_tag}, {"mean", r.mean}, {"cells", r.cells}});
    nlohmann::json rc = nlohmann::json::array();
    for (const auto& r : recontext) rc.push_back({{"context", r.context}, {"prompt", r.prompt}, {"spurious_accuracy", r.spurious_accuracy}});
    return {{"target_class", target_class},
            {"target_noun", target_noun},
            {"selected_ids", selected_ids},
            {"arms", arms_j},
            {"ablation", abl},
            {"recontext", rc},
            {"kappa0_matches_dreambooth", kappa0_matches_dreambooth},
            {"max_identity_error", max_identity_error}};
}

std::string ToyReport::to_markdown() const {
    std::ostringstream os;
    os << "# Toy end-to-end report\n\n";
    os << "Target class " << target_class << " (" << target_noun << "). Reference images selected by the ensemble: ";
    for (std::size_t i = 0; i < selected_ids.size(); ++i) os << (i ? ", " : "") << selected_ids[i];
    os << ".\n\n## Spurious accuracy (%)\n\n" << table.to_markdown();
    os << "\n## Ablation\n\n" << eval::ablation_markdown(ablation);
    os << "\n## Training runs\n\n| Run | kappa | sign | text encoder | steps | final L_LDM | final L_PPL | final L_SFSL | final total | max identity error |\n";
    os << "|---|---:|---|---|---:|---:|---:|---:|---:|---:|\n";
    for (const auto& a : arms) {
        const auto& f = a.log.back();
        os << "| " << a.spec.tag << " | " << fixed6(a.spec.kappa) << " | " << features::to_string(a.spec.sign) << " | "
           << (a.spec.train_text_encoder ? "trained" : "frozen") << " | " << a.log.size() << " | " << fixed6(f.ldm)
           << " | " << fixed6(f.ppl) << " | " << fixed6(f.sfsl) << " | " << fixed6(f.total) << " | "
           << a.max_identity_error << " |\n";
    }
    os << "\nkappa = 0 with a feature bank reproduces the run without one bit for bit: "
       << (kappa0_matches_dreambooth ? "yes" : "no") << ".\n";
    os << "\n## Quality (stub contrast scorer)\n\n" << eval::quality_markdown(quality);
    os << "\n## Recontextualization\n\n| Prompt | Classifier | Spurious accuracy (%) |\n|---|---|---:|\n";
    for (const auto& r : recontext)
        for (const auto& [cid, v] : r.spurious_accuracy) os << "| " << r.prompt << " | " << cid << " | " << fixed2(v) << " |\n";
    return os.str();
}

namespace {

struct ArmModels {
    std::unique_ptr<ToyNoisePredictor> predictor;
    std::unique_ptr<ToyTextEncoder> text_encoder;
};

std::vector<ImageTensor> sample_many(const std::string& prompt, const diffusion::Models& models,
                                     const diffusion::NoiseSchedule& schedule, int n, int steps, double guidance,
                                     std::uint64_t seed_base, int size) {
    std::vector<ImageTensor> out;
    for (int i = 0; i < n; ++i) {
        diffusion::SamplerConfig sc;
        sc.steps = steps;
        sc.guidance_scale = guidance;
        sc.seed = seed_base + static_cast<std::uint64_t>(i);
        out.push_back(diffusion::sample(prompt, models, schedule, sc, size, size));
    }
    return out;
}

std::map<std::string, double> evaluate_images(const ToyModelBundle& bundle, std::span<const ImageTensor> images,
                                              std::span<const std::string> ids, int k, eval::PredictionLog* merged) {
    std::map<std::string, double> acc;
    for (const auto& c : bundle.classifiers) {
        auto log = eval::classify(images, ids, *c, k);
        acc[c->id()] = eval::spurious_accuracy(log, k, ids);
        if (merged) merged->merge(log);
    }
    return acc;
}

}  // namespace

ToyReport run_end_to_end(const ToyModelBundle& bundle, const EndToEndConfig& config, const fs::path& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& data = bundle.dataset.config;
    const int k = config.target_class;
    if (k < 0 || k >= data.num_classes) throw ConfigError("target class outside the toy label space");
    if (config.sample_n < 1 || config.select_n < 1 || config.prior_per_reference < 1) {
        throw ConfigError("sample_n, select_n and prior_per_reference must be positive");
    }
    fs::create_directories(out_dir);
    ToyReport report;
    report.target_class = k;
    report.target_noun = data.class_nouns[static_cast<std::size_t>(k)];
    const int size = data.image_size;

    // Filter: feature-only test images of class k kept by every classifier.
    std::vector<ImageTensor> pool;
    std::vector<std::string> pool_ids;
    for (const auto* it : bundle.dataset.select(Split::test, ItemKind::feature_only, -1, k)) {
        pool.push_back(it->image);
        pool_ids.push_back(it->image_id);
    }
    report.selected_ids = stage("filter", [&] {
        std::vector<eval::PredictionLog> logs;
        eval::PredictionLog merged;
        merged.provenance() = {{"preprocessing", "none"}, {"source", "synthetic test split"}};
        for (const auto& c : bundle.classifiers) {
            logs.push_back(eval::classify(pool, pool_ids, *c, k));
            report.table.set(c->id(), k, eval::Source::reference_dataset, eval::spurious_accuracy(logs.back(), k, pool_ids));
            merged.merge(logs.back());
        }
        merged.save(out_dir / "filter_logs.jsonl");
        auto ids = eval::consistency_filter(logs, k, config.select_n);
        std::string txt;
        for (const auto& id : ids) txt += id + "\n";
        io::atomic_write_text(out_dir / "selected_ids.txt", txt);
        return ids;
    });

    std::vector<ImageTensor> refs;
    for (const auto& id : report.selected_ids) refs.push_back(bundle.dataset.at(id).image);

    const features::FeatureBank bank = stage("feature_bank", [&] {
        auto b = features::reference_feature_bank(refs, report.selected_ids, bundle.extractor(), k, config.reduction);
        features::save_feature_cache(out_dir / "feature_bank.spgfeat", b);
        return b;
    });
    const trainer::SfslContext ctx{bank, bundle.extractor()};

    trainer::PromptTemplate tmpl;
    tmpl.class_noun = data.feature_noun;
    const std::string instance_prompt = trainer::make_prompt(tmpl, true);
    const int prior_n = config.prior_per_reference * static_cast<int>(refs.size());
    const trainer::PriorSet prior = stage("prior", [&] {
        diffusion::SamplerConfig sc;
        sc.steps = config.sampler_steps;
        sc.guidance_scale = config.guidance;
        sc.seed = config.seed + 100000;
        auto p = trainer::generate_prior_set(trainer::make_prompt(tmpl, false), prior_n, bundle.models(), bundle.schedule,
                                             sc, size, size);
        trainer::save_prior_set(out_dir / "prior", p);
        return p;
    });

    const auto specs = arm_specs(config);
    const std::string ours_tag = specs[3].tag;
    ArmModels ours;
    for (const auto& spec : specs) {
        ArmResult arm;
        arm.spec = spec;
        const fs::path arm_dir = out_dir / "arms" / spec.tag;
        fs::remove_all(arm_dir);
        ArmModels m{bundle.predictor->clone(), bundle.text_encoder->clone()};

        trainer::TrainingConfig& tc = arm.training;
        tc.steps = config.finetune_steps;
        tc.learning_rate = config.learning_rate;
        tc.loss_weights = {1.0, spec.kappa, spec.sign};
        tc.reduction = config.reduction;
        tc.train_text_encoder = spec.train_text_encoder;
        tc.class_id = k;
        tc.seed = config.seed;
        tc.prompt = tmpl;
        tc.prior_count = prior_n;
        tc.prior_steps = config.sampler_steps;
        tc.prior_guidance = config.guidance;
        tc.prior_seed = config.seed + 100000;
        tc.output_dir = arm_dir.string();

        stage("finetune:" + spec.tag, [&] {
            const trainer::TrainableModels tm{*bundle.codec, *m.predictor, *m.text_encoder};
            auto observer = [&](const trainer::StepRecord& r, const std::vector<NamedParameter>&) {
                const double sum = r.ldm + tc.loss_weights.lambda_ppl * r.ppl + tc.loss_weights.kappa_sfsl * r.sfsl;
                arm.max_identity_error = std::max(arm.max_identity_error, std::abs(r.total - sum) / std::max(1.0, std::abs(r.total)));
            };
            auto res = trainer::finetune(tc, tm, refs, prior, spec.use_bank ? &ctx : nullptr, bundle.schedule, observer);
            arm.log = std::move(res.log);
            arm.parameter_hash = std::move(res.parameter_hash);
            // Location-free, so replays into another directory match.
            auto kv = tc.to_kv();
            kv.erase("output_dir");
            io::atomic_write_text(arm_dir / "config.txt", trainer::format_kv(kv));
            save_diffusion_checkpoint(arm_dir / "diffusion.ckpt", *bundle.codec, *m.predictor, *m.text_encoder);
        });

        if (spec.sample) {
            stage("sample:" + spec.tag, [&] {
                const diffusion::Models view{*bundle.codec, *m.predictor, *m.text_encoder};
                auto images = sample_many(instance_prompt, view, bundle.schedule, config.sample_n, config.sampler_steps,
                                          config.guidance, config.seed + 200000, size);
                for (int i = 0; i < config.sample_n; ++i) arm.sample_ids.push_back(spec.tag + "_gen_" + pad(static_cast<std::size_t>(i)));
                write_ppm(arm_dir / "samples.ppm", contact_sheet(images, 8));
                eval::PredictionLog merged;
                merged.provenance() = {{"preprocessing", "none"}, {"source", "generated"}, {"run", spec.tag}};
                arm.spurious_accuracy = evaluate_images(bundle, images, arm.sample_ids, k, &merged);
                merged.save(arm_dir / "predictions.jsonl");
                if (spec.tag == ours_tag) {
                    for (const auto& [cid, v] : arm.spurious_accuracy) report.table.set(cid, k, eval::Source::generated, v);
                    ContrastQualityScorer scorer;
                    report.quality = eval::quality_scores(std::vector<eval::QualityInput>{{k, refs, images}}, &scorer);
                }
            });
        }
        report.max_identity_error = std::max(report.max_identity_error, arm.max_identity_error);
        if (spec.tag == ours_tag) ours = std::move(m);
        report.arms.push_back(std::move(arm));
    }

    const auto& without_bank = report.arms[1];
    const auto& with_bank = report.arms[2];
    report.kappa0_matches_dreambooth =
        without_bank.log == with_bank.log && without_bank.parameter_hash == with_bank.parameter_hash;

    std::vector<eval::AccuracyGrid> grids;
    for (const auto& a : report.arms) {
        if (!a.spec.sample) continue;
        eval::AccuracyGrid g{a.spec.tag, {}};
        for (const auto& [cid, v] : a.spurious_accuracy) g.cells[{k, cid}] = v;
        grids.push_back(std::move(g));
    }
    report.ablation = stage("ablation", [&] { return eval::ablation_report(grids); });

    stage("recontext", [&] {
        const auto prompts = eval::recontextualize_prompts(tmpl, config.contexts);
        const diffusion::Models view{*bundle.codec, *ours.predictor, *ours.text_encoder};
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            auto images = sample_many(prompts[i], view, bundle.schedule, config.recontext_n, config.sampler_steps,
                                      config.guidance, config.seed + 300000, size);
            std::vector<std::string> ids;
            for (int j = 0; j < config.recontext_n; ++j) ids.push_back("recontext_" + pad(i, 2) + "_" + pad(static_cast<std::size_t>(j)));
            report.recontext.push_back({config.contexts[i], prompts[i], evaluate_images(bundle, images, ids, k, nullptr)});
        }
        return 0;
    });

    // Persist.
    io::atomic_write_text(out_dir / "spurious_accuracy.csv", report.table.to_csv());
    io::atomic_write_text(out_dir / "ablation.csv", eval::ablation_csv(report.ablation));
    io::atomic_write_text(out_dir / "quality.csv", eval::quality_csv(report.quality));
    std::string rc = "context,prompt,classifier_id,spurious_accuracy\n";
    for (const auto& r : report.recontext)
        for (const auto& [cid, v] : r.spurious_accuracy) rc += "\"" + r.context + "\",\"" + r.prompt + "\"," + cid + "," + fixed2(v) + "\n";
    io::atomic_write_text(out_dir / "recontext.csv", rc);
    io::atomic_write_text(out_dir / "report.json", report.to_json().dump(2) + "\n");
    io::atomic_write_text(out_dir / "report.md", report.to_markdown());
    report.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace spurgen::toy
