#include "published_values.hpp"
#include "test_support.hpp"

#include "spurgen/eval_harness.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

using namespace spurgen;
using namespace spurgen::eval;

namespace {

// Predicts the brightest channel.
class ChannelClassifier : public Classifier {
public:
    std::string id() const override { return "channel"; }
    int num_classes() const override { return 3; }
    std::vector<double> logits(const ImageTensor& image) const override {
        const auto& t = image.tensor();
        const std::size_t plane = t.numel() / 3;
        std::vector<double> z(3, 0.0);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < plane; ++i) z[c] += t[c * plane + i];
        return z;
    }
};

ImageTensor solid(double r, double g, double b) {
    ag::Tensor t({3, 2, 2});
    for (int i = 0; i < 4; ++i) {
        t[i] = r;
        t[4 + i] = g;
        t[8 + i] = b;
    }
    return ImageTensor(t);
}

PredictionLog log_with_hits(std::size_t hits, std::size_t total, int k, std::vector<std::string>& ids) {
    PredictionLog log;
    ids.clear();
    for (std::size_t i = 0; i < total; ++i) {
        ids.push_back("img" + std::to_string(i));
        log.add({ids.back(), "c", i < hits ? k : k + 1, 0.5});
    }
    return log;
}

struct RandomEnsemble {
    std::vector<PredictionLog> logs;
    std::vector<std::string> ids;
};

RandomEnsemble random_ensemble(Rng& rng, int k) {
    RandomEnsemble e;
    const auto n_images = static_cast<std::size_t>(rng.uniform_int(1, 30));
    const auto n_classifiers = static_cast<std::size_t>(rng.uniform_int(1, 4));
    for (std::size_t i = 0; i < n_images; ++i) e.ids.push_back("id" + std::to_string(rng.uniform_int(0, 999999)));
    std::sort(e.ids.begin(), e.ids.end());
    e.ids.erase(std::unique(e.ids.begin(), e.ids.end()), e.ids.end());
    for (std::size_t c = 0; c < n_classifiers; ++c) {
        PredictionLog log;
        for (const auto& id : e.ids) {
            const int pred = rng.uniform01() < 0.7 ? k : static_cast<int>(rng.uniform_int(0, 4));
            // Coarse confidences so ties occur.
            const double conf = static_cast<double>(rng.uniform_int(0, 10)) / 10.0;
            log.add({id, "clf" + std::to_string(c), pred, conf});
        }
        e.logs.push_back(log);
    }
    return e;
}

// Double loop over ids and classifiers, then a full sort by (-min conf, id).
std::vector<std::string> brute_force_filter(const RandomEnsemble& e, int k) {
    std::vector<std::pair<double, std::string>> q;
    for (const auto& id : e.ids) {
        bool all = true;
        double m = 2.0;
        for (std::size_t c = 0; c < e.logs.size(); ++c) {
            for (const auto& r : e.logs[c].records()) {
                if (r.image_id != id) continue;
                all = all && r.predicted_class == k;
                m = std::min(m, r.confidence);
            }
        }
        if (all) q.emplace_back(-m, id);
    }
    std::sort(q.begin(), q.end());
    std::vector<std::string> out;
    for (const auto& [negm, id] : q) out.push_back(id);
    return out;
}

}  // namespace

TEST_CASE("spurious accuracy cell arithmetic") {
    std::vector<std::string> ids;
    auto acc = [&](std::size_t hits) {
        const auto log = log_with_hits(hits, 75, 3, ids);
        return spurious_accuracy(log, 3, ids);
    };
    CHECK(acc(68) == 90.67);
    CHECK(acc(75) == 100.00);
    CHECK(acc(0) == 0.00);
    CHECK(acc(45) == 60.00);
    CHECK(acc(61) == 81.33);
    const auto small = log_with_hits(1, 2, 3, ids);
    const std::vector<std::string> none;
    CHECK_THROWS_AS(spurious_accuracy(small, 3, none), DataError);
    const std::vector<std::string> missing = {"nope"};
    CHECK_THROWS_AS(spurious_accuracy(small, 3, missing), DataError);
}

TEST_CASE("published accuracy cells as counts over 75 images") {
    // Two generated cells (81.30 and 98.00) fall between counts: 61/75 and
    // 73/75 give 81.33 and 97.33, 74/75 gives 98.67.
    int off_grid = 0;
    for (const auto& table : {spurgen::testing::kGeneratedAccuracy, spurgen::testing::kReferenceAccuracy}) {
        for (int m = 0; m < 4; ++m) {
            for (int c = 0; c < 6; ++c) {
                bool found = false;
                for (std::size_t n = 0; n <= 75 && !found; ++n) found = percent_2dp(n, 75) == table[m][c];
                if (!found) {
                    ++off_grid;
                    CHECK((table[m][c] == 81.30 || table[m][c] == 98.00));
                }
            }
        }
    }
    CHECK(off_grid == 2);
}

TEST_CASE("percent rounding is half-to-even on the exact rational") {
    CHECK(percent_2dp(1, 8) == 12.5);
    CHECK(percent_2dp(1, 3) == 33.33);
    CHECK(percent_2dp(2, 3) == 66.67);
    CHECK(percent_2dp(1, 80000) == 0.00);   // 0.00125 -> 0.00
    CHECK(percent_2dp(3, 80000) == 0.00);   // 0.00375 -> 0.00
    CHECK(percent_2dp(1, 40000) == 0.00);   // 0.0025 -> 0.00 (even)
    CHECK(percent_2dp(3, 40000) == 0.01);   // 0.0075 -> 0.01 (even)
    CHECK_THROWS_AS(percent_2dp(0, 0), DataError);
    std::vector<double> halves = {0.01, 0.02};  // mean 0.015 -> 0.02
    CHECK(mean_2dp(halves) == 0.02);
    std::vector<double> quarter = {0.02, 0.03};  // mean 0.025 -> 0.02
    CHECK(mean_2dp(quarter) == 0.02);
}

TEST_CASE("spurious accuracy matches brute-force counting on random logs") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = static_cast<int>(rng.uniform_int(0, 3));
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 200));
        PredictionLog log;
        std::vector<std::string> ids;
        std::size_t hits = 0;
        for (std::size_t i = 0; i < n; ++i) {
            ids.push_back(std::to_string(i));
            const int p = static_cast<int>(rng.uniform_int(0, 3));
            hits += p == k;
            log.add({ids.back(), "c", p, rng.uniform01()});
        }
        const double expect = std::round(1e6 * static_cast<double>(hits) / static_cast<double>(n)) / 1e4;
        const double got = spurious_accuracy(log, k, ids);
        REQUIRE(std::abs(got - expect) <= 0.005 + 1e-9);
        REQUIRE(std::abs(got * static_cast<double>(n) / 100.0 - static_cast<double>(hits)) <=
                0.005 * static_cast<double>(n) / 100.0 + 1e-9);
    }
}

TEST_CASE("consistency filter examples") {
    std::vector<PredictionLog> logs(4);
    for (int c = 0; c < 4; ++c) {
        const std::string cid = "c" + std::to_string(c);
        logs[c].add({"A", cid, 7, 0.9});
        logs[c].add({"B", cid, c == 2 ? 1 : 7, 0.9});
    }
    CHECK(consistency_filter(logs, 7, 1) == std::vector<std::string>{"A"});
    CHECK_THROWS_AS(consistency_filter(logs, 7, 2), ShortfallError);
    try {
        consistency_filter(logs, 7, 6);
    } catch (const ShortfallError& e) {
        CHECK(e.qualifying() == 1);
    }
    CHECK_THROWS_AS(consistency_filter(logs, 7, 0), ConfigError);

    // Ten unanimous ids, six with the highest minimum confidence.
    std::vector<PredictionLog> two(2);
    for (int i = 0; i < 10; ++i) {
        const std::string id = "x" + std::to_string(i);
        two[0].add({id, "a", 2, 0.5 + 0.05 * i});
        two[1].add({id, "b", 2, i % 2 == 0 ? 0.99 : 0.3});
    }
    CHECK(consistency_filter(two, 2, 6) == std::vector<std::string>{"x8", "x6", "x4", "x2", "x0", "x1"});

    std::vector<PredictionLog> ragged(2);
    ragged[0].add({"A", "a", 1, 0.5});
    ragged[1].add({"B", "b", 1, 0.5});
    CHECK_THROWS_AS(consistency_filter(ragged, 1, 1), DataError);
}

TEST_CASE("consistency filter matches a brute-force oracle on random ensembles") {
    Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = static_cast<int>(rng.uniform_int(0, 4));
        const auto e = random_ensemble(rng, k);
        const auto expect = brute_force_filter(e, k);
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 8));
        if (expect.size() < n) {
            REQUIRE_THROWS_AS(consistency_filter(e.logs, k, n), ShortfallError);
            continue;
        }
        const auto got = consistency_filter(e.logs, k, n);
        REQUIRE(got == std::vector<std::string>(expect.begin(), expect.begin() + static_cast<long>(n)));
        // Full qualifying set equals the intersection of per-classifier spurious sets.
        const auto all = consistency_filter(e.logs, k, expect.size());
        std::set<std::string> inter(e.ids.begin(), e.ids.end());
        for (const auto& log : e.logs) {
            std::set<std::string> mine;
            for (const auto& r : log.records())
                if (r.predicted_class == k) mine.insert(r.image_id);
            std::set<std::string> next;
            std::set_intersection(inter.begin(), inter.end(), mine.begin(), mine.end(), std::inserter(next, next.end()));
            inter = next;
        }
        REQUIRE(std::set<std::string>(all.begin(), all.end()) == inter);
        auto reversed = e.logs;
        std::reverse(reversed.begin(), reversed.end());
        REQUIRE(consistency_filter(reversed, k, n) == got);
    }
}

TEST_CASE("single-classifier filter equals its own spurious set") {
    PredictionLog log;
    log.add({"a", "c", 1, 0.2});
    log.add({"b", "c", 0, 0.9});
    log.add({"c", "c", 1, 0.7});
    std::vector<PredictionLog> logs = {log};
    CHECK(consistency_filter(logs, 1, 2) == std::vector<std::string>{"c", "a"});
}

TEST_CASE("spurious predicate") {
    const PredictionRecord as_k{"img", "c", 5, 0.8};
    const PredictionRecord as_other{"img", "c", 2, 0.8};
    ContentLabels feeder{"img", {}, true, "feeder"};
    CHECK(spurious_predicate(feeder, as_k, 5) == SpuriousKind::class_extension);
    CHECK(spurious_predicate(feeder, as_other, 5) == SpuriousKind::not_spurious);
    ContentLabels with_k{"img", {5}, true, "feeder"};
    CHECK(spurious_predicate(with_k, as_k, 5) == SpuriousKind::not_spurious);
    ContentLabels with_l{"img", {3}, true, "feeder"};
    CHECK(spurious_predicate(with_l, as_k, 5) == SpuriousKind::shared_feature);
    ContentLabels plain{"img", {}, false, ""};
    CHECK(spurious_predicate(plain, as_k, 5) == SpuriousKind::not_spurious);
    std::map<std::string, ContentLabels> table{{"other", feeder}};
    CHECK_THROWS_AS(spurious_predicate(table, as_k, 5), DataError);
    CHECK(to_string(SpuriousKind::shared_feature) == "shared_feature");
}

TEST_CASE("spurious predicate never flags images depicting the target class") {
    Rng rng(3);
    for (int trial = 0; trial < 2000; ++trial) {
        const int k = static_cast<int>(rng.uniform_int(0, 5));
        ContentLabels l{"x", {}, rng.uniform01() < 0.5, "s"};
        for (int c = 0; c < 6; ++c)
            if (rng.uniform01() < 0.3) l.present_classes.insert(c);
        const PredictionRecord p{"x", "c", static_cast<int>(rng.uniform_int(0, 5)), 0.5};
        const auto kind = spurious_predicate(l, p, k);
        if (l.present_classes.contains(k)) REQUIRE(kind == SpuriousKind::not_spurious);
        if (kind != SpuriousKind::not_spurious) REQUIRE(p.predicted_class == k);
    }
}

TEST_CASE("ablation report reproduces the published aggregates") {
    std::vector<AccuracyGrid> runs;
    for (const auto& [tag, v] : spurgen::testing::kAblation) runs.push_back({tag, {{{0, "avg"}, v}}});
    const auto rows = ablation_report(runs);
    REQUIRE(rows.size() == 5);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].config_tag == spurgen::testing::kAblation[i].first);
        CHECK(rows[i].mean == spurgen::testing::kAblation[i].second);
    }
    const auto csv = ablation_csv(rows);
    CHECK(csv.find("vanilla,69.06,1\n") != std::string::npos);
    CHECK(csv.find("sfsl_k0.8,93.83,1\n") != std::string::npos);
    CHECK(ablation_markdown(rows).find("| sfsl_k0.5 | 83.61 |") != std::string::npos);
}

TEST_CASE("the generated-image grid averages to the published kappa one row") {
    AccuracyGrid g{"ours", {}};
    for (int m = 0; m < 4; ++m)
        for (int c = 0; c < 6; ++c) g.cells[{c, spurgen::testing::kClassifierNames[m]}] = spurgen::testing::kGeneratedAccuracy[m][c];
    std::vector<AccuracyGrid> runs = {g};
    const auto rows = ablation_report(runs);
    CHECK(rows[0].cells == 24);
    CHECK(rows[0].mean == 88.25);
}

TEST_CASE("ablation means match an independent oracle and ignore cell order") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        AccuracyGrid a{"a", {}}, b{"b", {}};
        std::vector<double> values;
        for (int c = 0; c < 6; ++c)
            for (int m = 0; m < 4; ++m) values.push_back(static_cast<double>(rng.uniform_int(0, 10000)) / 100.0);
        for (std::size_t i = 0; i < values.size(); ++i) a.cells[{static_cast<int>(i / 4), "m" + std::to_string(i % 4)}] = values[i];
        // Permuted assignment of the same values to cells.
        auto shuffled = values;
        for (std::size_t i = shuffled.size() - 1; i > 0; --i)
            std::swap(shuffled[i], shuffled[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
        for (std::size_t i = 0; i < shuffled.size(); ++i) b.cells[{static_cast<int>(i / 4), "m" + std::to_string(i % 4)}] = shuffled[i];
        std::vector<AccuracyGrid> runs = {a, b};
        const auto rows = ablation_report(runs);
        long long hundredths = 0;
        for (double v : values) hundredths += std::llround(v * 100.0);
        const double oracle = static_cast<double>(hundredths) / 24.0 / 100.0;
        REQUIRE(std::abs(rows[0].mean - oracle) <= 0.005 + 1e-9);
        REQUIRE(rows[0].mean == rows[1].mean);
    }
    AccuracyGrid constant{"k", {}};
    for (int c = 0; c < 24; ++c) constant.cells[{c, "m"}] = 42.42;
    std::vector<AccuracyGrid> one = {constant};
    CHECK(ablation_report(one)[0].mean == 42.42);
}

TEST_CASE("ablation report rejects ragged grids") {
    AccuracyGrid a{"a", {{{0, "m"}, 1.0}, {{1, "m"}, 2.0}}};
    AccuracyGrid b{"b", {{{0, "m"}, 1.0}}};
    AccuracyGrid c{"c", {{{0, "m"}, 1.0}, {{2, "m"}, 2.0}}};
    std::vector<AccuracyGrid> ab = {a, b}, ac = {a, c};
    CHECK_THROWS_AS(ablation_report(ab), DataError);
    CHECK_THROWS_AS(ablation_report(ac), DataError);
}

TEST_CASE("grid csv round trip") {
    AccuracyGrid g{"t", {{{0, "m,1"}, 12.5}, {{3, "plain"}, 100.0}}};
    const auto csv = grid_csv(g);
    CHECK(csv == "class_id,classifier_id,spurious_accuracy\n0,\"m,1\",12.50\n3,plain,100.00\n");
    const auto back = grid_from_csv(csv, "t");
    CHECK(back.cells == g.cells);
    CHECK_THROWS_AS(grid_from_csv("h\n1,2\n", "t"), DataError);
    CHECK_THROWS_AS(grid_from_csv("h\nx,m,3\n", "t"), DataError);
}

TEST_CASE("spurious accuracy table layout") {
    SpuriousAccuracyTable t;
    for (int m = 0; m < 4; ++m) {
        for (int c = 0; c < 6; ++c) {
            t.set(spurgen::testing::kClassifierNames[m], c, Source::reference_dataset, spurgen::testing::kReferenceAccuracy[m][c]);
            t.set(spurgen::testing::kClassifierNames[m], c, Source::generated, spurgen::testing::kGeneratedAccuracy[m][c]);
        }
    }
    CHECK(t.columns().size() == 12);
    CHECK(*t.get("resnet50_v1", 0, Source::generated) == 90.67);
    CHECK_FALSE(t.get("resnet50_v1", 9, Source::generated).has_value());
    const auto csv = t.to_csv();
    CHECK(csv.substr(0, csv.find('\n')).starts_with("classifier_id,class0:reference_dataset,class0:generated"));
    CHECK(csv.find("resnet50_v1,60.00,90.67,73.33,94.67") != std::string::npos);
    CHECK(t.to_markdown().find("| resnet50_robust | 93.33 | 100.00 |") != std::string::npos);
    CHECK_THROWS_AS(t.set("x", 0, Source::generated, 100.5), DataError);
}

TEST_CASE("classify records argmax and softmax confidence") {
    ChannelClassifier clf;
    const std::vector<ImageTensor> imgs = {solid(1, 0, 0), solid(0, 0.5, 0), solid(0.2, 0.2, 0.9)};
    const std::vector<std::string> ids = {"r", "g", "b"};
    const auto log = classify(imgs, ids, clf, 1);
    REQUIRE(log.records().size() == 3);
    CHECK(log.find("r", "channel")->predicted_class == 0);
    CHECK(log.find("g", "channel")->predicted_class == 1);
    CHECK(log.find("b", "channel")->predicted_class == 2);
    // Logits for "r" are (4, 0, 0).
    CHECK(log.find("r", "channel")->confidence == doctest::Approx(std::exp(4.0) / (std::exp(4.0) + 2.0)).epsilon(1e-14));
    CHECK(classify(imgs, ids, clf, 1) == log);
    CHECK_THROWS_AS(classify(imgs, ids, clf, 3), ConfigError);
    const std::vector<std::string> short_ids = {"r"};
    CHECK_THROWS_AS(classify(imgs, short_ids, clf, 1), ConfigError);
}

TEST_CASE("prediction log file format") {
    PredictionLog log;
    log.provenance()["preprocessing"] = "identity";
    log.add({"a", "c1", 2, 0.25});
    log.add({"a", "c2", 1, 1.0});
    const auto text = log.to_jsonl();
    CHECK(text.substr(0, text.find('\n')) == R"({"meta":{"preprocessing":"identity"}})");
    CHECK(text.find(R"({"classifier_id":"c1","confidence":0.25,"image_id":"a","predicted_class":2})") != std::string::npos);
    const auto back = PredictionLog::from_jsonl(text);
    CHECK(back == log);
    CHECK(back.provenance().at("preprocessing") == "identity");
    CHECK(back.classifier_ids() == std::vector<std::string>{"c1", "c2"});
    CHECK(back.for_classifier("c2").records().size() == 1);

    spurgen::testing::TempDir dir;
    log.save(dir / "p.jsonl");
    CHECK(PredictionLog::load(dir / "p.jsonl") == log);

    CHECK_THROWS_AS(log.add({"a", "c1", 0, 0.5}), DataError);
    CHECK_THROWS_AS(log.add({"b", "c1", 0, 1.5}), DataError);
    CHECK_THROWS_AS(PredictionLog::from_jsonl("{\"image_id\": \"a\"}\n"), DataError);
    CHECK_THROWS_AS(PredictionLog::from_jsonl("not json\n"), DataError);
}

namespace {
class ConstantScorer : public QualityScorer {
public:
    explicit ConstantScorer(double v) : v_(v) {}
    double score(const ImageTensor&) const override { return v_; }

private:
    double v_;
};
class RedScorer : public QualityScorer {
public:
    double score(const ImageTensor& image) const override { return image.tensor()[0]; }
};
}  // namespace

TEST_CASE("quality scores") {
    const std::vector<QualityInput> inputs = {
        {0, {solid(0.4, 0, 0), solid(0.6, 0, 0)}, {solid(0.1, 0, 0)}},
        {1, {}, {solid(1, 0, 0)}},
    };
    ConstantScorer half(0.5);
    auto rows = quality_scores(inputs, &half);
    CHECK(*rows[0].real_mean == 0.5);
    CHECK(*rows[0].generated_mean == 0.5);
    CHECK_FALSE(rows[1].real_mean.has_value());
    RedScorer red;
    rows = quality_scores(inputs, &red);
    CHECK(*rows[0].real_mean == doctest::Approx(0.5));
    CHECK(rows[0].real_n == 2);
    CHECK(quality_csv(rows) == "class_id,real_mean,real_n,generated_mean,generated_n\n0,0.50,2,0.10,1\n1,N/A,0,1.00,1\n");
    const auto none = quality_scores(inputs, nullptr);
    CHECK(quality_markdown(none).find("| 0 | N/A (n=2) | N/A (n=1) |") != std::string::npos);
    ConstantScorer bad(1.5);
    CHECK_THROWS_AS(quality_scores(inputs, &bad), DataError);
}

TEST_CASE("recontextualization prompts") {
    const trainer::PromptTemplate base{"a photo of a {identifier} {class_noun}", "sks", "flower"};
    const std::vector<std::string> beach = {"on the beach"};
    CHECK(recontextualize_prompts(base, beach) == std::vector<std::string>{"a photo of a sks flower on the beach"});
    const std::vector<std::string> four = {"on the beach", "on Mount Fuji", "in a garden", "in a market"};
    const auto p = recontextualize_prompts(base, four);
    REQUIRE(p.size() == 4);
    CHECK(p[1] == "a photo of a sks flower on Mount Fuji");
    CHECK(p[3] == "a photo of a sks flower in a market");
    const std::vector<std::string> empty_ctx = {""};
    CHECK(recontextualize_prompts(base, empty_ctx)[0] == "a photo of a sks flower");
    const std::vector<std::string> none;
    CHECK_THROWS_AS(recontextualize_prompts(base, none), ConfigError);
}

TEST_CASE("rating distribution") {
    const auto ratings = ratings_from_jsonl(
        R"({"user_id":"u1","image_id":"gen_1","score":5})"
        "\n"
        R"({"user_id":"u1","image_id":"real_1","score":4})"
        "\n\n"
        R"({"user_id":"u2","image_id":"gen_2","score":5})"
        "\n"
        R"({"user_id":"u2","image_id":"gen_3","score":2})"
        "\n");
    REQUIRE(ratings.size() == 4);
    const auto d = rating_distribution(ratings, [](const std::string& id) { return id.starts_with("gen"); });
    CHECK(d.generated[4] == 2);
    CHECK(d.generated[1] == 1);
    CHECK(d.real[3] == 1);
    CHECK(d.generated_percent(5) == doctest::Approx(200.0 / 3.0));
    CHECK(d.real_percent(4) == 100.0);
    CHECK(d.real_percent(1) == 0.0);
    const auto csv = rating_csv(d);
    CHECK(csv.find("5,0,0.00,2,66.67\n") != std::string::npos);
    CHECK(csv.find("4,1,100.00,0,0.00\n") != std::string::npos);
    CHECK_THROWS_AS(ratings_from_jsonl(R"({"user_id":"u","image_id":"i","score":6})"), DataError);
    CHECK_THROWS_AS(ratings_from_jsonl(R"({"user_id":"u","score":3})"), DataError);
}
