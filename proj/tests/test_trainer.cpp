#include "test_support.hpp"

#include "spurgen/io.hpp"
#include "spurgen/trainer.hpp"
#include "spurgen/toy_pipeline.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace spurgen;
using namespace spurgen::trainer;
using spurgen::testing::TempDir;

namespace {

ImageTensor random_image(std::uint64_t seed, int h = 8, int w = 8) {
    Rng rng(seed);
    ag::Tensor t({3, h, w});
    for (auto& v : t.data()) v = rng.uniform01();
    return ImageTensor(t);
}

// Small differentiable stack: 8x8 images, 4x4 latents.
struct Stack {
    toy::DownsampleCodec codec;
    toy::ToyTextEncoder text{toy::Vocabulary::standard({"bird", "flower"}), 4, 3};
    toy::ToyNoisePredictor predictor{toy::PredictorConfig{3, 5, 4, 4, 1}, 4};
    toy::ToyClassifier extractor{toy::ClassifierSpec{"fx", 4, 6, 5}, 3};
    diffusion::NoiseSchedule schedule = diffusion::NoiseSchedule::linear();

    diffusion::Models models() const { return {codec, predictor, text}; }
    TrainableModels trainable() { return {codec, predictor, text}; }
};

struct Batch {
    std::vector<ImageTensor> refs = {random_image(1), random_image(2)};
    std::vector<std::string> ref_prompts = {"a photo of a sks flower", "a photo of a sks flower"};
    std::vector<ImageTensor> prior = {random_image(3), random_image(4)};
    std::vector<std::string> prior_prompts = {"a photo of a flower", "a photo of a flower"};
    TrainingBatch view() const { return {refs, ref_prompts, prior, prior_prompts}; }
};

features::FeatureBank make_bank(const Stack& st, int k = 1) {
    const std::vector<ImageTensor> imgs = {random_image(10), random_image(11), random_image(12)};
    const std::vector<std::string> ids = {"a", "b", "c"};
    return features::reference_feature_bank(imgs, ids, st.extractor, k, features::Reduction::mean_vector);
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

class EmptyPredictor : public diffusion::NoisePredictor {
public:
    ag::Var predict(const ag::Var& z, int, const ag::Var&) const override { return z; }
    std::vector<NamedParameter> named_parameters() const override { return {}; }
    nlohmann::json metadata() const override { return {}; }
};

class NanPredictor : public diffusion::NoisePredictor {
public:
    NanPredictor() : w_(ag::parameter(ag::Tensor({1}, 1.0))) {}
    ag::Var predict(const ag::Var& z, int, const ag::Var&) const override {
        return ag::scale(z, std::numeric_limits<double>::quiet_NaN());
    }
    std::vector<NamedParameter> named_parameters() const override { return {{"w", w_}}; }
    nlohmann::json metadata() const override { return {}; }

private:
    ag::Var w_;
};

class FrozenDecodeCodec : public toy::IdentityCodec {
public:
    bool differentiable_decode() const override { return false; }
};

PriorSet small_prior(const Batch& b) {
    PriorSet p;
    p.images = b.prior;
    p.prompts = b.prior_prompts;
    p.seeds = {0, 1};
    return p;
}

}  // namespace

TEST_CASE("prompt rendering with and without the identifier") {
    PromptTemplate t{"a photo of a {identifier} {class_noun}", "sks", "flower"};
    CHECK(make_prompt(t, true) == "a photo of a sks flower");
    CHECK(make_prompt(t, false) == "a photo of a flower");
    PromptTemplate beach{"a photo of a {identifier} flower on the beach", "sks", "flower"};
    CHECK(make_prompt(beach, true) == "a photo of a sks flower on the beach");
    CHECK(make_prompt(beach, false) == "a photo of a flower on the beach");
    PromptTemplate tail{"photo {identifier}", "xyz", "bird"};
    CHECK(make_prompt(tail, false) == "photo");
}

TEST_CASE("prompt rendering errors") {
    CHECK_THROWS_AS(make_prompt({"a photo of a {class_noun}", "sks", "flower"}, true), ConfigError);
    CHECK_THROWS_AS(make_prompt({"a {identifier} {noun}", "sks", "flower"}, true), ConfigError);
    CHECK_THROWS_AS(make_prompt({"a {identifier} {class_noun}", "", "flower"}, true), ConfigError);
}

TEST_CASE("prior set generation is deterministic and records provenance") {
    Stack st;
    diffusion::SamplerConfig sc;
    sc.steps = 3;
    sc.seed = 50;
    const auto a = generate_prior_set("a photo of a flower", 1, st.models(), st.schedule, sc, 8, 8);
    const auto b = generate_prior_set("a photo of a flower", 1, st.models(), st.schedule, sc, 8, 8);
    CHECK(a.images[0] == b.images[0]);
    const auto eight = generate_prior_set("a photo of a flower", 8, st.models(), st.schedule, sc, 8, 8);
    REQUIRE(eight.images.size() == 8);
    CHECK(eight.seeds.front() == 50);
    CHECK(eight.seeds.back() == 57);
    CHECK(eight.prompts == std::vector<std::string>(8, "a photo of a flower"));
    CHECK(eight.provenance.steps == 3);
    int distinct = 0;
    for (std::size_t i = 1; i < 8; ++i) distinct += eight.images[i] == eight.images[0] ? 0 : 1;
    CHECK(distinct == 7);
    CHECK_THROWS_AS(generate_prior_set("x", 0, st.models(), st.schedule, sc, 8, 8), ConfigError);
}

TEST_CASE("prior set round-trips through disk") {
    Stack st;
    TempDir dir;
    diffusion::SamplerConfig sc;
    sc.steps = 2;
    const auto p = generate_prior_set("a photo of a flower", 3, st.models(), st.schedule, sc, 8, 8);
    save_prior_set(dir / "prior", p);
    const auto q = load_prior_set(dir / "prior");
    REQUIRE(q.images.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(q.images[i] == p.images[i]);
    CHECK(q.seeds == p.seeds);
    CHECK(q.prompts == p.prompts);
    CHECK(q.provenance.steps == 2);
    std::filesystem::create_directories(dir / "bad");
    io::atomic_write_text(dir / "bad" / "prior_set.json", "{\"images\": []}");
    CHECK_THROWS_AS(load_prior_set(dir / "bad"), DataError);
}

TEST_CASE("loss weights validation") {
    CHECK_THROWS_AS((LossWeights{-1.0, 1.0}).validate(), ConfigError);
    CHECK_THROWS_AS((LossWeights{1.0, std::nan("")}).validate(), ConfigError);
    CHECK_NOTHROW((LossWeights{0.0, 0.0}).validate());
}

TEST_CASE("total loss with kappa zero equals the prior-preservation objective") {
    Stack st;
    Batch b;
    Rng r1(7);
    const auto out = total_loss(b.view(), nullptr, st.models(), st.schedule, {1.0, 0.0}, r1);
    Rng r2(7);
    const double ldm = diffusion::ldm_loss(b.refs, b.ref_prompts, st.models(), st.schedule, r2).item();
    const double ppl = diffusion::ppl_loss(b.prior, b.prior_prompts, st.models(), st.schedule, r2).item();
    CHECK(rel(out.total_value, ldm + ppl) < 1e-9);
    CHECK(out.ldm == ldm);
    CHECK(out.ppl == ppl);
    CHECK(out.sfsl == 0.0);

    const auto bank = make_bank(st);
    const SfslContext ctx{bank, st.extractor};
    Rng r3(7);
    CHECK(total_loss(b.view(), &ctx, st.models(), st.schedule, {1.0, 0.0}, r3).total_value == out.total_value);
}

TEST_CASE("total loss with kappa and lambda zero equals the plain denoising objective") {
    Stack st;
    Batch b;
    Rng r1(8);
    const auto out = total_loss(b.view(), nullptr, st.models(), st.schedule, {0.0, 0.0}, r1);
    Rng r2(8);
    const double ldm = diffusion::ldm_loss(b.refs, b.ref_prompts, st.models(), st.schedule, r2).item();
    CHECK(rel(out.total_value, ldm) < 1e-9);
}

TEST_CASE("total loss with kappa one equals independently recomputed components") {
    Stack st;
    Batch b;
    const auto bank = make_bank(st);
    const SfslContext ctx{bank, st.extractor};
    Rng r1(0);
    const auto out = total_loss(b.view(), &ctx, st.models(), st.schedule, {1.0, 1.0}, r1);

    // Oracle: replay the stream, rebuild the one-step estimates by hand.
    Rng rng(0);
    const double ldm = diffusion::ldm_loss(b.refs, b.ref_prompts, st.models(), st.schedule, rng).item();
    double ppl = 0.0, cos_sum = 0.0;
    const auto w = st.extractor.class_weights(1);
    for (std::size_t i = 0; i < b.prior.size(); ++i) {
        const int t = static_cast<int>(rng.uniform_int(1, 1000));
        const auto z0 = st.codec.encode(b.prior[i]).tensor();
        ag::Tensor eps(z0.shape()), zt(z0.shape()), x0(z0.shape());
        for (auto& v : eps.data()) v = rng.normal();
        const double ab = st.schedule.alpha_bar(t);
        for (std::size_t j = 0; j < z0.numel(); ++j) zt[j] = std::sqrt(ab) * z0[j] + std::sqrt(1 - ab) * eps[j];
        const auto pred = st.predictor.predict(ag::constant(zt), t, st.text.encode(b.prior_prompts[i])).value();
        double se = 0.0;
        for (std::size_t j = 0; j < z0.numel(); ++j) {
            se += (pred[j] - eps[j]) * (pred[j] - eps[j]);
            x0[j] = (zt[j] - std::sqrt(1 - ab) * pred[j]) / std::sqrt(ab);
        }
        ppl += se / static_cast<double>(z0.numel());
        const auto image = st.codec.decode(ag::constant(x0));
        const auto phi = st.extractor.features(image).value().data();
        std::vector<double> psi(phi.size());
        for (std::size_t j = 0; j < phi.size(); ++j) psi[j] = w.weights[j] * phi[j];
        const auto& m = bank.mean_entry();
        double dot = 0, nm = 0, np = 0;
        for (std::size_t j = 0; j < psi.size(); ++j) {
            dot += m[j] * psi[j];
            nm += m[j] * m[j];
            np += psi[j] * psi[j];
        }
        cos_sum += dot / std::sqrt(nm * np);
    }
    ppl /= static_cast<double>(b.prior.size());
    const double sfsl = cos_sum / static_cast<double>(b.prior.size());
    CHECK(rel(out.ldm, ldm) < 1e-12);
    CHECK(rel(out.ppl, ppl) < 1e-12);
    CHECK(rel(out.sfsl, sfsl) < 1e-10);
    CHECK(rel(out.total_value, ldm + ppl + sfsl) < 1e-9);
}

TEST_CASE("sfsl sign flips only the sfsl component") {
    Stack st;
    Batch b;
    const auto bank = make_bank(st);
    const SfslContext ctx{bank, st.extractor};
    Rng r1(4), r2(4);
    const auto plus = total_loss(b.view(), &ctx, st.models(), st.schedule, {1.0, 0.7, features::SfslSign::paper_plus}, r1);
    const auto minus =
        total_loss(b.view(), &ctx, st.models(), st.schedule, {1.0, 0.7, features::SfslSign::encourage_minus}, r2);
    CHECK(plus.ldm == minus.ldm);
    CHECK(plus.ppl == minus.ppl);
    CHECK(plus.sfsl == -minus.sfsl);
    CHECK(plus.sfsl != 0.0);
}

TEST_CASE("sfsl path gradient matches finite differences") {
    Stack st;
    Batch b;
    const auto bank = make_bank(st);
    const SfslContext ctx{bank, st.extractor};
    auto params = trainable_parameters(TrainingConfig{}, st.trainable());
    auto loss = [&] {
        Rng rng(21);
        return total_loss(b.view(), &ctx, st.models(), st.schedule, {1.0, 1.0}, rng);
    };
    auto sfsl_only = [&] {
        Rng rng(21);
        return total_loss(b.view(), &ctx, st.models(), st.schedule, {0.0, 1.0}, rng);
    };
    for (const auto& which : {std::function<LossBreakdown()>(loss), std::function<LossBreakdown()>(sfsl_only)}) {
        zero_grads(params);
        ag::backward(which().total);
        double worst = 0.0, grad_norm = 0.0;
        const double h = 1e-4;
        for (auto& p : params) {
            const ag::Tensor g = p.var.grad();
            for (std::size_t i = 0; i < p.var.numel(); ++i) {
                auto& val = p.var.mutable_value()[i];
                const double orig = val;
                auto at = [&](double d) {
                    ag::NoGradGuard ng;
                    val = orig + d;
                    const double v = which().total_value;
                    val = orig;
                    return v;
                };
                const double num = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
                const double an = g.numel() ? g[i] : 0.0;
                grad_norm += an * an;
                worst = std::max(worst, std::abs(an - num) / std::max({std::abs(an), std::abs(num), 1e-6}));
            }
        }
        CHECK(grad_norm > 0.0);
        CHECK(worst < 1e-3);
        MESSAGE("worst relative gradient error " << worst);
    }
}

TEST_CASE("sfsl configuration errors") {
    Stack st;
    Batch b;
    const auto bank = make_bank(st);
    const SfslContext ctx{bank, st.extractor};
    Rng rng(1);
    CHECK_THROWS_AS(total_loss(b.view(), nullptr, st.models(), st.schedule, {1.0, 1.0}, rng), ConfigError);
    FrozenDecodeCodec frozen;
    toy::ToyNoisePredictor pred(toy::PredictorConfig{3, 4, 4, 4, 1}, 1);
    CHECK_THROWS_AS(total_loss(b.view(), &ctx, {frozen, pred, st.text}, st.schedule, {1.0, 1.0}, rng), ConfigError);
}

TEST_CASE("adamw single-parameter arithmetic") {
    auto p = ag::parameter(ag::Tensor({1}, 1.0));
    AdamW opt({{"p", p}}, {0.1, 0.9, 0.999, 1e-8, 0.01});
    p.node()->grad = ag::Tensor({1}, 0.5);
    opt.step();
    // Step 1: decay, then bias-corrected moments m_hat = g, v_hat = g^2.
    const double expect1 = 1.0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
    CHECK(p.value()[0] == doctest::Approx(expect1).epsilon(1e-15));
    p.node()->grad = ag::Tensor({1}, -0.25);
    opt.step();
    const double m = 0.9 * 0.05 + 0.1 * -0.25;
    const double v = 0.999 * (0.001 * 0.25) + 0.001 * 0.0625;
    const double expect2 = expect1 * (1 - 0.001) - 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
    CHECK(p.value()[0] == doctest::Approx(expect2).epsilon(1e-14));
    CHECK(opt.steps_taken() == 2);
}

TEST_CASE("two fine-tuning steps match a scripted optimizer replay") {
    Stack st;
    Batch b;
    TrainingConfig cfg;
    cfg.steps = 2;
    cfg.learning_rate = 1e-3;
    cfg.loss_weights = {1.0, 0.0};
    cfg.seed = 0;
    const auto params = trainable_parameters(cfg, st.trainable());
    std::vector<std::vector<double>> initial;
    for (const auto& p : params) initial.push_back(p.var.value().data());
    std::vector<std::vector<std::vector<double>>> grads;
    auto observer = [&](const StepRecord&, const std::vector<NamedParameter>& ps) {
        std::vector<std::vector<double>> g;
        for (const auto& p : ps) g.push_back(p.var.grad().numel() ? p.var.grad().data() : std::vector<double>(p.var.numel(), 0.0));
        grads.push_back(g);
    };
    finetune(cfg, st.trainable(), b.refs, small_prior(b), nullptr, st.schedule, observer);
    REQUIRE(grads.size() == 2);

    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        for (std::size_t i = 0; i < initial[k].size(); ++i) {
            double p = initial[k][i], m = 0, v = 0;
            for (int t = 1; t <= 2; ++t) {
                const double g = grads[static_cast<std::size_t>(t - 1)][k][i];
                p -= cfg.learning_rate * cfg.weight_decay * p;
                m = cfg.beta1 * m + (1 - cfg.beta1) * g;
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
                const double mhat = m / (1 - std::pow(cfg.beta1, t));
                const double vhat = v / (1 - std::pow(cfg.beta2, t));
                p -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
            }
            worst = std::max(worst, std::abs(p - params[k].var.value()[i]));
        }
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("kappa zero with a bank reproduces the bank-free trajectory") {
    Batch b;
    TrainingConfig cfg;
    cfg.steps = 3;
    cfg.learning_rate = 1e-3;
    cfg.loss_weights = {1.0, 0.0};
    cfg.class_id = 1;
    Stack a, c;
    const auto bank = make_bank(c);
    const SfslContext ctx{bank, c.extractor};
    const auto ra = finetune(cfg, a.trainable(), b.refs, small_prior(b), nullptr, a.schedule);
    const auto rc = finetune(cfg, c.trainable(), b.refs, small_prior(b), &ctx, c.schedule);
    CHECK(ra.log == rc.log);
    CHECK(ra.parameter_hash == rc.parameter_hash);
}

TEST_CASE("every logged step satisfies the component identity") {
    Stack st;
    Batch b;
    TrainingConfig cfg;
    cfg.steps = 4;
    cfg.learning_rate = 1e-3;
    cfg.loss_weights = {0.5, 2.0, features::SfslSign::encourage_minus};
    cfg.class_id = 1;
    const auto bank = make_bank(st);
    const SfslContext ctx{bank, st.extractor};
    const auto r = finetune(cfg, st.trainable(), b.refs, small_prior(b), &ctx, st.schedule);
    REQUIRE(r.log.size() == 4);
    for (const auto& s : r.log) {
        CHECK(rel(s.total, s.ldm + 0.5 * s.ppl + 2.0 * s.sfsl) < 1e-9);
        CHECK(std::abs(s.sfsl) <= 1.0);
        CHECK(s.lr == 1e-3);
    }
}

TEST_CASE("text encoder freezing") {
    Batch b;
    TrainingConfig cfg;
    cfg.steps = 1;
    cfg.learning_rate = 1e-2;
    cfg.loss_weights = {1.0, 0.0};
    for (bool train_te : {false, true}) {
        Stack st;
        cfg.train_text_encoder = train_te;
        const auto te_before = parameter_hash(st.text.named_parameters());
        const auto pr_before = parameter_hash(st.predictor.named_parameters());
        finetune(cfg, st.trainable(), b.refs, small_prior(b), nullptr, st.schedule);
        CHECK((parameter_hash(st.text.named_parameters()) != te_before) == train_te);
        CHECK(parameter_hash(st.predictor.named_parameters()) != pr_before);
    }
}

TEST_CASE("fine-tuning preconditions") {
    Stack st;
    Batch b;
    TrainingConfig cfg;
    cfg.steps = 1;
    cfg.train_text_encoder = false;
    EmptyPredictor empty;
    CHECK_THROWS_AS(finetune(cfg, {st.codec, empty, st.text}, b.refs, small_prior(b), nullptr, st.schedule), ConfigError);
    cfg.train_text_encoder = true;
    CHECK_THROWS_AS(finetune(cfg, st.trainable(), std::vector<ImageTensor>{}, small_prior(b), nullptr, st.schedule),
                    DataError);
    CHECK_THROWS_AS(finetune(cfg, st.trainable(), b.refs, PriorSet{}, nullptr, st.schedule), DataError);
    const auto bank = make_bank(st, 2);
    const SfslContext ctx{bank, st.extractor};
    cfg.class_id = 1;
    CHECK_THROWS_AS(finetune(cfg, st.trainable(), b.refs, small_prior(b), &ctx, st.schedule), ConfigError);
    cfg.steps = 0;
    CHECK_THROWS_AS(finetune(cfg, st.trainable(), b.refs, small_prior(b), nullptr, st.schedule), ConfigError);
}

TEST_CASE("divergence aborts with a state dump") {
    Stack st;
    Batch b;
    TempDir dir;
    TrainingConfig cfg;
    cfg.steps = 3;
    cfg.loss_weights = {1.0, 0.0};
    cfg.output_dir = (dir / "run").string();
    NanPredictor nan;
    try {
        finetune(cfg, {st.codec, nan, st.text}, b.refs, small_prior(b), nullptr, st.schedule);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(std::filesystem::exists(e.dump_path()));
        const auto dump = nlohmann::json::parse(io::read_text(e.dump_path()));
        CHECK(dump.at("record").at("step") == 1);
    }
}

TEST_CASE("training log is written one record per step") {
    Stack st;
    Batch b;
    TempDir dir;
    TrainingConfig cfg;
    cfg.steps = 3;
    cfg.learning_rate = 1e-3;
    cfg.loss_weights = {1.0, 0.0};
    cfg.output_dir = (dir / "run").string();
    const auto r = finetune(cfg, st.trainable(), b.refs, small_prior(b), nullptr, st.schedule);
    const auto log = read_training_log(dir / "run" / "train_log.jsonl");
    CHECK(log == r.log);
    const auto text = io::read_text(dir / "run" / "train_log.jsonl");
    const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
    for (const char* key : {"step", "L_LDM", "L_PPL", "L_SFSL", "total", "lr"}) CHECK(first.contains(key));
    io::atomic_write_text(dir / "bad.jsonl", "{\"step\": 1}\n");
    CHECK_THROWS_AS(read_training_log(dir / "bad.jsonl"), DataError);
}

TEST_CASE("default training configuration") {
    const TrainingConfig c;
    CHECK(c.steps == 800);
    CHECK(c.learning_rate == 2e-6);
    CHECK(c.weight_decay == 0.01);
    CHECK(c.beta1 == 0.9);
    CHECK(c.beta2 == 0.999);
    CHECK(c.epsilon == 1e-8);
    CHECK(c.batch_size == 1);
    CHECK(c.loss_weights.lambda_ppl == 1.0);
    CHECK(c.loss_weights.kappa_sfsl == 1.0);
    CHECK(c.loss_weights.sfsl_sign == features::SfslSign::paper_plus);
    CHECK(c.reduction == features::Reduction::mean_vector);
    CHECK(c.prior_count == 0);
}

TEST_CASE("training configuration key-value round trip") {
    TrainingConfig c;
    c.steps = 17;
    c.learning_rate = 3.3e-5;
    c.loss_weights = {0.25, 0.5, features::SfslSign::encourage_minus};
    c.reduction = features::Reduction::mean_pairwise;
    c.train_text_encoder = false;
    c.prompt.class_noun = "rose";
    c.seed = 12345678901234ULL;
    c.output_dir = "/tmp/x";
    const auto text = format_kv(c.to_kv());
    const auto back = TrainingConfig::from_kv(parse_kv(text));
    CHECK(back.to_kv() == c.to_kv());
    CHECK(back.learning_rate == c.learning_rate);

    const auto kv = parse_kv("# comment\nsteps = 5   # trailing\n\n learning_rate=1e-4\n");
    CHECK(kv.at("steps") == "5");
    CHECK(TrainingConfig::from_kv(kv).learning_rate == 1e-4);
    CHECK_THROWS_AS(parse_kv("steps 5\n"), ConfigError);
    CHECK_THROWS_AS(TrainingConfig::from_kv({{"stepz", "5"}}), ConfigError);
    CHECK_THROWS_AS(TrainingConfig::from_kv({{"steps", "five"}}), ConfigError);
    CHECK_THROWS_AS(TrainingConfig::from_kv({{"train_text_encoder", "yes"}}), ConfigError);
    CHECK_THROWS_AS(TrainingConfig::from_kv({{"sfsl_sign", "minus"}}), ConfigError);
}
