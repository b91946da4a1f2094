#include "test_support.hpp"

#include "spurgen/diffusion_core.hpp"
#include "spurgen/toy_pipeline.hpp"

#include <doctest.h>

#include <cmath>

using namespace spurgen;
using namespace spurgen::diffusion;
using spurgen::testing::random_tensor;

namespace {

struct SmallStack {
    toy::IdentityCodec codec;
    toy::ToyTextEncoder text{toy::Vocabulary::standard({"bird", "car"}), 4, 3};
    toy::ToyNoisePredictor predictor{toy::PredictorConfig{3, 5, 4, 4, 1}, 4};
    Models models() const { return {codec, predictor, text}; }
};

ImageTensor random_image(std::uint64_t seed, int h = 4, int w = 4) {
    Rng rng(seed);
    ag::Tensor t({3, h, w});
    for (auto& v : t.data()) v = rng.uniform01();
    return ImageTensor(t);
}

// Predictor that recovers the injected noise exactly from z_t, given z0.
class OraclePredictor : public NoisePredictor {
public:
    OraclePredictor(ag::Tensor z0, const NoiseSchedule& s, double offset) : z0_(std::move(z0)), s_(s), offset_(offset) {}
    ag::Var predict(const ag::Var& z_t, int t, const ag::Var&) const override {
        const double ab = s_.alpha_bar(t);
        ag::Tensor e(z_t.shape());
        for (std::size_t i = 0; i < e.numel(); ++i) {
            e[i] = (z_t.value()[i] - std::sqrt(ab) * z0_[i]) / std::sqrt(1.0 - ab) + offset_;
        }
        return ag::constant(e);
    }
    std::vector<NamedParameter> named_parameters() const override { return {}; }
    nlohmann::json metadata() const override { return {}; }

private:
    ag::Tensor z0_;
    const NoiseSchedule& s_;
    double offset_;
};

class CountingNative : public NativeSampler {
public:
    mutable int calls = 0;
    LatentTensor run(const NoisePredictor&, const ag::Var&, const ag::Var&, const LatentTensor& initial, int,
                     double) const override {
        ++calls;
        return initial;
    }
};

class NativePredictor : public NoisePredictor {
public:
    ag::Var predict(const ag::Var& z_t, int, const ag::Var&) const override { return z_t; }
    const NativeSampler* native_sampler() const override { return &native; }
    std::vector<NamedParameter> named_parameters() const override { return {}; }
    nlohmann::json metadata() const override { return {}; }
    CountingNative native;
};

}  // namespace

TEST_CASE("linear schedule constants") {
    const auto s = NoiseSchedule::linear();
    CHECK(s.steps() == 1000);
    CHECK(s.beta(1) == doctest::Approx(1e-4).epsilon(1e-15));
    CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-15));
    double prod = 1.0;
    for (int t = 1; t <= 1000; ++t) {
        prod *= 1.0 - s.beta(t);
        CHECK(std::abs(s.alpha_bar(t) - prod) <= 1e-10);
        if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    CHECK(s.alpha_bar(1) > 0.9998);
    CHECK(s.alpha_bar(1000) < 1e-4);
    CHECK_THROWS_AS(s.alpha_bar(0), ConfigError);
    CHECK_THROWS_AS(s.alpha_bar(1001), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::from_betas({0.1, 1.0}), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::from_betas({}), ConfigError);
}

TEST_CASE("forward noise closed form") {
    const std::vector<double> z0 = {1, 0}, eps = {0, 1};
    std::vector<double> out(2);
    forward_noise<double>(z0, eps, 1.0, out);
    CHECK(out == z0);
    forward_noise<double>(z0, eps, 0.0, out);
    CHECK(out == eps);
    forward_noise<double>(z0, eps, 0.25, out);
    CHECK(out[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(0.8660254).epsilon(1e-7));

    const auto s = NoiseSchedule::linear();
    const LatentTensor a(ag::Tensor({1, 1, 2}, std::vector<double>{1, 2}));
    const LatentTensor b(ag::Tensor({1, 2, 1}, std::vector<double>{1, 2}));
    CHECK_THROWS_AS(forward_noise(a, 10, b, s), ConfigError);
    CHECK_THROWS_AS(forward_noise(a, 0, a, s), ConfigError);
}

TEST_CASE("predict_x0 closed form and limits") {
    Rng rng(1);
    std::vector<double> zt(16), e(16), out(16);
    for (auto& v : zt) v = rng.normal();
    for (auto& v : e) v = rng.normal();
    predict_x0<double>(zt, e, 1.0, out);
    CHECK(out == zt);
    predict_x0<double>(zt, e, 0.25, out);
    for (std::size_t i = 0; i < 16; ++i) CHECK(out[i] == doctest::Approx((zt[i] - std::sqrt(0.75) * e[i]) / 0.5).epsilon(1e-14));
    CHECK_THROWS_AS(predict_x0<double>(zt, e, 0.0, out), DegenerateInputError);
}

TEST_CASE("predict_x0 inverts forward_noise in double precision") {
    const auto s = NoiseSchedule::linear();
    Rng rng(2);
    const auto z0 = random_tensor(rng, {3, 4, 4});
    const auto eps = random_tensor(rng, {3, 4, 4});
    for (int t : {1, 10, 100, 500, 900, 1000}) {
        const auto zt = forward_noise(LatentTensor(z0), t, LatentTensor(eps), s);
        const auto back = predict_x0(zt, t, LatentTensor(eps), s);
        for (std::size_t i = 0; i < z0.numel(); ++i) CHECK(back.tensor()[i] == doctest::Approx(z0[i]).epsilon(1e-9));
    }
}

TEST_CASE("predict_x0 inverts forward_noise in single precision") {
    // Rounding in z_t is amplified by 1/sqrt(alpha_bar), about 150 at t = T,
    // so the 1e-6 bound is asserted where alpha_bar keeps that factor small.
    const auto s = NoiseSchedule::linear();
    Rng rng(3);
    std::vector<float> z0(256), eps(256), zt(256), back(256);
    for (auto& v : z0) v = static_cast<float>(rng.normal());
    for (auto& v : eps) v = static_cast<float>(rng.normal());
    double worst_gated = 0.0, worst_all = 0.0;
    for (int t = 1; t <= 1000; ++t) {
        const auto ab = static_cast<float>(s.alpha_bar(t));
        forward_noise<float>(z0, eps, ab, zt);
        predict_x0<float>(zt, eps, ab, back);
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < z0.size(); ++i) {
            const double d = static_cast<double>(back[i]) - z0[i];
            num += d * d;
            den += static_cast<double>(z0[i]) * z0[i];
        }
        const double rel = std::sqrt(num / den);
        worst_all = std::max(worst_all, rel);
        if (t <= 800) worst_gated = std::max(worst_gated, rel);
    }
    CHECK(worst_gated <= 1e-6);
    MESSAGE("single precision relative error: t<=800 " << worst_gated << ", all t " << worst_all);
}

TEST_CASE("noising moments match the closed form") {
    const auto s = NoiseSchedule::linear();
    const int t = 400;
    const double ab = s.alpha_bar(t);
    const std::vector<double> z0 = {1.5, -0.5, 0.0, 2.0};
    const int n = 10000;
    Rng rng(4);
    std::vector<double> sum(4, 0.0), sq(4, 0.0), eps(4), out(4);
    for (int k = 0; k < n; ++k) {
        for (auto& v : eps) v = rng.normal();
        forward_noise<double>(z0, eps, ab, out);
        for (std::size_t i = 0; i < 4; ++i) {
            sum[i] += out[i];
            sq[i] += out[i] * out[i];
        }
    }
    const double sigma_mean = std::sqrt((1.0 - ab) / n);
    for (std::size_t i = 0; i < 4; ++i) {
        const double mean = sum[i] / n;
        const double var = sq[i] / n - mean * mean;
        CHECK(std::abs(mean - std::sqrt(ab) * z0[i]) <= 3.0 * sigma_mean);
        CHECK(std::abs(var / (1.0 - ab) - 1.0) <= 0.05);
    }
}

TEST_CASE("denoising loss with a perfect predictor is zero, with an offset it is c squared") {
    const auto s = NoiseSchedule::linear();
    toy::IdentityCodec codec;
    toy::ToyTextEncoder text(toy::Vocabulary::standard({}), 4, 1);
    const auto img = random_image(5);
    const std::vector<ImageTensor> imgs = {img};
    const std::vector<std::string> prompts = {"a photo"};
    OraclePredictor perfect(img.tensor(), s, 0.0);
    Rng r1(9);
    CHECK(ldm_loss(imgs, prompts, {codec, perfect, text}, s, r1).item() == doctest::Approx(0.0).epsilon(1e-12));
    OraclePredictor offset(img.tensor(), s, 0.3);
    Rng r2(9);
    CHECK(ldm_loss(imgs, prompts, {codec, offset, text}, s, r2).item() == doctest::Approx(0.09).epsilon(1e-9));
}

TEST_CASE("denoising loss matches a scripted forward pass") {
    SmallStack st;
    const auto s = NoiseSchedule::linear();
    const std::vector<ImageTensor> imgs = {random_image(6), random_image(7)};
    const std::vector<std::string> prompts = {"a photo of a bird", "a photo of a car"};
    Rng rng(10);
    const double loss = ldm_loss(imgs, prompts, st.models(), s, rng).item();

    // Replay: per image, one uniform_int timestep then latent-size normals.
    Rng replay(10);
    double total = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
        const int t = static_cast<int>(replay.uniform_int(1, 1000));
        const auto& z0 = imgs[i].tensor();
        ag::Tensor eps(z0.shape()), zt(z0.shape());
        for (auto& v : eps.data()) v = replay.normal();
        const double ab = s.alpha_bar(t);
        for (std::size_t j = 0; j < z0.numel(); ++j) zt[j] = std::sqrt(ab) * z0[j] + std::sqrt(1.0 - ab) * eps[j];
        const auto pred = st.predictor.predict(ag::constant(zt), t, st.text.encode(prompts[i])).value();
        double se = 0.0;
        for (std::size_t j = 0; j < z0.numel(); ++j) se += (pred[j] - eps[j]) * (pred[j] - eps[j]);
        total += se / static_cast<double>(z0.numel());
    }
    CHECK(loss == doctest::Approx(total / 2.0).epsilon(1e-12));
}

TEST_CASE("prior loss shares the denoising formula") {
    SmallStack st;
    const auto s = NoiseSchedule::linear();
    const std::vector<ImageTensor> imgs = {random_image(8)};
    const std::vector<std::string> prompts = {"a photo of a car"};
    Rng a(3), b(3);
    CHECK(ldm_loss(imgs, prompts, st.models(), s, a).item() == ppl_loss(imgs, prompts, st.models(), s, b).item());
    Rng c(3);
    CHECK_THROWS_AS(ppl_loss({}, {}, st.models(), s, c), DataError);
    CHECK_THROWS_AS(ldm_loss(imgs, std::vector<std::string>{}, st.models(), s, c), ConfigError);
}

TEST_CASE("denoising loss is nonnegative") {
    SmallStack st;
    const auto s = NoiseSchedule::linear();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const std::vector<ImageTensor> imgs = {random_image(seed)};
        CHECK(ldm_loss(imgs, std::vector<std::string>{"bird"}, st.models(), s, rng).item() >= 0.0);
    }
}

TEST_CASE("denoising loss gradient matches finite differences for every predictor and encoder parameter") {
    SmallStack st;
    const auto s = NoiseSchedule::linear();
    const std::vector<ImageTensor> imgs = {random_image(11)};
    const std::vector<std::string> prompts = {"a photo of a bird"};
    auto loss = [&] {
        Rng rng(12);
        return ldm_loss(imgs, prompts, st.models(), s, rng);
    };
    auto params = st.predictor.named_parameters();
    for (auto& p : st.text.named_parameters()) params.push_back(p);
    zero_grads(params);
    ag::backward(loss());
    double worst = 0.0;
    std::size_t checked = 0;
    // Five-point central stencil: truncation O(h^4), so rounding noise
    // stays far below tiny gradient entries.
    const double h = 1e-4;
    for (auto& p : params) {
        const ag::Tensor grad = p.var.grad();
        for (std::size_t i = 0; i < p.var.numel(); ++i) {
            auto& val = p.var.mutable_value()[i];
            const double orig = val;
            auto at = [&](double delta) {
                ag::NoGradGuard g;
                val = orig + delta;
                const double v = loss().item();
                val = orig;
                return v;
            };
            const double numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
            const double analytic = grad.numel() ? grad[i] : 0.0;
            const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            worst = std::max(worst, rel);
            ++checked;
        }
    }
    CHECK(checked > 100);
    CHECK(worst < 1e-4);
    MESSAGE("worst relative gradient error " << worst);
}

TEST_CASE("ddim timesteps are leading and evenly spaced") {
    const auto ts = ddim_timesteps(1000, 25);
    REQUIRE(ts.size() == 25);
    CHECK(ts.front() == 961);
    CHECK(ts[1] == 921);
    CHECK(ts.back() == 1);
    CHECK(ddim_timesteps(1000, 1) == std::vector<int>{1});
    CHECK(ddim_timesteps(10, 10) == std::vector<int>{10, 9, 8, 7, 6, 5, 4, 3, 2, 1});
    CHECK_THROWS_AS(ddim_timesteps(1000, 0), ConfigError);
    CHECK_THROWS_AS(ddim_timesteps(1000, 1001), ConfigError);
}

TEST_CASE("sampler config validation") {
    const auto s = NoiseSchedule::linear();
    SamplerConfig c;
    CHECK(c.steps == 25);
    CHECK(c.guidance_scale == 7.5);
    CHECK_NOTHROW(c.validate(s));
    c.steps = 1001;
    CHECK_THROWS_AS(c.validate(s), ConfigError);
    c.steps = 5;
    c.guidance_scale = -1.0;
    CHECK_THROWS_AS(c.validate(s), ConfigError);
    CHECK_THROWS_AS(parse_scheduler_kind("pndm"), ConfigError);
}

TEST_CASE("sampling is deterministic per seed") {
    SmallStack st;
    const auto s = NoiseSchedule::linear();
    SamplerConfig c;
    c.steps = 5;
    c.seed = 7;
    const auto a = sample("a photo of a bird", st.models(), s, c, 4, 4);
    const auto b = sample("a photo of a bird", st.models(), s, c, 4, 4);
    CHECK(a == b);
    c.seed = 8;
    CHECK_FALSE(sample("a photo of a bird", st.models(), s, c, 4, 4) == a);
}

TEST_CASE("zero guidance follows the unconditional path only") {
    SmallStack st;
    const auto s = NoiseSchedule::linear();
    SamplerConfig c;
    c.steps = 5;
    c.guidance_scale = 0.0;
    const auto a = sample_latent("a photo of a bird", st.models(), s, c, 4, 4);
    const auto b = sample_latent("a photo of a car", st.models(), s, c, 4, 4);
    CHECK(a.tensor().data() == b.tensor().data());
    c.guidance_scale = 1.0;
    const auto u = sample_latent("", st.models(), s, c, 4, 4);
    CHECK(a.tensor().data() == u.tensor().data());
}

TEST_CASE("sampler trajectory matches a hand-rolled DDIM loop") {
    SmallStack st;
    const auto s = NoiseSchedule::linear();
    SamplerConfig c;
    c.steps = 5;
    c.guidance_scale = 7.5;
    c.seed = 0;
    SampleTrace trace;
    sample_latent("a photo of a bird", st.models(), s, c, 4, 4, &trace);
    REQUIRE(trace.latents.size() == 6);

    Rng rng(0);
    ag::Tensor z({3, 4, 4});
    for (auto& v : z.data()) v = rng.normal();
    CHECK(z.data() == trace.latents[0].data());
    const auto cond = st.text.encode("a photo of a bird");
    const auto uncond = st.text.encode("");
    const int stride = 1000 / 5;
    int t = 1000 - stride + 1;
    for (int step = 1; step <= 5; ++step, t -= stride) {
        const auto ec = st.predictor.predict(ag::constant(z), t, cond).value();
        const auto eu = st.predictor.predict(ag::constant(z), t, uncond).value();
        const double ab = s.alpha_bar(t);
        const double ab_prev = t - stride >= 1 ? s.alpha_bar(t - stride) : 1.0;
        ag::Tensor next(z.shape());
        for (std::size_t i = 0; i < z.numel(); ++i) {
            const double e = eu[i] + 7.5 * (ec[i] - eu[i]);
            const double x0 = (z[i] - std::sqrt(1.0 - ab) * e) / std::sqrt(ab);
            next[i] = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * e;
        }
        z = next;
        for (std::size_t i = 0; i < z.numel(); ++i) {
            CHECK(trace.latents[static_cast<std::size_t>(step)][i] == doctest::Approx(z[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("adapter_native sampling delegates or fails cleanly") {
    SmallStack st;
    const auto s = NoiseSchedule::linear();
    SamplerConfig c;
    c.steps = 3;
    c.scheduler_kind = SchedulerKind::adapter_native;
    CHECK_THROWS_AS(sample("bird", st.models(), s, c, 4, 4), ConfigError);
    NativePredictor native;
    sample("bird", {st.codec, native, st.text}, s, c, 4, 4);
    CHECK(native.native.calls == 1);
}

TEST_CASE("sampled images are quantized to 8-bit levels") {
    SmallStack st;
    const auto s = NoiseSchedule::linear();
    SamplerConfig c;
    c.steps = 3;
    const auto img = sample("bird", st.models(), s, c, 4, 4);
    for (double v : img.tensor().data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v * 255.0 == doctest::Approx(std::round(v * 255.0)).epsilon(1e-12));
    }
}

TEST_CASE("codec geometry and reconstruction") {
    toy::IdentityCodec id;
    toy::DownsampleCodec down;
    const auto img = ImageTensor::filled(8, 8, 0.2, 0.4, 0.8);
    CHECK(id.decode(id.encode(img)) == img);
    CHECK(down.latent_shape(8, 8) == ag::Shape{3, 4, 4});
    const auto rec = down.decode(down.encode(img));
    for (std::size_t i = 0; i < img.tensor().numel(); ++i) CHECK(std::abs(rec.tensor()[i] - img.tensor()[i]) <= 0.5 / 255.0 + 1e-12);
}
