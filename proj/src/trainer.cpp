#include "spurgen/trainer.hpp"

#include "spurgen/error.hpp"
#include "spurgen/io.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <regex>
#include <sstream>

namespace spurgen::trainer {

namespace fs = std::filesystem;

std::string make_prompt(const PromptTemplate& t, bool with_identifier) {
    static const std::regex placeholder(R"(\{([^{}]*)\})");
    if (t.identifier.empty()) throw ConfigError("prompt identifier must be nonempty");
    bool has_identifier = false;
    for (auto it = std::sregex_iterator(t.text.begin(), t.text.end(), placeholder); it != std::sregex_iterator(); ++it) {
        const std::string name = (*it)[1].str();
        if (name == "identifier") has_identifier = true;
        else if (name != "class_noun") throw ConfigError("unknown placeholder {" + name + "} in prompt template");
    }
    if (!has_identifier) throw ConfigError("prompt template lacks the {identifier} placeholder: " + t.text);

    std::string text = t.text;
    if (!with_identifier) {
        // Drop the placeholder together with one neighbouring space.
        std::string::size_type pos;
        while ((pos = text.find("{identifier}")) != std::string::npos) {
            std::string::size_type len = 12;
            if (pos + len < text.size() && text[pos + len] == ' ') ++len;
            else if (pos > 0 && text[pos - 1] == ' ') --pos, ++len;
            text.erase(pos, len);
        }
    }
    auto replace_all = [&text](const std::string& from, const std::string& to) {
        for (std::string::size_type pos = 0; (pos = text.find(from, pos)) != std::string::npos; pos += to.size())
            text.replace(pos, from.size(), to);
    };
    replace_all("{identifier}", t.identifier);
    replace_all("{class_noun}", t.class_noun);
    return text;
}

PriorSet generate_prior_set(const std::string& class_prompt, int n, const diffusion::Models& models,
                            const diffusion::NoiseSchedule& schedule, const diffusion::SamplerConfig& sampler,
                            int height, int width) {
    if (n <= 0) throw ConfigError("prior set size must be positive");
    sampler.validate(schedule);
    PriorSet prior;
    prior.provenance = sampler;
    for (int i = 0; i < n; ++i) {
        diffusion::SamplerConfig cfg = sampler;
        cfg.seed = sampler.seed + static_cast<std::uint64_t>(i);
        prior.images.push_back(diffusion::sample(class_prompt, models, schedule, cfg, height, width));
        prior.prompts.push_back(class_prompt);
        prior.seeds.push_back(cfg.seed);
    }
    return prior;
}

void save_prior_set(const fs::path& dir, const PriorSet& prior) {
    fs::create_directories(dir);
    nlohmann::json files = nlohmann::json::array();
    for (std::size_t i = 0; i < prior.images.size(); ++i) {
        std::ostringstream name;
        name << "prior_" << std::setw(4) << std::setfill('0') << i << ".ppm";
        write_ppm(dir / name.str(), prior.images[i]);
        files.push_back({{"file", name.str()}, {"prompt", prior.prompts[i]}, {"seed", prior.seeds[i]}});
    }
    const nlohmann::json manifest{{"images", files},
                                  {"sampler",
                                   {{"steps", prior.provenance.steps},
                                    {"guidance_scale", prior.provenance.guidance_scale},
                                    {"seed", prior.provenance.seed},
                                    {"scheduler_kind", diffusion::to_string(prior.provenance.scheduler_kind)}}}};
    io::atomic_write_text(dir / "prior_set.json", manifest.dump(2) + "\n");
}

PriorSet load_prior_set(const fs::path& dir) {
    PriorSet prior;
    try {
        const auto j = nlohmann::json::parse(io::read_text(dir / "prior_set.json"));
        const auto& s = j.at("sampler");
        prior.provenance.steps = s.at("steps").get<int>();
        prior.provenance.guidance_scale = s.at("guidance_scale").get<double>();
        prior.provenance.seed = s.at("seed").get<std::uint64_t>();
        prior.provenance.scheduler_kind = diffusion::parse_scheduler_kind(s.at("scheduler_kind").get<std::string>());
        for (const auto& e : j.at("images")) {
            prior.images.push_back(read_ppm(dir / e.at("file").get<std::string>()));
            prior.prompts.push_back(e.at("prompt").get<std::string>());
            prior.seeds.push_back(e.at("seed").get<std::uint64_t>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed prior set manifest in " + dir.string() + ": " + e.what());
    }
    if (prior.images.empty()) throw DataError("prior set in " + dir.string() + " is empty");
    return prior;
}

void LossWeights::validate() const {
    if (!std::isfinite(lambda_ppl) || lambda_ppl < 0.0) throw ConfigError("lambda_ppl must be finite and nonnegative");
    if (!std::isfinite(kappa_sfsl) || kappa_sfsl < 0.0) throw ConfigError("kappa_sfsl must be finite and nonnegative");
}

LossBreakdown total_loss(const TrainingBatch& batch, const SfslContext* sfsl, const diffusion::Models& models,
                         const diffusion::NoiseSchedule& schedule, const LossWeights& weights, Rng& rng) {
    weights.validate();
    const bool use_sfsl = weights.kappa_sfsl != 0.0;
    if (use_sfsl) {
        if (!sfsl) throw ConfigError("kappa_sfsl > 0 requires a reference feature bank and extractor");
        if (!models.codec.differentiable_decode()) throw ConfigError("kappa_sfsl > 0 requires a differentiable decoder");
        if (!sfsl->extractor.differentiable()) throw ConfigError("kappa_sfsl > 0 requires a differentiable feature extractor");
    }

    std::vector<diffusion::BranchItem> prior_trace;
    LossBreakdown out;
    ag::Var ldm = diffusion::ldm_loss(batch.ref_images, batch.ref_prompts, models, schedule, rng);
    ag::Var ppl = diffusion::ppl_loss(batch.prior_images, batch.prior_prompts, models, schedule, rng,
                                      use_sfsl ? &prior_trace : nullptr);
    out.ldm = ldm.item();
    out.ppl = ppl.item();
    out.total = ag::add(ldm, ag::scale(ppl, weights.lambda_ppl));

    if (use_sfsl) {
        const int k = sfsl->bank.class_id();
        const features::ClassWeights w = sfsl->extractor.class_weights(k);
        std::vector<ag::Var> psis;
        for (const auto& item : prior_trace) {
            ag::Var x0 = diffusion::predict_x0(item.z_t, item.t, item.eps_pred, schedule);
            ag::Var image = models.codec.decode(x0);
            psis.push_back(features::class_wise_feature(sfsl->extractor.features(image), w));
        }
        ag::Var s = features::sfsl_loss(sfsl->bank, psis, k, weights.sfsl_sign);
        out.sfsl = s.item();
        out.total = ag::add(out.total, ag::scale(s, weights.kappa_sfsl));
    }
    out.total_value = out.total.item();
    return out;
}

AdamW::AdamW(std::vector<NamedParameter> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
        m_.emplace_back(p.var.numel(), 0.0);
        v_.emplace_back(p.var.numel(), 0.0);
    }
}

void AdamW::step() {
    ++t_;
    const auto& c = config_;
    const double bc1 = 1.0 - std::pow(c.beta1, t_);
    const double bc2 = 1.0 - std::pow(c.beta2, t_);
    const double step_size = c.learning_rate / bc1;
    const double sqrt_bc2 = std::sqrt(bc2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k].var.mutable_value().data();
        const auto& g = params_[k].var.grad().data();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] *= 1.0 - c.learning_rate * c.weight_decay;
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            p[i] -= step_size * m[i] / (std::sqrt(v[i]) / sqrt_bc2 + c.epsilon);
        }
    }
}

void TrainingConfig::validate() const {
    if (steps <= 0) throw ConfigError("steps must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
    if (prior_count < 0) throw ConfigError("prior_count must be nonnegative");
    loss_weights.validate();
}

namespace {

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::map<std::string, std::string> TrainingConfig::to_kv() const {
    return {
        {"steps", std::to_string(steps)},
        {"learning_rate", fmt_double(learning_rate)},
        {"weight_decay", fmt_double(weight_decay)},
        {"beta1", fmt_double(beta1)},
        {"beta2", fmt_double(beta2)},
        {"epsilon", fmt_double(epsilon)},
        {"batch_size", std::to_string(batch_size)},
        {"lambda_ppl", fmt_double(loss_weights.lambda_ppl)},
        {"kappa_sfsl", fmt_double(loss_weights.kappa_sfsl)},
        {"sfsl_sign", features::to_string(loss_weights.sfsl_sign)},
        {"reduction", features::to_string(reduction)},
        {"train_text_encoder", train_text_encoder ? "true" : "false"},
        {"reference_image_dir", reference_image_dir},
        {"class_id", std::to_string(class_id)},
        {"seed", std::to_string(seed)},
        {"prompt_template", prompt.text},
        {"identifier", prompt.identifier},
        {"class_noun", prompt.class_noun},
        {"prior_count", std::to_string(prior_count)},
        {"prior_steps", std::to_string(prior_steps)},
        {"prior_guidance", fmt_double(prior_guidance)},
        {"prior_seed", std::to_string(prior_seed)},
        {"base_checkpoint", base_checkpoint},
        {"extractor_checkpoint", extractor_checkpoint},
        {"prior_dir", prior_dir},
        {"output_dir", output_dir},
    };
}

TrainingConfig TrainingConfig::from_kv(const std::map<std::string, std::string>& kv) {
    TrainingConfig c;
    const auto known = c.to_kv();
    for (const auto& [k, v] : kv) {
        if (!known.contains(k)) throw ConfigError("unknown configuration key '" + k + "'");
    }
    auto get = [&kv](const std::string& key, auto& field) {
        auto it = kv.find(key);
        if (it == kv.end()) return;
        using T = std::decay_t<decltype(field)>;
        try {
            if constexpr (std::is_same_v<T, int>) field = std::stoi(it->second);
            else if constexpr (std::is_same_v<T, std::uint64_t>) field = std::stoull(it->second);
            else if constexpr (std::is_same_v<T, double>) field = std::stod(it->second);
            else if constexpr (std::is_same_v<T, bool>) {
                if (it->second == "true" || it->second == "1") field = true;
                else if (it->second == "false" || it->second == "0") field = false;
                else throw std::invalid_argument("bool");
            } else field = it->second;
        } catch (const std::logic_error&) {
            throw ConfigError("invalid value '" + it->second + "' for key '" + key + "'");
        }
    };
    get("steps", c.steps);
    get("learning_rate", c.learning_rate);
    get("weight_decay", c.weight_decay);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("epsilon", c.epsilon);
    get("batch_size", c.batch_size);
    get("lambda_ppl", c.loss_weights.lambda_ppl);
    get("kappa_sfsl", c.loss_weights.kappa_sfsl);
    if (kv.contains("sfsl_sign")) c.loss_weights.sfsl_sign = features::parse_sfsl_sign(kv.at("sfsl_sign"));
    if (kv.contains("reduction")) c.reduction = features::parse_reduction(kv.at("reduction"));
    get("train_text_encoder", c.train_text_encoder);
    get("reference_image_dir", c.reference_image_dir);
    get("class_id", c.class_id);
    get("seed", c.seed);
    get("prompt_template", c.prompt.text);
    get("identifier", c.prompt.identifier);
    get("class_noun", c.prompt.class_noun);
    get("prior_count", c.prior_count);
    get("prior_steps", c.prior_steps);
    get("prior_guidance", c.prior_guidance);
    get("prior_seed", c.prior_seed);
    get("base_checkpoint", c.base_checkpoint);
    get("extractor_checkpoint", c.extractor_checkpoint);
    get("prior_dir", c.prior_dir);
    get("output_dir", c.output_dir);
    return c;
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

std::string format_kv(const std::map<std::string, std::string>& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

nlohmann::json to_json(const StepRecord& r) {
    return {{"step", r.step}, {"L_LDM", r.ldm}, {"L_PPL", r.ppl}, {"L_SFSL", r.sfsl}, {"total", r.total}, {"lr", r.lr}};
}

StepRecord step_record_from_json(const nlohmann::json& j) {
    return {j.at("step").get<int>(),      j.at("L_LDM").get<double>(), j.at("L_PPL").get<double>(),
            j.at("L_SFSL").get<double>(), j.at("total").get<double>(), j.at("lr").get<double>()};
}

std::vector<StepRecord> read_training_log(const fs::path& path) {
    std::istringstream is(io::read_text(path));
    std::vector<StepRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(step_record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed training log record in " + path.string() + ": " + e.what());
        }
    }
    return out;
}

std::vector<NamedParameter> trainable_parameters(const TrainingConfig& config, const TrainableModels& models) {
    auto params = with_prefix("predictor.", models.predictor.named_parameters());
    if (config.train_text_encoder) {
        auto te = with_prefix("text_encoder.", models.text_encoder.named_parameters());
        params.insert(params.end(), te.begin(), te.end());
    }
    return params;
}

namespace {

void dump_divergence(const fs::path& path, const StepRecord& rec, const std::vector<NamedParameter>& params) {
    nlohmann::json norms = nlohmann::json::object();
    for (const auto& p : params) {
        double sq = 0.0;
        for (double v : p.var.value().data()) sq += v * v;
        norms[p.name] = std::sqrt(sq);
    }
    io::atomic_write_text(path, nlohmann::json{{"record", to_json(rec)}, {"parameter_norms", norms}}.dump(2) + "\n");
}

}  // namespace

FinetuneResult finetune(const TrainingConfig& config, const TrainableModels& models,
                        std::span<const ImageTensor> references, const PriorSet& prior, const SfslContext* sfsl,
                        const diffusion::NoiseSchedule& schedule, const StepObserver& observer) {
    config.validate();
    if (references.empty()) throw DataError("fine-tuning needs at least one reference image");
    if (prior.images.empty() || prior.images.size() != prior.prompts.size()) throw DataError("prior set is empty or inconsistent");
    if (sfsl && sfsl->bank.class_id() != config.class_id) throw ConfigError("feature bank class differs from the run class");

    const auto params = trainable_parameters(config, models);
    if (parameter_count(params) == 0) throw ConfigError("no trainable parameters enumerated");

    const std::string ref_prompt = make_prompt(config.prompt, true);
    AdamW opt(params, config.optimizer());
    Rng rng(config.seed);
    const diffusion::Models view = models.view();

    std::ofstream log_file;
    if (!config.output_dir.empty()) {
        fs::create_directories(config.output_dir);
        log_file.open(fs::path(config.output_dir) / "train_log.jsonl", std::ios::app);
    }

    FinetuneResult result;
    const std::size_t bs = static_cast<std::size_t>(config.batch_size);
    for (int step = 0; step < config.steps; ++step) {
        std::vector<ImageTensor> ref_imgs, prior_imgs;
        std::vector<std::string> ref_prompts, prior_prompts;
        for (std::size_t j = 0; j < bs; ++j) {
            const std::size_t idx = static_cast<std::size_t>(step) * bs + j;
            ref_imgs.push_back(references[idx % references.size()]);
            ref_prompts.push_back(ref_prompt);
            prior_imgs.push_back(prior.images[idx % prior.images.size()]);
            prior_prompts.push_back(prior.prompts[idx % prior.images.size()]);
        }
        zero_grads(params);
        const LossBreakdown loss = total_loss({ref_imgs, ref_prompts, prior_imgs, prior_prompts}, sfsl, view, schedule,
                                              config.loss_weights, rng);
        const StepRecord rec{step + 1, loss.ldm, loss.ppl, loss.sfsl, loss.total_value, config.learning_rate};
        if (!std::isfinite(rec.total)) {
            std::string dump;
            if (!config.output_dir.empty()) {
                dump = (fs::path(config.output_dir) / "divergence_dump.json").string();
                dump_divergence(dump, rec, params);
            }
            throw DivergenceError("non-finite loss at step " + std::to_string(rec.step), dump);
        }
        ag::backward(loss.total);
        if (observer) observer(rec, params);
        opt.step();
        result.log.push_back(rec);
        if (log_file.is_open()) {
            log_file << to_json(rec).dump() << '\n';
            log_file.flush();
        }
    }
    result.parameter_hash = parameter_hash(params);
    return result;
}

}  // namespace spurgen::trainer
