#include "cli.hpp"

#include "spurgen/error.hpp"
#include "spurgen/eval_harness.hpp"
#include "spurgen/feature_core.hpp"
#include "spurgen/io.hpp"
#include "spurgen/toy_pipeline.hpp"
#include "spurgen/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

namespace spurgen::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(3) << std::setfill('0') << ms << 'Z';
    return os.str();
}

std::string env_or_empty(const char* name) {
    const char* v = std::getenv(name);
    return v ? std::string(v) : std::string();
}

std::vector<fs::path> files_under(const fs::path& root) {
    std::vector<fs::path> files;
    if (fs::is_regular_file(root)) return {root};
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

void require_exists(const fs::path& p, const std::string& what) {
    if (p.empty()) throw UsageError(what + " is required");
    if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string());
}

// ---------------------------------------------------------------------------
// Run manifest

class Run {
public:
    Run(std::string command, std::vector<std::string> args) : command_(std::move(command)), args_(std::move(args)) {}

    /// Claims `out_dir`; refuses a directory that already holds a manifest.
    void begin(const fs::path& out_dir) {
        if (out_dir.empty()) throw UsageError("--out is required");
        const fs::path dir = fs::absolute(out_dir).lexically_normal();
        if (fs::exists(dir / kManifestName)) {
            throw UsageError("refusing to overwrite existing run manifest in " + dir.string());
        }
        fs::create_directories(dir);
        out_dir_ = dir;
        started_at_ = utc_now();
    }

    void input(const fs::path& p) {
        for (const auto& f : files_under(p)) {
            const std::string abs = fs::absolute(f).lexically_normal().string();
            if (seen_.insert(abs).second) inputs_.push_back({{"path", abs}, {"sha256", io::sha256_file(f)}});
        }
    }

    json& options() { return options_; }
    json& config() { return config_; }
    const fs::path& out_dir() const { return out_dir_; }
    bool begun() const { return !out_dir_.empty(); }

    void finish(const std::optional<json>& error) {
        json outputs = json::array();
        for (const auto& f : files_under(out_dir_)) {
            const auto rel = f.lexically_relative(out_dir_).generic_string();
            if (rel == kManifestName) continue;
            outputs.push_back({{"path", rel}, {"sha256", io::sha256_file(f)}});
        }
        std::vector<std::string> replay_args;
        for (std::size_t i = 0; i < args_.size(); ++i) {
            if (args_[i] == "--out") {
                ++i;
                continue;
            }
            if (args_[i].rfind("--out=", 0) == 0) continue;
            replay_args.push_back(args_[i]);
        }
        const std::string finished_at = utc_now();
        const std::string run_id =
            io::sha256_hex(command_ + "|" + json(args_).dump() + "|" + started_at_ + "|" + std::to_string(::getpid()))
                .substr(0, 16);
        json m = {
            {"format", "spurgen.run_manifest"},
            {"version", 1},
            {"run_id", run_id},
            {"command", command_},
            {"args", args_},
            {"replay_args", replay_args},
            {"cwd", fs::current_path().string()},
            {"out_dir", out_dir_.string()},
            {"options", options_},
            {"config", config_},
            {"inputs", inputs_},
            {"outputs", outputs},
            {"started_at", started_at_},
            {"finished_at", finished_at},
            {"status", error ? "failed" : "ok"},
        };
        if (error) m["error"] = *error;
        const fs::path path = out_dir_ / kManifestName;
        io::atomic_write_text(path, m.dump(2) + "\n");
        fs::permissions(path, fs::perms::owner_read | fs::perms::group_read | fs::perms::others_read,
                        fs::perm_options::replace);
    }

private:
    std::string command_;
    std::vector<std::string> args_;
    fs::path out_dir_;
    std::string started_at_;
    json options_ = json::object();
    json config_ = json::object();
    json inputs_ = json::array();
    std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// Shared helpers

struct ImageSet {
    std::vector<std::string> ids;
    std::vector<ImageTensor> images;
};

/// All *.ppm files in `dir`, sorted by name; ids are file stems.
ImageSet read_image_dir(const fs::path& dir, Run& run) {
    require_exists(dir, "image directory");
    if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("no .ppm images in " + dir.string());
    ImageSet set;
    for (const auto& f : files) {
        set.ids.push_back(f.stem().string());
        set.images.push_back(read_ppm(f));
        run.input(f);
    }
    return set;
}

/// A classifier reference is either a checkpoint path (contains '/' or ends
/// in .ckpt) or an id looked up as <models-dir>/<id>.ckpt.
/// Checkpoint paths contain a slash or end in .ckpt; anything else is a model id.
bool looks_like_path(const std::string& ref) {
    return ref.find('/') != std::string::npos || fs::path(ref).extension() == ".ckpt";
}

fs::path resolve_model(const std::string& ref, const std::string& models_dir) {
    if (ref.empty()) throw UsageError("empty model reference");
    if (looks_like_path(ref)) {
        if (!fs::is_regular_file(ref)) throw UsageError("model checkpoint not found: " + ref);
        return ref;
    }
    const std::string dir = models_dir.empty() ? env_or_empty(kModelDirEnv) : models_dir;
    if (dir.empty()) {
        throw UsageError("cannot resolve model id '" + ref + "': pass --models-dir or set " + kModelDirEnv);
    }
    const fs::path p = fs::path(dir) / (ref + ".ckpt");
    if (!fs::is_regular_file(p)) throw UsageError("unknown model id '" + ref + "' (looked for " + p.string() + ")");
    return p;
}

std::vector<std::unique_ptr<eval::Classifier>> load_classifiers(const std::vector<std::string>& refs,
                                                                const std::string& models_dir, Run& run) {
    if (refs.empty()) throw UsageError("--classifiers requires at least one id");
    std::vector<fs::path> paths;
    for (const auto& r : refs) paths.push_back(resolve_model(r, models_dir));
    std::vector<std::unique_ptr<eval::Classifier>> out;
    for (const auto& p : paths) {
        run.input(p);
        out.push_back(toy::load_classifier(p));
    }
    return out;
}

fs::path cache_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    const std::string env = env_or_empty(kCacheDirEnv);
    if (!env.empty()) return env;
    const std::string home = env_or_empty("HOME");
    return home.empty() ? fs::temp_directory_path() / "spurgen-cache" : fs::path(home) / ".cache" / "spurgen";
}

std::string join_ids(const std::vector<std::string>& ids) {
    std::string s;
    for (const auto& id : ids) s += id + "\n";
    return s;
}

// ---------------------------------------------------------------------------
// Commands. Each registers its flags on a subcommand and returns a runner.

using Runner = std::function<void(Run&, std::ostream&)>;

struct FilterArgs {
    int class_id = 0;
    std::string images_dir;
    std::vector<std::string> classifiers;
    std::vector<std::string> logs;
    std::size_t select_n = 6;
    std::string models_dir;
    std::string out;
};

Runner add_filter(CLI::App& app) {
    auto* c = app.add_subcommand("filter", "select images every classifier assigns to the target class");
    auto a = std::make_shared<FilterArgs>();
    c->add_option("--class", a->class_id, "target class id")->required();
    c->add_option("--images-dir", a->images_dir, "directory of .ppm candidates");
    c->add_option("--classifiers", a->classifiers, "classifier ids or checkpoint paths")->delimiter(',');
    c->add_option("--logs", a->logs, "precomputed prediction logs instead of classifiers")->delimiter(',');
    c->add_option("--select-n", a->select_n, "number of images to keep")->capture_default_str();
    c->add_option("--models-dir", a->models_dir, "where classifier ids resolve");
    c->add_option("--out", a->out, "output directory")->required();
    return [a](Run& run, std::ostream& out) {
        if (a->select_n == 0) throw UsageError("--select-n must be at least 1");
        const bool from_images = !a->images_dir.empty() || !a->classifiers.empty();
        if (from_images == !a->logs.empty()) throw UsageError("pass either --images-dir with --classifiers, or --logs");
        if (from_images && (a->images_dir.empty() || a->classifiers.empty())) {
            throw UsageError("--images-dir and --classifiers go together");
        }
        std::vector<std::unique_ptr<eval::Classifier>> classifiers;
        if (from_images) classifiers = load_classifiers(a->classifiers, a->models_dir, run);
        for (const auto& l : a->logs) require_exists(l, "prediction log");
        run.begin(a->out);
        run.options() = {{"class", a->class_id},       {"images_dir", a->images_dir}, {"classifiers", a->classifiers},
                         {"logs", a->logs},            {"select_n", a->select_n},     {"models_dir", a->models_dir}};

        std::vector<eval::PredictionLog> logs;
        ImageSet images;
        if (from_images) {
            images = read_image_dir(a->images_dir, run);
            for (const auto& c : classifiers) logs.push_back(eval::classify(images.images, images.ids, *c, a->class_id));
        } else {
            for (const auto& path : a->logs) {
                run.input(path);
                const auto log = eval::PredictionLog::load(path);
                for (const auto& cid : log.classifier_ids()) logs.push_back(log.for_classifier(cid));
            }
        }
        eval::PredictionLog merged;
        merged.provenance() = {{"preprocessing", "none"}, {"target_class", std::to_string(a->class_id)}};
        for (const auto& l : logs) merged.merge(l);
        merged.save(run.out_dir() / "predictions.jsonl");

        const auto ids = eval::consistency_filter(logs, a->class_id, a->select_n);
        io::atomic_write_text(run.out_dir() / "selected_ids.txt", join_ids(ids));
        if (from_images) {
            fs::create_directories(run.out_dir() / "selected");
            for (const auto& id : ids) {
                const auto it = std::find(images.ids.begin(), images.ids.end(), id);
                write_ppm(run.out_dir() / "selected" / (id + ".ppm"), images.images[static_cast<std::size_t>(it - images.ids.begin())]);
            }
        }
        out << join_ids(ids);
    };
}

struct FinetuneArgs {
    std::string config;
    std::map<std::string, std::string> flags;  // kv key -> value, only for flags given
    std::string models_dir;
};

Runner add_finetune(CLI::App& app) {
    auto* c = app.add_subcommand("finetune", "fine-tune a diffusion checkpoint on reference images");
    auto a = std::make_shared<FinetuneArgs>();
    c->add_option("--config", a->config, "key = value configuration file");
    c->add_option("--models-dir", a->models_dir, "where an --extractor id resolves");
    const std::vector<std::pair<std::string, std::string>> table = {
        {"--steps", "steps"},
        {"--learning-rate", "learning_rate"},
        {"--weight-decay", "weight_decay"},
        {"--batch-size", "batch_size"},
        {"--lambda", "lambda_ppl"},
        {"--kappa", "kappa_sfsl"},
        {"--sfsl-sign", "sfsl_sign"},
        {"--reduction", "reduction"},
        {"--train-text-encoder", "train_text_encoder"},
        {"--reference-dir", "reference_image_dir"},
        {"--class", "class_id"},
        {"--seed", "seed"},
        {"--identifier", "identifier"},
        {"--class-noun", "class_noun"},
        {"--prior-count", "prior_count"},
        {"--prior-steps", "prior_steps"},
        {"--prior-guidance", "prior_guidance"},
        {"--prior-seed", "prior_seed"},
        {"--prior-dir", "prior_dir"},
        {"--base-checkpoint", "base_checkpoint"},
        {"--extractor", "extractor_checkpoint"},
        {"--out", "output_dir"},
    };
    for (const auto& [flag, key] : table) {
        const std::string k = key;
        c->add_option_function<std::string>(flag, [a, k](const std::string& v) { a->flags[k] = v; },
                                             "overrides config key " + k);
    }
    return [a](Run& run, std::ostream& out) {
        // Precedence: flag > config file > built-in defaults.
        auto kv = trainer::TrainingConfig{}.to_kv();
        if (!a->config.empty()) {
            require_exists(a->config, "config file");
            // Relative paths in the file resolve against the file's directory.
            const fs::path base = fs::path(a->config).parent_path();
            for (auto [k, v] : trainer::parse_kv(io::read_text(a->config))) {
                const bool path_key = k == "reference_image_dir" || k == "prior_dir" || k == "base_checkpoint" ||
                                      (k == "extractor_checkpoint" && looks_like_path(v));
                if (path_key && !v.empty() && fs::path(v).is_relative()) v = (base / v).string();
                kv[k] = v;
            }
        }
        for (const auto& [k, v] : a->flags) kv[k] = v;
        trainer::TrainingConfig cfg;
        try {
            cfg = trainer::TrainingConfig::from_kv(kv);
            cfg.validate();
        } catch (const ConfigError& e) {
            throw UsageError(std::string("invalid training configuration: ") + e.what());
        }
        require_exists(cfg.base_checkpoint, "base_checkpoint");
        require_exists(cfg.reference_image_dir, "reference_image_dir");
        const bool use_sfsl = cfg.loss_weights.kappa_sfsl > 0.0;
        fs::path extractor_path;
        if (use_sfsl) {
            if (cfg.extractor_checkpoint.empty()) throw UsageError("kappa_sfsl > 0 requires extractor_checkpoint");
            extractor_path = resolve_model(cfg.extractor_checkpoint, a->models_dir);
        }

        run.begin(cfg.output_dir);
        cfg.output_dir = run.out_dir().string();
        if (!a->config.empty()) run.input(a->config);
        run.options() = {{"config_file", a->config}, {"flags", a->flags}, {"models_dir", a->models_dir}};
        run.config() = cfg.to_kv();

        const auto refs = read_image_dir(cfg.reference_image_dir, run);
        run.input(cfg.base_checkpoint);
        auto stack = toy::load_diffusion_checkpoint(cfg.base_checkpoint);
        const auto schedule = diffusion::NoiseSchedule::linear();
        const int h = refs.images.front().height(), w = refs.images.front().width();

        std::unique_ptr<toy::ToyClassifier> extractor;
        std::optional<features::FeatureBank> bank;
        if (use_sfsl) {
            run.input(extractor_path);
            extractor = toy::load_toy_classifier(extractor_path);
            bank.emplace(features::reference_feature_bank(refs.images, refs.ids, *extractor, cfg.class_id, cfg.reduction));
            features::save_feature_cache(run.out_dir() / "feature_bank.spgfeat", *bank);
        }

        trainer::PriorSet prior;
        const fs::path prior_dir = cfg.prior_dir.empty() ? run.out_dir() / "prior" : fs::path(cfg.prior_dir);
        if (fs::exists(prior_dir / "prior_set.json")) {
            run.input(prior_dir);
            prior = trainer::load_prior_set(prior_dir);
        } else {
            diffusion::SamplerConfig sc;
            sc.steps = cfg.prior_steps;
            sc.guidance_scale = cfg.prior_guidance;
            sc.seed = cfg.prior_seed;
            const int n = cfg.prior_count > 0 ? cfg.prior_count : 8 * static_cast<int>(refs.images.size());
            prior = trainer::generate_prior_set(trainer::make_prompt(cfg.prompt, false), n, stack.models(), schedule, sc,
                                                h, w);
            trainer::save_prior_set(prior_dir, prior);
        }

        fs::remove(run.out_dir() / "train_log.jsonl");
        auto written = cfg.to_kv();
        written.erase("output_dir");  // recorded in the manifest; keeps replays byte-identical
        io::atomic_write_text(run.out_dir() / "config.txt", trainer::format_kv(written));
        const trainer::TrainableModels tm{*stack.codec, *stack.predictor, *stack.text_encoder};
        std::optional<trainer::SfslContext> ctx;
        if (use_sfsl) ctx.emplace(trainer::SfslContext{*bank, *extractor});
        const auto result = trainer::finetune(cfg, tm, refs.images, prior, ctx ? &*ctx : nullptr, schedule);
        toy::save_diffusion_checkpoint(run.out_dir() / "diffusion.ckpt", *stack.codec, *stack.predictor,
                                       *stack.text_encoder);
        run.options()["parameter_hash"] = result.parameter_hash;
        const auto& last = result.log.back();
        out << "steps " << last.step << " ldm " << last.ldm << " ppl " << last.ppl << " sfsl " << last.sfsl << " total "
            << last.total << "\n";
    };
}

struct SampleArgs {
    std::string checkpoint;
    std::string prompt;
    int n = 75;
    int steps = 25;
    double guidance = 7.5;
    std::uint64_t seed = 0;
    int size = 16;
    std::string scheduler = "ddim_deterministic";
    int columns = 8;
    std::string out;
};

Runner add_sample(CLI::App& app) {
    auto* c = app.add_subcommand("sample", "sample images from a diffusion checkpoint");
    auto a = std::make_shared<SampleArgs>();
    c->add_option("--checkpoint", a->checkpoint, "diffusion checkpoint")->required();
    c->add_option("--prompt", a->prompt, "text prompt")->required();
    c->add_option("--n", a->n, "number of images")->capture_default_str();
    c->add_option("--steps", a->steps, "sampler steps")->capture_default_str();
    c->add_option("--guidance", a->guidance, "classifier-free guidance scale")->capture_default_str();
    c->add_option("--seed", a->seed, "seed of image 0; image i uses seed + i")->capture_default_str();
    c->add_option("--size", a->size, "image height and width")->capture_default_str();
    c->add_option("--scheduler", a->scheduler, "ddim_deterministic or adapter_native")->capture_default_str();
    c->add_option("--sheet-columns", a->columns, "contact sheet columns")->capture_default_str();
    c->add_option("--out", a->out, "output directory")->required();
    return [a](Run& run, std::ostream& out) {
        if (a->n < 1) throw UsageError("--n must be at least 1");
        if (a->size < 2) throw UsageError("--size must be at least 2");
        if (a->columns < 1) throw UsageError("--sheet-columns must be at least 1");
        require_exists(a->checkpoint, "checkpoint");
        diffusion::SamplerConfig base;
        try {
            base.scheduler_kind = diffusion::parse_scheduler_kind(a->scheduler);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
        base.steps = a->steps;
        base.guidance_scale = a->guidance;
        const auto schedule = diffusion::NoiseSchedule::linear();
        try {
            base.validate(schedule);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
        run.begin(a->out);
        run.options() = {{"checkpoint", a->checkpoint}, {"prompt", a->prompt}, {"n", a->n},
                         {"steps", a->steps},           {"guidance", a->guidance}, {"seed", a->seed},
                         {"size", a->size},             {"scheduler", a->scheduler}};
        run.input(a->checkpoint);
        const auto stack = toy::load_diffusion_checkpoint(a->checkpoint);
        fs::create_directories(run.out_dir() / "images");
        std::vector<ImageTensor> images;
        json entries = json::array();
        for (int i = 0; i < a->n; ++i) {
            diffusion::SamplerConfig sc = base;
            sc.seed = a->seed + static_cast<std::uint64_t>(i);
            images.push_back(diffusion::sample(a->prompt, stack.models(), schedule, sc, a->size, a->size));
            std::ostringstream name;
            name << "images/sample_" << std::setw(4) << std::setfill('0') << i << ".ppm";
            write_ppm(run.out_dir() / name.str(), images.back());
            entries.push_back({{"file", name.str()}, {"seed", sc.seed}});
        }
        write_ppm(run.out_dir() / "contact_sheet.ppm", contact_sheet(images, a->columns));
        const json meta = {{"prompt", a->prompt},     {"steps", a->steps},         {"guidance_scale", a->guidance},
                           {"scheduler", a->scheduler}, {"seed", a->seed},         {"images", entries}};
        io::atomic_write_text(run.out_dir() / "samples.json", meta.dump(2) + "\n");
        out << a->n << " images written to " << run.out_dir().string() << "\n";
    };
}

struct EvaluateArgs {
    std::string images;
    std::string reference_images;
    std::vector<std::string> classifiers;
    int class_id = 0;
    std::string models_dir;
    std::string tag;
    std::string out;
};

Runner add_evaluate(CLI::App& app) {
    auto* c = app.add_subcommand("evaluate", "spurious accuracy of classifiers on generated images");
    auto a = std::make_shared<EvaluateArgs>();
    c->add_option("--images", a->images, "directory of generated .ppm images")->required();
    c->add_option("--classifiers", a->classifiers, "classifier ids or checkpoint paths")->required()->delimiter(',');
    c->add_option("--class", a->class_id, "target class id")->required();
    c->add_option("--reference-images", a->reference_images, "optional directory of dataset images");
    c->add_option("--models-dir", a->models_dir, "where classifier ids resolve");
    c->add_option("--tag", a->tag, "run tag written into grid.csv consumers");
    c->add_option("--out", a->out, "output directory")->required();
    return [a](Run& run, std::ostream& out) {
        const auto classifiers = load_classifiers(a->classifiers, a->models_dir, run);
        require_exists(a->images, "--images");
        if (!a->reference_images.empty()) require_exists(a->reference_images, "--reference-images");
        for (const auto& c : classifiers) {
            if (a->class_id < 0 || a->class_id >= c->num_classes()) {
                throw UsageError("--class outside the label space of classifier " + c->id());
            }
        }
        run.begin(a->out);
        run.options() = {{"images", a->images},   {"reference_images", a->reference_images},
                         {"classifiers", a->classifiers}, {"class", a->class_id},
                         {"models_dir", a->models_dir},   {"tag", a->tag}};

        eval::SpuriousAccuracyTable table;
        eval::AccuracyGrid grid{a->tag, {}};
        const auto score = [&](const ImageSet& set, eval::Source source, const std::string& file) {
            eval::PredictionLog merged;
            merged.provenance() = {{"preprocessing", "none"}, {"source", eval::to_string(source)}};
            for (const auto& c : classifiers) {
                const auto log = eval::classify(set.images, set.ids, *c, a->class_id);
                const double acc = eval::spurious_accuracy(log, a->class_id, set.ids);
                table.set(c->id(), a->class_id, source, acc);
                if (source == eval::Source::generated) grid.cells[{a->class_id, c->id()}] = acc;
                merged.merge(log);
            }
            merged.save(run.out_dir() / file);
        };
        score(read_image_dir(a->images, run), eval::Source::generated, "predictions.jsonl");
        if (!a->reference_images.empty()) {
            score(read_image_dir(a->reference_images, run), eval::Source::reference_dataset, "reference_predictions.jsonl");
        }
        io::atomic_write_text(run.out_dir() / "spurious_accuracy.csv", table.to_csv());
        io::atomic_write_text(run.out_dir() / "spurious_accuracy.md", table.to_markdown());
        io::atomic_write_text(run.out_dir() / "grid.csv", eval::grid_csv(grid));
        out << table.to_markdown();
    };
}

struct AblateArgs {
    std::vector<std::string> configs;
    std::string out;
};

Runner add_ablate(CLI::App& app) {
    auto* c = app.add_subcommand("ablate", "average spurious accuracy per configuration");
    auto a = std::make_shared<AblateArgs>();
    c->add_option("--configs", a->configs,
                  "grid CSVs as TAG=PATH (repeat a tag to merge classes); a bare PATH is tagged by its directory")
        ->required();
    c->add_option("--out", a->out, "output directory")->required();
    return [a](Run& run, std::ostream& out) {
        std::vector<std::pair<std::string, fs::path>> entries;
        for (const auto& spec : a->configs) {
            const auto eq = spec.find('=');
            fs::path path = eq == std::string::npos ? fs::path(spec) : fs::path(spec.substr(eq + 1));
            require_exists(path, "grid file");
            std::string tag = eq == std::string::npos ? fs::absolute(path).parent_path().filename().string()
                                                      : spec.substr(0, eq);
            if (tag.empty()) throw UsageError("empty config tag in '" + spec + "'");
            entries.emplace_back(tag, path);
        }
        run.begin(a->out);
        run.options() = {{"configs", a->configs}};
        std::vector<eval::AccuracyGrid> grids;
        for (const auto& [tag, path] : entries) {
            run.input(path);
            const auto g = eval::grid_from_csv(io::read_text(path), tag);
            auto it = std::find_if(grids.begin(), grids.end(), [&](const auto& x) { return x.config_tag == tag; });
            if (it == grids.end()) {
                grids.push_back(g);
                continue;
            }
            for (const auto& [key, v] : g.cells) {
                if (!it->cells.emplace(key, v).second) throw DataError("duplicate cell for config " + tag);
            }
        }
        const auto rows = eval::ablation_report(grids);
        io::atomic_write_text(run.out_dir() / "ablation.csv", eval::ablation_csv(rows));
        io::atomic_write_text(run.out_dir() / "ablation.md", eval::ablation_markdown(rows));
        out << eval::ablation_markdown(rows);
    };
}

struct ToyArgs {
    std::string preset = "ci";
    std::uint64_t seed = 0;
    std::string cache_dir;
    std::string out;
};

Runner add_toy(CLI::App& app) {
    auto* c = app.add_subcommand("toy", "run the synthetic end-to-end experiment");
    auto a = std::make_shared<ToyArgs>();
    c->add_option("--preset", a->preset, "unit, ci or full")->capture_default_str();
    c->add_option("--seed", a->seed, "experiment seed")->capture_default_str();
    c->add_option("--cache-dir", a->cache_dir, std::string("model cache (default $") + kCacheDirEnv + ")");
    c->add_option("--out", a->out, "output directory")->required();
    return [a](Run& run, std::ostream& out) {
        toy::ToyPreset preset;
        try {
            preset = toy::toy_preset(a->preset);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
        run.begin(a->out);
        const auto bundle = toy::load_or_build_bundle(preset, a->seed, cache_root(a->cache_dir));
        auto e2e = preset.e2e;
        e2e.seed = a->seed;
        run.options() = {{"preset", a->preset}, {"seed", a->seed}, {"model_parameter_hash", bundle.parameter_hash()}};
        run.config() = {{"preset", preset.to_json()}, {"e2e", e2e.to_json()}};
        const auto report = toy::run_end_to_end(bundle, e2e, run.out_dir());
        out << report.to_markdown();
    };
}

Runner add_toy_setup(CLI::App& app) {
    auto* c = app.add_subcommand("toy-setup", "export the synthetic dataset and trained toy models");
    auto a = std::make_shared<ToyArgs>();
    c->add_option("--preset", a->preset, "unit, ci or full")->capture_default_str();
    c->add_option("--seed", a->seed, "model seed")->capture_default_str();
    c->add_option("--cache-dir", a->cache_dir, std::string("model cache (default $") + kCacheDirEnv + ")");
    c->add_option("--out", a->out, "output directory")->required();
    return [a](Run& run, std::ostream& out) {
        toy::ToyPreset preset;
        try {
            preset = toy::toy_preset(a->preset);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
        run.begin(a->out);
        const auto bundle = toy::load_or_build_bundle(preset, a->seed, cache_root(a->cache_dir));
        run.options() = {{"preset", a->preset}, {"seed", a->seed}, {"model_parameter_hash", bundle.parameter_hash()}};
        run.config() = {{"preset", preset.to_json()}};
        const fs::path root = run.out_dir();
        toy::save_dataset(root / "dataset", bundle.dataset);
        toy::save_diffusion_checkpoint(root / "models" / "diffusion.ckpt", *bundle.codec, *bundle.predictor,
                                       *bundle.text_encoder);
        for (const auto& cl : bundle.classifiers) toy::save_classifier(root / "models" / (cl->id() + ".ckpt"), *cl);
        toy::save_color_rule_classifier(root / "models" / "color_rule.ckpt", "color_rule",
                                        bundle.dataset.config.num_classes);
        for (int k = 0; k < bundle.dataset.config.num_classes; ++k) {
            const fs::path dir = root / "spurious" / ("class_" + std::to_string(k));
            fs::create_directories(dir);
            for (const auto* it : bundle.dataset.select(toy::Split::test, toy::ItemKind::feature_only, -1, k)) {
                write_ppm(dir / (it->image_id + ".ppm"), it->image);
            }
        }
        const auto& e2e = preset.e2e;
        trainer::TrainingConfig tc;
        tc.steps = e2e.finetune_steps;
        tc.learning_rate = e2e.learning_rate;
        tc.reduction = e2e.reduction;
        tc.prompt.class_noun = bundle.dataset.config.feature_noun;
        tc.prior_count = e2e.prior_per_reference * static_cast<int>(e2e.select_n);
        tc.prior_steps = e2e.sampler_steps;
        tc.prior_guidance = e2e.guidance;
        tc.prior_seed = 100000;
        // Relative to finetune.cfg, so the asset tree can move and replays match.
        tc.base_checkpoint = "models/diffusion.ckpt";
        tc.extractor_checkpoint = "models/" + bundle.classifiers.front()->id() + ".ckpt";
        io::atomic_write_text(root / "finetune.cfg", trainer::format_kv(tc.to_kv()));
        out << "toy assets written to " << root.string() << "\n";
    };
}

struct ReportArgs {
    std::string ratings;
    std::string generated_prefix = "gen";
    std::string out;
};

Runner add_report(CLI::App& app) {
    auto* c = app.add_subcommand("report", "rating distribution of real versus generated images");
    auto a = std::make_shared<ReportArgs>();
    c->add_option("--ratings", a->ratings, "line-delimited rating records")->required();
    c->add_option("--generated-prefix", a->generated_prefix, "image ids with this prefix count as generated")
        ->capture_default_str();
    c->add_option("--out", a->out, "output directory")->required();
    return [a](Run& run, std::ostream& out) {
        require_exists(a->ratings, "--ratings");
        run.begin(a->out);
        run.options() = {{"ratings", a->ratings}, {"generated_prefix", a->generated_prefix}};
        run.input(a->ratings);
        const auto ratings = eval::ratings_from_jsonl(io::read_text(a->ratings));
        const std::string prefix = a->generated_prefix;
        const auto d = eval::rating_distribution(ratings, [&](const std::string& id) { return id.rfind(prefix, 0) == 0; });
        const std::string csv = eval::rating_csv(d);
        io::atomic_write_text(run.out_dir() / "ratings.csv", csv);
        std::ostringstream md;
        md << "| score | real % | generated % |\n|---|---|---|\n" << std::fixed << std::setprecision(2);
        for (int s = 1; s <= 5; ++s) md << "| " << s << " | " << d.real_percent(s) << " | " << d.generated_percent(s) << " |\n";
        io::atomic_write_text(run.out_dir() / "ratings.md", md.str());
        out << md.str();
    };
}

// ---------------------------------------------------------------------------
// Dispatch

json error_record(int code, const std::string& type, const std::string& message) {
    return {{"code", code}, {"type", type}, {"message", message}};
}

/// Runs `body`, mapping exceptions to exit codes and error records.
int guarded(const std::function<void()>& body, std::ostream& err, json* record) {
    json rec;
    int code = kExitOk;
    try {
        body();
    } catch (const UsageError& e) {
        code = kExitUsage;
        rec = error_record(code, "usage", e.what());
    } catch (const ConfigError& e) {
        code = kExitUsage;
        rec = error_record(code, "config", e.what());
    } catch (const ShortfallError& e) {
        code = kExitData;
        rec = error_record(code, "shortfall", e.what());
        rec["qualifying"] = e.qualifying();
    } catch (const DataError& e) {
        code = kExitData;
        rec = error_record(code, "data", e.what());
    } catch (const DegenerateInputError& e) {
        code = kExitData;
        rec = error_record(code, "degenerate_input", e.what());
    } catch (const DivergenceError& e) {
        code = kExitDivergence;
        rec = error_record(code, "divergence", e.what());
        rec["dump_path"] = e.dump_path();
    } catch (const std::exception& e) {
        code = kExitFailure;
        rec = error_record(code, "internal", e.what());
    }
    if (code != kExitOk) {
        err << json{{"error", rec}}.dump() << std::endl;
        if (record) *record = rec;
    }
    return code;
}

int run_replay(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"spurgen: spurious-feature-aware personalization of text-to-image diffusion", "spurgen"};
    app.require_subcommand(1);
    std::map<std::string, Runner> runners;
    runners["filter"] = add_filter(app);
    runners["finetune"] = add_finetune(app);
    runners["sample"] = add_sample(app);
    runners["evaluate"] = add_evaluate(app);
    runners["ablate"] = add_ablate(app);
    runners["toy"] = add_toy(app);
    runners["toy-setup"] = add_toy_setup(app);
    runners["report"] = add_report(app);
    std::string manifest_path, replay_out;
    auto* replay = app.add_subcommand("replay", "rerun a command from its manifest and compare outputs");
    replay->add_option("--manifest", manifest_path, "manifest.json of the run to replay")->required();
    replay->add_option("--out", replay_out, "fresh output directory (default <out_dir>.replay)");

    std::vector<std::string> argv_store = {"spurgen"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : argv_store) argv.push_back(s.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << json{{"error", error_record(kExitUsage, "usage", e.what())}}.dump() << std::endl;
        return kExitUsage;
    }

    if (replay->parsed()) {
        std::vector<std::string> rargs = {manifest_path, replay_out};
        return run_replay(rargs, out, err);
    }
    for (const auto& [name, runner] : runners) {
        if (!app.got_subcommand(name)) continue;
        auto run_state = std::make_shared<Run>(name, args);
        json record;
        const int code = guarded([&] { runner(*run_state, out); }, err, &record);
        if (run_state->begun()) {
            guarded([&] { run_state->finish(code == kExitOk ? std::nullopt : std::optional<json>(record)); }, err,
                    nullptr);
        }
        return code;
    }
    return kExitUsage;
}

namespace {

int run_replay(const std::vector<std::string>& params, std::ostream& out, std::ostream& err) {
    int result = kExitOk;
    const int code = guarded(
        [&] {
            const fs::path manifest_path = params[0];
            require_exists(manifest_path, "--manifest");
            json m;
            try {
                m = json::parse(io::read_text(manifest_path));
            } catch (const json::exception& e) {
                throw DataError(std::string("malformed manifest: ") + e.what());
            }
            if (m.value("format", "") != "spurgen.run_manifest") throw DataError("not a run manifest: " + manifest_path.string());
            if (m.value("status", "") != "ok") throw DataError("only successful runs can be replayed");
            for (const auto& in : m.at("inputs")) {
                const fs::path p = in.at("path").get<std::string>();
                if (!fs::exists(p)) throw DataError("replay input missing: " + p.string());
                if (io::sha256_file(p) != in.at("sha256").get<std::string>()) {
                    throw DataError("replay input changed since the original run: " + p.string());
                }
            }
            const fs::path orig_out = m.at("out_dir").get<std::string>();
            const fs::path new_out = fs::absolute(params[1].empty() ? fs::path(orig_out.string() + ".replay")
                                                                    : fs::path(params[1]));
            if (new_out.lexically_normal() == orig_out.lexically_normal()) {
                throw UsageError("replay output must differ from the original run directory");
            }
            auto args = m.at("replay_args").get<std::vector<std::string>>();
            args.push_back("--out");
            args.push_back(new_out.string());

            struct RestoreCwd {
                fs::path dir = fs::current_path();
                ~RestoreCwd() {
                    std::error_code ec;
                    fs::current_path(dir, ec);
                }
            } restore;
            fs::current_path(m.at("cwd").get<std::string>());
            std::ostringstream sink;
            const int rc = run(args, sink, err);
            if (rc != kExitOk) throw DataError("replayed command exited with code " + std::to_string(rc));

            const json fresh = json::parse(io::read_text(new_out / kManifestName));
            std::map<std::string, std::string> a, b;
            for (const auto& o : m.at("outputs")) a[o.at("path")] = o.at("sha256");
            for (const auto& o : fresh.at("outputs")) b[o.at("path")] = o.at("sha256");
            json mismatches = json::array();
            for (const auto& [p, h] : a) {
                const auto it = b.find(p);
                if (it == b.end()) mismatches.push_back({{"path", p}, {"problem", "missing"}});
                else if (it->second != h) mismatches.push_back({{"path", p}, {"problem", "hash differs"}});
            }
            for (const auto& [p, h] : b) {
                if (!a.count(p)) mismatches.push_back({{"path", p}, {"problem", "unexpected"}});
            }
            const json summary = {{"replay_of", m.at("run_id")},
                                  {"replay_dir", new_out.string()},
                                  {"outputs_compared", a.size()},
                                  {"identical", mismatches.empty()},
                                  {"mismatches", mismatches}};
            out << summary.dump() << "\n";
            if (!mismatches.empty()) {
                err << json{{"error", error_record(kExitData, "replay_mismatch",
                                                   std::to_string(mismatches.size()) + " outputs differ")}}
                           .dump()
                    << std::endl;
                result = kExitData;
            }
        },
        err, nullptr);
    return code != kExitOk ? code : result;
}

}  // namespace

int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, std::cout, std::cerr);
}

}  // namespace spurgen::cli
