#pragma once

// Stage orchestration over a fixed workdir layout: pretrain-base, adapt-token,
// adapt-lora, generate, tune, fid-report, classify and the chained pipeline.
// Each stage records itself in an append-only run log and is skipped when its
// configuration and inputs are unchanged since its last completion.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "minidiff/adaptation.hpp"
#include "minidiff/checkpoint.hpp"
#include "minidiff/classifier.hpp"
#include "minidiff/config.hpp"
#include "minidiff/data.hpp"
#include "minidiff/metrics.hpp"
#include "minidiff/pretrain.hpp"
#include "minidiff/sampling.hpp"
#include "minidiff/tuning.hpp"

namespace minidiff {

enum class Stage { pretrain, adapt_token, adapt_lora, generate, tune, fid, classify, pipeline };

inline Stage parse_stage(const std::string& s) {
    if (s == "pretrain" || s == "pretrain-base") return Stage::pretrain;
    if (s == "adapt-token") return Stage::adapt_token;
    if (s == "adapt-lora") return Stage::adapt_lora;
    if (s == "generate") return Stage::generate;
    if (s == "tune") return Stage::tune;
    if (s == "fid" || s == "fid-report") return Stage::fid;
    if (s == "classify") return Stage::classify;
    if (s == "pipeline" || s == "full-pipeline") return Stage::pipeline;
    throw Error(ErrorKind::invalid_argument, "unknown stage '" + s + "'");
}

inline std::string to_string(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::adapt_token: return "adapt-token";
        case Stage::adapt_lora: return "adapt-lora";
        case Stage::generate: return "generate";
        case Stage::tune: return "tune";
        case Stage::fid: return "fid";
        case Stage::classify: return "classify";
        case Stage::pipeline: return "pipeline";
    }
    return "pipeline";
}

/// Fixed artifact locations; stages find upstream outputs here without configuration.
struct Workdir {
    fs::path root;

    fs::path checkpoints() const { return root / "checkpoints"; }
    fs::path generated() const { return root / "generated"; }
    fs::path reports() const { return root / "reports"; }
    fs::path manifests() const { return root / "manifests"; }
    fs::path logs() const { return root / "logs"; }
    fs::path data() const { return root / "data"; }

    fs::path dataset_manifest() const { return manifests() / "dataset.jsonl"; }
    fs::path generated_manifest() const { return manifests() / "generated.jsonl"; }
    fs::path classify_manifest() const { return manifests() / "classify.jsonl"; }
    fs::path base_checkpoint() const { return checkpoints() / "base.ckpt"; }
    fs::path probe_checkpoint() const { return checkpoints() / "probe.ckpt"; }
    fs::path classifier_checkpoint() const { return checkpoints() / "classifier.ckpt"; }
    fs::path token_checkpoint(const std::string& label) const { return checkpoints() / ("token_" + label + ".ckpt"); }
    fs::path lora_checkpoint(const std::string& label) const { return checkpoints() / ("lora_" + label + ".ckpt"); }
    fs::path full_checkpoint(const std::string& label) const { return checkpoints() / ("full_" + label + ".ckpt"); }
    fs::path tuned() const { return reports() / "tuned.json"; }
    fs::path scores() const { return reports() / "scores.csv"; }
    fs::path fid_report() const { return reports() / "fid.csv"; }
    fs::path classify_report() const { return reports() / "classify.csv"; }
    fs::path run_log() const { return logs() / "run.log"; }
    fs::path done_marker(Stage s) const { return logs() / (to_string(s) + ".done"); }
    fs::path lockfile() const { return root / ".lock"; }

    void create() const {
        for (const fs::path& p : {checkpoints(), generated(), reports(), manifests(), logs()}) fs::create_directories(p);
    }

    /// Workdir-relative generic form of `p` (absolute when outside the workdir).
    std::string relative(const fs::path& p) const {
        const fs::path rel = fs::absolute(p).lexically_relative(fs::absolute(root));
        return (!rel.empty() && *rel.begin() != "..") ? rel.generic_string() : fs::absolute(p).generic_string();
    }
};

/// Exclusive per-workdir lock held for the duration of a stage.
class WorkdirLock {
public:
    explicit WorkdirLock(fs::path path) : path_(std::move(path)) {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw Error(ErrorKind::invalid_state,
                        "workdir is locked by another run (remove " + path_.string() + " if no run is active)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        (void)!::write(fd, pid.data(), pid.size());
        ::close(fd);
    }
    ~WorkdirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    WorkdirLock(const WorkdirLock&) = delete;
    WorkdirLock& operator=(const WorkdirLock&) = delete;

private:
    fs::path path_;
};

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline std::string file_digest(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    require(in.good(), ErrorKind::io_error, "cannot read " + p.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hex64(fnv1a(bytes));
}

struct RunRecord {
    std::string stage;
    /// "ran", "skipped" or "disabled"
    std::string status;
    std::string config_hash;
    std::string stage_hash;
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;
    std::map<std::string, std::string> inputs;
    std::vector<std::string> outputs;
    nlohmann::json metrics = nlohmann::json::object();

    nlohmann::json to_json() const {
        return {{"stage", stage},   {"status", status},          {"config_hash", config_hash},
                {"stage_hash", stage_hash}, {"seed", seed},      {"wall_seconds", wall_seconds},
                {"inputs", inputs}, {"outputs", outputs},        {"metrics", metrics}};
    }
};

// ------------------------------------------------------ config -> options

inline ModelConfig model_config(const Config& c) {
    ModelConfig m;
    m.autoencoder.image_size = static_cast<int>(c.integer("data.image_size"));
    m.autoencoder.factor = static_cast<int>(c.integer("model.ae.factor"));
    m.autoencoder.latent_channels = static_cast<int>(c.integer("model.ae.latent_channels"));
    m.autoencoder.width = static_cast<int>(c.integer("model.ae.width"));
    m.text.dim = static_cast<int>(c.integer("model.text.dim"));
    m.text.blocks = static_cast<int>(c.integer("model.text.blocks"));
    m.denoiser_width = static_cast<int>(c.integer("model.denoiser.width"));
    m.embed_dim = static_cast<int>(c.integer("model.denoiser.embed_dim"));
    m.placeholder_width = static_cast<int>(c.integer("model.placeholder_width"));
    m.timesteps = static_cast<int>(c.integer("schedule.T"));
    return m;
}

inline SplitRatio split_ratio(const Config& c) {
    const std::string& v = c.str("data.split");
    SplitRatio r;
    char sep1 = 0, sep2 = 0;
    std::istringstream in(v);
    if (!(in >> r.train >> sep1 >> r.val >> sep2 >> r.test) || sep1 != ':' || sep2 != ':')
        throw Error(ErrorKind::config_error, "data.split expects train:val:test, got '" + v + "'");
    return r;
}

inline GenerationConfig generation_config(const Config& c) {
    GenerationConfig g;
    g.omega_cfg = c.real("gen.omega_cfg");
    g.strength = c.real("gen.strength");
    g.steps = static_cast<int>(c.integer("gen.steps"));
    g.mode = parse_sampler_mode(c.str("gen.mode"));
    g.image_oriented = c.boolean("gen.image_oriented");
    return g;
}

/// Keys each stage's outputs depend on (upstream stages' keys included).
inline std::vector<std::string> stage_key_prefixes(Stage s) {
    std::vector<std::string> keys = {"run.", "data.root", "data.image_size", "data.split", "data.synth.",
                                     "model.", "schedule.", "ae.", "pretrain."};
    if (s == Stage::pretrain) return keys;
    for (const char* k : {"data.classes", "adapt."}) keys.push_back(k);
    if (s == Stage::adapt_token || s == Stage::adapt_lora) return keys;
    for (const char* k : {"gen.", "tune.", "fid.", "probe.", "classify.width"}) keys.push_back(k);
    if (s != Stage::classify) return keys;
    return {""};
}

inline std::string stage_config_hash(const Config& c, Stage s) {
    std::string dump;
    std::istringstream in(c.dump());
    std::string line;
    const auto prefixes = stage_key_prefixes(s);
    while (std::getline(in, line))
        for (const std::string& p : prefixes)
            if (line.rfind(p, 0) == 0) {
                dump += line + "\n";
                break;
            }
    return hex64(fnv1a(dump));
}

/// A base model specialized to one class by the enabled adaptation stages.
struct AdaptedModel {
    DiffusionModel model;
    NoiseSchedule sched;
    PromptEmbedding prompt;
};

class Pipeline {
public:
    Pipeline(Config cfg, fs::path workdir, std::optional<std::uint64_t> seed = std::nullopt, bool force = false,
             std::ostream* log = nullptr)
        : cfg_(std::move(cfg)), wd_{std::move(workdir)}, force_(force), log_(log) {
        if (seed) cfg_.set("run.seed", std::to_string(*seed));
        seed_ = cfg_.seed("run.seed");
    }

    const Config& config() const { return cfg_; }
    const Workdir& workdir() const { return wd_; }

    /// Runs one stage (or the whole chain) under the workdir lock.
    std::vector<RunRecord> run(Stage s) {
        wd_.create();
        WorkdirLock lock(wd_.lockfile());
        write_resolved_config();
        std::vector<RunRecord> records;
        if (s != Stage::pipeline) {
            records.push_back(run_one(s));
            return records;
        }
        std::vector<Stage> chain = {Stage::pretrain};
        if (cfg_.boolean("adapt.token")) chain.push_back(Stage::adapt_token);
        if (cfg_.boolean("adapt.lora") || cfg_.boolean("adapt.full")) chain.push_back(Stage::adapt_lora);
        if (cfg_.boolean("gen.use_tuned")) chain.push_back(Stage::tune);
        for (Stage st : {Stage::generate, Stage::fid, Stage::classify}) chain.push_back(st);
        for (Stage st : chain) records.push_back(run_one(st));
        return records;
    }

    std::uint64_t stage_seed(Stage s, const std::string& label = "") const {
        return derive_seed(seed_, fnv1a(to_string(s) + "/" + label));
    }

    // Artifact loaders shared by stages and callers inspecting a workdir.

    DatasetManifest dataset() const {
        need(wd_.dataset_manifest(), Stage::pretrain);
        return load_manifest(wd_.dataset_manifest());
    }

    std::vector<std::string> selected_classes(const DatasetManifest& m) const {
        std::vector<std::string> out = cfg_.list("data.classes");
        if (out.empty()) return m.classes;
        std::vector<std::string> unknown;
        for (const std::string& c : out)
            if (std::find(m.classes.begin(), m.classes.end(), c) == m.classes.end()) unknown.push_back(c);
        if (!unknown.empty()) {
            std::string msg = "data.classes names classes absent from the dataset:";
            for (const std::string& u : unknown) msg += " " + u;
            throw Error(ErrorKind::config_error, msg);
        }
        return out;
    }

    std::vector<Image> real_train_images(const DatasetManifest& m, const std::string& label) const {
        return load_images(m.select(Split::train, label), m.image_size, wd_.root);
    }

    AdaptedModel adapted(const std::string& label) const {
        need(wd_.base_checkpoint(), Stage::pretrain);
        const Checkpoint base = load_checkpoint(wd_.base_checkpoint());
        AdaptedModel a{model_from_checkpoint(base), schedule_from_checkpoint(base), {}};
        a.prompt = a.model.tokenize(cfg_.str("adapt.prompt"));
        if (cfg_.boolean("adapt.token")) {
            need(wd_.token_checkpoint(label), Stage::adapt_token);
            a.prompt = prompt_from_checkpoint(load_checkpoint(wd_.token_checkpoint(label)));
        }
        if (cfg_.boolean("adapt.full")) {
            need(wd_.full_checkpoint(label), Stage::adapt_lora);
            const Checkpoint ck = load_checkpoint(wd_.full_checkpoint(label));
            a.model = model_from_checkpoint(ck);
            a.prompt = prompt_from_checkpoint(ck);
        } else if (cfg_.boolean("adapt.lora")) {
            need(wd_.lora_checkpoint(label), Stage::adapt_lora);
            const Checkpoint ck = load_checkpoint(wd_.lora_checkpoint(label));
            LoraAdapter adapter = lora_from_checkpoint(ck);
            bind_lora(adapter, a.model);
            merge_lora(adapter, a.model);
            a.prompt = prompt_from_checkpoint(ck);
        }
        return a;
    }

    /// FID feature source; the probe network is trained on first use and cached.
    FeatureModel feature_model() {
        if (parse_feature_extractor(cfg_.str("fid.extractor")) == FeatureExtractor::downsampled_pixels) return {};
        if (!fs::exists(wd_.probe_checkpoint())) {
            note("training probe network");
            TrainRun run;
            run.epochs = static_cast<int>(cfg_.integer("probe.epochs"));
            run.lr = cfg_.real("probe.lr");
            run.patience = std::max(1, run.epochs / 4);
            run.seed = stage_seed(Stage::fid, "probe");
            run.model.width = static_cast<int>(cfg_.integer("classify.width"));
            run.model.channels = 1;
            run.run_id = "probe";
            TrainResult r = train_classifier(dataset(), run, wd_.root);
            Checkpoint ck = classifier_checkpoint(r.model, "probe");
            ck.meta["test_acc"] = r.test.accuracy;
            save_checkpoint(ck, wd_.probe_checkpoint());
        }
        return FeatureModel(classifier_from_checkpoint(load_checkpoint(wd_.probe_checkpoint())));
    }

private:
    void note(const std::string& msg) const {
        if (log_) *log_ << "[" << current_ << "] " << msg << std::endl;
    }

    void need(const fs::path& p, Stage upstream) const {
        if (!fs::exists(p))
            throw Error(ErrorKind::dependency_missing,
                        wd_.relative(p) + " not found; run stage '" + to_string(upstream) + "' first");
    }

    void write_resolved_config() const {
        const fs::path p = wd_.logs() / ("config_" + cfg_.hash() + ".conf");
        if (fs::exists(p)) return;
        std::ofstream out(p);
        out << cfg_.dump();
    }

    void add_input(RunRecord& r, const fs::path& p) const {
        if (fs::exists(p)) r.inputs[wd_.relative(p)] = file_digest(p);
    }

    void add_output(RunRecord& r, const fs::path& p) const { r.outputs.push_back(wd_.relative(p)); }

    void append_log(const RunRecord& r) const {
        std::ofstream out(wd_.run_log(), std::ios::app);
        require(out.good(), ErrorKind::io_error, "cannot append to " + wd_.run_log().string());
        out << r.to_json().dump() << '\n';
    }

    /// Inputs a stage consumes, hashed before it runs.
    void collect_inputs(Stage s, RunRecord& r) const {
        switch (s) {
            case Stage::pretrain: break;
            case Stage::adapt_token:
            case Stage::adapt_lora:
                add_input(r, wd_.dataset_manifest());
                add_input(r, wd_.base_checkpoint());
                if (s == Stage::adapt_lora && fs::exists(wd_.dataset_manifest()) && cfg_.boolean("adapt.token"))
                    for (const std::string& c : selected_classes(dataset())) add_input(r, wd_.token_checkpoint(c));
                break;
            case Stage::tune:
            case Stage::generate:
            case Stage::fid:
                add_input(r, wd_.dataset_manifest());
                add_input(r, wd_.base_checkpoint());
                if (fs::exists(wd_.dataset_manifest()))
                    for (const std::string& c : selected_classes(dataset())) {
                        add_input(r, wd_.token_checkpoint(c));
                        add_input(r, wd_.lora_checkpoint(c));
                        add_input(r, wd_.full_checkpoint(c));
                    }
                if (s == Stage::generate) add_input(r, wd_.tuned());
                if (s == Stage::fid) add_input(r, wd_.generated_manifest());
                break;
            case Stage::classify:
                add_input(r, wd_.dataset_manifest());
                add_input(r, wd_.generated_manifest());
                break;
            case Stage::pipeline: break;
        }
    }

    RunRecord run_one(Stage s) {
        current_ = to_string(s);
        RunRecord r;
        r.stage = current_;
        r.config_hash = cfg_.hash();
        r.stage_hash = stage_config_hash(cfg_, s);
        r.seed = stage_seed(s);
        collect_inputs(s, r);
        const fs::path marker = wd_.done_marker(s);
        if (!force_ && fs::exists(marker)) {
            std::ifstream in(marker);
            nlohmann::json prev = nlohmann::json::parse(in, nullptr, false);
            bool fresh = !prev.is_discarded() && prev.value("stage_hash", "") == r.stage_hash &&
                         prev.value("inputs", nlohmann::json::object()) == nlohmann::json(r.inputs);
            if (fresh)
                for (const auto& o : prev.value("outputs", std::vector<std::string>{}))
                    fresh = fresh && fs::exists(wd_.root / o);
            if (fresh) {
                r.status = "skipped";
                r.outputs = prev.value("outputs", std::vector<std::string>{});
                r.metrics = prev.value("metrics", nlohmann::json::object());
                note("up to date; skipped (use --force to rerun)");
                append_log(r);
                return r;
            }
        }
        const auto t0 = std::chrono::steady_clock::now();
        r.status = "ran";
        switch (s) {
            case Stage::pretrain: pretrain(r); break;
            case Stage::adapt_token: adapt_token(r); break;
            case Stage::adapt_lora: adapt_lora(r); break;
            case Stage::generate: generate(r); break;
            case Stage::tune: tune(r); break;
            case Stage::fid: fid_report(r); break;
            case Stage::classify: classify(r); break;
            case Stage::pipeline: break;
        }
        r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (r.status == "ran") {
            std::ofstream out(marker);
            out << nlohmann::json{{"stage_hash", r.stage_hash}, {"inputs", r.inputs}, {"outputs", r.outputs},
                                  {"metrics", r.metrics}}
                       .dump()
                << '\n';
        }
        append_log(r);
        return r;
    }

    // ------------------------------------------------------------- stages

    void pretrain(RunRecord& r) {
        DatasetManifest m;
        const int size = static_cast<int>(cfg_.integer("data.image_size"));
        if (cfg_.str("data.root").empty()) {
            SynthOptions so;
            so.classes = cfg_.list("data.synth.classes");
            so.per_class = static_cast<int>(cfg_.integer("data.synth.per_class"));
            so.image_size = size;
            so.seed = derive_seed(seed_, fnv1a("data"));
            so.ratio = split_ratio(cfg_);
            const fs::path root = wd_.data() / "synth";
            fs::remove_all(root);
            note("synthesizing corpus under " + wd_.relative(root));
            m = synth_corpus(root, so);
        } else {
            IngestResult ir = ingest(cfg_.str("data.root"), split_ratio(cfg_), derive_seed(seed_, fnv1a("data")), {size});
            write_rejects(ir.rejects, wd_.reports() / "rejects.txt");
            m = std::move(ir.manifest);
        }
        m = relativize(std::move(m), wd_.root);
        (void)selected_classes(m);  // reject a bad class selection before anything is trained
        save_manifest(m, wd_.dataset_manifest());
        add_output(r, wd_.dataset_manifest());

        DiffusionModel model(model_config(cfg_), stage_seed(Stage::pretrain, "model"));
        const NoiseSchedule sched =
            make_schedule(static_cast<int>(cfg_.integer("schedule.T")), parse_schedule_kind(cfg_.str("schedule.kind")));
        Rng rng(stage_seed(Stage::pretrain));
        std::vector<Image> train_images = load_images(m.select(Split::train), m.image_size, wd_.root);
        note("training auto-encoder on " + std::to_string(train_images.size()) + " images");
        AutoencoderTraining ae_opt;
        ae_opt.epochs = static_cast<int>(cfg_.integer("ae.epochs"));
        ae_opt.lr = cfg_.real("ae.lr");
        Rng ae_rng = rng.split(1);
        r.metrics["ae_mse"] = train_autoencoder(model.ae, train_images, ae_opt, ae_rng);

        const std::vector<std::string> holdout = cfg_.list("pretrain.holdout");
        std::vector<LatentCode> latents;
        std::vector<std::string> prompts;
        for (const ManifestEntry& e : m.select(Split::train)) {
            if (std::find(holdout.begin(), holdout.end(), e.label) != holdout.end()) continue;
            latents.push_back(model.ae.encode(load_image(e, m.image_size, wd_.root)));
            prompts.push_back(class_prompt(model, e.label));
        }
        require(!latents.empty(), ErrorKind::config_error, "pretrain.holdout excludes every class");
        PretrainOptions po;
        po.iterations = static_cast<int>(cfg_.integer("pretrain.iterations"));
        po.batch_size = static_cast<int>(cfg_.integer("pretrain.batch"));
        po.lr = cfg_.real("pretrain.lr");
        po.null_prob = cfg_.real("pretrain.null_prob");
        note("pretraining denoiser for " + std::to_string(po.iterations) + " iterations");
        Rng pre_rng = rng.split(2);
        const std::vector<double> trace = pretrain_diffusion(model, latents, prompts, sched, po, pre_rng);
        if (!trace.empty()) r.metrics["final_loss"] = trace.back();

        Checkpoint ck = model_checkpoint(model, sched, "base", r.stage_hash, r.seed);
        save_checkpoint(ck, wd_.base_checkpoint());
        add_output(r, wd_.base_checkpoint());
    }

    AdaptationConfig adaptation_config(bool token, std::uint64_t seed) const {
        AdaptationConfig a = token ? AdaptationConfig::token_defaults() : AdaptationConfig::lora_defaults();
        a.iterations = static_cast<int>(cfg_.integer(token ? "adapt.iterations.token" : "adapt.iterations.lora"));
        a.batch_size = static_cast<int>(cfg_.integer("adapt.batch"));
        a.lr = cfg_.real(token ? "adapt.lr.token" : "adapt.lr.lora");
        a.null_prob = cfg_.real("adapt.null_prob");
        a.seed = seed;
        return a;
    }

    std::vector<LatentCode> class_latents(const DiffusionModel& model, const DatasetManifest& m,
                                          const std::string& label) const {
        std::vector<LatentCode> out;
        for (const Image& x : real_train_images(m, label)) out.push_back(model.ae.encode(x));
        return out;
    }

    void adapt_token(RunRecord& r) {
        if (!cfg_.boolean("adapt.token")) {
            r.status = "disabled";
            note("adapt.token = false; nothing to do");
            return;
        }
        const DatasetManifest m = dataset();
        need(wd_.base_checkpoint(), Stage::pretrain);
        const Checkpoint base = load_checkpoint(wd_.base_checkpoint());
        for (const std::string& label : selected_classes(m)) {
            DiffusionModel model = model_from_checkpoint(base);
            const NoiseSchedule sched = schedule_from_checkpoint(base);
            const auto latents = class_latents(model, m, label);
            note("token adaptation for '" + label + "' on " + std::to_string(latents.size()) + " images");
            AdaptationReport rep;
            const std::uint64_t seed = stage_seed(Stage::adapt_token, label);
            PromptEmbedding v =
                train_token_embedding(latents, cfg_.str("adapt.prompt"), model, sched, adaptation_config(true, seed), &rep);
            Checkpoint ck;
            ck.meta = {{"stage", "token-adapted"}, {"class", label}, {"config_hash", r.stage_hash}, {"seed", seed},
                       {"probe_before", rep.probe_before}, {"probe_after", rep.probe_after}};
            add_prompt(ck, v);
            save_checkpoint(ck, wd_.token_checkpoint(label));
            add_output(r, wd_.token_checkpoint(label));
            r.metrics[label] = {{"probe_before", rep.probe_before}, {"probe_after", rep.probe_after}};
        }
    }

    void adapt_lora(RunRecord& r) {
        const bool full = cfg_.boolean("adapt.full");
        if (!full && !cfg_.boolean("adapt.lora")) {
            r.status = "disabled";
            note("adapt.lora and adapt.full are false; nothing to do");
            return;
        }
        const DatasetManifest m = dataset();
        need(wd_.base_checkpoint(), Stage::pretrain);
        const Checkpoint base = load_checkpoint(wd_.base_checkpoint());
        for (const std::string& label : selected_classes(m)) {
            DiffusionModel model = model_from_checkpoint(base);
            const NoiseSchedule sched = schedule_from_checkpoint(base);
            PromptEmbedding v = model.tokenize(cfg_.str("adapt.prompt"));
            if (cfg_.boolean("adapt.token")) {
                need(wd_.token_checkpoint(label), Stage::adapt_token);
                v = prompt_from_checkpoint(load_checkpoint(wd_.token_checkpoint(label)));
            }
            const auto latents = class_latents(model, m, label);
            const std::uint64_t seed = stage_seed(Stage::adapt_lora, label);
            const AdaptationConfig ac = adaptation_config(false, seed);
            AdaptationReport rep;
            Checkpoint ck;
            fs::path out;
            if (full) {
                note("full fine-tuning for '" + label + "'");
                rep = train_full(latents, v, model, sched, ac);
                ck = model_checkpoint(model, sched, "full-adapted", r.stage_hash, seed);
                out = wd_.full_checkpoint(label);
            } else {
                note("low-rank adaptation for '" + label + "'");
                LoraAdapter adapter = attach_lora(model, model.attention_layers(), static_cast<int>(cfg_.integer("adapt.rank")),
                                                  derive_seed(seed, 1));
                rep = train_lora(latents, v, model, adapter, sched, ac);
                ck.meta = {{"stage", "lora-adapted"}, {"config_hash", r.stage_hash}, {"seed", seed}};
                add_lora(ck, adapter);
                out = wd_.lora_checkpoint(label);
            }
            ck.meta["class"] = label;
            ck.meta["probe_before"] = rep.probe_before;
            ck.meta["probe_after"] = rep.probe_after;
            add_prompt(ck, v);
            save_checkpoint(ck, out);
            add_output(r, out);
            r.metrics[label] = {{"probe_before", rep.probe_before}, {"probe_after", rep.probe_after}};
        }
    }

    std::vector<SourceImage> sources(const DatasetManifest& m, const std::string& label) const {
        std::vector<SourceImage> out;
        for (const ManifestEntry& e : m.select(Split::train, label))
            if (e.provenance == Provenance::real) out.push_back({e.path, load_image(e, m.image_size, wd_.root)});
        return out;
    }

    void generate(RunRecord& r) {
        const DatasetManifest m = dataset();
        std::optional<TunedRegistry> tuned;
        if (cfg_.boolean("gen.use_tuned") && fs::exists(wd_.tuned())) {
            std::ifstream in(wd_.tuned());
            tuned = TunedRegistry::from_json(nlohmann::json::parse(in));
        }
        DatasetManifest pool;
        pool.classes = m.classes;
        pool.image_size = m.image_size;
        for (const std::string& label : selected_classes(m)) {
            AdaptedModel a = adapted(label);
            GenerationConfig g = generation_config(cfg_);
            if (tuned && tuned->contains(label)) {
                g.omega_cfg = tuned->at(label).omega_cfg;
                g.strength = tuned->at(label).strength;
            }
            g.seed = stage_seed(Stage::generate, label);
            const auto n = static_cast<std::size_t>(cfg_.integer("gen.n"));
            note("generating " + std::to_string(n) + " images for '" + label + "' (omega " + std::to_string(g.omega_cfg) +
                 ", strength " + std::to_string(g.strength) + ")");
            fs::remove_all(wd_.generated() / label);
            const auto src = sources(m, label);
            auto entries = generate_dataset(a.model, a.prompt, src, label, a.sched, g, n, wd_.generated(), wd_.root);
            pool.entries.insert(pool.entries.end(), entries.begin(), entries.end());
            r.metrics[label] = {{"omega_cfg", g.omega_cfg}, {"strength", g.strength}, {"n", n}};
        }
        save_manifest(pool, wd_.generated_manifest());
        add_output(r, wd_.generated_manifest());
    }

    void tune(RunRecord& r) {
        const DatasetManifest m = dataset();
        const auto [omegas, strengths] = cfg_.grid("tune.grid");
        const SearchMode mode = parse_search_mode(cfg_.str("tune.mode"));
        const auto n = static_cast<std::size_t>(cfg_.integer("tune.n"));
        const FeatureModel extractor = feature_model();
        TunedRegistry registry;
        fs::remove(wd_.scores());
        for (const std::string& label : selected_classes(m)) {
            AdaptedModel a = adapted(label);
            const auto src = sources(m, label);
            const std::vector<Image> real = real_train_images(m, label);
            GenerationConfig base = generation_config(cfg_);
            base.image_oriented = true;
            const CellScorer scorer = fid_scorer(a.model, a.prompt, src, real, a.sched, extractor, n, base);
            const std::uint64_t seed = stage_seed(Stage::tune, label);
            note("tuning '" + label + "' over " + std::to_string(omegas.size() * strengths.size()) + " cells");
            TuningResult res = mode == SearchMode::grid
                                   ? grid_search(make_grid(omegas, strengths), scorer, n, seed)
                                   : coordinate_descent(omegas, strengths, scorer, n, seed);
            write_score_table(label, res.table, wd_.scores(), true);
            registry.record_best(label, res.best);
            r.metrics[label] = {{"omega_cfg", res.best.omega_cfg}, {"strength", res.best.strength}, {"fid", res.best_fid}};
        }
        std::ofstream out(wd_.tuned());
        out << registry.to_json().dump(2) << '\n';
        add_output(r, wd_.scores());
        add_output(r, wd_.tuned());
    }

    void fid_report(RunRecord& r) {
        const DatasetManifest m = dataset();
        need(wd_.generated_manifest(), Stage::generate);
        const DatasetManifest pool = load_manifest(wd_.generated_manifest());
        const FeatureModel extractor = feature_model();
        const auto limit = static_cast<std::size_t>(cfg_.integer("fid.n"));
        std::vector<FidRow> rows;
        for (const std::string& label : selected_classes(m)) {
            std::vector<ManifestEntry> gen = pool_for(pool.entries, label);
            if (limit > 0 && gen.size() > limit) gen.resize(limit);
            if (gen.empty())
                throw Error(ErrorKind::dependency_missing, "no generated images for '" + label + "'; run stage 'generate' first");
            const std::vector<Image> gen_images = load_images(gen, m.image_size, wd_.root);
            const std::vector<Image> real = real_train_images(m, label);
            const double d = fid(real, gen_images, extractor);
            rows.push_back({label, to_string(extractor.kind()), static_cast<Index>(real.size()),
                            static_cast<Index>(gen_images.size()), d});
            r.metrics[label] = d;
            note("FID '" + label + "' = " + std::to_string(d));
        }
        write_fid_csv(rows, wd_.fid_report());
        add_output(r, wd_.fid_report());
    }

    void classify(RunRecord& r) {
        const DatasetManifest m = dataset();
        const double alpha = cfg_.real("data.alpha");
        const bool sub = cfg_.boolean("data.substitute");
        const auto expand_n = static_cast<std::size_t>(cfg_.integer("expand.n"));
        const std::uint64_t seed = stage_seed(Stage::classify);
        DatasetManifest pool;
        if ((sub && alpha < 1.0) || expand_n > 0) {
            need(wd_.generated_manifest(), Stage::generate);
            pool = load_manifest(wd_.generated_manifest());
        }
        const std::uint64_t subset_seed = derive_seed(seed_, fnv1a("subset"));
        DatasetManifest train_set = sub ? substitute(m, alpha, pool.entries, subset_seed) : subset_train(m, alpha, subset_seed);
        if (expand_n > 0) train_set = expand(train_set, pool.entries, expand_n);
        save_manifest(train_set, wd_.classify_manifest());
        add_output(r, wd_.classify_manifest());

        TrainRun run;
        run.epochs = static_cast<int>(cfg_.integer("classify.epochs"));
        run.batch_size = static_cast<int>(cfg_.integer("classify.batch"));
        run.lr = cfg_.real("classify.lr");
        run.patience = static_cast<int>(cfg_.integer("classify.patience"));
        run.augment = cfg_.boolean("classify.augment");
        run.model.channels = static_cast<int>(cfg_.integer("classify.channels"));
        run.model.width = static_cast<int>(cfg_.integer("classify.width"));
        run.seed = seed;
        std::ostringstream id;
        id << "a" << alpha << (sub ? "-sub" : "") << "-n" << expand_n << "-s" << seed_;
        run.run_id = id.str();
        note("training classifier " + run.run_id + " on " + std::to_string(train_set.count(Split::train)) + " images");
        const TrainResult res = train_classifier(train_set, run, wd_.root);
        const fs::path history = wd_.reports() / ("history_" + run.run_id + ".csv");
        write_history_csv(res.history, history);
        add_output(r, history);
        Checkpoint ck = classifier_checkpoint(res.model, "classify");
        ck.meta["run_id"] = run.run_id;
        ck.meta["seed"] = seed;
        ck.meta["config_hash"] = r.stage_hash;
        save_checkpoint(ck, wd_.classifier_checkpoint());
        add_output(r, wd_.classifier_checkpoint());

        const bool header = !fs::exists(wd_.classify_report());
        std::ofstream out(wd_.classify_report(), std::ios::app);
        if (header) out << "run_id,alpha,substitute,expansion_n,seed,best_epoch,val_acc,test_acc\n";
        out << run.run_id << ',' << alpha << ',' << (sub ? 1 : 0) << ',' << expand_n << ',' << seed_ << ','
            << res.best_epoch << ',' << res.best_val_acc << ',' << res.test.accuracy << '\n';
        add_output(r, wd_.classify_report());
        r.metrics = {{"run_id", run.run_id}, {"best_epoch", res.best_epoch}, {"val_acc", res.best_val_acc},
                     {"test_acc", res.test.accuracy}};
        note("test accuracy " + std::to_string(res.test.accuracy));
    }

    Config cfg_;
    Workdir wd_;
    bool force_ = false;
    std::ostream* log_ = nullptr;
    std::uint64_t seed_ = 0;
    std::string current_;
};

}  // namespace minidiff
