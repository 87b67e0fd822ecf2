#pragma once

// Generator adaptation: token-embedding optimization of the placeholder slice,
// then low-rank deltas on the attention dense layers of the text encoder and
// the denoiser (optionally full-parameter fine-tuning for comparison).

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "minidiff/error.hpp"
#include "minidiff/nets/model.hpp"
#include "minidiff/optim.hpp"
#include "minidiff/random.hpp"

namespace minidiff {

enum class AdaptationStage { token, lora, full };

struct AdaptationConfig {
    int iterations = 1000;
    int batch_size = 4;
    double lr = 5e-4;
    AdaptationStage stage = AdaptationStage::token;
    std::uint64_t seed = 0;
    /// Probability that an iteration trains the unconditional (null) branch.
    double null_prob = 0.1;
    int probe_size = 8;
    /// Seeds the probe batch; shared across stages so their probe losses compare.
    std::uint64_t probe_seed = 0x70726f6265ULL;

    static AdaptationConfig token_defaults() { return {}; }
    static AdaptationConfig lora_defaults() {
        AdaptationConfig c;
        c.lr = 1e-4;
        c.stage = AdaptationStage::lora;
        return c;
    }
};

struct AdaptationReport {
    double probe_before = 0.0;
    double probe_after = 0.0;
    std::vector<double> losses;

    /// Exponential moving average of the loss trace over its first / last part.
    double ema_start(double decay = 0.9) const { return ema(0, std::min<std::size_t>(losses.size(), 50), decay); }
    double ema_end(double decay = 0.9) const {
        return losses.empty() ? 0.0 : ema(losses.size() > 50 ? losses.size() - 50 : 0, losses.size(), decay);
    }

private:
    double ema(std::size_t from, std::size_t to, double decay) const {
        if (from >= to) return 0.0;
        double e = losses[from];
        for (std::size_t i = from + 1; i < to; ++i) e = decay * e + (1.0 - decay) * losses[i];
        return e;
    }
};

/// Fixed probe batch: its latents and frozen (t, eps) draws.
struct ProbeBatch {
    std::vector<LatentCode> latents;
    std::vector<NoiseDraw> draws;
};

inline ProbeBatch make_probe(std::span<const LatentCode> latents, const NoiseSchedule& sched, std::uint64_t seed,
                             int size) {
    require(!latents.empty(), ErrorKind::invalid_argument, "probe batch needs latents");
    ProbeBatch p;
    const std::size_t n = std::min(latents.size(), static_cast<std::size_t>(std::max(1, size)));
    p.latents.assign(latents.begin(), latents.begin() + static_cast<std::ptrdiff_t>(n));
    Rng rng(seed);
    p.draws = draw_noise(n, p.latents[0].rows(), p.latents[0].cols(), sched.T, rng);
    return p;
}

inline double probe_loss(const DiffusionModel& model, const ProbeBatch& probe, const PromptEmbedding& prompt,
                         const NoiseSchedule& sched) {
    return diffusion_loss(model, probe.latents, prompt, nullptr, sched, probe.draws, false, false);
}

namespace detail {

/// Shared minibatch loop: samples `batch_size` latents per iteration, draws the
/// loss randomness, and steps Adam over `params`.
inline std::vector<double> run_adaptation(const DiffusionModel& model, std::span<const LatentCode> latents,
                                          const PromptEmbedding& prompt, const Parameter* slice,
                                          std::vector<Parameter*> params, const NoiseSchedule& sched,
                                          const AdaptationConfig& cfg) {
    std::vector<double> losses;
    if (cfg.iterations <= 0) return losses;
    Adam adam(std::move(params), {.lr = cfg.lr});
    Rng rng(cfg.seed);
    std::vector<LatentCode> batch(static_cast<std::size_t>(cfg.batch_size));
    for (int it = 0; it < cfg.iterations; ++it) {
        for (LatentCode& z : batch) z = latents[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(latents.size()) - 1))];
        losses.push_back(diffusion_loss(model, batch, prompt, slice, sched, rng, cfg.null_prob));
        adam.step();
    }
    return losses;
}

}  // namespace detail

/// Optimizes only v_d (the prompt's trainable slice). Every network parameter
/// and every other token embedding stays bit-identical.
inline PromptEmbedding train_token_embedding(std::span<const LatentCode> latents, const PromptEmbedding& init,
                                             DiffusionModel& model, const NoiseSchedule& sched,
                                             const AdaptationConfig& cfg, AdaptationReport* report = nullptr) {
    require(!latents.empty(), ErrorKind::invalid_argument, "token adaptation needs class images");
    require(!init.trainable_positions.empty(), ErrorKind::invalid_argument,
            "prompt has no trainable slice (missing placeholder)");
    model.freeze_all();
    Parameter slice(init.slice());
    slice.trainable = true;
    const ProbeBatch probe = make_probe(latents, sched, cfg.probe_seed, cfg.probe_size);
    AdaptationReport rep;
    rep.probe_before = probe_loss(model, probe, init, sched);
    rep.losses = detail::run_adaptation(model, latents, init, &slice, {&slice}, sched, cfg);
    PromptEmbedding out = init;
    out.set_slice(slice.value);
    rep.probe_after = probe_loss(model, probe, out, sched);
    if (report) *report = std::move(rep);
    return out;
}

inline PromptEmbedding train_token_embedding(std::span<const LatentCode> latents, const std::string& prompt,
                                             DiffusionModel& model, const NoiseSchedule& sched,
                                             const AdaptationConfig& cfg, AdaptationReport* report = nullptr,
                                             const std::string& mark_word = "") {
    return train_token_embedding(latents, model.tokenize(prompt, mark_word), model, sched, cfg, report);
}

/// Low-rank adapter bound to named dense layers of a model.
class LoraAdapter {
public:
    int rank() const { return rank_; }
    const std::vector<std::string>& targets() const { return targets_; }
    bool merged() const { return merged_; }
    const std::map<std::string, std::shared_ptr<LoraWeights>>& weights() const { return weights_; }
    std::map<std::string, std::shared_ptr<LoraWeights>>& weights() { return weights_; }

    /// Sum of (d + k) * r over the adapted layers.
    Index trainable_count() const {
        Index n = 0;
        for (const auto& [name, w] : weights_) n += w->A.size() + w->B.size();
        return n;
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& [name, w] : weights_) {
            out.push_back(&w->A);
            out.push_back(&w->B);
        }
        return out;
    }

    /// True when every target layer of `model` currently routes through this adapter.
    bool attached_to(DiffusionModel& model) const {
        if (merged_ || weights_.empty()) return false;
        for (const auto& [name, w] : weights_) {
            Dense* d = model.find_dense(name);
            if (!d || d->lora != w) return false;
        }
        return true;
    }

private:
    friend LoraAdapter attach_lora(DiffusionModel&, const std::vector<std::string>&, int, std::uint64_t);
    friend LoraAdapter make_lora(const std::map<std::string, std::pair<Matrix, Matrix>>&, int);
    friend void merge_lora(LoraAdapter&, DiffusionModel&);
    friend void unmerge_lora(LoraAdapter&, DiffusionModel&);
    friend void bind_lora(LoraAdapter&, DiffusionModel&);

    int rank_ = 1;
    std::vector<std::string> targets_;
    std::map<std::string, std::shared_ptr<LoraWeights>> weights_;
    bool merged_ = false;
};

/// Attaches zero-initialized deltas (A ~ Gaussian, B = 0) to every target.
inline LoraAdapter attach_lora(DiffusionModel& model, const std::vector<std::string>& targets, int rank,
                               std::uint64_t seed = 0) {
    require(rank >= 1, ErrorKind::invalid_argument, "LoRA rank must be positive");
    std::vector<Dense*> layers;
    for (const std::string& name : targets) {
        Dense* d = model.find_dense(name);
        if (!d) throw Error(ErrorKind::unknown_layer, "no dense layer named '" + name + "'");
        require(rank <= std::min(d->out_features(), d->in_features()), ErrorKind::invalid_argument,
                "rank " + std::to_string(rank) + " exceeds min(d, k) for layer " + name);
        require(!d->lora, ErrorKind::invalid_state, "layer " + name + " already carries an adapter");
        layers.push_back(d);
    }
    LoraAdapter adapter;
    adapter.rank_ = rank;
    adapter.targets_ = targets;
    Rng rng(seed);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        Dense* d = layers[i];
        auto w = std::make_shared<LoraWeights>();
        w->A = Parameter(rng.normal_matrix(rank, d->in_features()) / std::sqrt(static_cast<double>(d->in_features())));
        w->B = Parameter(Matrix::Zero(d->out_features(), rank));
        d->lora = w;
        adapter.weights_[targets[i]] = std::move(w);
    }
    return adapter;
}

/// Adapter from stored (A, B) pairs, not yet bound to any model.
inline LoraAdapter make_lora(const std::map<std::string, std::pair<Matrix, Matrix>>& pairs, int rank) {
    LoraAdapter adapter;
    adapter.rank_ = rank;
    for (const auto& [name, ab] : pairs) {
        auto w = std::make_shared<LoraWeights>();
        w->A = Parameter(ab.first);
        w->B = Parameter(ab.second);
        adapter.targets_.push_back(name);
        adapter.weights_[name] = std::move(w);
    }
    return adapter;
}

/// Routes the adapter's target layers of `model` through its deltas.
inline void bind_lora(LoraAdapter& adapter, DiffusionModel& model) {
    require(!adapter.merged_, ErrorKind::invalid_state, "adapter is merged");
    for (auto& [name, w] : adapter.weights_) {
        Dense* d = model.find_dense(name);
        if (!d) throw Error(ErrorKind::unknown_layer, "no dense layer named '" + name + "'");
        require(w->A.value.cols() == d->in_features() && w->B.value.rows() == d->out_features(),
                ErrorKind::invalid_argument, "adapter shape does not match layer " + name);
        d->lora = w;
    }
}

/// Folds W = W0 + B A into each target and detaches the adapter.
inline void merge_lora(LoraAdapter& adapter, DiffusionModel& model) {
    require(!adapter.merged_, ErrorKind::invalid_state, "adapter already merged");
    require(adapter.attached_to(model), ErrorKind::invalid_state, "adapter is not attached to this model");
    for (auto& [name, w] : adapter.weights_) {
        Dense* d = model.find_dense(name);
        d->weight.value += w->B.value * w->A.value;
        d->lora.reset();
    }
    adapter.merged_ = true;
}

/// Subtracts B A again and re-attaches the adapter.
inline void unmerge_lora(LoraAdapter& adapter, DiffusionModel& model) {
    require(adapter.merged_, ErrorKind::invalid_state, "adapter is not merged");
    for (auto& [name, w] : adapter.weights_) {
        Dense* d = model.find_dense(name);
        if (!d) throw Error(ErrorKind::unknown_layer, "no dense layer named '" + name + "'");
        d->weight.value -= w->B.value * w->A.value;
        d->lora = w;
    }
    adapter.merged_ = false;
}

/// Trains only the adapter's A/B matrices under the fixed prompt embedding v*.
inline AdaptationReport train_lora(std::span<const LatentCode> latents, const PromptEmbedding& prompt,
                                   DiffusionModel& model, LoraAdapter& adapter, const NoiseSchedule& sched,
                                   const AdaptationConfig& cfg) {
    require(!latents.empty(), ErrorKind::invalid_argument, "LoRA adaptation needs class images");
    require(adapter.attached_to(model), ErrorKind::invalid_state, "no adapter attached to the model");
    model.freeze_all();
    std::vector<Parameter*> params = adapter.parameters();
    for (Parameter* p : params) p->trainable = true;
    const ProbeBatch probe = make_probe(latents, sched, cfg.probe_seed, cfg.probe_size);
    AdaptationReport rep;
    rep.probe_before = probe_loss(model, probe, prompt, sched);
    rep.losses = detail::run_adaptation(model, latents, prompt, nullptr, params, sched, cfg);
    for (Parameter* p : params) p->trainable = false;
    rep.probe_after = probe_loss(model, probe, prompt, sched);
    return rep;
}

/// Full-parameter fine-tuning of text encoder and denoiser (comparison baseline).
inline AdaptationReport train_full(std::span<const LatentCode> latents, const PromptEmbedding& prompt,
                                   DiffusionModel& model, const NoiseSchedule& sched, const AdaptationConfig& cfg) {
    require(!latents.empty(), ErrorKind::invalid_argument, "adaptation needs class images");
    model.set_trainable([](const std::string& n) { return n.rfind("text.", 0) == 0 || n.rfind("denoiser.", 0) == 0; });
    const ProbeBatch probe = make_probe(latents, sched, cfg.probe_seed, cfg.probe_size);
    AdaptationReport rep;
    rep.probe_before = probe_loss(model, probe, prompt, sched);
    rep.losses = detail::run_adaptation(model, latents, prompt, nullptr, model.trainable_parameters(), sched, cfg);
    model.freeze_all();
    rep.probe_after = probe_loss(model, probe, prompt, sched);
    return rep;
}

/// FNV-1a digest over named parameter bytes; used for isolation checks and run records.
inline std::uint64_t hash_parameters(const DiffusionModel& model,
                                     const std::function<bool(const std::string&)>& include = {}) {
    std::uint64_t h = 1469598103934665603ULL;
    model.for_each_param([&](const std::string& name, const Parameter& p) {
        if (include && !include(name)) return;
        h = fnv1a(name, h);
        h = fnv1a(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(double), h);
    });
    return h;
}

}  // namespace minidiff
