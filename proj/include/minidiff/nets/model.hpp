#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "minidiff/autograd.hpp"
#include "minidiff/error.hpp"
#include "minidiff/nets/autoencoder.hpp"
#include "minidiff/nets/denoiser.hpp"
#include "minidiff/nets/text_encoder.hpp"
#include "minidiff/random.hpp"
#include "minidiff/schedule.hpp"

namespace minidiff {

struct ModelConfig {
    AutoencoderConfig autoencoder;
    TextEncoderConfig text;
    int denoiser_width = 16;
    int embed_dim = 64;
    int time_dim = 32;
    int timesteps = 1000;
    int placeholder_width = 1;
    std::vector<std::string> vocabulary = default_vocabulary();

    DenoiserConfig denoiser() const {
        DenoiserConfig d;
        d.latent_size = autoencoder.latent_size();
        d.latent_channels = autoencoder.latent_channels_effective();
        d.width = denoiser_width;
        d.embed_dim = embed_dim;
        d.cond_dim = text.dim;
        d.time_dim = time_dim;
        d.timesteps = timesteps;
        return d;
    }
};

/// The bundle standing in for a latent text-to-image model: auto-encoder,
/// tokenizer table, text encoder, noise predictor and the learned null
/// embedding used for the unconditional branch.
class DiffusionModel {
public:
    DiffusionModel() = default;
    DiffusionModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        Rng rng(seed);
        Rng ae_rng = rng.split(1), vocab_rng = rng.split(2), text_rng = rng.split(3), den_rng = rng.split(4),
            null_rng = rng.split(5);
        ae = Autoencoder(cfg.autoencoder, ae_rng);
        vocab = Vocabulary(cfg.vocabulary, cfg.text.dim, cfg.placeholder_width, vocab_rng);
        text = TextEncoder(cfg.text, text_rng);
        denoiser = Denoiser(cfg.denoiser(), den_rng);
        null_embedding = Parameter(null_rng.normal_matrix(1, cfg.text.dim) * 0.1);
    }

    const ModelConfig& config() const { return cfg_; }

    PromptEmbedding tokenize(const std::string& prompt, const std::string& mark_word = "") const {
        return vocab.tokenize(prompt, mark_word);
    }

    /// tau^r over a token-embedding node.
    Var encode_text(Tape& t, Var tokens) const { return text.forward(t, tokens); }

    Matrix encode_text(const PromptEmbedding& v) const {
        Tape t;
        return encode_text(t, t.constant(v.tokens)).value();
    }

    /// eps_theta(z_t; cond, t); an invalid cond selects the null embedding.
    Var predict_noise(Tape& t, Var z, int step, Var cond = {}) const {
        Var c = cond.valid() ? cond : t.param(null_embedding);
        return denoiser.forward(t, z, step, c);
    }

    Matrix predict_noise(const LatentCode& z, int step, const Matrix* cond = nullptr) const {
        Tape t;
        Var c = cond ? t.constant_ref(*cond) : t.param(null_embedding);
        return denoiser.forward(t, t.constant_ref(z), step, c).value();
    }

    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        Autoencoder::visit(self.ae, "ae", f);
        f(std::string("vocab.table"), self.vocab.table());
        TextEncoder::visit(self.text, "text", f);
        Denoiser::visit(self.denoiser, "denoiser", f);
        f(std::string("null_embedding"), self.null_embedding);
    }

    void for_each_param(const std::function<void(const std::string&, Parameter&)>& f) { visit(*this, f); }
    void for_each_param(const std::function<void(const std::string&, const Parameter&)>& f) const {
        visit(*this, f);
    }

    /// Dense layers of the text encoder and denoiser (LoRA candidates).
    void for_each_dense(const std::function<void(const std::string&, Dense&)>& f) {
        TextEncoder::visit_dense(text, "text", f);
        Denoiser::visit_dense(denoiser, "denoiser", f);
    }
    void for_each_dense(const std::function<void(const std::string&, const Dense&)>& f) const {
        TextEncoder::visit_dense(text, "text", f);
        Denoiser::visit_dense(denoiser, "denoiser", f);
    }

    Dense* find_dense(const std::string& name) {
        Dense* found = nullptr;
        for_each_dense([&](const std::string& n, Dense& d) {
            if (n == name) found = &d;
        });
        return found;
    }

    /// Names of every dense sub-weight inside an attention layer.
    std::vector<std::string> attention_layers() const {
        std::vector<std::string> out;
        for_each_dense([&](const std::string& n, const Dense&) {
            if (n.find(".attn.") != std::string::npos) out.push_back(n);
        });
        return out;
    }

    void set_trainable(const std::function<bool(const std::string&)>& pred) {
        for_each_param([&](const std::string& n, Parameter& p) { p.trainable = pred(n); });
    }

    void freeze_all() {
        set_trainable([](const std::string&) { return false; });
    }

    /// Parameters flagged trainable, in visiting order.
    std::vector<Parameter*> trainable_parameters() {
        std::vector<Parameter*> out;
        for_each_param([&](const std::string&, Parameter& p) {
            if (p.trainable) out.push_back(&p);
        });
        return out;
    }

    Index parameter_count() const {
        Index n = 0;
        for_each_param([&](const std::string&, const Parameter& p) { n += p.size(); });
        return n;
    }

    Autoencoder ae;
    Vocabulary vocab;
    TextEncoder text;
    Denoiser denoiser;
    Parameter null_embedding;

private:
    ModelConfig cfg_;
};

/// One frozen draw of the loss randomness for a batch item.
struct NoiseDraw {
    int t = 1;
    Matrix eps;
};

inline std::vector<NoiseDraw> draw_noise(std::size_t n, Index rows, Index cols, int T, Rng& rng) {
    std::vector<NoiseDraw> out(n);
    for (NoiseDraw& d : out) {
        d.t = static_cast<int>(rng.uniform_int(1, T));
        d.eps = rng.normal_matrix(rows, cols);
    }
    return out;
}

/// Token rows of `prompt`, with the trainable slice taken from `slice` when given.
inline Var prompt_tokens(Tape& t, const PromptEmbedding& prompt, const Parameter* slice) {
    Var base = t.constant_ref(prompt.tokens);
    if (!slice || prompt.trainable_positions.empty()) return base;
    return ops::replace_rows(base, t.param(*slice), prompt.trainable_positions);
}

/// mean over the batch of ||eps_theta(z_t; tau(v), t) - eps||^2 for fixed draws.
/// Gradients accumulate into every parameter flagged trainable (and `slice`).
inline double diffusion_loss(const DiffusionModel& model, std::span<const LatentCode> latents,
                             const PromptEmbedding& prompt, const Parameter* slice, const NoiseSchedule& sched,
                             std::span<const NoiseDraw> draws, bool null_condition, bool backward = true) {
    require(!latents.empty(), ErrorKind::invalid_argument, "diffusion loss needs a nonempty batch");
    require(draws.size() == latents.size(), ErrorKind::invalid_argument, "one noise draw per batch item required");
    Tape t;
    Var cond;
    if (!null_condition) cond = model.encode_text(t, prompt_tokens(t, prompt, slice));
    Var total;
    const double inv_n = 1.0 / static_cast<double>(latents.size());
    for (std::size_t i = 0; i < latents.size(); ++i) {
        Matrix zt = diffuse(latents[i], draws[i].t, draws[i].eps, sched);
        Var pred = model.predict_noise(t, t.constant(std::move(zt)), draws[i].t, cond);
        Var li = ops::squared_error(pred, draws[i].eps);
        total = total.valid() ? total + li : li;
    }
    Var loss = ops::scale(total, inv_n);
    if (backward) t.backward(loss);
    return loss.scalar();
}

/// Draws t ~ U{1..T}, eps ~ N(0, I) and (with probability null_prob) the null
/// condition from `rng`, then evaluates the loss.
inline double diffusion_loss(const DiffusionModel& model, std::span<const LatentCode> latents,
                             const PromptEmbedding& prompt, const Parameter* slice, const NoiseSchedule& sched, Rng& rng,
                             double null_prob = 0.0, bool backward = true) {
    require(!latents.empty(), ErrorKind::invalid_argument, "diffusion loss needs a nonempty batch");
    const bool use_null = null_prob > 0.0 && rng.bernoulli(null_prob);
    auto draws = draw_noise(latents.size(), latents[0].rows(), latents[0].cols(), sched.T, rng);
    return diffusion_loss(model, latents, prompt, slice, sched, draws, use_null, backward);
}

}  // namespace minidiff
