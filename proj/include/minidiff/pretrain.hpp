#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "minidiff/nets/model.hpp"
#include "minidiff/optim.hpp"

namespace minidiff {

/// Prompt used for a class label during base training; labels outside the
/// vocabulary fall back to the generic word "defect".
inline std::string class_prompt(const DiffusionModel& model, const std::string& label) {
    return "a photo of " + (model.vocab.contains(label) ? label : std::string("defect"));
}

struct PretrainOptions {
    int iterations = 3000;
    int batch_size = 8;
    double lr = 1e-3;
    double null_prob = 0.1;
};

/// Text-conditional base training of vocabulary table, text encoder, denoiser
/// and null embedding on (latent, prompt) pairs. The auto-encoder stays frozen.
/// Returns the per-iteration loss trace.
inline std::vector<double> pretrain_diffusion(DiffusionModel& model, std::span<const LatentCode> latents,
                                              std::span<const std::string> prompts, const NoiseSchedule& sched,
                                              const PretrainOptions& opt, Rng& rng) {
    require(!latents.empty() && latents.size() == prompts.size(), ErrorKind::invalid_argument,
            "pretraining needs one prompt per latent");
    model.set_trainable([](const std::string& n) { return n.rfind("ae.", 0) != 0; });
    Adam adam(model.trainable_parameters(), {.lr = opt.lr});
    std::vector<double> trace;
    trace.reserve(static_cast<std::size_t>(opt.iterations));
    for (int it = 0; it < opt.iterations; ++it) {
        // linear warm-down over the last half
        const double progress = static_cast<double>(it) / std::max(1, opt.iterations);
        adam.set_lr(opt.lr * (progress < 0.5 ? 1.0 : 2.0 * (1.0 - progress) + 0.05));
        const bool use_null = rng.bernoulli(opt.null_prob);
        Tape t;
        std::map<std::string, Var> conds;
        Var total;
        for (int b = 0; b < opt.batch_size; ++b) {
            const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(latents.size()) - 1));
            Var cond;
            if (!use_null) {
                auto it_c = conds.find(prompts[i]);
                if (it_c == conds.end())
                    it_c = conds.emplace(prompts[i], model.encode_text(t, model.vocab.embed(t, prompts[i]))).first;
                cond = it_c->second;
            }
            const int step = static_cast<int>(rng.uniform_int(1, sched.T));
            Matrix eps = rng.normal_matrix(latents[i].rows(), latents[i].cols());
            Var pred = model.predict_noise(t, t.constant(diffuse(latents[i], step, eps, sched)), step, cond);
            Var li = ops::squared_error(pred, eps);
            total = total.valid() ? total + li : li;
        }
        Var loss = ops::scale(total, 1.0 / opt.batch_size);
        t.backward(loss);
        adam.step();
        trace.push_back(loss.scalar());
    }
    model.freeze_all();
    return trace;
}

}  // namespace minidiff
