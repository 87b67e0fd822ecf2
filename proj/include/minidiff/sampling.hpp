#pragma once

// Classifier-free-guided reverse diffusion, from pure noise or from a partially
// noised real image, and batch generation into a class-per-directory tree.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "minidiff/data.hpp"
#include "minidiff/error.hpp"
#include "minidiff/image.hpp"
#include "minidiff/nets/model.hpp"
#include "minidiff/random.hpp"
#include "minidiff/schedule.hpp"

namespace minidiff {

struct GenerationConfig {
    double omega_cfg = 5.0;
    double strength = 0.5;
    /// 0 walks every integer timestep; a smaller positive count strides.
    int steps = 0;
    SamplerMode mode = SamplerMode::stochastic_paper;
    std::uint64_t seed = 0;
    /// false starts every chain from pure noise at T; strength is then unused.
    bool image_oriented = true;
};

/// Conditioning for one prompt embedding, computed once per generation run.
struct Guidance {
    Matrix cond;  // tau(v*), 1 x C
    double omega = 1.0;
};

inline Guidance make_guidance(const DiffusionModel& model, const PromptEmbedding& prompt, double omega) {
    require(omega >= 0.0, ErrorKind::invalid_argument, "guidance scale must be nonnegative");
    return {model.encode_text(prompt), omega};
}

/// eps_u + omega (eps_c - eps_u), evaluated as (1 - omega) eps_u + omega eps_c
/// so that omega = 0 and omega = 1 reproduce the branches bit for bit.
inline Matrix guided_noise(const DiffusionModel& model, const LatentCode& z, int t, const Guidance& g) {
    if (g.omega == 0.0) return model.predict_noise(z, t);
    Matrix cond = model.predict_noise(z, t, &g.cond);
    if (g.omega == 1.0) return cond;
    Matrix uncond = model.predict_noise(z, t);
    return (1.0 - g.omega) * uncond + g.omega * cond;
}

inline Matrix guided_noise(const DiffusionModel& model, const LatentCode& z, int t, const PromptEmbedding& prompt,
                           double omega) {
    return guided_noise(model, z, t, make_guidance(model, prompt, omega));
}

/// Guided reverse loop from z_start at timestep `start` down to z_0.
inline LatentCode reverse_diffuse(const DiffusionModel& model, LatentCode z, int start, const Guidance& g,
                                  const NoiseSchedule& sched, const GenerationConfig& cfg, Rng& rng) {
    const std::vector<int> seq = timestep_sequence(start, cfg.steps);
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const int t = seq[i];
        const int t_prev = i + 1 < seq.size() ? seq[i + 1] : 0;
        z = ddim_transition(z, guided_noise(model, z, t, g), t, t_prev, sched, cfg.mode, rng);
    }
    return z;
}

inline Image generate_from_noise(const DiffusionModel& model, const Guidance& g, const NoiseSchedule& sched,
                                 const GenerationConfig& cfg) {
    require(cfg.steps <= sched.T, ErrorKind::invalid_argument, "steps exceed the chain length");
    Rng rng(cfg.seed);
    const LatentCode z = rng.normal_matrix(model.denoiser.positions(), model.denoiser.config().latent_channels);
    return model.ae.decode(reverse_diffuse(model, z, sched.T, g, sched, cfg, rng));
}

inline Image generate_from_noise(const DiffusionModel& model, const PromptEmbedding& prompt,
                                 const NoiseSchedule& sched, const GenerationConfig& cfg) {
    return generate_from_noise(model, make_guidance(model, prompt, cfg.omega_cfg), sched, cfg);
}

/// Diffuses E(x) to T' = round(s T) and denoises back with guidance.
inline Image image_oriented_generate(const Image& x, const DiffusionModel& model, const Guidance& g,
                                     const NoiseSchedule& sched, const GenerationConfig& cfg) {
    const int start = strength_to_timestep(cfg.strength, sched.T);
    require(cfg.steps <= sched.T, ErrorKind::invalid_argument, "steps exceed the chain length");
    Rng rng(cfg.seed);
    const LatentCode z0 = model.ae.encode(x);
    const LatentCode z = diffuse(z0, start, rng.normal_matrix(z0.rows(), z0.cols()), sched);
    return model.ae.decode(reverse_diffuse(model, z, start, g, sched, cfg, rng));
}

inline Image image_oriented_generate(const Image& x, const DiffusionModel& model, const PromptEmbedding& prompt,
                                     const NoiseSchedule& sched, const GenerationConfig& cfg) {
    return image_oriented_generate(x, model, make_guidance(model, prompt, cfg.omega_cfg), sched, cfg);
}

struct SourceImage {
    std::string id;
    Image image;
};

/// Seed of the i-th sample of a batch rooted at `root`.
inline std::uint64_t sample_seed(std::uint64_t root, std::size_t i) { return derive_seed(root, i); }

/// Produces n images, cycling through `sources` (i mod |sources|) with one derived
/// seed per sample. Images are written to <out>/<label>/gen_<seed>.png when `out`
/// is nonempty; manifest paths are relative to `path_base` when given.
inline std::vector<ManifestEntry> generate_dataset(const DiffusionModel& model, const PromptEmbedding& prompt,
                                                   std::span<const SourceImage> sources, const std::string& label,
                                                   const NoiseSchedule& sched, const GenerationConfig& cfg,
                                                   std::size_t n, const fs::path& out, const fs::path& path_base = {},
                                                   std::vector<Image>* images = nullptr) {
    require(n >= 1, ErrorKind::invalid_argument, "generation count must be positive");
    require(!cfg.image_oriented || !sources.empty(), ErrorKind::invalid_argument,
            "image-oriented generation needs at least one source image");
    const Guidance g = make_guidance(model, prompt, cfg.omega_cfg);
    std::vector<ManifestEntry> entries;
    entries.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        GenerationConfig c = cfg;
        c.seed = sample_seed(cfg.seed, i);
        const SourceImage* src = sources.empty() ? nullptr : &sources[i % sources.size()];
        Image img = cfg.image_oriented ? image_oriented_generate(src->image, model, g, sched, c)
                                       : generate_from_noise(model, g, sched, c);
        ManifestEntry e;
        e.label = label;
        e.split = Split::train;
        e.provenance = Provenance::generated;
        if (cfg.image_oriented) e.source_id = src->id;
        e.extra = {{"omega_cfg", cfg.omega_cfg}, {"seed", c.seed}, {"sampler", to_string(cfg.mode)}};
        if (cfg.image_oriented) e.extra["strength"] = cfg.strength;
        if (!out.empty()) {
            const fs::path file = out / label / ("gen_" + std::to_string(c.seed) + ".png");
            write_png(file, img);
            e.path = (path_base.empty() ? file : fs::relative(file, path_base)).generic_string();
        } else {
            e.path = label + "/gen_" + std::to_string(c.seed) + ".png";
        }
        entries.push_back(std::move(e));
        if (images) images->push_back(std::move(img));
    }
    return entries;
}

}  // namespace minidiff
