#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "minidiff/nets/model.hpp"
#include "minidiff/schedule.hpp"

namespace minidiff::testing {

/// 16x16 images, 8x8x2 latents, 20-step chains: fast enough for gradient checks.
inline ModelConfig tiny_config() {
    ModelConfig c;
    c.autoencoder.image_size = 16;
    c.autoencoder.factor = 2;
    c.autoencoder.latent_channels = 2;
    c.autoencoder.width = 4;
    c.text.dim = 8;
    c.text.blocks = 1;
    c.denoiser_width = 4;
    c.embed_dim = 16;
    c.time_dim = 8;
    c.timesteps = 20;
    return c;
}

/// Posterior-mean denoiser for data ~ N(mu, gamma^2):
/// eps_hat = sigma (z - alpha mu) / (alpha^2 gamma^2 + sigma^2).
inline Matrix gaussian_oracle_eps(const Matrix& z, int t, const NoiseSchedule& s, double mu, double gamma) {
    const double a = s.alpha(t), sg = s.sigma(t);
    return sg * (z.array() - a * mu) / (a * a * gamma * gamma + sg * sg);
}

/// Central differences of `loss` over the listed entries of `p`.
inline std::vector<double> numeric_gradient(Parameter& p, const std::vector<Index>& entries,
                                            const std::function<double()>& loss, double h = 1e-3) {
    std::vector<double> out;
    for (Index i : entries) {
        const double keep = p.value.data()[i];
        p.value.data()[i] = keep + h;
        const double up = loss();
        p.value.data()[i] = keep - h;
        const double down = loss();
        p.value.data()[i] = keep;
        out.push_back((up - down) / (2.0 * h));
    }
    return out;
}

/// ||a - n|| / ||n||
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double diff = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        norm += numeric[i] * numeric[i];
    }
    return std::sqrt(diff) / std::max(std::sqrt(norm), 1e-300);
}

inline std::vector<Index> spread_entries(Index size, Index count) {
    std::vector<Index> out;
    for (Index i = 0; i < count && i < size; ++i) out.push_back((i * 7919) % size);
    return out;
}

}  // namespace minidiff::testing
