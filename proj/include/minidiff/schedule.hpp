#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "minidiff/autograd.hpp"
#include "minidiff/error.hpp"
#include "minidiff/random.hpp"

namespace minidiff {

enum class ScheduleKind { linear_beta, cosine };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "linear-beta" || s == "linear") return ScheduleKind::linear_beta;
    if (s == "cosine") return ScheduleKind::cosine;
    throw Error(ErrorKind::invalid_argument, "unknown schedule kind '" + s + "'");
}

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "linear-beta"; }

/// Variance-preserving forward process: z_t = alpha_t z_0 + sigma_t eps with
/// alpha_t^2 + sigma_t^2 = 1. Entries are stored for t = 0..T inclusive.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> alphas;
    std::vector<double> sigmas;

    double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t)); }
    double sigma(int t) const { return sigmas.at(static_cast<std::size_t>(t)); }
};

// Conventional DDPM range at T = 1000; rescaled by 1000/T for shorter chains so
// the terminal alpha stays near zero whatever T is.
inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaEnd = 0.02;
inline constexpr double kMaxBeta = 0.999;
inline constexpr double kCosineOffset = 0.008;

inline NoiseSchedule schedule_from_alpha_bar(const std::vector<double>& alpha_bar) {
    NoiseSchedule s;
    s.T = static_cast<int>(alpha_bar.size()) - 1;
    s.alphas.resize(alpha_bar.size());
    s.sigmas.resize(alpha_bar.size());
    for (std::size_t t = 0; t < alpha_bar.size(); ++t) {
        s.alphas[t] = std::sqrt(alpha_bar[t]);
        s.sigmas[t] = std::sqrt(1.0 - alpha_bar[t]);
    }
    s.alphas[0] = 1.0;
    s.sigmas[0] = 0.0;
    return s;
}

inline NoiseSchedule make_schedule(int T, ScheduleKind kind) {
    require(T >= 2, ErrorKind::invalid_argument, "schedule needs T >= 2, got " + std::to_string(T));
    std::vector<double> betas(static_cast<std::size_t>(T));
    if (kind == ScheduleKind::linear_beta) {
        const double scale = 1000.0 / T;
        const double lo = kBetaStart * scale, hi = kBetaEnd * scale;
        for (int i = 0; i < T; ++i) {
            const double b = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(T - 1);
            betas[static_cast<std::size_t>(i)] = std::min(b, kMaxBeta);
        }
    } else {
        auto f = [T](double t) {
            const double x = (t / T + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0;
            return std::cos(x) * std::cos(x);
        };
        for (int i = 0; i < T; ++i) {
            const double b = 1.0 - f(i + 1) / f(i);
            betas[static_cast<std::size_t>(i)] = std::clamp(b, 1e-12, kMaxBeta);
        }
    }
    std::vector<double> alpha_bar(static_cast<std::size_t>(T) + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        alpha_bar[static_cast<std::size_t>(t)] =
            alpha_bar[static_cast<std::size_t>(t - 1)] * (1.0 - betas[static_cast<std::size_t>(t - 1)]);
    }
    return schedule_from_alpha_bar(alpha_bar);
}

inline void check_timestep(const NoiseSchedule& sched, int t, int lo) {
    require(t >= lo && t <= sched.T, ErrorKind::invalid_argument,
            "timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " + std::to_string(sched.T) + "]");
}

/// z_t = alpha_t z0 + sigma_t eps.
inline Matrix diffuse(const Matrix& z0, int t, const Matrix& eps, const NoiseSchedule& sched) {
    check_timestep(sched, t, 0);
    require(z0.rows() == eps.rows() && z0.cols() == eps.cols(), ErrorKind::invalid_argument,
            "diffuse: noise shape does not match latent shape");
    return sched.alpha(t) * z0 + sched.sigma(t) * eps;
}

enum class SamplerMode {
    /// Injects sigma_t * fresh noise after every update (no noise on the last step).
    stochastic_paper,
    /// Plain DDIM: re-noises with the model's own prediction at level sigma_{t-1}.
    deterministic,
};

inline SamplerMode parse_sampler_mode(const std::string& s) {
    if (s == "stochastic-paper" || s == "stochastic") return SamplerMode::stochastic_paper;
    if (s == "deterministic") return SamplerMode::deterministic;
    throw Error(ErrorKind::invalid_argument, "unknown sampler mode '" + s + "'");
}

inline std::string to_string(SamplerMode m) {
    return m == SamplerMode::deterministic ? "deterministic" : "stochastic-paper";
}

/// Reverse update from t to an arbitrary earlier timestep t_prev (strided sampling).
inline Matrix ddim_transition(const Matrix& z_t, const Matrix& eps_hat, int t, int t_prev,
                              const NoiseSchedule& sched, SamplerMode mode, Rng& rng) {
    check_timestep(sched, t, 1);
    require(t_prev >= 0 && t_prev < t, ErrorKind::invalid_argument, "t_prev must lie in [0, t)");
    require(z_t.rows() == eps_hat.rows() && z_t.cols() == eps_hat.cols(), ErrorKind::invalid_argument,
            "ddim step: prediction shape does not match latent shape");
    const double a_t = sched.alpha(t);
    require(a_t > 0.0, ErrorKind::numeric_degenerate, "alpha_t is zero at t=" + std::to_string(t));
    const double a_prev = sched.alpha(t_prev);
    Matrix z0_hat = (z_t - sched.sigma(t) * eps_hat) / a_t;
    if (mode == SamplerMode::deterministic) {
        return a_prev * z0_hat + sched.sigma(t_prev) * eps_hat;
    }
    Matrix out = a_prev * z0_hat;
    if (t_prev > 0) out += sched.sigma(t) * rng.normal_matrix(z_t.rows(), z_t.cols());
    return out;
}

inline Matrix ddim_step(const Matrix& z_t, const Matrix& eps_hat, int t, const NoiseSchedule& sched,
                        SamplerMode mode, Rng& rng) {
    return ddim_transition(z_t, eps_hat, t, t - 1, sched, mode, rng);
}

/// T' = round(s T) clamped to [1, T-1].
inline int strength_to_timestep(double s, int T) {
    require(s > 0.0 && s < 1.0, ErrorKind::invalid_argument, "strength must lie in (0, 1)");
    const long t = std::lround(s * T);
    return static_cast<int>(std::clamp<long>(t, 1, T - 1));
}

/// Descending visiting order start, ..., 1. With steps >= start every integer
/// timestep is walked; fewer steps give an evenly strided subsequence.
inline std::vector<int> timestep_sequence(int start, int steps) {
    std::vector<int> seq;
    if (steps <= 0 || steps >= start) {
        for (int t = start; t >= 1; --t) seq.push_back(t);
        return seq;
    }
    for (int i = 0; i < steps; ++i) {
        const double frac = static_cast<double>(i) / steps;
        const int t = static_cast<int>(std::lround(start - frac * (start - 1)));
        if (seq.empty() || t < seq.back()) seq.push_back(t);
    }
    if (seq.back() != 1) seq.push_back(1);
    return seq;
}

}  // namespace minidiff
