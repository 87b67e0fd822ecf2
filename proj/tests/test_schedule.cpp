#include <cmath>

#include <gtest/gtest.h>

#include "minidiff/schedule.hpp"
#include "support.hpp"

using namespace minidiff;
using minidiff::testing::gaussian_oracle_eps;

namespace {

// Independent oracle: sqrt(prod(1 - beta_i)) for the linear range, long double.
long double alpha_terminal_oracle(int T) {
    const long double scale = 1000.0L / T;
    long double prod = 1.0L;
    for (int i = 0; i < T; ++i) {
        const long double b = (1e-4L + (0.02L - 1e-4L) * i / (T - 1)) * scale;
        prod *= 1.0L - b;
    }
    return std::sqrt(prod);
}

}  // namespace

TEST(Schedule, VariancePreservingEverywhere) {
    for (ScheduleKind kind : {ScheduleKind::linear_beta, ScheduleKind::cosine})
        for (int T : {2, 3, 10, 200, 1000}) {
            const NoiseSchedule s = make_schedule(T, kind);
            ASSERT_EQ(s.alphas.size(), static_cast<std::size_t>(T) + 1);
            for (int t = 0; t <= T; ++t) EXPECT_NEAR(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t), 1.0, 1e-9);
        }
}

TEST(Schedule, BoundaryAndMonotonicity) {
    for (ScheduleKind kind : {ScheduleKind::linear_beta, ScheduleKind::cosine})
        for (int T : {2, 50, 1000}) {
            const NoiseSchedule s = make_schedule(T, kind);
            EXPECT_EQ(s.alpha(0), 1.0);
            EXPECT_EQ(s.sigma(0), 0.0);
            for (int t = 1; t <= T; ++t) {
                EXPECT_LT(s.alpha(t), s.alpha(t - 1)) << "t=" << t;
                EXPECT_GT(s.sigma(t), s.sigma(t - 1)) << "t=" << t;
            }
            EXPECT_LE(s.alpha(T), 0.05);
        }
}

TEST(Schedule, TerminalAlphaPinned) {
    const NoiseSchedule s = make_schedule(1000, ScheduleKind::linear_beta);
    EXPECT_NEAR(s.alpha(1000), static_cast<double>(alpha_terminal_oracle(1000)), 1e-12);
    // frozen from a 40-digit evaluation of the same product
    EXPECT_NEAR(s.alpha(1000), 0.0063528180875700221, 1e-12);
    EXPECT_LT(s.alpha(1000), 0.05);
    const NoiseSchedule s200 = make_schedule(200, ScheduleKind::linear_beta);
    EXPECT_NEAR(s200.alpha(200), 0.0055062120983775283, 1e-12);
}

TEST(Schedule, RejectsShortChains) {
    EXPECT_THROW(make_schedule(1, ScheduleKind::linear_beta), Error);
    try {
        make_schedule(0, ScheduleKind::cosine);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
    }
}

TEST(Schedule, Deterministic) {
    const NoiseSchedule a = make_schedule(300, ScheduleKind::cosine), b = make_schedule(300, ScheduleKind::cosine);
    EXPECT_EQ(a.alphas, b.alphas);
    EXPECT_EQ(a.sigmas, b.sigmas);
}

TEST(Diffuse, ClosedForms) {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::linear_beta);
    Rng rng(1);
    const Matrix z0 = rng.normal_matrix(5, 3), eps = rng.normal_matrix(5, 3);
    EXPECT_EQ(diffuse(z0, 0, eps, s), z0);
    const Matrix zero = Matrix::Zero(5, 3);
    EXPECT_EQ(diffuse(zero, 37, eps, s), (s.sigma(37) * eps).eval());
    EXPECT_EQ(diffuse(z0, 37, eps, s), (s.alpha(37) * z0 + s.sigma(37) * eps).eval());
    EXPECT_THROW(diffuse(z0, 37, rng.normal_matrix(5, 2), s), Error);
    EXPECT_THROW(diffuse(z0, 101, eps, s), Error);
}

TEST(Diffuse, TerminalVarianceNearOne) {
    const NoiseSchedule s = make_schedule(1000, ScheduleKind::linear_beta);
    Rng rng(2);
    const Matrix z0 = rng.normal_matrix(1, 100000), eps = rng.normal_matrix(1, 100000);
    const Matrix zt = diffuse(z0, 1000, eps, s);
    const double mean = zt.mean();
    const double var = (zt.array() - mean).square().sum() / (zt.size() - 1);
    EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Ddim, OneStepConsistency) {
    for (ScheduleKind kind : {ScheduleKind::linear_beta, ScheduleKind::cosine}) {
        const NoiseSchedule s = make_schedule(1000, kind);
        Rng rng(3);
        const Matrix z0 = rng.normal_matrix(8, 2), eps = rng.normal_matrix(8, 2);
        for (int t : {1, 2, 10, 500, 999}) {
            const Matrix out = ddim_step(diffuse(z0, t, eps, s), eps, t, s, SamplerMode::deterministic, rng);
            EXPECT_LT((out - diffuse(z0, t - 1, eps, s)).cwiseAbs().maxCoeff(), 1e-12) << "t=" << t;
        }
    }
}

TEST(Ddim, FinalDeterministicStep) {
    const NoiseSchedule s = make_schedule(50, ScheduleKind::linear_beta);
    Rng rng(4);
    const Matrix z1 = rng.normal_matrix(4, 2), eh = rng.normal_matrix(4, 2);
    const Matrix out = ddim_step(z1, eh, 1, s, SamplerMode::deterministic, rng);
    EXPECT_LT((out - (z1 - s.sigma(1) * eh) / s.alpha(1)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Ddim, StochasticModeUpdate) {
    const NoiseSchedule s = make_schedule(50, ScheduleKind::linear_beta);
    Rng a(9), b(9), expect_rng(9);
    const Matrix z = Rng(5).normal_matrix(4, 2), eh = Rng(6).normal_matrix(4, 2);
    const Matrix out1 = ddim_step(z, eh, 20, s, SamplerMode::stochastic_paper, a);
    const Matrix out2 = ddim_step(z, eh, 20, s, SamplerMode::stochastic_paper, b);
    EXPECT_EQ(out1, out2);
    const Matrix fresh = expect_rng.normal_matrix(4, 2);
    const Matrix expect = s.alpha(19) * (z - s.sigma(20) * eh) / s.alpha(20) + s.sigma(20) * fresh;
    EXPECT_LT((out1 - expect).cwiseAbs().maxCoeff(), 1e-14);
    // no noise is injected on the last step
    Rng c(9);
    const Matrix last = ddim_step(z, eh, 1, s, SamplerMode::stochastic_paper, c);
    EXPECT_LT((last - (z - s.sigma(1) * eh) / s.alpha(1)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Ddim, Errors) {
    const NoiseSchedule s = make_schedule(10, ScheduleKind::linear_beta);
    Rng rng(0);
    const Matrix z = Matrix::Zero(2, 2);
    try {
        ddim_step(z, z, 0, s, SamplerMode::deterministic, rng);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
    }
    NoiseSchedule degenerate = s;
    degenerate.alphas[10] = 0.0;
    degenerate.sigmas[10] = 1.0;
    try {
        ddim_step(z, z, 10, degenerate, SamplerMode::deterministic, rng);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numeric_degenerate);
    }
}

TEST(Ddim, GaussianOracleChainMatchesTarget) {
    const double mu = 0.5, gamma = 0.5;
    const NoiseSchedule s = make_schedule(1000, ScheduleKind::linear_beta);
    Rng rng(11);
    // 10^4 independent scalar chains evaluated side by side
    Matrix z = rng.normal_matrix(1, 10000);
    for (int t = s.T; t >= 1; --t) z = ddim_step(z, gaussian_oracle_eps(z, t, s, mu, gamma), t, s, SamplerMode::deterministic, rng);
    const double mean = z.mean();
    const double var = (z.array() - mean).square().sum() / (z.size() - 1);
    EXPECT_NEAR(mean, mu, 0.05 * mu);
    EXPECT_NEAR(var, gamma * gamma, 0.05 * gamma * gamma);
}

TEST(Strength, Mapping) {
    EXPECT_EQ(strength_to_timestep(0.5, 1000), 500);
    EXPECT_EQ(strength_to_timestep(0.4, 1000), 400);
    EXPECT_EQ(strength_to_timestep(0.001, 100), 1);
    EXPECT_EQ(strength_to_timestep(0.999, 100), 99);
    EXPECT_THROW(strength_to_timestep(0.0, 100), Error);
    EXPECT_THROW(strength_to_timestep(1.0, 100), Error);
}

TEST(Strength, TimestepSequence) {
    EXPECT_EQ(timestep_sequence(4, 0), (std::vector<int>{4, 3, 2, 1}));
    const auto strided = timestep_sequence(100, 10);
    EXPECT_EQ(strided.front(), 100);
    EXPECT_EQ(strided.back(), 1);
    for (std::size_t i = 1; i < strided.size(); ++i) EXPECT_LT(strided[i], strided[i - 1]);
}
