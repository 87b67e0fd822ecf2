#include <cmath>
#include <complex>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "minidiff/metrics.hpp"
#include "minidiff/random.hpp"

using namespace minidiff;

namespace {

/// Independent route: Tr sqrt(C_r C_g) from the complex spectrum of the
/// non-symmetric product.
double fid_oracle(const Eigen::VectorXd& m1, const Matrix& c1, const Eigen::VectorXd& m2, const Matrix& c2) {
    Eigen::EigenSolver<Matrix> es(c1 * c2, false);
    std::complex<double> tr = 0.0;
    for (Index i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(es.eigenvalues()(i));
    return (m1 - m2).squaredNorm() + c1.trace() + c2.trace() - 2.0 * tr.real();
}

GaussianStats stats(const Eigen::VectorXd& mu, const Matrix& cov) {
    GaussianStats s;
    s.mu = mu;
    s.cov = cov;
    s.n = 100;
    return s;
}

Matrix random_spd(Index d, Rng& rng) {
    const Matrix a = rng.normal_matrix(d, d);
    return a * a.transpose() / static_cast<double>(d) + 0.1 * Matrix::Identity(d, d);
}

}  // namespace

TEST(Fid, IdenticalSetsScoreZero) {
    Rng rng(1);
    const Matrix f = rng.normal_matrix(50, 6);
    const GaussianStats s = gaussian_stats(f);
    EXPECT_NEAR(fid(s, s), 0.0, 1e-9);
}

TEST(Fid, OneDimensionalClosedForms) {
    // (mu1 - mu2)^2 + (s1 - s2)^2
    const auto one = [](double m1, double v1, double m2, double v2) {
        return fid(stats(Eigen::VectorXd::Constant(1, m1), Matrix::Constant(1, 1, v1)),
                   stats(Eigen::VectorXd::Constant(1, m2), Matrix::Constant(1, 1, v2)));
    };
    EXPECT_NEAR(one(0.0, 1.0, 1.0, 1.0), 1.0, 1e-12);
    EXPECT_NEAR(one(0.0, 1.0, 0.0, 4.0), 1.0, 1e-12);
    EXPECT_NEAR(one(2.0, 9.0, -1.0, 1.0), 9.0 + 4.0, 1e-12);
}

TEST(Fid, DiagonalCovariancesMatchClosedForm) {
    Rng rng(2);
    for (int k = 0; k < 100; ++k) {
        const Index d = 1 + k % 7;
        const Eigen::VectorXd m1 = rng.normal_matrix(d, 1), m2 = rng.normal_matrix(d, 1);
        const Eigen::VectorXd v1 = rng.normal_matrix(d, 1).array().square() + 0.01;
        const Eigen::VectorXd v2 = rng.normal_matrix(d, 1).array().square() + 0.01;
        const double expected = (m1 - m2).squaredNorm() + (v1.cwiseSqrt() - v2.cwiseSqrt()).squaredNorm();
        const double got = fid(stats(m1, v1.asDiagonal().toDenseMatrix()), stats(m2, v2.asDiagonal().toDenseMatrix()));
        EXPECT_NEAR(got, expected, 1e-9 * std::max(1.0, expected)) << k;
    }
}

TEST(Fid, FullCovariancesMatchSpectralOracleAndAreSymmetric) {
    Rng rng(3);
    for (int k = 0; k < 50; ++k) {
        const Index d = 2 + k % 6;
        const Eigen::VectorXd m1 = rng.normal_matrix(d, 1), m2 = rng.normal_matrix(d, 1);
        const Matrix c1 = random_spd(d, rng), c2 = random_spd(d, rng);
        const double a = fid(stats(m1, c1), stats(m2, c2));
        const double b = fid(stats(m2, c2), stats(m1, c1));
        EXPECT_NEAR(a, fid_oracle(m1, c1, m2, c2), 1e-8) << k;
        EXPECT_NEAR(a, b, 1e-9) << k;
        EXPECT_GE(a, 0.0);
    }
}

TEST(Fid, MonteCarloConvergesToPopulationValue) {
    Rng rng(4);
    const Index d = 3;
    const Eigen::VectorXd m1 = Eigen::VectorXd::Zero(d), m2 = Eigen::VectorXd::Constant(d, 0.5);
    const Matrix c1 = random_spd(d, rng), c2 = random_spd(d, rng);
    const Matrix l1 = c1.llt().matrixL(), l2 = c2.llt().matrixL();
    const Index n = 20000;
    const Matrix x1 = (rng.normal_matrix(n, d) * l1.transpose()).rowwise() + m1.transpose();
    const Matrix x2 = (rng.normal_matrix(n, d) * l2.transpose()).rowwise() + m2.transpose();
    const double population = fid_oracle(m1, c1, m2, c2);
    EXPECT_NEAR(fid(gaussian_stats(x1), gaussian_stats(x2)), population, 0.05 * population + 0.01);
}

TEST(GaussianStats, MatchesHandComputation) {
    Matrix f(3, 2);
    f << 1, 2,
         3, 6,
         5, 4;
    const GaussianStats s = gaussian_stats(f);
    EXPECT_DOUBLE_EQ(s.mu(0), 3.0);
    EXPECT_DOUBLE_EQ(s.mu(1), 4.0);
    // deviations (-2,-2), (0,2), (2,0); divide by n - 1 = 2
    EXPECT_DOUBLE_EQ(s.cov(0, 0), 4.0);
    EXPECT_DOUBLE_EQ(s.cov(1, 1), 4.0);
    EXPECT_DOUBLE_EQ(s.cov(0, 1), 2.0);
    EXPECT_DOUBLE_EQ(s.cov(1, 0), 2.0);
    EXPECT_EQ(s.n, 3);
}

TEST(Fid, ErrorConditions) {
    try {
        gaussian_stats(Matrix::Ones(1, 4));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::insufficient_samples);
    }
    const GaussianStats a = stats(Eigen::VectorXd::Zero(2), Matrix::Identity(2, 2));
    const GaussianStats b = stats(Eigen::VectorXd::Zero(3), Matrix::Identity(3, 3));
    EXPECT_THROW(fid(a, b), Error);
    Matrix bad = Matrix::Identity(2, 2);
    bad(1, 1) = -1.0;
    try {
        fid(a, stats(Eigen::VectorXd::Zero(2), bad));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numeric_degenerate);
    }
}

TEST(Fid, RankDeficientCovarianceIsAccepted) {
    // fewer samples than features: singular but PSD
    Rng rng(5);
    const GaussianStats s1 = gaussian_stats(rng.normal_matrix(4, 10));
    const GaussianStats s2 = gaussian_stats(rng.normal_matrix(4, 10));
    const double d = fid(s1, s2);
    EXPECT_TRUE(std::isfinite(d));
    EXPECT_GT(d, 0.0);
}

TEST(PixelFeatures, BlockMeansAndResampling) {
    Image img(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) img(y, x) = (y / 2) * 8 + (x / 2);
    const Eigen::RowVectorXd f = pooled_pixels(img);
    ASSERT_EQ(f.size(), 64);
    for (int i = 0; i < 64; ++i) EXPECT_DOUBLE_EQ(f(i), i);
    const Eigen::RowVectorXd c = pooled_pixels(Image::Constant(12, 12, 0.3));
    EXPECT_LT((c.array() - 0.3).abs().maxCoeff(), 1e-12);
    const FeatureModel pixels;
    EXPECT_EQ(pixels.kind(), FeatureExtractor::downsampled_pixels);
    EXPECT_EQ(pixels.dim(), 64);
}

TEST(PixelFeatures, FidOfImageSets) {
    Rng rng(6);
    std::vector<Image> a, b;
    for (int i = 0; i < 30; ++i) {
        a.push_back((rng.normal_matrix(16, 16).array() * 0.1 + 0.4).matrix());
        b.push_back((rng.normal_matrix(16, 16).array() * 0.1 + 0.6).matrix());
    }
    const FeatureModel pixels;
    EXPECT_NEAR(fid(a, a, pixels), 0.0, 1e-9);
    EXPECT_GT(fid(a, b, pixels), 64 * 0.2 * 0.2 * 0.5);
    EXPECT_THROW(parse_feature_extractor("inception"), Error);
    EXPECT_EQ(parse_feature_extractor("trained-probe-net"), FeatureExtractor::probe_net);
}
