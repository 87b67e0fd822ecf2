#pragma once

// Frechet distance between Gaussian fits of real and generated feature sets.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "minidiff/classifier.hpp"
#include "minidiff/error.hpp"
#include "minidiff/image.hpp"

namespace minidiff {

enum class FeatureExtractor { probe_net, downsampled_pixels };

inline FeatureExtractor parse_feature_extractor(const std::string& s) {
    if (s == "trained-probe-net" || s == "probe-net" || s == "probe") return FeatureExtractor::probe_net;
    if (s == "downsampled-pixels" || s == "pixels") return FeatureExtractor::downsampled_pixels;
    throw Error(ErrorKind::invalid_argument, "unknown feature extractor '" + s + "'");
}

inline std::string to_string(FeatureExtractor e) {
    return e == FeatureExtractor::probe_net ? "trained-probe-net" : "downsampled-pixels";
}

inline constexpr int kPooledSide = 8;

/// 8x8 average pooling (bilinear resampling when the side is not a multiple of 8), flattened row-major.
inline Eigen::RowVectorXd pooled_pixels(const Image& img) {
    Image small(kPooledSide, kPooledSide);
    if (img.rows() % kPooledSide == 0 && img.cols() % kPooledSide == 0) {
        const Index by = img.rows() / kPooledSide, bx = img.cols() / kPooledSide;
        for (int y = 0; y < kPooledSide; ++y)
            for (int x = 0; x < kPooledSide; ++x) small(y, x) = img.block(y * by, x * bx, by, bx).mean();
    } else {
        small = resize_bilinear(img, kPooledSide, kPooledSide);
    }
    Eigen::RowVectorXd out(kPooledSide * kPooledSide);
    for (int y = 0; y < kPooledSide; ++y)
        for (int x = 0; x < kPooledSide; ++x) out(y * kPooledSide + x) = small(y, x);
    return out;
}

/// Feature source for FID; the probe variant borrows a trained classifier's
/// penultimate layer.
class FeatureModel {
public:
    FeatureModel() = default;
    explicit FeatureModel(Classifier probe) : kind_(FeatureExtractor::probe_net), probe_(std::move(probe)) {}

    FeatureExtractor kind() const { return kind_; }
    int dim() const { return kind_ == FeatureExtractor::probe_net ? probe_.config().feature_dim() : kPooledSide * kPooledSide; }

    Eigen::RowVectorXd operator()(const Image& img) const {
        if (kind_ == FeatureExtractor::downsampled_pixels) return pooled_pixels(img);
        return probe_.features(img).row(0);
    }

private:
    FeatureExtractor kind_ = FeatureExtractor::downsampled_pixels;
    Classifier probe_;
};

/// n x F matrix, one row per image.
inline Matrix extract_features(std::span<const Image> images, const FeatureModel& extractor) {
    require(!images.empty(), ErrorKind::invalid_argument, "feature extraction needs at least one image");
    Matrix out(static_cast<Index>(images.size()), extractor.dim());
    for (std::size_t i = 0; i < images.size(); ++i) out.row(static_cast<Index>(i)) = extractor(images[i]);
    return out;
}

struct GaussianStats {
    Eigen::VectorXd mu;
    Matrix cov;
    Index n = 0;
};

/// Column mean and unbiased (n - 1) covariance, symmetrized.
inline GaussianStats gaussian_stats(const Matrix& features) {
    require(features.rows() >= 2, ErrorKind::insufficient_samples,
            "Gaussian statistics need at least 2 samples, got " + std::to_string(features.rows()));
    GaussianStats s;
    s.n = features.rows();
    s.mu = features.colwise().mean().transpose();
    const Matrix centered = features.rowwise() - s.mu.transpose();
    const Matrix cov = (centered.transpose() * centered) / static_cast<double>(s.n - 1);
    s.cov = 0.5 * (cov + cov.transpose());
    return s;
}

namespace detail {

/// Symmetric PSD square root; eigenvalues below -tol (relative) are rejected, the rest clamped at 0.
inline Matrix psd_sqrt(const Matrix& a, double tol) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
    require(es.info() == Eigen::Success, ErrorKind::numeric_degenerate, "eigen-decomposition failed");
    const Eigen::VectorXd& ev = es.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    require(ev.minCoeff() >= -tol * scale, ErrorKind::numeric_degenerate, "covariance is not positive semidefinite");
    return es.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ||mu_r - mu_g||^2 + Tr(C_r + C_g - 2 (C_r C_g)^{1/2}), with
/// Tr (C_r C_g)^{1/2} = Tr (sqrt(C_r) C_g sqrt(C_r))^{1/2}.
inline double fid(const GaussianStats& real, const GaussianStats& gen, double psd_tol = 1e-6) {
    require(real.mu.size() == gen.mu.size() && real.cov.rows() == gen.cov.rows(), ErrorKind::invalid_argument,
            "FID: feature dimensions differ (" + std::to_string(real.mu.size()) + " vs " +
                std::to_string(gen.mu.size()) + ")");
    const Matrix sr = detail::psd_sqrt(real.cov, psd_tol);
    detail::psd_sqrt(gen.cov, psd_tol);
    const Matrix inner = sr * gen.cov * sr;
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    require(es.info() == Eigen::Success, ErrorKind::numeric_degenerate, "eigen-decomposition failed");
    const Eigen::VectorXd& ev = es.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    require(ev.minCoeff() >= -psd_tol * scale, ErrorKind::numeric_degenerate, "covariance product is not PSD");
    const double tr_sqrt = ev.cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (real.mu - gen.mu).squaredNorm() + real.cov.trace() + gen.cov.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, d);
}

inline double fid(std::span<const Image> real, std::span<const Image> gen, const FeatureModel& extractor) {
    return fid(gaussian_stats(extract_features(real, extractor)), gaussian_stats(extract_features(gen, extractor)));
}

struct FidRow {
    std::string label;
    std::string extractor;
    Index n_real = 0;
    Index n_gen = 0;
    double fid = 0.0;
};

inline void write_fid_csv(const std::vector<FidRow>& rows, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    require(out.good(), ErrorKind::io_error, "cannot write " + path.string());
    out << "class,extractor,n_real,n_gen,fid\n";
    out.precision(10);
    for (const FidRow& r : rows) out << r.label << ',' << r.extractor << ',' << r.n_real << ',' << r.n_gen << ',' << r.fid << '\n';
}

}  // namespace minidiff
