#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "minidiff/autograd.hpp"
#include "minidiff/error.hpp"

namespace minidiff {

/// Single-channel image, rows = height, values in [0, 1].
using Image = Matrix;

/// (H*W) x 1 column with row index y*W + x, the layout conv layers expect.
inline Matrix to_feature_map(const Image& img) {
    Matrix tr = img.transpose();
    return Eigen::Map<const Matrix>(tr.data(), img.size(), 1);
}

inline Image from_feature_map(const Matrix& column, int height, int width) {
    Matrix tr = Eigen::Map<const Matrix>(column.data(), width, height);
    return tr.transpose();
}

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(img.size()));
    for (Index y = 0; y < img.rows(); ++y)
        for (Index x = 0; x < img.cols(); ++x) buf[static_cast<std::size_t>(y * img.cols() + x)] = to_byte(img(y, x));
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(img.cols());
    png.height = static_cast<png_uint_32>(img.rows());
    png.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr)) {
        throw Error(ErrorKind::io_error, "cannot write PNG " + path.string() + ": " + png.message);
    }
}

/// Decodes any PNG and converts it to grayscale in [0, 1].
inline Image read_png(const std::filesystem::path& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str())) {
        throw Error(ErrorKind::io_error, "cannot decode " + path.string() + ": " + png.message);
    }
    png.format = PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        throw Error(ErrorKind::io_error, "cannot decode " + path.string() + ": " + msg);
    }
    Image img(png.height, png.width);
    for (Index y = 0; y < img.rows(); ++y)
        for (Index x = 0; x < img.cols(); ++x) img(y, x) = buf[static_cast<std::size_t>(y * img.cols() + x)] / 255.0;
    return img;
}

/// Bilinear sample with edge replication.
inline double sample_bilinear(const Image& img, double y, double x) {
    const double yc = std::clamp(y, 0.0, static_cast<double>(img.rows() - 1));
    const double xc = std::clamp(x, 0.0, static_cast<double>(img.cols() - 1));
    const Index y0 = static_cast<Index>(std::floor(yc)), x0 = static_cast<Index>(std::floor(xc));
    const Index y1 = std::min(y0 + 1, img.rows() - 1), x1 = std::min(x0 + 1, img.cols() - 1);
    const double fy = yc - static_cast<double>(y0), fx = xc - static_cast<double>(x0);
    if (fy == 0.0 && fx == 0.0) return img(y0, x0);
    const double top = img(y0, x0) * (1.0 - fx) + img(y0, x1) * fx;
    const double bottom = img(y1, x0) * (1.0 - fx) + img(y1, x1) * fx;
    return top * (1.0 - fy) + bottom * fy;
}

inline Image resize_bilinear(const Image& img, int height, int width) {
    if (img.rows() == height && img.cols() == width) return img;
    Image out(height, width);
    const double sy = static_cast<double>(img.rows()) / height, sx = static_cast<double>(img.cols()) / width;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) out(y, x) = sample_bilinear(img, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5);
    return out;
}

/// Otsu's between-class-variance threshold on a 256-bin histogram; returns a value in [0, 1].
inline double otsu_threshold(const Image& img) {
    std::array<double, 256> hist{};
    for (Index i = 0; i < img.size(); ++i) hist[to_byte(img.data()[i])] += 1.0;
    const double total = static_cast<double>(img.size());
    double sum_all = 0.0;
    for (int i = 0; i < 256; ++i) sum_all += i * hist[static_cast<std::size_t>(i)];
    double w0 = 0.0, sum0 = 0.0, best = -1.0;
    int best_t = 0;
    for (int t = 0; t < 256; ++t) {
        w0 += hist[static_cast<std::size_t>(t)];
        if (w0 == 0.0) continue;
        const double w1 = total - w0;
        if (w1 == 0.0) break;
        sum0 += t * hist[static_cast<std::size_t>(t)];
        const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_t = t;
        }
    }
    return (best_t + 0.5) / 255.0;
}

inline double mse(const Image& a, const Image& b) { return (a - b).squaredNorm() / static_cast<double>(a.size()); }

}  // namespace minidiff
