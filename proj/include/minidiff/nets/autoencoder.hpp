#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "minidiff/autograd.hpp"
#include "minidiff/error.hpp"
#include "minidiff/image.hpp"
#include "minidiff/nets/layers.hpp"
#include "minidiff/optim.hpp"
#include "minidiff/random.hpp"

namespace minidiff {

struct AutoencoderConfig {
    int image_size = 32;
    /// Spatial down-sampling factor f (power of two). f = 1 selects identity
    /// pixel-space mode where E and D are the identity.
    int factor = 2;
    int latent_channels = 2;
    int width = 12;

    bool identity() const { return factor == 1; }
    int latent_size() const { return image_size / factor; }
    int latent_channels_effective() const { return identity() ? 1 : latent_channels; }
};

/// Latent code: (h/f * w/f) x c_lat, row index y*(w/f) + x.
using LatentCode = Matrix;

/// Tiny convolutional auto-encoder E/D with a fixed affine latent normalization
/// (shift, scale) so latents are roughly unit-variance for the diffusion model.
class Autoencoder {
public:
    Autoencoder() = default;
    Autoencoder(const AutoencoderConfig& cfg, Rng& rng) : cfg_(cfg) {
        require(cfg.factor >= 1 && (cfg.factor & (cfg.factor - 1)) == 0 && cfg.image_size % cfg.factor == 0,
                ErrorKind::invalid_argument, "auto-encoder factor must be a power of two dividing the image size");
        latent_shift_ = Parameter(Matrix::Zero(1, 1));
        latent_scale_ = Parameter(Matrix::Ones(1, 1));
        if (cfg.identity()) return;
        int size = cfg.image_size;
        enc_.emplace_back(size, size, 1, cfg.width, 1, rng);
        for (int f = cfg.factor; f > 1; f /= 2) {
            enc_.emplace_back(size, size, cfg.width, cfg.width, 2, rng);
            size /= 2;
        }
        enc_.emplace_back(size, size, cfg.width, cfg.latent_channels, 1, rng);
        dec_.emplace_back(size, size, cfg.latent_channels, cfg.width, 1, rng);
        for (int f = cfg.factor; f > 1; f /= 2) {
            ups_.push_back(layout::upsample2(size, size, cfg.width));
            size *= 2;
            dec_.emplace_back(size, size, cfg.width, cfg.width, 1, rng);
        }
        dec_.emplace_back(size, size, cfg.width, 1, 1, rng);
    }

    const AutoencoderConfig& config() const { return cfg_; }
    int latent_size() const { return cfg_.latent_size(); }
    int latent_channels() const { return cfg_.latent_channels_effective(); }
    Index latent_dim() const { return static_cast<Index>(latent_size()) * latent_size() * latent_channels(); }

    /// Raw encoder on a (H*W) x 1 feature map, before latent normalization.
    Var encode_raw(Tape& t, Var x) const {
        if (cfg_.identity()) return x;
        Var h = x;
        for (std::size_t i = 0; i + 1 < enc_.size(); ++i) h = ops::silu(enc_[i].forward(t, h));
        return enc_.back().forward(t, h);
    }

    /// Raw decoder output (unclamped) as a (H*W) x 1 feature map.
    Var decode_raw(Tape& t, Var z) const {
        if (cfg_.identity()) return z;
        Var h = ops::silu(dec_[0].forward(t, z));
        for (std::size_t i = 0; i < ups_.size(); ++i) {
            const int size = dec_[i + 1].in_height;
            h = ops::gather(h, static_cast<Index>(size) * size, cfg_.width, ups_[i]);
            h = ops::silu(dec_[i + 1].forward(t, h));
        }
        return dec_.back().forward(t, h);
    }

    void check_image(const Image& x) const {
        require(x.rows() == cfg_.image_size && x.cols() == cfg_.image_size, ErrorKind::invalid_argument,
                "expected a " + std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) + " image, got " +
                    std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
    }

    LatentCode encode(const Image& x) const {
        check_image(x);
        Tape t;
        Var raw = encode_raw(t, t.constant(to_feature_map(x)));
        return (raw.value().array() - shift()) * scale();
    }

    Image decode(const LatentCode& z) const {
        require(z.rows() == static_cast<Index>(latent_size()) * latent_size() && z.cols() == latent_channels(),
                ErrorKind::invalid_argument, "latent code has the wrong shape");
        Tape t;
        Matrix unscaled = (z.array() / scale() + shift()).matrix();
        Var out = decode_raw(t, t.constant(std::move(unscaled)));
        return from_feature_map(out.value(), cfg_.image_size, cfg_.image_size).cwiseMax(0.0).cwiseMin(1.0);
    }

    std::vector<LatentCode> encode_batch(std::span<const Image> xs) const {
        std::vector<LatentCode> out;
        out.reserve(xs.size());
        for (const Image& x : xs) out.push_back(encode(x));
        return out;
    }

    double shift() const { return latent_shift_.value(0, 0); }
    double scale() const { return latent_scale_.value(0, 0); }

    /// Sets (shift, scale) so the encoded training set has zero mean, unit variance.
    void calibrate_latents(std::span<const Image> xs) {
        if (cfg_.identity() || xs.empty()) return;
        double s = 0.0, s2 = 0.0, n = 0.0;
        for (const Image& x : xs) {
            Tape t;
            const Matrix& raw = encode_raw(t, t.constant(to_feature_map(x))).value();
            s += raw.sum();
            s2 += raw.squaredNorm();
            n += static_cast<double>(raw.size());
        }
        const double mean = s / n;
        const double var = std::max(s2 / n - mean * mean, 1e-12);
        latent_shift_.value(0, 0) = mean;
        latent_scale_.value(0, 0) = 1.0 / std::sqrt(var);
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".latent_shift", self.latent_shift_);
        f(prefix + ".latent_scale", self.latent_scale_);
        for (std::size_t i = 0; i < self.enc_.size(); ++i) Conv2d::visit(self.enc_[i], prefix + ".enc" + std::to_string(i), f);
        for (std::size_t i = 0; i < self.dec_.size(); ++i) Conv2d::visit(self.dec_[i], prefix + ".dec" + std::to_string(i), f);
    }

    /// Trainable conv parameters (excludes the latent normalization).
    std::vector<Parameter*> conv_parameters() {
        std::vector<Parameter*> out;
        visit(*this, "ae", [&](const std::string& name, Parameter& p) {
            if (name.find("latent_") == std::string::npos) out.push_back(&p);
        });
        return out;
    }

private:
    AutoencoderConfig cfg_;
    std::vector<Conv2d> enc_;
    std::vector<Conv2d> dec_;
    std::vector<ops::GatherIndex> ups_;
    Parameter latent_shift_;
    Parameter latent_scale_;
};

struct AutoencoderTraining {
    int epochs = 30;
    int batch_size = 8;
    double lr = 2e-3;
};

/// Reconstruction (MSE) training of E/D followed by latent calibration.
/// Returns the final mean per-pixel reconstruction error over `images`.
inline double train_autoencoder(Autoencoder& ae, std::span<const Image> images, const AutoencoderTraining& opt,
                                Rng& rng) {
    require(!images.empty(), ErrorKind::invalid_argument, "auto-encoder training needs images");
    if (ae.config().identity()) return 0.0;
    std::vector<Parameter*> params = ae.conv_parameters();
    for (Parameter* p : params) p->trainable = true;
    Adam adam(params, {.lr = opt.lr});
    std::vector<std::size_t> order(images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const double pixels = static_cast<double>(images[0].size());
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        // cosine decay keeps the final epochs from oscillating
        adam.set_lr(opt.lr * 0.5 * (1.0 + std::cos(3.141592653589793 * epoch / std::max(1, opt.epochs))));
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
            for (std::size_t i = start; i < end; ++i) {
                Tape t;
                const Matrix target = to_feature_map(images[order[i]]);
                Var out = ae.decode_raw(t, ae.encode_raw(t, t.constant(target)));
                Var loss = ops::scale(ops::squared_error(out, target), 1.0 / (pixels * static_cast<double>(end - start)));
                t.backward(loss);
            }
            adam.step();
        }
    }
    for (Parameter* p : params) p->trainable = false;
    ae.calibrate_latents(images);
    double total = 0.0;
    for (const Image& x : images) total += mse(ae.decode(ae.encode(x)), x);
    return total / static_cast<double>(images.size());
}

}  // namespace minidiff
