#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "minidiff/autograd.hpp"
#include "minidiff/error.hpp"
#include "minidiff/nets/layers.hpp"
#include "minidiff/random.hpp"

namespace minidiff {

struct DenoiserConfig {
    int latent_size = 16;
    int latent_channels = 2;
    /// Channels at full latent resolution; the half-resolution level uses twice this.
    int width = 16;
    /// Width of the joint timestep/text embedding injected into every residual block.
    int embed_dim = 64;
    Index cond_dim = 32;
    int time_dim = 32;
    int timesteps = 1000;
};

/// Sinusoidal timestep features; t is rescaled to a 0..1000 range first so the
/// frequencies suit any chain length.
inline Matrix timestep_embedding(int t, int T, int dim) {
    Matrix e(1, dim);
    const double pos = 1000.0 * t / T;
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        e(0, i) = std::sin(pos * freq);
        e(0, half + i) = std::cos(pos * freq);
    }
    return e;
}

/// x + conv(silu(ln(conv(silu(ln(x)))) + emb)), per-pixel layer norm over channels.
struct ResBlock {
    LayerNorm ln1, ln2;
    Conv2d conv1, conv2;
    Dense emb;

    ResBlock() = default;
    ResBlock(int size, int channels, int embed_dim, Rng& rng)
        : ln1(channels), ln2(channels), conv1(size, size, channels, channels, 1, rng),
          conv2(size, size, channels, channels, 1, rng), emb(embed_dim, channels, rng) {
        conv2.linear.weight.value *= 0.1;
    }

    Var forward(Tape& t, Var x, Var e) const {
        Var h = conv1.forward(t, ops::silu(ln1.forward(t, x)));
        h = ops::add_row(h, emb.forward(t, e));
        h = conv2.forward(t, ops::silu(ln2.forward(t, h)));
        return x + h;
    }

    template <class Self, class F>
    static void visit_dense(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".conv1", self.conv1.linear);
        f(prefix + ".conv2", self.conv2.linear);
        f(prefix + ".emb", self.emb);
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        LayerNorm::visit(self.ln1, prefix + ".ln1", f);
        LayerNorm::visit(self.ln2, prefix + ".ln2", f);
        visit_dense(self, prefix, [&](const std::string& name, auto& dense) { Dense::visit(dense, name, f); });
    }
};

/// Noise-prediction network eps_theta(z_t; c, t): a two-level convolutional
/// U-Net over the latent grid with a self-attention block at half resolution.
/// The timestep and text embeddings are summed into one vector that biases
/// every residual block.
class Denoiser {
public:
    Denoiser() = default;
    Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
        require(cfg.latent_size % 2 == 0 && cfg.latent_size >= 4, ErrorKind::invalid_argument,
                "latent size must be even and at least 4");
        require(cfg.width >= 1 && cfg.embed_dim >= 1 && cfg.time_dim % 2 == 0, ErrorKind::invalid_argument,
                "invalid denoiser widths");
        const int s = cfg.latent_size, h = s / 2, c = cfg.width;
        conv_in_ = Conv2d(s, s, cfg.latent_channels, c, 1, rng);
        time1_ = Dense(cfg.time_dim, cfg.embed_dim, rng);
        time2_ = Dense(cfg.embed_dim, cfg.embed_dim, rng);
        cond_ = Dense(cfg.cond_dim, cfg.embed_dim, rng);
        res_hi_ = ResBlock(s, c, cfg.embed_dim, rng);
        down_ = Conv2d(s, s, c, 2 * c, 2, rng);
        res_lo_ = ResBlock(h, 2 * c, cfg.embed_dim, rng);
        mid_ = TransformerBlock(2 * c, 4 * c, rng);
        up_ = Conv2d(s, s, 2 * c, c, 1, rng);
        res_out_ = ResBlock(s, c, cfg.embed_dim, rng);
        ln_out_ = LayerNorm(c);
        conv_out_ = Conv2d(s, s, c, cfg.latent_channels, 1, rng);
        conv_out_.linear.weight.value *= 0.1;
        upsample_ = layout::upsample2(h, h, 2 * c);
    }

    const DenoiserConfig& config() const { return cfg_; }
    Index positions() const { return static_cast<Index>(cfg_.latent_size) * cfg_.latent_size; }

    Var forward(Tape& t, Var z, int step, Var cond) const {
        require(step >= 1 && step <= cfg_.timesteps, ErrorKind::invalid_argument,
                "timestep " + std::to_string(step) + " outside [1, " + std::to_string(cfg_.timesteps) + "]");
        require(z.rows() == positions() && z.cols() == cfg_.latent_channels, ErrorKind::invalid_argument,
                "latent shape does not match the denoiser configuration");
        require(cond.rows() == 1 && cond.cols() == cfg_.cond_dim, ErrorKind::invalid_argument,
                "conditioning vector width mismatch");
        Var temb = time2_.forward(
            t, ops::silu(time1_.forward(t, t.constant(timestep_embedding(step, cfg_.timesteps, cfg_.time_dim)))));
        Var e = ops::silu(temb + cond_.forward(t, cond));
        Var hi = res_hi_.forward(t, conv_in_.forward(t, z), e);
        Var lo = res_lo_.forward(t, down_.forward(t, hi), e);
        lo = mid_.forward(t, lo);
        Var up = ops::gather(lo, positions(), 2 * cfg_.width, upsample_);
        Var h = res_out_.forward(t, up_.forward(t, up) + hi, e);
        return conv_out_.forward(t, ops::silu(ln_out_.forward(t, h)));
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        visit_dense(self, prefix, [&](const std::string& name, auto& dense) { Dense::visit(dense, name, f); });
        for (auto [name, block] : {std::pair{".res_hi", &self.res_hi_}, std::pair{".res_lo", &self.res_lo_},
                                   std::pair{".res_out", &self.res_out_}}) {
            LayerNorm::visit(block->ln1, prefix + name + ".ln1", f);
            LayerNorm::visit(block->ln2, prefix + name + ".ln2", f);
        }
        LayerNorm::visit(self.mid_.ln1, prefix + ".mid.ln1", f);
        LayerNorm::visit(self.mid_.ln2, prefix + ".mid.ln2", f);
        LayerNorm::visit(self.ln_out_, prefix + ".ln_out", f);
    }

    template <class Self, class F>
    static void visit_dense(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".conv_in", self.conv_in_.linear);
        f(prefix + ".time1", self.time1_);
        f(prefix + ".time2", self.time2_);
        f(prefix + ".cond", self.cond_);
        ResBlock::visit_dense(self.res_hi_, prefix + ".res_hi", f);
        f(prefix + ".down", self.down_.linear);
        ResBlock::visit_dense(self.res_lo_, prefix + ".res_lo", f);
        TransformerBlock::visit_dense(self.mid_, prefix + ".mid", f);
        f(prefix + ".up", self.up_.linear);
        ResBlock::visit_dense(self.res_out_, prefix + ".res_out", f);
        f(prefix + ".conv_out", self.conv_out_.linear);
    }

private:
    DenoiserConfig cfg_;
    Conv2d conv_in_;
    Dense time1_, time2_, cond_;
    ResBlock res_hi_;
    Conv2d down_;
    ResBlock res_lo_;
    TransformerBlock mid_;
    Conv2d up_;
    ResBlock res_out_;
    LayerNorm ln_out_;
    Conv2d conv_out_;
    ops::GatherIndex upsample_;
};

}  // namespace minidiff
