#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "minidiff/autograd.hpp"
#include "minidiff/random.hpp"

namespace minidiff {

/// Low-rank delta for one dense layer: delta W = B A with A (r x k), B (d x r).
struct LoraWeights {
    Parameter A;
    Parameter B;
    Index rank() const { return A.value.rows(); }
};

/// y = x W^T + b over row-vector inputs, W is (out x in), i.e. d x k. When a
/// low-rank delta is attached the layer computes x W^T + (x A^T) B^T + b.
struct Dense {
    Parameter weight;
    Parameter bias;
    std::shared_ptr<LoraWeights> lora;

    Dense() = default;
    Dense(Index in, Index out, Rng& rng, double gain = 1.0)
        : weight(rng.normal_matrix(out, in) * (gain / std::sqrt(static_cast<double>(in)))),
          bias(Matrix::Zero(1, out)) {}

    Index in_features() const { return weight.value.cols(); }
    Index out_features() const { return weight.value.rows(); }

    Var forward(Tape& t, Var x) const {
        Var y = ops::add_row(ops::matmul_nt(x, t.param(weight)), t.param(bias));
        if (lora) y = y + ops::matmul_nt(ops::matmul_nt(x, t.param(lora->A)), t.param(lora->B));
        return y;
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".weight", self.weight);
        f(prefix + ".bias", self.bias);
    }
};

struct LayerNorm {
    Parameter gamma;
    Parameter beta;

    LayerNorm() = default;
    explicit LayerNorm(Index width) : gamma(Matrix::Ones(1, width)), beta(Matrix::Zero(1, width)) {}

    Var forward(Tape& t, Var x) const {
        return ops::add_row(ops::mul_row(ops::layer_norm_rows(x), t.param(gamma)), t.param(beta));
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".gamma", self.gamma);
        f(prefix + ".beta", self.beta);
    }
};

namespace layout {

// Feature maps are (H*W) x C matrices with row index y*W + x; Eigen storage is
// column-major, so element (row, c) sits at flat index c*H*W + row.

inline ops::GatherIndex im2col(int height, int width, int channels, int kernel, int stride) {
    const int pad = kernel / 2;
    const int ho = (height + stride - 1) / stride, wo = (width + stride - 1) / stride;
    const int out_rows = ho * wo, out_cols = kernel * kernel * channels;
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(out_rows) * out_cols, -1);
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            const int r = oy * wo + ox;
            for (int ky = 0; ky < kernel; ++ky) {
                for (int kx = 0; kx < kernel; ++kx) {
                    const int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                    if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
                    for (int c = 0; c < channels; ++c) {
                        const int col = (ky * kernel + kx) * channels + c;
                        (*idx)[static_cast<std::size_t>(col) * out_rows + r] = c * height * width + iy * width + ix;
                    }
                }
            }
        }
    }
    return idx;
}

inline ops::GatherIndex upsample2(int height, int width, int channels) {
    const int ho = height * 2, wo = width * 2;
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(ho) * wo * channels);
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < ho; ++y)
            for (int x = 0; x < wo; ++x)
                (*idx)[static_cast<std::size_t>(c) * ho * wo + y * wo + x] = c * height * width + (y / 2) * width + x / 2;
    return idx;
}

/// (H*W) x C  ->  (H/p * W/p) x (p*p*C), token features ordered (dy, dx, c).
inline ops::GatherIndex patchify(int height, int width, int channels, int patch) {
    const int hp = height / patch, wp = width / patch;
    const int rows = hp * wp, cols = patch * patch * channels;
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(rows) * cols);
    for (int py = 0; py < hp; ++py)
        for (int px = 0; px < wp; ++px)
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int c = 0; c < channels; ++c) {
                        const int r = py * wp + px;
                        const int col = (dy * patch + dx) * channels + c;
                        const int y = py * patch + dy, x = px * patch + dx;
                        (*idx)[static_cast<std::size_t>(col) * rows + r] = c * height * width + y * width + x;
                    }
    return idx;
}

/// Inverse of patchify.
inline ops::GatherIndex unpatchify(int height, int width, int channels, int patch) {
    const int hp = height / patch, wp = width / patch;
    const int rows = hp * wp;
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(height) * width * channels);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c) {
                const int r = (y / patch) * wp + x / patch;
                const int col = ((y % patch) * patch + (x % patch)) * channels + c;
                (*idx)[static_cast<std::size_t>(c) * height * width + y * width + x] = col * rows + r;
            }
    return idx;
}

}  // namespace layout

/// kxk convolution with zero padding over a fixed input resolution.
struct Conv2d {
    Dense linear;  // (Cout) x (k*k*Cin)
    ops::GatherIndex columns;
    int in_height = 0, in_width = 0, in_channels = 0, stride = 1, kernel = 3;

    Conv2d() = default;
    Conv2d(int height, int width, int cin, int cout, int stride_, Rng& rng, int kernel_ = 3)
        : linear(static_cast<Index>(kernel_) * kernel_ * cin, cout, rng),
          columns(layout::im2col(height, width, cin, kernel_, stride_)),
          in_height(height), in_width(width), in_channels(cin), stride(stride_), kernel(kernel_) {}

    int out_height() const { return (in_height + stride - 1) / stride; }
    int out_width() const { return (in_width + stride - 1) / stride; }

    Var forward(Tape& t, Var x) const {
        const Index rows = static_cast<Index>(out_height()) * out_width();
        Var cols = ops::gather(x, rows, static_cast<Index>(kernel) * kernel * in_channels, columns);
        return linear.forward(t, cols);
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        Dense::visit(self.linear, prefix, f);
    }
};

/// Single-head self-attention with named dense sub-layers q, k, v, o.
struct SelfAttention {
    Dense q, k, v, o;

    SelfAttention() = default;
    SelfAttention(Index dim, Rng& rng) : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng) {}

    Var forward(Tape& t, Var x) const {
        Var qx = q.forward(t, x), kx = k.forward(t, x), vx = v.forward(t, x);
        const double inv = 1.0 / std::sqrt(static_cast<double>(q.out_features()));
        Var weights = ops::softmax_rows(ops::scale(ops::matmul_nt(qx, kx), inv));
        return o.forward(t, ops::matmul(weights, vx));
    }

    template <class Self, class F>
    static void visit_dense(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".q", self.q);
        f(prefix + ".k", self.k);
        f(prefix + ".v", self.v);
        f(prefix + ".o", self.o);
    }
};

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
struct TransformerBlock {
    LayerNorm ln1, ln2;
    SelfAttention attn;
    Dense fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(Index dim, Index hidden, Rng& rng)
        : ln1(dim), ln2(dim), attn(dim, rng), fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

    Var forward(Tape& t, Var x) const {
        Var h = x + attn.forward(t, ln1.forward(t, x));
        return h + fc2.forward(t, ops::silu(fc1.forward(t, ln2.forward(t, h))));
    }

    template <class Self, class F>
    static void visit_dense(Self& self, const std::string& prefix, F&& f) {
        SelfAttention::visit_dense(self.attn, prefix + ".attn", f);
        f(prefix + ".fc1", self.fc1);
        f(prefix + ".fc2", self.fc2);
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        LayerNorm::visit(self.ln1, prefix + ".ln1", f);
        LayerNorm::visit(self.ln2, prefix + ".ln2", f);
        visit_dense(self, prefix, [&](const std::string& name, auto& dense) { Dense::visit(dense, name, f); });
    }
};

}  // namespace minidiff
