#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation of one forward pass. Nodes that depend on a
// trainable Parameter carry a backward closure; everything else is a plain
// value, so inference on a tape costs little more than the arithmetic itself.

#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "minidiff/error.hpp"

namespace minidiff {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// A trainable array. `grad` accumulates across backward passes until an
/// optimizer consumes it; it is mutable so read-only forward code can still
/// record gradients for parameters flagged trainable.
struct Parameter {
    Matrix value;
    mutable Matrix grad;
    bool trainable = false;

    Parameter() = default;
    explicit Parameter(Matrix v) : value(std::move(v)) {}

    Index size() const { return value.size(); }
    void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
    bool requires_grad() const;

    Tape& tape() const { return *tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix&)>;

    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value) {
        Node n;
        n.value = std::move(value);
        return push(std::move(n));
    }

    /// Records a value without copying; `value` must outlive the tape.
    Var constant_ref(const Matrix& value) {
        Node n;
        n.ref = &value;
        return push(std::move(n));
    }

    /// Leaf bound to a parameter. Gradients reach `p.grad` only when trainable.
    Var param(const Parameter& p) {
        Node n;
        n.ref = &p.value;
        n.requires_grad = p.trainable;
        n.param = p.trainable ? &p : nullptr;
        return push(std::move(n));
    }

    template <typename Fn>
    Var record(Matrix value, std::initializer_list<Var> inputs, Fn&& backward) {
        Node n;
        n.value = std::move(value);
        for (const Var& v : inputs) n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
        if (n.requires_grad) n.backward = Backward(std::forward<Fn>(backward));
        return push(std::move(n));
    }

    const Matrix& value(int id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        return n.ref ? *n.ref : n.value;
    }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

    template <typename Derived>
    void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    /// Back-propagates d(root)/d(node) through the tape; root must be 1x1.
    void backward(Var root) {
        require(root.rows() == 1 && root.cols() == 1, ErrorKind::invalid_argument,
                "backward root must be a scalar");
        Node& r = nodes_[static_cast<std::size_t>(root.id())];
        if (!r.requires_grad) return;
        r.grad = Matrix::Ones(1, 1);
        for (int i = root.id(); i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (n.param) {
                if (n.param->grad.size() == 0) {
                    n.param->grad = n.grad;
                } else {
                    n.param->grad += n.grad;
                }
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        const Matrix* ref = nullptr;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
        const Parameter* param = nullptr;
    };

    Var push(Node&& n) {
        nodes_.push_back(std::move(n));
        return Var(this, static_cast<int>(nodes_.size() - 1));
    }

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace ops {

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::invalid_argument,
            std::string(op) + ": shape mismatch");
}

inline Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    const int ia = a.id(), ib = b.id();
    return a.tape().record(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, g);
    });
}

inline Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    const int ia = a.id(), ib = b.id();
    return a.tape().record(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, -g);
    });
}

inline Var scale(Var a, double s) {
    const int ia = a.id();
    return a.tape().record(a.value() * s, {a}, [ia, s](Tape& t, const Matrix& g) { t.accumulate(ia, g * s); });
}

inline Var hadamard(Var a, Var b) {
    check_same_shape(a, b, "hadamard");
    const int ia = a.id(), ib = b.id();
    return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
        t.accumulate(ia, g.cwiseProduct(t.value(ib)));
        t.accumulate(ib, g.cwiseProduct(t.value(ia)));
    });
}

/// a (n x m) + row (1 x m) broadcast over rows.
inline Var add_row(Var a, Var row) {
    require(row.rows() == 1 && row.cols() == a.cols(), ErrorKind::invalid_argument, "add_row: shape mismatch");
    const int ia = a.id(), ir = row.id();
    Matrix out = a.value().rowwise() + row.value().row(0);
    return a.tape().record(std::move(out), {a, row}, [ia, ir](Tape& t, const Matrix& g) {
        t.accumulate(ia, g);
        t.accumulate(ir, g.colwise().sum());
    });
}

/// a (n x m) * row (1 x m) broadcast over rows.
inline Var mul_row(Var a, Var row) {
    require(row.rows() == 1 && row.cols() == a.cols(), ErrorKind::invalid_argument, "mul_row: shape mismatch");
    const int ia = a.id(), ir = row.id();
    Matrix out = a.value().array().rowwise() * row.value().row(0).array();
    return a.tape().record(std::move(out), {a, row}, [ia, ir](Tape& t, const Matrix& g) {
        const Matrix& r = t.value(ir);
        t.accumulate(ia, (g.array().rowwise() * r.row(0).array()).matrix());
        t.accumulate(ir, g.cwiseProduct(t.value(ia)).colwise().sum());
    });
}

inline Var matmul(Var a, Var b) {
    require(a.cols() == b.rows(), ErrorKind::invalid_argument, "matmul: inner dimension mismatch");
    const int ia = a.id(), ib = b.id();
    Matrix out = a.value() * b.value();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
        if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
    });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
    require(a.cols() == b.cols(), ErrorKind::invalid_argument, "matmul_nt: inner dimension mismatch");
    const int ia = a.id(), ib = b.id();
    Matrix out = a.value() * b.value().transpose();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
        if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
    });
}

inline Var silu(Var a) {
    const int ia = a.id();
    Matrix sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
    Matrix out = a.value().cwiseProduct(sig);
    return a.tape().record(std::move(out), {a}, [ia, sig = std::move(sig)](Tape& t, const Matrix& g) {
        const auto x = t.value(ia).array();
        const auto s = sig.array();
        t.accumulate(ia, (g.array() * (s * (1.0 + x * (1.0 - s)))).matrix());
    });
}

inline Var relu(Var a) {
    const int ia = a.id();
    Matrix out = a.value().cwiseMax(0.0);
    return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
        t.accumulate(ia, (t.value(ia).array() > 0.0).select(g, 0.0).matrix());
    });
}

inline Var sigmoid(Var a) {
    const int ia = a.id();
    Matrix out = (1.0 + (-a.value().array()).exp()).inverse().matrix();
    Matrix saved = out;
    return a.tape().record(std::move(out), {a}, [ia, s = std::move(saved)](Tape& t, const Matrix& g) {
        t.accumulate(ia, (g.array() * s.array() * (1.0 - s.array())).matrix());
    });
}

inline Var softmax_rows(Var a) {
    const int ia = a.id();
    Matrix out = a.value();
    for (Index r = 0; r < out.rows(); ++r) {
        const double m = out.row(r).maxCoeff();
        out.row(r) = (out.row(r).array() - m).exp().matrix();
        out.row(r) /= out.row(r).sum();
    }
    Matrix saved = out;
    return a.tape().record(std::move(out), {a}, [ia, y = std::move(saved)](Tape& t, const Matrix& g) {
        const Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
        t.accumulate(ia, (y.array() * (g.colwise() - dots).array()).matrix());
    });
}

/// Row-wise standardization (no affine part).
inline Var layer_norm_rows(Var a, double eps = 1e-5) {
    const int ia = a.id();
    const Matrix& x = a.value();
    const double m = static_cast<double>(x.cols());
    const Eigen::VectorXd mean = x.rowwise().mean();
    Matrix centered = x.colwise() - mean;
    const Eigen::VectorXd inv_std =
        ((centered.array().square().rowwise().sum() / m) + eps).rsqrt().matrix();
    Matrix y = centered.array().colwise() * inv_std.array();
    Matrix saved = y;
    return a.tape().record(std::move(y), {a}, [ia, y = std::move(saved), inv_std, m](Tape& t, const Matrix& g) {
        const Eigen::VectorXd g_mean = g.rowwise().mean();
        const Eigen::VectorXd gy_mean = g.cwiseProduct(y).rowwise().sum() / m;
        Matrix dx = (g.colwise() - g_mean) - (y.array().colwise() * gy_mean.array()).matrix();
        dx = dx.array().colwise() * inv_std.array();
        t.accumulate(ia, dx);
    });
}

/// Column means: (n x m) -> (1 x m).
inline Var mean_rows(Var a) {
    const int ia = a.id();
    const double n = static_cast<double>(a.rows());
    const Index rows = a.rows();
    return a.tape().record(a.value().colwise().mean(), {a}, [ia, n, rows](Tape& t, const Matrix& g) {
        t.accumulate(ia, g.replicate(rows, 1) / n);
    });
}

inline Var sum(Var a) {
    const int ia = a.id();
    const Index r = a.rows(), c = a.cols();
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return a.tape().record(std::move(out), {a}, [ia, r, c](Tape& t, const Matrix& g) {
        t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
    });
}

/// sum((a - target)^2) as a 1x1 node; target is a constant.
inline Var squared_error(Var a, const Matrix& target) {
    require(a.rows() == target.rows() && a.cols() == target.cols(), ErrorKind::invalid_argument,
            "squared_error: shape mismatch");
    const int ia = a.id();
    Matrix diff = a.value() - target;
    Matrix out(1, 1);
    out(0, 0) = diff.squaredNorm();
    return a.tape().record(std::move(out), {a}, [ia, d = std::move(diff)](Tape& t, const Matrix& g) {
        t.accumulate(ia, d * (2.0 * g(0, 0)));
    });
}

/// -log softmax(logits)[label] for a 1 x K logit row.
inline Var cross_entropy(Var logits, int label) {
    require(logits.rows() == 1 && label >= 0 && label < logits.cols(), ErrorKind::invalid_argument,
            "cross_entropy: bad logits shape or label");
    const int il = logits.id();
    const Eigen::RowVectorXd z = logits.value().row(0);
    const double m = z.maxCoeff();
    Eigen::RowVectorXd p = (z.array() - m).exp();
    const double denom = p.sum();
    p /= denom;
    Matrix out(1, 1);
    out(0, 0) = -(z(label) - m - std::log(denom));
    return logits.tape().record(std::move(out), {logits}, [il, p, label](Tape& t, const Matrix& g) {
        Matrix d = p;
        d(0, label) -= 1.0;
        t.accumulate(il, d * g(0, 0));
    });
}

/// Generic index-gather: out.data()[i] = a.data()[index[i]] (col-major flat
/// indices), or 0 where index[i] < 0. Covers reshape, patchify, im2col and
/// nearest upsampling with one backward rule (scatter-add).
using GatherIndex = std::shared_ptr<const std::vector<int>>;

inline Var gather(Var a, Index rows, Index cols, const GatherIndex& index) {
    require(static_cast<Index>(index->size()) == rows * cols, ErrorKind::invalid_argument,
            "gather: index size does not match output shape");
    const int ia = a.id();
    const Matrix& x = a.value();
    Matrix out(rows, cols);
    const int* idx = index->data();
    const double* src = x.data();
    double* dst = out.data();
    for (Index i = 0; i < rows * cols; ++i) dst[i] = idx[i] >= 0 ? src[idx[i]] : 0.0;
    const Index in_rows = x.rows(), in_cols = x.cols();
    return a.tape().record(std::move(out), {a}, [ia, index, in_rows, in_cols](Tape& t, const Matrix& g) {
        Matrix dx = Matrix::Zero(in_rows, in_cols);
        const int* id = index->data();
        const double* gs = g.data();
        double* d = dx.data();
        for (Index i = 0; i < g.size(); ++i) {
            if (id[i] >= 0) d[id[i]] += gs[i];
        }
        t.accumulate(ia, dx);
    });
}

/// base with rows `positions[i]` replaced by rows(i).
inline Var replace_rows(Var base, Var rows, std::span<const int> positions) {
    require(static_cast<Index>(positions.size()) == rows.rows() && rows.cols() == base.cols(),
            ErrorKind::invalid_argument, "replace_rows: shape mismatch");
    Matrix out = base.value();
    std::vector<int> pos(positions.begin(), positions.end());
    for (std::size_t i = 0; i < pos.size(); ++i) {
        require(pos[i] >= 0 && pos[i] < out.rows(), ErrorKind::invalid_argument, "replace_rows: bad position");
        out.row(pos[i]) = rows.value().row(static_cast<Index>(i));
    }
    const int ib = base.id(), ir = rows.id();
    return base.tape().record(std::move(out), {base, rows}, [ib, ir, pos](Tape& t, const Matrix& g) {
        if (t.requires_grad(ib)) {
            Matrix gb = g;
            for (int p : pos) gb.row(p).setZero();
            t.accumulate(ib, gb);
        }
        if (t.requires_grad(ir)) {
            Matrix gr(static_cast<Index>(pos.size()), g.cols());
            for (std::size_t i = 0; i < pos.size(); ++i) gr.row(static_cast<Index>(i)) = g.row(pos[i]);
            t.accumulate(ir, gr);
        }
    });
}

/// 2x2 max pooling of an (H*W) x C feature map laid out row = y*W + x.
inline Var max_pool2(Var a, int height, int width) {
    require(a.rows() == static_cast<Index>(height) * width && height % 2 == 0 && width % 2 == 0,
            ErrorKind::invalid_argument, "max_pool2: bad feature map shape");
    const Matrix& x = a.value();
    const int ho = height / 2, wo = width / 2;
    const Index channels = x.cols();
    const Index out_rows = static_cast<Index>(ho) * wo;
    auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(out_rows * channels));
    for (Index c = 0; c < channels; ++c) {
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                int best = (2 * oy) * width + 2 * ox;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const int r = (2 * oy + dy) * width + 2 * ox + dx;
                        if (x(r, c) > x(best, c)) best = r;
                    }
                }
                const Index o = static_cast<Index>(oy) * wo + ox;
                (*arg)[static_cast<std::size_t>(c * out_rows + o)] = static_cast<int>(c * x.rows() + best);
            }
        }
    }
    return gather(a, out_rows, channels, arg);
}

}  // namespace ops

inline Var operator+(Var a, Var b) { return ops::add(a, b); }
inline Var operator-(Var a, Var b) { return ops::sub(a, b); }
inline Var operator*(double s, Var a) { return ops::scale(a, s); }

}  // namespace minidiff
