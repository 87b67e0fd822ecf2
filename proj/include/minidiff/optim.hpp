#pragma once

#include <cmath>
#include <vector>

#include "minidiff/autograd.hpp"

namespace minidiff {

/// Adaptive-moment optimizer over a fixed parameter list (standard moment
/// coefficients, no weight decay).
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam(std::vector<Parameter*> params, Options opt) : params_(std::move(params)), opt_(opt) {
        for (Parameter* p : params_) {
            m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            p->zero_grad();
        }
    }

    void zero_grad() {
        for (Parameter* p : params_) p->zero_grad();
    }

    /// Applies one update from the accumulated gradients, then clears them.
    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(opt_.beta1, t_);
        const double c2 = 1.0 - std::pow(opt_.beta2, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter& p = *params_[i];
            if (p.grad.size() == 0) continue;
            m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * p.grad;
            v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * p.grad.cwiseAbs2();
            p.value.array() -= opt_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + opt_.eps);
            p.zero_grad();
        }
    }

    double lr() const { return opt_.lr; }
    void set_lr(double lr) { opt_.lr = lr; }
    std::size_t size() const { return params_.size(); }

private:
    std::vector<Parameter*> params_;
    Options opt_;
    std::vector<Matrix> m_, v_;
    int t_ = 0;
};

}  // namespace minidiff
