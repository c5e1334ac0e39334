#pragma once

#include "darlc/autodiff.hpp"

#include <cmath>
#include <map>
#include <string>

namespace darlc::ad {

inline void sgd_step(ParamSet& params, double lr) {
    for (auto& p : params) p.value -= lr * p.grad;
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with per-parameter moment buffers keyed by parameter name.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamSet& params) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& p : params) {
            auto [it, inserted] = state_.try_emplace(p.name);
            Moments& s = it->second;
            if (inserted) {
                s.m = Matrix::Zero(p.value.rows(), p.value.cols());
                s.v = Matrix::Zero(p.value.rows(), p.value.cols());
            }
            s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * p.grad;
            s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
            p.value.array() -= cfg_.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + cfg_.eps);
        }
    }

    long steps() const { return t_; }
    void set_lr(double lr) { cfg_.lr = lr; }

private:
    struct Moments {
        Matrix m, v;
    };
    AdamConfig cfg_;
    long t_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace darlc::ad
