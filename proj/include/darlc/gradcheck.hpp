#pragma once

#include "darlc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

namespace darlc::ad {

/// Builds the loss on a fresh tape. Parameters must be bound with tape.param().
using LossFn = std::function<Var(Tape&)>;

struct GradReport {
    std::map<std::string, double> max_rel_error;  // per parameter
    double worst = 0.0;
    double eps = 1e-5;
    bool valid = true;
    std::string diagnostic;
};

inline double evaluate_loss(const LossFn& fn) {
    Tape tape;
    return fn(tape).scalar();
}

/// Analytic gradients of `fn` at the current parameter values (grads are overwritten).
inline double analytic_gradient(const LossFn& fn, ParamSet& params) {
    params.zero_grad();
    Tape tape;
    Var loss = fn(tape);
    tape.backward(loss);
    return loss.scalar();
}

/// Compares reverse-mode gradients with central differences, coordinate by coordinate.
/// Error per coordinate is |g_analytic - g_numeric| / max(1, |g_numeric|).
inline GradReport grad_check(const LossFn& fn, ParamSet& params, double eps = 1e-5) {
    require(eps >= 1e-7 && eps <= 1e-3, "diff_engine", "grad_check eps must lie in [1e-7, 1e-3]");
    GradReport report;
    report.eps = eps;

    const double base = analytic_gradient(fn, params);
    if (!std::isfinite(base)) {
        report.valid = false;
        report.diagnostic = "non-finite loss at the base point";
        return report;
    }

    for (auto& p : params) {
        double worst = 0.0;
        for (Index k = 0; k < p.value.size(); ++k) {
            double& x = p.value.data()[k];
            const double saved = x;
            x = saved + eps;
            const double up = evaluate_loss(fn);
            x = saved - eps;
            const double down = evaluate_loss(fn);
            x = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                report.valid = false;
                report.diagnostic = "non-finite loss while perturbing '" + p.name + "'";
                return report;
            }
            const double numeric = (up - down) / (2.0 * eps);
            const double err = std::abs(p.grad.data()[k] - numeric) / std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
        report.max_rel_error[p.name] = worst;
        report.worst = std::max(report.worst, worst);
    }
    return report;
}

}  // namespace darlc::ad
