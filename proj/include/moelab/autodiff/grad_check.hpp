#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moelab/autodiff/graph.hpp"

namespace moelab::ad {

/// Builds a scalar loss on a fresh graph from the current parameter values.
using ScalarFn = std::function<Tensor(Graph&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    // same, over entries where max(|analytic|, |numeric|) >= 1e-5; below that the
    // central difference is dominated by roundoff in f
    double max_rel_error_resolved = 0.0;
    std::string worst_param;
    Index worst_index = -1;
    Index entries_checked = 0;
    bool finite = true;
    std::string failure;  // set when f was non-finite somewhere

    [[nodiscard]] bool passed(double tol) const { return finite && max_rel_error < tol; }
};

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of `f` with central differences
/// (f(x+h) - f(x-h)) / 2h over every entry of every parameter.
inline GradCheckResult grad_check(const ScalarFn& f, std::span<Parameter* const> params, double h) {
    if (!(h >= 1e-6 && h <= 1e-4)) {
        throw InvalidArgument("grad_check: step h=" + std::to_string(h) + " outside [1e-6, 1e-4]");
    }
    for (Parameter* p : params) {
        p->zero_grad();
    }
    {
        Graph g;
        Tensor loss = f(g);
        if (!std::isfinite(loss.item())) {
            return {0.0, 0.0, "", -1, 0, false, "loss is non-finite at the unperturbed point"};
        }
        g.backward(loss);
    }

    auto evaluate = [&f]() {
        Graph g;
        return f(g).item();
    };

    GradCheckResult result;
    for (Parameter* p : params) {
        const Matrix analytic = p->grad;
        for (Index i = 0; i < p->value.size(); ++i) {
            double& x = p->value.data()[i];
            const double saved = x;
            x = saved + h;
            const double fp = evaluate();
            x = saved - h;
            const double fm = evaluate();
            x = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                result.finite = false;
                result.failure = "non-finite loss when perturbing " + p->name + "[" + std::to_string(i) + "]";
                result.worst_param = p->name;
                result.worst_index = i;
                return result;
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = relative_error(analytic.data()[i], numeric);
            ++result.entries_checked;
            if (std::max(std::abs(analytic.data()[i]), std::abs(numeric)) >= 1e-5) {
                result.max_rel_error_resolved = std::max(result.max_rel_error_resolved, err);
            }
            if (result.worst_index < 0 || err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_param = p->name;
                result.worst_index = i;
            }
        }
    }
    return result;
}

inline GradCheckResult grad_check(const ScalarFn& f, std::vector<Parameter*> params, double h) {
    return grad_check(f, std::span<Parameter* const>(params), h);
}

}  // namespace moelab::ad
