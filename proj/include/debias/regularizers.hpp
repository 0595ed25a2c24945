#pragma once

// Proximal anchor penalty lambda*||theta - anchor||^2 and weight decay
// beta*||theta||^2, as objective terms and their gradients.

#include <cmath>
#include <optional>

#include "debias/error.hpp"
#include "debias/nn.hpp"

namespace debias {

struct RegConfig {
    double lambda = 0.0;
    double beta = 0.0;
    std::optional<ParamVector> anchor;
    // Whether bias vectors take part in both norms. Weights always do.
    bool include_biases = true;

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
            throw ValueError("lambda must be a finite nonnegative number");
        }
        if (!(beta >= 0.0) || !std::isfinite(beta)) {
            throw ValueError("beta must be a finite nonnegative number");
        }
        if (lambda > 0.0 && !anchor) {
            throw ValueError("lambda > 0 requires an anchor");
        }
    }

    bool active() const { return lambda > 0.0 || beta > 0.0; }
};

namespace detail {

template <typename F>
void for_each_pair(const ParamVector& a, const ParamVector& b, bool include_biases, F&& f) {
    a.require_same_shape(b);
    for (std::size_t l = 0; l < a.layers().size(); ++l) {
        const Layer& x = a.layer(l);
        const Layer& y = b.layer(l);
        for (Eigen::Index i = 0; i < x.weight.size(); ++i) {
            f(x.weight.data()[i], y.weight.data()[i]);
        }
        if (include_biases) {
            for (Eigen::Index i = 0; i < x.bias.size(); ++i) {
                f(x.bias[i], y.bias[i]);
            }
        }
    }
}

} // namespace detail

inline double proximal_penalty(const ParamVector& theta, const ParamVector& anchor, double lambda,
                               bool include_biases = true) {
    if (!(lambda >= 0.0)) {
        throw ValueError("lambda must be nonnegative");
    }
    double sum = 0.0;
    detail::for_each_pair(theta, anchor, include_biases, [&](double t, double a) {
        const double d = t - a;
        sum += d * d;
    });
    return lambda * sum;
}

inline double weight_decay_penalty(const ParamVector& theta, double beta, bool include_biases = true) {
    if (!(beta >= 0.0)) {
        throw ValueError("beta must be nonnegative");
    }
    double sum = 0.0;
    theta.for_each([&](double v, bool is_bias) {
        if (include_biases || !is_bias) {
            sum += v * v;
        }
    });
    return beta * sum;
}

inline double regularization_penalty(const ParamVector& theta, const RegConfig& reg) {
    reg.validate();
    double total = 0.0;
    if (reg.anchor) {
        total += proximal_penalty(theta, *reg.anchor, reg.lambda, reg.include_biases);
    }
    return total + weight_decay_penalty(theta, reg.beta, reg.include_biases);
}

// Cross-entropy plus both penalty terms.
inline double regularized_objective(double ce_loss, const ParamVector& theta, const RegConfig& reg) {
    return ce_loss + regularization_penalty(theta, reg);
}

// 2*lambda*(theta - anchor) + 2*beta*theta, coordinatewise.
inline GradVector regularizer_gradient(const ParamVector& theta, const RegConfig& reg) {
    reg.validate();
    GradVector g = ParamVector::zeros(theta.architecture());
    if (reg.anchor) {
        theta.require_same_shape(*reg.anchor);
    }
    for (std::size_t l = 0; l < theta.layers().size(); ++l) {
        const Layer& t = theta.layer(l);
        Layer& out = g.layer(l);
        if (reg.lambda > 0.0) {
            const Layer& a = reg.anchor->layer(l);
            out.weight += 2.0 * reg.lambda * (t.weight - a.weight);
            if (reg.include_biases) {
                out.bias += 2.0 * reg.lambda * (t.bias - a.bias);
            }
        }
        if (reg.beta > 0.0) {
            out.weight += 2.0 * reg.beta * t.weight;
            if (reg.include_biases) {
                out.bias += 2.0 * reg.beta * t.bias;
            }
        }
    }
    return g;
}

} // namespace debias
