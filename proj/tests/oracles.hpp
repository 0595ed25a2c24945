#pragma once

// Independent reference computations for the tests. Everything here works
// on plain loops over flat coordinates and never calls the library code it
// checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "debias/data.hpp"
#include "debias/nn.hpp"

namespace oracle {

using debias::ClassId;
using debias::Matrix;
using debias::ParamVector;

// Dense forward pass with explicit index loops.
inline std::vector<std::vector<double>> forward(const ParamVector& model, const Matrix& inputs) {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index n = 0; n < inputs.rows(); ++n) {
        std::vector<double> a(static_cast<std::size_t>(inputs.cols()));
        for (Eigen::Index d = 0; d < inputs.cols(); ++d) {
            a[static_cast<std::size_t>(d)] = inputs(n, d);
        }
        const auto layers = model.layers();
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& w = layers[l].weight;
            std::vector<double> z(static_cast<std::size_t>(w.rows()));
            for (Eigen::Index o = 0; o < w.rows(); ++o) {
                double s = layers[l].bias[o];
                for (Eigen::Index i = 0; i < w.cols(); ++i) {
                    s += w.data()[o * w.cols() + i] * a[static_cast<std::size_t>(i)];
                }
                const bool hidden = l + 1 < layers.size();
                if (hidden) {
                    s = model.architecture().activation == debias::Activation::relu ? (s > 0.0 ? s : 0.0)
                                                                                    : std::tanh(s);
                }
                z[static_cast<std::size_t>(o)] = s;
            }
            a = std::move(z);
        }
        rows.push_back(std::move(a));
    }
    return rows;
}

// exp / sum with no max shift; only for moderate logits.
inline std::vector<double> naive_softmax(const std::vector<double>& z) {
    double s = 0.0;
    for (double v : z) {
        s += std::exp(v);
    }
    std::vector<double> p;
    for (double v : z) {
        p.push_back(std::exp(v) / s);
    }
    return p;
}

inline double naive_cross_entropy(const Matrix& logits, const std::vector<ClassId>& labels) {
    double loss = 0.0;
    for (Eigen::Index n = 0; n < logits.rows(); ++n) {
        std::vector<double> z;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            z.push_back(logits(n, c));
        }
        loss -= std::log(naive_softmax(z)[static_cast<std::size_t>(labels[static_cast<std::size_t>(n)])]);
    }
    return loss / static_cast<double>(logits.rows());
}

// Central differences on every coordinate.
inline std::vector<double> finite_difference(const std::function<double(const ParamVector&)>& f, ParamVector theta,
                                             double h = 1e-5) {
    std::vector<double> flat = theta.flatten();
    std::vector<double> grad(flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) {
        const double saved = flat[i];
        flat[i] = saved + h;
        theta.assign_flat(flat);
        const double up = f(theta);
        flat[i] = saved - h;
        theta.assign_flat(flat);
        const double down = f(theta);
        flat[i] = saved;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

// Largest |a - n| / max(|a|, |n|, floor) over coordinates.
inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                                 double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
    }
    return worst;
}

// Coordinate loop over flattened parameters, with a bias mask built from
// layer shapes.
inline std::vector<bool> bias_mask(const ParamVector& p) {
    std::vector<bool> mask;
    for (const auto& layer : p.layers()) {
        mask.insert(mask.end(), static_cast<std::size_t>(layer.weight.size()), false);
        mask.insert(mask.end(), static_cast<std::size_t>(layer.bias.size()), true);
    }
    return mask;
}

inline double proximal_penalty(const ParamVector& theta, const ParamVector& anchor, double lambda,
                               bool include_biases) {
    const auto t = theta.flatten();
    const auto a = anchor.flatten();
    const auto mask = bias_mask(theta);
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (include_biases || !mask[i]) {
            s += (t[i] - a[i]) * (t[i] - a[i]);
        }
    }
    return lambda * s;
}

inline double weight_decay(const ParamVector& theta, double beta, bool include_biases) {
    const auto t = theta.flatten();
    const auto mask = bias_mask(theta);
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (include_biases || !mask[i]) {
            s += t[i] * t[i];
        }
    }
    return beta * s;
}

inline std::vector<double> regularizer_gradient(const ParamVector& theta, const ParamVector& anchor, double lambda,
                                                double beta, bool include_biases) {
    const auto t = theta.flatten();
    const auto a = anchor.flatten();
    const auto mask = bias_mask(theta);
    std::vector<double> g(t.size(), 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (include_biases || !mask[i]) {
            g[i] = 2.0 * lambda * (t[i] - a[i]) + 2.0 * beta * t[i];
        }
    }
    return g;
}

// Rows of a dataset as (label, features) pairs, for multiset comparisons.
using Row = std::pair<ClassId, std::vector<double>>;

inline std::multiset<Row> rows_of(const debias::Dataset& ds, const std::function<bool(ClassId)>& keep = {}) {
    std::multiset<Row> out;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const ClassId y = ds.labels[i];
        if (keep && !keep(y)) {
            continue;
        }
        std::vector<double> f;
        for (Eigen::Index d = 0; d < ds.features.cols(); ++d) {
            f.push_back(ds.features(static_cast<Eigen::Index>(i), d));
        }
        out.emplace(y, std::move(f));
    }
    return out;
}

inline std::map<ClassId, std::size_t> label_counts(const debias::Dataset& ds) {
    std::map<ClassId, std::size_t> counts;
    for (ClassId y : ds.labels) {
        ++counts[y];
    }
    return counts;
}

} // namespace oracle
