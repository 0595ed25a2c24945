#pragma once

// Minimal feedforward classifiers: dense layers with exact analytic
// gradients, SGD with momentum, and a step learning-rate schedule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "debias/error.hpp"
#include "debias/rng.hpp"

namespace debias {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using ClassId = int;

enum class Activation { relu, tanh };

inline std::string_view to_string(Activation a) {
    return a == Activation::relu ? "relu" : "tanh";
}

inline Activation parse_activation(std::string_view name) {
    if (name == "relu") {
        return Activation::relu;
    }
    if (name == "tanh") {
        return Activation::tanh;
    }
    throw ValueError("unknown activation '" + std::string(name) + "'");
}

/// Layer widths from input dimension to class count. The activation is
/// applied after every hidden layer; the output layer is linear (logits).
struct Architecture {
    std::vector<std::size_t> layer_sizes;
    Activation activation = Activation::relu;

    void validate() const {
        if (layer_sizes.size() < 2) {
            throw ArchitectureError("architecture needs at least an input and an output size");
        }
        for (std::size_t s : layer_sizes) {
            if (s == 0) {
                throw ArchitectureError("layer sizes must be positive");
            }
        }
    }

    std::size_t input_dim() const { return layer_sizes.front(); }
    std::size_t class_count() const { return layer_sizes.back(); }
    std::size_t layer_count() const { return layer_sizes.size() - 1; }

    friend bool operator==(const Architecture&, const Architecture&) = default;
};

// weight is (fan_out x fan_in), so a layer maps a row x to x * weight^T + bias^T.
struct Layer {
    Matrix weight;
    Vector bias;
};

/// Layer-structured weight state of a network.
///
/// Also used for gradients and momentum buffers, which share its shape.
/// The flat coordinate order is layer by layer: weights row-major, then bias.
class ParamVector {
public:
    ParamVector() = default;

    static ParamVector zeros(const Architecture& arch) {
        arch.validate();
        ParamVector p;
        p.arch_ = arch;
        for (std::size_t l = 0; l < arch.layer_count(); ++l) {
            const auto in = static_cast<Eigen::Index>(arch.layer_sizes[l]);
            const auto out = static_cast<Eigen::Index>(arch.layer_sizes[l + 1]);
            p.layers_.push_back({Matrix::Zero(out, in), Vector::Zero(out)});
        }
        return p;
    }

    const Architecture& architecture() const { return arch_; }
    std::span<Layer> layers() { return layers_; }
    std::span<const Layer> layers() const { return layers_; }
    Layer& layer(std::size_t l) { return layers_.at(l); }
    const Layer& layer(std::size_t l) const { return layers_.at(l); }

    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& layer : layers_) {
            n += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
        }
        return n;
    }

    bool same_shape(const ParamVector& other) const {
        if (arch_.layer_sizes != other.arch_.layer_sizes) {
            return false;
        }
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            if (layers_[l].weight.rows() != other.layers_[l].weight.rows() ||
                layers_[l].weight.cols() != other.layers_[l].weight.cols() ||
                layers_[l].bias.size() != other.layers_[l].bias.size()) {
                return false;
            }
        }
        return true;
    }

    // Calls f(value&, is_bias) on every coordinate in flat order.
    template <typename F>
    void for_each(F&& f) {
        for (auto& layer : layers_) {
            for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
                f(layer.weight.data()[i], false);
            }
            for (Eigen::Index i = 0; i < layer.bias.size(); ++i) {
                f(layer.bias[i], true);
            }
        }
    }

    template <typename F>
    void for_each(F&& f) const {
        for (const auto& layer : layers_) {
            for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
                f(layer.weight.data()[i], false);
            }
            for (Eigen::Index i = 0; i < layer.bias.size(); ++i) {
                f(layer.bias[i], true);
            }
        }
    }

    std::vector<double> flatten() const {
        std::vector<double> flat;
        flat.reserve(size());
        for_each([&](double v, bool) { flat.push_back(v); });
        return flat;
    }

    void assign_flat(std::span<const double> flat) {
        if (flat.size() != size()) {
            throw DimensionError("flat parameter count does not match architecture");
        }
        std::size_t i = 0;
        for_each([&](double& v, bool) { v = flat[i++]; });
    }

    double squared_norm() const {
        double s = 0.0;
        for_each([&](double v, bool) { s += v * v; });
        return s;
    }

    bool all_finite() const {
        bool ok = true;
        for_each([&](double v, bool) { ok = ok && std::isfinite(v); });
        return ok;
    }

    ParamVector& operator+=(const ParamVector& other) {
        require_same_shape(other);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            layers_[l].weight += other.layers_[l].weight;
            layers_[l].bias += other.layers_[l].bias;
        }
        return *this;
    }

    ParamVector& operator-=(const ParamVector& other) {
        require_same_shape(other);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            layers_[l].weight -= other.layers_[l].weight;
            layers_[l].bias -= other.layers_[l].bias;
        }
        return *this;
    }

    ParamVector& operator*=(double s) {
        for (auto& layer : layers_) {
            layer.weight *= s;
            layer.bias *= s;
        }
        return *this;
    }

    friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
    friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }

    // Exact equality of architecture and every coordinate.
    friend bool operator==(const ParamVector& a, const ParamVector& b) {
        if (a.arch_ != b.arch_ || !a.same_shape(b)) {
            return false;
        }
        for (std::size_t l = 0; l < a.layers_.size(); ++l) {
            if (a.layers_[l].weight != b.layers_[l].weight || a.layers_[l].bias != b.layers_[l].bias) {
                return false;
            }
        }
        return true;
    }

    void require_same_shape(const ParamVector& other) const {
        if (!same_shape(other)) {
            throw DimensionError("parameter shapes differ");
        }
    }

private:
    Architecture arch_;
    std::vector<Layer> layers_;
};

using GradVector = ParamVector;

/// Optimizer settings for one training run. Defaults follow the reference
/// CIFAR-10 setup: 20 epochs, lr 1e-4 decayed by x0.9 every 5 epochs,
/// momentum 0.5.
struct TrainConfig {
    std::size_t epochs = 20;
    double base_lr = 1e-4;
    double momentum = 0.5;
    std::size_t step_every = 5;
    double gamma = 0.9;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(base_lr > 0.0) || !std::isfinite(base_lr)) {
            throw ValueError("base_lr must be positive");
        }
        if (!(momentum >= 0.0 && momentum < 1.0)) {
            throw ValueError("momentum must lie in [0, 1)");
        }
        if (step_every == 0) {
            throw ValueError("step_every must be positive");
        }
        if (!(gamma > 0.0 && gamma <= 1.0)) {
            throw ValueError("gamma must lie in (0, 1]");
        }
        if (batch_size == 0) {
            throw ValueError("batch_size must be positive");
        }
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Step schedule: base_lr * gamma^floor(epoch / step_every).
inline double lr_at_epoch(const TrainConfig& config, std::size_t epoch) {
    const auto steps = static_cast<int>(epoch / config.step_every);
    double lr = config.base_lr;
    for (int i = 0; i < steps; ++i) {
        lr *= config.gamma;
    }
    return lr;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
inline ParamVector init_model(const Architecture& arch, std::uint64_t seed) {
    ParamVector p = ParamVector::zeros(arch);
    Rng rng(seed);
    for (auto& layer : p.layers()) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
        for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
            layer.weight.data()[i] = rng.uniform(-bound, bound);
        }
    }
    return p;
}

namespace detail {

inline void apply_activation(Matrix& z, Activation a) {
    if (a == Activation::relu) {
        z = z.cwiseMax(0.0);
    } else {
        z = z.array().tanh().matrix();
    }
}

// Derivative of the activation expressed through its pre-activation input.
inline Matrix activation_derivative(const Matrix& pre, Activation a) {
    if (a == Activation::relu) {
        return (pre.array() > 0.0).cast<double>().matrix();
    }
    return (1.0 - pre.array().tanh().square()).matrix();
}

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) {
        throw ValueError(std::string(what) + " contains non-finite values");
    }
}

} // namespace detail

/// Intermediate values of a forward pass kept for backpropagation.
struct ForwardTrace {
    std::vector<Matrix> inputs;       // input to each layer; inputs[0] is the batch
    std::vector<Matrix> pre_activations;
    Matrix logits;
};

inline ForwardTrace forward_trace(const ParamVector& model, const Matrix& inputs) {
    const auto& arch = model.architecture();
    if (static_cast<std::size_t>(inputs.cols()) != arch.input_dim()) {
        throw DimensionError("input has " + std::to_string(inputs.cols()) + " columns, model expects " +
                             std::to_string(arch.input_dim()));
    }
    ForwardTrace trace;
    Matrix current = inputs;
    const std::size_t n_layers = arch.layer_count();
    for (std::size_t l = 0; l < n_layers; ++l) {
        const Layer& layer = model.layer(l);
        Matrix z = current * layer.weight.transpose();
        z.rowwise() += layer.bias.transpose();
        trace.inputs.push_back(std::move(current));
        trace.pre_activations.push_back(z);
        if (l + 1 < n_layers) {
            detail::apply_activation(z, arch.activation);
        }
        current = std::move(z);
    }
    trace.logits = std::move(current);
    return trace;
}

// One logit row per input row.
inline Matrix forward(const ParamVector& model, const Matrix& inputs) {
    return forward_trace(model, inputs).logits;
}

inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw DimensionError("softmax of an empty vector");
    }
    for (double v : logits) {
        if (!std::isfinite(v)) {
            throw ValueError("softmax input contains non-finite values");
        }
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - top);
        total += out[i];
    }
    for (double& v : out) {
        v /= total;
    }
    return out;
}

inline Matrix log_softmax_rows(const Matrix& logits) {
    detail::require_finite(logits, "logits");
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double top = logits.row(r).maxCoeff();
        const double lse = top + std::log((logits.row(r).array() - top).exp().sum());
        out.row(r) = logits.row(r).array() - lse;
    }
    return out;
}

inline Matrix softmax_rows(const Matrix& logits) {
    detail::require_finite(logits, "logits");
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double top = logits.row(r).maxCoeff();
        out.row(r) = (logits.row(r).array() - top).exp();
        out.row(r) /= out.row(r).sum();
    }
    return out;
}

inline void check_labels(std::span<const ClassId> labels, Eigen::Index rows, Eigen::Index classes) {
    if (static_cast<Eigen::Index>(labels.size()) != rows) {
        throw DimensionError("label count does not match row count");
    }
    for (ClassId y : labels) {
        if (y < 0 || y >= classes) {
            throw LabelError(LabelError::Kind::out_of_range, "label " + std::to_string(y) + " outside [0, " +
                                                                 std::to_string(classes) + ")");
        }
    }
}

// Mean negative log-likelihood of the true class.
inline double cross_entropy(const Matrix& logits, std::span<const ClassId> labels) {
    check_labels(labels, logits.rows(), logits.cols());
    if (logits.rows() == 0) {
        throw DimensionError("cross entropy of an empty batch");
    }
    const Matrix logp = log_softmax_rows(logits);
    double total = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        total -= logp(r, labels[static_cast<std::size_t>(r)]);
    }
    return total / static_cast<double>(logits.rows());
}

// d(mean cross entropy)/d(logits) = (softmax - onehot) / N.
inline Matrix cross_entropy_logit_gradient(const Matrix& logits, std::span<const ClassId> labels) {
    check_labels(labels, logits.rows(), logits.cols());
    Matrix g = softmax_rows(logits);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
        g(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
    }
    return g / static_cast<double>(g.rows());
}

/// Backpropagates an upstream gradient on the logits into parameter space.
inline GradVector backward_from_logits(const ParamVector& model, const ForwardTrace& trace,
                                       const Matrix& logit_grad) {
    GradVector grads = ParamVector::zeros(model.architecture());
    Matrix delta = logit_grad;
    for (std::size_t l = model.architecture().layer_count(); l-- > 0;) {
        Layer& g = grads.layer(l);
        g.weight = delta.transpose() * trace.inputs[l];
        g.bias = delta.colwise().sum().transpose();
        if (l > 0) {
            delta = (delta * model.layer(l).weight).cwiseProduct(
                detail::activation_derivative(trace.pre_activations[l - 1], model.architecture().activation));
        }
    }
    return grads;
}

struct LossAndGrad {
    double loss = 0.0;
    GradVector grads;
};

// Mean cross entropy of the model on (inputs, labels) and its exact gradient.
inline LossAndGrad backward(const ParamVector& model, const Matrix& inputs, std::span<const ClassId> labels) {
    ForwardTrace trace = forward_trace(model, inputs);
    LossAndGrad out;
    out.loss = cross_entropy(trace.logits, labels);
    out.grads = backward_from_logits(model, trace, cross_entropy_logit_gradient(trace.logits, labels));
    return out;
}

// velocity <- momentum * velocity + grads;  model <- model - lr * velocity.
inline void sgd_step(ParamVector& model, ParamVector& velocity, const GradVector& grads, double lr, double momentum) {
    model.require_same_shape(grads);
    model.require_same_shape(velocity);
    if (!(lr > 0.0)) {
        throw ValueError("learning rate must be positive");
    }
    auto m = model.layers();
    auto v = velocity.layers();
    auto g = grads.layers();
    for (std::size_t l = 0; l < m.size(); ++l) {
        v[l].weight = momentum * v[l].weight + g[l].weight;
        v[l].bias = momentum * v[l].bias + g[l].bias;
        m[l].weight -= lr * v[l].weight;
        m[l].bias -= lr * v[l].bias;
    }
}

// Lowest index wins ties.
inline std::vector<ClassId> argmax_rows(const Matrix& scores) {
    std::vector<ClassId> out(static_cast<std::size_t>(scores.rows()));
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < scores.cols(); ++c) {
            if (scores(r, c) > scores(r, best)) {
                best = c;
            }
        }
        out[static_cast<std::size_t>(r)] = static_cast<ClassId>(best);
    }
    return out;
}

inline std::vector<ClassId> predict(const ParamVector& model, const Matrix& inputs) {
    return argmax_rows(forward(model, inputs));
}

} // namespace debias
