#pragma once

#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "debias/data.hpp"
#include "debias/nn.hpp"
#include "debias/regularizers.hpp"
#include "debias/rng.hpp"

namespace debias {

struct Batch {
    std::span<const std::size_t> rows;  // indices into the training set
    Matrix inputs;
    std::vector<ClassId> labels;
};

// Loss and gradient of one mini-batch at the given parameters.
using BatchObjective = std::function<LossAndGrad(const ParamVector&, const Batch&)>;

struct TrainResult {
    ParamVector model;
    std::vector<double> epoch_loss;  // mean batch loss per epoch
};

inline BatchObjective cross_entropy_objective() {
    return [](const ParamVector& model, const Batch& batch) { return backward(model, batch.inputs, batch.labels); };
}

// Adds the penalty terms of reg to an objective. An inactive reg returns the
// objective untouched, so lambda = beta = 0 runs the exact same arithmetic.
inline BatchObjective regularized(BatchObjective base, RegConfig reg) {
    reg.validate();
    if (!reg.active()) {
        return base;
    }
    return [base = std::move(base), reg = std::move(reg)](const ParamVector& model, const Batch& batch) {
        LossAndGrad out = base(model, batch);
        out.loss = regularized_objective(out.loss, model, reg);
        out.grads += regularizer_gradient(model, reg);
        return out;
    };
}

/// Mini-batch SGD with momentum from the given starting point. Batches are
/// drawn by a seeded reshuffle each epoch; the last short batch is kept.
inline TrainResult train(ParamVector start, const Dataset& ds, const TrainConfig& config,
                         const BatchObjective& objective) {
    config.validate();
    ds.validate();
    if (start.architecture().input_dim() != ds.dim()) {
        throw DimensionError("model input dimension does not match the dataset");
    }
    if (start.architecture().class_count() != static_cast<std::size_t>(ds.class_count)) {
        throw DimensionError("model class count does not match the dataset");
    }
    TrainResult result{std::move(start), {}};
    ParamVector velocity = ParamVector::zeros(result.model.architecture());
    Rng rng(derive_seed(config.seed, 1));
    std::vector<std::size_t> order(ds.size());
    Batch batch;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = lr_at_epoch(config, epoch);
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span(order));
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            batch.rows = std::span<const std::size_t>(order).subspan(begin, end - begin);
            batch.inputs.resize(static_cast<Eigen::Index>(end - begin), ds.features.cols());
            batch.labels.resize(end - begin);
            for (std::size_t i = 0; i < batch.rows.size(); ++i) {
                batch.inputs.row(static_cast<Eigen::Index>(i)) =
                    ds.features.row(static_cast<Eigen::Index>(batch.rows[i]));
                batch.labels[i] = ds.labels[batch.rows[i]];
            }
            LossAndGrad step = objective(result.model, batch);
            sgd_step(result.model, velocity, step.grads, lr, config.momentum);
            loss_sum += step.loss;
            ++batches;
        }
        result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }
    if (!result.model.all_finite()) {
        throw ValueError("training diverged to non-finite weights; lower the learning rate");
    }
    return result;
}

} // namespace debias
