#pragma once

// Knowledge distillation of an ensemble into one student network.
//
// soft_kl:        alpha * T^2 * mean_rows KL(p || softmax(z / T))
//                   + (1 - alpha) * cross_entropy(z, y)
//                 where p = softmax(logit_sum / (K * T)).
// raw_logit_mse:  mean over all entries of (z - logit_sum)^2, the student
//                 regressing directly onto the teacher's summed logits.

#include <cmath>
#include <string_view>

#include "debias/data.hpp"
#include "debias/ensemble.hpp"
#include "debias/nn.hpp"
#include "debias/training.hpp"

namespace debias {

enum class DistillVariant { soft_kl, raw_logit_mse };

inline std::string_view to_string(DistillVariant v) {
    return v == DistillVariant::soft_kl ? "soft_kl" : "raw_logit_mse";
}

inline DistillVariant parse_distill_variant(std::string_view name) {
    if (name == "soft_kl") {
        return DistillVariant::soft_kl;
    }
    if (name == "raw_logit_mse") {
        return DistillVariant::raw_logit_mse;
    }
    throw ValueError("unknown distillation variant '" + std::string(name) + "'");
}

struct DistillConfig {
    double temperature = 2.0;
    double alpha = 0.5;
    DistillVariant variant = DistillVariant::soft_kl;
    Architecture student_arch;
    TrainConfig train;

    void validate() const {
        if (!(temperature > 0.0) || !std::isfinite(temperature)) {
            throw ValueError("temperature must be positive");
        }
        if (!(alpha >= 0.0 && alpha <= 1.0)) {
            throw ValueError("alpha must lie in [0, 1]");
        }
        student_arch.validate();
        train.validate();
    }
};

// Softmax of the member-averaged logits at the given temperature.
inline Matrix soft_targets(const EnsembleModel& e, const Matrix& inputs, double temperature) {
    if (!(temperature > 0.0)) {
        throw ValueError("temperature must be positive");
    }
    const double scale = static_cast<double>(e.members.size()) * temperature;
    return softmax_rows(ensemble_logit_sum(e, inputs) / scale);
}

// What the student is trained against: soft targets for soft_kl, the raw
// logit sum for raw_logit_mse.
inline Matrix teacher_signal(const EnsembleModel& e, const Matrix& inputs, const DistillConfig& config) {
    if (config.variant == DistillVariant::soft_kl) {
        return soft_targets(e, inputs, config.temperature);
    }
    return ensemble_logit_sum(e, inputs);
}

namespace detail {

inline void require_same_dims(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError("student logits and teacher signal have different shapes");
    }
}

} // namespace detail

inline double kd_loss(const Matrix& student_logits, const Matrix& teacher, std::span<const ClassId> hard_labels,
                      const DistillConfig& config) {
    detail::require_same_dims(student_logits, teacher);
    if (student_logits.rows() == 0) {
        throw DimensionError("kd loss of an empty batch");
    }
    const auto n = static_cast<double>(student_logits.rows());
    if (config.variant == DistillVariant::raw_logit_mse) {
        return (student_logits - teacher).squaredNorm() / static_cast<double>(student_logits.size());
    }
    const double t = config.temperature;
    double loss = 0.0;
    if (config.alpha > 0.0) {
        const Matrix log_q = log_softmax_rows(student_logits / t);
        double kl = 0.0;
        for (Eigen::Index i = 0; i < teacher.size(); ++i) {
            const double p = teacher.data()[i];
            if (p > 0.0) {
                kl += p * (std::log(p) - log_q.data()[i]);
            }
        }
        loss += config.alpha * t * t * kl / n;
    }
    if (config.alpha < 1.0) {
        loss += (1.0 - config.alpha) * cross_entropy(student_logits, hard_labels);
    }
    return loss;
}

// d kd_loss / d student_logits.
inline Matrix kd_logit_gradient(const Matrix& student_logits, const Matrix& teacher,
                                std::span<const ClassId> hard_labels, const DistillConfig& config) {
    detail::require_same_dims(student_logits, teacher);
    if (config.variant == DistillVariant::raw_logit_mse) {
        return 2.0 * (student_logits - teacher) / static_cast<double>(student_logits.size());
    }
    const double t = config.temperature;
    Matrix g = Matrix::Zero(student_logits.rows(), student_logits.cols());
    if (config.alpha > 0.0) {
        const Matrix q = softmax_rows(student_logits / t);
        g += config.alpha * t * (q - teacher) / static_cast<double>(student_logits.rows());
    }
    if (config.alpha < 1.0) {
        g += (1.0 - config.alpha) * cross_entropy_logit_gradient(student_logits, hard_labels);
    }
    return g;
}

inline LossAndGrad kd_backward(const ParamVector& student, const Matrix& inputs, const Matrix& teacher,
                               std::span<const ClassId> hard_labels, const DistillConfig& config) {
    ForwardTrace trace = forward_trace(student, inputs);
    LossAndGrad out;
    out.loss = kd_loss(trace.logits, teacher, hard_labels, config);
    out.grads = backward_from_logits(student, trace, kd_logit_gradient(trace.logits, teacher, hard_labels, config));
    return out;
}

/// Trains a fresh student on ds against the ensemble's teacher signal.
/// Teacher outputs are computed once for the whole dataset.
inline TrainResult distill(const EnsembleModel& e, const Dataset& ds, const DistillConfig& config) {
    config.validate();
    e.validate();
    ds.validate();
    if (config.student_arch.class_count() != static_cast<std::size_t>(ds.class_count) ||
        config.student_arch.input_dim() != ds.dim()) {
        throw DimensionError("student architecture does not match the dataset");
    }
    const Matrix teacher = teacher_signal(e, ds.features, config);
    BatchObjective objective = [&](const ParamVector& student, const Batch& batch) {
        Matrix rows(static_cast<Eigen::Index>(batch.rows.size()), teacher.cols());
        for (std::size_t i = 0; i < batch.rows.size(); ++i) {
            rows.row(static_cast<Eigen::Index>(i)) = teacher.row(static_cast<Eigen::Index>(batch.rows[i]));
        }
        return kd_backward(student, batch.inputs, rows, batch.labels, config);
    };
    return train(init_model(config.student_arch, config.train.seed), ds, config.train, objective);
}

} // namespace debias
