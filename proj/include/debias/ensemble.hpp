#pragma once

#include <algorithm>
#include <string_view>
#include <vector>

#include "debias/nn.hpp"

namespace debias {

enum class EnsembleMode { avg_prob, logit_sum };

inline std::string_view to_string(EnsembleMode m) {
    return m == EnsembleMode::avg_prob ? "avg_prob" : "logit_sum";
}

inline EnsembleMode parse_ensemble_mode(std::string_view name) {
    if (name == "avg_prob") {
        return EnsembleMode::avg_prob;
    }
    if (name == "logit_sum") {
        return EnsembleMode::logit_sum;
    }
    throw ValueError("unknown ensemble mode '" + std::string(name) + "'");
}

/// Members combined by probability averaging or logit summation. By
/// convention the anchor comes first, followed by the trained members.
struct EnsembleModel {
    std::vector<ParamVector> members;
    EnsembleMode mode = EnsembleMode::logit_sum;

    void validate() const {
        if (members.empty()) {
            throw ValueError("ensemble has no members");
        }
        const auto& first = members.front().architecture();
        for (const auto& m : members) {
            if (m.architecture().input_dim() != first.input_dim() ||
                m.architecture().class_count() != first.class_count()) {
                throw DimensionError("ensemble members disagree on input dimension or class count");
            }
        }
    }
};

inline EnsembleModel make_ensemble(const ParamVector& anchor, const std::vector<ParamVector>& members,
                                   EnsembleMode mode, bool include_anchor = true) {
    EnsembleModel e;
    e.mode = mode;
    if (include_anchor) {
        e.members.push_back(anchor);
    }
    e.members.insert(e.members.end(), members.begin(), members.end());
    e.validate();
    return e;
}

namespace detail {

// Elementwise sum of member outputs. Each cell is summed in sorted order,
// which makes the result bit-identical under any member permutation.
inline Matrix sorted_sum(const std::vector<Matrix>& parts) {
    Matrix out(parts.front().rows(), parts.front().cols());
    std::vector<double> cell(parts.size());
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        for (std::size_t m = 0; m < parts.size(); ++m) {
            cell[m] = parts[m].data()[i];
        }
        std::sort(cell.begin(), cell.end());
        double s = 0.0;
        for (double v : cell) {
            s += v;
        }
        out.data()[i] = s;
    }
    return out;
}

} // namespace detail

// Rowwise sum of raw member logits.
inline Matrix ensemble_logit_sum(const EnsembleModel& e, const Matrix& inputs) {
    e.validate();
    std::vector<Matrix> logits;
    logits.reserve(e.members.size());
    for (const auto& m : e.members) {
        logits.push_back(forward(m, inputs));
    }
    return detail::sorted_sum(logits);
}

/// avg_prob: rowwise mean of member softmax outputs.
/// logit_sum: rowwise sum of raw logits (unnormalized).
inline Matrix ensemble_scores(const EnsembleModel& e, const Matrix& inputs) {
    if (e.mode == EnsembleMode::logit_sum) {
        return ensemble_logit_sum(e, inputs);
    }
    e.validate();
    std::vector<Matrix> probs;
    probs.reserve(e.members.size());
    for (const auto& m : e.members) {
        probs.push_back(softmax_rows(forward(m, inputs)));
    }
    return detail::sorted_sum(probs) / static_cast<double>(e.members.size());
}

inline std::vector<ClassId> ensemble_predict(const EnsembleModel& e, const Matrix& inputs) {
    return argmax_rows(ensemble_scores(e, inputs));
}

} // namespace debias
