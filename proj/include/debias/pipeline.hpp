#pragma once

// Training stages: the (biased) anchor, counter-biased members, and the
// parameter-averaging baselines.

#include <string_view>
#include <vector>

#include "debias/data.hpp"
#include "debias/nn.hpp"
#include "debias/regularizers.hpp"
#include "debias/training.hpp"

namespace debias {

enum class MemberMode { from_scratch, regularized_finetune };

inline std::string_view to_string(MemberMode m) {
    return m == MemberMode::from_scratch ? "from_scratch" : "regularized_finetune";
}

inline MemberMode parse_member_mode(std::string_view name) {
    if (name == "from_scratch") {
        return MemberMode::from_scratch;
    }
    if (name == "regularized_finetune") {
        return MemberMode::regularized_finetune;
    }
    throw ValueError("unknown member mode '" + std::string(name) + "'");
}

struct MemberSpec {
    MemberMode mode = MemberMode::regularized_finetune;
    RegConfig reg;  // anchor is filled in by build_members when absent
    TrainConfig train;
    std::size_t subset_index = 0;
};

inline void require_matching_arch(const Architecture& arch, const Dataset& ds) {
    arch.validate();
    if (arch.input_dim() != ds.dim() || arch.class_count() != static_cast<std::size_t>(ds.class_count)) {
        throw DimensionError("architecture does not match the dataset's dimension or class count");
    }
}

// Plain cross-entropy training from a fresh seeded initialization.
inline TrainResult pretrain(const Dataset& ds, const Architecture& arch, const TrainConfig& config) {
    require_matching_arch(arch, ds);
    return train(init_model(arch, config.seed), ds, config, cross_entropy_objective());
}

inline TrainResult train_from_scratch(const Dataset& subset, const Architecture& arch, const TrainConfig& config) {
    return pretrain(subset, arch, config);
}

/// Fine-tunes from the anchor with the proximal and weight-decay penalties
/// added to cross-entropy. reg.anchor, when present, must equal anchor.
inline TrainResult finetune_regularized(const ParamVector& anchor, const Dataset& subset, RegConfig reg,
                                        const TrainConfig& config) {
    require_matching_arch(anchor.architecture(), subset);
    if (reg.anchor) {
        if (!(*reg.anchor == anchor)) {
            throw ValueError("regularization anchor differs from the starting model");
        }
    } else {
        reg.anchor = anchor;
    }
    return train(anchor, subset, config, regularized(cross_entropy_objective(), std::move(reg)));
}

/// Trains one member per spec. Member i runs with seed
/// derive_seed(spec.train.seed, i), so identical specs still give distinct
/// but reproducible members.
inline std::vector<ParamVector> build_members(const ParamVector& anchor, const std::vector<Dataset>& subsets,
                                              const std::vector<MemberSpec>& specs) {
    std::vector<ParamVector> members;
    members.reserve(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const MemberSpec& spec = specs[i];
        if (spec.subset_index >= subsets.size()) {
            throw ValueError("member " + std::to_string(i) + " refers to subset " + std::to_string(spec.subset_index) +
                             " but only " + std::to_string(subsets.size()) + " exist");
        }
        TrainConfig config = spec.train;
        config.seed = derive_seed(spec.train.seed, i);
        const Dataset& subset = subsets[spec.subset_index];
        if (spec.mode == MemberMode::from_scratch) {
            members.push_back(train_from_scratch(subset, anchor.architecture(), config).model);
        } else {
            members.push_back(finetune_regularized(anchor, subset, spec.reg, config).model);
        }
    }
    return members;
}

// Coordinatewise arithmetic mean.
inline ParamVector average_parameters(const std::vector<ParamVector>& models) {
    if (models.empty()) {
        throw ValueError("cannot average an empty model list");
    }
    ParamVector sum = models.front();
    for (std::size_t i = 1; i < models.size(); ++i) {
        if (models[i].architecture() != sum.architecture()) {
            throw DimensionError("cannot average models with different architectures");
        }
        sum += models[i];
    }
    sum *= 1.0 / static_cast<double>(models.size());
    return sum;
}

/// Average-then-train baseline: the mean model is trained further with plain
/// cross-entropy on a balanced set.
inline TrainResult average_then_train(const std::vector<ParamVector>& models, const Dataset& balanced,
                                      const TrainConfig& config) {
    ParamVector start = average_parameters(models);
    require_matching_arch(start.architecture(), balanced);
    return train(std::move(start), balanced, config, cross_entropy_objective());
}

// Distance ||theta - anchor|| over every coordinate.
inline double anchor_distance(const ParamVector& theta, const ParamVector& anchor) {
    return std::sqrt((theta - anchor).squared_norm());
}

} // namespace debias
