#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "debias/ensemble.hpp"
#include "oracles.hpp"

using namespace debias;

namespace {

// Single linear [2,2] layer whose logits equal the given biases for a zero
// input.
ParamVector constant_logits(double a, double b) {
    ParamVector p = ParamVector::zeros({{2, 2}});
    p.layer(0).bias << a, b;
    return p;
}

Matrix random_inputs(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    Rng rng(seed);
    Matrix x(rows, cols);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        x.data()[i] = rng.normal();
    }
    return x;
}

ParamVector with_random_biases(ParamVector p, std::uint64_t seed) {
    Rng rng(seed);
    p.for_each([&](double& v, bool is_bias) {
        if (is_bias) {
            v = rng.normal();
        }
    });
    return p;
}

} // namespace

TEST(EnsembleScores, AvgProbHandArithmetic) {
    // softmax(ln 0.6, ln 0.4) = (0.6, 0.4).
    const EnsembleModel e{{constant_logits(std::log(0.6), std::log(0.4)), constant_logits(std::log(0.2), std::log(0.8))},
                          EnsembleMode::avg_prob};
    const Matrix s = ensemble_scores(e, Matrix::Zero(1, 2));
    EXPECT_NEAR(s(0, 0), 0.4, 1e-15);
    EXPECT_NEAR(s(0, 1), 0.6, 1e-15);
    EXPECT_EQ(ensemble_predict(e, Matrix::Zero(1, 2)), std::vector<ClassId>{1});
}

TEST(EnsembleScores, LogitSumHandArithmetic) {
    const EnsembleModel e{{constant_logits(2, 1), constant_logits(0, 3)}, EnsembleMode::logit_sum};
    const Matrix s = ensemble_scores(e, Matrix::Zero(1, 2));
    EXPECT_EQ(s(0, 0), 2.0);
    EXPECT_EQ(s(0, 1), 4.0);
}

TEST(EnsembleScores, IdenticalMembersReproduceSingleModel) {
    const ParamVector m = with_random_biases(init_model({{4, 6, 3}}, 1), 2);
    const Matrix x = random_inputs(50, 4, 3);
    for (EnsembleMode mode : {EnsembleMode::avg_prob, EnsembleMode::logit_sum}) {
        for (std::size_t k : {1, 2, 3, 5}) {
            const EnsembleModel e{std::vector<ParamVector>(k, m), mode};
            EXPECT_EQ(ensemble_predict(e, x), predict(m, x));
        }
    }
    const EnsembleModel avg{std::vector<ParamVector>(3, m), EnsembleMode::avg_prob};
    const Matrix s = ensemble_scores(avg, x);
    const Matrix p = softmax_rows(forward(m, x));
    EXPECT_LE((s - p).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(EnsembleScores, OppositeLogitsTieToClassZero) {
    ParamVector a = with_random_biases(init_model({{3, 4}}, 5), 6);
    ParamVector b = a;
    b *= -1.0;
    const EnsembleModel e{{a, b}, EnsembleMode::logit_sum};
    const auto pred = ensemble_predict(e, random_inputs(20, 3, 7));
    EXPECT_TRUE(std::all_of(pred.begin(), pred.end(), [](ClassId c) { return c == 0; }));
}

TEST(EnsembleScores, AvgProbRowsSumToOne) {
    std::vector<ParamVector> members;
    for (std::uint64_t s = 0; s < 4; ++s) {
        members.push_back(with_random_biases(init_model({{5, 7, 6}}, s), s + 10));
    }
    const Matrix scores = ensemble_scores({members, EnsembleMode::avg_prob}, random_inputs(100, 5, 1));
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        EXPECT_NEAR(scores.row(r).sum(), 1.0, 1e-9);
    }
}

TEST(EnsemblePredict, MemberOrderInvariance) {
    std::vector<ParamVector> members;
    for (std::uint64_t s = 0; s < 4; ++s) {
        members.push_back(with_random_biases(init_model({{5, 7, 6}}, s), s + 10));
    }
    const Matrix x = random_inputs(200, 5, 2);
    for (EnsembleMode mode : {EnsembleMode::avg_prob, EnsembleMode::logit_sum}) {
        const Matrix reference = ensemble_scores({members, mode}, x);
        std::vector<std::size_t> order{0, 1, 2, 3};
        while (std::next_permutation(order.begin(), order.end())) {
            std::vector<ParamVector> permuted;
            for (std::size_t i : order) {
                permuted.push_back(members[i]);
            }
            EXPECT_EQ(ensemble_scores({permuted, mode}, x), reference);
        }
    }
}

TEST(EnsemblePredict, LogitSumIgnoresPerMemberConstants) {
    const ParamVector a = with_random_biases(init_model({{3, 4}}, 1), 2);
    const ParamVector b = with_random_biases(init_model({{3, 4}}, 3), 4);
    ParamVector shifted = b;
    shifted.layer(0).bias.array() += 2.5;
    const Matrix x = random_inputs(100, 3, 5);
    EXPECT_EQ(ensemble_predict({{a, b}, EnsembleMode::logit_sum}, x),
              ensemble_predict({{a, shifted}, EnsembleMode::logit_sum}, x));
}

TEST(MakeEnsemble, AnchorFirstAndOptional) {
    const ParamVector anchor = init_model({{2, 2}}, 1);
    const ParamVector m = init_model({{2, 2}}, 2);
    const auto with = make_ensemble(anchor, {m}, EnsembleMode::logit_sum);
    ASSERT_EQ(with.members.size(), 2u);
    EXPECT_EQ(with.members[0], anchor);
    const auto without = make_ensemble(anchor, {m}, EnsembleMode::avg_prob, false);
    ASSERT_EQ(without.members.size(), 1u);
    EXPECT_EQ(without.mode, EnsembleMode::avg_prob);
}

TEST(MakeEnsemble, ValidationErrors) {
    EXPECT_THROW(EnsembleModel{}.validate(), ValueError);
    EXPECT_THROW(make_ensemble(init_model({{2, 2}}, 1), {init_model({{2, 3}}, 1)}, EnsembleMode::logit_sum),
                 DimensionError);
    EXPECT_THROW(parse_ensemble_mode("vote"), ValueError);
    EXPECT_EQ(parse_ensemble_mode("avg_prob"), EnsembleMode::avg_prob);
    EXPECT_EQ(parse_ensemble_mode(to_string(EnsembleMode::logit_sum)), EnsembleMode::logit_sum);
}
