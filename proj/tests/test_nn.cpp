#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "debias/data.hpp"
#include "debias/nn.hpp"
#include "debias/training.hpp"
#include "oracles.hpp"

using namespace debias;

namespace {

Matrix random_inputs(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    Rng rng(seed);
    Matrix x(rows, cols);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        x.data()[i] = rng.normal();
    }
    return x;
}

std::vector<ClassId> random_labels(std::size_t n, int classes, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ClassId> y(n);
    for (auto& v : y) {
        v = static_cast<ClassId>(rng.below(static_cast<std::uint64_t>(classes)));
    }
    return y;
}

// Random biases too, so bias gradients are exercised away from zero.
ParamVector random_model(const Architecture& arch, std::uint64_t seed) {
    ParamVector p = init_model(arch, seed);
    Rng rng(seed ^ 0xABCDEF);
    p.for_each([&](double& v, bool is_bias) {
        if (is_bias) {
            v = 0.3 * rng.normal();
        }
    });
    return p;
}

} // namespace

TEST(InitModel, SameSeedGivesIdenticalModels) {
    EXPECT_EQ(init_model({{2, 3}}, 7), init_model({{2, 3}}, 7));
    EXPECT_FALSE(init_model({{2, 3}}, 7) == init_model({{2, 3}}, 8));
}

TEST(InitModel, BiasesAreZeroAndWeightsWithinFanInBound) {
    const ParamVector p = init_model({{4, 8, 3}}, 123);
    for (const auto& layer : p.layers()) {
        EXPECT_TRUE(layer.bias.isZero(0.0));
        const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
        EXPECT_LE(layer.weight.cwiseAbs().maxCoeff(), bound);
    }
}

TEST(InitModel, SingleLayerSizeIsRejected) {
    EXPECT_THROW(init_model({{2}}, 0), ArchitectureError);
    EXPECT_THROW(init_model({{2, 0, 3}}, 0), ArchitectureError);
}

TEST(Forward, ZeroWeightsGiveZeroLogits) {
    const ParamVector p = ParamVector::zeros({{3, 5, 4}});
    EXPECT_TRUE(forward(p, random_inputs(6, 3, 1)).isZero(0.0));
}

TEST(Forward, IdentityLinearLayer) {
    ParamVector p = ParamVector::zeros({{2, 2}});
    p.layer(0).weight = Matrix::Identity(2, 2);
    Matrix x(1, 2);
    x << 1.0, 0.0;
    const Matrix z = forward(p, x);
    EXPECT_EQ(z(0, 0), 1.0);
    EXPECT_EQ(z(0, 1), 0.0);
}

TEST(Forward, MatchesHandRolledMatmul) {
    for (Activation act : {Activation::relu, Activation::tanh}) {
        const ParamVector p = random_model({{3, 5, 4}, act}, 11);
        const Matrix x = random_inputs(10, 3, 12);
        const Matrix z = forward(p, x);
        const auto expected = oracle::forward(p, x);
        ASSERT_EQ(z.rows(), 10);
        ASSERT_EQ(z.cols(), 4);
        for (Eigen::Index n = 0; n < 10; ++n) {
            for (Eigen::Index c = 0; c < 4; ++c) {
                EXPECT_NEAR(z(n, c), expected[static_cast<std::size_t>(n)][static_cast<std::size_t>(c)], 1e-12);
            }
        }
    }
}

TEST(Forward, WrongInputWidthThrows) {
    EXPECT_THROW(forward(ParamVector::zeros({{3, 2}}), Matrix::Zero(1, 4)), DimensionError);
}

TEST(Softmax, ConstantLogitsAreUniform) {
    for (double c : {-50.0, 0.0, 3.5, 700.0}) {
        const std::vector<double> z{c, c, c};
        for (double p : softmax(z)) {
            EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
        }
    }
}

TEST(Softmax, ClosedForm) {
    const std::vector<double> z{0.0, std::numbers::ln2};
    const auto p = softmax(z);
    EXPECT_NEAR(p[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(p[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
    const std::vector<double> z{1000.0, 0.0};
    const auto p = softmax(z);
    EXPECT_TRUE(std::isfinite(p[0]) && std::isfinite(p[1]));
    EXPECT_GE(p[0], 1.0 - 1e-12);
}

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> z(1 + rng.below(8));
        for (double& v : z) {
            v = 10.0 * rng.normal();
        }
        const auto p = softmax(z);
        double s = 0.0;
        for (double v : p) {
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
        const double shift = 5.0 * rng.normal();
        std::vector<double> shifted = z;
        for (double& v : shifted) {
            v += shift;
        }
        const auto q = softmax(shifted);
        for (std::size_t i = 0; i < p.size(); ++i) {
            EXPECT_NEAR(p[i], q[i], 1e-12);
        }
    }
}

TEST(Softmax, RejectsNonFiniteAndEmpty) {
    EXPECT_THROW(softmax(std::vector<double>{1.0, NAN}), ValueError);
    EXPECT_THROW(softmax(std::vector<double>{INFINITY, 0.0}), ValueError);
    EXPECT_THROW(softmax(std::vector<double>{}), DimensionError);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
    for (int c : {2, 3, 10}) {
        const Matrix z = Matrix::Constant(4, c, 0.7);
        EXPECT_NEAR(cross_entropy(z, std::vector<ClassId>{0, 1, 1, 0}), std::log(c), 1e-12);
    }
}

TEST(CrossEntropy, DecreasesAsTrueLogitGrows) {
    double previous = INFINITY;
    for (double t : {0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0}) {
        Matrix z(1, 3);
        z << t, 0.0, 0.0;
        const double loss = cross_entropy(z, std::vector<ClassId>{0});
        EXPECT_LT(loss, previous);
        EXPECT_GE(loss, 0.0);
        previous = loss;
    }
    EXPECT_LT(previous, 1e-16);
}

TEST(CrossEntropy, MatchesDirectExponentiation) {
    Matrix z(4, 3);
    z << 0.5, -1.2, 2.0, 3.0, 0.1, -0.4, -2.0, -2.5, 1.5, 0.0, 0.0, 0.3;
    const std::vector<ClassId> y{2, 0, 1, 1};
    EXPECT_NEAR(cross_entropy(z, y), oracle::naive_cross_entropy(z, y), 1e-10);
}

TEST(CrossEntropy, LabelErrors) {
    const Matrix z = Matrix::Zero(2, 3);
    EXPECT_THROW(cross_entropy(z, std::vector<ClassId>{0, 3}), LabelError);
    EXPECT_THROW(cross_entropy(z, std::vector<ClassId>{0}), DimensionError);
    try {
        cross_entropy(z, std::vector<ClassId>{0, -1});
        FAIL();
    } catch (const LabelError& e) {
        EXPECT_EQ(e.kind(), LabelError::Kind::out_of_range);
    }
}

TEST(Backward, MatchesFiniteDifferences) {
    for (Activation act : {Activation::tanh, Activation::relu}) {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            const ParamVector p = random_model({{3, 4, 3}, act}, seed);
            const Matrix x = random_inputs(7, 3, seed + 100);
            const auto y = random_labels(7, 3, seed + 200);
            const auto analytic = backward(p, x, y);
            const auto numeric = oracle::finite_difference(
                [&](const ParamVector& q) { return cross_entropy(forward(q, x), y); }, p);
            EXPECT_LE(oracle::max_relative_error(analytic.grads.flatten(), numeric), 1e-4)
                << "seed " << seed << " activation " << to_string(act);
            EXPECT_NEAR(analytic.loss, oracle::naive_cross_entropy(forward(p, x), y), 1e-12);
        }
    }
}

TEST(Backward, SaturatedCorrectBatchHasTinyGradient) {
    ParamVector p = ParamVector::zeros({{2, 2}});
    p.layer(0).weight << 40.0, 0.0, 0.0, 40.0;
    Matrix x(2, 2);
    x << 1.0, 0.0, 0.0, 1.0;
    const auto out = backward(p, x, std::vector<ClassId>{0, 1});
    EXPECT_LE(std::sqrt(out.grads.squared_norm()), 1e-6);
}

TEST(Backward, DuplicatedBatchLeavesLossAndGradUnchanged) {
    const ParamVector p = random_model({{3, 4, 3}}, 9);
    const Matrix x = random_inputs(5, 3, 10);
    const auto y = random_labels(5, 3, 11);
    Matrix xx(10, 3);
    xx << x, x;
    std::vector<ClassId> yy = y;
    yy.insert(yy.end(), y.begin(), y.end());
    const auto a = backward(p, x, y);
    const auto b = backward(p, xx, yy);
    EXPECT_NEAR(a.loss, b.loss, 1e-14);
    const auto ga = a.grads.flatten();
    const auto gb = b.grads.flatten();
    for (std::size_t i = 0; i < ga.size(); ++i) {
        EXPECT_NEAR(ga[i], gb[i], 1e-14);
    }
}

TEST(SgdStep, ZeroGradientAndVelocityIsIdentity) {
    ParamVector p = init_model({{3, 4, 2}}, 3);
    const ParamVector before = p;
    ParamVector v = ParamVector::zeros(p.architecture());
    sgd_step(p, v, ParamVector::zeros(p.architecture()), 0.1, 0.5);
    EXPECT_EQ(p, before);
}

TEST(SgdStep, ZeroMomentumIsPlainGradientDescent) {
    ParamVector p = init_model({{3, 2}}, 3);
    const ParamVector before = p;
    ParamVector g = init_model({{3, 2}}, 4);
    ParamVector v = ParamVector::zeros(p.architecture());
    sgd_step(p, v, g, 0.25, 0.0);
    const auto a = before.flatten();
    const auto b = p.flatten();
    const auto gf = g.flatten();
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(b[i], a[i] - 0.25 * gf[i]);
    }
}

TEST(SgdStep, TwoMomentumStepsDisplaceByHandRecurrence) {
    ParamVector p = ParamVector::zeros({{1, 1}});
    ParamVector g = ParamVector::zeros({{1, 1}});
    g.layer(0).weight(0, 0) = 2.0;
    g.layer(0).bias(0) = -4.0;
    ParamVector v = ParamVector::zeros(p.architecture());
    const double lr = 0.1;
    sgd_step(p, v, g, lr, 0.5);
    sgd_step(p, v, g, lr, 0.5);
    // v1 = g, v2 = 0.5 g + g, displacement = lr (g + 1.5 g).
    EXPECT_NEAR(p.layer(0).weight(0, 0), -lr * (2.0 + 1.5 * 2.0), 1e-15);
    EXPECT_NEAR(p.layer(0).bias(0), -lr * (-4.0 + 1.5 * -4.0), 1e-15);
}

TEST(SgdStep, ShapeMismatchThrows) {
    ParamVector p = ParamVector::zeros({{2, 2}});
    ParamVector v = ParamVector::zeros({{2, 2}});
    EXPECT_THROW(sgd_step(p, v, ParamVector::zeros({{2, 3}}), 0.1, 0.5), DimensionError);
    EXPECT_THROW(sgd_step(p, v, ParamVector::zeros({{2, 2}}), 0.0, 0.5), ValueError);
}

TEST(LrSchedule, StepDecay) {
    TrainConfig c;
    c.base_lr = 1e-4;
    c.step_every = 5;
    c.gamma = 0.9;
    EXPECT_EQ(lr_at_epoch(c, 0), 1e-4);
    EXPECT_EQ(lr_at_epoch(c, 4), 1e-4);
    EXPECT_NEAR(lr_at_epoch(c, 5), 9e-5, 1e-20);
    EXPECT_NEAR(lr_at_epoch(c, 10), 8.1e-5, 1e-20);
    c.gamma = 1.0;
    for (std::size_t e : {0, 3, 7, 100}) {
        EXPECT_EQ(lr_at_epoch(c, e), 1e-4);
    }
}

TEST(ArgmaxRows, LowestIndexWinsTies) {
    Matrix s(3, 3);
    s << 1, 1, 1, 0, 2, 2, 3, 1, 3;
    EXPECT_EQ(argmax_rows(s), (std::vector<ClassId>{0, 1, 0}));
}

TEST(Training, BitReproducible) {
    const Dataset ds = synth_gaussian(3, 30, 4, 0.5, 3);
    TrainConfig c;
    c.epochs = 4;
    c.base_lr = 0.05;
    c.batch_size = 7;
    c.seed = 99;
    const auto a = train(init_model({{4, 6, 3}}, 1), ds, c, cross_entropy_objective());
    const auto b = train(init_model({{4, 6, 3}}, 1), ds, c, cross_entropy_objective());
    EXPECT_EQ(a.model, b.model);
    EXPECT_EQ(a.epoch_loss, b.epoch_loss);
}
