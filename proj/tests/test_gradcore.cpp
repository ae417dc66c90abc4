#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "mrpn/gradcheck.hpp"
#include "mrpn/graph.hpp"
#include "mrpn/rng.hpp"
#include "mrpn/tensor.hpp"

using namespace mrpn;

namespace {

Tensor random_tensor(Shape shape, RngStream& rng, real lo = -1.0, real hi = 1.0,
                     bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

Tensor identity_matrix(int n) {
    Tensor t = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i) t.at(i, i) = 1;
    return t;
}

} // namespace

// ============================================================================
// affine
// ============================================================================

TEST(Affine, IdentityWeightPassesInputPlusBias) {
    Graph g;
    Tensor x = Tensor::matrix({{1, 2}});
    Tensor out = g.affine(x, identity_matrix(2), Tensor::from({2}, {1, 1}));
    EXPECT_DOUBLE_EQ(out.at(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(out.at(0, 1), 3.0);
}

TEST(Affine, ZeroInputPassesBias) {
    Graph g;
    RngStream rng(7);
    Tensor x = Tensor::matrix({{0, 0}});
    Tensor W = random_tensor({2, 2}, rng);
    Tensor out = g.affine(x, W, Tensor::from({2}, {5, -5}));
    EXPECT_DOUBLE_EQ(out.at(0, 0), 5.0);
    EXPECT_DOUBLE_EQ(out.at(0, 1), -5.0);
}

TEST(Affine, ShapeMismatchNamesBothShapes) {
    Graph g;
    Tensor x = Tensor::zeros({2, 3});
    Tensor W = Tensor::zeros({4, 2});
    try {
        g.affine(x, W, Tensor::zeros({2}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("[4,2]"), std::string::npos);
    }
}

TEST(Affine, GradMatchesFiniteDifferences) {
    RngStream rng(11);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor W = random_tensor({4, 2}, rng);
    Tensor b = random_tensor({2}, rng);
    const real err = grad_check(
        [&](Graph& g) { return g.sum_all(g.affine(x, W, b)); }, W);
    EXPECT_LT(err, 1e-6);
}

// ============================================================================
// activations
// ============================================================================

TEST(Activation, SigmoidSymmetryPoint) {
    Graph g;
    Tensor x = Tensor::row({0.0}, true);
    Tensor out = g.sigmoid(x);
    EXPECT_DOUBLE_EQ(out.at(0), 0.5);
    Tensor loss = g.sum_all(out);
    g.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Activation, ReluClampsNegative) {
    Graph g;
    Tensor out = g.relu(Tensor::row({-1, 2}));
    EXPECT_DOUBLE_EQ(out.at(0), 0.0);
    EXPECT_DOUBLE_EQ(out.at(1), 2.0);
}

TEST(Activation, SigmoidSaturationIsFiniteInBackward) {
    Graph g;
    Tensor x = Tensor::row({500.0}, true);
    Tensor out = g.sigmoid(x);
    EXPECT_DOUBLE_EQ(out.at(0), 1.0);
    Tensor loss = g.sum_all(out);
    g.backward(loss);
    EXPECT_TRUE(std::isfinite(x.grad()[0]));
    EXPECT_NEAR(x.grad()[0], 0.0, 1e-12);
}

// ============================================================================
// concat / stack / slice / mean
// ============================================================================

TEST(Concat, ShapeArithmetic) {
    Graph g;
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 5});
    Tensor out = g.concat({a, b});
    EXPECT_EQ(out.shape(), (Shape{2, 8}));
}

TEST(Concat, SingleInputIsIdentity) {
    Graph g;
    RngStream rng(3);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor out = g.concat({a});
    EXPECT_EQ(out.values(), a.values());
}

TEST(Concat, BatchMismatchThrows) {
    Graph g;
    EXPECT_THROW(g.concat({Tensor::zeros({2, 3}), Tensor::zeros({3, 3})}), ShapeError);
}

TEST(Concat, BackwardSlicesGradient) {
    Graph g;
    RngStream rng(5);
    Tensor a = random_tensor({2, 3}, rng, -1, 1, true);
    Tensor b = random_tensor({2, 2}, rng, -1, 1, true);
    Tensor loss = g.sum_all(g.concat({a, b}));
    g.backward(loss);
    for (real v : a.grad()) EXPECT_DOUBLE_EQ(v, 1.0);
    for (real v : b.grad()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(MeanRows, Average) {
    Graph g;
    Tensor out = g.mean_rows(Tensor::matrix({{1, 2}, {3, 4}}));
    EXPECT_DOUBLE_EQ(out.at(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(out.at(0, 1), 3.0);
}

TEST(MeanRows, GradientIsOneOverT) {
    Graph g;
    Tensor x = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}, {7, 8}});
    x.set_requires_grad(true);
    g.backward(g.sum_all(g.mean_rows(x)));
    for (real v : x.grad()) EXPECT_DOUBLE_EQ(v, 0.25);
}

// ============================================================================
// softmax / cross entropy
// ============================================================================

TEST(Softmax, UniformScores) {
    Graph g;
    Tensor out = g.softmax_rows(Tensor::row({1, 1, 1, 1}));
    for (int j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(out.at(0, j), 0.25);
}

TEST(Softmax, AnalyticTwoClass) {
    Graph g;
    Tensor out = g.softmax_rows(Tensor::row({0.0, std::log(2.0)}));
    EXPECT_NEAR(out.at(0, 0), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(out.at(0, 1), 2.0 / 3.0, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    RngStream rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        Graph g;
        Tensor s = random_tensor({4, 6}, rng, -5, 5);
        Tensor p = g.softmax_rows(s);
        Tensor shifted = s.clone();
        const real c = rng.uniform(-100, 100);
        for (auto& v : shifted.values()) v += c;
        Tensor p2 = g.softmax_rows(shifted);
        for (int i = 0; i < 4; ++i) {
            real sum = 0;
            for (int j = 0; j < 6; ++j) {
                sum += p.at(i, j);
                EXPECT_NEAR(p.at(i, j), p2.at(i, j), 1e-12);
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(CrossEntropy, OneHotAgainstUniformPairIsLogTwo) {
    Graph g;
    Tensor target = Tensor::row({1, 0});
    Tensor pred = Tensor::row({0.5, 0.5});
    EXPECT_NEAR(g.cross_entropy(target, pred).at(0), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, ExactOneHotPredictionIsZero) {
    Graph g;
    Tensor t = Tensor::row({0, 1, 0});
    EXPECT_NEAR(g.cross_entropy(t, t).at(0), 0.0, 1e-11);
}

TEST(CrossEntropy, TargetRowMustBeDistribution) {
    Graph g;
    EXPECT_THROW(g.cross_entropy(Tensor::row({0.5, 0.2}), Tensor::row({0.5, 0.5})),
                 ContractError);
}

TEST(CrossEntropy, FusedGradientIsSoftmaxMinusTarget) {
    RngStream rng(23);
    Tensor s = random_tensor({3, 5}, rng, -2, 2, true);
    Tensor target = Tensor::zeros({3, 5});
    for (int i = 0; i < 3; ++i) target.at(i, static_cast<int>(rng.uniform_int(5))) = 1;

    Graph g;
    Tensor p = g.softmax_rows(s);
    Tensor loss = g.cross_entropy(target, p);
    g.backward(loss);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j)
            EXPECT_NEAR(s.grad()[static_cast<std::size_t>(i) * 5 + j],
                        (p.at(i, j) - target.at(i, j)) / 3.0, 1e-12);

    const real err = grad_check(
        [&](Graph& gg) { return gg.cross_entropy(target, gg.softmax_rows(s)); }, s);
    EXPECT_LT(err, 1e-6);
}

// ============================================================================
// batchnorm
// ============================================================================

TEST(BatchNorm, TwoPointBatch) {
    Graph g;
    Tensor x = Tensor::matrix({{1}, {3}});
    Tensor gamma = Tensor::from({1}, {1});
    Tensor beta = Tensor::from({1}, {0});
    RunningStats stats = RunningStats::make(1);
    Tensor out = g.batchnorm(x, gamma, beta, stats, Mode::train);
    EXPECT_NEAR(out.at(0, 0), -1.0, 1e-4);
    EXPECT_NEAR(out.at(1, 0), 1.0, 1e-4);
}

TEST(BatchNorm, ZeroGammaYieldsBeta) {
    Graph g;
    RngStream rng(31);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor gamma = Tensor::zeros({3});
    Tensor beta = Tensor::from({3}, {2, -1, 7});
    RunningStats stats = RunningStats::make(3);
    Tensor out = g.batchnorm(x, gamma, beta, stats, Mode::train);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(out.at(i, j), beta.at(j));
}

TEST(BatchNorm, TrainOutputIsStandardized) {
    Graph g;
    RngStream rng(37);
    Tensor x = random_tensor({32, 5}, rng, -3, 3);
    Tensor gamma = Tensor::full({5}, 1);
    Tensor beta = Tensor::zeros({5});
    RunningStats stats = RunningStats::make(5);
    Tensor out = g.batchnorm(x, gamma, beta, stats, Mode::train);
    for (int j = 0; j < 5; ++j) {
        real m = 0, v = 0;
        for (int i = 0; i < 32; ++i) m += out.at(i, j);
        m /= 32;
        for (int i = 0; i < 32; ++i) v += (out.at(i, j) - m) * (out.at(i, j) - m);
        v /= 32;
        EXPECT_LT(std::abs(m), 1e-9);
        EXPECT_NEAR(v, 1.0, 1e-5);
    }
}

TEST(BatchNorm, TrainNeedsTwoRows) {
    Graph g;
    RunningStats stats = RunningStats::make(2);
    EXPECT_THROW(g.batchnorm(Tensor::zeros({1, 2}), Tensor::full({2}, 1), Tensor::zeros({2}),
                             stats, Mode::train),
                 ContractError);
}

TEST(BatchNorm, TestBeforeTrainUsesInitStatsAndWarns) {
    Graph g;
    Tensor x = Tensor::matrix({{2, 4}});
    Tensor gamma = Tensor::full({2}, 1);
    Tensor beta = Tensor::zeros({2});
    RunningStats stats = RunningStats::make(2);
    Tensor out = g.batchnorm(x, gamma, beta, stats, Mode::test);
    EXPECT_TRUE(stats.warned_uninitialized);
    EXPECT_NEAR(out.at(0, 0), 2.0 / std::sqrt(1.0 + 1e-5), 1e-12);
    EXPECT_NEAR(out.at(0, 1), 4.0 / std::sqrt(1.0 + 1e-5), 1e-12);
}

TEST(BatchNorm, RunningStatsConvergeGeometrically) {
    RngStream rng(41);
    Tensor x = random_tensor({8, 2}, rng, -2, 2);
    // batch statistics of x
    real bm[2], bv[2];
    for (int j = 0; j < 2; ++j) {
        real m = 0, v = 0;
        for (int i = 0; i < 8; ++i) m += x.at(i, j);
        m /= 8;
        for (int i = 0; i < 8; ++i) v += (x.at(i, j) - m) * (x.at(i, j) - m);
        v /= 8;
        bm[j] = m;
        bv[j] = v;
    }
    Tensor gamma = Tensor::full({2}, 1);
    Tensor beta = Tensor::zeros({2});
    RunningStats stats = RunningStats::make(2);
    real prev_gap = -1;
    for (int step = 0; step < 30; ++step) {
        Graph g;
        g.batchnorm(x, gamma, beta, stats, Mode::train);
        const real gap = std::abs(stats.mean.at(0) - bm[0]);
        if (step > 0 && prev_gap > 1e-14) EXPECT_NEAR(gap / prev_gap, 0.9, 1e-6);
        prev_gap = gap;
    }
    for (int j = 0; j < 2; ++j) {
        EXPECT_NEAR(stats.mean.at(j), bm[j], 1e-1 * std::abs(bm[j]) + 1e-2);
        EXPECT_NEAR(stats.var.at(j), bv[j], 1e-1 * bv[j] + 1e-2);
    }
}

// ============================================================================
// dropout
// ============================================================================

TEST(Dropout, RateZeroIsIdentityInBothModes) {
    Graph g;
    RngStream rng(43);
    Tensor x = random_tensor({4, 4}, rng);
    EXPECT_EQ(g.dropout(x, 0.0, Mode::train, rng).id(), x.id());
    EXPECT_EQ(g.dropout(x, 0.0, Mode::test, rng).id(), x.id());
}

TEST(Dropout, TestModeIsIdentityRegardlessOfRate) {
    Graph g;
    RngStream rng(47);
    Tensor x = random_tensor({4, 4}, rng);
    const auto before = rng.draw_count();
    Tensor out = g.dropout(x, 0.9, Mode::test, rng);
    EXPECT_EQ(out.id(), x.id());
    EXPECT_EQ(rng.draw_count(), before);
}

TEST(Dropout, TrainSurvivorFractionAndScaling) {
    Graph g;
    RngStream rng(53);
    const int n = 100000;
    Tensor x = Tensor::full({1, n}, 1.0);
    Tensor out = g.dropout(x, 0.5, Mode::train, rng);
    int survivors = 0;
    real mean_out = 0;
    for (real v : out.values()) {
        if (v != 0) ++survivors;
        mean_out += v;
    }
    mean_out /= n;
    EXPECT_NEAR(static_cast<real>(survivors) / n, 0.5, 0.01);
    EXPECT_NEAR(mean_out, 1.0, 0.02);
}

TEST(Dropout, RateOneRejected) {
    Graph g;
    RngStream rng(59);
    EXPECT_THROW(g.dropout(Tensor::zeros({2, 2}), 1.0, Mode::train, rng), ConfigError);
}

// ============================================================================
// backward
// ============================================================================

TEST(Backward, IdentityLeaf) {
    Graph g;
    Tensor x = Tensor::scalar(3.0, true);
    g.backward(x);
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(Backward, NonScalarLossRejected) {
    Graph g;
    EXPECT_THROW(g.backward(Tensor::zeros({2, 2})), ContractError);
}

TEST(Backward, SharedParameterAdditivityIsBitwise) {
    RngStream rng(61);
    Tensor theta = random_tensor({3, 2}, rng, -1, 1, true);
    std::vector<Tensor> inputs;
    for (int k = 0; k < 3; ++k) inputs.push_back(random_tensor({2, 3}, rng));

    // combined backward over the summed loss
    theta.zero_grad();
    {
        Graph g;
        Tensor total = g.add(g.add(g.sum_all(g.matmul(inputs[0], theta)),
                                   g.sum_all(g.matmul(inputs[1], theta))),
                             g.sum_all(g.matmul(inputs[2], theta)));
        g.backward(total);
    }
    const std::vector<real> combined = theta.grad();

    // per-term gradients, accumulated in the same (reverse-tape) order
    std::vector<std::vector<real>> per_term;
    for (int k = 0; k < 3; ++k) {
        theta.zero_grad();
        Graph g;
        g.backward(g.sum_all(g.matmul(inputs[static_cast<std::size_t>(k)], theta)));
        per_term.push_back(theta.grad());
    }
    std::vector<real> summed(combined.size(), 0.0);
    for (int k = 2; k >= 0; --k)
        for (std::size_t i = 0; i < summed.size(); ++i)
            summed[i] += per_term[static_cast<std::size_t>(k)][i];
    EXPECT_EQ(summed, combined);
}

// ============================================================================
// grad_check itself
// ============================================================================

TEST(GradCheck, QuadraticIsExactUpToRoundoff) {
    RngStream rng(67);
    Tensor theta = random_tensor({4, 4}, rng, -1, 1);
    const real err = grad_check(
        [&](Graph& g) { return g.sum_all(g.matmul(theta, theta)); }, theta);
    EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, SigmoidChainDepthFive) {
    RngStream rng(71);
    Tensor theta = random_tensor({1, 6}, rng, -1, 1);
    const real err = grad_check(
        [&](Graph& g) {
            Tensor h = theta;
            for (int d = 0; d < 5; ++d) h = g.sigmoid(h);
            return g.sum_all(h);
        },
        theta);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, ThroughBatchNorm) {
    RngStream rng(73);
    Tensor x = random_tensor({4, 3}, rng, -2, 2);
    Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({3}, rng, -0.5, 0.5);
    auto f = [&](Graph& g) {
        RunningStats stats = RunningStats::make(3);
        return g.sum_all(g.sigmoid(g.batchnorm(x, gamma, beta, stats, Mode::train)));
    };
    EXPECT_LT(grad_check(f, x), 1e-4);
    EXPECT_LT(grad_check(f, gamma), 1e-4);
    EXPECT_LT(grad_check(f, beta), 1e-4);
}

// ============================================================================
// finite-difference sweep over every op, 20 seeds
// ============================================================================

TEST(GradOracle, EveryOpTwentySeeds) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        RngStream rng(seed);
        Tensor x = random_tensor({3, 4}, rng, -2, 2);
        // keep relu inputs away from the kink so central differences are valid
        for (auto& v : x.values()) v += (v >= 0 ? 0.1 : -0.1);
        Tensor W = random_tensor({4, 3}, rng);
        Tensor b = random_tensor({3}, rng);
        Tensor gamma = random_tensor({4}, rng, 0.5, 1.5);
        Tensor beta = random_tensor({4}, rng, -0.5, 0.5);
        Tensor other = random_tensor({3, 4}, rng);
        Tensor target = Tensor::zeros({3, 3});
        for (int i = 0; i < 3; ++i) target.at(i, static_cast<int>(rng.uniform_int(3))) = 1;

        const std::vector<std::pair<const char*, LossFn>> cases = {
            {"affine", [&](Graph& g) { return g.sum_all(g.affine(x, W, b)); }},
            {"matmul", [&](Graph& g) { return g.sum_all(g.matmul(x, W)); }},
            {"relu", [&](Graph& g) { return g.sum_all(g.relu(x)); }},
            {"sigmoid", [&](Graph& g) { return g.sum_all(g.sigmoid(x)); }},
            {"tanh", [&](Graph& g) { return g.sum_all(g.tanh(x)); }},
            {"add", [&](Graph& g) { return g.sum_all(g.add(x, other)); }},
            {"scale", [&](Graph& g) { return g.sum_all(g.scale(x, 1.7)); }},
            {"concat", [&](Graph& g) { return g.sum_all(g.sigmoid(g.concat({x, other}))); }},
            {"stack_rows", [&](Graph& g) { return g.sum_all(g.sigmoid(g.stack_rows({x, other}))); }},
            {"slice_rows", [&](Graph& g) { return g.sum_all(g.sigmoid(g.slice_rows(x, 1, 3))); }},
            {"mean_rows", [&](Graph& g) { return g.sum_all(g.sigmoid(g.mean_rows(x))); }},
            {"softmax", [&](Graph& g) { return g.sum_all(g.sigmoid(g.softmax_rows(x))); }},
            {"cross_entropy",
             [&](Graph& g) { return g.cross_entropy(target, g.softmax_rows(g.matmul(x, W))); }},
            {"batchnorm", [&](Graph& g) {
                 RunningStats stats = RunningStats::make(4);
                 return g.sum_all(g.sigmoid(g.batchnorm(x, gamma, beta, stats, Mode::train)));
             }},
        };
        for (const auto& [name, f] : cases) {
            EXPECT_LT(grad_check(f, x), 1e-4) << name << " wrt x, seed " << seed;
        }
        EXPECT_LT(grad_check([&](Graph& g) { return g.sum_all(g.affine(x, W, b)); }, b), 1e-4);
        EXPECT_LT(grad_check(
                      [&](Graph& g) {
                          RunningStats stats = RunningStats::make(4);
                          return g.sum_all(
                              g.sigmoid(g.batchnorm(x, gamma, beta, stats, Mode::train)));
                      },
                      gamma),
                  1e-4);
    }
}

TEST(Tensor, ShapeInvariants) {
    EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
    EXPECT_THROW(Tensor::zeros({0, 2}), ShapeError);
    Tensor t = Tensor::zeros({2, 3});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.grad().size(), t.values().size());
}
