#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "qmap/nn.hpp"
#include "qmap/training.hpp"
#include "test_support.hpp"

using namespace qmap;
using namespace qmap::nn;
using qmap::testing::central_gradient;
using qmap::testing::relative_error;

namespace {

/// Loss = <U, net(X)> so that d loss / d out = U.
double probe_loss(DenseNet net, const Eigen::VectorXd& params, const Eigen::MatrixXd& X, const Eigen::MatrixXd& U) {
    net.unpack(params);
    return (net.forward(X).array() * U.array()).sum();
}

Eigen::VectorXd packed(const DenseNet& net) {
    Eigen::VectorXd p(static_cast<Eigen::Index>(net.num_params()));
    net.pack(p);
    return p;
}

}  // namespace

TEST(DenseNetForward, IdentityLayerPassesInputThrough) {
    DenseLayer l{Eigen::MatrixXd::Identity(3, 3), Eigen::VectorXd::Zero(3), Activation::identity};
    const DenseNet net({l});
    const Eigen::Vector3d x(0.5, -2.0, 7.0);
    EXPECT_EQ(net.forward(Eigen::VectorXd(x)), Eigen::VectorXd(x));
}

TEST(DenseNetForward, ReluClampsNegatives) {
    DenseLayer l{Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2), Activation::relu};
    DenseLayer id{Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2), Activation::identity};
    const DenseNet net({l, id});
    EXPECT_EQ(net.forward(Eigen::VectorXd(Eigen::Vector2d(-1, 2))), Eigen::VectorXd(Eigen::Vector2d(0, 2)));
}

TEST(DenseNetForward, MatchesStraightLineOracle) {
    Rng rng(9);
    const auto net = DenseNet::make({5, 7, 6, 3}, rng);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> x(5);
        for (auto& v : x) v = rng.normal();
        std::vector<double> h = x;
        for (std::size_t k = 0; k < net.layers().size(); ++k) {
            const auto& l = net.layers()[k];
            h = oracle::dense_layer(h, l.weight, l.bias, l.activation == Activation::relu);
        }
        const Eigen::VectorXd y = net.forward(Eigen::Map<const Eigen::VectorXd>(x.data(), 5).eval());
        for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(y[static_cast<Eigen::Index>(i)], h[i], 1e-12);
    }
}

TEST(DenseNetForward, RejectsWrongInputSize) {
    Rng rng(1);
    const auto net = DenseNet::make({3, 2}, rng);
    EXPECT_THROW(net.forward(Eigen::MatrixXd(Eigen::MatrixXd::Zero(4, 1))), UsageError);
    EXPECT_THROW(DenseNet::make({3}, rng), UsageError);
    DenseLayer a{Eigen::MatrixXd::Zero(2, 3), Eigen::VectorXd::Zero(2), Activation::relu};
    DenseLayer b{Eigen::MatrixXd::Zero(1, 4), Eigen::VectorXd::Zero(1), Activation::identity};
    EXPECT_THROW(DenseNet({a, b}), UsageError);
}

TEST(DenseNetBackward, MatchesFiniteDifferencesOnRandomNets) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        auto net = DenseNet::make({4, 6, 5, 3}, rng);
        for (auto& l : net.layers()) l.bias = Eigen::VectorXd::Random(l.out()) * 0.3;
        ASSERT_LE(net.num_params(), 200u);
        const Eigen::MatrixXd X = standard_normal(4, 3, rng);
        const Eigen::MatrixXd U = standard_normal(3, 3, rng);
        ForwardCache cache;
        net.forward(X, &cache);
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.num_params()));
        const Eigen::MatrixXd dX = net.backward(cache, U, grad);

        const Eigen::VectorXd p = packed(net);
        const auto fd = central_gradient([&](const Eigen::VectorXd& q) { return probe_loss(net, q, X, U); }, p);
        EXPECT_LT(relative_error(grad, fd), 1e-5) << "seed " << seed;

        const Eigen::VectorXd xflat = Eigen::Map<const Eigen::VectorXd>(X.data(), X.size());
        const auto fdx = central_gradient(
            [&](const Eigen::VectorXd& v) {
                return (net.forward(Eigen::MatrixXd(Eigen::Map<const Eigen::MatrixXd>(v.data(), 4, 3))).array() * U.array()).sum();
            },
            xflat);
        EXPECT_LT(relative_error(Eigen::Map<const Eigen::VectorXd>(dX.data(), dX.size()), fdx), 1e-5);
    }
}

TEST(DenseNetBackward, ZeroUpstreamGivesZeroGradient) {
    Rng rng(2);
    const auto net = DenseNet::make({3, 4, 2}, rng);
    ForwardCache cache;
    net.forward(standard_normal(3, 5, rng), &cache);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.num_params()));
    net.backward(cache, Eigen::MatrixXd::Zero(2, 5), grad);
    EXPECT_TRUE((grad.array() == 0.0).all());
}

TEST(DenseNetBackward, LinearNetWeightGradientIsOuterProduct) {
    Rng rng(4);
    const auto net = DenseNet::make({3, 1}, rng);
    const Eigen::Vector3d x(0.2, -1.0, 2.5);
    ForwardCache cache;
    net.forward(Eigen::MatrixXd(x), &cache);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(4);
    const double u = 1.7;
    net.backward(cache, Eigen::MatrixXd::Constant(1, 1, u), grad);
    for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(grad[i], u * x[i]);
    EXPECT_DOUBLE_EQ(grad[3], u);
}

TEST(DenseNetBackward, DeadReluUnitPassesNoGradient) {
    DenseLayer l1{Eigen::MatrixXd::Identity(2, 2), Eigen::Vector2d(-10.0, 0.0), Activation::relu};
    DenseLayer l2{Eigen::MatrixXd::Ones(1, 2), Eigen::VectorXd::Zero(1), Activation::identity};
    const DenseNet net({l1, l2});
    ForwardCache cache;
    net.forward(Eigen::MatrixXd(Eigen::Vector2d(1.0, 1.0)), &cache);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.num_params()));
    const Eigen::MatrixXd dx = net.backward(cache, Eigen::MatrixXd::Ones(1, 1), grad);
    // layer 1 packs W (col-major 2×2) then b; unit 0 is dead
    EXPECT_EQ(grad[0], 0.0);
    EXPECT_EQ(grad[2], 0.0);
    EXPECT_EQ(grad[4], 0.0);
    EXPECT_EQ(dx(0, 0), 0.0);
    EXPECT_EQ(dx(1, 0), 1.0);
}

TEST(DenseNetSerialization, PackUnpackAndJsonAreExact) {
    Rng rng(5);
    const auto net = DenseNet::make({4, 8, 2}, rng);
    auto other = DenseNet::make({4, 8, 2}, rng);
    other.unpack(packed(net));
    EXPECT_EQ(packed(other), packed(net));
    const auto back = DenseNet::from_json(nlohmann::json::parse(net.to_json().dump()));
    EXPECT_EQ(packed(back), packed(net));
    EXPECT_EQ(back.layers()[0].activation, Activation::relu);
    EXPECT_EQ(back.layers()[1].activation, Activation::identity);
}

TEST(Reparameterize, ClosedFormCases) {
    const GaussianLatent q{Eigen::Vector2d(0.3, -1.0), Eigen::Vector2d(0.0, 0.0)};
    EXPECT_EQ(reparameterize(q, Eigen::Vector2d::Zero()), q.mu);
    EXPECT_EQ(reparameterize(q, Eigen::Vector2d::Ones()), (q.mu.array() + 1.0).matrix());
}

TEST(Reparameterize, MonteCarloMeanAndSpread) {
    const GaussianLatent q{Eigen::Vector2d(0.7, -2.0), Eigen::Vector2d(std::log(0.25), std::log(4.0))};
    Rng rng(31);
    const int n = 100000;
    Eigen::Vector2d sum = Eigen::Vector2d::Zero(), sq = Eigen::Vector2d::Zero();
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd z = reparameterize(q, Eigen::Vector2d(rng.normal(), rng.normal()));
        sum += z;
        sq += z.cwiseProduct(z);
    }
    const Eigen::Vector2d mean = sum / n;
    const Eigen::Vector2d sd(0.5, 2.0);
    for (int d = 0; d < 2; ++d) {
        EXPECT_NEAR(mean[d], q.mu[d], 3.0 * sd[d] / std::sqrt(n));
        EXPECT_NEAR(std::sqrt(sq[d] / n - mean[d] * mean[d]), sd[d], 0.02 * sd[d]);
    }
}

TEST(Reparameterize, GradientCoefficients) {
    // dz/dmu = 1, dz/dlog_var = 0.5 σ ε
    const double mu = 0.4, lv = 0.6, eps = -1.3;
    auto z = [&](double m, double l) {
        return reparameterize({Eigen::VectorXd::Constant(1, m), Eigen::VectorXd::Constant(1, l)},
                              Eigen::VectorXd::Constant(1, eps))[0];
    };
    EXPECT_NEAR((z(mu + 1e-6, lv) - z(mu - 1e-6, lv)) / 2e-6, 1.0, 1e-8);
    EXPECT_NEAR((z(mu, lv + 1e-6) - z(mu, lv - 1e-6)) / 2e-6, 0.5 * std::exp(0.5 * lv) * eps, 1e-8);
}

TEST(GumbelSoftmax, SymmetryLimitAndSimplex) {
    const Eigen::Vector3d equal(0.4, 0.4, 0.4), u(0.3, 0.3, 0.3);
    const Eigen::VectorXd c = gumbel_softmax(equal, 0.5, u);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(c[k], c[0]);
    EXPECT_NEAR(c[0], 1.0 / 3.0, 1e-15);

    const Eigen::VectorXd sharp = gumbel_softmax(Eigen::Vector3d(0.0, 3.0, 0.5), 0.01, Eigen::Vector3d(0.5, 0.5, 0.5));
    EXPECT_GT(sharp.maxCoeff(), 0.99);

    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        const Eigen::VectorXd logits = Eigen::VectorXd::Random(4) * 3.0;
        const Eigen::VectorXd uu = open_uniform(4, 1, rng);
        const Eigen::VectorXd y = gumbel_softmax(logits, 0.2 + rng.uniform(), uu);
        EXPECT_NEAR(y.sum(), 1.0, 1e-9);
        EXPECT_GT(y.minCoeff(), 0.0);
    }
}

TEST(GumbelSoftmax, RejectsBadArguments) {
    const Eigen::Vector2d l(0.0, 1.0);
    EXPECT_THROW(gumbel_softmax(l, 0.0, Eigen::Vector2d(0.5, 0.5)), UsageError);
    EXPECT_THROW(gumbel_softmax(l, -1.0, Eigen::Vector2d(0.5, 0.5)), UsageError);
    EXPECT_THROW(gumbel_softmax(l, 0.5, Eigen::Vector2d(0.0, 0.5)), UsageError);
    EXPECT_THROW(gumbel_softmax(l, 0.5, Eigen::Vector2d(1.0, 0.5)), UsageError);
}

TEST(GumbelSoftmax, BackwardMatchesFiniteDifferences) {
    const Eigen::Vector3d logits(0.2, -0.5, 1.1), u(0.2, 0.7, 0.45), dy(0.3, -1.2, 0.8);
    const double tau = 0.5;
    const Eigen::VectorXd y = gumbel_softmax(logits, tau, u);
    const Eigen::VectorXd g = softmax_backward(y, dy, tau);
    const auto fd = central_gradient(
        [&](const Eigen::VectorXd& l) { return gumbel_softmax(l, tau, u).dot(dy); }, Eigen::VectorXd(logits));
    EXPECT_LT(relative_error(g, fd), 1e-8);
}

TEST(KlGaussian, ClosedFormExamples) {
    const auto std1 = GaussianLatent::standard(1);
    EXPECT_EQ(kl_gaussian_std(std1), 0.0);
    EXPECT_NEAR(kl_gaussian_std({Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1)}), 0.5, 1e-15);
    EXPECT_NEAR(kl_gaussian_std({Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, std::log(2.0))}),
                0.15342640972002734529, 1e-15);
    const GaussianLatent q{Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1)};
    EXPECT_NEAR(kl_gaussian_pair(q, std1), 0.5, 1e-15);
    EXPECT_EQ(kl_gaussian_pair(q, q), 0.0);
}

TEST(KlGaussian, MatchesQuadratureOracle) {
    Rng rng(17);
    for (int i = 0; i < 10; ++i) {
        const Eigen::Index L = 1 + static_cast<Eigen::Index>(i % 3);
        const GaussianLatent q{Eigen::VectorXd::Random(L) * 2.0, Eigen::VectorXd::Random(L) * 1.5};
        const GaussianLatent p{Eigen::VectorXd::Random(L) * 2.0, Eigen::VectorXd::Random(L) * 1.5};
        const auto z = Eigen::VectorXd::Zero(L);
        EXPECT_NEAR(kl_gaussian_std(q), oracle::kl_gaussian_quadrature(q.mu, q.log_var, z, z), 1e-6);
        EXPECT_NEAR(kl_gaussian_pair(q, p), oracle::kl_gaussian_quadrature(q.mu, q.log_var, p.mu, p.log_var), 1e-6);
        EXPECT_NEAR(kl_gaussian_std(q), kl_gaussian_pair(q, GaussianLatent::standard(L)), 1e-12);
        EXPECT_GE(kl_gaussian_pair(q, p), 0.0);
    }
}

TEST(KlGaussian, AdditiveOverIidDimensions) {
    const GaussianLatent q1{Eigen::VectorXd::Constant(1, 0.3), Eigen::VectorXd::Constant(1, -0.4)};
    const GaussianLatent p1{Eigen::VectorXd::Constant(1, -0.2), Eigen::VectorXd::Constant(1, 0.5)};
    const GaussianLatent q4{Eigen::VectorXd::Constant(4, 0.3), Eigen::VectorXd::Constant(4, -0.4)};
    const GaussianLatent p4{Eigen::VectorXd::Constant(4, -0.2), Eigen::VectorXd::Constant(4, 0.5)};
    EXPECT_NEAR(kl_gaussian_pair(q4, p4), 4.0 * kl_gaussian_pair(q1, p1), 1e-14);
}

TEST(KlCategorical, ExamplesAndDirectSum) {
    EXPECT_EQ(kl_categorical(Eigen::Vector2d(0.5, 0.5), Eigen::Vector2d(0.5, 0.5)), 0.0);
    EXPECT_NEAR(kl_categorical(Eigen::Vector2d(1.0, 0.0), Eigen::Vector2d(0.5, 0.5)), 0.69314718055994530942, 1e-15);
    for (int K : {2, 3, 7}) EXPECT_EQ(kl_categorical(Eigen::VectorXd::Constant(K, 1.0 / K), Eigen::VectorXd::Constant(K, 1.0 / K)), 0.0);
    Rng rng(6);
    for (int i = 0; i < 10; ++i) {
        const Eigen::VectorXd p = softmax(Eigen::VectorXd::Random(5) * 4.0);
        const Eigen::VectorXd r = softmax(Eigen::VectorXd::Random(5));
        EXPECT_NEAR(kl_categorical(p, r), oracle::kl_categorical_direct(p, r), 1e-6);
    }
}

TEST(Adam, ZeroGradientLeavesParamsAndCountsStep) {
    Eigen::VectorXd p = Eigen::Vector3d(1.0, -2.0, 0.5);
    const Eigen::VectorXd before = p;
    AdamState s;
    adam_step(p, Eigen::VectorXd::Zero(3), s);
    EXPECT_EQ(p, before);
    EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
    Eigen::VectorXd p = Eigen::Vector3d(1.0, -2.0, 0.5);
    const Eigen::VectorXd g = Eigen::Vector3d(0.3, -4.0, 1e-3);
    AdamState s;
    adam_step(p, g, s);
    // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
    for (int i = 0; i < 3; ++i) {
        const double expected = 1e-3 * g[i] / (std::abs(g[i]) + 1e-8);
        EXPECT_NEAR(Eigen::Vector3d(1.0, -2.0, 0.5)[i] - p[i], expected, 1e-15);
    }
}

TEST(Adam, StateRoundTripsThroughJsonBitExactly) {
    Eigen::VectorXd p = Eigen::VectorXd::Random(6);
    AdamState s;
    for (int i = 0; i < 3; ++i) adam_step(p, Eigen::VectorXd::Random(6), s);
    const auto back = AdamState::from_json(nlohmann::json::parse(s.to_json().dump()));
    EXPECT_EQ(back.step, s.step);
    EXPECT_EQ(back.m, s.m);
    EXPECT_EQ(back.v, s.v);

    Eigen::VectorXd p1 = p, p2 = p;
    AdamState s1 = s, s2 = back;
    const Eigen::VectorXd g = Eigen::VectorXd::Random(6);
    adam_step(p1, g, s1);
    adam_step(p2, g, s2);
    EXPECT_EQ(p1, p2);
}

TEST(Adam, MinimizesQuadratic) {
    Eigen::VectorXd p = Eigen::Vector2d(3.0, -4.0);
    AdamState s;
    s.lr = 0.05;
    for (int i = 0; i < 2000; ++i) adam_step(p, 2.0 * p, s);
    EXPECT_LT(p.norm(), 1e-2);
}

TEST(Rng, SameSeedSameStreamAndStateRestore) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
    const std::string st = a.state();
    const double next = a.uniform();
    Rng c(0);
    c.set_state(st);
    EXPECT_EQ(c.uniform(), next);
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        EXPECT_GT(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}
