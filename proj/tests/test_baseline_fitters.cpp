#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>

#include "qmap/lsq.hpp"
#include "qmap/self_supervised.hpp"
#include "qmap/simulator.hpp"
#include "test_support.hpp"

using namespace qmap;

namespace {

double median(std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    return v[v.size() / 2];
}

VoxelDataset one_voxel(const SignalModel& model, const Eigen::VectorXd& x, const AcquisitionScheme& scheme) {
    return VoxelDataset{model.signal(x, scheme).transpose(), scheme, std::nullopt, std::nullopt,
                        std::nullopt, std::nullopt, std::nullopt};
}

}  // namespace

TEST(FitLsq, RecoversNoiselessMsdkiVoxel) {
    MsdkiModel model;
    const auto scheme = scheme_for_simulation(default_simulation_bvalues());
    const auto fit = fit_lsq(one_voxel(model, Eigen::Vector2d(1.5, 1.0), scheme), model);
    EXPECT_NEAR(fit.params(0, 0), 1.5, 1.5e-3);
    EXPECT_NEAR(fit.params(0, 1), 1.0, 1e-3);
    EXPECT_LT(fit.residual_rmse[0], 1e-8);
    EXPECT_EQ(fit.fitter_id, "lsq");
}

TEST(FitLsq, RecoversNoiselessBallStickFraction) {
    BallStickModel model;
    const auto scheme = qmap::testing::fibonacci_shell(30, 1.0);
    Eigen::VectorXd x(5);
    x << 0.5, 1.7, 3.0, 0.0, 0.0;
    const auto fit = fit_lsq(one_voxel(model, x, scheme), model);
    EXPECT_NEAR(fit.params(0, 0), 0.5, 1e-2);
}

TEST(FitLsq, MedianRelativeErrorOnNoiselessSimulation) {
    SimulationConfig cfg;
    cfg.n_voxels = 1000;
    cfg.seed = 21;
    const auto ds = simulate(cfg, scheme_for_simulation(default_simulation_bvalues()));
    MsdkiModel model;
    const auto fit = fit_lsq(ds, model);
    std::vector<double> eD, eK;
    for (Eigen::Index i = 0; i < fit.params.rows(); ++i) {
        eD.push_back(std::abs(fit.params(i, 0) - (*ds.truth)(i, 0)) / (*ds.truth)(i, 0));
        const double k = (*ds.truth)(i, 1);
        if (k > 0.0) eK.push_back(std::abs(fit.params(i, 1) - k) / k);
    }
    EXPECT_LT(median(eD), 1e-3);
    EXPECT_LT(median(eK), 1e-3);
}

TEST(FitLsq, ConstantSignalIsDegenerateNotAnError) {
    MsdkiModel model;
    const auto scheme = scheme_for_simulation(default_simulation_bvalues());
    VoxelDataset ds{Eigen::MatrixXd::Ones(1, static_cast<Eigen::Index>(scheme.size())), scheme, {}, {}, {}, {}, {}};
    const auto fit = fit_lsq(ds, model);
    EXPECT_LT(fit.params(0, 0), 1e-3);
    EXPECT_LT(fit.residual_rmse[0], 1e-3);
    EXPECT_EQ(fit.config.at("degenerate_voxels").get<std::size_t>(), 1u);
}

TEST(FitLsq, RejectsNonFiniteSignals) {
    MsdkiModel model;
    const auto scheme = scheme_for_simulation(default_simulation_bvalues());
    Eigen::MatrixXd s = Eigen::MatrixXd::Ones(1, static_cast<Eigen::Index>(scheme.size()));
    s(0, 3) = std::numeric_limits<double>::quiet_NaN();
    VoxelDataset ds{s, scheme, {}, {}, {}, {}, {}};
    EXPECT_THROW(fit_lsq(ds, model), UsageError);
}

TEST(LevenbergMarquardt, CostNonIncreasingAndInsideBounds) {
    SimulationConfig cfg;
    cfg.n_voxels = 40;
    cfg.snr = 15.0;
    cfg.seed = 3;
    const auto scheme = scheme_for_simulation(default_simulation_bvalues());
    const auto ds = simulate(cfg, scheme);
    MsdkiModel model;
    const auto t = model.default_transform();
    for (Eigen::Index i = 0; i < ds.signals.rows(); ++i)
        for (const auto& u0 : lsq_starts(t, 5)) {
            const auto o = levenberg_marquardt(model, t, scheme, ds.signals.row(i).transpose(), u0, LsqConfig{});
            for (std::size_t k = 1; k < o.cost_trace.size(); ++k) EXPECT_LE(o.cost_trace[k], o.cost_trace[k - 1]);
            const Eigen::VectorXd x = t.to_physical(o.raw);
            EXPECT_GT(x[0], 0.0);
            EXPECT_LT(x[0], 4.0);
            EXPECT_GE(x[1], 0.0);
            EXPECT_LT(x[1], 3.0);
        }
}

TEST(FitLsq, ThreadCountDoesNotChangeResult) {
    SimulationConfig cfg;
    cfg.n_voxels = 200;
    cfg.snr = 20.0;
    const auto ds = simulate(cfg, scheme_for_simulation(default_simulation_bvalues()));
    MsdkiModel model;
    LsqConfig one, four;
    four.threads = 4;
    EXPECT_TRUE(fit_lsq(ds, model, one).params.cwiseEqual(fit_lsq(ds, model, four).params).all());
}

TEST(SelfSupervised, NoiselessSingleClusterReconstructs) {
    SimulationConfig cfg;
    cfg.clusters = {{1.2, 0.8, 0.0, 1.0}};
    cfg.n_voxels = 2048;
    const auto ds = simulate(cfg, scheme_for_simulation(default_simulation_bvalues()));
    MsdkiModel model;
    SelfSupervisedConfig sc;
    sc.seed = 1;
    const auto fit = fit_selfsupervised(ds, model, sc);
    EXPECT_LT(fit.residual_rmse.maxCoeff(), 1e-3);
}

TEST(SelfSupervised, DeterministicVoxelwiseAndBounded) {
    SimulationConfig cfg;
    cfg.n_voxels = 300;
    cfg.snr = 20.0;
    cfg.seed = 5;
    const auto ds = simulate(cfg, scheme_for_simulation(default_simulation_bvalues()));
    MsdkiModel model;
    SelfSupervisedConfig sc;
    sc.epochs = 20;
    sc.seed = 9;
    const auto a = fit_selfsupervised(ds, model, sc);
    const auto b = fit_selfsupervised(ds, model, sc);
    EXPECT_TRUE(a.params.cwiseEqual(b.params).all());
    EXPECT_GT(a.params.col(0).minCoeff(), 0.0);
    EXPECT_LT(a.params.col(0).maxCoeff(), 4.0);
    EXPECT_LT(a.params.col(1).maxCoeff(), 3.0);

    // A trained net maps each voxel on its own: permuting rows permutes outputs.
    const auto net = train_selfsupervised(ds, model, sc);
    std::vector<Eigen::Index> perm(300);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::rotate(perm.begin(), perm.begin() + 17, perm.end());
    Eigen::MatrixXd shuffled(ds.signals.cols(), 300);
    for (Eigen::Index i = 0; i < 300; ++i) shuffled.col(i) = ds.signals.row(perm[static_cast<std::size_t>(i)]).transpose();
    const Eigen::MatrixXd p0 = net.predict(ds.signals.transpose());
    const Eigen::MatrixXd p1 = net.predict(shuffled);
    for (Eigen::Index i = 0; i < 300; ++i) EXPECT_EQ(p1.col(i), p0.col(perm[static_cast<std::size_t>(i)]));
}

TEST(SelfSupervised, LossGradientMatchesFiniteDifferences) {
    SimulationConfig cfg;
    cfg.n_voxels = 8;
    cfg.snr = 30.0;
    const auto ds = simulate(cfg, scheme_for_simulation(default_simulation_bvalues()));
    MsdkiModel model;
    SelfSupervisedConfig sc;
    sc.hidden = 5;
    Rng rng(3);
    SelfSupervisedNet net(model, ds.scheme, sc, rng);
    const Eigen::MatrixXd batch = ds.signals.transpose();
    Eigen::VectorXd grad;
    net.loss(batch, &grad);
    Eigen::VectorXd p(static_cast<Eigen::Index>(net.net().num_params()));
    net.net().pack(p);
    const auto fd = qmap::testing::central_gradient(
        [&](const Eigen::VectorXd& q) {
            SelfSupervisedNet copy = net;
            copy.net().unpack(q);
            return copy.loss(batch);
        },
        p);
    EXPECT_LT(qmap::testing::relative_error(grad, fd), 1e-5);
}

TEST(FitResultIo, SaveLoadRoundTrip) {
    qmap::testing::TempDir dir;
    MsdkiModel model;
    SimulationConfig cfg;
    cfg.n_voxels = 20;
    const auto ds = simulate(cfg, scheme_for_simulation(default_simulation_bvalues()));
    const auto fit = fit_lsq(ds, model);
    save_fit(fit, dir.path());
    const auto back = load_fit(dir.path());
    EXPECT_TRUE(back.params.cwiseEqual(fit.params).all());
    EXPECT_TRUE(back.residual_rmse.cwiseEqual(fit.residual_rmse).all());
    EXPECT_EQ(back.param_names, fit.param_names);
    EXPECT_EQ(back.fitter_id, "lsq");
    EXPECT_GE(fit.residual_rmse.minCoeff(), 0.0);
}
