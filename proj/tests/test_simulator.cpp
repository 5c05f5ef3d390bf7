#include <gtest/gtest.h>

#include <cmath>

#include "qmap/simulator.hpp"
#include "test_support.hpp"

using namespace qmap;

namespace {

AcquisitionScheme grid() { return scheme_for_simulation(default_simulation_bvalues()); }

}  // namespace

TEST(DefaultClusters, MatchPublishedMeansAndVariances) {
    const auto c = default_clusters();
    ASSERT_EQ(c.size(), 3u);
    EXPECT_EQ(c[0].meanD, 1.0);
    EXPECT_EQ(c[0].meanK, 1.5);
    EXPECT_EQ(c[1].meanD, 1.5);
    EXPECT_EQ(c[1].meanK, 1.0);
    EXPECT_EQ(c[2].meanD, 3.0);
    EXPECT_EQ(c[2].meanK, 0.0);
    EXPECT_EQ(c[0].variance, 0.1);
    EXPECT_EQ(c[1].variance, 0.1);
    EXPECT_EQ(c[2].variance, 0.01);
    double total = 0.0;
    for (const auto& k : c) total += k.weight;
    EXPECT_NEAR(total, 1.0, 1e-15);
    EXPECT_EQ(c[0].weight, 0.5);
    EXPECT_EQ(c[1].weight, 0.4);
    EXPECT_EQ(c[2].weight, 0.1);
}

TEST(Simulate, NoiselessSignalIsExactModel) {
    SimulationConfig cfg;
    cfg.clusters = {{1.0, 0.0, 0.0, 1.0}};
    cfg.n_voxels = 3;
    const auto ds = simulate(cfg, scheme_for_simulation({0.0, 1.0}));
    for (Eigen::Index i = 0; i < 3; ++i) {
        EXPECT_EQ(ds.signals(i, 0), 1.0);
        EXPECT_EQ(ds.signals(i, 1), std::exp(-1.0));
    }
}

TEST(Simulate, LabelProportionsFollowWeights) {
    SimulationConfig cfg;
    cfg.seed = 4;
    const auto ds = simulate(cfg, grid());
    std::array<double, 3> frac{};
    for (int l : *ds.labels) frac[static_cast<std::size_t>(l)] += 1.0 / 10000.0;
    EXPECT_NEAR(frac[0], 0.5, 0.02);
    EXPECT_NEAR(frac[1], 0.4, 0.02);
    EXPECT_NEAR(frac[2], 0.1, 0.02);
}

TEST(Simulate, NoiseMomentMatchesSnr) {
    SimulationConfig cfg;
    cfg.seed = 8;
    cfg.snr = 20.0;
    const auto scheme = grid();
    const auto ds = simulate(cfg, scheme);
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (Eigen::Index i = 0; i < ds.signals.rows(); ++i) {
        const auto clean = msdki_signal({(*ds.truth)(i, 0), (*ds.truth)(i, 1)}, scheme);
        for (Eigen::Index t = 0; t < clean.size(); ++t) {
            const double e = ds.signals(i, t) - clean[t];
            sum += e;
            sq += e * e;
            ++n;
        }
    }
    const double mean = sum / static_cast<double>(n);
    const double sd = std::sqrt(sq / static_cast<double>(n) - mean * mean);
    EXPECT_NEAR(sd, 0.05, 0.005);
}

TEST(Simulate, ClusterMeansWithinSamplingError) {
    SimulationConfig cfg;
    cfg.seed = 12;
    const auto ds = simulate(cfg, grid());
    const auto clusters = default_clusters();
    for (std::size_t k = 0; k < clusters.size(); ++k) {
        double s = 0.0;
        std::size_t nk = 0;
        for (std::size_t i = 0; i < ds.labels->size(); ++i)
            if ((*ds.labels)[i] == static_cast<int>(k)) {
                s += (*ds.truth)(static_cast<Eigen::Index>(i), 0);
                ++nk;
            }
        const double bound = 3.0 * std::sqrt(clusters[k].variance / static_cast<double>(nk));
        EXPECT_NEAR(s / static_cast<double>(nk), clusters[k].meanD, bound) << "cluster " << k;
    }
}

TEST(Simulate, TruthIsClampedAndReported) {
    SimulationConfig cfg;
    cfg.seed = 2;
    SimulationReport rep;
    const auto ds = simulate(cfg, grid(), &rep);
    EXPECT_GE(ds.truth->col(0).minCoeff(), SimulationConfig::kMinD);
    EXPECT_LE(ds.truth->col(0).maxCoeff(), SimulationConfig::kMaxD);
    EXPECT_GE(ds.truth->col(1).minCoeff(), 0.0);
    EXPECT_LE(ds.truth->col(1).maxCoeff(), 3.0);
    // About half of the CSF voxels draw K < 0.
    EXPECT_GT(rep.clamped_K, 300u);
    EXPECT_EQ(simulation_meta(cfg, rep).at("clamped_K"), rep.clamped_K);
}

TEST(Simulate, SameSeedIsBitIdentical) {
    SimulationConfig cfg;
    cfg.seed = 77;
    cfg.snr = 10.0;
    cfg.n_voxels = 500;
    const auto a = simulate(cfg, grid());
    const auto b = simulate(cfg, grid());
    EXPECT_TRUE(a.signals.cwiseEqual(b.signals).all());
    EXPECT_EQ(*a.labels, *b.labels);
    cfg.seed = 78;
    EXPECT_FALSE(simulate(cfg, grid()).signals.cwiseEqual(a.signals).all());
}

TEST(Simulate, RicianNoiseIsPositiveAndBiasedUp) {
    SimulationConfig cfg;
    cfg.clusters = {{3.0, 0.0, 0.0, 1.0}};
    cfg.snr = 10.0;
    cfg.noise = NoiseModel::rician;
    cfg.n_voxels = 4000;
    const auto scheme = scheme_for_simulation({0.0, 2.0});
    const auto ds = simulate(cfg, scheme);
    EXPECT_GT(ds.signals.minCoeff(), 0.0);
    // Magnitude of pure noise has mean σ√(π/2) ≫ exp(-6).
    EXPECT_NEAR(ds.signals.col(1).mean(), 0.1 * std::sqrt(std::acos(-1.0) / 2.0), 0.01);
}

TEST(Simulate, InvalidConfigurations) {
    SimulationConfig cfg;
    cfg.n_voxels = 0;
    EXPECT_THROW(simulate(cfg, grid()), UsageError);
    cfg.n_voxels = 10;
    cfg.snr = 0.0;
    EXPECT_THROW(simulate(cfg, grid()), UsageError);
    cfg.snr.reset();
    cfg.clusters = {{1.0, 0.0, 0.1, 0.0}};
    EXPECT_THROW(simulate(cfg, grid()), UsageError);
    cfg.clusters = {{-1.0, 0.0, 0.1, 1.0}};
    EXPECT_THROW(simulate(cfg, grid()), UsageError);
}

TEST(Dataset, SaveLoadRoundTripIsExact) {
    qmap::testing::TempDir dir;
    SimulationConfig cfg;
    cfg.seed = 3;
    cfg.snr = 20.0;
    cfg.n_voxels = 50;
    SimulationReport rep;
    const auto ds = simulate(cfg, grid(), &rep);
    save_dataset(ds, dir.path(), simulation_meta(cfg, rep));
    for (const char* f : {"signals.csv", "truth.csv", "labels.csv", "scheme.json", "meta.json"})
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    const auto back = load_dataset(dir.path());
    EXPECT_TRUE(back.signals.cwiseEqual(ds.signals).all());
    EXPECT_TRUE(back.truth->cwiseEqual(*ds.truth).all());
    EXPECT_EQ(*back.labels, *ds.labels);
    EXPECT_EQ(back.scheme.bvalues(), ds.scheme.bvalues());
    EXPECT_EQ(*back.snr, 20.0);
    EXPECT_EQ(*back.truth_names, (std::vector<std::string>{"D", "K"}));
}

TEST(ClusterSpecJson, RoundTrip) {
    const nlohmann::json j = default_clusters();
    const auto back = j.get<std::vector<ClusterSpec>>();
    ASSERT_EQ(back.size(), 3u);
    EXPECT_EQ(back[2].variance, 0.01);
    EXPECT_EQ(back[1].weight, 0.4);
}
