#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qmap/acquisition.hpp"
#include "qmap/dataset.hpp"
#include "qmap/errors.hpp"
#include "qmap/rng.hpp"
#include "qmap/signal_models.hpp"

namespace qmap {

/// One tissue class of the synthetic phantom. D and K are drawn independently
/// from Gaussians with the shared `variance`.
struct ClusterSpec {
    double meanD = 1.0;
    double meanK = 0.0;
    double variance = 0.0;
    double weight = 1.0;

    void validate() const {
        if (!(meanD > 0.0)) throw UsageError("cluster: meanD must be > 0");
        if (!(meanK >= 0.0)) throw UsageError("cluster: meanK must be >= 0");
        if (!(variance >= 0.0)) throw UsageError("cluster: variance must be >= 0");
        if (!(weight > 0.0)) throw UsageError("cluster: weight must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const ClusterSpec& c) {
    j = {{"meanD", c.meanD}, {"meanK", c.meanK}, {"variance", c.variance}, {"weight", c.weight}};
}
inline void from_json(const nlohmann::json& j, ClusterSpec& c) {
    c.meanD = j.at("meanD").get<double>();
    c.meanK = j.at("meanK").get<double>();
    c.variance = j.at("variance").get<double>();
    c.weight = j.at("weight").get<double>();
}

/// White-matter-like, grey-matter-like and CSF-like clusters.
inline std::vector<ClusterSpec> default_clusters() {
    return {
        {1.0, 1.5, 0.1, 0.5},
        {1.5, 1.0, 0.1, 0.4},
        {3.0, 0.0, 0.01, 0.1},
    };
}

enum class NoiseModel { gaussian, rician };

struct SimulationConfig {
    std::vector<ClusterSpec> clusters = default_clusters();
    std::size_t n_voxels = 10000;
    std::optional<double> snr;  ///< none means noiseless
    NoiseModel noise = NoiseModel::gaussian;
    std::uint64_t seed = 0;

    static constexpr double kMinD = 0.05, kMaxD = 4.0;
    static constexpr double kMinK = 0.0, kMaxK = 3.0;
    static constexpr double kSignalFloor = 1e-6;
};

struct SimulationReport {
    std::size_t clamped_D = 0;
    std::size_t clamped_K = 0;
    std::size_t floored_signals = 0;
};

/// Three-cluster MSDKI phantom with ground truth. Noise, when requested, has
/// σ = 1/SNR on the normalized signal and is applied to every measurement.
inline VoxelDataset simulate(const SimulationConfig& cfg, const AcquisitionScheme& scheme,
                             SimulationReport* report = nullptr) {
    if (cfg.n_voxels == 0) throw UsageError("simulate: n_voxels must be >= 1");
    if (cfg.snr && !(*cfg.snr > 0.0)) throw UsageError("simulate: snr must be > 0");
    if (cfg.clusters.empty()) throw UsageError("simulate: no clusters");
    for (const auto& c : cfg.clusters) c.validate();

    std::vector<double> weights;
    for (const auto& c : cfg.clusters) weights.push_back(c.weight);

    Rng rng(cfg.seed);
    const auto n = static_cast<Eigen::Index>(cfg.n_voxels);
    const auto T = static_cast<Eigen::Index>(scheme.size());
    Eigen::MatrixXd signals(n, T);
    Eigen::MatrixXd truth(n, 2);
    std::vector<int> labels(cfg.n_voxels);
    SimulationReport rep;
    const double sigma = cfg.snr ? 1.0 / *cfg.snr : 0.0;

    for (Eigen::Index i = 0; i < n; ++i) {
        const std::size_t k = rng.categorical(weights);
        const auto& c = cfg.clusters[k];
        const double sd = std::sqrt(c.variance);
        double D = rng.normal(c.meanD, sd);
        double K = rng.normal(c.meanK, sd);
        const double Dc = std::clamp(D, SimulationConfig::kMinD, SimulationConfig::kMaxD);
        const double Kc = std::clamp(K, SimulationConfig::kMinK, SimulationConfig::kMaxK);
        rep.clamped_D += (Dc != D);
        rep.clamped_K += (Kc != K);
        labels[static_cast<std::size_t>(i)] = static_cast<int>(k);
        truth(i, 0) = Dc;
        truth(i, 1) = Kc;

        Eigen::VectorXd s = msdki_signal({Dc, Kc}, scheme);
        if (cfg.snr) {
            for (Eigen::Index t = 0; t < T; ++t) {
                double v;
                if (cfg.noise == NoiseModel::gaussian) {
                    v = s[t] + sigma * rng.normal();
                } else {
                    const double re = s[t] + sigma * rng.normal();
                    const double im = sigma * rng.normal();
                    v = std::hypot(re, im);
                }
                if (v < SimulationConfig::kSignalFloor) {
                    v = SimulationConfig::kSignalFloor;
                    ++rep.floored_signals;
                }
                s[t] = v;
            }
        }
        signals.row(i) = s.transpose();
    }

    if (report) *report = rep;
    VoxelDataset ds{std::move(signals), scheme, std::move(truth), std::vector<std::string>{"D", "K"},
                    std::move(labels), cfg.snr, std::nullopt};
    return ds;
}

inline nlohmann::json simulation_meta(const SimulationConfig& cfg, const SimulationReport& rep) {
    return {{"seed", cfg.seed},
            {"snr", cfg.snr ? nlohmann::json(*cfg.snr) : nlohmann::json(nullptr)},
            {"noise", cfg.noise == NoiseModel::gaussian ? "gaussian" : "rician"},
            {"n_voxels", cfg.n_voxels},
            {"clusters", cfg.clusters},
            {"model", "msdki"},
            {"clamped_D", rep.clamped_D},
            {"clamped_K", rep.clamped_K},
            {"floored_signals", rep.floored_signals}};
}

}  // namespace qmap
