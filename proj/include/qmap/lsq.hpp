#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "qmap/dataset.hpp"
#include "qmap/errors.hpp"
#include "qmap/fit_result.hpp"
#include "qmap/parallel.hpp"
#include "qmap/signal_models.hpp"

namespace qmap {

struct LsqConfig {
    int max_iterations = 200;
    double rel_tolerance = 1e-10;
    double lambda_init = 1e-3;
    double lambda_up = 10.0;
    double lambda_down = 10.0;
    int n_starts = 5;
    std::size_t threads = 1;
    /// |raw| beyond this marks a parameter as pinned to its bound.
    double degenerate_raw = 15.0;

    nlohmann::json to_json() const {
        return {{"max_iterations", max_iterations}, {"rel_tolerance", rel_tolerance},
                {"lambda_init", lambda_init},       {"lambda_up", lambda_up},
                {"lambda_down", lambda_down},       {"n_starts", n_starts},
                {"degenerate_raw", degenerate_raw}};
    }
};

struct LmOutcome {
    Eigen::VectorXd raw;
    double cost = std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
    /// Cost after every accepted step, starting with the initial cost.
    std::vector<double> cost_trace;
};

/// Levenberg-Marquardt on Σ(s - φ(T(u)))² over unconstrained coordinates u,
/// with Marquardt diagonal scaling and a ×/÷ damping schedule.
inline LmOutcome levenberg_marquardt(const SignalModel& model, const ParamTransform& transform,
                                     const AcquisitionScheme& scheme, const Eigen::Ref<const Eigen::VectorXd>& signal,
                                     Eigen::VectorXd raw, const LsqConfig& cfg) {
    const Eigen::Index M = raw.size();
    auto residual = [&](const Eigen::VectorXd& u) { return Eigen::VectorXd(model.signal(transform.to_physical(u), scheme) - signal); };

    LmOutcome out;
    Eigen::VectorXd r = residual(raw);
    double cost = r.squaredNorm();
    out.cost_trace.push_back(cost);
    double lambda = cfg.lambda_init;

    for (int it = 0; it < cfg.max_iterations; ++it) {
        out.iterations = it + 1;
        if (cost < 1e-30) {
            out.converged = true;
            break;
        }
        const Eigen::VectorXd x = transform.to_physical(raw);
        Eigen::MatrixXd J = model.jacobian(x, scheme);
        for (Eigen::Index m = 0; m < M; ++m) J.col(m) *= transform.derivative(static_cast<std::size_t>(m), raw[m]);
        const Eigen::MatrixXd A = J.transpose() * J;
        const Eigen::VectorXd g = J.transpose() * r;
        const double diag_floor = 1e-12 * std::max(A.diagonal().maxCoeff(), 1e-300);

        Eigen::MatrixXd damped = A;
        for (Eigen::Index m = 0; m < M; ++m) damped(m, m) += lambda * std::max(A(m, m), diag_floor);
        const Eigen::VectorXd step = damped.ldlt().solve(-g);
        if (!step.allFinite()) {
            lambda *= cfg.lambda_up;
            if (lambda > 1e16) break;
            continue;
        }
        const Eigen::VectorXd trial = raw + step;
        const Eigen::VectorXd r_trial = residual(trial);
        const double trial_cost = r_trial.squaredNorm();
        if (std::isfinite(trial_cost) && trial_cost < cost) {
            const double rel = (cost - trial_cost) / cost;
            raw = trial;
            r = r_trial;
            cost = trial_cost;
            out.cost_trace.push_back(cost);
            lambda = std::max(lambda / cfg.lambda_down, 1e-15);
            if (rel < cfg.rel_tolerance) {
                out.converged = true;
                break;
            }
        } else {
            lambda *= cfg.lambda_up;
            if (lambda > 1e16) {
                out.converged = true;  // no descent direction left
                break;
            }
        }
    }
    out.raw = std::move(raw);
    out.cost = cost;
    return out;
}

/// Fixed starting points spread over the physical box, as fractions of each
/// parameter's range. Start i uses fraction kFractions[(i + 2j) mod 5] for
/// parameter j, so parameters are not all at the same relative position.
inline std::vector<Eigen::VectorXd> lsq_starts(const ParamTransform& transform, int n_starts) {
    static constexpr std::array<double, 5> kFractions{0.15, 0.3, 0.5, 0.7, 0.85};
    std::vector<Eigen::VectorXd> starts;
    for (int i = 0; i < n_starts; ++i) {
        Eigen::VectorXd u(static_cast<Eigen::Index>(transform.size()));
        for (std::size_t j = 0; j < transform.size(); ++j) {
            const double frac = kFractions[(static_cast<std::size_t>(i) + 2 * j) % kFractions.size()];
            const auto& b = transform.bounds(j);
            u[static_cast<Eigen::Index>(j)] = transform.from_physical(j, b.lower + frac * (b.upper - b.lower));
        }
        starts.push_back(std::move(u));
    }
    return starts;
}

/// Nonlinear least-squares fit of every voxel; keeps the best of the fixed starts.
///
/// Voxels whose best solution sits on a parameter bound are counted in
/// config["degenerate_voxels"]; that is reported, not treated as an error.
inline FitResult fit_lsq(const VoxelDataset& ds, const SignalModel& model, const LsqConfig& cfg = {}) {
    ds.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const ParamTransform transform = model.default_transform();
    const auto starts = lsq_starts(transform, cfg.n_starts);
    const auto N = static_cast<Eigen::Index>(ds.num_voxels());
    const auto M = static_cast<Eigen::Index>(model.num_params());

    Eigen::MatrixXd params(N, M);
    std::vector<std::uint8_t> degenerate(static_cast<std::size_t>(N), 0);
    std::vector<std::uint8_t> unconverged(static_cast<std::size_t>(N), 0);

    parallel_for(static_cast<std::size_t>(N), cfg.threads, [&](std::size_t i) {
        const Eigen::VectorXd s = ds.signals.row(static_cast<Eigen::Index>(i)).transpose();
        LmOutcome best;
        for (const auto& u0 : starts) {
            LmOutcome o = levenberg_marquardt(model, transform, ds.scheme, s, u0, cfg);
            if (o.cost < best.cost) best = std::move(o);
        }
        params.row(static_cast<Eigen::Index>(i)) = transform.to_physical(best.raw).transpose();
        degenerate[i] = (best.raw.cwiseAbs().maxCoeff() > cfg.degenerate_raw);
        unconverged[i] = !best.converged;
    });

    std::size_t n_degenerate = 0, n_unconverged = 0;
    for (auto d : degenerate) n_degenerate += d;
    for (auto u : unconverged) n_unconverged += u;

    FitResult fit;
    fit.fitter_id = "lsq";
    fit.model = model.id();
    fit.param_names = model.param_names();
    fit.params = std::move(params);
    fit.residual_rmse = residual_rmse(model, fit.params, ds);
    fit.config = cfg.to_json();
    fit.config["degenerate_voxels"] = n_degenerate;
    fit.config["unconverged_voxels"] = n_unconverged;
    fit.spatial = ds.spatial;
    fit.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return fit;
}

}  // namespace qmap
