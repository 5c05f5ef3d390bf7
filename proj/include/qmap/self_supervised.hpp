#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "qmap/dataset.hpp"
#include "qmap/errors.hpp"
#include "qmap/fit_result.hpp"
#include "qmap/nn.hpp"
#include "qmap/physics_decoder.hpp"
#include "qmap/rng.hpp"
#include "qmap/training.hpp"

namespace qmap {

struct SelfSupervisedConfig {
    int hidden = 64;
    int epochs = 300;
    int batch_size = 256;
    double lr = 1e-3;
    std::optional<double> lr_final = 1e-5;  ///< cosine decay target; constant lr when unset
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"hidden", hidden}, {"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"seed", seed}};
        j["lr_final"] = lr_final ? nlohmann::json(*lr_final) : nlohmann::json(nullptr);
        return j;
    }
};

/// Voxelwise baseline: T → hidden → hidden → M, then the physics decoder.
/// Trained only on signal reconstruction error.
class SelfSupervisedNet {
public:
    SelfSupervisedNet(const SignalModel& model, const AcquisitionScheme& scheme, const SelfSupervisedConfig& cfg,
                      Rng& rng)
        : net_(nn::DenseNet::make({static_cast<int>(scheme.size()), cfg.hidden, cfg.hidden,
                                   static_cast<int>(model.num_params())},
                                  rng)),
          decoder_(model, model.default_transform(), scheme) {}

    const nn::DenseNet& net() const { return net_; }
    nn::DenseNet& net() { return net_; }
    const PhysicsDecoder& decoder() const { return decoder_; }

    /// Mean squared reconstruction error over the batch (T × B) and, when
    /// `grad` is given, its gradient in packed parameter order.
    double loss(const Eigen::MatrixXd& batch, Eigen::VectorXd* grad = nullptr) const {
        nn::ForwardCache cache;
        PhysicsDecoder::Cache pcache;
        const Eigen::MatrixXd raw = net_.forward(batch, grad ? &cache : nullptr);
        const Eigen::MatrixXd pred = decoder_.forward(raw, grad ? &pcache : nullptr);
        const Eigen::MatrixXd diff = pred - batch;
        const double denom = static_cast<double>(diff.size());
        if (grad) {
            grad->setZero(static_cast<Eigen::Index>(net_.num_params()));
            const Eigen::MatrixXd draw = decoder_.backward(pcache, 2.0 * diff / denom);
            net_.backward(cache, draw, *grad);
        }
        return diff.squaredNorm() / denom;
    }

    /// Physical parameters (M × N) for signals (T × N).
    Eigen::MatrixXd predict(const Eigen::MatrixXd& signals) const { return decoder_.physical(net_.forward(signals)); }

private:
    nn::DenseNet net_;
    PhysicsDecoder decoder_;
};

/// Trains the voxelwise network. Throws NumericalError if the loss becomes
/// non-finite. The returned net refers to `model`.
inline SelfSupervisedNet train_selfsupervised(const VoxelDataset& ds, const SignalModel& model,
                                              const SelfSupervisedConfig& cfg = {},
                                              std::vector<double>* loss_history = nullptr) {
    ds.validate();
    if (ds.num_voxels() == 0) throw UsageError("fit_selfsupervised: empty dataset");
    if (cfg.epochs < 0 || cfg.batch_size < 1 || cfg.hidden < 1) throw UsageError("fit_selfsupervised: bad config");

    Rng rng(cfg.seed);
    SelfSupervisedNet fitter(model, ds.scheme, cfg, rng);
    const Eigen::MatrixXd data = ds.signals.transpose();
    const auto N = data.cols();

    nn::AdamState adam;
    adam.lr = cfg.lr;
    Eigen::VectorXd params(static_cast<Eigen::Index>(fitter.net().num_params()));
    fitter.net().pack(params);
    Eigen::VectorXd grad;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        adam.lr = scheduled_lr(cfg.lr, cfg.lr_final, epoch, cfg.epochs);
        const auto order = shuffled_indices(N, rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const Eigen::MatrixXd batch = gather_columns(data, order, start, end);
            const double l = fitter.loss(batch, &grad);
            if (!std::isfinite(l) || !grad.allFinite())
                throw NumericalError("self-supervised training diverged at epoch " + std::to_string(epoch));
            epoch_loss += l * static_cast<double>(end - start);
            nn::adam_step(params, grad, adam);
            fitter.net().unpack(params);
        }
        if (loss_history) loss_history->push_back(epoch_loss / static_cast<double>(N));
    }
    return fitter;
}

/// Trains the voxelwise network and returns its per-voxel fit.
inline FitResult fit_selfsupervised(const VoxelDataset& ds, const SignalModel& model,
                                    const SelfSupervisedConfig& cfg = {}, std::vector<double>* loss_history = nullptr,
                                    nn::DenseNet* trained = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    const SelfSupervisedNet fitter = train_selfsupervised(ds, model, cfg, loss_history);
    if (trained) *trained = fitter.net();
    const Eigen::MatrixXd data = ds.signals.transpose();

    FitResult fit;
    fit.fitter_id = "selfsup";
    fit.model = model.id();
    fit.param_names = model.param_names();
    fit.params = fitter.predict(data).transpose();
    fit.residual_rmse = residual_rmse(model, fit.params, ds);
    fit.config = cfg.to_json();
    fit.spatial = ds.spatial;
    fit.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return fit;
}

}  // namespace qmap
