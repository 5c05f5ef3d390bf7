#pragma once

#include <vector>

#include <Eigen/Dense>

#include "qmap/acquisition.hpp"
#include "qmap/signal_models.hpp"

namespace qmap {

/// Maps unconstrained network outputs (M × batch) through the parameter
/// transform and the forward model to predicted signals (T × batch), keeping
/// the per-voxel chain-rule Jacobians for the backward pass. Holds a
/// reference to the model, which must outlive the decoder.
class PhysicsDecoder {
public:
    PhysicsDecoder(const SignalModel& model, ParamTransform transform, AcquisitionScheme scheme)
        : model_(&model), transform_(std::move(transform)), scheme_(std::move(scheme)) {}

    const SignalModel& model() const { return *model_; }
    const ParamTransform& transform() const { return transform_; }
    const AcquisitionScheme& scheme() const { return scheme_; }
    Eigen::Index num_params() const { return static_cast<Eigen::Index>(transform_.size()); }
    Eigen::Index num_measurements() const { return static_cast<Eigen::Index>(scheme_.size()); }

    struct Cache {
        std::vector<Eigen::MatrixXd> jac_raw;  ///< T×M per column
    };

    Eigen::MatrixXd physical(const Eigen::MatrixXd& raw) const {
        Eigen::MatrixXd x(raw.rows(), raw.cols());
        for (Eigen::Index c = 0; c < raw.cols(); ++c) x.col(c) = transform_.to_physical(raw.col(c));
        return x;
    }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& raw, Cache* cache = nullptr) const {
        const Eigen::Index B = raw.cols(), M = num_params();
        Eigen::MatrixXd s(num_measurements(), B);
        if (cache) cache->jac_raw.resize(static_cast<std::size_t>(B));
        Eigen::VectorXd x(M);
        for (Eigen::Index c = 0; c < B; ++c) {
            for (Eigen::Index m = 0; m < M; ++m) x[m] = transform_.to_physical(static_cast<std::size_t>(m), raw(m, c));
            s.col(c) = model_->signal(x, scheme_);
            if (cache) {
                Eigen::MatrixXd J = model_->jacobian(x, scheme_);
                for (Eigen::Index m = 0; m < M; ++m)
                    J.col(m) *= transform_.derivative(static_cast<std::size_t>(m), raw(m, c));
                cache->jac_raw[static_cast<std::size_t>(c)] = std::move(J);
            }
        }
        return s;
    }

    /// d loss / d raw given d loss / d signal.
    Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& dsignal) const {
        Eigen::MatrixXd draw(num_params(), dsignal.cols());
        for (Eigen::Index c = 0; c < dsignal.cols(); ++c)
            draw.col(c) = cache.jac_raw[static_cast<std::size_t>(c)].transpose() * dsignal.col(c);
        return draw;
    }

private:
    const SignalModel* model_;
    ParamTransform transform_;
    AcquisitionScheme scheme_;
};

}  // namespace qmap
