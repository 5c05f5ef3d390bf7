#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qmap/acquisition.hpp"
#include "qmap/errors.hpp"

namespace qmap {

/// Mean-signal kurtosis parameters. D in μm²/ms, K dimensionless.
struct MsdkiParams {
    double D = 1.0;
    double K = 0.0;
};

/// Ball-and-stick parameters. Orientation n = (sinθcosφ, sinθsinφ, cosθ).
struct BallStickParams {
    double f = 0.5;
    double Dpar = 1.7;
    double Diso = 3.0;
    double theta = 0.0;
    double phi = 0.0;

    Eigen::Vector3d orientation() const {
        return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
    }
};

/// Whether the stick exponent uses (g·n)² (the usual ball-stick model) or the
/// bare dot product.
enum class StickExponent { squared, linear };

// ---------------------------------------------------------------------------
// MSDKI: s(b) = exp(-bD + b²D²K/6)

inline Eigen::VectorXd msdki_signal(const MsdkiParams& p, const AcquisitionScheme& scheme) {
    Eigen::VectorXd s(scheme.size());
    for (std::size_t t = 0; t < scheme.size(); ++t) {
        const double b = scheme.bvalue(t);
        s[t] = std::exp(-b * p.D + b * b * p.D * p.D * p.K / 6.0);
    }
    return s;
}

/// T×2 Jacobian, columns (∂/∂D, ∂/∂K).
inline Eigen::MatrixXd msdki_gradient(const MsdkiParams& p, const AcquisitionScheme& scheme) {
    Eigen::MatrixXd J(scheme.size(), 2);
    for (std::size_t t = 0; t < scheme.size(); ++t) {
        const double b = scheme.bvalue(t);
        const double s = std::exp(-b * p.D + b * b * p.D * p.D * p.K / 6.0);
        J(t, 0) = s * (-b + b * b * p.D * p.K / 3.0);
        J(t, 1) = s * b * b * p.D * p.D / 6.0;
    }
    return J;
}

// ---------------------------------------------------------------------------
// Ball-stick: s = f exp(-b Dpar (g·n)^e) + (1-f) exp(-b Diso)

inline Eigen::VectorXd ballstick_signal(const BallStickParams& p, const AcquisitionScheme& scheme,
                                        StickExponent exponent = StickExponent::squared) {
    const Eigen::Vector3d n = p.orientation();
    Eigen::VectorXd s(scheme.size());
    for (std::size_t t = 0; t < scheme.size(); ++t) {
        const double b = scheme.bvalue(t);
        const double gn = scheme.direction(t).dot(n);
        const double proj = exponent == StickExponent::squared ? gn * gn : gn;
        s[t] = p.f * std::exp(-b * p.Dpar * proj) + (1.0 - p.f) * std::exp(-b * p.Diso);
    }
    return s;
}

/// T×5 Jacobian, columns (f, Dpar, Diso, theta, phi).
inline Eigen::MatrixXd ballstick_gradient(const BallStickParams& p, const AcquisitionScheme& scheme,
                                          StickExponent exponent = StickExponent::squared) {
    const double st = std::sin(p.theta), ct = std::cos(p.theta);
    const double sp = std::sin(p.phi), cp = std::cos(p.phi);
    const Eigen::Vector3d n(st * cp, st * sp, ct);
    const Eigen::Vector3d dn_dtheta(ct * cp, ct * sp, -st);
    const Eigen::Vector3d dn_dphi(-st * sp, st * cp, 0.0);

    Eigen::MatrixXd J(scheme.size(), 5);
    for (std::size_t t = 0; t < scheme.size(); ++t) {
        const double b = scheme.bvalue(t);
        const Eigen::Vector3d& g = scheme.direction(t);
        const double gn = g.dot(n);
        const bool sq = exponent == StickExponent::squared;
        const double proj = sq ? gn * gn : gn;
        const double dproj_dgn = sq ? 2.0 * gn : 1.0;
        const double stick = std::exp(-b * p.Dpar * proj);
        const double ball = std::exp(-b * p.Diso);
        // ∂s/∂proj
        const double ds_dproj = -p.f * b * p.Dpar * stick;
        J(t, 0) = stick - ball;
        J(t, 1) = -p.f * b * proj * stick;
        J(t, 2) = -(1.0 - p.f) * b * ball;
        J(t, 3) = ds_dproj * dproj_dgn * g.dot(dn_dtheta);
        J(t, 4) = ds_dproj * dproj_dgn * g.dot(dn_dphi);
    }
    return J;
}

// ---------------------------------------------------------------------------

/// Per-parameter scaled-sigmoid map from unconstrained reals onto (lower, upper).
///
/// Raw values are clamped to ±kRawLimit before the sigmoid so that physical
/// values never touch the bounds in floating point.
class ParamTransform {
public:
    struct Bounds {
        double lower;
        double upper;
    };
    static constexpr double kRawLimit = 30.0;

    ParamTransform() = default;
    explicit ParamTransform(std::vector<Bounds> bounds) : bounds_(std::move(bounds)) {
        for (const auto& b : bounds_)
            if (!(b.lower < b.upper)) throw UsageError("ParamTransform: lower bound must be < upper bound");
    }

    std::size_t size() const noexcept { return bounds_.size(); }
    const Bounds& bounds(std::size_t i) const { return bounds_[i]; }

    double to_physical(std::size_t i, double raw) const {
        const auto& b = bounds_[i];
        return b.lower + (b.upper - b.lower) * sigmoid(std::clamp(raw, -kRawLimit, kRawLimit));
    }

    /// d physical / d raw; zero outside the clamp window.
    double derivative(std::size_t i, double raw) const {
        if (raw < -kRawLimit || raw > kRawLimit) return 0.0;
        const auto& b = bounds_[i];
        const double s = sigmoid(raw);
        return (b.upper - b.lower) * s * (1.0 - s);
    }

    double from_physical(std::size_t i, double x) const {
        const auto& b = bounds_[i];
        if (!(x > b.lower && x < b.upper))
            throw UsageError("ParamTransform: value " + std::to_string(x) + " not strictly inside (" +
                             std::to_string(b.lower) + ", " + std::to_string(b.upper) + ")");
        const double u = (x - b.lower) / (b.upper - b.lower);
        return std::log(u) - std::log1p(-u);
    }

    Eigen::VectorXd to_physical(const Eigen::Ref<const Eigen::VectorXd>& raw) const {
        check_size(raw.size());
        Eigen::VectorXd out(raw.size());
        for (Eigen::Index i = 0; i < raw.size(); ++i) out[i] = to_physical(static_cast<std::size_t>(i), raw[i]);
        return out;
    }

    Eigen::VectorXd from_physical(const Eigen::Ref<const Eigen::VectorXd>& x) const {
        check_size(x.size());
        Eigen::VectorXd out(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = from_physical(static_cast<std::size_t>(i), x[i]);
        return out;
    }

private:
    static double sigmoid(double r) {
        return r >= 0.0 ? 1.0 / (1.0 + std::exp(-r)) : std::exp(r) / (1.0 + std::exp(r));
    }
    void check_size(Eigen::Index n) const {
        if (static_cast<std::size_t>(n) != bounds_.size())
            throw UsageError("ParamTransform: expected " + std::to_string(bounds_.size()) + " values");
    }

    std::vector<Bounds> bounds_;
};

// ---------------------------------------------------------------------------

enum class ModelId { msdki, ballstick };

inline std::string to_string(ModelId id) { return id == ModelId::msdki ? "msdki" : "ballstick"; }

inline ModelId model_from_string(const std::string& s) {
    if (s == "msdki") return ModelId::msdki;
    if (s == "ballstick" || s == "ball-stick") return ModelId::ballstick;
    throw UsageError("unknown signal model '" + s + "' (expected msdki or ballstick)");
}

/// Forward model φ over a flat physical parameter vector. The fitters only see
/// this interface, so any closed-form model can be plugged in.
class SignalModel {
public:
    virtual ~SignalModel() = default;
    virtual ModelId id() const = 0;
    virtual std::vector<std::string> param_names() const = 0;
    std::size_t num_params() const { return param_names().size(); }
    /// Physical box used by every fitter.
    virtual ParamTransform default_transform() const = 0;
    virtual Eigen::VectorXd signal(const Eigen::Ref<const Eigen::VectorXd>& x,
                                   const AcquisitionScheme& scheme) const = 0;
    virtual Eigen::MatrixXd jacobian(const Eigen::Ref<const Eigen::VectorXd>& x,
                                     const AcquisitionScheme& scheme) const = 0;
};

class MsdkiModel final : public SignalModel {
public:
    ModelId id() const override { return ModelId::msdki; }
    std::vector<std::string> param_names() const override { return {"D", "K"}; }
    ParamTransform default_transform() const override { return ParamTransform({{0.0, 4.0}, {0.0, 3.0}}); }
    Eigen::VectorXd signal(const Eigen::Ref<const Eigen::VectorXd>& x,
                           const AcquisitionScheme& scheme) const override {
        return msdki_signal({x[0], x[1]}, scheme);
    }
    Eigen::MatrixXd jacobian(const Eigen::Ref<const Eigen::VectorXd>& x,
                             const AcquisitionScheme& scheme) const override {
        return msdki_gradient({x[0], x[1]}, scheme);
    }
};

class BallStickModel final : public SignalModel {
public:
    explicit BallStickModel(StickExponent exponent = StickExponent::squared) : exponent_(exponent) {}
    ModelId id() const override { return ModelId::ballstick; }
    StickExponent exponent() const noexcept { return exponent_; }
    std::vector<std::string> param_names() const override { return {"f", "Dpar", "Diso", "theta", "phi"}; }
    ParamTransform default_transform() const override {
        return ParamTransform({{0.0, 1.0}, {0.0, 4.0}, {0.0, 4.0}, {0.0, std::numbers::pi}, {0.0, 2.0 * std::numbers::pi}});
    }
    Eigen::VectorXd signal(const Eigen::Ref<const Eigen::VectorXd>& x,
                           const AcquisitionScheme& scheme) const override {
        return ballstick_signal({x[0], x[1], x[2], x[3], x[4]}, scheme, exponent_);
    }
    Eigen::MatrixXd jacobian(const Eigen::Ref<const Eigen::VectorXd>& x,
                             const AcquisitionScheme& scheme) const override {
        return ballstick_gradient({x[0], x[1], x[2], x[3], x[4]}, scheme, exponent_);
    }

private:
    StickExponent exponent_;
};

inline std::unique_ptr<SignalModel> make_model(ModelId id, StickExponent exponent = StickExponent::squared) {
    if (id == ModelId::msdki) return std::make_unique<MsdkiModel>();
    return std::make_unique<BallStickModel>(exponent);
}

}  // namespace qmap
