#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "qmap/errors.hpp"
#include "qmap/rng.hpp"

// Dense networks with hand-written reverse mode. Batches are stored column-wise:
// a (features × batch) matrix, one voxel per column.

namespace qmap::nn {

enum class Activation { relu, identity };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }
inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "identity") return Activation::identity;
    throw FormatError("unknown activation '" + s + "'");
}

struct DenseLayer {
    Eigen::MatrixXd weight;  ///< out × in
    Eigen::VectorXd bias;    ///< out
    Activation activation = Activation::identity;

    Eigen::Index in() const { return weight.cols(); }
    Eigen::Index out() const { return weight.rows(); }
};

/// Activations kept from a forward pass for the matching backward pass.
struct ForwardCache {
    std::vector<Eigen::MatrixXd> inputs;  ///< input to each layer
    std::vector<Eigen::MatrixXd> pre;     ///< pre-activation of each layer
};

class DenseNet {
public:
    DenseNet() = default;
    explicit DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { check_chain(); }

    /// Layer sizes {in, h1, ..., out}; hidden layers use relu, the last identity.
    /// Weights ~ N(0, gain/fan_in) with gain 2 for relu layers, biases zero.
    static DenseNet make(const std::vector<int>& sizes, Rng& rng) {
        if (sizes.size() < 2) throw UsageError("DenseNet: need at least input and output sizes");
        std::vector<DenseLayer> layers;
        for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
            if (sizes[i] <= 0 || sizes[i + 1] <= 0) throw UsageError("DenseNet: layer sizes must be positive");
            const bool last = i + 2 == sizes.size();
            DenseLayer l;
            l.activation = last ? Activation::identity : Activation::relu;
            l.weight.resize(sizes[i + 1], sizes[i]);
            const double sd = std::sqrt((last ? 1.0 : 2.0) / sizes[i]);
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
                for (Eigen::Index r = 0; r < l.weight.rows(); ++r) l.weight(r, c) = sd * rng.normal();
            l.bias = Eigen::VectorXd::Zero(sizes[i + 1]);
            layers.push_back(std::move(l));
        }
        return DenseNet(std::move(layers));
    }

    const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
    std::vector<DenseLayer>& layers() noexcept { return layers_; }
    Eigen::Index input_size() const { return layers_.front().in(); }
    Eigen::Index output_size() const { return layers_.back().out(); }

    std::size_t num_params() const {
        std::size_t n = 0;
        for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
        return n;
    }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, ForwardCache* cache = nullptr) const {
        if (layers_.empty()) throw UsageError("DenseNet: empty network");
        if (x.rows() != input_size())
            throw UsageError("DenseNet: input has " + std::to_string(x.rows()) + " rows, expected " +
                             std::to_string(input_size()));
        if (cache) {
            cache->inputs.clear();
            cache->pre.clear();
        }
        Eigen::MatrixXd h = x;
        for (const auto& l : layers_) {
            Eigen::MatrixXd z = l.weight * h;
            z.colwise() += l.bias;
            if (cache) {
                cache->inputs.push_back(std::move(h));
                cache->pre.push_back(z);
            }
            h = l.activation == Activation::relu ? Eigen::MatrixXd(z.cwiseMax(0.0)) : std::move(z);
        }
        return h;
    }

    Eigen::VectorXd forward(const Eigen::VectorXd& x) const { return forward(Eigen::MatrixXd(x)).col(0); }

    /// Accumulates d loss / d params into `grad` (packed layout, see pack())
    /// and returns d loss / d input.
    Eigen::MatrixXd backward(const ForwardCache& cache, const Eigen::MatrixXd& upstream,
                             Eigen::Ref<Eigen::VectorXd> grad) const {
        if (static_cast<std::size_t>(grad.size()) != num_params())
            throw UsageError("DenseNet::backward: gradient buffer has wrong size");
        if (cache.inputs.size() != layers_.size()) throw UsageError("DenseNet::backward: cache does not match net");
        std::vector<Eigen::Index> offsets = param_offsets();
        Eigen::MatrixXd delta = upstream;
        for (std::size_t k = layers_.size(); k-- > 0;) {
            const auto& l = layers_[k];
            if (l.activation == Activation::relu) delta = delta.cwiseProduct((cache.pre[k].array() > 0.0).cast<double>().matrix());
            const Eigen::Index o = offsets[k];
            Eigen::Map<Eigen::MatrixXd> gW(grad.data() + o, l.out(), l.in());
            gW.noalias() += delta * cache.inputs[k].transpose();
            grad.segment(o + l.weight.size(), l.out()) += delta.rowwise().sum();
            delta = (l.weight.transpose() * delta).eval();
        }
        return delta;
    }

    /// Parameters flattened layer by layer: weight (column-major) then bias.
    void pack(Eigen::Ref<Eigen::VectorXd> out) const {
        Eigen::Index o = 0;
        for (const auto& l : layers_) {
            out.segment(o, l.weight.size()) = Eigen::Map<const Eigen::VectorXd>(l.weight.data(), l.weight.size());
            o += l.weight.size();
            out.segment(o, l.bias.size()) = l.bias;
            o += l.bias.size();
        }
    }

    void unpack(const Eigen::Ref<const Eigen::VectorXd>& in) {
        Eigen::Index o = 0;
        for (auto& l : layers_) {
            Eigen::Map<Eigen::VectorXd>(l.weight.data(), l.weight.size()) = in.segment(o, l.weight.size());
            o += l.weight.size();
            l.bias = in.segment(o, l.bias.size());
            o += l.bias.size();
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& l : layers_) {
            arr.push_back({{"in", l.in()},
                           {"out", l.out()},
                           {"activation", to_string(l.activation)},
                           {"weight", std::vector<double>(l.weight.data(), l.weight.data() + l.weight.size())},
                           {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
        }
        return arr;
    }

    static DenseNet from_json(const nlohmann::json& j) {
        std::vector<DenseLayer> layers;
        for (const auto& e : j) {
            DenseLayer l;
            const auto in = e.at("in").get<Eigen::Index>(), out = e.at("out").get<Eigen::Index>();
            auto w = e.at("weight").get<std::vector<double>>();
            auto b = e.at("bias").get<std::vector<double>>();
            if (static_cast<Eigen::Index>(w.size()) != in * out || static_cast<Eigen::Index>(b.size()) != out)
                throw FormatError("checkpoint: layer parameter count does not match its shape");
            l.weight = Eigen::Map<Eigen::MatrixXd>(w.data(), out, in);
            l.bias = Eigen::Map<Eigen::VectorXd>(b.data(), out);
            l.activation = activation_from_string(e.at("activation").get<std::string>());
            layers.push_back(std::move(l));
        }
        return DenseNet(std::move(layers));
    }

private:
    std::vector<Eigen::Index> param_offsets() const {
        std::vector<Eigen::Index> off;
        Eigen::Index o = 0;
        for (const auto& l : layers_) {
            off.push_back(o);
            o += l.weight.size() + l.bias.size();
        }
        return off;
    }

    void check_chain() const {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (layers_[i].bias.size() != layers_[i].out())
                throw UsageError("DenseNet: bias size does not match layer output");
            if (i && layers_[i].in() != layers_[i - 1].out())
                throw UsageError("DenseNet: layer " + std::to_string(i) + " input does not chain");
        }
    }

    std::vector<DenseLayer> layers_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    Eigen::VectorXd m;
    Eigen::VectorXd v;

    nlohmann::json to_json() const {
        return {{"lr", lr},     {"beta1", beta1},
                {"beta2", beta2}, {"eps", eps},
                {"step", step}, {"m", std::vector<double>(m.data(), m.data() + m.size())},
                {"v", std::vector<double>(v.data(), v.data() + v.size())}};
    }
    static AdamState from_json(const nlohmann::json& j) {
        AdamState s;
        s.lr = j.at("lr").get<double>();
        s.beta1 = j.at("beta1").get<double>();
        s.beta2 = j.at("beta2").get<double>();
        s.eps = j.at("eps").get<double>();
        s.step = j.at("step").get<std::size_t>();
        auto m = j.at("m").get<std::vector<double>>();
        auto v = j.at("v").get<std::vector<double>>();
        s.m = Eigen::Map<Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
        s.v = Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
        return s;
    }
};

/// One bias-corrected Adam update in place. Moments are lazily sized.
inline void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads,
                      AdamState& state) {
    if (params.size() != grads.size()) throw UsageError("adam_step: params and grads differ in size");
    if (state.m.size() == 0) {
        state.m = Eigen::VectorXd::Zero(params.size());
        state.v = Eigen::VectorXd::Zero(params.size());
    }
    if (state.m.size() != params.size()) throw UsageError("adam_step: state does not match parameter count");
    ++state.step;
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    params.array() -= state.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
}

// ---------------------------------------------------------------------------
// Latent distributions

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

/// Diagonal Gaussian N(mu, exp(log_var)).
struct GaussianLatent {
    Eigen::VectorXd mu;
    Eigen::VectorXd log_var;

    static GaussianLatent standard(Eigen::Index dim) {
        return {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Zero(dim)};
    }
};

/// Mixture over Kc diagonal Gaussians with categorical logits.
struct MixtureLatent {
    Eigen::VectorXd logits;
    std::vector<GaussianLatent> components;
};

/// Element-wise scalar exp and log so equal inputs always give equal outputs
/// (vectorized and scalar code paths may round differently).
inline Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& x) {
    const double m = x.maxCoeff();
    Eigen::VectorXd e = x.unaryExpr([m](double v) { return std::exp(v - m); });
    return e / e.sum();
}

/// z = mu + exp(log_var / 2) * eps.
inline Eigen::VectorXd reparameterize(const GaussianLatent& latent, const Eigen::Ref<const Eigen::VectorXd>& eps) {
    return latent.mu.array() + (0.5 * latent.log_var.array()).exp() * eps.array();
}

/// Gumbel noise from uniforms in (0,1): g = -log(-log u).
inline Eigen::VectorXd gumbel_noise(const Eigen::Ref<const Eigen::VectorXd>& u) {
    for (Eigen::Index i = 0; i < u.size(); ++i)
        if (!(u[i] > 0.0 && u[i] < 1.0)) throw UsageError("gumbel_softmax: uniform sample outside (0,1)");
    return u.unaryExpr([](double v) { return -std::log(-std::log(v)); });
}

/// softmax((logits + g) / tau) with g Gumbel noise derived from `u`.
inline Eigen::VectorXd gumbel_softmax(const Eigen::Ref<const Eigen::VectorXd>& logits, double tau,
                                      const Eigen::Ref<const Eigen::VectorXd>& u) {
    if (!(tau > 0.0)) throw UsageError("gumbel_softmax: tau must be > 0");
    if (u.size() != logits.size()) throw UsageError("gumbel_softmax: u and logits differ in size");
    return softmax((logits + gumbel_noise(u)) / tau);
}

/// Jacobian-vector product of y = softmax(x / tau): returns dL/dx given dL/dy.
inline Eigen::VectorXd softmax_backward(const Eigen::Ref<const Eigen::VectorXd>& y,
                                        const Eigen::Ref<const Eigen::VectorXd>& dy, double tau = 1.0) {
    return y.cwiseProduct((dy.array() - dy.dot(y)).matrix()) / tau;
}

/// KL(N(mu, σ²) || N(0, 1)) summed over dimensions.
inline double kl_gaussian_std(const GaussianLatent& q) {
    return 0.5 * (q.mu.array().square() + q.log_var.array().exp() - 1.0 - q.log_var.array()).sum();
}

/// KL(q || p) for diagonal Gaussians, summed over dimensions.
inline double kl_gaussian_pair(const GaussianLatent& q, const GaussianLatent& p) {
    if (q.mu.size() != p.mu.size()) throw UsageError("kl_gaussian_pair: dimension mismatch");
    const auto var_q = q.log_var.array().exp();
    const auto var_p = p.log_var.array().exp();
    return 0.5 * (p.log_var.array() - q.log_var.array() + (var_q + (q.mu - p.mu).array().square()) / var_p - 1.0)
                     .sum();
}

/// Σ p_k log(p_k / prior_k) with 0·log 0 = 0.
inline double kl_categorical(const Eigen::Ref<const Eigen::VectorXd>& probs,
                             const Eigen::Ref<const Eigen::VectorXd>& prior) {
    if (probs.size() != prior.size()) throw UsageError("kl_categorical: dimension mismatch");
    double kl = 0.0;
    for (Eigen::Index k = 0; k < probs.size(); ++k)
        if (probs[k] > 0.0) kl += probs[k] * std::log(probs[k] / prior[k]);
    return kl;
}

}  // namespace qmap::nn
