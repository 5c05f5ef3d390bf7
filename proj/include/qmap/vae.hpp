#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "qmap/csv.hpp"
#include "qmap/dataset.hpp"
#include "qmap/errors.hpp"
#include "qmap/fit_result.hpp"
#include "qmap/nn.hpp"
#include "qmap/physics_decoder.hpp"
#include "qmap/rng.hpp"
#include "qmap/training.hpp"
#include "qmap/version.hpp"

// Variational fitters that share one latent space across all voxels and decode
// through the forward model:
//
//   unig: s → encoder → (μ, log σ²) → z = μ + σε → decoder → T(·) → φ → ŝ
//   gmm:  s → encoder1 → logits → c = gumbel_softmax(logits, τ)
//         (s, c) → encoder2 → (μ, log σ²) → z → decoder → T(·) → φ → ŝ
//
// The loss is the mean squared reconstruction error plus β times the KL terms.
// For the mixture prior the KL is split as
//   E_{q(y|s)} KL(q(z|s,c) ‖ N(m_y, s_y²)) + KL(q(y|s) ‖ uniform),
// with q(y|s) = softmax(logits).

namespace qmap {

enum class VaeKind { unig, gmm };

inline std::string to_string(VaeKind k) { return k == VaeKind::unig ? "vae-unig" : "vae-gmm"; }

struct VaeConfig {
    VaeKind kind = VaeKind::unig;
    int latent_dim = 2;
    int components = 3;
    int hidden = 64;
    /// Weight on the per-voxel KL term. The reconstruction term is a mean over
    /// T measurements, so the Gaussian-likelihood equivalent is about 2σ²/T.
    double kl_weight = 1e-3;
    int epochs = 500;
    int batch_size = 256;
    double lr = 1e-3;
    std::optional<double> lr_final = 1e-5;  ///< cosine decay target; constant lr when unset
    double tau = 0.5;
    int mc_samples = 1;
    double prior_jitter = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (latent_dim < 1) throw UsageError("vae: latent_dim must be >= 1");
        if (kind == VaeKind::gmm && components < 1) throw UsageError("vae: components must be >= 1");
        if (hidden < 1 || batch_size < 1 || epochs < 0 || mc_samples < 1)
            throw UsageError("vae: hidden, batch_size and mc_samples must be >= 1, epochs >= 0");
        if (!(kl_weight >= 0.0)) throw UsageError("vae: kl_weight must be >= 0");
        if (!(tau > 0.0)) throw UsageError("vae: tau must be > 0");
        if (!(lr > 0.0)) throw UsageError("vae: lr must be > 0");
        if (lr_final && !(*lr_final > 0.0)) throw UsageError("vae: lr_final must be > 0");
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"kind", to_string(kind)}, {"latent_dim", latent_dim}, {"hidden", hidden},
                            {"kl_weight", kl_weight},  {"epochs", epochs},         {"batch_size", batch_size},
                            {"lr", lr},                {"mc_samples", mc_samples}, {"seed", seed}};
        j["lr_final"] = lr_final ? nlohmann::json(*lr_final) : nlohmann::json(nullptr);
        if (kind == VaeKind::gmm) {
            j["components"] = components;
            j["tau"] = tau;
            j["prior_jitter"] = prior_jitter;
        }
        return j;
    }
};

/// Loss and its parts for one batch. kl_y is zero for the univariate prior.
struct ElboTerms {
    double loss = 0.0;
    double recon = 0.0;
    double kl_z = 0.0;
    double kl_y = 0.0;
};

/// Random inputs for one ELBO evaluation, drawn up front so that a fixed draw
/// gives a deterministic function of the parameters.
struct ElboNoise {
    std::vector<Eigen::MatrixXd> eps;      ///< per MC sample, L × B
    std::vector<Eigen::MatrixXd> uniform;  ///< per MC sample, Kc × B (gmm only)
};

/// Per-voxel posterior summary (rows are voxels).
struct LatentPosterior {
    VaeKind kind = VaeKind::unig;
    Eigen::MatrixXd mu;       ///< N × L
    Eigen::MatrixXd log_var;  ///< N × L
    Eigen::MatrixXd mixing;   ///< N × Kc, gmm only
};

class VaeModel {
public:
    /// Fresh model with random weights drawn from `rng`.
    VaeModel(const SignalModel& model, const AcquisitionScheme& scheme, const VaeConfig& cfg, Rng& rng)
        : cfg_(cfg), physics_(model, model.default_transform(), scheme) {
        cfg_.validate();
        const int T = static_cast<int>(scheme.size());
        const int L = cfg_.latent_dim;
        const int M = static_cast<int>(model.num_params());
        if (cfg_.kind == VaeKind::unig) {
            encoder_ = nn::DenseNet::make({T, cfg_.hidden, cfg_.hidden, 2 * L}, rng);
        } else {
            const int Kc = cfg_.components;
            mixing_encoder_ = nn::DenseNet::make({T, cfg_.hidden, Kc}, rng);
            encoder_ = nn::DenseNet::make({T + Kc, cfg_.hidden, cfg_.hidden, 2 * L}, rng);
            prior_mu_ = Eigen::MatrixXd::Zero(L, Kc);
            for (int k = 0; k < Kc; ++k)
                for (int l = 0; l < L; ++l) prior_mu_(l, k) = cfg_.prior_jitter * rng.normal();
            prior_log_var_ = Eigen::MatrixXd::Zero(L, Kc);
        }
        decoder_ = nn::DenseNet::make({L, M}, rng);
    }

    const VaeConfig& config() const { return cfg_; }
    VaeKind kind() const { return cfg_.kind; }
    const PhysicsDecoder& physics() const { return physics_; }
    Eigen::Index latent_dim() const { return cfg_.latent_dim; }
    Eigen::Index components() const { return cfg_.kind == VaeKind::gmm ? cfg_.components : 0; }

    nn::DenseNet& encoder() { return encoder_; }
    nn::DenseNet& mixing_encoder() { return mixing_encoder_; }
    nn::DenseNet& decoder() { return decoder_; }
    Eigen::MatrixXd& prior_mu() { return prior_mu_; }
    Eigen::MatrixXd& prior_log_var() { return prior_log_var_; }
    const Eigen::MatrixXd& prior_mu() const { return prior_mu_; }
    const Eigen::MatrixXd& prior_log_var() const { return prior_log_var_; }

    std::size_t num_params() const {
        std::size_t n = encoder_.num_params() + decoder_.num_params();
        if (cfg_.kind == VaeKind::gmm)
            n += mixing_encoder_.num_params() + static_cast<std::size_t>(prior_mu_.size() + prior_log_var_.size());
        return n;
    }

    /// Packed order: encoder, decoder, then (gmm) mixing encoder, prior means, prior log-variances.
    Eigen::VectorXd pack() const {
        Eigen::VectorXd p(static_cast<Eigen::Index>(num_params()));
        Eigen::Index o = 0;
        auto put = [&](const nn::DenseNet& net) {
            const auto n = static_cast<Eigen::Index>(net.num_params());
            net.pack(p.segment(o, n));
            o += n;
        };
        put(encoder_);
        put(decoder_);
        if (cfg_.kind == VaeKind::gmm) {
            put(mixing_encoder_);
            p.segment(o, prior_mu_.size()) = Eigen::Map<const Eigen::VectorXd>(prior_mu_.data(), prior_mu_.size());
            o += prior_mu_.size();
            p.segment(o, prior_log_var_.size()) =
                Eigen::Map<const Eigen::VectorXd>(prior_log_var_.data(), prior_log_var_.size());
        }
        return p;
    }

    void unpack(const Eigen::Ref<const Eigen::VectorXd>& p) {
        if (static_cast<std::size_t>(p.size()) != num_params()) throw UsageError("VaeModel::unpack: wrong size");
        Eigen::Index o = 0;
        auto get = [&](nn::DenseNet& net) {
            const auto n = static_cast<Eigen::Index>(net.num_params());
            net.unpack(p.segment(o, n));
            o += n;
        };
        get(encoder_);
        get(decoder_);
        if (cfg_.kind == VaeKind::gmm) {
            get(mixing_encoder_);
            Eigen::Map<Eigen::VectorXd>(prior_mu_.data(), prior_mu_.size()) = p.segment(o, prior_mu_.size());
            o += prior_mu_.size();
            Eigen::Map<Eigen::VectorXd>(prior_log_var_.data(), prior_log_var_.size()) =
                p.segment(o, prior_log_var_.size());
        }
    }

    ElboNoise draw_noise(Eigen::Index batch, Rng& rng) const {
        ElboNoise n;
        for (int s = 0; s < cfg_.mc_samples; ++s) {
            n.eps.push_back(standard_normal(latent_dim(), batch, rng));
            if (cfg_.kind == VaeKind::gmm) n.uniform.push_back(open_uniform(components(), batch, rng));
        }
        return n;
    }

    /// ELBO-based loss for a batch (T × B) with fixed noise; fills `grad`
    /// (packed order) when given.
    ElboTerms elbo(const Eigen::MatrixXd& batch, const ElboNoise& noise, Eigen::VectorXd* grad = nullptr) const {
        if (batch.cols() == 0) throw UsageError("elbo: empty batch");
        if (batch.rows() != physics_.num_measurements()) throw UsageError("elbo: batch has wrong measurement count");
        if (noise.eps.size() != static_cast<std::size_t>(cfg_.mc_samples) ||
            (cfg_.kind == VaeKind::gmm && noise.uniform.size() != noise.eps.size()))
            throw UsageError("elbo: noise does not match the configured sample count");
        return cfg_.kind == VaeKind::unig ? elbo_unig(batch, noise, grad) : elbo_gmm(batch, noise, grad);
    }

    /// Deterministic posterior summary: (μ, log σ²) and, for gmm, the mixing
    /// vector softmax(logits / τ), i.e. the Gumbel-softmax with the noise
    /// replaced by a constant.
    LatentPosterior posterior(const Eigen::MatrixXd& signals) const {
        LatentPosterior post;
        post.kind = cfg_.kind;
        const auto L = latent_dim();
        Eigen::MatrixXd h;
        if (cfg_.kind == VaeKind::unig) {
            h = encoder_.forward(signals);
        } else {
            const Eigen::MatrixXd c = softmax_columns(mixing_encoder_.forward(signals), cfg_.tau);
            Eigen::MatrixXd in(signals.rows() + c.rows(), signals.cols());
            in << signals, c;
            h = encoder_.forward(in);
            post.mixing = c.transpose();
        }
        post.mu = h.topRows(L).transpose();
        post.log_var = h.bottomRows(L).cwiseMax(nn::kLogVarMin).cwiseMin(nn::kLogVarMax).transpose();
        return post;
    }

    /// Physical parameters (M × N) decoded from the posterior mean; no sampling.
    Eigen::MatrixXd predict(const Eigen::MatrixXd& signals) const {
        const LatentPosterior post = posterior(signals);
        return physics_.physical(decoder_.forward(Eigen::MatrixXd(post.mu.transpose())));
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"config", cfg_.to_json()}, {"encoder", encoder_.to_json()}, {"decoder", decoder_.to_json()}};
        if (cfg_.kind == VaeKind::gmm) {
            j["mixing_encoder"] = mixing_encoder_.to_json();
            j["prior_mu"] = std::vector<double>(prior_mu_.data(), prior_mu_.data() + prior_mu_.size());
            j["prior_log_var"] =
                std::vector<double>(prior_log_var_.data(), prior_log_var_.data() + prior_log_var_.size());
        }
        return j;
    }

    /// Restores weights saved by to_json() into a model built with the same config.
    void load_json(const nlohmann::json& j) {
        encoder_ = nn::DenseNet::from_json(j.at("encoder"));
        decoder_ = nn::DenseNet::from_json(j.at("decoder"));
        if (cfg_.kind == VaeKind::gmm) {
            mixing_encoder_ = nn::DenseNet::from_json(j.at("mixing_encoder"));
            auto m = j.at("prior_mu").get<std::vector<double>>();
            auto v = j.at("prior_log_var").get<std::vector<double>>();
            if (static_cast<Eigen::Index>(m.size()) != prior_mu_.size() ||
                static_cast<Eigen::Index>(v.size()) != prior_log_var_.size())
                throw FormatError("checkpoint: prior size does not match config");
            prior_mu_ = Eigen::Map<Eigen::MatrixXd>(m.data(), prior_mu_.rows(), prior_mu_.cols());
            prior_log_var_ = Eigen::Map<Eigen::MatrixXd>(v.data(), prior_log_var_.rows(), prior_log_var_.cols());
        }
        if (pack().size() != static_cast<Eigen::Index>(num_params())) throw FormatError("checkpoint: shape mismatch");
    }

private:
    /// Shared tail: reparameterize, decode, reconstruct. Returns d loss / d μ and
    /// d loss / d log σ² (pre-clamp) from the reconstruction term only and adds
    /// the reconstruction error (already scaled by 1/S) to `recon`.
    struct Head {
        Eigen::MatrixXd mu, log_var, clamp_mask;
    };

    Head split_head(const Eigen::MatrixXd& h) const {
        const auto L = latent_dim();
        Head out;
        out.mu = h.topRows(L);
        const Eigen::MatrixXd raw = h.bottomRows(L);
        out.log_var = raw.cwiseMax(nn::kLogVarMin).cwiseMin(nn::kLogVarMax);
        out.clamp_mask = ((raw.array() >= nn::kLogVarMin) && (raw.array() <= nn::kLogVarMax)).cast<double>();
        return out;
    }

    double decode_and_reconstruct(const Eigen::MatrixXd& batch, const Head& head, const Eigen::MatrixXd& eps,
                                  double scale, Eigen::VectorXd* grad, Eigen::Index decoder_offset,
                                  Eigen::MatrixXd* dmu, Eigen::MatrixXd* dlog_var) const {
        const Eigen::MatrixXd sigma = (0.5 * head.log_var.array()).exp();
        const Eigen::MatrixXd z = head.mu + sigma.cwiseProduct(eps);
        nn::ForwardCache dcache;
        PhysicsDecoder::Cache pcache;
        const Eigen::MatrixXd raw = decoder_.forward(z, grad ? &dcache : nullptr);
        const Eigen::MatrixXd pred = physics_.forward(raw, grad ? &pcache : nullptr);
        const Eigen::MatrixXd diff = pred - batch;
        const double denom = static_cast<double>(diff.size());
        if (grad) {
            const Eigen::MatrixXd draw = physics_.backward(pcache, (2.0 * scale / denom) * diff);
            const Eigen::MatrixXd dz = decoder_.backward(
                dcache, draw, grad->segment(decoder_offset, static_cast<Eigen::Index>(decoder_.num_params())));
            *dmu += dz;
            *dlog_var += (dz.cwiseProduct(sigma).cwiseProduct(eps) * 0.5);
        }
        return scale * diff.squaredNorm() / denom;
    }

    ElboTerms elbo_unig(const Eigen::MatrixXd& batch, const ElboNoise& noise, Eigen::VectorXd* grad) const {
        const double B = static_cast<double>(batch.cols());
        const double beta = cfg_.kl_weight;
        const double scale = 1.0 / static_cast<double>(noise.eps.size());
        const auto enc_n = static_cast<Eigen::Index>(encoder_.num_params());
        if (grad) grad->setZero(static_cast<Eigen::Index>(num_params()));

        nn::ForwardCache ecache;
        const Head head = split_head(encoder_.forward(batch, grad ? &ecache : nullptr));
        Eigen::MatrixXd dmu = Eigen::MatrixXd::Zero(head.mu.rows(), head.mu.cols());
        Eigen::MatrixXd dlv = dmu;

        ElboTerms t;
        for (const auto& eps : noise.eps)
            t.recon += decode_and_reconstruct(batch, head, eps, scale, grad, enc_n, &dmu, &dlv);

        const Eigen::ArrayXXd var = head.log_var.array().exp();
        t.kl_z = 0.5 * (head.mu.array().square() + var - 1.0 - head.log_var.array()).sum() / B;
        t.loss = t.recon + beta * t.kl_z;

        if (grad) {
            dmu += (beta / B) * head.mu;
            dlv += ((beta / B) * 0.5 * (var - 1.0)).matrix();
            Eigen::MatrixXd dh(2 * latent_dim(), batch.cols());
            dh << dmu, dlv.cwiseProduct(head.clamp_mask);
            encoder_.backward(ecache, dh, grad->segment(0, enc_n));
        }
        return t;
    }

    ElboTerms elbo_gmm(const Eigen::MatrixXd& batch, const ElboNoise& noise, Eigen::VectorXd* grad) const {
        const Eigen::Index B = batch.cols(), T = batch.rows(), L = latent_dim(), Kc = components();
        const double beta = cfg_.kl_weight;
        const double tau = cfg_.tau;
        const double scale = 1.0 / static_cast<double>(noise.eps.size());
        const auto enc_n = static_cast<Eigen::Index>(encoder_.num_params());
        const auto dec_n = static_cast<Eigen::Index>(decoder_.num_params());
        const auto mix_n = static_cast<Eigen::Index>(mixing_encoder_.num_params());
        const Eigen::Index mix_off = enc_n + dec_n;
        const Eigen::Index pmu_off = mix_off + mix_n;
        const Eigen::Index plv_off = pmu_off + prior_mu_.size();
        if (grad) grad->setZero(static_cast<Eigen::Index>(num_params()));

        nn::ForwardCache mcache;
        const Eigen::MatrixXd logits = mixing_encoder_.forward(batch, grad ? &mcache : nullptr);
        const Eigen::MatrixXd q_y = softmax_columns(logits);
        const Eigen::ArrayXXd prior_var = prior_log_var_.array().exp();

        Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(Kc, B);
        Eigen::MatrixXd dq_y = Eigen::MatrixXd::Zero(Kc, B);
        Eigen::MatrixXd dprior_mu = Eigen::MatrixXd::Zero(L, Kc);
        Eigen::MatrixXd dprior_lv = Eigen::MatrixXd::Zero(L, Kc);

        ElboTerms t;
        for (std::size_t s = 0; s < noise.eps.size(); ++s) {
            Eigen::MatrixXd pert = logits + nn_gumbel(noise.uniform[s]);
            const Eigen::MatrixXd c = softmax_columns(pert, tau);
            Eigen::MatrixXd in(T + Kc, B);
            in << batch, c;
            nn::ForwardCache ecache;
            const Head head = split_head(encoder_.forward(in, grad ? &ecache : nullptr));
            Eigen::MatrixXd dmu = Eigen::MatrixXd::Zero(L, B);
            Eigen::MatrixXd dlv = dmu;

            t.recon += decode_and_reconstruct(batch, head, noise.eps[s], scale, grad, enc_n, &dmu, &dlv);

            // KL(q(z|s,c) ‖ N(m_k, s_k²)) for every voxel and component.
            const Eigen::ArrayXXd var = head.log_var.array().exp();
            Eigen::MatrixXd kl_comp(Kc, B);
            for (Eigen::Index k = 0; k < Kc; ++k) {
                const Eigen::ArrayXXd d = head.mu.array().colwise() - prior_mu_.col(k).array();
                const Eigen::ArrayXXd ratio = (var + d.square()).colwise() / prior_var.col(k);
                kl_comp.row(k) = 0.5 * ((-head.log_var.array()).colwise() + prior_log_var_.col(k).array() + ratio - 1.0)
                                           .colwise()
                                           .sum()
                                           .matrix();
                if (grad) {
                    const Eigen::RowVectorXd w = q_y.row(k) * (scale * beta / static_cast<double>(B));
                    const Eigen::ArrayXXd d_over = d.colwise() / prior_var.col(k);
                    dmu += (d_over.rowwise() * w.array()).matrix();
                    dlv += (0.5 * (((var.colwise() / prior_var.col(k)) - 1.0).rowwise() * w.array())).matrix();
                    dprior_mu.col(k) -= (d_over.rowwise() * w.array()).rowwise().sum().matrix();
                    dprior_lv.col(k) += (0.5 * ((1.0 - ratio).rowwise() * w.array())).rowwise().sum().matrix();
                }
            }
            t.kl_z += scale * q_y.cwiseProduct(kl_comp).sum() / static_cast<double>(B);

            if (grad) {
                dq_y += (scale * beta / static_cast<double>(B)) * kl_comp;
                Eigen::MatrixXd dh(2 * L, B);
                dh << dmu, dlv.cwiseProduct(head.clamp_mask);
                const Eigen::MatrixXd din = encoder_.backward(ecache, dh, grad->segment(0, enc_n));
                const Eigen::MatrixXd dc = din.bottomRows(Kc);
                for (Eigen::Index b = 0; b < B; ++b) dlogits.col(b) += nn::softmax_backward(c.col(b), dc.col(b), tau);
            }
        }

        // KL(q(y|s) ‖ uniform)
        const double log_kc = std::log(static_cast<double>(Kc));
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index k = 0; k < Kc; ++k) {
                const double p = q_y(k, b);
                if (p > 0.0) {
                    t.kl_y += p * (std::log(p) + log_kc);
                    if (grad) dq_y(k, b) += beta / static_cast<double>(B) * (std::log(p) + log_kc + 1.0);
                }
            }
        t.kl_y /= static_cast<double>(B);
        t.loss = t.recon + beta * (t.kl_z + t.kl_y);

        if (grad) {
            for (Eigen::Index b = 0; b < B; ++b) dlogits.col(b) += nn::softmax_backward(q_y.col(b), dq_y.col(b));
            mixing_encoder_.backward(mcache, dlogits, grad->segment(mix_off, mix_n));
            grad->segment(pmu_off, dprior_mu.size()) = Eigen::Map<const Eigen::VectorXd>(dprior_mu.data(), dprior_mu.size());
            grad->segment(plv_off, dprior_lv.size()) = Eigen::Map<const Eigen::VectorXd>(dprior_lv.data(), dprior_lv.size());
        }
        return t;
    }

    static Eigen::MatrixXd nn_gumbel(const Eigen::MatrixXd& u) {
        Eigen::MatrixXd g(u.rows(), u.cols());
        for (Eigen::Index c = 0; c < u.cols(); ++c) g.col(c) = nn::gumbel_noise(u.col(c));
        return g;
    }

    VaeConfig cfg_;
    PhysicsDecoder physics_;
    nn::DenseNet encoder_;
    nn::DenseNet mixing_encoder_;
    nn::DenseNet decoder_;
    Eigen::MatrixXd prior_mu_;       ///< L × Kc
    Eigen::MatrixXd prior_log_var_;  ///< L × Kc
};

struct VaeTrainingLog {
    std::vector<ElboTerms> epochs;  ///< voxel-weighted epoch means
};

struct VaeFit {
    VaeModel model;
    FitResult fit;
    LatentPosterior posterior;
    VaeTrainingLog log;
    nn::AdamState adam;
    std::string rng_state;
};

/// Minibatch Adam training followed by sampling-free inference on every voxel.
/// Throws NumericalError if any loss term becomes non-finite.
inline VaeFit train_vae(const VoxelDataset& ds, const SignalModel& model, const VaeConfig& cfg) {
    ds.validate();
    if (ds.num_voxels() == 0) throw UsageError("train_vae: empty dataset");
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    Rng rng(cfg.seed);
    VaeModel vae(model, ds.scheme, cfg, rng);
    const Eigen::MatrixXd data = ds.signals.transpose();
    const auto N = data.cols();

    nn::AdamState adam;
    adam.lr = cfg.lr;
    Eigen::VectorXd params = vae.pack();
    Eigen::VectorXd grad;
    VaeTrainingLog log;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        adam.lr = scheduled_lr(cfg.lr, cfg.lr_final, epoch, cfg.epochs);
        const auto order = shuffled_indices(N, rng);
        ElboTerms sum;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const Eigen::MatrixXd batch = gather_columns(data, order, start, end);
            const ElboNoise noise = vae.draw_noise(batch.cols(), rng);
            const ElboTerms t = vae.elbo(batch, noise, &grad);
            if (!std::isfinite(t.loss) || !grad.allFinite())
                throw NumericalError(to_string(cfg.kind) + " training diverged at epoch " + std::to_string(epoch));
            const double w = static_cast<double>(end - start);
            sum.loss += w * t.loss;
            sum.recon += w * t.recon;
            sum.kl_z += w * t.kl_z;
            sum.kl_y += w * t.kl_y;
            nn::adam_step(params, grad, adam);
            vae.unpack(params);
        }
        const double n = static_cast<double>(N);
        log.epochs.push_back({sum.loss / n, sum.recon / n, sum.kl_z / n, sum.kl_y / n});
    }

    FitResult fit;
    fit.fitter_id = to_string(cfg.kind);
    fit.model = model.id();
    fit.param_names = model.param_names();
    fit.params = vae.predict(data).transpose();
    fit.residual_rmse = residual_rmse(model, fit.params, ds);
    fit.config = cfg.to_json();
    fit.spatial = ds.spatial;
    LatentPosterior post = vae.posterior(data);
    fit.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string state = rng.state();
    return VaeFit{std::move(vae), std::move(fit), std::move(post), std::move(log), std::move(adam), std::move(state)};
}

/// Checkpoint container: weights, optimizer state and RNG state.
inline nlohmann::json vae_checkpoint(const VaeFit& vf) {
    return {{"format", "qmap-checkpoint"},
            {"format_version", 1},
            {"version", kVersion},
            {"kind", to_string(vf.model.kind())},
            {"model", vf.model.to_json()},
            {"adam", vf.adam.to_json()},
            {"rng_state", vf.rng_state}};
}

/// Writes `path` (one row per voxel: mu_*, sigma_*, and c_* for gmm) plus
/// `<stem>_hist1d.csv` and, for L >= 2, `<stem>_hist2d.csv` over the first two
/// latent dimensions of μ.
inline void export_latent(const LatentPosterior& post, const std::filesystem::path& path, int bins = 32) {
    const Eigen::Index N = post.mu.rows(), L = post.mu.cols();
    const bool gmm = post.kind == VaeKind::gmm;
    const Eigen::Index Kc = gmm ? post.mixing.cols() : 0;
    std::string text;
    std::vector<std::string> header;
    for (Eigen::Index l = 0; l < L; ++l) header.push_back("mu_" + std::to_string(l));
    for (Eigen::Index l = 0; l < L; ++l) header.push_back("sigma_" + std::to_string(l));
    for (Eigen::Index k = 0; k < Kc; ++k) header.push_back("c_" + std::to_string(k));
    for (std::size_t i = 0; i < header.size(); ++i) text += (i ? "," : "") + header[i];
    text += '\n';
    for (Eigen::Index i = 0; i < N; ++i) {
        for (Eigen::Index l = 0; l < L; ++l) text += (l ? "," : "") + csv::format_double(post.mu(i, l));
        for (Eigen::Index l = 0; l < L; ++l) text += "," + csv::format_double(std::exp(0.5 * post.log_var(i, l)));
        for (Eigen::Index k = 0; k < Kc; ++k) text += "," + csv::format_double(post.mixing(i, k));
        text += '\n';
    }
    csv::write_text(path, text);

    const auto stem = path.parent_path() / path.stem();
    std::string h1 = "dim,bin_lo,bin_hi,count\n";
    for (Eigen::Index l = 0; l < L && N > 0; ++l) {
        const double lo = post.mu.col(l).minCoeff(), hi = post.mu.col(l).maxCoeff();
        const double width = hi > lo ? (hi - lo) / bins : 1.0;
        std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
        for (Eigen::Index i = 0; i < N; ++i)
            ++counts[std::min<std::size_t>(static_cast<std::size_t>((post.mu(i, l) - lo) / width), bins - 1)];
        for (int b = 0; b < bins; ++b)
            h1 += std::to_string(l) + "," + csv::format_double(lo + b * width) + "," +
                  csv::format_double(lo + (b + 1) * width) + "," + std::to_string(counts[b]) + "\n";
    }
    csv::write_text(stem.string() + "_hist1d.csv", h1);

    if (L >= 2) {
        std::string h2 = "bin0,bin1,mu0_lo,mu1_lo,count\n";
        if (N > 0) {
            const double lo0 = post.mu.col(0).minCoeff(), hi0 = post.mu.col(0).maxCoeff();
            const double lo1 = post.mu.col(1).minCoeff(), hi1 = post.mu.col(1).maxCoeff();
            const double w0 = hi0 > lo0 ? (hi0 - lo0) / bins : 1.0, w1 = hi1 > lo1 ? (hi1 - lo1) / bins : 1.0;
            std::vector<std::size_t> counts(static_cast<std::size_t>(bins * bins), 0);
            for (Eigen::Index i = 0; i < N; ++i) {
                const auto a = std::min<std::size_t>(static_cast<std::size_t>((post.mu(i, 0) - lo0) / w0), bins - 1);
                const auto b = std::min<std::size_t>(static_cast<std::size_t>((post.mu(i, 1) - lo1) / w1), bins - 1);
                ++counts[a * bins + b];
            }
            for (int a = 0; a < bins; ++a)
                for (int b = 0; b < bins; ++b)
                    h2 += std::to_string(a) + "," + std::to_string(b) + "," + csv::format_double(lo0 + a * w0) + "," +
                          csv::format_double(lo1 + b * w1) + "," + std::to_string(counts[a * bins + b]) + "\n";
        }
        csv::write_text(stem.string() + "_hist2d.csv", h2);
    }
}

}  // namespace qmap
