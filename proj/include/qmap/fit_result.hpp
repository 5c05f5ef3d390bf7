#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "qmap/csv.hpp"
#include "qmap/dataset.hpp"
#include "qmap/signal_models.hpp"
#include "qmap/version.hpp"

namespace qmap {

/// Fitted physical parameters per voxel plus the per-voxel reconstruction RMSE.
struct FitResult {
    std::string fitter_id;
    ModelId model = ModelId::msdki;
    std::vector<std::string> param_names;
    Eigen::MatrixXd params;         ///< N×M
    Eigen::VectorXd residual_rmse;  ///< N
    double wall_time = 0.0;         ///< seconds
    nlohmann::json config = nlohmann::json::object();
    std::optional<SpatialIndex> spatial;

    std::size_t num_voxels() const { return static_cast<std::size_t>(params.rows()); }

    Eigen::Index column(const std::string& name) const {
        for (std::size_t i = 0; i < param_names.size(); ++i)
            if (param_names[i] == name) return static_cast<Eigen::Index>(i);
        return -1;
    }
};

/// Per-voxel RMSE between reconstructed and measured signals (rows are voxels).
inline Eigen::VectorXd residual_rmse(const SignalModel& model, const Eigen::MatrixXd& params,
                                     const VoxelDataset& ds) {
    Eigen::VectorXd out(params.rows());
    for (Eigen::Index i = 0; i < params.rows(); ++i) {
        const Eigen::VectorXd s = model.signal(params.row(i).transpose(), ds.scheme);
        out[i] = std::sqrt((s - ds.signals.row(i).transpose()).squaredNorm() / static_cast<double>(s.size()));
    }
    return out;
}

/// params.csv (N×M, headerless), residuals.csv and meta.json.
inline void save_fit(const FitResult& fit, const std::filesystem::path& dir, const nlohmann::json& extra_meta = {}) {
    std::filesystem::create_directories(dir);
    csv::write_matrix(dir / "params.csv", fit.params);
    csv::write_matrix(dir / "residuals.csv", fit.residual_rmse);
    nlohmann::json meta = {{"fitter", fit.fitter_id},
                           {"model", to_string(fit.model)},
                           {"param_names", fit.param_names},
                           {"n_voxels", fit.num_voxels()},
                           {"wall_time_s", fit.wall_time},
                           {"config", fit.config},
                           {"version", kVersion}};
    if (extra_meta.is_object())
        for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) meta[it.key()] = it.value();
    if (fit.spatial) {
        const auto& sp = *fit.spatial;
        std::vector<double> aff(sp.affine.data(), sp.affine.data() + 16);
        meta["spatial"] = {{"dims", sp.dims}, {"voxel_size", sp.voxel_size}, {"affine_colmajor", aff}};
        std::string idx;
        for (auto i : sp.linear_index) idx += std::to_string(i) + '\n';
        csv::write_text(dir / "voxel_index.csv", idx);
    }
    csv::write_text(dir / "meta.json", meta.dump(2) + '\n');
}

inline FitResult load_fit(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "params.csv")) throw UsageError(dir.string() + " has no params.csv");
    const auto meta = nlohmann::json::parse(csv::read_text(dir / "meta.json"));
    FitResult fit;
    fit.fitter_id = meta.at("fitter").get<std::string>();
    fit.model = model_from_string(meta.at("model").get<std::string>());
    fit.param_names = meta.at("param_names").get<std::vector<std::string>>();
    fit.params = csv::read_matrix(dir / "params.csv");
    if (std::filesystem::exists(dir / "residuals.csv")) {
        Eigen::MatrixXd r = csv::read_matrix(dir / "residuals.csv");
        fit.residual_rmse = r.col(0);
    }
    fit.wall_time = meta.value("wall_time_s", 0.0);
    fit.config = meta.value("config", nlohmann::json::object());
    if (meta.contains("spatial") && std::filesystem::exists(dir / "voxel_index.csv")) {
        SpatialIndex sp;
        sp.dims = meta["spatial"].at("dims").get<std::array<std::size_t, 3>>();
        sp.voxel_size = meta["spatial"].at("voxel_size").get<std::array<double, 3>>();
        auto aff = meta["spatial"].at("affine_colmajor").get<std::vector<double>>();
        sp.affine = Eigen::Map<Eigen::Matrix4d>(aff.data());
        Eigen::MatrixXd idx = csv::read_matrix(dir / "voxel_index.csv");
        for (Eigen::Index i = 0; i < idx.rows(); ++i) sp.linear_index.push_back(static_cast<std::size_t>(idx(i, 0)));
        fit.spatial = std::move(sp);
    }
    if (static_cast<std::size_t>(fit.params.cols()) != fit.param_names.size() && fit.params.rows() > 0)
        throw FormatError(dir.string() + ": params.csv column count does not match param_names");
    return fit;
}

}  // namespace qmap
