#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "qmap/acquisition.hpp"
#include "qmap/csv.hpp"
#include "qmap/errors.hpp"

namespace qmap {

/// Where each dataset row lives in the source volume.
struct SpatialIndex {
    std::array<std::size_t, 3> dims{};          ///< H, W, D
    std::array<double, 3> voxel_size{1, 1, 1};  ///< mm
    Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
    std::vector<std::size_t> linear_index;      ///< one per row, x-fastest ordering
};

/// N voxels × T normalized measurements plus whatever ground truth is known.
struct VoxelDataset {
    Eigen::MatrixXd signals;  ///< N×T
    AcquisitionScheme scheme;
    std::optional<Eigen::MatrixXd> truth;  ///< N×M physical parameters
    std::optional<std::vector<std::string>> truth_names;
    std::optional<std::vector<int>> labels;
    std::optional<double> snr;
    std::optional<SpatialIndex> spatial;

    std::size_t num_voxels() const noexcept { return static_cast<std::size_t>(signals.rows()); }
    std::size_t num_measurements() const noexcept { return static_cast<std::size_t>(signals.cols()); }

    void validate() const {
        if (signals.cols() != static_cast<Eigen::Index>(scheme.size()))
            throw UsageError("dataset: signal columns (" + std::to_string(signals.cols()) +
                             ") do not match scheme size (" + std::to_string(scheme.size()) + ")");
        if (!signals.allFinite()) throw UsageError("dataset: non-finite signal values");
        if (truth && truth->rows() != signals.rows()) throw UsageError("dataset: truth row count differs from N");
        if (labels && labels->size() != num_voxels()) throw UsageError("dataset: label count differs from N");
        if (spatial && spatial->linear_index.size() != num_voxels())
            throw UsageError("dataset: spatial index count differs from N");
    }
};

/// Writes signals.csv, truth.csv, labels.csv and scheme.json. `meta` goes to
/// meta.json untouched.
inline void save_dataset(const VoxelDataset& ds, const std::filesystem::path& dir, const nlohmann::json& meta) {
    std::filesystem::create_directories(dir);
    csv::write_matrix(dir / "signals.csv", ds.signals);
    if (ds.truth) csv::write_matrix(dir / "truth.csv", *ds.truth);
    if (ds.labels) {
        std::string text;
        for (int l : *ds.labels) text += std::to_string(l) + '\n';
        csv::write_text(dir / "labels.csv", text);
    }
    csv::write_text(dir / "scheme.json", ds.scheme.to_json().dump(2) + '\n');
    nlohmann::json m = meta;
    if (ds.truth_names) m["truth_columns"] = *ds.truth_names;
    csv::write_text(dir / "meta.json", m.dump(2) + '\n');
}

inline VoxelDataset load_dataset(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "signals.csv"))
        throw UsageError("dataset directory " + dir.string() + " has no signals.csv");
    auto scheme = AcquisitionScheme::from_json(nlohmann::json::parse(csv::read_text(dir / "scheme.json")));
    VoxelDataset ds{csv::read_matrix(dir / "signals.csv"), std::move(scheme), {}, {}, {}, {}, {}};
    if (std::filesystem::exists(dir / "truth.csv")) ds.truth = csv::read_matrix(dir / "truth.csv");
    if (std::filesystem::exists(dir / "labels.csv")) {
        Eigen::MatrixXd l = csv::read_matrix(dir / "labels.csv");
        std::vector<int> labels(static_cast<std::size_t>(l.rows()));
        for (Eigen::Index i = 0; i < l.rows(); ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(l(i, 0));
        ds.labels = std::move(labels);
    }
    if (std::filesystem::exists(dir / "meta.json")) {
        auto meta = nlohmann::json::parse(csv::read_text(dir / "meta.json"));
        if (meta.contains("snr") && meta["snr"].is_number()) ds.snr = meta["snr"].get<double>();
        if (meta.contains("truth_columns")) ds.truth_names = meta["truth_columns"].get<std::vector<std::string>>();
    }
    ds.validate();
    return ds;
}

}  // namespace qmap
