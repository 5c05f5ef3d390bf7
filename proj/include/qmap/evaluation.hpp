#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "qmap/csv.hpp"
#include "qmap/errors.hpp"
#include "qmap/fit_result.hpp"
#include "qmap/nifti_io.hpp"

namespace qmap {

struct ErrorStats {
    std::size_t n = 0;
    double rmse = 0.0;
    double bias = 0.0;     ///< mean(prediction - truth)
    double pearson = 0.0;

    nlohmann::json to_json() const { return {{"n", n}, {"rmse", rmse}, {"bias", bias}, {"pearson_r", pearson}}; }
};

/// RMSE, mean signed error and Pearson correlation. When either side has zero
/// variance, r is 1 if prediction equals truth exactly and 0 otherwise.
inline ErrorStats error_stats(const Eigen::Ref<const Eigen::VectorXd>& pred,
                              const Eigen::Ref<const Eigen::VectorXd>& truth) {
    if (pred.size() != truth.size()) throw UsageError("error_stats: length mismatch");
    ErrorStats s;
    s.n = static_cast<std::size_t>(pred.size());
    if (s.n == 0) return s;
    const double n = static_cast<double>(s.n);
    const Eigen::VectorXd err = pred - truth;
    s.rmse = std::sqrt(err.squaredNorm() / n);
    s.bias = err.sum() / n;
    const Eigen::ArrayXd dp = pred.array() - pred.mean();
    const Eigen::ArrayXd dt = truth.array() - truth.mean();
    const double vp = dp.square().sum(), vt = dt.square().sum();
    if (vp > 0.0 && vt > 0.0)
        s.pearson = (dp * dt).sum() / std::sqrt(vp * vt);
    else
        s.pearson = (err.array() == 0.0).all() ? 1.0 : 0.0;
    return s;
}

struct ParamScore {
    std::string name;
    ErrorStats overall;
    std::map<int, ErrorStats> per_cluster;
};

struct Metrics {
    std::string fitter_id;
    std::vector<ParamScore> params;

    const ParamScore& param(const std::string& name) const {
        for (const auto& p : params)
            if (p.name == name) return p;
        throw UsageError("metrics: no parameter '" + name + "'");
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"fitter", fitter_id}, {"params", nlohmann::json::object()}};
        for (const auto& p : params) {
            nlohmann::json clusters = nlohmann::json::object();
            for (const auto& [k, s] : p.per_cluster) clusters[std::to_string(k)] = s.to_json();
            j["params"][p.name] = {{"overall", p.overall.to_json()}, {"per_cluster", clusters}};
        }
        return j;
    }
};

/// Scores each fitted parameter that has a matching truth column. Truth
/// columns are matched by position unless `truth_names` is given.
inline Metrics score(const FitResult& fit, const Eigen::MatrixXd& truth, const std::vector<int>* labels = nullptr,
                     const std::vector<std::string>* truth_names = nullptr) {
    if (truth.rows() != fit.params.rows())
        throw UsageError("score: " + std::to_string(fit.params.rows()) + " fitted voxels vs " +
                         std::to_string(truth.rows()) + " truth rows");
    if (labels && labels->size() != fit.num_voxels()) throw UsageError("score: label count differs from voxel count");
    Metrics m;
    m.fitter_id = fit.fitter_id;
    for (std::size_t j = 0; j < fit.param_names.size(); ++j) {
        Eigen::Index tcol = -1;
        if (truth_names) {
            for (std::size_t t = 0; t < truth_names->size(); ++t)
                if ((*truth_names)[t] == fit.param_names[j]) tcol = static_cast<Eigen::Index>(t);
        } else if (static_cast<Eigen::Index>(j) < truth.cols()) {
            tcol = static_cast<Eigen::Index>(j);
        }
        if (tcol < 0) continue;
        ParamScore ps;
        ps.name = fit.param_names[j];
        const Eigen::VectorXd pred = fit.params.col(static_cast<Eigen::Index>(j));
        const Eigen::VectorXd tr = truth.col(tcol);
        ps.overall = error_stats(pred, tr);
        if (labels) {
            std::set<int> ids(labels->begin(), labels->end());
            for (int k : ids) {
                std::vector<Eigen::Index> rows;
                for (std::size_t i = 0; i < labels->size(); ++i)
                    if ((*labels)[i] == k) rows.push_back(static_cast<Eigen::Index>(i));
                ps.per_cluster[k] = error_stats(pred(rows), tr(rows));
            }
        }
        m.params.push_back(std::move(ps));
    }
    return m;
}

/// Figure colours for clusters 0, 1, 2.
inline const std::vector<std::string>& cluster_colors() {
    static const std::vector<std::string> c{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
    return c;
}

/// Long-format scatter table: param,voxel,truth,prediction,cluster (one row
/// per voxel per parameter, voxel order preserved) plus `<path>.json` with
/// the colour key. Labels are optional; cluster is -1 without them.
inline void export_scatter(const FitResult& fit, const Eigen::MatrixXd* truth, const std::vector<int>* labels,
                           const std::filesystem::path& path) {
    if (!truth) throw UsageError("export_scatter: ground truth is required");
    if (truth->rows() != fit.params.rows()) throw UsageError("export_scatter: truth row count differs from fit");
    if (labels && labels->size() != fit.num_voxels()) throw UsageError("export_scatter: label count differs");
    const Eigen::Index M = std::min<Eigen::Index>(fit.params.cols(), truth->cols());
    std::string text = "param,voxel,truth,prediction,cluster\n";
    for (Eigen::Index j = 0; j < M; ++j)
        for (Eigen::Index i = 0; i < fit.params.rows(); ++i)
            text += fit.param_names[static_cast<std::size_t>(j)] + "," + std::to_string(i) + "," +
                    csv::format_double((*truth)(i, j)) + "," + csv::format_double(fit.params(i, j)) + "," +
                    std::to_string(labels ? (*labels)[static_cast<std::size_t>(i)] : -1) + "\n";
    csv::write_text(path, text);

    nlohmann::json key = nlohmann::json::object();
    if (labels) {
        std::set<int> ids(labels->begin(), labels->end());
        for (int k : ids)
            key[std::to_string(k)] = cluster_colors()[static_cast<std::size_t>(k) % cluster_colors().size()];
    }
    nlohmann::json side = {{"fitter", fit.fitter_id}, {"x", "truth"}, {"y", "prediction"}, {"cluster_colors", key}};
    csv::write_text(path.string() + ".json", side.dump(2) + '\n');
}

/// Minimal SVG truth-vs-prediction scatter for one parameter.
inline std::string scatter_svg(const Eigen::Ref<const Eigen::VectorXd>& truth,
                               const Eigen::Ref<const Eigen::VectorXd>& pred, const std::vector<int>* labels,
                               const std::string& title) {
    const double size = 400.0, pad = 40.0;
    double lo = std::min(truth.minCoeff(), pred.minCoeff()), hi = std::max(truth.maxCoeff(), pred.maxCoeff());
    if (!(hi > lo)) hi = lo + 1.0;
    auto px = [&](double v) { return pad + (v - lo) / (hi - lo) * (size - 2 * pad); };
    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"400\">\n";
    svg += "<text x=\"200\" y=\"20\" text-anchor=\"middle\">" + title + "</text>\n";
    svg += "<line x1=\"" + std::to_string(px(lo)) + "\" y1=\"" + std::to_string(size - px(lo)) + "\" x2=\"" +
           std::to_string(px(hi)) + "\" y2=\"" + std::to_string(size - px(hi)) + "\" stroke=\"gray\"/>\n";
    for (Eigen::Index i = 0; i < truth.size(); ++i) {
        const int k = labels ? (*labels)[static_cast<std::size_t>(i)] : 0;
        const auto& color = cluster_colors()[static_cast<std::size_t>(std::max(k, 0)) % cluster_colors().size()];
        svg += "<circle cx=\"" + std::to_string(px(truth[i])) + "\" cy=\"" + std::to_string(size - px(pred[i])) +
               "\" r=\"1\" fill=\"" + color + "\"/>\n";
    }
    svg += "</svg>\n";
    return svg;
}

// ---------------------------------------------------------------------------

/// One-voxel (6-neighbour) erosion; voxels on the volume edge are eroded.
inline nifti::VoxelMask erode(const nifti::VoxelMask& m) {
    const auto [H, W, D] = m.dims;
    nifti::VoxelMask out{m.dims, std::vector<std::uint8_t>(m.inside.size(), 0)};
    auto at = [&](std::size_t x, std::size_t y, std::size_t z) { return m.inside[x + H * (y + W * z)] != 0; };
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < W; ++y)
            for (std::size_t x = 0; x < H; ++x) {
                if (!at(x, y, z)) continue;
                const bool interior = x > 0 && x + 1 < H && y > 0 && y + 1 < W && z > 0 && z + 1 < D &&
                                      at(x - 1, y, z) && at(x + 1, y, z) && at(x, y - 1, z) && at(x, y + 1, z) &&
                                      at(x, y, z - 1) && at(x, y, z + 1);
                out.inside[x + H * (y + W * z)] = interior;
            }
    return out;
}

struct MapComparison {
    std::vector<std::filesystem::path> map_files;
    std::vector<std::filesystem::path> difference_files;
    /// fitter label → parameter → std of the map over fitted voxels outside the
    /// eroded mask (null when there are no such voxels).
    nlohmann::json background_noise = nlohmann::json::object();
};

/// Writes `<param>_<fitter>.nii` for every fit and `<param>_<a>_minus_<b>.nii`
/// for every pair, and reports the out-of-mask spread of each map.
inline MapComparison compare_maps(const std::vector<FitResult>& fits, const nifti::VoxelMask& mask,
                                  const std::filesystem::path& dir) {
    if (fits.empty()) throw UsageError("compare_maps: no fits given");
    for (const auto& f : fits) {
        if (!f.spatial) throw UsageError("compare_maps: fit '" + f.fitter_id + "' has no spatial index");
        if (f.spatial->dims != mask.dims) throw UsageError("compare_maps: mask dimensions differ from fit volume");
        if (f.param_names != fits.front().param_names) throw UsageError("compare_maps: fits use different models");
    }
    std::filesystem::create_directories(dir);

    std::vector<std::string> labels;
    std::map<std::string, int> seen;
    for (const auto& f : fits) {
        const int n = seen[f.fitter_id]++;
        labels.push_back(n == 0 ? f.fitter_id : f.fitter_id + "-" + std::to_string(n + 1));
    }

    const nifti::VoxelMask interior = erode(mask);
    MapComparison out;
    for (std::size_t p = 0; p < fits.front().param_names.size(); ++p) {
        const std::string& name = fits.front().param_names[p];
        std::vector<nifti::Volume4D> maps;
        for (std::size_t f = 0; f < fits.size(); ++f) {
            maps.push_back(nifti::unflatten(fits[f].params.col(static_cast<Eigen::Index>(p)), *fits[f].spatial));
            const auto file = dir / (name + "_" + labels[f] + ".nii");
            nifti::write_nifti(maps.back(), file);
            out.map_files.push_back(file);

            std::vector<double> outside;
            for (auto idx : fits[f].spatial->linear_index)
                if (!interior.inside[idx]) outside.push_back(maps.back().data[idx]);
            if (outside.empty()) {
                out.background_noise[labels[f]][name] = nullptr;
            } else {
                const Eigen::Map<const Eigen::ArrayXd> v(outside.data(), static_cast<Eigen::Index>(outside.size()));
                out.background_noise[labels[f]][name] = std::sqrt((v - v.mean()).square().mean());
            }
        }
        for (std::size_t a = 0; a < fits.size(); ++a)
            for (std::size_t b = a + 1; b < fits.size(); ++b) {
                nifti::Volume4D diff = maps[a];
                for (std::size_t i = 0; i < diff.data.size(); ++i) diff.data[i] = maps[a].data[i] - maps[b].data[i];
                const auto file = dir / (name + "_" + labels[a] + "_minus_" + labels[b] + ".nii");
                nifti::write_nifti(diff, file);
                out.difference_files.push_back(file);
            }
    }
    csv::write_text(dir / "background_noise.json", out.background_noise.dump(2) + '\n');
    return out;
}

}  // namespace qmap
