#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "qmap/errors.hpp"

namespace qmap {

/// How b-values in a bval file are interpreted.
enum class BvalUnits {
    auto_detect,   ///< s/mm² when max b > 100, else ms/μm²
    s_per_mm2,
    ms_per_um2,
};

/// Measurement protocol shared by every fitter: one b-value (ms/μm²) and one
/// gradient direction per measurement.
///
/// Directions are unit vectors, except that b=0 entries may carry the zero
/// vector. Immutable once built.
class AcquisitionScheme {
public:
    static constexpr double kDirectionTolerance = 1e-6;
    /// Max b above which auto detection assumes s/mm².
    static constexpr double kUnitThreshold = 100.0;

    AcquisitionScheme(std::vector<double> bvalues, std::vector<Eigen::Vector3d> directions,
                      bool direction_free = false, bool converted_from_s_per_mm2 = false)
        : bvalues_(std::move(bvalues)),
          directions_(std::move(directions)),
          direction_free_(direction_free),
          converted_(converted_from_s_per_mm2) {
        validate();
    }

    std::size_t size() const noexcept { return bvalues_.size(); }
    const std::vector<double>& bvalues() const noexcept { return bvalues_; }
    const std::vector<Eigen::Vector3d>& directions() const noexcept { return directions_; }
    double bvalue(std::size_t t) const { return bvalues_[t]; }
    const Eigen::Vector3d& direction(std::size_t t) const { return directions_[t]; }
    bool direction_free() const noexcept { return direction_free_; }
    /// True when the source file was detected (or declared) to be in s/mm².
    bool converted_from_s_per_mm2() const noexcept { return converted_; }

    std::vector<std::size_t> b0_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t t = 0; t < bvalues_.size(); ++t)
            if (bvalues_[t] == 0.0) out.push_back(t);
        return out;
    }

    /// FSL bval row, in ms/μm².
    std::string to_bval_text() const {
        std::ostringstream os;
        os << std::setprecision(17);
        for (std::size_t t = 0; t < size(); ++t) os << (t ? " " : "") << bvalues_[t];
        os << '\n';
        return os.str();
    }

    /// FSL bvec: three rows (x, y, z).
    std::string to_bvec_text() const {
        std::ostringstream os;
        os << std::setprecision(17);
        for (int axis = 0; axis < 3; ++axis) {
            for (std::size_t t = 0; t < size(); ++t) os << (t ? " " : "") << directions_[t][axis];
            os << '\n';
        }
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json dirs = nlohmann::json::array();
        for (const auto& g : directions_) dirs.push_back({g.x(), g.y(), g.z()});
        return {{"bvalues", bvalues_},
                {"directions", dirs},
                {"direction_free", direction_free_},
                {"units", "ms/um^2"},
                {"converted_from_s_per_mm2", converted_}};
    }

    static AcquisitionScheme from_json(const nlohmann::json& j) {
        std::vector<double> b = j.at("bvalues").get<std::vector<double>>();
        std::vector<Eigen::Vector3d> dirs;
        for (const auto& d : j.at("directions")) {
            auto v = d.get<std::vector<double>>();
            if (v.size() != 3) throw FormatError("scheme.json: direction must have 3 components");
            dirs.emplace_back(v[0], v[1], v[2]);
        }
        return AcquisitionScheme(std::move(b), std::move(dirs), j.value("direction_free", false),
                                 j.value("converted_from_s_per_mm2", false));
    }

private:
    void validate() const {
        if (bvalues_.size() != directions_.size())
            throw UsageError("acquisition: " + std::to_string(bvalues_.size()) + " b-values but " +
                             std::to_string(directions_.size()) + " directions");
        if (bvalues_.size() < 2) throw UsageError("acquisition: need at least 2 measurements");
        bool has_b0 = false;
        for (std::size_t t = 0; t < bvalues_.size(); ++t) {
            const double b = bvalues_[t];
            if (!std::isfinite(b) || b < 0.0) throw UsageError("acquisition: b-values must be finite and >= 0");
            if (b == 0.0) has_b0 = true;
            const double n = directions_[t].norm();
            const bool zero_ok = (b == 0.0 && n == 0.0);
            if (!zero_ok && std::abs(n - 1.0) >= kDirectionTolerance)
                throw UsageError("acquisition: direction " + std::to_string(t) + " is not unit length");
        }
        if (!has_b0) throw UsageError("acquisition: no b=0 measurement");
    }

    std::vector<double> bvalues_;
    std::vector<Eigen::Vector3d> directions_;
    bool direction_free_ = false;
    bool converted_ = false;
};

namespace detail {

inline std::vector<std::vector<double>> parse_rows(std::string_view text, const char* what) {
    std::vector<std::vector<double>> rows;
    std::istringstream lines{std::string(text)};
    std::string line;
    while (std::getline(lines, line)) {
        std::istringstream tokens(line);
        std::vector<double> row;
        std::string tok;
        while (tokens >> tok) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(tok, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != tok.size() || !std::isfinite(v))
                throw UsageError(std::string(what) + ": non-numeric token '" + tok + "'");
            row.push_back(v);
        }
        if (!row.empty()) rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace detail

/// Parses FSL-style bval (one row) and bvec (three rows) text.
///
/// Directions are renormalized to unit length; zero vectors stay zero. b-values
/// are converted from s/mm² to ms/μm² when `units` says so or, in auto mode,
/// when the largest b exceeds 100. Converted b-values at or below
/// `b0_threshold` (ms/μm²) are snapped to exactly 0, since scanners often
/// report b=5 s/mm² for the unweighted volumes.
inline AcquisitionScheme parse_bval_bvec(std::string_view bval_text, std::string_view bvec_text,
                                         BvalUnits units = BvalUnits::auto_detect,
                                         double b0_threshold = 0.0) {
    auto brows = detail::parse_rows(bval_text, "bval");
    auto grows = detail::parse_rows(bvec_text, "bvec");
    // Some writers emit bval as a column; flatten it.
    std::vector<double> b;
    for (const auto& r : brows) b.insert(b.end(), r.begin(), r.end());
    if (grows.size() != 3) throw UsageError("bvec: expected 3 rows, got " + std::to_string(grows.size()));
    for (const auto& r : grows)
        if (r.size() != b.size())
            throw UsageError("bval/bvec length mismatch: " + std::to_string(b.size()) + " b-values vs " +
                             std::to_string(r.size()) + " bvec columns");
    if (b.size() < 2) throw UsageError("bval: need at least 2 measurements");

    double bmax = 0.0;
    for (double v : b) bmax = std::max(bmax, v);
    const bool convert = units == BvalUnits::s_per_mm2 ||
                         (units == BvalUnits::auto_detect && bmax > AcquisitionScheme::kUnitThreshold);
    for (double& v : b) {
        if (convert) v /= 1000.0;
        if (v > 0.0 && v <= b0_threshold) v = 0.0;
    }

    std::vector<Eigen::Vector3d> dirs;
    dirs.reserve(b.size());
    for (std::size_t t = 0; t < b.size(); ++t) {
        Eigen::Vector3d g(grows[0][t], grows[1][t], grows[2][t]);
        const double n = g.norm();
        if (n > 0.0) g /= n;
        dirs.push_back(g);
    }
    return AcquisitionScheme(std::move(b), std::move(dirs), false, convert);
}

/// Direction-free scheme for MSDKI simulation; every direction is the (0,0,1)
/// placeholder.
inline AcquisitionScheme scheme_for_simulation(const std::vector<double>& bvalues) {
    if (bvalues.empty()) throw UsageError("simulation scheme: empty b-value list");
    if (std::find(bvalues.begin(), bvalues.end(), 0.0) == bvalues.end())
        throw UsageError("simulation scheme: no b=0 entry");
    std::vector<Eigen::Vector3d> dirs(bvalues.size(), Eigen::Vector3d::UnitZ());
    return AcquisitionScheme(bvalues, std::move(dirs), true, false);
}

/// Default simulation grid in ms/μm²: 0 to 2 in steps of 0.25. The MSDKI
/// signal only decreases with b while b < 3/(DK); stopping at 2 keeps most
/// draws from the default clusters inside that range.
inline std::vector<double> default_simulation_bvalues() {
    return {0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
}

}  // namespace qmap
