#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "qmap/rng.hpp"

namespace qmap {

/// Epoch order: Fisher-Yates over [0, n) driven by the shared stream.
inline std::vector<Eigen::Index> shuffled_indices(Eigen::Index n, Rng& rng) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    for (std::size_t i = idx.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.next_u64() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

/// Columns [begin, end) of `order`, gathered from `data`.
inline Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& data, const std::vector<Eigen::Index>& order,
                                      std::size_t begin, std::size_t end) {
    Eigen::MatrixXd out(data.rows(), static_cast<Eigen::Index>(end - begin));
    for (std::size_t k = begin; k < end; ++k) out.col(static_cast<Eigen::Index>(k - begin)) = data.col(order[k]);
    return out;
}

inline Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
    return m;
}

inline Eigen::MatrixXd open_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform();
    return m;
}

/// Learning rate for `epoch` of `epochs`: cosine from `lr` down to
/// `lr_final`, or constant `lr` when no final rate is given.
inline double scheduled_lr(double lr, std::optional<double> lr_final, int epoch, int epochs) {
    if (!lr_final || epochs <= 1) return lr;
    const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
    return *lr_final + 0.5 * (lr - *lr_final) * (1.0 + std::cos(std::numbers::pi * t));
}

/// Column-wise softmax of x / tau.
inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& x, double tau = 1.0) {
    Eigen::MatrixXd y(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const Eigen::ArrayXd z = x.col(c).array() / tau;
        const Eigen::ArrayXd e = (z - z.maxCoeff()).exp();
        y.col(c) = (e / e.sum()).matrix();
    }
    return y;
}

}  // namespace qmap
