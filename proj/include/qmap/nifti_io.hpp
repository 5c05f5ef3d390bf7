#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qmap/acquisition.hpp"
#include "qmap/dataset.hpp"
#include "qmap/errors.hpp"

namespace qmap::nifti {

// Byte offsets into the 348-byte NIfTI-1 header.
namespace off {
inline constexpr std::size_t sizeof_hdr = 0;
inline constexpr std::size_t dim = 40;
inline constexpr std::size_t datatype = 70;
inline constexpr std::size_t bitpix = 72;
inline constexpr std::size_t pixdim = 76;
inline constexpr std::size_t vox_offset = 108;
inline constexpr std::size_t scl_slope = 112;
inline constexpr std::size_t scl_inter = 116;
inline constexpr std::size_t xyzt_units = 123;
inline constexpr std::size_t descrip = 148;
inline constexpr std::size_t qform_code = 252;
inline constexpr std::size_t sform_code = 254;
inline constexpr std::size_t quatern_b = 256;
inline constexpr std::size_t qoffset_x = 268;
inline constexpr std::size_t srow_x = 280;
inline constexpr std::size_t magic = 344;
}  // namespace off

inline constexpr std::int32_t kHeaderSize = 348;
inline constexpr std::int16_t kInt16 = 4;
inline constexpr std::int16_t kFloat32 = 16;
inline constexpr std::int16_t kFloat64 = 64;
inline constexpr std::int16_t kUint16 = 512;

enum class Endian { little, big };

inline Endian native_endian() { return std::endian::native == std::endian::little ? Endian::little : Endian::big; }

/// Up to 4-D image; x varies fastest. A 3-D map is a volume with T == 1.
struct Volume4D {
    std::array<std::size_t, 4> dims{1, 1, 1, 1};  ///< H, W, D, T
    std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
    Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
    std::vector<double> data;

    std::size_t spatial_size() const noexcept { return dims[0] * dims[1] * dims[2]; }
    std::size_t frames() const noexcept { return dims[3]; }
    double& at(std::size_t voxel, std::size_t t) { return data[voxel + spatial_size() * t]; }
    double at(std::size_t voxel, std::size_t t) const { return data[voxel + spatial_size() * t]; }

    void validate() const {
        for (auto d : dims)
            if (d == 0) throw UsageError("volume: dimensions must be positive");
        if (data.size() != spatial_size() * frames()) throw UsageError("volume: data length does not match dims");
    }
};

/// One flag per spatial voxel, x-fastest.
struct VoxelMask {
    std::array<std::size_t, 3> dims{1, 1, 1};
    std::vector<std::uint8_t> inside;

    std::size_t count() const {
        return static_cast<std::size_t>(std::count_if(inside.begin(), inside.end(), [](auto v) { return v != 0; }));
    }
    /// Linear indices of masked voxels; row i of a flattened dataset is voxel indices()[i].
    std::vector<std::size_t> indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < inside.size(); ++i)
            if (inside[i]) out.push_back(i);
        return out;
    }
};

namespace detail {

template <class T>
T load(const std::uint8_t* p, bool swap) {
    std::array<std::uint8_t, sizeof(T)> b;
    std::memcpy(b.data(), p, sizeof(T));
    if (swap) std::reverse(b.begin(), b.end());
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
}

template <class T>
void store(std::uint8_t* p, T v, bool swap) {
    std::array<std::uint8_t, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    if (swap) std::reverse(b.begin(), b.end());
    std::memcpy(p, b.data(), sizeof(T));
}

/// Quaternion (qform) affine.
inline Eigen::Matrix4d qform_affine(double b, double c, double d, double qx, double qy, double qz,
                                    const std::array<double, 4>& pixdim) {
    double a = 1.0 - (b * b + c * c + d * d);
    if (a < 1e-7) {
        const double s = 1.0 / std::sqrt(b * b + c * c + d * d);
        b *= s, c *= s, d *= s;
        a = 0.0;
    } else {
        a = std::sqrt(a);
    }
    const double qfac = pixdim[0] < 0.0 ? -1.0 : 1.0;
    Eigen::Matrix3d R;
    R << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
        2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
        2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
    Eigen::Matrix4d A = Eigen::Matrix4d::Identity();
    A.block<3, 1>(0, 0) = R.col(0) * pixdim[1];
    A.block<3, 1>(0, 1) = R.col(1) * pixdim[2];
    A.block<3, 1>(0, 2) = R.col(2) * pixdim[3] * qfac;
    A(0, 3) = qx, A(1, 3) = qy, A(2, 3) = qz;
    return A;
}

}  // namespace detail

/// Reads an uncompressed single-file NIfTI-1 image of either byte order.
inline Volume4D read_nifti(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    std::vector<std::uint8_t> hdr(kHeaderSize);
    if (!is.read(reinterpret_cast<char*>(hdr.data()), kHeaderSize))
        throw FormatError(path.string() + ": truncated header");

    bool swap;
    if (detail::load<std::int32_t>(&hdr[off::sizeof_hdr], false) == kHeaderSize)
        swap = false;
    else if (detail::load<std::int32_t>(&hdr[off::sizeof_hdr], true) == kHeaderSize)
        swap = true;
    else
        throw FormatError(path.string() + ": sizeof_hdr is not 348");

    const char* magic = reinterpret_cast<const char*>(&hdr[off::magic]);
    if (std::memcmp(magic, "ni1\0", 4) == 0)
        throw FormatError(path.string() + ": header/image pair (.hdr/.img) NIfTI is not supported");
    if (std::memcmp(magic, "n+1\0", 4) != 0) throw FormatError(path.string() + ": bad NIfTI-1 magic");

    std::array<std::int16_t, 8> dim{};
    for (int i = 0; i < 8; ++i) dim[i] = detail::load<std::int16_t>(&hdr[off::dim + 2 * i], swap);
    if (dim[0] != 3 && dim[0] != 4) throw FormatError(path.string() + ": dim[0] must be 3 or 4");
    Volume4D vol;
    for (int i = 0; i < 4; ++i) {
        const int d = (i < dim[0]) ? dim[i + 1] : 1;
        if (d <= 0) throw FormatError(path.string() + ": non-positive dimension");
        vol.dims[static_cast<std::size_t>(i)] = static_cast<std::size_t>(d);
    }

    const auto datatype = detail::load<std::int16_t>(&hdr[off::datatype], swap);
    std::size_t bytes;
    switch (datatype) {
        case kInt16:
        case kUint16: bytes = 2; break;
        case kFloat32: bytes = 4; break;
        case kFloat64: bytes = 8; break;
        default: throw FormatError(path.string() + ": unsupported datatype " + std::to_string(datatype));
    }

    std::array<double, 4> pixdim{};
    for (int i = 0; i < 4; ++i) pixdim[i] = detail::load<float>(&hdr[off::pixdim + 4 * i], swap);
    for (int i = 0; i < 3; ++i) vol.voxel_size[i] = pixdim[i + 1] > 0.0 ? pixdim[i + 1] : 1.0;

    const auto sform = detail::load<std::int16_t>(&hdr[off::sform_code], swap);
    const auto qform = detail::load<std::int16_t>(&hdr[off::qform_code], swap);
    if (sform > 0) {
        vol.affine.setIdentity();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c)
                vol.affine(r, c) = detail::load<float>(&hdr[off::srow_x + 16 * r + 4 * c], swap);
    } else if (qform > 0) {
        auto q = [&](std::size_t o) { return static_cast<double>(detail::load<float>(&hdr[o], swap)); };
        std::array<double, 4> pd{pixdim[0], vol.voxel_size[0], vol.voxel_size[1], vol.voxel_size[2]};
        vol.affine = detail::qform_affine(q(off::quatern_b), q(off::quatern_b + 4), q(off::quatern_b + 8),
                                          q(off::qoffset_x), q(off::qoffset_x + 4), q(off::qoffset_x + 8), pd);
    } else {
        vol.affine = Eigen::Matrix4d::Identity();
        for (int i = 0; i < 3; ++i) vol.affine(i, i) = vol.voxel_size[i];
    }

    const double slope = detail::load<float>(&hdr[off::scl_slope], swap);
    const double inter = detail::load<float>(&hdr[off::scl_inter], swap);
    const bool scale = slope != 0.0 && std::isfinite(slope);
    const auto vox_offset = static_cast<std::streamoff>(detail::load<float>(&hdr[off::vox_offset], swap));

    const std::size_t n = vol.spatial_size() * vol.frames();
    std::vector<std::uint8_t> raw(n * bytes);
    is.seekg(std::max<std::streamoff>(vox_offset, kHeaderSize));
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw FormatError(path.string() + ": truncated payload");

    vol.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* p = raw.data() + i * bytes;
        double v = 0.0;
        switch (datatype) {
            case kInt16: v = detail::load<std::int16_t>(p, swap); break;
            case kUint16: v = detail::load<std::uint16_t>(p, swap); break;
            case kFloat32: v = detail::load<float>(p, swap); break;
            case kFloat64: v = detail::load<double>(p, swap); break;
        }
        vol.data[i] = scale ? v * slope + inter : v;
    }
    return vol;
}

/// Writes a float32 single-file NIfTI-1 with the affine stored as sform.
inline void write_nifti(const Volume4D& vol, const std::filesystem::path& path, Endian endian = native_endian()) {
    vol.validate();
    const bool swap = endian != native_endian();
    std::vector<std::uint8_t> hdr(352, 0);  // header + empty extension block
    detail::store<std::int32_t>(&hdr[off::sizeof_hdr], kHeaderSize, swap);
    const bool is4d = vol.frames() > 1;
    detail::store<std::int16_t>(&hdr[off::dim], static_cast<std::int16_t>(is4d ? 4 : 3), swap);
    for (int i = 0; i < 4; ++i) {
        const auto d = vol.dims[static_cast<std::size_t>(i)];
        if (d > 32767) throw FormatError("write_nifti: dimension too large for NIfTI-1");
        detail::store<std::int16_t>(&hdr[off::dim + 2 * (i + 1)], static_cast<std::int16_t>(d), swap);
    }
    for (int i = 5; i < 8; ++i) detail::store<std::int16_t>(&hdr[off::dim + 2 * i], 1, swap);
    detail::store<std::int16_t>(&hdr[off::datatype], kFloat32, swap);
    detail::store<std::int16_t>(&hdr[off::bitpix], 32, swap);
    detail::store<float>(&hdr[off::pixdim], 1.0f, swap);
    for (int i = 0; i < 3; ++i)
        detail::store<float>(&hdr[off::pixdim + 4 * (i + 1)], static_cast<float>(vol.voxel_size[i]), swap);
    detail::store<float>(&hdr[off::pixdim + 16], 1.0f, swap);
    detail::store<float>(&hdr[off::vox_offset], 352.0f, swap);
    detail::store<float>(&hdr[off::scl_slope], 0.0f, swap);
    hdr[off::xyzt_units] = 2;  // mm
    std::memcpy(&hdr[off::descrip], "qmap", 4);
    detail::store<std::int16_t>(&hdr[off::qform_code], 0, swap);
    detail::store<std::int16_t>(&hdr[off::sform_code], 2, swap);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            detail::store<float>(&hdr[off::srow_x + 16 * r + 4 * c], static_cast<float>(vol.affine(r, c)), swap);
    std::memcpy(&hdr[off::magic], "n+1\0", 4);

    std::vector<std::uint8_t> payload(vol.data.size() * 4);
    for (std::size_t i = 0; i < vol.data.size(); ++i)
        detail::store<float>(&payload[4 * i], static_cast<float>(vol.data[i]), swap);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(hdr.data()), static_cast<std::streamsize>(hdr.size()));
    os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!os) throw FormatError("write failed: " + path.string());
}

/// Mask from any nonzero voxel of the first frame.
inline VoxelMask mask_from_volume(const Volume4D& vol) {
    VoxelMask m{{vol.dims[0], vol.dims[1], vol.dims[2]}, std::vector<std::uint8_t>(vol.spatial_size(), 0)};
    for (std::size_t i = 0; i < vol.spatial_size(); ++i) m.inside[i] = vol.at(i, 0) != 0.0;
    return m;
}

inline double b0_mean(const Volume4D& vol, const std::vector<std::size_t>& b0, std::size_t voxel) {
    double s = 0.0;
    for (auto t : b0) s += vol.at(voxel, t);
    return s / static_cast<double>(b0.size());
}

/// Keeps voxels whose mean b=0 signal exceeds `fraction` of the largest one.
inline VoxelMask threshold_mask(const Volume4D& vol, const AcquisitionScheme& scheme, double fraction = 0.05) {
    if (vol.frames() != scheme.size()) throw UsageError("threshold_mask: volume has " + std::to_string(vol.frames()) +
                                                        " frames but scheme has " + std::to_string(scheme.size()));
    const auto b0 = scheme.b0_indices();
    std::vector<double> means(vol.spatial_size());
    double peak = 0.0;
    for (std::size_t i = 0; i < means.size(); ++i) peak = std::max(peak, means[i] = b0_mean(vol, b0, i));
    VoxelMask m{{vol.dims[0], vol.dims[1], vol.dims[2]}, std::vector<std::uint8_t>(means.size(), 0)};
    for (std::size_t i = 0; i < means.size(); ++i) m.inside[i] = means[i] > fraction * peak;
    return m;
}

struct FlattenReport {
    std::size_t dropped_nonpositive_b0 = 0;
};

/// Divides each masked voxel by its mean b=0 signal and stacks voxels as rows.
/// Voxels with b=0 mean <= 0 are dropped; values are clipped to [1e-6, 10].
inline VoxelDataset normalize_and_flatten(const Volume4D& vol, const AcquisitionScheme& scheme, const VoxelMask& mask,
                                          FlattenReport* report = nullptr) {
    vol.validate();
    if (vol.frames() != scheme.size())
        throw UsageError("volume has " + std::to_string(vol.frames()) + " frames but scheme has " +
                         std::to_string(scheme.size()) + " measurements");
    if (mask.dims != std::array<std::size_t, 3>{vol.dims[0], vol.dims[1], vol.dims[2]} ||
        mask.inside.size() != vol.spatial_size())
        throw UsageError("mask dimensions do not match the volume");

    const auto b0 = scheme.b0_indices();
    std::vector<std::size_t> keep;
    FlattenReport rep;
    for (std::size_t i = 0; i < mask.inside.size(); ++i) {
        if (!mask.inside[i]) continue;
        if (b0_mean(vol, b0, i) <= 0.0) {
            ++rep.dropped_nonpositive_b0;
            continue;
        }
        keep.push_back(i);
    }
    if (keep.empty()) throw UsageError("mask is empty after dropping voxels with non-positive b=0 signal");

    const auto T = static_cast<Eigen::Index>(scheme.size());
    Eigen::MatrixXd signals(static_cast<Eigen::Index>(keep.size()), T);
    for (std::size_t r = 0; r < keep.size(); ++r) {
        const double ref = b0_mean(vol, b0, keep[r]);
        for (Eigen::Index t = 0; t < T; ++t)
            signals(static_cast<Eigen::Index>(r), t) =
                std::clamp(vol.at(keep[r], static_cast<std::size_t>(t)) / ref, 1e-6, 10.0);
    }
    if (report) *report = rep;

    SpatialIndex spatial{{vol.dims[0], vol.dims[1], vol.dims[2]}, vol.voxel_size, vol.affine, std::move(keep)};
    return VoxelDataset{std::move(signals), scheme, std::nullopt, std::nullopt, std::nullopt, std::nullopt,
                        std::move(spatial)};
}

/// Scatters one value per dataset row back into a 3-D map; background is 0.
inline Volume4D unflatten(const Eigen::Ref<const Eigen::VectorXd>& values, const SpatialIndex& spatial) {
    if (static_cast<std::size_t>(values.size()) != spatial.linear_index.size())
        throw UsageError("unflatten: value count does not match spatial index");
    Volume4D vol;
    vol.dims = {spatial.dims[0], spatial.dims[1], spatial.dims[2], 1};
    vol.voxel_size = spatial.voxel_size;
    vol.affine = spatial.affine;
    vol.data.assign(vol.spatial_size(), 0.0);
    for (std::size_t r = 0; r < spatial.linear_index.size(); ++r)
        vol.data[spatial.linear_index[r]] = values[static_cast<Eigen::Index>(r)];
    return vol;
}

/// Inverse of unflatten on the masked voxels.
inline Eigen::VectorXd flatten(const Volume4D& map, const SpatialIndex& spatial) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(spatial.linear_index.size()));
    for (std::size_t r = 0; r < spatial.linear_index.size(); ++r)
        out[static_cast<Eigen::Index>(r)] = map.data[spatial.linear_index[r]];
    return out;
}

}  // namespace qmap::nifti
