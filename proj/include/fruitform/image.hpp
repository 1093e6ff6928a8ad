#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

namespace fruitform {

// Pixel planes are (rows = height, cols = width); plane(y, x).
using PlaneU8 = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;
using PlaneF = Eigen::ArrayXXf;

/// Planar 8-bit RGB raster.
struct ImageU8 {
    std::array<PlaneU8, 3> plane;

    ImageU8() = default;
    ImageU8(int width, int height, std::uint8_t fill = 0) {
        for (auto& p : plane) p = PlaneU8::Constant(height, width, fill);
    }

    int width() const { return static_cast<int>(plane[0].cols()); }
    int height() const { return static_cast<int>(plane[0].rows()); }
    bool empty() const { return plane[0].size() == 0; }

    bool operator==(const ImageU8& o) const {
        for (int c = 0; c < 3; ++c)
            if (plane[c].rows() != o.plane[c].rows() || plane[c].cols() != o.plane[c].cols() ||
                !(plane[c] == o.plane[c]).all())
                return false;
        return true;
    }
};

// The eight lossless transforms available to the augmentation planner:
// the dihedral group of the pixel lattice. Rotations are clockwise;
// HFlipRot90 means "rotate 90 then flip horizontally".
enum class DihedralTag : std::uint8_t {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
    HFlipRot90,
    HFlipRot270,
};

constexpr std::array<DihedralTag, 8> kDihedralTags = {
    DihedralTag::Identity,   DihedralTag::Rot90, DihedralTag::Rot180,
    DihedralTag::Rot270,     DihedralTag::HFlip, DihedralTag::VFlip,
    DihedralTag::HFlipRot90, DihedralTag::HFlipRot270,
};

std::string to_string(DihedralTag t);
DihedralTag dihedral_from_string(const std::string& name);
DihedralTag dihedral_inverse(DihedralTag t);

template <typename Derived>
auto rot90cw(const Eigen::ArrayBase<Derived>& a) {
    return a.transpose().rowwise().reverse().eval();
}
template <typename Derived>
auto rot180(const Eigen::ArrayBase<Derived>& a) {
    return a.reverse().eval();
}
template <typename Derived>
auto rot270cw(const Eigen::ArrayBase<Derived>& a) {
    return a.transpose().colwise().reverse().eval();
}
template <typename Derived>
auto hflip(const Eigen::ArrayBase<Derived>& a) {
    return a.rowwise().reverse().eval();
}
template <typename Derived>
auto vflip(const Eigen::ArrayBase<Derived>& a) {
    return a.colwise().reverse().eval();
}

template <typename Plane>
Plane apply_dihedral(const Plane& p, DihedralTag t) {
    switch (t) {
        case DihedralTag::Identity: return p;
        case DihedralTag::Rot90: return rot90cw(p);
        case DihedralTag::Rot180: return rot180(p);
        case DihedralTag::Rot270: return rot270cw(p);
        case DihedralTag::HFlip: return hflip(p);
        case DihedralTag::VFlip: return vflip(p);
        case DihedralTag::HFlipRot90: return Plane(hflip(rot90cw(p)));
        case DihedralTag::HFlipRot270: return Plane(hflip(rot270cw(p)));
    }
    return p;
}

ImageU8 apply_dihedral(const ImageU8& img, DihedralTag t);

/// Box-filter ("area") resample to (out_w, out_h). Exact block mean for
/// integer downscale factors; fractional boxes get proportional edge weights.
PlaneF area_resize(const PlaneF& src, int out_w, int out_h);

// --- raster I/O (PNG via libpng, JPEG via libjpeg; dispatch on magic bytes) ---

ImageU8 load_image(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const ImageU8& img);

PlaneU8 load_gray(const std::filesystem::path& path);
void save_gray_png(const std::filesystem::path& path, const PlaneU8& gray);

} // namespace fruitform
