// volume.hpp - 3D scalar volumes with physical coordinates.
//
// Axis convention: grids are stored depth (slowest) / height / width (fastest). World
// coordinates are (x, y, z) in mm with x along width, y along height, z along depth, so
// world(i, j, k) = origin + (k * spacing.x, j * spacing.y, i * spacing.z).

#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "lmreg/common.hpp"

namespace lmreg {

// Continuous index (depth, height, width) into a grid.
using ContinuousIndex = std::array<double, 3>;

struct Grid3 {
    Dims3 dims{1, 1, 1};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{};

    std::int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    std::size_t linear(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return static_cast<std::size_t>((i * dims[1] + j) * dims[2] + k);
    }
    VoxelIndex unravel(std::size_t n) const;
    Vec3 world(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return {origin.x + static_cast<double>(k) * spacing.x, origin.y + static_cast<double>(j) * spacing.y,
                origin.z + static_cast<double>(i) * spacing.z};
    }
    Vec3 world(const VoxelIndex &v) const { return world(v.i, v.j, v.k); }
    ContinuousIndex continuous_index(const Vec3 &p) const;
    bool contains(const VoxelIndex &v) const {
        return v.i >= 0 && v.j >= 0 && v.k >= 0 && v.i < dims[0] && v.j < dims[1] && v.k < dims[2];
    }
    // Spacing along storage axis a (0 = depth/z, 1 = height/y, 2 = width/x).
    double axis_spacing(int a) const { return a == 0 ? spacing.z : (a == 1 ? spacing.y : spacing.x); }
    // Axis-aligned bounds of the voxel-center hull.
    Vec3 lower_center() const { return origin; }
    Vec3 upper_center() const { return world(dims[0] - 1, dims[1] - 1, dims[2] - 1); }

    // Throws DataError on non-positive dims or spacing.
    void validate() const;

    friend bool operator==(const Grid3 &, const Grid3 &) = default;
};

class Volume3 {
  public:
    Volume3() = default;
    explicit Volume3(const Grid3 &grid, double fill = 0.0);
    Volume3(const Grid3 &grid, std::vector<double> data);

    const Grid3 &grid() const { return grid_; }
    const Dims3 &dims() const { return grid_.dims; }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }

    double at(std::int64_t i, std::int64_t j, std::int64_t k) const { return data_[grid_.linear(i, j, k)]; }
    double &at(std::int64_t i, std::int64_t j, std::int64_t k) { return data_[grid_.linear(i, j, k)]; }
    double at(const VoxelIndex &v) const { return at(v.i, v.j, v.k); }

    friend bool operator==(const Volume3 &, const Volume3 &) = default;

  private:
    Grid3 grid_;
    std::vector<double> data_ = std::vector<double>(1, 0.0);
};

// On-disk element types supported by the MetaImage reader and writer.
enum class ElementType { Short, Float };

Volume3 load_volume(const std::filesystem::path &header_path);
void save_volume(const std::filesystem::path &header_path, const Volume3 &vol,
                 ElementType type = ElementType::Float);

Volume3 resample_to_spacing(const Volume3 &vol, const Vec3 &target_spacing);

Volume3 window_and_normalize(const Volume3 &vol, double lo = -100.0, double hi = 300.0);

// Trilinear interpolation in world coordinates with clamp-to-edge outside the grid.
double trilinear_sample(const Volume3 &vol, const Vec3 &p);

struct SampleWithGradient {
    double value = 0.0;
    Vec3 gradient; // d value / d world position (mm^-1), exact derivative of the interpolant
};
SampleWithGradient trilinear_sample_gradient(const Volume3 &vol, const Vec3 &p);

// True when p lies within the voxel-center hull (where no clamping happens).
bool inside_center_hull(const Grid3 &grid, const Vec3 &p);

Volume3 crop_patch(const Volume3 &vol, const VoxelIndex &start, const Dims3 &patch_dims);

// Zero-pads (or edge-replicates) at the high end of each axis up to new_dims.
Volume3 pad_to(const Volume3 &vol, const Dims3 &new_dims, double fill = 0.0);

// Separable Gaussian smoothing; sigma in mm per world axis. Kernels are truncated at 3 sigma
// and renormalized over in-bounds taps, so constants are preserved at the borders.
Volume3 gaussian_smooth(const Volume3 &vol, const Vec3 &sigma_mm);

// Separable 1D Gaussian filter over a strided line set; shared with the DVF smoother.
void gaussian_filter_axis(std::span<double> values, const Dims3 &dims, int axis, double sigma_voxels);

} // namespace lmreg
