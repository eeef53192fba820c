// deform_sim.hpp - random affine and elastic deformations, warping, DVF inversion, and
// ground-truth correspondences.
//
// Convention (used everywhere in lmreg): a displacement field D pulls values back,
//     warped(x) = original(x + D(x)),
// with x a world point on the warped image's grid. A point p in the original image therefore
// corresponds to the point q in the warped image with q + D(q) = p.

#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "lmreg/common.hpp"
#include "lmreg/correspondence.hpp"
#include "lmreg/rng.hpp"
#include "lmreg/volume.hpp"

namespace lmreg {

struct AffineTransform3 {
    Mat3 linear = Mat3::identity();
    Vec3 translation{};

    Vec3 apply(const Vec3 &p) const { return linear * p + translation; }
    static AffineTransform3 identity() { return {}; }
    AffineTransform3 inverse() const {
        const Mat3 inv = linear.inverse();
        return {inv, -(inv * translation)};
    }
};

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

struct DeformationConfig {
    Range translation_mm{-12.0, 12.0};
    Range rotation_deg{-20.0, 20.0};
    Range scale{0.9, 1.1};
    Range bump_magnitude_mm{2.0, 24.0};
    Range bump_sigma_mm{64.0, 128.0};
    Range small_dvf_max_mm{1.0, 12.0};
    double small_dvf_smoothing_sigma_mm = 8.0;

    // Throws ConfigError when a range is inverted or a magnitude is negative.
    void validate() const;
};

class DenseDVF {
  public:
    DenseDVF() = default;
    explicit DenseDVF(const Grid3 &grid);
    DenseDVF(const Grid3 &grid, std::vector<Vec3> data);

    const Grid3 &grid() const { return grid_; }
    std::span<const Vec3> data() const { return data_; }
    std::span<Vec3> data() { return data_; }
    const Vec3 &at(std::int64_t i, std::int64_t j, std::int64_t k) const { return data_[grid_.linear(i, j, k)]; }
    Vec3 &at(std::int64_t i, std::int64_t j, std::int64_t k) { return data_[grid_.linear(i, j, k)]; }

    // Trilinear interpolation; neighbours outside the grid count as zero displacement.
    Vec3 sample(const Vec3 &p) const;

    friend bool operator==(const DenseDVF &, const DenseDVF &) = default;

  private:
    Grid3 grid_;
    std::vector<Vec3> data_ = std::vector<Vec3>(1);
};

DenseDVF load_dvf(const std::filesystem::path &header_path);
void save_dvf(const std::filesystem::path &header_path, const DenseDVF &dvf);

// Center of the voxel-center hull; rotations and scalings are applied about this point.
Vec3 grid_center(const Grid3 &grid);

// translation ~ U per axis, rotation ~ U per axis composed X then Y then Z about `center`,
// isotropic scale ~ U.
AffineTransform3 sample_affine(SeededRng &rng, const DeformationConfig &cfg, const Vec3 &center = {});
AffineTransform3 make_affine(const Vec3 &translation_mm, const Vec3 &rotation_deg, double scale, const Vec3 &center);

// D(x) = A(x) - x on the grid.
DenseDVF affine_to_dvf(const AffineTransform3 &affine, const Grid3 &grid);

struct GaussianBump {
    Vec3 center;
    Vec3 direction; // unit
    double magnitude_mm = 0.0;
    double sigma_mm = 0.0;

    Vec3 displacement(const Vec3 &x) const;
};
GaussianBump sample_gaussian_bump(SeededRng &rng, const DeformationConfig &cfg, const Grid3 &grid);
DenseDVF render_bump(const GaussianBump &bump, const Grid3 &grid);
DenseDVF gaussian_bump_dvf(SeededRng &rng, const DeformationConfig &cfg, const Grid3 &grid);

DenseDVF smoothed_random_dvf(SeededRng &rng, const DeformationConfig &cfg, const Grid3 &grid);

// Large bump plus small smoothed noise, added together.
DenseDVF simulate_elastic_dvf(SeededRng &rng, const DeformationConfig &cfg, const Grid3 &grid);

enum class TransformKind { Translation, Rotation, Scale, Elastic };

// Draws one of the four transform kinds uniformly and renders it as a DVF on `grid`.
DenseDVF sample_training_dvf(SeededRng &rng, const DeformationConfig &cfg, const Grid3 &grid,
                             TransformKind *kind_out = nullptr);

DenseDVF compose_additive(const DenseDVF &a, const DenseDVF &b);

// out(x) = trilinear_sample(vol, x + D(x)) on D's grid.
Volume3 warp_volume(const Volume3 &vol, const DenseDVF &dvf);

// Solves q + D(q) = p by fixed-point iteration q <- p - D(q) from q0 = p.
// Throws NumericError (with the final residual) when max_iter is exhausted.
WorldPoint invert_dvf_at(const DenseDVF &dvf, const WorldPoint &p, double tol = 1e-4, int max_iter = 200);

std::vector<WorldPoint> ground_truth_correspondence(std::span<const WorldPoint> points_target, const DenseDVF &dvf,
                                                    double tol = 1e-4, int max_iter = 200);

// Per-voxel det(I + grad D), central differences (one-sided at borders), world units.
Volume3 jacobian_determinant(const DenseDVF &dvf);

// Synthetic phantom: overlapping ellipsoids with distinct intensities on a smooth textured
// background, values in [0, 1].
Volume3 make_phantom(SeededRng &rng, const Grid3 &grid);

// Independent zero-mean Gaussian noise per voxel, standing in for scanner noise. Values are not
// clipped.
Volume3 add_noise(const Volume3 &vol, SeededRng &rng, double sigma);

// Uniformly random world points inside the voxel-center hull, at least `margin_mm` from its faces.
std::vector<WorldPoint> random_points(SeededRng &rng, const Grid3 &grid, std::size_t count, double margin_mm = 0.0);

// ---- registration test pairs --------------------------------------------------------------------

struct PairSimulationConfig {
    Dims3 dims{64, 64, 64};
    Vec3 spacing{2.0, 2.0, 2.0};
    Range bump_magnitude_mm{2.0, 12.0};
    Range bump_sigma_mm{16.0, 32.0};
    double noise_sigma = 0.03;
    int guidance_points = 50;
    int evaluation_points = 50;
    // Landmarks are drawn only where the simulated displacement is at least this large, so that
    // they measure the deformation rather than the undeformed background.
    double min_displacement_mm = 1.0;
    double margin_mm = 8.0;

    void validate() const;
};

struct SimulatedPair {
    Volume3 target;
    Volume3 source; // noisy warp of the noise-free target phantom through `dvf`
    DenseDVF dvf;
    CorrespondenceSet guidance;   // exact correspondences, usable as registration guidance
    CorrespondenceSet evaluation; // disjoint exact correspondences for TRE
};

// Phantom, Gaussian bump DVF and independent noise per image, all from one seed.
SimulatedPair simulate_pair(std::uint64_t seed, const PairSimulationConfig &cfg);

} // namespace lmreg
