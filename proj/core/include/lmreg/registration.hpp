// registration.hpp - affine pre-alignment and multi-resolution cubic B-spline registration.
//
// Transforms map target coordinates into source coordinates: a registered pair satisfies
// source(T(x)) ~ target(x), and a target landmark t corresponds to the source point T(t).
// The deformable objective is w_mi * (-MI) + w_bending * BE + w_points * CP, minimized by plain
// gradient descent with gain a / (A + k)^alpha on fresh random samples every iteration.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lmreg/common.hpp"
#include "lmreg/correspondence.hpp"
#include "lmreg/deform_sim.hpp"
#include "lmreg/gradcheck.hpp"
#include "lmreg/rng.hpp"
#include "lmreg/volume.hpp"

namespace lmreg::reg {

// Uniform cubic B-spline basis at fractional offset u in [0, 1]; entry n weights control point
// floor(t) - 1 + n. The four weights sum to 1.
std::array<double, 4> cubic_weights(double u);
std::array<double, 4> cubic_first_derivative(double u);
std::array<double, 4> cubic_second_derivative(double u);

// Separable 4x4x4 support of one evaluation point; axis order x, y, z.
struct BSplineStencil {
    std::array<std::int64_t, 3> first{}; // lattice index of the first of four control points
    std::array<std::array<double, 4>, 3> w{};
    std::array<std::array<double, 4>, 3> dw{};  // d/dx in world units (mm^-1)
    std::array<std::array<double, 4>, 3> d2w{}; // d2/dx2 in world units (mm^-2)
};

class BSplineTransform {
  public:
    BSplineTransform() = default;
    // Zero displacement lattice with the given spacing whose support covers the voxel-center hull
    // of `grid`, plus two control points beyond it on every side.
    static BSplineTransform covering(const Grid3 &grid, const Vec3 &spacing_mm);

    const std::array<std::int64_t, 3> &size() const { return size_; } // control points along x, y, z
    const Vec3 &spacing() const { return spacing_; }
    const Vec3 &origin() const { return origin_; }
    Vec3 control_point(std::int64_t cx, std::int64_t cy, std::int64_t cz) const;

    std::size_t control_count() const { return coefficients_.size(); }
    std::size_t parameter_count() const { return 3 * coefficients_.size(); }
    std::size_t control_index(std::int64_t cx, std::int64_t cy, std::int64_t cz) const {
        return static_cast<std::size_t>((cz * size_[1] + cy) * size_[0] + cx);
    }

    std::span<const Vec3> coefficients() const { return coefficients_; }
    std::span<Vec3> coefficients() { return coefficients_; }
    // Parameter vector: control index major, then component x, y, z.
    std::vector<double> parameters() const;
    void set_parameters(std::span<const double> params);

    bool supports(const Vec3 &p) const;
    // Throws DataError outside the support.
    BSplineStencil stencil(const Vec3 &p) const;

    Vec3 displacement(const Vec3 &p) const;
    Vec3 apply(const Vec3 &p) const { return p + displacement(p); }
    // Jacobian of the displacement, row r = component, column c = d/dx_c.
    Mat3 displacement_jacobian(const Vec3 &p) const;

    // Exact refinement to half the spacing on the lattice that covering(grid, spacing / 2) builds.
    BSplineTransform refined(const Grid3 &grid) const;

  private:
    std::array<std::int64_t, 3> size_{};
    Vec3 spacing_{1.0, 1.0, 1.0};
    Vec3 origin_{};
    std::vector<Vec3> coefficients_;
};

DenseDVF render_dense_dvf(const BSplineTransform &transform, const Grid3 &grid);
std::vector<WorldPoint> transform_points(const BSplineTransform &transform, std::span<const WorldPoint> points);

// ---- metrics ----------------------------------------------------------------------------------

struct MetricResult {
    double value = 0.0;
    std::vector<double> gradient; // empty when not requested
    std::size_t used = 0;         // samples or pairs that contributed
};

struct IntensityRange {
    double lo = 0.0;
    double hi = 1.0;
};

// Nearest-rank percentiles of the voxel values.
IntensityRange robust_range(const Volume3 &vol, double lo_percent = 0.1, double hi_percent = 99.9);

// Negative Mattes mutual information from a Parzen joint histogram: zero-order window on the
// target intensity, cubic B-spline window on the source intensity. Holds copies of both images.
class MattesMutualInformation {
  public:
    MattesMutualInformation(Volume3 target, Volume3 source, int bins = 32);

    struct Evaluation {
        double value = 0.0;
        std::vector<Vec3> force;          // d value / d mapped point, per sample (zero when unused)
        std::vector<std::uint8_t> used;   // sample mapped inside the source
        std::size_t count = 0;
    };
    // samples: target-space points; mapped: their images in source space.
    Evaluation evaluate(std::span<const Vec3> samples, std::span<const Vec3> mapped, bool with_gradient) const;

    const Volume3 &target() const { return target_; }
    const Volume3 &source() const { return source_; }
    int bins() const { return bins_; }

  private:
    Volume3 target_;
    Volume3 source_;
    int bins_;
    IntensityRange target_range_;
    IntensityRange source_range_;
};

MetricResult mattes_mi(const MattesMutualInformation &metric, const BSplineTransform &transform,
                       std::span<const Vec3> samples, bool with_gradient = true);

// Mean over the samples of the squared second derivatives of the displacement: for each of the
// three components, the three pure and three mixed derivatives, each counted once.
MetricResult bending_energy(const BSplineTransform &transform, std::span<const Vec3> samples,
                            bool with_gradient = true);

// Mean over pairs of |T(target) - source|. Throws DataError when a target point is unsupported.
MetricResult corresponding_points_metric(const BSplineTransform &transform, const CorrespondenceSet &pairs,
                                         bool with_gradient = true);

// Uniform random world points inside the voxel-center hull of `grid`.
std::vector<Vec3> random_coordinates(SeededRng &rng, const Grid3 &grid, std::size_t count);

// ---- pyramid ----------------------------------------------------------------------------------

// Level 0 is the coarsest. Level l is smoothed with sigma = factor / 2 voxels and decimated by
// factor = 2^(levels - 1 - l), keeping the decimated lattice centered in the original extent.
std::vector<Volume3> image_pyramid(const Volume3 &vol, int levels);

// ---- affine stage -----------------------------------------------------------------------------

struct AffineConfig {
    int resolutions = 4;
    int iterations = 1024; // per resolution
    int spatial_samples = 4096;
    int histogram_bins = 32;
    // Normalized-gradient steps of step_mm / (1 + k / step_decay)^alpha, in mm of displacement at
    // the sampled radius, restarted every level.
    double step_mm = 1.0;
    double step_decay = 50.0;
    double alpha = 0.602;
    std::uint64_t seed = 0;

    void validate() const;
};

// Linear part acts about the target grid center; translation initialized by aligning origins.
AffineTransform3 affine_register(const Volume3 &target, const Volume3 &source, const AffineConfig &cfg);

// source resampled onto the target grid through `affine`: out(x) = source(A(x)).
Volume3 resample_affine(const Volume3 &source, const AffineTransform3 &affine, const Grid3 &target_grid);

// ---- deformable stage -------------------------------------------------------------------------

struct RegistrationConfig {
    double weight_mi = 1.0;
    double weight_bending = 1.0;
    double weight_points = 0.01;
    int resolutions = 4;
    std::vector<int> iterations{300, 600, 900, 1200};
    int spatial_samples = 5000;
    int histogram_bins = 32;
    double final_grid_spacing_mm = 8.0;
    std::vector<double> sp_a{35000.0, 30000.0, 25000.0, 20000.0};
    std::vector<double> sp_A{100.0, 200.0, 300.0, 400.0};
    double sp_alpha = 0.602;
    std::uint64_t seed = 0;

    void validate() const;
    double gain(int level, int iteration) const;
};

struct TraceEntry {
    int level = 0;
    int iteration = 0;
    double objective = 0.0;
    double mi = 0.0;
    double bending = 0.0;
    double points = 0.0;
};

struct RegistrationResult {
    BSplineTransform transform;
    DenseDVF dense_dvf; // T(x) - x on the target grid
    std::vector<TraceEntry> trace;
    std::size_t dropped_guidance = 0; // summed over levels
    double elapsed_seconds = 0.0;
};

// Volumes must share a grid. Guidance may be empty; pairs whose target point lies outside the
// level's sampling domain are dropped for that level.
RegistrationResult register_deformable(const Volume3 &target, const Volume3 &source, const CorrespondenceSet &guidance,
                                       const RegistrationConfig &cfg);

// Finite-difference checks of the three metric terms on a seeded synthetic pair with frozen samples.
std::vector<GradCheckResult> metric_gradcheck_suite(std::uint64_t seed);

} // namespace lmreg::reg
