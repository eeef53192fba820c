// evaluation.hpp - matching and registration error statistics, Jacobian summaries, and slice
// overlays.
//
// Percentiles use the nearest-rank definition: the p-th percentile of n sorted values is the
// value at rank ceil(p / 100 * n), clamped to [1, n].

#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lmreg/correspondence.hpp"
#include "lmreg/deform_sim.hpp"
#include "lmreg/registration.hpp"
#include "lmreg/volume.hpp"

namespace lmreg::eval {

struct ErrorReport {
    std::vector<double> errors; // mm, in input order
    double mean = 0.0;
    double std = 0.0; // population standard deviation
    double percentile_5 = 0.0;
    double percentile_95 = 0.0;
    std::size_t count = 0;
    std::size_t dropped = 0; // inputs that could not be evaluated
};

double nearest_rank_percentile(std::span<const double> values, double percent);

// Statistics of `errors`; an empty list gives count 0 and zero statistics.
ErrorReport summarize_errors(std::vector<double> errors, std::size_t dropped = 0);

// Per pair, the distance between the source point predicted by the matcher and the true
// correspondent of its target point (the target point pulled through the inverse of the known
// field). Pairs whose inversion does not converge are dropped and counted.
ErrorReport spatial_matching_error(const CorrespondenceSet &pairs, const DenseDVF &dvf);

struct CdfRow {
    double edge = 0.0;
    std::size_t count = 0; // errors <= edge
    double fraction = 0.0;
};

// Fraction of errors at or below each edge. Edges must be strictly increasing.
std::vector<CdfRow> cumulative_error_distribution(std::span<const double> errors, std::span<const double> edges);

using PointMap = std::function<Vec3(const Vec3 &)>;

// Per point |map(target) - source|.
ErrorReport tre(std::span<const WorldPoint> target, std::span<const WorldPoint> source, const PointMap &map);
ErrorReport tre(const CorrespondenceSet &pairs, const PointMap &map);

PointMap identity_map();
PointMap affine_map(const AffineTransform3 &affine);
// Throws DataError for points outside the lattice support.
PointMap bspline_map(const reg::BSplineTransform &transform);
// x + D(x) with zero displacement outside the field's grid.
PointMap dvf_map(const DenseDVF &dvf);

struct DeformationHistogram {
    std::vector<double> edges;       // bins [edges[b], edges[b + 1]); the last bin also takes larger values
    std::vector<std::size_t> all;
    std::vector<std::size_t> accurate; // matching error < threshold
    double threshold_mm = 4.0;
};

// Bins every pair by |D| at its predicted source point; pairs whose matching error cannot be
// computed are left out of both histograms.
DeformationHistogram landmark_deformation_histogram(const CorrespondenceSet &pairs, const DenseDVF &dvf,
                                                    std::span<const double> edges, double threshold_mm = 4.0);

// 0, 2, ..., 24 mm.
std::vector<double> default_deformation_edges();

struct JacobianReport {
    double min_determinant = 0.0;
    double max_determinant = 0.0;
    double min_interior = 0.0; // over voxels at least one voxel away from every face
    double fraction_nonpositive = 0.0;
    std::size_t voxels = 0;
    std::vector<double> edges; // histogram edges; values outside go to the end bins
    std::vector<std::size_t> counts;
};

JacobianReport jacobian_report(const DenseDVF &dvf);

// ---- overlays ---------------------------------------------------------------------------------

struct RgbImage {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::vector<std::uint8_t> rgb; // row-major, 3 bytes per pixel
};

// Target in red, warped source in green and blue; intensities clamped to [0, 1] and scaled to
// 0..255, so aligned structures render grey. axis selects the slicing storage axis
// (0 depth, 1 height, 2 width).
RgbImage overlay_slice(const Volume3 &target, const Volume3 &warped_source, int axis, std::int64_t index);

// Writes one binary PPM per slice as <out_dir>/overlay_a<axis>_<index>.ppm and returns the paths.
std::vector<std::filesystem::path> overlay_slices(const Volume3 &target, const Volume3 &warped_source, int axis,
                                                  std::span<const std::int64_t> slice_indices,
                                                  const std::filesystem::path &out_dir);

void write_ppm(const std::filesystem::path &path, const RgbImage &img);
RgbImage read_ppm(const std::filesystem::path &path);

// ---- CSV --------------------------------------------------------------------------------------

// "index,error_mm"
std::string errors_csv(const ErrorReport &report);
// "edge_mm,count,fraction"
std::string cdf_csv(std::span<const CdfRow> rows);
// "bin_lo_mm,bin_hi_mm,all,accurate"
std::string deformation_histogram_csv(const DeformationHistogram &hist);
// "bin_lo,bin_hi,count"
std::string jacobian_histogram_csv(const JacobianReport &report);

void write_text(const std::filesystem::path &path, const std::string &text);

} // namespace lmreg::eval
