#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include "lmreg/evaluation.hpp"

namespace lmreg::eval {

double nearest_rank_percentile(std::span<const double> values, double percent) {
    if (values.empty()) throw DataError("percentile of an empty list");
    if (!(percent >= 0.0 && percent <= 100.0)) throw ConfigError("percentile must lie in [0, 100]");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    // The small offset keeps exact products such as 0.95 * 20 from rounding up a rank.
    const auto rank = static_cast<std::size_t>(std::ceil(percent / 100.0 * static_cast<double>(v.size()) - 1e-9));
    return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

ErrorReport summarize_errors(std::vector<double> errors, std::size_t dropped) {
    ErrorReport r;
    r.errors = std::move(errors);
    r.count = r.errors.size();
    r.dropped = dropped;
    if (r.count == 0) return r;
    const double n = static_cast<double>(r.count);
    r.mean = std::accumulate(r.errors.begin(), r.errors.end(), 0.0) / n;
    double ss = 0.0;
    for (double e : r.errors) ss += (e - r.mean) * (e - r.mean);
    r.std = std::sqrt(ss / n);
    r.percentile_5 = nearest_rank_percentile(r.errors, 5.0);
    r.percentile_95 = nearest_rank_percentile(r.errors, 95.0);
    return r;
}

namespace {

// Distance from the predicted source point to the true correspondent, or nothing if the inverse
// does not converge.
std::optional<double> matching_error(const Correspondence &c, const DenseDVF &dvf) {
    try {
        return (invert_dvf_at(dvf, c.target) - c.source).norm();
    } catch (const NumericError &) {
        return std::nullopt;
    }
}

} // namespace

ErrorReport spatial_matching_error(const CorrespondenceSet &pairs, const DenseDVF &dvf) {
    std::vector<double> errors;
    std::size_t dropped = 0;
    for (const auto &c : pairs.pairs) {
        if (const auto e = matching_error(c, dvf)) {
            errors.push_back(*e);
        } else {
            ++dropped;
        }
    }
    return summarize_errors(std::move(errors), dropped);
}

std::vector<CdfRow> cumulative_error_distribution(std::span<const double> errors, std::span<const double> edges) {
    if (errors.empty()) throw DataError("cumulative error distribution of an empty list");
    if (edges.empty()) throw ConfigError("cumulative error distribution needs at least one edge");
    for (std::size_t b = 1; b < edges.size(); ++b)
        if (!(edges[b] > edges[b - 1])) throw ConfigError("cumulative error distribution edges must increase");
    std::vector<double> sorted(errors.begin(), errors.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<CdfRow> rows;
    rows.reserve(edges.size());
    for (double edge : edges) {
        const auto count = static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), edge) - sorted.begin());
        rows.push_back({edge, count, static_cast<double>(count) / static_cast<double>(sorted.size())});
    }
    return rows;
}

ErrorReport tre(std::span<const WorldPoint> target, std::span<const WorldPoint> source, const PointMap &map) {
    if (target.size() != source.size())
        throw ConfigError("tre: " + std::to_string(target.size()) + " target points but " +
                          std::to_string(source.size()) + " source points");
    std::vector<double> errors;
    errors.reserve(target.size());
    for (std::size_t n = 0; n < target.size(); ++n) errors.push_back((map(target[n]) - source[n]).norm());
    return summarize_errors(std::move(errors));
}

ErrorReport tre(const CorrespondenceSet &pairs, const PointMap &map) {
    std::vector<WorldPoint> t, s;
    for (const auto &c : pairs.pairs) {
        t.push_back(c.target);
        s.push_back(c.source);
    }
    return tre(t, s, map);
}

PointMap identity_map() {
    return [](const Vec3 &p) { return p; };
}

PointMap affine_map(const AffineTransform3 &affine) {
    return [affine](const Vec3 &p) { return affine.apply(p); };
}

PointMap bspline_map(const reg::BSplineTransform &transform) {
    return [transform](const Vec3 &p) { return transform.apply(p); };
}

PointMap dvf_map(const DenseDVF &dvf) {
    return [dvf](const Vec3 &p) { return p + dvf.sample(p); };
}

DeformationHistogram landmark_deformation_histogram(const CorrespondenceSet &pairs, const DenseDVF &dvf,
                                                    std::span<const double> edges, double threshold_mm) {
    if (edges.size() < 2) throw ConfigError("deformation histogram needs at least two edges");
    for (std::size_t b = 1; b < edges.size(); ++b)
        if (!(edges[b] > edges[b - 1])) throw ConfigError("deformation histogram edges must increase");
    DeformationHistogram h;
    h.edges.assign(edges.begin(), edges.end());
    h.all.assign(edges.size() - 1, 0);
    h.accurate.assign(edges.size() - 1, 0);
    h.threshold_mm = threshold_mm;
    for (const auto &c : pairs.pairs) {
        const auto err = matching_error(c, dvf);
        if (!err) continue;
        const double mag = dvf.sample(c.source).norm();
        const auto it = std::upper_bound(h.edges.begin(), h.edges.end(), mag);
        const auto bin = static_cast<std::size_t>(
            std::clamp<std::ptrdiff_t>(it - h.edges.begin() - 1, 0, static_cast<std::ptrdiff_t>(h.all.size()) - 1));
        ++h.all[bin];
        if (*err < threshold_mm) ++h.accurate[bin];
    }
    return h;
}

std::vector<double> default_deformation_edges() {
    std::vector<double> e;
    for (int mm = 0; mm <= 24; mm += 2) e.push_back(mm);
    return e;
}

JacobianReport jacobian_report(const DenseDVF &dvf) {
    const auto det = jacobian_determinant(dvf);
    const auto &g = det.grid();
    JacobianReport r;
    for (int b = 0; b <= 20; ++b) r.edges.push_back(0.1 * b);
    r.counts.assign(r.edges.size() - 1, 0);
    r.voxels = det.data().size();
    r.min_determinant = *std::min_element(det.data().begin(), det.data().end());
    r.max_determinant = *std::max_element(det.data().begin(), det.data().end());
    r.min_interior = r.min_determinant;
    bool have_interior = false;
    std::size_t nonpositive = 0;
    for (std::int64_t i = 0; i < g.dims[0]; ++i)
        for (std::int64_t j = 0; j < g.dims[1]; ++j)
            for (std::int64_t k = 0; k < g.dims[2]; ++k) {
                const double v = det.at(i, j, k);
                if (v <= 0.0) ++nonpositive;
                const auto it = std::upper_bound(r.edges.begin(), r.edges.end(), v);
                const auto bin = std::clamp<std::ptrdiff_t>(it - r.edges.begin() - 1, 0,
                                                            static_cast<std::ptrdiff_t>(r.counts.size()) - 1);
                ++r.counts[static_cast<std::size_t>(bin)];
                const bool interior = i > 0 && j > 0 && k > 0 && i + 1 < g.dims[0] && j + 1 < g.dims[1] && k + 1 < g.dims[2];
                if (interior) {
                    r.min_interior = have_interior ? std::min(r.min_interior, v) : v;
                    have_interior = true;
                }
            }
    r.fraction_nonpositive = static_cast<double>(nonpositive) / static_cast<double>(r.voxels);
    return r;
}

// ---- overlays ---------------------------------------------------------------------------------

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

} // namespace

RgbImage overlay_slice(const Volume3 &target, const Volume3 &warped_source, int axis, std::int64_t index) {
    if (!(target.grid() == warped_source.grid())) throw DataError("overlay: images must share a grid");
    if (axis < 0 || axis > 2) throw ConfigError("overlay: axis must be 0, 1 or 2");
    const auto &d = target.dims();
    if (index < 0 || index >= d[static_cast<std::size_t>(axis)])
        throw ConfigError("overlay: slice " + std::to_string(index) + " outside [0, " +
                          std::to_string(d[static_cast<std::size_t>(axis)]) + ")");
    // The two remaining storage axes become rows and columns, slower axis first.
    const int row_axis = axis == 0 ? 1 : 0;
    const int col_axis = axis == 2 ? 1 : 2;
    RgbImage img;
    img.height = d[static_cast<std::size_t>(row_axis)];
    img.width = d[static_cast<std::size_t>(col_axis)];
    img.rgb.reserve(static_cast<std::size_t>(3 * img.width * img.height));
    for (std::int64_t r = 0; r < img.height; ++r)
        for (std::int64_t c = 0; c < img.width; ++c) {
            std::array<std::int64_t, 3> idx{};
            idx[static_cast<std::size_t>(axis)] = index;
            idx[static_cast<std::size_t>(row_axis)] = r;
            idx[static_cast<std::size_t>(col_axis)] = c;
            const auto t = to_byte(target.at(idx[0], idx[1], idx[2]));
            const auto s = to_byte(warped_source.at(idx[0], idx[1], idx[2]));
            img.rgb.insert(img.rgb.end(), {t, s, s});
        }
    return img;
}

std::vector<std::filesystem::path> overlay_slices(const Volume3 &target, const Volume3 &warped_source, int axis,
                                                  std::span<const std::int64_t> slice_indices,
                                                  const std::filesystem::path &out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> paths;
    for (const auto index : slice_indices) {
        const auto img = overlay_slice(target, warped_source, axis, index);
        auto path = out_dir / ("overlay_a" + std::to_string(axis) + "_" + std::to_string(index) + ".ppm");
        write_ppm(path, img);
        paths.push_back(std::move(path));
    }
    return paths;
}

void write_ppm(const std::filesystem::path &path, const RgbImage &img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char *>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!out) throw DataError("failed writing " + path.string());
}

RgbImage read_ppm(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::string magic;
    int maxval = 0;
    RgbImage img;
    in >> magic >> img.width >> img.height >> maxval;
    if (magic != "P6" || maxval != 255 || img.width <= 0 || img.height <= 0) throw DataError("unsupported PPM " + path.string());
    in.get();
    img.rgb.resize(static_cast<std::size_t>(3 * img.width * img.height));
    in.read(reinterpret_cast<char *>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!in) throw DataError("truncated PPM " + path.string());
    return img;
}

// ---- CSV --------------------------------------------------------------------------------------

namespace {

std::ostringstream csv_stream() {
    std::ostringstream os;
    os.precision(17);
    return os;
}

} // namespace

std::string errors_csv(const ErrorReport &report) {
    auto os = csv_stream();
    os << "index,error_mm\n";
    for (std::size_t n = 0; n < report.errors.size(); ++n) os << n << ',' << report.errors[n] << '\n';
    return os.str();
}

std::string cdf_csv(std::span<const CdfRow> rows) {
    auto os = csv_stream();
    os << "edge_mm,count,fraction\n";
    for (const auto &r : rows) os << r.edge << ',' << r.count << ',' << r.fraction << '\n';
    return os.str();
}

std::string deformation_histogram_csv(const DeformationHistogram &hist) {
    auto os = csv_stream();
    os << "bin_lo_mm,bin_hi_mm,all,accurate\n";
    for (std::size_t b = 0; b < hist.all.size(); ++b)
        os << hist.edges[b] << ',' << hist.edges[b + 1] << ',' << hist.all[b] << ',' << hist.accurate[b] << '\n';
    return os.str();
}

std::string jacobian_histogram_csv(const JacobianReport &report) {
    auto os = csv_stream();
    os << "bin_lo,bin_hi,count\n";
    for (std::size_t b = 0; b < report.counts.size(); ++b)
        os << report.edges[b] << ',' << report.edges[b + 1] << ',' << report.counts[b] << '\n';
    return os.str();
}

void write_text(const std::filesystem::path &path, const std::string &text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("failed writing " + path.string());
}

} // namespace lmreg::eval
