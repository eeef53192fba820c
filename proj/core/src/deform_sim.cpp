#include "lmreg/deform_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

#include "lmreg/metaimage.hpp"

namespace lmreg {

namespace {

void check_range(const Range &r, const char *name, bool non_negative) {
    if (!(r.lo <= r.hi)) throw ConfigError(std::string("deformation range ") + name + " has low > high");
    if (non_negative && r.lo < 0.0) throw ConfigError(std::string("deformation range ") + name + " must be non-negative");
}

Mat3 rotation_x(double rad) {
    const double c = std::cos(rad), s = std::sin(rad);
    return Mat3{{1, 0, 0, 0, c, -s, 0, s, c}};
}
Mat3 rotation_y(double rad) {
    const double c = std::cos(rad), s = std::sin(rad);
    return Mat3{{c, 0, s, 0, 1, 0, -s, 0, c}};
}
Mat3 rotation_z(double rad) {
    const double c = std::cos(rad), s = std::sin(rad);
    return Mat3{{c, -s, 0, s, c, 0, 0, 0, 1}};
}

void require_same_grid(const Grid3 &a, const Grid3 &b, const char *what) {
    if (!(a == b)) throw DataError(std::string(what) + ": grids differ");
}

} // namespace

void DeformationConfig::validate() const {
    check_range(translation_mm, "translation", false);
    check_range(rotation_deg, "rotation", false);
    check_range(scale, "scale", true);
    if (scale.lo <= 0.0) throw ConfigError("scale range must be positive");
    check_range(bump_magnitude_mm, "bump magnitude", true);
    check_range(bump_sigma_mm, "bump sigma", true);
    if (bump_sigma_mm.lo <= 0.0) throw ConfigError("bump sigma must be positive");
    check_range(small_dvf_max_mm, "small dvf amplitude", true);
    if (small_dvf_smoothing_sigma_mm < 0.0) throw ConfigError("small dvf smoothing sigma must be non-negative");
}

DenseDVF::DenseDVF(const Grid3 &grid) : grid_(grid) {
    grid_.validate();
    data_.assign(static_cast<std::size_t>(grid_.voxel_count()), Vec3{});
}

DenseDVF::DenseDVF(const Grid3 &grid, std::vector<Vec3> data) : grid_(grid), data_(std::move(data)) {
    grid_.validate();
    if (data_.size() != static_cast<std::size_t>(grid_.voxel_count())) throw DataError("DVF data length mismatch");
}

Vec3 DenseDVF::sample(const Vec3 &p) const {
    const auto c = grid_.continuous_index(p);
    std::array<std::int64_t, 3> lo{};
    std::array<double, 3> f{};
    for (std::size_t a = 0; a < 3; ++a) {
        const double fl = std::floor(c[a]);
        lo[a] = static_cast<std::int64_t>(fl);
        f[a] = c[a] - fl;
    }
    Vec3 out{};
    for (int di = 0; di < 2; ++di) {
        const double wi = di ? f[0] : 1.0 - f[0];
        if (wi == 0.0) continue;
        const auto i = lo[0] + di;
        if (i < 0 || i >= grid_.dims[0]) continue;
        for (int dj = 0; dj < 2; ++dj) {
            const double wj = dj ? f[1] : 1.0 - f[1];
            if (wj == 0.0) continue;
            const auto j = lo[1] + dj;
            if (j < 0 || j >= grid_.dims[1]) continue;
            for (int dk = 0; dk < 2; ++dk) {
                const double wk = dk ? f[2] : 1.0 - f[2];
                if (wk == 0.0) continue;
                const auto k = lo[2] + dk;
                if (k < 0 || k >= grid_.dims[2]) continue;
                out += at(i, j, k) * (wi * wj * wk);
            }
        }
    }
    return out;
}

DenseDVF load_dvf(const std::filesystem::path &header_path) {
    const auto img = read_metaimage(header_path);
    if (img.channels != 3) throw MetaImageFormatError("DVF file must have 3 channels: " + header_path.string());
    std::vector<Vec3> data(static_cast<std::size_t>(img.grid.voxel_count()));
    for (std::size_t n = 0; n < data.size(); ++n) data[n] = {img.values[3 * n], img.values[3 * n + 1], img.values[3 * n + 2]};
    return DenseDVF(img.grid, std::move(data));
}

void save_dvf(const std::filesystem::path &header_path, const DenseDVF &dvf) {
    MetaImage img;
    img.grid = dvf.grid();
    img.channels = 3;
    img.type = ElementType::Float;
    img.values.reserve(dvf.data().size() * 3);
    for (const auto &v : dvf.data()) {
        img.values.push_back(v.x);
        img.values.push_back(v.y);
        img.values.push_back(v.z);
    }
    write_metaimage(header_path, img);
}

Vec3 grid_center(const Grid3 &grid) { return (grid.lower_center() + grid.upper_center()) * 0.5; }

AffineTransform3 make_affine(const Vec3 &translation_mm, const Vec3 &rotation_deg, double scale, const Vec3 &center) {
    constexpr double deg = std::numbers::pi / 180.0;
    const Mat3 rot = rotation_x(rotation_deg.x * deg) * rotation_y(rotation_deg.y * deg) * rotation_z(rotation_deg.z * deg);
    AffineTransform3 t;
    t.linear = scale * rot;
    t.translation = center - t.linear * center + translation_mm;
    return t;
}

AffineTransform3 sample_affine(SeededRng &rng, const DeformationConfig &cfg, const Vec3 &center) {
    Vec3 tr, rot;
    for (std::size_t a = 0; a < 3; ++a) tr[a] = rng.uniform(cfg.translation_mm.lo, cfg.translation_mm.hi);
    for (std::size_t a = 0; a < 3; ++a) rot[a] = rng.uniform(cfg.rotation_deg.lo, cfg.rotation_deg.hi);
    const double s = rng.uniform(cfg.scale.lo, cfg.scale.hi);
    return make_affine(tr, rot, s, center);
}

DenseDVF affine_to_dvf(const AffineTransform3 &affine, const Grid3 &grid) {
    DenseDVF d(grid);
    for (std::int64_t i = 0; i < grid.dims[0]; ++i)
        for (std::int64_t j = 0; j < grid.dims[1]; ++j)
            for (std::int64_t k = 0; k < grid.dims[2]; ++k) {
                const auto x = grid.world(i, j, k);
                d.at(i, j, k) = affine.apply(x) - x;
            }
    return d;
}

Vec3 GaussianBump::displacement(const Vec3 &x) const {
    const Vec3 r = x - center;
    return direction * (magnitude_mm * std::exp(-r.dot(r) / (2.0 * sigma_mm * sigma_mm)));
}

GaussianBump sample_gaussian_bump(SeededRng &rng, const DeformationConfig &cfg, const Grid3 &grid) {
    GaussianBump b;
    const auto lo = grid.lower_center();
    const auto hi = grid.upper_center();
    for (std::size_t a = 0; a < 3; ++a) b.center[a] = rng.uniform(lo[a], hi[a]);
    // Uniform direction on the sphere from normalized Gaussian draws.
    Vec3 u;
    double n = 0.0;
    do {
        u = {rng.normal(), rng.normal(), rng.normal()};
        n = u.norm();
    } while (n < 1e-12);
    b.direction = u * (1.0 / n);
    b.magnitude_mm = rng.uniform(cfg.bump_magnitude_mm.lo, cfg.bump_magnitude_mm.hi);
    b.sigma_mm = rng.uniform(cfg.bump_sigma_mm.lo, cfg.bump_sigma_mm.hi);
    return b;
}

DenseDVF render_bump(const GaussianBump &bump, const Grid3 &grid) {
    DenseDVF d(grid);
    for (std::int64_t i = 0; i < grid.dims[0]; ++i)
        for (std::int64_t j = 0; j < grid.dims[1]; ++j)
            for (std::int64_t k = 0; k < grid.dims[2]; ++k) d.at(i, j, k) = bump.displacement(grid.world(i, j, k));
    return d;
}

DenseDVF gaussian_bump_dvf(SeededRng &rng, const DeformationConfig &cfg, const Grid3 &grid) {
    return render_bump(sample_gaussian_bump(rng, cfg, grid), grid);
}

DenseDVF smoothed_random_dvf(SeededRng &rng, const DeformationConfig &cfg, const Grid3 &grid) {
    const double amplitude = rng.uniform(cfg.small_dvf_max_mm.lo, cfg.small_dvf_max_mm.hi);
    const auto n = static_cast<std::size_t>(grid.voxel_count());
    std::array<std::vector<double>, 3> comp;
    for (auto &c : comp) c.resize(n);
    for (std::size_t v = 0; v < n; ++v)
        for (auto &c : comp) c[v] = rng.uniform(-amplitude, amplitude);

    const double sigma = cfg.small_dvf_smoothing_sigma_mm;
    for (auto &c : comp) {
        gaussian_filter_axis(c, grid.dims, 0, sigma / grid.spacing.z);
        gaussian_filter_axis(c, grid.dims, 1, sigma / grid.spacing.y);
        gaussian_filter_axis(c, grid.dims, 2, sigma / grid.spacing.x);
    }
    DenseDVF d(grid);
    for (std::size_t v = 0; v < n; ++v) d.data()[v] = {comp[0][v], comp[1][v], comp[2][v]};
    return d;
}

DenseDVF simulate_elastic_dvf(SeededRng &rng, const DeformationConfig &cfg, const Grid3 &grid) {
    auto large = gaussian_bump_dvf(rng, cfg, grid);
    auto small = smoothed_random_dvf(rng, cfg, grid);
    return compose_additive(large, small);
}

DenseDVF sample_training_dvf(SeededRng &rng, const DeformationConfig &cfg, const Grid3 &grid, TransformKind *kind_out) {
    const auto kind = static_cast<TransformKind>(rng.uniform_index(4));
    if (kind_out) *kind_out = kind;
    const Vec3 c = grid_center(grid);
    switch (kind) {
    case TransformKind::Translation: {
        Vec3 t;
        for (std::size_t a = 0; a < 3; ++a) t[a] = rng.uniform(cfg.translation_mm.lo, cfg.translation_mm.hi);
        return affine_to_dvf(make_affine(t, {}, 1.0, c), grid);
    }
    case TransformKind::Rotation: {
        Vec3 r;
        for (std::size_t a = 0; a < 3; ++a) r[a] = rng.uniform(cfg.rotation_deg.lo, cfg.rotation_deg.hi);
        return affine_to_dvf(make_affine({}, r, 1.0, c), grid);
    }
    case TransformKind::Scale:
        return affine_to_dvf(make_affine({}, {}, rng.uniform(cfg.scale.lo, cfg.scale.hi), c), grid);
    case TransformKind::Elastic:
        break;
    }
    return simulate_elastic_dvf(rng, cfg, grid);
}

DenseDVF compose_additive(const DenseDVF &a, const DenseDVF &b) {
    require_same_grid(a.grid(), b.grid(), "compose_additive");
    DenseDVF out = a;
    for (std::size_t n = 0; n < out.data().size(); ++n) out.data()[n] += b.data()[n];
    return out;
}

Volume3 warp_volume(const Volume3 &vol, const DenseDVF &dvf) {
    const auto &g = dvf.grid();
    Volume3 out(g);
    for (std::int64_t i = 0; i < g.dims[0]; ++i)
        for (std::int64_t j = 0; j < g.dims[1]; ++j)
            for (std::int64_t k = 0; k < g.dims[2]; ++k) {
                out.at(i, j, k) = trilinear_sample(vol, g.world(i, j, k) + dvf.at(i, j, k));
            }
    return out;
}

WorldPoint invert_dvf_at(const DenseDVF &dvf, const WorldPoint &p, double tol, int max_iter) {
    WorldPoint q = p;
    double residual = (q + dvf.sample(q) - p).norm();
    for (int it = 0; it < max_iter && !(residual < tol); ++it) {
        q = p - dvf.sample(q);
        residual = (q + dvf.sample(q) - p).norm();
    }
    if (!(residual < tol)) {
        std::ostringstream os;
        os << "DVF inversion did not converge in " << max_iter << " iterations (residual " << residual << " mm)";
        throw NumericError(os.str());
    }
    return q;
}

std::vector<WorldPoint> ground_truth_correspondence(std::span<const WorldPoint> points_target, const DenseDVF &dvf,
                                                    double tol, int max_iter) {
    std::vector<WorldPoint> out;
    out.reserve(points_target.size());
    for (const auto &p : points_target) out.push_back(invert_dvf_at(dvf, p, tol, max_iter));
    return out;
}

Volume3 jacobian_determinant(const DenseDVF &dvf) {
    const auto &g = dvf.grid();
    Volume3 out(g);
    // Derivative along storage axis a at index t, central inside and one-sided at the ends.
    auto diff = [&](std::int64_t i, std::int64_t j, std::int64_t k, int a) -> Vec3 {
        std::array<std::int64_t, 3> lo{i, j, k}, hi{i, j, k};
        const auto n = g.dims[static_cast<std::size_t>(a)];
        if (n < 2) return {};
        auto &l = lo[static_cast<std::size_t>(a)];
        auto &h = hi[static_cast<std::size_t>(a)];
        if (l > 0) --l;
        if (h < n - 1) ++h;
        const double span = static_cast<double>(h - l) * g.axis_spacing(a);
        return (dvf.at(hi[0], hi[1], hi[2]) - dvf.at(lo[0], lo[1], lo[2])) * (1.0 / span);
    };
    for (std::int64_t i = 0; i < g.dims[0]; ++i)
        for (std::int64_t j = 0; j < g.dims[1]; ++j)
            for (std::int64_t k = 0; k < g.dims[2]; ++k) {
                const Vec3 dx = diff(i, j, k, 2), dy = diff(i, j, k, 1), dz = diff(i, j, k, 0);
                Mat3 J{{1.0 + dx.x, dy.x, dz.x, dx.y, 1.0 + dy.y, dz.y, dx.z, dy.z, 1.0 + dz.z}};
                out.at(i, j, k) = J.determinant();
            }
    return out;
}

Volume3 add_noise(const Volume3 &vol, SeededRng &rng, double sigma) {
    if (!(sigma >= 0.0)) throw ConfigError("add_noise: sigma must be >= 0");
    Volume3 out = vol;
    for (auto &v : out.data()) v += sigma * rng.normal();
    return out;
}

Volume3 make_phantom(SeededRng &rng, const Grid3 &grid) {
    const auto n = static_cast<std::size_t>(grid.voxel_count());
    // Smooth textured background.
    std::vector<double> texture(n);
    for (auto &t : texture) t = rng.uniform(-1.0, 1.0);
    gaussian_filter_axis(texture, grid.dims, 0, 1.5);
    gaussian_filter_axis(texture, grid.dims, 1, 1.5);
    gaussian_filter_axis(texture, grid.dims, 2, 1.5);
    double tmax = 1e-12;
    for (double t : texture) tmax = std::max(tmax, std::abs(t));

    Volume3 vol(grid);
    const double base = rng.uniform(0.1, 0.25);
    for (std::size_t v = 0; v < n; ++v) vol.data()[v] = base + 0.08 * texture[v] / tmax;

    const auto lo = grid.lower_center();
    const auto hi = grid.upper_center();
    const double mean_spacing = (grid.spacing.x + grid.spacing.y + grid.spacing.z) / 3.0;
    Vec3 extent = hi - lo;
    const double min_extent = std::max(mean_spacing, std::min({extent.x, extent.y, extent.z}));

    struct Ellipsoid {
        Vec3 center;
        Mat3 inv_axes; // maps world offset to normalized ellipsoid coordinates
        double min_axis;
        double intensity;
    };
    std::vector<Ellipsoid> shapes;
    const auto n_large = 6 + rng.uniform_index(5);
    const auto n_small = 10 + rng.uniform_index(8);
    for (std::uint64_t s = 0; s < n_large + n_small; ++s) {
        const bool small = s >= n_large;
        Ellipsoid e;
        for (std::size_t a = 0; a < 3; ++a) e.center[a] = rng.uniform(lo[a], hi[a]);
        Vec3 axes;
        for (std::size_t a = 0; a < 3; ++a) {
            axes[a] = small ? rng.uniform(1.2, 2.5) * mean_spacing : rng.uniform(0.08, 0.25) * min_extent;
        }
        const auto rot = make_affine({}, {rng.uniform(-90, 90), rng.uniform(-90, 90), rng.uniform(-90, 90)}, 1.0, {}).linear;
        // inv_axes = diag(1/axes) * rot^T
        Mat3 rt = Mat3::zero();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) rt(r, c) = rot(c, r) / axes[static_cast<std::size_t>(r)];
        e.inv_axes = rt;
        e.min_axis = std::min({axes.x, axes.y, axes.z});
        e.intensity = small ? rng.uniform(0.75, 1.0) : rng.uniform(0.3, 0.9);
        shapes.push_back(e);
    }

    for (std::int64_t i = 0; i < grid.dims[0]; ++i)
        for (std::int64_t j = 0; j < grid.dims[1]; ++j)
            for (std::int64_t k = 0; k < grid.dims[2]; ++k) {
                const auto x = grid.world(i, j, k);
                double v = vol.at(i, j, k);
                for (const auto &e : shapes) {
                    const double s = (e.inv_axes * (x - e.center)).norm();
                    // Linear edge ramp about one voxel wide.
                    const double w = std::clamp(0.5 + (1.0 - s) * e.min_axis / mean_spacing, 0.0, 1.0);
                    if (w > 0.0) v = v * (1.0 - w) + (e.intensity + 0.05 * texture[grid.linear(i, j, k)] / tmax) * w;
                }
                vol.at(i, j, k) = std::clamp(v, 0.0, 1.0);
            }
    return vol;
}

std::vector<WorldPoint> random_points(SeededRng &rng, const Grid3 &grid, std::size_t count, double margin_mm) {
    const auto lo = grid.lower_center() + Vec3{margin_mm, margin_mm, margin_mm};
    const auto hi = grid.upper_center() - Vec3{margin_mm, margin_mm, margin_mm};
    for (std::size_t a = 0; a < 3; ++a) {
        if (lo[a] > hi[a]) throw ConfigError("random point margin exceeds grid extent");
    }
    std::vector<WorldPoint> pts(count);
    for (auto &p : pts)
        for (std::size_t a = 0; a < 3; ++a) p[a] = rng.uniform(lo[a], hi[a]);
    return pts;
}

void PairSimulationConfig::validate() const {
    Grid3{dims, spacing, {}}.validate();
    DeformationConfig d;
    d.bump_magnitude_mm = bump_magnitude_mm;
    d.bump_sigma_mm = bump_sigma_mm;
    d.validate();
    if (!(noise_sigma >= 0.0)) throw ConfigError("pair simulation: noise sigma must be non-negative");
    if (guidance_points < 0 || evaluation_points < 0) throw ConfigError("pair simulation: point counts must be >= 0");
    if (!(min_displacement_mm >= 0.0) || !(margin_mm >= 0.0))
        throw ConfigError("pair simulation: displacement threshold and margin must be non-negative");
}

SimulatedPair simulate_pair(std::uint64_t seed, const PairSimulationConfig &cfg) {
    cfg.validate();
    SeededRng rng(seed);
    const Grid3 grid{cfg.dims, cfg.spacing, {}};
    const auto phantom = make_phantom(rng, grid);
    DeformationConfig dc;
    dc.bump_magnitude_mm = cfg.bump_magnitude_mm;
    dc.bump_sigma_mm = cfg.bump_sigma_mm;
    SimulatedPair out;
    out.dvf = gaussian_bump_dvf(rng, dc, grid);
    out.target = add_noise(phantom, rng, cfg.noise_sigma);
    out.source = add_noise(warp_volume(phantom, out.dvf), rng, cfg.noise_sigma);

    // Alternate between the two sets so neither is biased towards one part of the bump.
    const auto want_g = static_cast<std::size_t>(cfg.guidance_points);
    const auto want_e = static_cast<std::size_t>(cfg.evaluation_points);
    std::vector<WorldPoint> guidance, evaluation;
    const std::size_t max_draws = 1000 * (want_g + want_e) + 1000;
    for (std::size_t draw = 0; guidance.size() < want_g || evaluation.size() < want_e; ++draw) {
        if (draw == max_draws)
            throw DataError("pair simulation: too few points with displacement >= " +
                            std::to_string(cfg.min_displacement_mm) + " mm");
        const auto p = random_points(rng, grid, 1, cfg.margin_mm).front();
        if (out.dvf.sample(p).norm() < cfg.min_displacement_mm) continue;
        const bool to_eval = evaluation.size() < want_e && (evaluation.size() <= guidance.size() || guidance.size() == want_g);
        (to_eval ? evaluation : guidance).push_back(p);
    }
    auto pack = [&](const std::vector<WorldPoint> &pts) {
        CorrespondenceSet set;
        const auto src = ground_truth_correspondence(pts, out.dvf);
        for (std::size_t n = 0; n < pts.size(); ++n) set.pairs.push_back({pts[n], src[n], 1.0});
        return set;
    };
    out.guidance = pack(guidance);
    out.evaluation = pack(evaluation);
    return out;
}

} // namespace lmreg
