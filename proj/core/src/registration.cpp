#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "lmreg/log.hpp"
#include "lmreg/registration.hpp"

namespace lmreg::reg {

std::vector<Volume3> image_pyramid(const Volume3 &vol, int levels) {
    if (levels < 1) throw ConfigError("image_pyramid: need at least one level");
    const Grid3 &g = vol.grid();
    std::vector<Volume3> out;
    for (int l = 0; l < levels; ++l) {
        const std::int64_t factor = std::int64_t{1} << (levels - 1 - l);
        if (factor == 1) {
            out.push_back(vol);
            continue;
        }
        const double f = static_cast<double>(factor);
        const auto smooth = gaussian_smooth(vol, g.spacing * (0.5 * f));
        Grid3 coarse = g;
        for (std::size_t a = 0; a < 3; ++a) {
            const std::int64_t d = g.dims[a];
            coarse.dims[a] = (d - 1) / factor + 1;
        }
        // Center the decimated lattice: shift by half the leftover extent per axis.
        auto offset = [&](std::size_t a) {
            return 0.5 * static_cast<double>((g.dims[a] - 1) - (coarse.dims[a] - 1) * factor);
        };
        coarse.origin = {g.origin.x + offset(2) * g.spacing.x, g.origin.y + offset(1) * g.spacing.y,
                         g.origin.z + offset(0) * g.spacing.z};
        coarse.spacing = g.spacing * f;
        Volume3 level(coarse);
        for (std::int64_t i = 0; i < coarse.dims[0]; ++i)
            for (std::int64_t j = 0; j < coarse.dims[1]; ++j)
                for (std::int64_t k = 0; k < coarse.dims[2]; ++k)
                    level.at(i, j, k) = trilinear_sample(smooth, coarse.world(i, j, k));
        out.push_back(std::move(level));
    }
    return out;
}

// ---- affine -----------------------------------------------------------------------------------

void AffineConfig::validate() const {
    if (resolutions < 1 || iterations < 0 || spatial_samples < 1 || histogram_bins < 6)
        throw ConfigError("affine: resolutions, samples and bins must be positive");
    if (!(step_mm > 0.0) || !(step_decay > 0.0) || !(alpha >= 0.0)) throw ConfigError("affine: bad step schedule");
}

Volume3 resample_affine(const Volume3 &source, const AffineTransform3 &affine, const Grid3 &target_grid) {
    Volume3 out(target_grid);
    for (std::int64_t i = 0; i < target_grid.dims[0]; ++i)
        for (std::int64_t j = 0; j < target_grid.dims[1]; ++j)
            for (std::int64_t k = 0; k < target_grid.dims[2]; ++k)
                out.at(i, j, k) = trilinear_sample(source, affine.apply(target_grid.world(i, j, k)));
    return out;
}

AffineTransform3 affine_register(const Volume3 &target, const Volume3 &source, const AffineConfig &cfg) {
    cfg.validate();
    const auto tp = image_pyramid(target, cfg.resolutions);
    const auto sp = image_pyramid(source, cfg.resolutions);
    const Vec3 center = grid_center(target.grid());
    const Vec3 half_extent = (target.grid().upper_center() - target.grid().lower_center()) * 0.5;
    // Radius used to put matrix entries and translations on a common mm scale.
    const double radius = std::max(half_extent.norm() / std::sqrt(3.0), 1e-6);

    // T(x) = M (x - c) + c + t, origins aligned at the start.
    Mat3 m = Mat3::identity();
    Vec3 t = source.grid().origin - target.grid().origin;
    SeededRng root(cfg.seed);
    for (int level = 0; level < cfg.resolutions; ++level) {
        const MattesMutualInformation metric(tp[static_cast<std::size_t>(level)], sp[static_cast<std::size_t>(level)],
                                             cfg.histogram_bins);
        SeededRng rng = root.fork(static_cast<std::uint64_t>(level));
        std::vector<Vec3> mapped(static_cast<std::size_t>(cfg.spatial_samples));
        for (int k = 0; k < cfg.iterations; ++k) {
            const auto samples = random_coordinates(rng, metric.target().grid(), mapped.size());
            for (std::size_t n = 0; n < samples.size(); ++n) mapped[n] = m * (samples[n] - center) + center + t;
            const auto ev = metric.evaluate(samples, mapped, true);
            Vec3 gt{};
            Mat3 gm = Mat3::zero();
            for (std::size_t n = 0; n < samples.size(); ++n) {
                const Vec3 &f = ev.force[n];
                const Vec3 r = samples[n] - center;
                gt += f;
                for (int row = 0; row < 3; ++row)
                    for (int col = 0; col < 3; ++col)
                        gm(row, col) += f[static_cast<std::size_t>(row)] * r[static_cast<std::size_t>(col)];
            }
            double norm2 = gt.dot(gt);
            for (double v : gm.m) norm2 += v * v / (radius * radius);
            const double norm = std::sqrt(norm2);
            if (!std::isfinite(norm)) throw NumericError("affine_register: non-finite metric gradient");
            if (norm == 0.0) continue;
            const double step = cfg.step_mm / std::pow(1.0 + k / cfg.step_decay, cfg.alpha) / norm;
            t -= gt * step;
            for (std::size_t e = 0; e < 9; ++e) m.m[e] -= gm.m[e] * step / (radius * radius);
        }
        log_info("affine level " + std::to_string(level) + " done");
    }
    AffineTransform3 out;
    out.linear = m;
    out.translation = center + t - m * center;
    return out;
}

// ---- deformable -------------------------------------------------------------------------------

void RegistrationConfig::validate() const {
    if (!(weight_mi >= 0.0 && weight_bending >= 0.0 && weight_points >= 0.0))
        throw ConfigError("registration: metric weights must be >= 0");
    if (resolutions < 1) throw ConfigError("registration: resolutions must be positive");
    const auto r = static_cast<std::size_t>(resolutions);
    if (iterations.size() != r || sp_a.size() != r || sp_A.size() != r)
        throw ConfigError("registration: per-level lists must have one entry per resolution");
    for (int it : iterations)
        if (it < 1) throw ConfigError("registration: iterations must be positive");
    if (spatial_samples < 1 || histogram_bins < 6) throw ConfigError("registration: samples and bins must be positive");
    if (!(final_grid_spacing_mm > 0.0)) throw ConfigError("registration: grid spacing must be positive");
    for (std::size_t l = 0; l < r; ++l)
        if (!(sp_a[l] >= 0.0) || !(sp_A[l] > 0.0)) throw ConfigError("registration: need a >= 0 and A > 0");
    if (!(sp_alpha >= 0.0)) throw ConfigError("registration: alpha must be >= 0");
}

double RegistrationConfig::gain(int level, int iteration) const {
    const auto l = static_cast<std::size_t>(level);
    return sp_a[l] / std::pow(sp_A[l] + static_cast<double>(iteration), sp_alpha);
}

RegistrationResult register_deformable(const Volume3 &target, const Volume3 &source, const CorrespondenceSet &guidance,
                                       const RegistrationConfig &cfg) {
    cfg.validate();
    if (!(target.grid() == source.grid())) throw DataError("register_deformable: volumes must share one grid");
    const auto start = std::chrono::steady_clock::now();
    const auto tp = image_pyramid(target, cfg.resolutions);
    const auto sp = image_pyramid(source, cfg.resolutions);

    RegistrationResult result;
    const double coarse = cfg.final_grid_spacing_mm * static_cast<double>(std::int64_t{1} << (cfg.resolutions - 1));
    BSplineTransform transform = BSplineTransform::covering(target.grid(), {coarse, coarse, coarse});
    SeededRng root(cfg.seed);
    for (int level = 0; level < cfg.resolutions; ++level) {
        if (level > 0) transform = transform.refined(target.grid());
        const auto &tl = tp[static_cast<std::size_t>(level)];
        const MattesMutualInformation metric(tl, sp[static_cast<std::size_t>(level)], cfg.histogram_bins);

        CorrespondenceSet points;
        for (const auto &c : guidance.pairs) {
            if (inside_center_hull(tl.grid(), c.target) && transform.supports(c.target)) points.pairs.push_back(c);
        }
        const std::size_t dropped = guidance.size() - points.size();
        if (dropped > 0)
            log_warning("registration level " + std::to_string(level) + ": dropped " + std::to_string(dropped) +
                        " guidance pairs outside the sampling domain");
        result.dropped_guidance += dropped;

        SeededRng rng = root.fork(static_cast<std::uint64_t>(level));
        auto params = transform.parameters();
        const int iterations = cfg.iterations[static_cast<std::size_t>(level)];
        for (int k = 0; k < iterations; ++k) {
            const auto samples = random_coordinates(rng, tl.grid(), static_cast<std::size_t>(cfg.spatial_samples));
            const auto mi = mattes_mi(metric, transform, samples, cfg.weight_mi > 0.0);
            const auto be = bending_energy(transform, samples, cfg.weight_bending > 0.0);
            const auto cp = corresponding_points_metric(transform, points, cfg.weight_points > 0.0);
            TraceEntry e{level, k, 0.0, mi.value, be.value, cp.value};
            e.objective = cfg.weight_mi * e.mi + cfg.weight_bending * e.bending + cfg.weight_points * e.points;
            if (!std::isfinite(e.objective)) throw NumericError("register_deformable: non-finite objective");
            result.trace.push_back(e);

            const double gain = cfg.gain(level, k);
            auto descend = [&](const MetricResult &r, double weight) {
                if (weight == 0.0 || r.gradient.empty()) return;
                for (std::size_t n = 0; n < params.size(); ++n) params[n] -= gain * weight * r.gradient[n];
            };
            descend(mi, cfg.weight_mi);
            descend(be, cfg.weight_bending);
            descend(cp, cfg.weight_points);
            transform.set_parameters(params);
        }
        log_info("registration level " + std::to_string(level) + " final objective " +
                 std::to_string(result.trace.empty() ? 0.0 : result.trace.back().objective));
    }
    result.dense_dvf = render_dense_dvf(transform, target.grid());
    result.transform = std::move(transform);
    result.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

// ---- gradient checks --------------------------------------------------------------------------

namespace {

// Up to `count` seeded coordinates among those with a nonzero analytic gradient.
std::vector<std::size_t> pick_coordinates(SeededRng &rng, const std::vector<double> &gradient, std::size_t count) {
    std::vector<std::size_t> live;
    for (std::size_t n = 0; n < gradient.size(); ++n)
        if (gradient[n] != 0.0) live.push_back(n);
    for (std::size_t n = 0; n < live.size() && n < count; ++n) {
        const auto r = n + static_cast<std::size_t>(rng.uniform_index(live.size() - n));
        std::swap(live[n], live[r]);
    }
    live.resize(std::min(live.size(), count));
    return live;
}

} // namespace

std::vector<GradCheckResult> metric_gradcheck_suite(std::uint64_t seed) {
    SeededRng rng(seed);
    const Grid3 grid{{20, 20, 20}, {3.0, 3.0, 3.0}, {-30.0, -30.0, -30.0}};
    const auto target = gaussian_smooth(make_phantom(rng, grid), {3.0, 3.0, 3.0});
    DeformationConfig dc;
    dc.bump_magnitude_mm = {4.0, 6.0};
    dc.bump_sigma_mm = {12.0, 18.0};
    const auto source = warp_volume(target, gaussian_bump_dvf(rng, dc, grid));

    auto transform = BSplineTransform::covering(grid, {12.0, 12.0, 12.0});
    auto params = transform.parameters();
    for (auto &p : params) p = rng.uniform(-1.5, 1.5);
    transform.set_parameters(params);
    const auto samples = random_coordinates(rng, grid, 3000);

    CorrespondenceSet pairs;
    for (const auto &p : random_points(rng, grid, 10, 6.0))
        pairs.pairs.push_back({p, p + Vec3{rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-4, 4)}, 1.0});

    auto with_params = [&](std::span<const double> x) {
        auto t = transform;
        t.set_parameters(x);
        return t;
    };
    std::vector<GradCheckResult> out;
    const MattesMutualInformation mi(target, source, 32);
    {
        const auto r = mattes_mi(mi, transform, samples);
        const auto coords = pick_coordinates(rng, r.gradient, 24);
        out.push_back(check_function_gradient(
            "mattes_mi", [&](std::span<const double> x) { return mattes_mi(mi, with_params(x), samples, false).value; },
            params, r.gradient, coords, 1e-5, 1e-3));
    }
    {
        const auto r = bending_energy(transform, samples);
        const auto coords = pick_coordinates(rng, r.gradient, 24);
        out.push_back(check_function_gradient(
            "bending_energy",
            [&](std::span<const double> x) { return bending_energy(with_params(x), samples, false).value; }, params,
            r.gradient, coords, 1e-4, 1e-4));
    }
    {
        const auto r = corresponding_points_metric(transform, pairs);
        const auto coords = pick_coordinates(rng, r.gradient, 10);
        out.push_back(check_function_gradient(
            "corresponding_points",
            [&](std::span<const double> x) { return corresponding_points_metric(with_params(x), pairs, false).value; },
            params, r.gradient, coords, 1e-3, 1e-6));
    }
    return out;
}

} // namespace lmreg::reg
