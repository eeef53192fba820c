// B-spline transform, registration metrics, pyramid, affine and deformable registration.

#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"

#include "lmreg/registration.hpp"

using namespace lmreg;
using namespace lmreg::reg;

namespace {

const Grid3 kSmallGrid{{20, 20, 20}, {3.0, 3.0, 3.0}, {-30.0, -30.0, -30.0}};

BSplineTransform random_lattice(SeededRng &rng, const Grid3 &grid, double spacing, double amplitude) {
    auto t = BSplineTransform::covering(grid, {spacing, spacing, spacing});
    auto p = t.parameters();
    for (auto &v : p) v = rng.uniform(-amplitude, amplitude);
    t.set_parameters(p);
    return t;
}

// Direct summation over every control point with the textbook piecewise basis.
double cubic_basis(double t) {
    const double a = std::abs(t);
    if (a < 1.0) return (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0;
    if (a < 2.0) return (2.0 - a) * (2.0 - a) * (2.0 - a) / 6.0;
    return 0.0;
}

Vec3 full_sum_oracle(const BSplineTransform &t, const Vec3 &p) {
    Vec3 out{};
    const auto &n = t.size();
    for (std::int64_t cz = 0; cz < n[2]; ++cz)
        for (std::int64_t cy = 0; cy < n[1]; ++cy)
            for (std::int64_t cx = 0; cx < n[0]; ++cx) {
                const Vec3 c = t.control_point(cx, cy, cz);
                const double w = cubic_basis((p.x - c.x) / t.spacing().x) * cubic_basis((p.y - c.y) / t.spacing().y) *
                                 cubic_basis((p.z - c.z) / t.spacing().z);
                out += t.coefficients()[t.control_index(cx, cy, cz)] * w;
            }
    return out;
}

Volume3 noisy_phantom(std::uint64_t seed, const Grid3 &grid, double noise = 0.03) {
    SeededRng rng(seed);
    const auto clean = make_phantom(rng, grid);
    return add_noise(clean, rng, noise);
}

// Independent scalar estimate of Mattes MI with the same windows and bin layout.
double mi_oracle(const Volume3 &target, const Volume3 &source, std::span<const Vec3> samples, int bins) {
    const auto rt = robust_range(target), rs = robust_range(source);
    const double wt = (rt.hi - rt.lo) / (bins - 4), ws = (rs.hi - rs.lo) / (bins - 4);
    std::vector<std::vector<double>> p(static_cast<std::size_t>(bins), std::vector<double>(static_cast<std::size_t>(bins)));
    double n = 0;
    for (const auto &x : samples) {
        const double zt = std::clamp((trilinear_sample(target, x) - rt.lo) / wt + 2, 2.0, bins - 2 - 1e-9);
        const double zs = std::clamp((trilinear_sample(source, x) - rs.lo) / ws + 2, 2.0, bins - 2 - 1e-9);
        for (int m = 0; m < bins; ++m) p[static_cast<std::size_t>(std::floor(zt))][static_cast<std::size_t>(m)] += cubic_basis(m - zs);
        n += 1;
    }
    std::vector<double> pt(static_cast<std::size_t>(bins)), ps(static_cast<std::size_t>(bins));
    for (int l = 0; l < bins; ++l)
        for (int m = 0; m < bins; ++m) {
            auto &v = p[static_cast<std::size_t>(l)][static_cast<std::size_t>(m)];
            v /= n;
            pt[static_cast<std::size_t>(l)] += v;
            ps[static_cast<std::size_t>(m)] += v;
        }
    double mi = 0;
    for (int l = 0; l < bins; ++l)
        for (int m = 0; m < bins; ++m) {
            const double v = p[static_cast<std::size_t>(l)][static_cast<std::size_t>(m)];
            if (v > 0) mi += v * std::log(v / (pt[static_cast<std::size_t>(l)] * ps[static_cast<std::size_t>(m)]));
        }
    return mi;
}

std::vector<Vec3> voxel_centers(const Grid3 &g) {
    std::vector<Vec3> out;
    for (std::int64_t i = 0; i < g.dims[0]; ++i)
        for (std::int64_t j = 0; j < g.dims[1]; ++j)
            for (std::int64_t k = 0; k < g.dims[2]; ++k) out.push_back(g.world(i, j, k));
    return out;
}

RegistrationConfig quick_config() {
    RegistrationConfig cfg;
    cfg.iterations = {20, 20, 20, 20};
    cfg.spatial_samples = 1000;
    return cfg;
}

} // namespace

TEST_CASE("cubic basis partition of unity") {
    SeededRng rng(1);
    for (int n = 0; n < 1000; ++n) {
        const double u = rng.uniform();
        const auto w = cubic_weights(u);
        CHECK(std::abs(w[0] + w[1] + w[2] + w[3] - 1.0) < 1e-12);
        const auto d = cubic_first_derivative(u);
        CHECK(std::abs(d[0] + d[1] + d[2] + d[3]) < 1e-12);
        const auto d2 = cubic_second_derivative(u);
        CHECK(std::abs(d2[0] + d2[1] + d2[2] + d2[3]) < 1e-12);
    }
}

TEST_CASE("B-spline lattice layout and support") {
    const auto t = BSplineTransform::covering(kSmallGrid, {8.0, 8.0, 8.0});
    // extent 57 mm -> 8 intervals, plus two control points beyond the image on each side
    CHECK(t.size() == std::array<std::int64_t, 3>{13, 13, 13});
    for (std::size_t a = 0; a < 3; ++a) {
        CHECK(t.origin()[a] <= kSmallGrid.lower_center()[a] - 2 * 8.0 + 1e-12);
        CHECK(t.origin()[a] + (t.size()[a] - 1) * 8.0 >= kSmallGrid.upper_center()[a] + 2 * 8.0 - 1e-12);
    }
    CHECK(t.supports(kSmallGrid.lower_center()));
    CHECK(t.supports(kSmallGrid.upper_center()));
    CHECK(!t.supports(kSmallGrid.lower_center() - Vec3{20.0, 0.0, 0.0}));
    CHECK_THROWS_AS(t.displacement({500.0, 0.0, 0.0}), DataError);
    CHECK_THROWS_AS(BSplineTransform::covering(kSmallGrid, {0.0, 8.0, 8.0}), ConfigError);
}

TEST_CASE("bspline_evaluate") {
    SeededRng rng(2);
    auto t = BSplineTransform::covering(kSmallGrid, {9.0, 7.0, 8.0});
    const auto pts = random_points(rng, kSmallGrid, 50);
    SUBCASE("zero lattice is the identity") {
        for (const auto &p : pts) CHECK(t.apply(p) == p);
        const auto moved = transform_points(t, pts);
        CHECK(moved == pts);
        const auto rendered = render_dense_dvf(t, kSmallGrid);
        for (const auto &d : rendered.data()) CHECK(d == Vec3{});
    }
    SUBCASE("uniform lattice translates") {
        for (auto &c : t.coefficients()) c = {1.5, -2.0, 0.25};
        for (const auto &p : pts) CHECK((t.apply(p) - (p + Vec3{1.5, -2.0, 0.25})).norm() < 1e-12);
    }
    SUBCASE("random lattice matches the full summation oracle") {
        t = random_lattice(rng, kSmallGrid, 8.0, 3.0);
        for (const auto &p : pts) CHECK((t.displacement(p) - full_sum_oracle(t, p)).norm() < 1e-10);
    }
    SUBCASE("rendered field equals point queries exactly") {
        t = random_lattice(rng, kSmallGrid, 8.0, 3.0);
        const auto dvf = render_dense_dvf(t, kSmallGrid);
        for (std::int64_t i = 0; i < 20; i += 3)
            for (std::int64_t j = 0; j < 20; j += 5)
                for (std::int64_t k = 0; k < 20; ++k) CHECK(dvf.at(i, j, k) == t.displacement(kSmallGrid.world(i, j, k)));
    }
    SUBCASE("displacement jacobian matches finite differences") {
        t = random_lattice(rng, kSmallGrid, 8.0, 3.0);
        for (const auto &p : random_points(rng, kSmallGrid, 20, 3.0)) {
            const Mat3 j = t.displacement_jacobian(p);
            for (std::size_t c = 0; c < 3; ++c) {
                Vec3 h{};
                h[c] = 1e-5;
                const Vec3 fd = (t.displacement(p + h) - t.displacement(p - h)) * (1.0 / 2e-5);
                for (std::size_t r = 0; r < 3; ++r)
                    CHECK(j(static_cast<int>(r), static_cast<int>(c)) == doctest::Approx(fd[r]).epsilon(1e-6));
            }
        }
    }
    SUBCASE("parameter vector round trip") {
        t = random_lattice(rng, kSmallGrid, 8.0, 3.0);
        auto copy = BSplineTransform::covering(kSmallGrid, {8.0, 8.0, 8.0});
        copy.set_parameters(t.parameters());
        CHECK(copy.parameters() == t.parameters());
        CHECK_THROWS_AS(copy.set_parameters(std::vector<double>(5)), ConfigError);
    }
}

TEST_CASE("grid refinement is exact") {
    SeededRng rng(3);
    const Grid3 g{{24, 30, 18}, {2.0, 2.0, 2.5}, {4.0, -7.0, 1.0}};
    const auto coarse = random_lattice(rng, g, 16.0, 4.0);
    const auto fine = coarse.refined(g);
    CHECK(fine.spacing() == Vec3{8.0, 8.0, 8.0});
    for (const auto &p : random_points(rng, g, 200)) CHECK((fine.displacement(p) - coarse.displacement(p)).norm() < 1e-10);
    // Also just outside the image, where the fine support still reaches.
    CHECK((fine.displacement(g.lower_center() - Vec3{3, 3, 3}) - coarse.displacement(g.lower_center() - Vec3{3, 3, 3}))
              .norm() < 1e-10);
    const auto twice = fine.refined(g);
    for (const auto &p : random_points(rng, g, 50)) CHECK((twice.displacement(p) - coarse.displacement(p)).norm() < 1e-10);
}

TEST_CASE("robust range uses nearest-rank percentiles") {
    Volume3 v(Grid3{{1, 1, 1000}, {1, 1, 1}, {}});
    for (std::int64_t k = 0; k < 1000; ++k) v.at(0, 0, k) = static_cast<double>(999 - k);
    const auto r = robust_range(v);
    CHECK(r.lo == 0.0);   // rank ceil(1) = 1
    CHECK(r.hi == 998.0); // rank ceil(999) = 999
    const auto q = robust_range(v, 10.0, 50.0);
    CHECK(q.lo == 99.0);
    CHECK(q.hi == 499.0);
    CHECK_THROWS_AS(robust_range(v, 50.0, 10.0), ConfigError);
}

TEST_CASE("mattes mutual information") {
    const Grid3 g{{32, 32, 32}, {2, 2, 2}, {}};
    const auto target = noisy_phantom(11, g);
    SeededRng rng(5);
    const auto samples = random_coordinates(rng, g, 20000);

    SUBCASE("peak at alignment") {
        const MattesMutualInformation mi(target, target, 32);
        auto t = BSplineTransform::covering(g, {16, 16, 16});
        const double at_identity = mattes_mi(mi, t, samples, false).value;
        for (std::size_t a = 0; a < 3; ++a)
            for (double s : {-4.0, 4.0}) {
                Vec3 d{};
                d[a] = s;
                for (auto &c : t.coefficients()) c = d;
                CHECK(at_identity <= mattes_mi(mi, t, samples, false).value);
            }
    }
    SUBCASE("value matches an independent scalar estimate") {
        SeededRng other(8);
        const auto source = add_noise(target, other, 0.05);
        const MattesMutualInformation mi(target, source, 32);
        const auto t = BSplineTransform::covering(g, {16, 16, 16});
        CHECK(-mattes_mi(mi, t, samples, false).value == doctest::Approx(mi_oracle(target, source, samples, 32)).epsilon(1e-10));
    }
    SUBCASE("independent noise volumes carry almost no information") {
        const Grid3 big{{48, 48, 48}, {2, 2, 2}, {}};
        SeededRng noise(9);
        Volume3 a(big), b(big);
        for (auto &v : a.data()) v = noise.uniform();
        for (auto &v : b.data()) v = noise.uniform();
        const auto dense = voxel_centers(big);
        const MattesMutualInformation mi(a, b, 32);
        const double value = -mattes_mi(mi, BSplineTransform::covering(big, {16, 16, 16}), dense, false).value;
        CHECK(std::abs(value) < 0.05);
        CHECK(value == doctest::Approx(mi_oracle(a, b, dense, 32)).epsilon(1e-9));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(MattesMutualInformation(Volume3(g, 0.3), target, 32), DataError);
        const MattesMutualInformation mi(target, target, 32);
        const std::vector<Vec3> inside{g.world(3, 3, 3)};
        const std::vector<Vec3> outside{Vec3{500, 500, 500}};
        CHECK_THROWS_AS(mi.evaluate(inside, outside, true), DataError);
        CHECK_THROWS_AS(MattesMutualInformation(target, target, 4), ConfigError);
    }
}

TEST_CASE("bending energy") {
    SeededRng rng(6);
    const auto samples = random_coordinates(rng, kSmallGrid, 300);
    auto t = BSplineTransform::covering(kSmallGrid, {8, 8, 8});
    CHECK(bending_energy(t, samples).value == 0.0);

    SUBCASE("affine displacement is in the kernel") {
        const Mat3 a{{0.02, -0.05, 0.01, 0.03, 0.0, -0.04, 0.015, 0.02, -0.01}};
        for (std::int64_t cz = 0; cz < t.size()[2]; ++cz)
            for (std::int64_t cy = 0; cy < t.size()[1]; ++cy)
                for (std::int64_t cx = 0; cx < t.size()[0]; ++cx)
                    t.coefficients()[t.control_index(cx, cy, cz)] = a * t.control_point(cx, cy, cz) + Vec3{1, 2, 3};
        const auto r = bending_energy(t, samples);
        CHECK(r.value < 1e-20);
        for (double g : r.gradient) CHECK(std::abs(g) < 1e-12);
    }
    SUBCASE("random lattice matches a finite-difference oracle") {
        t = random_lattice(rng, kSmallGrid, 8.0, 2.0);
        const double h = 0.05;
        double oracle = 0;
        for (const auto &p : samples) {
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = i; j < 3; ++j) {
                    Vec3 ei{}, ej{};
                    ei[i] = h;
                    ej[j] = h;
                    Vec3 second;
                    if (i == j)
                        second = (t.displacement(p + ei) - t.displacement(p) * 2.0 + t.displacement(p - ei)) * (1 / (h * h));
                    else
                        second = (t.displacement(p + ei + ej) - t.displacement(p + ei - ej) - t.displacement(p - ei + ej) +
                                  t.displacement(p - ei - ej)) *
                                 (1 / (4 * h * h));
                    oracle += second.dot(second);
                }
        }
        oracle /= static_cast<double>(samples.size());
        CHECK(bending_energy(t, samples).value == doctest::Approx(oracle).epsilon(0.01));
    }
}

TEST_CASE("corresponding points metric") {
    auto t = BSplineTransform::covering(kSmallGrid, {8, 8, 8});
    CorrespondenceSet pairs;
    SeededRng rng(7);
    for (const auto &p : random_points(rng, kSmallGrid, 5, 4.0)) pairs.pairs.push_back({p, p + Vec3{6, 8, 0}, 1.0});
    CHECK(corresponding_points_metric(t, pairs).value == doctest::Approx(10.0).epsilon(1e-12));
    for (auto &c : t.coefficients()) c = {6, 8, 0};
    const auto exact = corresponding_points_metric(t, pairs);
    CHECK(exact.value < 1e-12);
    CHECK(corresponding_points_metric(t, CorrespondenceSet{}).used == 0);
    pairs.pairs.push_back({{900, 0, 0}, {0, 0, 0}, 1.0});
    CHECK_THROWS_AS(corresponding_points_metric(t, pairs), DataError);
}

TEST_CASE("metric gradients match finite differences") {
    for (const auto &r : metric_gradcheck_suite(3)) {
        INFO(r.name << " max relative error " << r.max_relative_error);
        CHECK(r.passed());
        CHECK(r.checked >= (r.name == "corresponding_points" ? 10u : 20u));
    }
}

TEST_CASE("image pyramid") {
    const Grid3 g{{33, 20, 17}, {2, 2, 3}, {1, 2, 3}};
    SeededRng rng(4);
    const auto vol = make_phantom(rng, g);
    const auto pyr = image_pyramid(vol, 4);
    REQUIRE(pyr.size() == 4);
    CHECK(pyr[3] == vol);
    CHECK(pyr[0].grid().dims == Dims3{5, 3, 3});
    CHECK(pyr[0].grid().spacing == Vec3{16, 16, 24});
    CHECK(pyr[1].grid().dims == Dims3{9, 5, 5});
    // decimated lattices stay centered in the original extent
    for (const auto &level : pyr)
        CHECK((grid_center(level.grid()) - grid_center(g)).norm() < 1e-9);
    const auto flat = image_pyramid(Volume3(g, 0.4), 3);
    for (const auto &level : flat)
        for (double v : level.data()) CHECK(v == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("registration config") {
    RegistrationConfig cfg;
    CHECK(cfg.weight_mi == 1.0);
    CHECK(cfg.weight_bending == 1.0);
    CHECK(cfg.weight_points == 0.01);
    CHECK(cfg.iterations == std::vector<int>{300, 600, 900, 1200});
    CHECK(cfg.spatial_samples == 5000);
    CHECK(cfg.histogram_bins == 32);
    CHECK(cfg.final_grid_spacing_mm == 8.0);
    CHECK(cfg.gain(0, 0) == doctest::Approx(35000.0 / std::pow(100.0, 0.602)));
    CHECK(cfg.gain(3, 10) == doctest::Approx(20000.0 / std::pow(410.0, 0.602)));
    CHECK_NOTHROW(cfg.validate());
    cfg.weight_points = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = RegistrationConfig{};
    cfg.iterations = {10};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("deformable registration") {
    const Grid3 g{{32, 32, 32}, {2, 2, 2}, {}};
    const auto target = noisy_phantom(21, g);

    SUBCASE("self registration stays near the identity") {
        // The default schedule is tuned for volumes of about 128 mm; a 64 mm volume decimates to
        // 4 voxels per axis at the coarsest level and the fixed gains overshoot there.
        const auto full = noisy_phantom(21, Grid3{{64, 64, 64}, {2, 2, 2}, {}});
        const auto res = register_deformable(full, full, {}, RegistrationConfig{});
        double mean = 0;
        for (const auto &d : res.dense_dvf.data()) mean += d.norm();
        mean /= static_cast<double>(res.dense_dvf.data().size());
        INFO("mean |DVF| " << mean);
        CHECK(mean < 0.5);
        CHECK(res.trace.size() == 3000);
    }
    SUBCASE("objective decomposes exactly and runs are deterministic") {
        SeededRng rng(2);
        DeformationConfig dc;
        dc.bump_magnitude_mm = {4, 6};
        dc.bump_sigma_mm = {12, 16};
        const auto source = add_noise(warp_volume(target, gaussian_bump_dvf(rng, dc, g)), rng, 0.03);
        CorrespondenceSet guidance;
        for (const auto &p : random_points(rng, g, 8, 4.0)) guidance.pairs.push_back({p, p + Vec3{1, 0, 0}, 1.0});
        auto cfg = quick_config();
        cfg.seed = 17;
        const auto a = register_deformable(target, source, guidance, cfg);
        const auto b = register_deformable(target, source, guidance, cfg);
        REQUIRE(a.trace.size() == 80);
        for (std::size_t n = 0; n < a.trace.size(); ++n) {
            const auto &e = a.trace[n];
            CHECK(e.objective == cfg.weight_mi * e.mi + cfg.weight_bending * e.bending + cfg.weight_points * e.points);
            CHECK(e.objective == b.trace[n].objective);
        }
        CHECK(a.dense_dvf == b.dense_dvf);
        CHECK(a.transform.spacing() == Vec3{8, 8, 8});
        CHECK(a.dense_dvf == render_dense_dvf(a.transform, g));
    }
    SUBCASE("guidance alone pulls the landmarks together") {
        auto cfg = RegistrationConfig{};
        cfg.weight_mi = 0;
        cfg.weight_bending = 0;
        cfg.weight_points = 1;
        cfg.sp_a = {20, 20, 20, 20};
        cfg.iterations = {200, 200, 200, 400};
        CorrespondenceSet guidance;
        const std::vector<Vec3> corners{{10, 10, 10}, {50, 12, 14}, {14, 48, 20}, {18, 16, 52}, {40, 40, 40}, {30, 20, 45}};
        for (const auto &p : corners) guidance.pairs.push_back({p, p + Vec3{3, -2, 1}, 1.0});
        const auto res = register_deformable(target, target, guidance, cfg);
        INFO("final CP " << res.trace.back().points);
        CHECK(corresponding_points_metric(res.transform, guidance).value < 0.5);
    }
    SUBCASE("guidance outside the sampling domain is dropped and counted") {
        CorrespondenceSet guidance;
        guidance.pairs.push_back({{200, 200, 200}, {0, 0, 0}, 1.0});
        guidance.pairs.push_back({{20, 20, 20}, {21, 20, 20}, 1.0});
        const auto res = register_deformable(target, target, guidance, quick_config());
        CHECK(res.dropped_guidance == 4);
    }
    SUBCASE("grid mismatch") {
        const auto other = noisy_phantom(3, Grid3{{32, 32, 30}, {2, 2, 2}, {}});
        CHECK_THROWS_AS(register_deformable(target, other, {}, quick_config()), DataError);
    }
}

TEST_CASE("affine registration") {
    const Grid3 g{{32, 32, 32}, {2, 2, 2}, {}};
    SeededRng rng(31);
    const auto clean = make_phantom(rng, g);
    const auto target = add_noise(clean, rng, 0.03);
    const Vec3 center = grid_center(g);
    AffineConfig cfg;
    CHECK(cfg.resolutions == 4);
    CHECK(cfg.iterations == 1024);

    auto rotation_deg = [](const Mat3 &m) {
        const Vec3 w{(m(2, 1) - m(1, 2)) / 2, (m(0, 2) - m(2, 0)) / 2, (m(1, 0) - m(0, 1)) / 2};
        return std::asin(std::min(1.0, w.norm())) * 180.0 / std::numbers::pi;
    };
    SUBCASE("self registration recovers the identity") {
        const auto a = affine_register(target, target, cfg);
        CHECK((a.apply(center) - center).norm() < 0.5);
        CHECK(rotation_deg(a.linear) < 0.5);
    }
    SUBCASE("known translation") {
        DenseDVF shift(g);
        for (auto &d : shift.data()) d = {6, 0, 0};
        const auto source = add_noise(warp_volume(clean, shift), rng, 0.03);
        const auto a = affine_register(target, source, cfg);
        const Vec3 t = a.apply(center) - center;
        INFO("recovered " << t.x << " " << t.y << " " << t.z);
        CHECK((t - Vec3{-6, 0, 0}).norm() < 1.0);
        const auto resampled = resample_affine(source, a, g);
        CHECK(resampled.grid() == g);
    }
}
