#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "lmreg/evaluation.hpp"
#include "test_support.hpp"

using namespace lmreg;
using namespace lmreg::eval;

namespace {

Grid3 small_grid() { return Grid3{{12, 14, 16}, {2.0, 2.0, 2.0}, {-5.0, 3.0, 1.0}}; }

// Sum of bumps so the field is smooth and invertible (|grad D| well below 1).
DenseDVF smooth_field(const Grid3 &g, double amp) {
    DenseDVF d(g);
    const Vec3 c = g.world(g.dims[0] / 2, g.dims[1] / 2, g.dims[2] / 2);
    for (std::int64_t i = 0; i < g.dims[0]; ++i)
        for (std::int64_t j = 0; j < g.dims[1]; ++j)
            for (std::int64_t k = 0; k < g.dims[2]; ++k) {
                const Vec3 x = g.world(i, j, k);
                const Vec3 r = x - c;
                const double w = amp * std::exp(-(r.x * r.x + r.y * r.y + r.z * r.z) / (2.0 * 64.0));
                d.at(i, j, k) = {w, -0.5 * w, 0.25 * w};
            }
    return d;
}

std::vector<double> parse_error_column(const std::string &csv) {
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "index,error_mm");
    std::vector<double> out;
    while (std::getline(in, line)) out.push_back(std::stod(line.substr(line.find(',') + 1)));
    return out;
}

} // namespace

TEST_CASE("nearest-rank percentile matches the sorted-rank definition") {
    std::vector<double> v(20);
    for (int n = 0; n < 20; ++n) v[static_cast<std::size_t>(n)] = 20.0 - n; // 20..1, unsorted input
    CHECK(nearest_rank_percentile(v, 5.0) == 1.0);
    CHECK(nearest_rank_percentile(v, 95.0) == 19.0);
    CHECK(nearest_rank_percentile(v, 100.0) == 20.0);
    CHECK(nearest_rank_percentile(v, 0.0) == 1.0);

    // Brute force: smallest value whose at-or-below count reaches p% of n.
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> x(static_cast<std::size_t>(1 + trial * 3));
        for (auto &e : x) e = u(gen);
        for (double p : {5.0, 50.0, 95.0}) {
            double expect = 0.0;
            auto sorted = x;
            std::sort(sorted.begin(), sorted.end());
            for (double cand : sorted) {
                const auto below = std::count_if(x.begin(), x.end(), [&](double e) { return e <= cand; });
                if (static_cast<double>(below) >= p / 100.0 * static_cast<double>(x.size()) - 1e-9) {
                    expect = cand;
                    break;
                }
            }
            CHECK(nearest_rank_percentile(x, p) == expect);
        }
    }
}

TEST_CASE("error summary statistics agree with a recomputation from the CSV") {
    const std::vector<double> errors{0.5, 2.0, 3.5, 1.25, 8.0, 0.0, 4.75};
    const auto rep = summarize_errors(errors, 2);
    const auto parsed = parse_error_column(errors_csv(rep));
    REQUIRE(parsed.size() == errors.size());
    double mean = 0.0;
    for (double e : parsed) mean += e;
    mean /= static_cast<double>(parsed.size());
    double var = 0.0;
    for (double e : parsed) var += (e - mean) * (e - mean);
    var /= static_cast<double>(parsed.size());
    CHECK(rep.mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(rep.std == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
    CHECK(rep.count == 7);
    CHECK(rep.dropped == 2);
    CHECK(rep.percentile_5 == 0.0);
    CHECK(rep.percentile_95 == 8.0);

    const auto empty = summarize_errors({});
    CHECK(empty.count == 0);
    CHECK(empty.mean == 0.0);
}

TEST_CASE("spatial matching error of exact and perturbed correspondences") {
    const Grid3 g = small_grid();
    const auto dvf = smooth_field(g, 3.0);
    std::vector<WorldPoint> targets;
    for (int n = 0; n < 10; ++n) targets.push_back(g.world(3 + n % 5, 4 + n % 4, 5 + n % 6));
    const auto sources = ground_truth_correspondence(targets, dvf);

    CorrespondenceSet exact, shifted;
    for (std::size_t n = 0; n < targets.size(); ++n) {
        exact.pairs.push_back({targets[n], sources[n], 1.0});
        // 4 mm along a unit direction that changes per pair.
        const double a = 0.7 * static_cast<double>(n);
        const Vec3 dir{std::cos(a) * 0.6, std::sin(a) * 0.6, 0.8};
        shifted.pairs.push_back({targets[n], sources[n] + dir * 4.0, 1.0});
    }
    const auto e0 = spatial_matching_error(exact, dvf);
    CHECK(e0.count == 10);
    CHECK(e0.mean < 1e-3);
    const auto e4 = spatial_matching_error(shifted, dvf);
    for (double e : e4.errors) CHECK(e == doctest::Approx(4.0).epsilon(1e-3));

    const std::vector<double> edges{3.99, 4.01, 5.0};
    const auto cdf = cumulative_error_distribution(e4.errors, edges);
    CHECK(cdf[0].count == 0);
    CHECK(cdf[1].count == 10);
    CHECK(cdf[2].fraction == 1.0);
}

TEST_CASE("cumulative distribution counts at-or-below each edge") {
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> u(0.0, 20.0);
    std::vector<double> errors(97);
    for (auto &e : errors) e = u(gen);
    errors[5] = 4.0; // a value exactly on an edge counts as at-or-below
    std::vector<double> edges;
    for (int e = 0; e <= 20; ++e) edges.push_back(e);
    const auto rows = cumulative_error_distribution(errors, edges);
    REQUIRE(rows.size() == edges.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto brute = static_cast<std::size_t>(
            std::count_if(errors.begin(), errors.end(), [&](double e) { return e <= edges[r]; }));
        CHECK(rows[r].count == brute);
        CHECK(rows[r].fraction == doctest::Approx(static_cast<double>(brute) / 97.0));
        if (r > 0) CHECK(rows[r].count >= rows[r - 1].count);
    }
    CHECK(rows.back().fraction == 1.0);

    const std::vector<double> bad{1.0, 1.0};
    CHECK_THROWS_AS(cumulative_error_distribution(errors, bad), ConfigError);
}

TEST_CASE("TRE under known point maps") {
    const std::vector<WorldPoint> t{{0, 0, 0}, {1, 2, 3}, {-4, 5, 6}};
    CHECK(tre(t, t, identity_map()).mean == 0.0);

    std::vector<WorldPoint> s;
    for (const auto &p : t) s.push_back(p + Vec3{6, 8, 0});
    const auto r = tre(t, s, identity_map());
    for (double e : r.errors) CHECK(e == doctest::Approx(10.0));

    const auto a = make_affine({6, 8, 0}, {0, 0, 0}, 1.0, {});
    CHECK(tre(t, s, affine_map(a)).mean == doctest::Approx(0.0).epsilon(1e-12));

    const std::vector<WorldPoint> short_list{{0, 0, 0}};
    CHECK_THROWS_AS(tre(t, short_list, identity_map()), ConfigError);

    const Grid3 g = small_grid();
    const auto lattice = reg::BSplineTransform::covering(g, {8, 8, 8});
    const auto m = bspline_map(lattice);
    CHECK(m(g.world(2, 2, 2)).x == doctest::Approx(g.world(2, 2, 2).x));
    CHECK_THROWS_AS(m(Vec3{1e4, 0, 0}), DataError);

    // dvf_map is x + D(x) at grid nodes.
    const auto dvf = smooth_field(g, 2.0);
    const Vec3 x = g.world(6, 7, 8);
    const Vec3 y = dvf_map(dvf)(x);
    CHECK(y.x == doctest::Approx(x.x + dvf.at(6, 7, 8).x));
    CHECK(y.z == doctest::Approx(x.z + dvf.at(6, 7, 8).z));
}

TEST_CASE("landmark deformation histogram bins by displacement magnitude") {
    const Grid3 g = small_grid();
    const DenseDVF zero(g);
    CorrespondenceSet pairs;
    for (int n = 0; n < 6; ++n) {
        const Vec3 p = g.world(4, 4, 2 + n);
        pairs.pairs.push_back({p, p, 1.0});
    }
    const auto edges = default_deformation_edges();
    CHECK(edges.front() == 0.0);
    CHECK(edges.back() == 24.0);
    const auto h0 = landmark_deformation_histogram(pairs, zero, edges);
    CHECK(h0.all[0] == 6);
    CHECK(h0.accurate[0] == 6);

    // Brute-force rebinning on a smooth field with one inaccurate pair.
    const auto dvf = smooth_field(g, 9.0);
    std::vector<WorldPoint> targets;
    for (int n = 0; n < 12; ++n) targets.push_back(g.world(2 + n % 8, 3 + n % 7, 4 + n % 9));
    const auto sources = ground_truth_correspondence(targets, dvf);
    CorrespondenceSet set;
    for (std::size_t n = 0; n < targets.size(); ++n) set.pairs.push_back({targets[n], sources[n], 1.0});
    set.pairs[0].source = set.pairs[0].source + Vec3{10, 0, 0};
    const auto h = landmark_deformation_histogram(set, dvf, edges, 4.0);
    std::vector<std::size_t> all(edges.size() - 1, 0), acc(edges.size() - 1, 0);
    for (std::size_t n = 0; n < set.size(); ++n) {
        const double mag = dvf.sample(set.pairs[n].source).norm();
        std::size_t b = 0;
        while (b + 1 < all.size() && mag >= edges[b + 1]) ++b;
        ++all[b];
        if (n != 0) ++acc[b];
    }
    CHECK(h.all == all);
    CHECK(h.accurate == acc);
}

TEST_CASE("Jacobian report flags folding") {
    const Grid3 g{{10, 10, 10}, {1, 1, 1}, {}};
    const auto id = jacobian_report(DenseDVF(g));
    CHECK(id.min_determinant == doctest::Approx(1.0));
    CHECK(id.max_determinant == doctest::Approx(1.0));
    CHECK(id.min_interior == doctest::Approx(1.0));
    CHECK(id.fraction_nonpositive == 0.0);
    CHECK(id.voxels == 1000);

    // D_x = -2 x makes d(x + D_x)/dx = -1 everywhere the central difference applies.
    DenseDVF fold(g);
    for (std::int64_t i = 0; i < 10; ++i)
        for (std::int64_t j = 0; j < 10; ++j)
            for (std::int64_t k = 0; k < 10; ++k) fold.at(i, j, k) = {-2.0 * static_cast<double>(k), 0, 0};
    const auto r = jacobian_report(fold);
    CHECK(r.min_interior == doctest::Approx(-1.0));
    CHECK(r.fraction_nonpositive > 0.5);
    std::size_t total = 0;
    for (auto c : r.counts) total += c;
    CHECK(total == r.voxels);
    CHECK(r.counts.front() > 0); // negatives go to the first bin
}

TEST_CASE("overlay colours follow the red/cyan rule") {
    const Grid3 g{{4, 5, 6}, {1, 1, 1}, {}};
    Volume3 target(g), warped(g);
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> u(-0.2, 1.2);
    for (auto &v : target.data()) v = u(gen);
    for (auto &v : warped.data()) v = u(gen);

    SUBCASE("identical images render grey") {
        const auto img = overlay_slice(target, target, 0, 2);
        for (std::size_t p = 0; p < img.rgb.size(); p += 3) {
            CHECK(img.rgb[p] == img.rgb[p + 1]);
            CHECK(img.rgb[p] == img.rgb[p + 2]);
        }
    }
    SUBCASE("an empty warped image renders pure red") {
        const auto img = overlay_slice(target, Volume3(g, 0.0), 1, 3);
        CHECK(img.width == 6);
        CHECK(img.height == 4);
        for (std::size_t p = 0; p < img.rgb.size(); p += 3) {
            CHECK(img.rgb[p + 1] == 0);
            CHECK(img.rgb[p + 2] == 0);
        }
    }
    SUBCASE("pixel values follow clamp-and-scale") {
        const auto img = overlay_slice(target, warped, 2, 1);
        // axis 2 slices width; rows are depth, columns height.
        CHECK(img.width == 5);
        CHECK(img.height == 4);
        auto byte = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
        for (std::int64_t r = 0; r < 4; ++r)
            for (std::int64_t c = 0; c < 5; ++c) {
                const auto p = static_cast<std::size_t>(3 * (r * 5 + c));
                CHECK(img.rgb[p] == byte(target.at(r, c, 1)));
                CHECK(img.rgb[p + 1] == byte(warped.at(r, c, 1)));
                CHECK(img.rgb[p + 2] == byte(warped.at(r, c, 1)));
            }
    }
    SUBCASE("out of range slices are rejected") {
        CHECK_THROWS_AS(overlay_slice(target, warped, 0, 4), ConfigError);
        CHECK_THROWS_AS(overlay_slice(target, warped, 3, 0), ConfigError);
    }
    SUBCASE("PPM files round-trip") {
        test_support::TempDir dir;
        const std::vector<std::int64_t> slices{0, 3};
        const auto paths = overlay_slices(target, warped, 0, slices, dir.path() / "ov");
        REQUIRE(paths.size() == 2);
        CHECK(paths[1].filename() == "overlay_a0_3.ppm");
        const auto back = read_ppm(paths[1]);
        const auto direct = overlay_slice(target, warped, 0, 3);
        CHECK(back.width == direct.width);
        CHECK(back.height == direct.height);
        CHECK(back.rgb == direct.rgb);
    }
}

TEST_CASE("simulated registration pairs") {
    PairSimulationConfig cfg;
    cfg.dims = {24, 24, 24};
    cfg.guidance_points = 8;
    cfg.evaluation_points = 8;
    cfg.bump_magnitude_mm = {6.0, 10.0};
    const auto a = simulate_pair(17, cfg);
    const auto b = simulate_pair(17, cfg);
    CHECK(a.target == b.target);
    CHECK(a.source == b.source);
    CHECK(a.dvf == b.dvf);
    CHECK(a.guidance == b.guidance);
    CHECK(a.evaluation == b.evaluation);
    CHECK(a.guidance.size() == 8);
    CHECK(a.evaluation.size() == 8);
    CHECK_FALSE(simulate_pair(18, cfg).target == a.target);

    for (const auto *set : {&a.guidance, &a.evaluation})
        for (const auto &c : set->pairs) {
            // target = source + D(source), and the point sits in the deformed region.
            const Vec3 back = c.source + a.dvf.sample(c.source);
            CHECK((back - c.target).norm() < 1e-3);
            CHECK(a.dvf.sample(c.source).norm() >= 0.5);
        }
    // The two sets are drawn separately.
    for (const auto &g : a.guidance.pairs)
        for (const auto &e : a.evaluation.pairs) CHECK_FALSE(g.target == e.target);

    cfg.min_displacement_mm = 1e3;
    CHECK_THROWS_AS(simulate_pair(1, cfg), DataError);
    cfg = {};
    cfg.guidance_points = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
