// Unit tests for volume I/O, resampling, windowing, interpolation and cropping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "lmreg/metaimage.hpp"
#include "lmreg/rng.hpp"
#include "lmreg/volume.hpp"

#include "test_support.hpp"

using namespace lmreg;

namespace {

void write_raw_floats(const std::filesystem::path &p, std::size_t count) {
    std::ofstream out(p, std::ios::binary);
    for (std::size_t n = 0; n < count; ++n) {
        const float v = static_cast<float>(n);
        out.write(reinterpret_cast<const char *>(&v), sizeof(v));
    }
}

void write_header(const std::filesystem::path &p, const std::string &type, const std::string &spacing = "2 2 2",
                  const std::string &extra = "") {
    std::ofstream out(p);
    out << "ObjectType = Image\nNDims = 3\nDimSize = 4 4 4\nElementSpacing = " << spacing
        << "\nOffset = 0 0 0\n" << extra << "ElementType = " << type << "\nElementDataFile = data.raw\n";
}

Volume3 ramp_volume(const Grid3 &g, double a, double bx, double by, double bz) {
    Volume3 v(g);
    for (std::int64_t i = 0; i < g.dims[0]; ++i)
        for (std::int64_t j = 0; j < g.dims[1]; ++j)
            for (std::int64_t k = 0; k < g.dims[2]; ++k) {
                const auto w = g.world(i, j, k);
                v.at(i, j, k) = a + bx * w.x + by * w.y + bz * w.z;
            }
    return v;
}

} // namespace

TEST_CASE("load_volume reads header metadata and payload") {
    test_support::TempDir dir;
    write_header(dir.path() / "v.mhd", "MET_FLOAT");
    write_raw_floats(dir.path() / "data.raw", 64);
    const auto v = load_volume(dir.path() / "v.mhd");
    CHECK(v.data().size() == 64);
    CHECK(v.grid().spacing == Vec3{2, 2, 2});
    CHECK(v.at(0, 0, 3) == doctest::Approx(3.0));
    CHECK(v.at(1, 0, 0) == doctest::Approx(16.0));
}

TEST_CASE("load_volume reports distinct errors") {
    test_support::TempDir dir;
    SUBCASE("short payload") {
        write_header(dir.path() / "v.mhd", "MET_FLOAT");
        write_raw_floats(dir.path() / "data.raw", 60);
        CHECK_THROWS_AS(load_volume(dir.path() / "v.mhd"), MetaImageLengthError);
    }
    SUBCASE("unsupported element type") {
        write_header(dir.path() / "v.mhd", "MET_UCHAR");
        write_raw_floats(dir.path() / "data.raw", 64);
        CHECK_THROWS_AS(load_volume(dir.path() / "v.mhd"), MetaImageTypeError);
    }
    SUBCASE("malformed header") {
        write_header(dir.path() / "v.mhd", "MET_FLOAT", "2 2");
        write_raw_floats(dir.path() / "data.raw", 64);
        CHECK_THROWS_AS(load_volume(dir.path() / "v.mhd"), MetaImageFormatError);
    }
    SUBCASE("missing key") {
        std::ofstream(dir.path() / "v.mhd") << "NDims = 3\nElementType = MET_FLOAT\nElementDataFile = data.raw\n";
        CHECK_THROWS_AS(load_volume(dir.path() / "v.mhd"), MetaImageFormatError);
    }
}

TEST_CASE("MET_SHORT volumes keep integer values until windowing") {
    test_support::TempDir dir;
    Grid3 g{{2, 3, 4}, {0.5, 0.75, 2.0}, {-10.25, 3.5, 7.0}};
    Volume3 v(g);
    for (std::size_t n = 0; n < v.data().size(); ++n) v.data()[n] = -1000.0 + 37.0 * static_cast<double>(n);
    save_volume(dir.path() / "s.mhd", v, ElementType::Short);
    const auto back = load_volume(dir.path() / "s.mhd");
    CHECK(back == v);
}

TEST_CASE("MetaImage float round trip is bit exact for float-representable data") {
    test_support::TempDir dir;
    SeededRng rng(3);
    Grid3 g{{3, 5, 7}, {1.0 / 3.0, 0.1, 2.0}, {0.1, -0.2, 1e-7}};
    Volume3 v(g);
    for (auto &x : v.data()) x = static_cast<float>(rng.uniform(-5, 5));
    save_volume(dir.path() / "f.mhd", v);
    CHECK(load_volume(dir.path() / "f.mhd") == v);
}

TEST_CASE("resample_to_spacing") {
    SUBCASE("identical spacing is a bitwise identity") {
        SeededRng rng(1);
        Grid3 g{{5, 6, 7}, {2, 2, 2}, {1.3, -4.1, 0.7}};
        Volume3 v(g);
        for (auto &x : v.data()) x = rng.uniform();
        CHECK(resample_to_spacing(v, {2, 2, 2}) == v);
    }
    SUBCASE("8^3 at 1 mm becomes 4^3 at 2 mm and constants stay constant") {
        Volume3 v(Grid3{{8, 8, 8}, {1, 1, 1}, {}}, 3.25);
        const auto r = resample_to_spacing(v, {2, 2, 2});
        CHECK(r.dims() == Dims3{4, 4, 4});
        for (double x : r.data()) CHECK(x == 3.25);
    }
    SUBCASE("linear ramp reproduced at new centers") {
        Grid3 g{{12, 10, 16}, {1, 1, 1}, {-3, 2, 5}};
        const auto v = ramp_volume(g, 0.5, 0.3, -0.7, 1.1);
        const auto r = resample_to_spacing(v, {2, 2, 2});
        CHECK(r.dims() == Dims3{6, 5, 8});
        for (std::int64_t i = 0; i < 6; ++i)
            for (std::int64_t j = 0; j < 5; ++j)
                for (std::int64_t k = 0; k < 8; ++k) {
                    const auto w = r.grid().world(i, j, k);
                    CHECK(r.at(i, j, k) == doctest::Approx(0.5 + 0.3 * w.x - 0.7 * w.y + 1.1 * w.z).epsilon(1e-6));
                }
    }
    SUBCASE("non-positive spacing is rejected") {
        Volume3 v(Grid3{});
        CHECK_THROWS_AS(resample_to_spacing(v, {0, 1, 1}), ConfigError);
    }
}

TEST_CASE("window_and_normalize") {
    Volume3 v(Grid3{{1, 1, 5}, {1, 1, 1}, {}}, std::vector<double>{-100, 300, 100, -2000, 3000});
    const auto w = window_and_normalize(v, -100, 300);
    CHECK(w.data()[0] == 0.0);
    CHECK(w.data()[1] == 1.0);
    CHECK(w.data()[2] == doctest::Approx(0.5));
    CHECK(w.data()[3] == 0.0);
    CHECK(w.data()[4] == 1.0);
    CHECK_THROWS_AS(window_and_normalize(v, 5, 5), ConfigError);

    SUBCASE("monotone and bounded") {
        SeededRng rng(9);
        std::vector<double> vals(500);
        for (auto &x : vals) x = rng.uniform(-1500, 1500);
        std::sort(vals.begin(), vals.end());
        Volume3 s(Grid3{{1, 1, 500}, {1, 1, 1}, {}}, vals);
        const auto n = window_and_normalize(s);
        for (std::size_t t = 1; t < vals.size(); ++t) CHECK(n.data()[t] >= n.data()[t - 1]);
        for (double x : n.data()) CHECK((x >= 0.0 && x <= 1.0));
    }
}

TEST_CASE("trilinear_sample") {
    Grid3 g{{4, 5, 6}, {2, 1.5, 0.5}, {-1, 2, 3}};
    SeededRng rng(21);
    Volume3 v(g);
    for (auto &x : v.data()) x = rng.uniform(-10, 10);

    SUBCASE("exact at voxel centers") {
        for (std::int64_t n = 0; n < g.voxel_count(); ++n) {
            const auto idx = g.unravel(static_cast<std::size_t>(n));
            CHECK(trilinear_sample(v, g.world(idx)) == v.at(idx));
        }
    }
    SUBCASE("midpoint is the mean of the two neighbours") {
        const auto p = (g.world(1, 2, 3) + g.world(1, 2, 4)) * 0.5;
        CHECK(trilinear_sample(v, p) == doctest::Approx(0.5 * (v.at(1, 2, 3) + v.at(1, 2, 4))));
    }
    SUBCASE("reproduces trilinear polynomials") {
        // f = a + bx + cy + dz + exy + fxz + gyz + hxyz
        const double c[8] = {0.3, 1.2, -0.4, 0.8, 0.05, -0.02, 0.07, 0.01};
        auto f = [&](const Vec3 &p) {
            return c[0] + c[1] * p.x + c[2] * p.y + c[3] * p.z + c[4] * p.x * p.y + c[5] * p.x * p.z +
                   c[6] * p.y * p.z + c[7] * p.x * p.y * p.z;
        };
        Volume3 poly(g);
        for (std::int64_t n = 0; n < g.voxel_count(); ++n) {
            const auto idx = g.unravel(static_cast<std::size_t>(n));
            poly.at(idx.i, idx.j, idx.k) = f(g.world(idx));
        }
        const auto lo = g.lower_center(), hi = g.upper_center();
        for (int t = 0; t < 200; ++t) {
            Vec3 p{rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y), rng.uniform(lo.z, hi.z)};
            const double expect = f(p);
            CHECK(std::abs(trilinear_sample(poly, p) - expect) <= 1e-6 * std::max(1.0, std::abs(expect)));
        }
    }
    SUBCASE("clamp-to-edge outside the grid") {
        const auto far = g.world(0, 0, 0) - Vec3{100, 100, 100};
        CHECK(trilinear_sample(v, far) == v.at(0, 0, 0));
    }
    SUBCASE("analytic gradient matches central differences") {
        const auto lo = g.lower_center(), hi = g.upper_center();
        for (int t = 0; t < 50; ++t) {
            Vec3 p{rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y), rng.uniform(lo.z, hi.z)};
            const auto s = trilinear_sample_gradient(v, p);
            CHECK(s.value == doctest::Approx(trilinear_sample(v, p)));
            const double h = 1e-6;
            for (std::size_t a = 0; a < 3; ++a) {
                Vec3 pp = p, pm = p;
                pp[a] += h;
                pm[a] -= h;
                const double fd = (trilinear_sample(v, pp) - trilinear_sample(v, pm)) / (2 * h);
                CHECK(s.gradient[a] == doctest::Approx(fd).epsilon(1e-5));
            }
        }
    }
}

TEST_CASE("crop_patch") {
    Grid3 g{{4, 4, 4}, {2, 2, 2}, {10, 20, 30}};
    SeededRng rng(5);
    Volume3 v(g);
    for (auto &x : v.data()) x = rng.uniform();

    CHECK(crop_patch(v, {0, 0, 0}, g.dims) == v);
    CHECK_THROWS_AS(crop_patch(v, {1, 0, 0}, {4, 4, 4}), DataError);

    const auto c = crop_patch(v, {1, 2, 0}, {2, 2, 3});
    CHECK(c.grid().spacing == g.spacing);
    CHECK(c.grid().origin == g.world(1, 2, 0));

    SUBCASE("sampling the crop equals sampling the original inside the crop") {
        const auto lo = c.grid().lower_center(), hi = c.grid().upper_center();
        for (int t = 0; t < 100; ++t) {
            Vec3 p{rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y), rng.uniform(lo.z, hi.z)};
            CHECK(trilinear_sample(c, p) == doctest::Approx(trilinear_sample(v, p)).epsilon(1e-12));
        }
    }
    SUBCASE("a full-size patch is a legal request") {
        Volume3 big(Grid3{{192, 192, 192}, {2, 2, 2}, {}});
        const auto p = crop_patch(big, {10, 20, 30}, {48, 128, 128});
        CHECK(p.dims() == Dims3{48, 128, 128});
    }
}

TEST_CASE("gaussian_smooth preserves constants") {
    Volume3 v(Grid3{{6, 7, 8}, {2, 2, 2}, {}}, 0.4);
    const auto s = gaussian_smooth(v, {3, 3, 3});
    for (double x : s.data()) CHECK(x == doctest::Approx(0.4).epsilon(1e-14));
}
