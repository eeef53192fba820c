#include <algorithm>
#include <cmath>

#include "lmreg/registration.hpp"

namespace lmreg::reg {

std::array<double, 4> cubic_weights(double u) {
    const double v = 1.0 - u, u2 = u * u, u3 = u2 * u;
    return {v * v * v / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0, (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0};
}

std::array<double, 4> cubic_first_derivative(double u) {
    const double v = 1.0 - u;
    return {-0.5 * v * v, 1.5 * u * u - 2.0 * u, -1.5 * u * u + u + 0.5, 0.5 * u * u};
}

std::array<double, 4> cubic_second_derivative(double u) { return {1.0 - u, 3.0 * u - 2.0, 1.0 - 3.0 * u, u}; }

namespace {

constexpr double kSupportSlack = 1e-9;

double grid_spacing_along(const Grid3 &g, int a) { return g.spacing[static_cast<std::size_t>(a)]; }
std::int64_t grid_dims_along(const Grid3 &g, int a) { return g.dims[static_cast<std::size_t>(2 - a)]; }

} // namespace

BSplineTransform BSplineTransform::covering(const Grid3 &grid, const Vec3 &spacing_mm) {
    grid.validate();
    BSplineTransform t;
    for (int a = 0; a < 3; ++a) {
        const double s = spacing_mm[static_cast<std::size_t>(a)];
        if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("B-spline grid spacing must be positive");
        const double extent = static_cast<double>(grid_dims_along(grid, a) - 1) * grid_spacing_along(grid, a);
        const auto intervals = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(extent / s - 1e-9)));
        t.size_[static_cast<std::size_t>(a)] = intervals + 5;
        t.spacing_[static_cast<std::size_t>(a)] = s;
        t.origin_[static_cast<std::size_t>(a)] = grid.origin[static_cast<std::size_t>(a)] - 2.0 * s;
    }
    t.coefficients_.assign(static_cast<std::size_t>(t.size_[0] * t.size_[1] * t.size_[2]), Vec3{});
    return t;
}

Vec3 BSplineTransform::control_point(std::int64_t cx, std::int64_t cy, std::int64_t cz) const {
    return {origin_.x + static_cast<double>(cx) * spacing_.x, origin_.y + static_cast<double>(cy) * spacing_.y,
            origin_.z + static_cast<double>(cz) * spacing_.z};
}

std::vector<double> BSplineTransform::parameters() const {
    std::vector<double> p(parameter_count());
    for (std::size_t n = 0; n < coefficients_.size(); ++n) {
        p[3 * n] = coefficients_[n].x;
        p[3 * n + 1] = coefficients_[n].y;
        p[3 * n + 2] = coefficients_[n].z;
    }
    return p;
}

void BSplineTransform::set_parameters(std::span<const double> params) {
    if (params.size() != parameter_count()) throw ConfigError("B-spline parameter count mismatch");
    for (std::size_t n = 0; n < coefficients_.size(); ++n)
        coefficients_[n] = {params[3 * n], params[3 * n + 1], params[3 * n + 2]};
}

bool BSplineTransform::supports(const Vec3 &p) const {
    if (coefficients_.empty()) return false;
    for (std::size_t a = 0; a < 3; ++a) {
        const double t = (p[a] - origin_[a]) / spacing_[a];
        if (!(t >= 1.0 - kSupportSlack && t <= static_cast<double>(size_[a] - 2) + kSupportSlack)) return false;
    }
    return true;
}

BSplineStencil BSplineTransform::stencil(const Vec3 &p) const {
    if (!supports(p)) throw DataError("point outside the B-spline support");
    BSplineStencil st;
    for (std::size_t a = 0; a < 3; ++a) {
        const double t = std::clamp((p[a] - origin_[a]) / spacing_[a], 1.0, static_cast<double>(size_[a] - 2));
        auto base = static_cast<std::int64_t>(std::floor(t));
        base = std::min(base, size_[a] - 3);
        const double u = t - static_cast<double>(base);
        st.first[a] = base - 1;
        st.w[a] = cubic_weights(u);
        const double inv = 1.0 / spacing_[a];
        const auto d1 = cubic_first_derivative(u);
        const auto d2 = cubic_second_derivative(u);
        for (std::size_t n = 0; n < 4; ++n) {
            st.dw[a][n] = d1[n] * inv;
            st.d2w[a][n] = d2[n] * inv * inv;
        }
    }
    return st;
}

Vec3 BSplineTransform::displacement(const Vec3 &p) const {
    const auto st = stencil(p);
    Vec3 out{};
    for (std::size_t cz = 0; cz < 4; ++cz) {
        for (std::size_t cy = 0; cy < 4; ++cy) {
            const double wzy = st.w[2][cz] * st.w[1][cy];
            const std::size_t row = control_index(st.first[0], st.first[1] + static_cast<std::int64_t>(cy),
                                                  st.first[2] + static_cast<std::int64_t>(cz));
            for (std::size_t cx = 0; cx < 4; ++cx) out += coefficients_[row + cx] * (wzy * st.w[0][cx]);
        }
    }
    return out;
}

Mat3 BSplineTransform::displacement_jacobian(const Vec3 &p) const {
    const auto st = stencil(p);
    Mat3 j = Mat3::zero();
    for (std::size_t cz = 0; cz < 4; ++cz)
        for (std::size_t cy = 0; cy < 4; ++cy) {
            const std::size_t row = control_index(st.first[0], st.first[1] + static_cast<std::int64_t>(cy),
                                                  st.first[2] + static_cast<std::int64_t>(cz));
            for (std::size_t cx = 0; cx < 4; ++cx) {
                const Vec3 &c = coefficients_[row + cx];
                const double gx = st.dw[0][cx] * st.w[1][cy] * st.w[2][cz];
                const double gy = st.w[0][cx] * st.dw[1][cy] * st.w[2][cz];
                const double gz = st.w[0][cx] * st.w[1][cy] * st.dw[2][cz];
                for (int r = 0; r < 3; ++r) {
                    const double v = c[static_cast<std::size_t>(r)];
                    j(r, 0) += v * gx;
                    j(r, 1) += v * gy;
                    j(r, 2) += v * gz;
                }
            }
        }
    return j;
}

BSplineTransform BSplineTransform::refined(const Grid3 &grid) const {
    const Vec3 half = spacing_ * 0.5;
    BSplineTransform fine = covering(grid, half);
    for (std::size_t a = 0; a < 3; ++a) {
        if (std::abs(fine.origin_[a] - (origin_[a] + spacing_[a])) > 1e-9 * spacing_[a])
            throw ConfigError("refined: grid does not match the lattice this transform was built for");
    }
    // Subdivision mask of the uniform cubic B-spline, applied one axis at a time.
    static constexpr std::array<double, 5> mask{1.0 / 8, 4.0 / 8, 6.0 / 8, 4.0 / 8, 1.0 / 8};
    std::array<std::int64_t, 3> cur = size_;
    std::vector<Vec3> data = coefficients_;
    for (std::size_t a = 0; a < 3; ++a) {
        std::array<std::int64_t, 3> next = cur;
        next[a] = fine.size_[a];
        std::vector<Vec3> out(static_cast<std::size_t>(next[0] * next[1] * next[2]));
        auto at = [](const std::array<std::int64_t, 3> &dims, std::int64_t x, std::int64_t y, std::int64_t z) {
            return static_cast<std::size_t>((z * dims[1] + y) * dims[0] + x);
        };
        for (std::int64_t z = 0; z < next[2]; ++z)
            for (std::int64_t y = 0; y < next[1]; ++y)
                for (std::int64_t x = 0; x < next[0]; ++x) {
                    const std::array<std::int64_t, 3> idx{x, y, z};
                    const std::int64_t p = idx[a];
                    Vec3 acc{};
                    // fine index p sits at coarse position (p + 2) / 2
                    for (std::int64_t m = (p + 1) / 2; m <= (p + 4) / 2; ++m) {
                        const std::int64_t r = p + 2 - 2 * m;
                        if (r < -2 || r > 2 || m < 0 || m >= cur[a]) continue;
                        auto src = idx;
                        src[a] = m;
                        acc += data[at(cur, src[0], src[1], src[2])] * mask[static_cast<std::size_t>(r + 2)];
                    }
                    out[at(next, x, y, z)] = acc;
                }
        data = std::move(out);
        cur = next;
    }
    fine.coefficients_ = std::move(data);
    return fine;
}

DenseDVF render_dense_dvf(const BSplineTransform &transform, const Grid3 &grid) {
    DenseDVF out(grid);
    for (std::int64_t i = 0; i < grid.dims[0]; ++i)
        for (std::int64_t j = 0; j < grid.dims[1]; ++j)
            for (std::int64_t k = 0; k < grid.dims[2]; ++k) out.at(i, j, k) = transform.displacement(grid.world(i, j, k));
    return out;
}

std::vector<WorldPoint> transform_points(const BSplineTransform &transform, std::span<const WorldPoint> points) {
    std::vector<WorldPoint> out;
    out.reserve(points.size());
    for (const auto &p : points) out.push_back(transform.apply(p));
    return out;
}

} // namespace lmreg::reg
