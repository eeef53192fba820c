// common.hpp - shared geometry types and error classes for lmreg.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace lmreg {

// Error taxonomy. The CLI maps each family onto a distinct exit code.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// World-space vector in mm. x runs along the width axis, y along height, z along depth.
struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    constexpr double &operator[](std::size_t a) { return a == 0 ? x : (a == 1 ? y : z); }
    constexpr double operator[](std::size_t a) const { return a == 0 ? x : (a == 1 ? y : z); }

    constexpr Vec3 &operator+=(const Vec3 &o) { x += o.x; y += o.y; z += o.z; return *this; }
    constexpr Vec3 &operator-=(const Vec3 &o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    constexpr Vec3 &operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

    friend constexpr Vec3 operator+(Vec3 a, const Vec3 &b) { return a += b; }
    friend constexpr Vec3 operator-(Vec3 a, const Vec3 &b) { return a -= b; }
    friend constexpr Vec3 operator-(const Vec3 &a) { return {-a.x, -a.y, -a.z}; }
    friend constexpr Vec3 operator*(Vec3 a, double s) { return a *= s; }
    friend constexpr Vec3 operator*(double s, Vec3 a) { return a *= s; }
    friend constexpr bool operator==(const Vec3 &, const Vec3 &) = default;

    constexpr double dot(const Vec3 &o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(dot(*this)); }
    bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

using WorldPoint = Vec3;

// Voxel index in (depth, height, width) order.
struct VoxelIndex {
    std::int64_t i = 0; // depth
    std::int64_t j = 0; // height
    std::int64_t k = 0; // width
    friend constexpr bool operator==(const VoxelIndex &, const VoxelIndex &) = default;
};

// Grid extent in (depth, height, width) order.
using Dims3 = std::array<std::int64_t, 3>;

// 3x3 row-major matrix.
struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static constexpr Mat3 identity() { return {}; }
    static constexpr Mat3 zero() { return Mat3{{0, 0, 0, 0, 0, 0, 0, 0, 0}}; }

    constexpr double &operator()(int r, int c) { return m[static_cast<std::size_t>(r * 3 + c)]; }
    constexpr double operator()(int r, int c) const { return m[static_cast<std::size_t>(r * 3 + c)]; }

    friend constexpr Mat3 operator*(const Mat3 &a, const Mat3 &b) {
        Mat3 out = zero();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                for (int t = 0; t < 3; ++t) out(r, c) += a(r, t) * b(t, c);
        return out;
    }
    friend constexpr Vec3 operator*(const Mat3 &a, const Vec3 &v) {
        return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z,
                a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
                a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
    }
    friend constexpr Mat3 operator*(double s, Mat3 a) {
        for (auto &v : a.m) v *= s;
        return a;
    }

    constexpr double determinant() const {
        const auto &a = *this;
        return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
               a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
               a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
    }

    // Adjugate over determinant; throws NumericError for a singular matrix.
    Mat3 inverse() const {
        const double det = determinant();
        if (!(std::abs(det) > 1e-300) || !std::isfinite(det)) throw NumericError("Mat3::inverse: singular matrix");
        const auto &a = *this;
        Mat3 out;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                // cofactor of (c, r)
                const int r0 = (c + 1) % 3, r1 = (c + 2) % 3, c0 = (r + 1) % 3, c1 = (r + 2) % 3;
                out(r, c) = (a(r0, c0) * a(r1, c1) - a(r0, c1) * a(r1, c0)) / det;
            }
        return out;
    }
};

} // namespace lmreg
