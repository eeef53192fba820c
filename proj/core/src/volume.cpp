#include "lmreg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lmreg/metaimage.hpp"

namespace lmreg {

namespace {

// Voxel-center coordinates are snapped to the exact integer when within this distance, so
// samples taken at centers reproduce stored values bit for bit.
constexpr double kSnap = 1e-9;

double snap(double c) {
    const double r = std::round(c);
    return std::abs(c - r) < kSnap ? r : c;
}

struct AxisWeights {
    std::int64_t lo = 0;
    std::int64_t hi = 0;
    double frac = 0.0;
    bool clamped = false;
};

AxisWeights clamp_axis(double c, std::int64_t n) {
    AxisWeights w;
    if (n == 1) {
        w.clamped = true;
        return w;
    }
    const double maxc = static_cast<double>(n - 1);
    if (c <= 0.0) {
        w.clamped = c < 0.0;
        w.lo = 0;
        w.hi = 1;
        w.frac = 0.0;
        return w;
    }
    if (c >= maxc) {
        w.clamped = c > maxc;
        w.lo = n - 2;
        w.hi = n - 1;
        w.frac = 1.0;
        return w;
    }
    const double f = std::floor(c);
    w.lo = static_cast<std::int64_t>(f);
    w.hi = w.lo + 1;
    w.frac = c - f;
    return w;
}

} // namespace

VoxelIndex Grid3::unravel(std::size_t n) const {
    const auto nn = static_cast<std::int64_t>(n);
    const std::int64_t plane = dims[1] * dims[2];
    return {nn / plane, (nn % plane) / dims[2], nn % dims[2]};
}

ContinuousIndex Grid3::continuous_index(const Vec3 &p) const {
    return {snap((p.z - origin.z) / spacing.z), snap((p.y - origin.y) / spacing.y),
            snap((p.x - origin.x) / spacing.x)};
}

void Grid3::validate() const {
    for (auto d : dims) {
        if (d < 1) throw DataError("grid dims must be positive");
    }
    if (!(spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0)) {
        throw DataError("grid spacing must be positive");
    }
    if (!origin.finite()) throw DataError("grid origin must be finite");
}

Volume3::Volume3(const Grid3 &grid, double fill) : grid_(grid) {
    grid_.validate();
    data_.assign(static_cast<std::size_t>(grid_.voxel_count()), fill);
}

Volume3::Volume3(const Grid3 &grid, std::vector<double> data) : grid_(grid), data_(std::move(data)) {
    grid_.validate();
    if (data_.size() != static_cast<std::size_t>(grid_.voxel_count())) {
        throw DataError("volume data length " + std::to_string(data_.size()) + " does not match dims product " +
                        std::to_string(grid_.voxel_count()));
    }
}

Volume3 load_volume(const std::filesystem::path &header_path) {
    auto img = read_metaimage(header_path);
    if (img.channels != 1) throw MetaImageFormatError("expected a single-channel volume in " + header_path.string());
    return Volume3(img.grid, std::move(img.values));
}

void save_volume(const std::filesystem::path &header_path, const Volume3 &vol, ElementType type) {
    MetaImage img;
    img.grid = vol.grid();
    img.type = type;
    img.values.assign(vol.data().begin(), vol.data().end());
    write_metaimage(header_path, img);
}

Volume3 resample_to_spacing(const Volume3 &vol, const Vec3 &target_spacing) {
    if (!(target_spacing.x > 0.0 && target_spacing.y > 0.0 && target_spacing.z > 0.0)) {
        throw ConfigError("resample target spacing must be positive");
    }
    const auto &g = vol.grid();
    if (target_spacing == g.spacing) return vol;

    Grid3 out;
    out.origin = g.origin;
    out.spacing = target_spacing;
    for (int a = 0; a < 3; ++a) {
        const double extent = static_cast<double>(g.dims[static_cast<std::size_t>(a)]) * g.axis_spacing(a);
        out.dims[static_cast<std::size_t>(a)] = std::max<std::int64_t>(1, std::llround(extent / out.axis_spacing(a)));
    }
    Volume3 res(out);
    for (std::int64_t i = 0; i < out.dims[0]; ++i)
        for (std::int64_t j = 0; j < out.dims[1]; ++j)
            for (std::int64_t k = 0; k < out.dims[2]; ++k) res.at(i, j, k) = trilinear_sample(vol, out.world(i, j, k));
    return res;
}

Volume3 window_and_normalize(const Volume3 &vol, double lo, double hi) {
    if (!(lo < hi)) throw ConfigError("window lower bound must be below upper bound");
    Volume3 out = vol;
    for (double &v : out.data()) v = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    return out;
}

double trilinear_sample(const Volume3 &vol, const Vec3 &p) {
    const auto &g = vol.grid();
    const auto c = g.continuous_index(p);
    const auto wi = clamp_axis(c[0], g.dims[0]);
    const auto wj = clamp_axis(c[1], g.dims[1]);
    const auto wk = clamp_axis(c[2], g.dims[2]);

    auto axis_sample = [&](std::int64_t i, std::int64_t j) {
        const double a = vol.at(i, j, wk.lo);
        if (g.dims[2] == 1) return a;
        if (wk.frac == 0.0) return a;
        const double b = vol.at(i, j, wk.hi);
        if (wk.frac == 1.0) return b;
        return a + (b - a) * wk.frac;
    };
    auto plane_sample = [&](std::int64_t i) {
        const double a = axis_sample(i, wj.lo);
        if (g.dims[1] == 1 || wj.frac == 0.0) return a;
        const double b = axis_sample(i, wj.hi);
        if (wj.frac == 1.0) return b;
        return a + (b - a) * wj.frac;
    };
    const double a = plane_sample(wi.lo);
    if (g.dims[0] == 1 || wi.frac == 0.0) return a;
    const double b = plane_sample(wi.hi);
    if (wi.frac == 1.0) return b;
    return a + (b - a) * wi.frac;
}

SampleWithGradient trilinear_sample_gradient(const Volume3 &vol, const Vec3 &p) {
    const auto &g = vol.grid();
    const auto c = g.continuous_index(p);
    const auto wi = clamp_axis(c[0], g.dims[0]);
    const auto wj = clamp_axis(c[1], g.dims[1]);
    const auto wk = clamp_axis(c[2], g.dims[2]);
    const std::int64_t hi_i = g.dims[0] == 1 ? 0 : wi.hi;
    const std::int64_t hi_j = g.dims[1] == 1 ? 0 : wj.hi;
    const std::int64_t hi_k = g.dims[2] == 1 ? 0 : wk.hi;

    const double v000 = vol.at(wi.lo, wj.lo, wk.lo), v001 = vol.at(wi.lo, wj.lo, hi_k);
    const double v010 = vol.at(wi.lo, hi_j, wk.lo), v011 = vol.at(wi.lo, hi_j, hi_k);
    const double v100 = vol.at(hi_i, wj.lo, wk.lo), v101 = vol.at(hi_i, wj.lo, hi_k);
    const double v110 = vol.at(hi_i, hi_j, wk.lo), v111 = vol.at(hi_i, hi_j, hi_k);
    const double fi = wi.frac, fj = wj.frac, fk = wk.frac;

    const double c00 = v000 + (v001 - v000) * fk, c01 = v010 + (v011 - v010) * fk;
    const double c10 = v100 + (v101 - v100) * fk, c11 = v110 + (v111 - v110) * fk;
    const double c0 = c00 + (c01 - c00) * fj, c1 = c10 + (c11 - c10) * fj;

    SampleWithGradient out;
    out.value = c0 + (c1 - c0) * fi;

    const double dk0 = (v001 - v000) + ((v011 - v010) - (v001 - v000)) * fj;
    const double dk1 = (v101 - v100) + ((v111 - v110) - (v101 - v100)) * fj;
    const double dk = dk0 + (dk1 - dk0) * fi;
    const double dj = (c01 - c00) + ((c11 - c10) - (c01 - c00)) * fi;
    const double di = c1 - c0;

    out.gradient.x = (wk.clamped || g.dims[2] == 1) ? 0.0 : dk / g.spacing.x;
    out.gradient.y = (wj.clamped || g.dims[1] == 1) ? 0.0 : dj / g.spacing.y;
    out.gradient.z = (wi.clamped || g.dims[0] == 1) ? 0.0 : di / g.spacing.z;
    return out;
}

bool inside_center_hull(const Grid3 &grid, const Vec3 &p) {
    const auto c = grid.continuous_index(p);
    for (std::size_t a = 0; a < 3; ++a) {
        if (c[a] < 0.0 || c[a] > static_cast<double>(grid.dims[a] - 1)) return false;
    }
    return true;
}

Volume3 crop_patch(const Volume3 &vol, const VoxelIndex &start, const Dims3 &patch_dims) {
    const auto &g = vol.grid();
    const std::array<std::int64_t, 3> s{start.i, start.j, start.k};
    for (std::size_t a = 0; a < 3; ++a) {
        if (patch_dims[a] < 1 || s[a] < 0 || s[a] + patch_dims[a] > g.dims[a]) {
            throw DataError("crop of " + std::to_string(patch_dims[a]) + " voxels at " + std::to_string(s[a]) +
                            " exceeds axis extent " + std::to_string(g.dims[a]));
        }
    }
    Grid3 out = g;
    out.dims = patch_dims;
    out.origin = g.world(start);
    Volume3 res(out);
    for (std::int64_t i = 0; i < patch_dims[0]; ++i)
        for (std::int64_t j = 0; j < patch_dims[1]; ++j)
            for (std::int64_t k = 0; k < patch_dims[2]; ++k) res.at(i, j, k) = vol.at(start.i + i, start.j + j, start.k + k);
    return res;
}

Volume3 pad_to(const Volume3 &vol, const Dims3 &new_dims, double fill) {
    const auto &g = vol.grid();
    for (std::size_t a = 0; a < 3; ++a) {
        if (new_dims[a] < g.dims[a]) throw DataError("pad_to cannot shrink a volume");
    }
    Grid3 out = g;
    out.dims = new_dims;
    Volume3 res(out, fill);
    for (std::int64_t i = 0; i < g.dims[0]; ++i)
        for (std::int64_t j = 0; j < g.dims[1]; ++j)
            for (std::int64_t k = 0; k < g.dims[2]; ++k) res.at(i, j, k) = vol.at(i, j, k);
    return res;
}

void gaussian_filter_axis(std::span<double> values, const Dims3 &dims, int axis, double sigma_voxels) {
    if (sigma_voxels <= 0.0) return;
    const auto n = dims[static_cast<std::size_t>(axis)];
    if (n == 1) return;
    const auto radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma_voxels));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (std::int64_t t = -radius; t <= radius; ++t) {
        kernel[static_cast<std::size_t>(t + radius)] =
            std::exp(-0.5 * static_cast<double>(t * t) / (sigma_voxels * sigma_voxels));
    }

    const std::int64_t stride = axis == 0 ? dims[1] * dims[2] : (axis == 1 ? dims[2] : 1);
    const std::int64_t total = dims[0] * dims[1] * dims[2];
    std::vector<double> line(static_cast<std::size_t>(n));
    for (std::int64_t base = 0; base < total; ++base) {
        // Visit each line once via its first element.
        if ((base / stride) % n != 0) continue;
        for (std::int64_t t = 0; t < n; ++t) line[static_cast<std::size_t>(t)] = values[static_cast<std::size_t>(base + t * stride)];
        for (std::int64_t t = 0; t < n; ++t) {
            double acc = 0.0, wsum = 0.0;
            const std::int64_t lo = std::max<std::int64_t>(0, t - radius);
            const std::int64_t hi = std::min<std::int64_t>(n - 1, t + radius);
            for (std::int64_t u = lo; u <= hi; ++u) {
                const double w = kernel[static_cast<std::size_t>(u - t + radius)];
                acc += w * line[static_cast<std::size_t>(u)];
                wsum += w;
            }
            values[static_cast<std::size_t>(base + t * stride)] = acc / wsum;
        }
    }
}

Volume3 gaussian_smooth(const Volume3 &vol, const Vec3 &sigma_mm) {
    Volume3 out = vol;
    const auto &g = vol.grid();
    gaussian_filter_axis(out.data(), g.dims, 0, sigma_mm.z / g.spacing.z);
    gaussian_filter_axis(out.data(), g.dims, 1, sigma_mm.y / g.spacing.y);
    gaussian_filter_axis(out.data(), g.dims, 2, sigma_mm.x / g.spacing.x);
    return out;
}

} // namespace lmreg
