#include <algorithm>
#include <cmath>

#include "lmreg/registration.hpp"

namespace lmreg::reg {

namespace {

// Histogram bins reserved on each side so the cubic window never leaves the table.
constexpr int kPadding = 2;

} // namespace

IntensityRange robust_range(const Volume3 &vol, double lo_percent, double hi_percent) {
    if (!(lo_percent >= 0.0 && lo_percent < hi_percent && hi_percent <= 100.0))
        throw ConfigError("robust_range: need 0 <= lo < hi <= 100");
    std::vector<double> v(vol.data().begin(), vol.data().end());
    std::sort(v.begin(), v.end());
    auto rank = [&](double pct) {
        const auto r = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(v.size()) - 1e-9));
        return v[std::min(v.size() - 1, r == 0 ? 0 : r - 1)];
    };
    return {rank(lo_percent), rank(hi_percent)};
}

MattesMutualInformation::MattesMutualInformation(Volume3 target, Volume3 source, int bins)
    : target_(std::move(target)), source_(std::move(source)), bins_(bins) {
    if (bins_ < 2 * kPadding + 2) throw ConfigError("mattes_mi: histogram needs at least 6 bins");
    target_range_ = robust_range(target_);
    source_range_ = robust_range(source_);
    for (const auto &r : {target_range_, source_range_}) {
        if (!(r.hi - r.lo > 1e-12 * std::max(1.0, std::abs(r.hi))))
            throw DataError("mattes_mi: degenerate intensity range");
    }
}

MattesMutualInformation::Evaluation MattesMutualInformation::evaluate(std::span<const Vec3> samples,
                                                                       std::span<const Vec3> mapped,
                                                                       bool with_gradient) const {
    if (samples.size() != mapped.size()) throw ConfigError("mattes_mi: sample and mapped point counts differ");
    const auto B = static_cast<std::size_t>(bins_);
    const double usable = static_cast<double>(bins_ - 2 * kPadding);
    const double target_width = (target_range_.hi - target_range_.lo) / usable;
    const double source_width = (source_range_.hi - source_range_.lo) / usable;
    const double zeta_max = static_cast<double>(bins_ - kPadding) - 1e-9;

    struct SampleBins {
        std::size_t fixed_bin = 0;
        std::size_t first = 0; // first of four source bins
        double u = 0.0;
        bool clamped = false;
        Vec3 gradient;
    };
    std::vector<SampleBins> info(samples.size());

    Evaluation ev;
    ev.used.assign(samples.size(), 0);
    std::vector<double> joint(B * B, 0.0);
    for (std::size_t n = 0; n < samples.size(); ++n) {
        if (!inside_center_hull(source_.grid(), mapped[n])) continue;
        const double f = trilinear_sample(target_, samples[n]);
        const auto m = trilinear_sample_gradient(source_, mapped[n]);
        auto &s = info[n];
        const double zf = std::clamp((f - target_range_.lo) / target_width + kPadding, double{kPadding}, zeta_max);
        s.fixed_bin = static_cast<std::size_t>(std::floor(zf));
        double zm = (m.value - source_range_.lo) / source_width + kPadding;
        s.clamped = zm < kPadding || zm > zeta_max;
        zm = std::clamp(zm, double{kPadding}, zeta_max);
        const double base = std::floor(zm);
        s.first = static_cast<std::size_t>(base) - 1;
        s.u = zm - base;
        s.gradient = m.gradient;
        const auto w = cubic_weights(s.u);
        for (std::size_t b = 0; b < 4; ++b) joint[s.fixed_bin * B + s.first + b] += w[b];
        ev.used[n] = 1;
        ++ev.count;
    }
    if (ev.count == 0) throw DataError("mattes_mi: no sample maps inside the source image");

    const double inv_n = 1.0 / static_cast<double>(ev.count);
    for (auto &p : joint) p *= inv_n;
    std::vector<double> pt(B, 0.0), ps(B, 0.0);
    for (std::size_t l = 0; l < B; ++l)
        for (std::size_t m = 0; m < B; ++m) {
            pt[l] += joint[l * B + m];
            ps[m] += joint[l * B + m];
        }
    double mi = 0.0;
    for (std::size_t l = 0; l < B; ++l)
        for (std::size_t m = 0; m < B; ++m) {
            const double p = joint[l * B + m];
            if (p > 0.0) mi += p * std::log(p / (pt[l] * ps[m]));
        }
    ev.value = -mi;
    if (!std::isfinite(ev.value)) throw NumericError("mattes_mi: non-finite value");
    if (!with_gradient) return ev;

    // d MI / d p(l, m) reduces to log(p(l, m) / p_source(m)) because both marginals sum to one.
    std::vector<double> log_ratio(B * B, 0.0);
    for (std::size_t l = 0; l < B; ++l)
        for (std::size_t m = 0; m < B; ++m) {
            const double p = joint[l * B + m];
            if (p > 0.0) log_ratio[l * B + m] = std::log(p / ps[m]);
        }
    ev.force.assign(samples.size(), Vec3{});
    for (std::size_t n = 0; n < samples.size(); ++n) {
        if (!ev.used[n] || info[n].clamped) continue;
        const auto &s = info[n];
        const auto dw = cubic_first_derivative(s.u);
        double d_zeta = 0.0;
        for (std::size_t b = 0; b < 4; ++b) d_zeta += dw[b] * log_ratio[s.fixed_bin * B + s.first + b];
        // value = -MI; d zeta / d y = grad source / bin width
        ev.force[n] = s.gradient * (-d_zeta * inv_n / source_width);
    }
    return ev;
}

namespace {

// Calls fn(control index, weight) over the 64 control points of a stencil.
template <class Fn> void for_each_control(const BSplineTransform &t, const BSplineStencil &st, Fn &&fn) {
    for (std::int64_t cz = 0; cz < 4; ++cz)
        for (std::int64_t cy = 0; cy < 4; ++cy) {
            const double wzy = st.w[2][static_cast<std::size_t>(cz)] * st.w[1][static_cast<std::size_t>(cy)];
            const std::size_t row = t.control_index(st.first[0], st.first[1] + cy, st.first[2] + cz);
            for (std::size_t cx = 0; cx < 4; ++cx) fn(row + cx, wzy * st.w[0][cx]);
        }
}

} // namespace

MetricResult mattes_mi(const MattesMutualInformation &metric, const BSplineTransform &transform,
                       std::span<const Vec3> samples, bool with_gradient) {
    std::vector<Vec3> mapped;
    std::vector<BSplineStencil> stencils;
    mapped.reserve(samples.size());
    stencils.reserve(samples.size());
    const auto coeffs = transform.coefficients();
    for (const auto &x : samples) {
        stencils.push_back(transform.stencil(x));
        Vec3 d{};
        for_each_control(transform, stencils.back(), [&](std::size_t idx, double w) { d += coeffs[idx] * w; });
        mapped.push_back(x + d);
    }
    const auto ev = metric.evaluate(samples, mapped, with_gradient);
    MetricResult out;
    out.value = ev.value;
    out.used = ev.count;
    if (!with_gradient) return out;
    out.gradient.assign(transform.parameter_count(), 0.0);
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const Vec3 f = ev.force[n];
        if (f == Vec3{}) continue;
        for_each_control(transform, stencils[n], [&](std::size_t idx, double w) {
            out.gradient[3 * idx] += f.x * w;
            out.gradient[3 * idx + 1] += f.y * w;
            out.gradient[3 * idx + 2] += f.z * w;
        });
    }
    return out;
}

MetricResult bending_energy(const BSplineTransform &transform, std::span<const Vec3> samples, bool with_gradient) {
    MetricResult out;
    if (with_gradient) out.gradient.assign(transform.parameter_count(), 0.0);
    if (samples.empty()) return out;
    const auto coeffs = transform.coefficients();
    const double inv_n = 1.0 / static_cast<double>(samples.size());
    std::array<std::array<double, 6>, 64> basis{};
    std::array<std::size_t, 64> index{};
    for (const auto &x : samples) {
        const auto st = transform.stencil(x);
        // Second-derivative basis per control point: xx, yy, zz, xy, xz, yz.
        std::size_t n = 0;
        for (std::size_t cz = 0; cz < 4; ++cz)
            for (std::size_t cy = 0; cy < 4; ++cy) {
                const std::size_t row = transform.control_index(st.first[0], st.first[1] + static_cast<std::int64_t>(cy),
                                                                st.first[2] + static_cast<std::int64_t>(cz));
                for (std::size_t cx = 0; cx < 4; ++cx, ++n) {
                    const double wx = st.w[0][cx], wy = st.w[1][cy], wz = st.w[2][cz];
                    const double dx = st.dw[0][cx], dy = st.dw[1][cy], dz = st.dw[2][cz];
                    basis[n] = {st.d2w[0][cx] * wy * wz, wx * st.d2w[1][cy] * wz, wx * wy * st.d2w[2][cz],
                                dx * dy * wz,           dx * wy * dz,           wx * dy * dz};
                    index[n] = row + cx;
                }
            }
        std::array<std::array<double, 6>, 3> h{};
        for (std::size_t q = 0; q < 64; ++q) {
            const Vec3 &c = coeffs[index[q]];
            for (std::size_t t = 0; t < 6; ++t) {
                h[0][t] += c.x * basis[q][t];
                h[1][t] += c.y * basis[q][t];
                h[2][t] += c.z * basis[q][t];
            }
        }
        for (const auto &comp : h)
            for (double v : comp) out.value += v * v * inv_n;
        if (!with_gradient) continue;
        for (std::size_t q = 0; q < 64; ++q) {
            for (std::size_t comp = 0; comp < 3; ++comp) {
                double g = 0.0;
                for (std::size_t t = 0; t < 6; ++t) g += h[comp][t] * basis[q][t];
                out.gradient[3 * index[q] + comp] += 2.0 * g * inv_n;
            }
        }
    }
    out.used = samples.size();
    return out;
}

MetricResult corresponding_points_metric(const BSplineTransform &transform, const CorrespondenceSet &pairs,
                                         bool with_gradient) {
    MetricResult out;
    if (with_gradient) out.gradient.assign(transform.parameter_count(), 0.0);
    if (pairs.size() == 0) return out;
    const auto coeffs = transform.coefficients();
    const double inv_p = 1.0 / static_cast<double>(pairs.size());
    for (const auto &c : pairs.pairs) {
        const auto st = transform.stencil(c.target);
        Vec3 d{};
        for_each_control(transform, st, [&](std::size_t idx, double w) { d += coeffs[idx] * w; });
        const Vec3 residual = c.target + d - c.source;
        const double len = residual.norm();
        out.value += len * inv_p;
        if (!with_gradient || len == 0.0) continue;
        const Vec3 unit = residual * (inv_p / len);
        for_each_control(transform, st, [&](std::size_t idx, double w) {
            out.gradient[3 * idx] += unit.x * w;
            out.gradient[3 * idx + 1] += unit.y * w;
            out.gradient[3 * idx + 2] += unit.z * w;
        });
    }
    out.used = pairs.size();
    return out;
}

std::vector<Vec3> random_coordinates(SeededRng &rng, const Grid3 &grid, std::size_t count) {
    const Vec3 lo = grid.lower_center(), hi = grid.upper_center();
    std::vector<Vec3> out(count);
    for (auto &p : out) {
        p.x = rng.uniform(lo.x, hi.x);
        p.y = rng.uniform(lo.y, hi.y);
        p.z = rng.uniform(lo.z, hi.z);
    }
    return out;
}

} // namespace lmreg::reg
