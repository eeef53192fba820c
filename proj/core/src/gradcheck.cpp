#include "lmreg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lmreg/tensor_ops.hpp"

namespace lmreg {

using tensor::Tensor;
using Td = Tensor<double>;

double relative_gradient_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_tensor_gradient(const std::string &name, const LossOfLeaves &loss, std::vector<Td> leaves,
                                      double h, std::size_t max_checks, std::uint64_t seed, double tolerance) {
    for (auto &l : leaves) l.zero_grad();
    tensor::backward(loss(leaves));

    struct Coord {
        std::size_t leaf, index;
    };
    std::vector<Coord> coords;
    for (std::size_t l = 0; l < leaves.size(); ++l) {
        if (!leaves[l].requires_grad()) continue;
        for (std::size_t e = 0; e < leaves[l].numel(); ++e) coords.push_back({l, e});
    }
    if (max_checks > 0 && coords.size() > max_checks) {
        SeededRng rng(seed);
        for (std::size_t n = 0; n < max_checks; ++n) {
            std::swap(coords[n], coords[n + rng.uniform_index(coords.size() - n)]);
        }
        coords.resize(max_checks);
    }

    GradCheckResult result{name, 0.0, coords.size(), tolerance};
    for (const auto &c : coords) {
        auto values = leaves[c.leaf].values();
        const double saved = values[c.index];
        values[c.index] = saved + h;
        const double up = loss(leaves).item();
        values[c.index] = saved - h;
        const double down = loss(leaves).item();
        values[c.index] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double analytic = leaves[c.leaf].grad()[c.index];
        result.max_relative_error = std::max(result.max_relative_error, relative_gradient_error(analytic, numeric));
    }
    return result;
}

GradCheckResult check_function_gradient(const std::string &name, const std::function<double(std::span<const double>)> &f,
                                        std::span<const double> x, std::span<const double> analytic,
                                        std::span<const std::size_t> coords, double h, double tolerance) {
    std::vector<double> p(x.begin(), x.end());
    GradCheckResult result{name, 0.0, coords.size(), tolerance};
    for (auto c : coords) {
        const double saved = p[c];
        p[c] = saved + h;
        const double up = f(p);
        p[c] = saved - h;
        const double down = f(p);
        p[c] = saved;
        result.max_relative_error =
            std::max(result.max_relative_error, relative_gradient_error(analytic[c], (up - down) / (2.0 * h)));
    }
    return result;
}

namespace {

Td random_tensor(SeededRng &rng, tensor::Shape shape, double lo, double hi, bool requires_grad = true) {
    std::vector<double> v(static_cast<std::size_t>(tensor::shape_numel(shape)));
    for (auto &e : v) e = rng.uniform(lo, hi);
    return Td::from(std::move(shape), std::move(v), requires_grad);
}

// Values with |x| >= margin so kinks sit far outside the finite-difference step.
Td away_from_zero(SeededRng &rng, tensor::Shape shape, double margin) {
    auto t = random_tensor(rng, std::move(shape), margin, 1.0);
    for (auto &e : t.values())
        if (rng.uniform() < 0.5) e = -e;
    return t;
}

// Projects an op output to a scalar with fixed random weights.
Td project(const Td &out, const Td &weights) { return tensor::sum(tensor::mul(out, weights)); }

Td weights_like(SeededRng &rng, const tensor::Shape &shape) { return random_tensor(rng, shape, -1.0, 1.0, false); }

} // namespace

std::vector<GradCheckResult> tensor_op_gradcheck_suite(std::uint64_t seed, double tolerance) {
    using namespace tensor;
    SeededRng rng(seed);
    std::vector<GradCheckResult> out;
    const double h = 1e-6;

    {
        auto x = random_tensor(rng, {1, 2, 4, 4, 4}, -1, 1);
        auto w = random_tensor(rng, {3, 2, 3, 3, 3}, -0.5, 0.5);
        auto b = random_tensor(rng, {3}, -0.5, 0.5);
        auto r = weights_like(rng, {1, 3, 4, 4, 4});
        out.push_back(check_tensor_gradient(
            "conv3d_k3", [&](std::span<const Td> l) { return project(conv3d(l[0], l[1], l[2]), r); }, {x, w, b}, h, 0,
            seed, tolerance));
    }
    {
        auto x = random_tensor(rng, {1, 3, 2, 3, 4}, -1, 1);
        auto w = random_tensor(rng, {2, 3, 1, 1, 1}, -0.5, 0.5);
        auto b = random_tensor(rng, {2}, -0.5, 0.5);
        auto r = weights_like(rng, {1, 2, 2, 3, 4});
        out.push_back(check_tensor_gradient(
            "conv3d_k1", [&](std::span<const Td> l) { return project(conv3d(l[0], l[1], l[2]), r); }, {x, w, b}, h, 0,
            seed, tolerance));
    }
    {
        auto x = away_from_zero(rng, {2, 3, 4}, 0.05);
        auto r = weights_like(rng, {2, 3, 4});
        out.push_back(check_tensor_gradient(
            "relu", [&](std::span<const Td> l) { return project(relu(l[0]), r); }, {x}, h, 0, seed, tolerance));
    }
    {
        auto x = random_tensor(rng, {2, 3, 4}, -3, 3);
        auto r = weights_like(rng, {2, 3, 4});
        out.push_back(check_tensor_gradient(
            "sigmoid", [&](std::span<const Td> l) { return project(sigmoid(l[0]), r); }, {x}, h, 0, seed, tolerance));
    }
    {
        // Distinct values separated by far more than h so the argmax is stable.
        std::vector<double> v(2 * 4 * 4 * 4);
        std::iota(v.begin(), v.end(), 0.0);
        for (std::size_t n = v.size(); n > 1; --n) std::swap(v[n - 1], v[rng.uniform_index(n)]);
        for (auto &e : v) e *= 0.01;
        auto x = Td::from({1, 2, 4, 4, 4}, v, true);
        auto r = weights_like(rng, {1, 2, 2, 2, 2});
        out.push_back(check_tensor_gradient(
            "maxpool3d", [&](std::span<const Td> l) { return project(maxpool3d(l[0]), r); }, {x}, h, 0, seed, tolerance));
    }
    {
        auto x = random_tensor(rng, {1, 2, 2, 3, 3}, -1, 1);
        auto r = weights_like(rng, {1, 2, 4, 6, 6});
        out.push_back(check_tensor_gradient(
            "upsample_trilinear", [&](std::span<const Td> l) { return project(upsample_trilinear(l[0], 2), r); }, {x}, h,
            0, seed, tolerance));
    }
    {
        auto x = random_tensor(rng, {1, 3, 2, 2, 2}, -1, 1);
        const std::vector<VoxelIndex> vox{{0, 0, 0}, {3, 2, 1}, {5, 7, 6}, {4, 4, 4}};
        auto r = weights_like(rng, {4, 3});
        out.push_back(check_tensor_gradient(
            "gather_upsampled", [&](std::span<const Td> l) { return project(gather_upsampled(l[0], 4, vox), r); }, {x},
            h, 0, seed, tolerance));
    }
    {
        auto a = random_tensor(rng, {1, 2, 2, 2, 3}, -1, 1);
        auto b = random_tensor(rng, {1, 1, 2, 2, 3}, -1, 1);
        auto r = weights_like(rng, {1, 3, 2, 2, 3});
        out.push_back(check_tensor_gradient(
            "concat_channels", [&](std::span<const Td> l) { return project(concat_channels(l[0], l[1]), r); }, {a, b},
            h, 0, seed, tolerance));
    }
    {
        auto x = random_tensor(rng, {5, 4}, -1, 1);
        auto w = random_tensor(rng, {3, 4}, -1, 1);
        auto b = random_tensor(rng, {3}, -1, 1);
        auto r = weights_like(rng, {5, 3});
        out.push_back(check_tensor_gradient(
            "linear", [&](std::span<const Td> l) { return project(linear(l[0], l[1], l[2]), r); }, {x, w, b}, h, 0, seed,
            tolerance));
    }
    {
        auto p = random_tensor(rng, {12}, 0.1, 0.9);
        std::vector<double> t(12);
        for (std::size_t n = 0; n < t.size(); ++n) t[n] = static_cast<double>(n % 3 == 0);
        out.push_back(check_tensor_gradient(
            "bce", [&](std::span<const Td> l) { return bce<double>(l[0], t, 0.7, 0.3); }, {p}, h, 0, seed, tolerance));
    }
    {
        auto a = random_tensor(rng, {4, 5}, -1, 1);
        auto b = random_tensor(rng, {3, 5}, -1, 1);
        auto r = weights_like(rng, {4, 3});
        out.push_back(check_tensor_gradient(
            "pairwise_l2sq", [&](std::span<const Td> l) { return project(pairwise_l2sq(l[0], l[1]), r); }, {a, b}, h, 0,
            seed, tolerance));
    }
    {
        // Coordinates on a 0.1 lattice plus distinct offsets keep |a - b| away from zero.
        auto a = random_tensor(rng, {3, 4}, -1, 1);
        auto b = random_tensor(rng, {2, 4}, -1, 1);
        for (auto &e : a.values()) e = std::round(e * 10.0) / 10.0 + 0.03;
        for (auto &e : b.values()) e = std::round(e * 10.0) / 10.0 - 0.02;
        auto r = weights_like(rng, {6, 4});
        out.push_back(check_tensor_gradient(
            "pairwise_abs_diff", [&](std::span<const Td> l) { return project(pairwise_abs_diff(l[0], l[1]), r); },
            {a, b}, h, 0, seed, tolerance));
    }
    {
        auto a = random_tensor(rng, {2, 3}, -1, 1);
        auto b = random_tensor(rng, {2, 3}, -1, 1);
        auto r = weights_like(rng, {2, 3});
        out.push_back(check_tensor_gradient(
            "add_sub_mul",
            [&](std::span<const Td> l) {
                return project(sub(mul(add(l[0], l[1]), l[0]), add_scalar(scale(l[1], 0.5), 2.0)), r);
            },
            {a, b}, h, 0, seed, tolerance));
    }
    {
        auto x = random_tensor(rng, {2, 3, 2}, -1, 1);
        out.push_back(check_tensor_gradient(
            "sum_mean_reshape",
            [&](std::span<const Td> l) {
                auto sq = mul(l[0], l[0]);
                return add(sum(reshape(sq, {12})), mean(scale(l[0], 3.0)));
            },
            {x}, h, 0, seed, tolerance));
    }
    return out;
}

} // namespace lmreg
