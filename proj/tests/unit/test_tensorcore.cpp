// Unit tests for the tensor engine: ops against naive loops, gradients against finite
// differences, optimizer arithmetic, and checkpoint round trips.

#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"

#include "lmreg/checkpoint.hpp"
#include "lmreg/gradcheck.hpp"
#include "lmreg/optim.hpp"
#include "lmreg/tensor_ops.hpp"
#include "test_support.hpp"

using namespace lmreg;
using namespace lmreg::tensor;
using Td = Tensor<double>;
using Tf = Tensor<float>;

namespace {

Td random_tensor(SeededRng &rng, Shape shape, bool requires_grad = false) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto &e : v) e = rng.uniform(-1.0, 1.0);
    return Td::from(std::move(shape), std::move(v), requires_grad);
}

// 7-loop direct convolution with zero padding.
std::vector<double> naive_conv(const Td &x, const Td &w, const Td &b) {
    const auto Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4), Co = w.dim(0), ks = w.dim(2);
    const auto pad = ks / 2;
    std::vector<double> out(static_cast<std::size_t>(Co * D * H * W));
    for (std::int64_t co = 0; co < Co; ++co)
        for (std::int64_t d = 0; d < D; ++d)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t q = 0; q < W; ++q) {
                    double s = b.values()[static_cast<std::size_t>(co)];
                    for (std::int64_t ci = 0; ci < Ci; ++ci)
                        for (std::int64_t a = 0; a < ks; ++a)
                            for (std::int64_t c = 0; c < ks; ++c)
                                for (std::int64_t e = 0; e < ks; ++e) {
                                    const auto id = d + a - pad, ih = h + c - pad, iw = q + e - pad;
                                    if (id < 0 || ih < 0 || iw < 0 || id >= D || ih >= H || iw >= W) continue;
                                    s += w.values()[static_cast<std::size_t>((((co * Ci + ci) * ks + a) * ks + c) * ks + e)] *
                                         x.values()[static_cast<std::size_t>(((ci * D + id) * H + ih) * W + iw)];
                                }
                    out[static_cast<std::size_t>(((co * D + d) * H + h) * W + q)] = s;
                }
    return out;
}

} // namespace

TEST_CASE("conv3d") {
    SeededRng rng(1);
    SUBCASE("Dirac kernel reproduces the matching input channel") {
        auto x = random_tensor(rng, {1, 2, 3, 4, 5});
        auto w = Td::zeros({2, 2, 3, 3, 3});
        w.values()[13] = 1.0;                // out 0 <- in 0 center tap
        w.values()[(1 * 2 + 1) * 27 + 13] = 1.0; // out 1 <- in 1
        const auto y = conv3d(x, w, Td::zeros({2}));
        for (std::size_t n = 0; n < x.numel(); ++n) CHECK(y.values()[n] == x.values()[n]);
    }
    SUBCASE("all-ones kernel on a constant volume counts 27 taps inside") {
        auto x = Td::full({1, 1, 4, 4, 4}, 1.0);
        const auto y = conv3d(x, Td::full({1, 1, 3, 3, 3}, 1.0), Td::zeros({1}));
        CHECK(y.values()[static_cast<std::size_t>((1 * 4 + 1) * 4 + 2)] == 27.0);
        CHECK(y.values()[0] == 8.0);
    }
    SUBCASE("matches a naive 7-loop convolution") {
        auto x = random_tensor(rng, {1, 2, 4, 4, 4});
        auto w = random_tensor(rng, {3, 2, 3, 3, 3});
        auto b = random_tensor(rng, {3});
        const auto y = conv3d(x, w, b);
        const auto ref = naive_conv(x, w, b);
        for (std::size_t n = 0; n < ref.size(); ++n) CHECK(std::abs(y.values()[n] - ref[n]) < 1e-6);

        auto w1 = random_tensor(rng, {2, 2, 1, 1, 1});
        auto b1 = random_tensor(rng, {2});
        const auto y1 = conv3d(x, w1, b1);
        const auto ref1 = naive_conv(x, w1, b1);
        for (std::size_t n = 0; n < ref1.size(); ++n) CHECK(std::abs(y1.values()[n] - ref1[n]) < 1e-12);
    }
    SUBCASE("odd widths and a single-column volume") {
        auto x = random_tensor(rng, {1, 1, 3, 2, 1});
        auto w = random_tensor(rng, {2, 1, 3, 3, 3});
        auto b = random_tensor(rng, {2});
        const auto y = conv3d(x, w, b);
        const auto ref = naive_conv(x, w, b);
        for (std::size_t n = 0; n < ref.size(); ++n) CHECK(std::abs(y.values()[n] - ref[n]) < 1e-12);
    }
    SUBCASE("shape errors") {
        auto x = random_tensor(rng, {1, 2, 4, 4, 4});
        CHECK_THROWS_AS(conv3d(x, Td::zeros({3, 1, 3, 3, 3}), Td::zeros({3})), ConfigError);
        CHECK_THROWS_AS(conv3d(x, Td::zeros({3, 2, 5, 5, 5}), Td::zeros({3})), ConfigError);
        CHECK_THROWS_AS(conv3d(x, Td::zeros({3, 2, 3, 3, 3}), Td::zeros({2})), ConfigError);
        CHECK_THROWS_AS(conv3d(Td::zeros({2, 4, 4}), Td::zeros({3, 2, 3, 3, 3}), Td::zeros({3})), ConfigError);
    }
    SUBCASE("float and double agree") {
        auto x = random_tensor(rng, {1, 2, 5, 6, 7});
        auto w = random_tensor(rng, {3, 2, 3, 3, 3});
        auto b = random_tensor(rng, {3});
        auto tof = [](const Td &t) {
            return Tf::from(t.shape(), std::vector<float>(t.values().begin(), t.values().end()));
        };
        const auto yd = conv3d(x, w, b);
        const auto yf = conv3d(tof(x), tof(w), tof(b));
        for (std::size_t n = 0; n < yd.numel(); ++n) CHECK(std::abs(yd.values()[n] - yf.values()[n]) < 1e-5);
    }
}

TEST_CASE("elementwise activations") {
    auto x = Td::from({3}, {-1.0, 0.0, 2.0}, true);
    const auto r = relu(x);
    CHECK(r.values()[0] == 0.0);
    CHECK(r.values()[2] == 2.0);
    const auto s = sigmoid(x);
    CHECK(s.values()[1] == 0.5);
    backward(sum(s));
    CHECK(x.grad()[1] == doctest::Approx(0.25));
    const double h = 1e-4;
    const double fd = (1.0 / (1.0 + std::exp(-h)) - 1.0 / (1.0 + std::exp(h))) / (2 * h);
    CHECK(x.grad()[1] == doctest::Approx(fd).epsilon(1e-8));
}

TEST_CASE("maxpool3d") {
    SUBCASE("constant input routes each window's grad to its first element") {
        auto x = Td::full({1, 1, 2, 2, 4}, 3.0, true);
        const auto y = maxpool3d(x);
        CHECK(y.shape() == Shape{1, 1, 1, 1, 2});
        for (double v : y.values()) CHECK(v == 3.0);
        backward(sum(y));
        for (std::size_t n = 0; n < x.numel(); ++n) CHECK(x.grad()[n] == (n == 0 || n == 2 ? 1.0 : 0.0));
    }
    SUBCASE("increasing ramp picks the last element of each window") {
        std::vector<double> v(4 * 4 * 4);
        std::iota(v.begin(), v.end(), 0.0);
        const auto y = maxpool3d(Td::from({1, 1, 4, 4, 4}, v));
        for (std::int64_t d = 0; d < 2; ++d)
            for (std::int64_t h = 0; h < 2; ++h)
                for (std::int64_t w = 0; w < 2; ++w)
                    CHECK(y.values()[static_cast<std::size_t>((d * 2 + h) * 2 + w)] ==
                          static_cast<double>(((2 * d + 1) * 4 + 2 * h + 1) * 4 + 2 * w + 1));
    }
    SUBCASE("matches a naive windowed max") {
        SeededRng rng(5);
        auto x = random_tensor(rng, {1, 2, 8, 8, 8});
        const auto y = maxpool3d(x);
        for (std::int64_t c = 0; c < 2; ++c)
            for (std::int64_t d = 0; d < 4; ++d)
                for (std::int64_t h = 0; h < 4; ++h)
                    for (std::int64_t w = 0; w < 4; ++w) {
                        double m = -1e9;
                        for (int a = 0; a < 8; ++a)
                            m = std::max(m, x.values()[static_cast<std::size_t>(
                                                ((c * 8 + 2 * d + (a >> 2)) * 8 + 2 * h + ((a >> 1) & 1)) * 8 + 2 * w + (a & 1))]);
                        CHECK(y.values()[static_cast<std::size_t>(((c * 4 + d) * 4 + h) * 4 + w)] == m);
                    }
    }
    CHECK_THROWS_AS(maxpool3d(Td::zeros({1, 1, 3, 4, 4})), ConfigError);
}

TEST_CASE("upsample_trilinear and gather_upsampled") {
    SeededRng rng(9);
    auto x = random_tensor(rng, {1, 3, 3, 4, 5});
    SUBCASE("factor 1 is the identity") {
        const auto y = upsample_trilinear(x, 1);
        for (std::size_t n = 0; n < x.numel(); ++n) CHECK(y.values()[n] == x.values()[n]);
    }
    SUBCASE("constant input stays constant") {
        const auto y = upsample_trilinear(Td::full({1, 2, 2, 3, 2}, 0.7), 4);
        for (double v : y.values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
    }
    SUBCASE("1D profile follows half-pixel sampling") {
        const auto y = upsample_trilinear(Td::from({1, 1, 1, 1, 2}, {0.0, 1.0}), 2);
        // inputs at 0.0, 1.0 -> outputs at source coords 0 (clamped), 0.25, 0.75, 1
        CHECK(y.values()[0] == doctest::Approx(0.0));
        CHECK(y.values()[1] == doctest::Approx(0.25));
        CHECK(y.values()[2] == doctest::Approx(0.75));
        CHECK(y.values()[3] == doctest::Approx(1.0));
    }
    SUBCASE("gather equals upsample then sample, bitwise") {
        for (int factor : {1, 2, 4}) {
            const auto up = upsample_trilinear(x, factor);
            std::vector<VoxelIndex> vox;
            for (int t = 0; t < 30; ++t) {
                vox.push_back({static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(3 * factor))),
                               static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(4 * factor))),
                               static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(5 * factor)))});
            }
            const auto g = gather_upsampled(x, factor, vox);
            const std::int64_t D = 3 * factor, H = 4 * factor, W = 5 * factor;
            for (std::size_t r = 0; r < vox.size(); ++r)
                for (std::int64_t c = 0; c < 3; ++c)
                    CHECK(g.values()[r * 3 + static_cast<std::size_t>(c)] ==
                          up.values()[static_cast<std::size_t>(((c * D + vox[r].i) * H + vox[r].j) * W + vox[r].k)]);
        }
        const std::vector<VoxelIndex> bad{{0, 0, 10}};
        CHECK_THROWS_AS(gather_upsampled(x, 2, bad), DataError);
    }
}

TEST_CASE("linear, pairwise ops and bce") {
    SeededRng rng(3);
    SUBCASE("linear matches a naive matrix product") {
        auto x = random_tensor(rng, {4, 6});
        auto w = random_tensor(rng, {3, 6});
        auto b = random_tensor(rng, {3});
        const auto y = linear(x, w, b);
        for (std::int64_t r = 0; r < 4; ++r)
            for (std::int64_t o = 0; o < 3; ++o) {
                double s = b.values()[static_cast<std::size_t>(o)];
                for (std::int64_t f = 0; f < 6; ++f)
                    s += x.values()[static_cast<std::size_t>(r * 6 + f)] * w.values()[static_cast<std::size_t>(o * 6 + f)];
                CHECK(std::abs(y.values()[static_cast<std::size_t>(r * 3 + o)] - s) < 1e-6);
            }
        CHECK_THROWS_AS(linear(x, random_tensor(rng, {3, 5}), b), ConfigError);
    }
    SUBCASE("pairwise_l2sq") {
        auto a = Td::from({1, 3}, {1.0, 2.0, 3.0});
        CHECK(pairwise_l2sq(a, a).item() == 0.0);
        auto b = Td::from({2, 3}, {1.0, 2.0, 4.0, 0.0, 0.0, 0.0});
        const auto d = pairwise_l2sq(a, b);
        CHECK(d.values()[0] == 1.0);
        CHECK(d.values()[1] == 14.0);
        CHECK_THROWS_AS(pairwise_l2sq(a, Td::zeros({2, 2})), ConfigError);
    }
    SUBCASE("pairwise_abs_diff layout") {
        auto a = Td::from({2, 1}, {1.0, 5.0});
        auto b = Td::from({3, 1}, {0.0, 2.0, 7.0});
        const auto d = pairwise_abs_diff(a, b);
        CHECK(d.shape() == Shape{6, 1});
        const std::vector<double> expect{1, 1, 6, 5, 3, 2};
        for (std::size_t n = 0; n < 6; ++n) CHECK(d.values()[n] == expect[n]);
    }
    SUBCASE("bce values and domain") {
        const std::vector<double> one{1.0};
        CHECK(bce<double>(Td::scalar(0.5), one).item() == doctest::Approx(std::log(2.0)));
        const std::vector<double> t{1.0, 0.0, 1.0};
        auto p = Td::from({3}, {0.9, 0.2, 0.6});
        const double expect = -(0.4 * std::log(0.9) + 1.5 * std::log(0.8) + 0.4 * std::log(0.6)) / 3.0;
        CHECK(bce<double>(p, t, 0.4, 1.5).item() == doctest::Approx(expect).epsilon(1e-12));
        CHECK(bce<double>(Td::from({3}, {1.0, 0.0, 1.0}), t).item() < 1e-6);
        CHECK_THROWS_AS(bce<double>(Td::from({3}, {1.2, 0.0, 0.5}), t), NumericError);
        CHECK_THROWS_AS(bce<double>(Td::from({3}, {std::nan(""), 0.0, 0.5}), t), NumericError);
        const std::vector<double> bad{0.5, 0.0, 1.0};
        CHECK_THROWS_AS(bce<double>(p, bad), DataError);
        CHECK_THROWS_AS(bce<double>(p, one), ConfigError);
    }
}

TEST_CASE("every op passes the finite-difference suite") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        for (const auto &r : tensor_op_gradcheck_suite(seed)) {
            INFO(r.name << " rel err " << r.max_relative_error);
            CHECK(r.checked > 0);
            CHECK(r.passed());
        }
    }
}

TEST_CASE("backward") {
    SeededRng rng(4);
    SUBCASE("sum gives ones, sum of squares gives 2x") {
        auto x = random_tensor(rng, {2, 3}, true);
        backward(sum(x));
        for (double g : x.grad()) CHECK(g == 1.0);
        x.zero_grad();
        backward(sum(mul(x, x)));
        for (std::size_t n = 0; n < x.numel(); ++n) CHECK(x.grad()[n] == 2.0 * x.values()[n]);
    }
    SUBCASE("multi-consumer grads are summed and backward is linear") {
        auto x = random_tensor(rng, {4}, true);
        auto l1 = sum(mul(sigmoid(x), x));
        auto l2 = sum(scale(relu(x), 3.0));
        backward(add(l1, l2));
        const std::vector<double> joint(x.grad().begin(), x.grad().end());
        x.zero_grad();
        backward(l1);
        backward(l2);
        for (std::size_t n = 0; n < 4; ++n) CHECK(x.grad()[n] == doctest::Approx(joint[n]).epsilon(1e-14));
    }
    SUBCASE("errors") {
        auto x = random_tensor(rng, {3}, true);
        CHECK_THROWS_AS(backward(x), NumericError);
        CHECK_THROWS_AS(backward(sum(random_tensor(rng, {3}, false))), NumericError);
        auto y = scale(x, 2.0);
        auto z = sum(y);
        y.node().parents.push_back(z.node_ptr()); // forge a cycle
        CHECK_THROWS_AS(backward(z), NumericError);
        y.node().parents.pop_back();
    }
    SUBCASE("non-finite results are rejected") {
        auto x = Td::from({1}, {1e300});
        CHECK_THROWS_AS(mul(x, x), NumericError);
    }
}

TEST_CASE("he_init") {
    SeededRng rng(7);
    const auto t = he_init<double>({100000}, 2, rng);
    double m = 0, s = 0;
    for (double v : t.values()) m += v;
    m /= 1e5;
    for (double v : t.values()) s += (v - m) * (v - m);
    CHECK(std::sqrt(s / 1e5) == doctest::Approx(1.0).epsilon(0.02));
    SeededRng a(3), b(3);
    const auto wa = he_init<float>({8, 2, 3, 3, 3}, 27 * 2, a);
    const auto wb = he_init<float>({8, 2, 3, 3, 3}, 27 * 2, b);
    CHECK(std::equal(wa.values().begin(), wa.values().end(), wb.values().begin()));
    CHECK_THROWS_AS(he_init<double>({2}, 0, rng), ConfigError);
}

TEST_CASE("adam") {
    SUBCASE("defaults") {
        AdamConfig cfg;
        CHECK(cfg.lr == 1e-4);
        CHECK(cfg.weight_decay == 1e-4);
        CHECK(cfg.beta1 == 0.9);
        CHECK(cfg.beta2 == 0.999);
        CHECK(cfg.epsilon == 1e-8);
    }
    SUBCASE("zero grad and zero decay leave params unchanged") {
        auto p = Td::from({3}, {1.0, -2.0, 0.5}, true);
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        Adam<double> opt({p}, cfg);
        opt.step();
        CHECK(p.values()[0] == 1.0);
        CHECK(p.values()[1] == -2.0);
        CHECK(opt.state().step == 1);
    }
    SUBCASE("first step moves by lr against the gradient sign") {
        auto p = Td::from({3}, {1.0, -2.0, 0.5}, true);
        p.grad()[0] = 0.3;
        p.grad()[1] = -5.0;
        p.grad()[2] = 1e-3;
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        Adam<double> opt({p}, cfg);
        opt.step();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        CHECK(p.values()[0] == doctest::Approx(1.0 - 1e-4 * 0.3 / (0.3 + 1e-8)).epsilon(1e-14));
        CHECK(p.values()[1] == doctest::Approx(-2.0 + 1e-4 * 5.0 / (5.0 + 1e-8)).epsilon(1e-14));
        CHECK(p.values()[2] == doctest::Approx(0.5 - 1e-4 * 1e-3 / (1e-3 + 1e-8)).epsilon(1e-14));
    }
    SUBCASE("decoupled decay shrinks weights before the update") {
        auto p = Td::from({1}, {2.0}, true);
        Adam<double> opt({p}, AdamConfig{});
        opt.step();
        CHECK(p.values()[0] == doctest::Approx(2.0 - 1e-4 * 1e-4 * 2.0).epsilon(1e-15));
    }
    SUBCASE("coupled decay feeds into the moments") {
        auto p = Td::from({1}, {2.0}, true);
        AdamConfig cfg;
        cfg.decoupled_weight_decay = false;
        Adam<double> opt({p}, cfg);
        opt.step();
        CHECK(p.values()[0] == doctest::Approx(2.0 - 1e-4 * 2e-4 / (2e-4 + 1e-8)).epsilon(1e-14));
    }
    SUBCASE("shape change is rejected") {
        std::vector<Td> ps{Td::zeros({2}, true)};
        AdamState<double> st;
        adam_step<double>(ps, st, AdamConfig{});
        ps[0] = Td::zeros({3}, true);
        CHECK_THROWS_AS(adam_step<double>(ps, st, AdamConfig{}), ConfigError);
    }
}

TEST_CASE("checkpoint") {
    SeededRng rng(2);
    Checkpoint ckpt;
    ckpt.config_echo = "net.levels=3\nnet.base_channels=8\n";
    for (int n = 0; n < 3; ++n) {
        CheckpointEntry e{"layer" + std::to_string(n), {2, static_cast<std::int64_t>(n + 1), 3}, {}};
        for (int v = 0; v < 6 * (n + 1); ++v) e.values.push_back(static_cast<float>(rng.normal()));
        ckpt.entries.push_back(e);
    }
    ckpt.entries[0].values[0] = -0.0f;
    ckpt.entries[0].values[1] = 1e-40f; // subnormal
    test_support::TempDir dir;
    const auto path = dir.path() / "net.ckpt";
    save_checkpoint(path, ckpt);
    const auto back = load_checkpoint(path);
    CHECK(back == ckpt);
    CHECK(std::signbit(back.entries[0].values[0]));
    CHECK(serialize_checkpoint(back) == test_support::read_file(path));
    CHECK(back.find("layer2").shape == Shape{2, 3, 3});
    CHECK_THROWS_AS(back.find("nope"), DataError);

    auto bytes = serialize_checkpoint(ckpt);
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
    CHECK_THROWS_AS(parse_checkpoint("XXXXXXXX" + bytes.substr(8)), DataError);
    bytes[8] = 9;
    CHECK_THROWS_AS(parse_checkpoint(bytes), DataError);
}
