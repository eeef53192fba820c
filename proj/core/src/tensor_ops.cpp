#include "lmreg/tensor_ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace lmreg::tensor {

namespace {

void require(bool ok, const std::string &msg) {
    if (!ok) throw ConfigError(msg);
}

template <class T> void require_spatial(const Tensor<T> &x, const char *op) {
    require(x.rank() == 5, std::string(op) + ": expected [N,C,D,H,W], got " + shape_string(x.shape()));
}

template <class T> void require_same_shape(const Tensor<T> &a, const Tensor<T> &b, const char *op) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// Per-axis interpolation table for half-pixel upsampling.
struct AxisTap {
    std::int64_t lo = 0;
    std::int64_t hi = 0;
    double frac = 0.0;
};

AxisTap upsample_tap(std::int64_t out_index, int factor, std::int64_t in_size) {
    double src = (static_cast<double>(out_index) + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    AxisTap t;
    t.lo = std::min<std::int64_t>(static_cast<std::int64_t>(src), in_size - 1);
    t.hi = std::min<std::int64_t>(t.lo + 1, in_size - 1);
    t.frac = src - static_cast<double>(t.lo);
    return t;
}

std::vector<AxisTap> upsample_taps(std::int64_t in_size, int factor) {
    std::vector<AxisTap> taps(static_cast<std::size_t>(in_size * factor));
    for (std::size_t o = 0; o < taps.size(); ++o) taps[o] = upsample_tap(static_cast<std::int64_t>(o), factor, in_size);
    return taps;
}

// The eight corners of a trilinear stencil in fixed order, with weights (wd * wh) * ww.
template <class T> struct Stencil {
    std::array<std::int64_t, 8> offset;
    std::array<T, 8> weight;
};

template <class T> Stencil<T> make_stencil(const AxisTap &td, const AxisTap &th, const AxisTap &tw, std::int64_t h,
                                           std::int64_t w) {
    Stencil<T> s;
    const T fd = static_cast<T>(td.frac), fh = static_cast<T>(th.frac), fw = static_cast<T>(tw.frac);
    int n = 0;
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
                const std::int64_t d = a ? td.hi : td.lo, y = b ? th.hi : th.lo, x = c ? tw.hi : tw.lo;
                s.offset[static_cast<std::size_t>(n)] = (d * h + y) * w + x;
                const T wd = a ? fd : T(1) - fd, wh = b ? fh : T(1) - fh, ww = c ? fw : T(1) - fw;
                s.weight[static_cast<std::size_t>(n)] = (wd * wh) * ww;
                ++n;
            }
    return s;
}

template <class T> T apply_stencil(const Stencil<T> &s, const T *plane) {
    T acc = T(0);
    for (std::size_t n = 0; n < 8; ++n) acc += s.weight[n] * plane[s.offset[n]];
    return acc;
}

template <class T> std::vector<T> elementwise(const Tensor<T> &x, auto f) {
    std::vector<T> out(x.numel());
    const auto v = x.values();
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = f(v[n]);
    return out;
}

// ---- conv3d kernels -------------------------------------------------------------------------

// Forward for one batch item, kernel 3, padding 1. For every output element the additions run in
// the order bias, then (ci, kd, kh, kw) lexicographically, skipping taps outside the volume.
template <class T>
void conv3_forward(const T *in, const T *weight, const T *bias, T *out, std::int64_t ci_n, std::int64_t co_n,
                   std::int64_t D, std::int64_t H, std::int64_t W) {
    constexpr std::int64_t kBlock = 4;
    const std::int64_t plane = D * H * W;
    std::vector<T> acc(static_cast<std::size_t>(kBlock * W));
    for (std::int64_t co0 = 0; co0 < co_n; co0 += kBlock) {
        const std::int64_t nb = std::min(kBlock, co_n - co0);
        for (std::int64_t d = 0; d < D; ++d)
            for (std::int64_t h = 0; h < H; ++h) {
                for (std::int64_t b = 0; b < nb; ++b) std::fill_n(acc.data() + b * W, W, bias[co0 + b]);
                for (std::int64_t ci = 0; ci < ci_n; ++ci) {
                    const T *src = in + ci * plane;
                    for (std::int64_t kd = 0; kd < 3; ++kd) {
                        const std::int64_t id = d + kd - 1;
                        if (id < 0 || id >= D) continue;
                        for (std::int64_t kh = 0; kh < 3; ++kh) {
                            const std::int64_t ih = h + kh - 1;
                            if (ih < 0 || ih >= H) continue;
                            const T *row = src + (id * H + ih) * W;
                            for (std::int64_t b = 0; b < nb; ++b) {
                                const T *k = weight + (((co0 + b) * ci_n + ci) * 27 + kd * 9 + kh * 3);
                                const T k0 = k[0], k1 = k[1], k2 = k[2];
                                T *a = acc.data() + b * W;
                                if (W == 1) {
                                    a[0] += k1 * row[0];
                                    continue;
                                }
                                {
                                    T v = a[0];
                                    v += k1 * row[0];
                                    v += k2 * row[1];
                                    a[0] = v;
                                }
                                for (std::int64_t w = 1; w < W - 1; ++w) {
                                    T v = a[w];
                                    v += k0 * row[w - 1];
                                    v += k1 * row[w];
                                    v += k2 * row[w + 1];
                                    a[w] = v;
                                }
                                {
                                    T v = a[W - 1];
                                    v += k0 * row[W - 2];
                                    v += k1 * row[W - 1];
                                    a[W - 1] = v;
                                }
                            }
                        }
                    }
                }
                for (std::int64_t b = 0; b < nb; ++b)
                    std::copy_n(acc.data() + b * W, W, out + (co0 + b) * plane + (d * H + h) * W);
            }
    }
}

template <class T>
void conv3_backward_input(const T *gout, const T *weight, T *gin, std::int64_t ci_n, std::int64_t co_n,
                          std::int64_t D, std::int64_t H, std::int64_t W) {
    const std::int64_t plane = D * H * W;
    std::vector<T> acc(static_cast<std::size_t>(W));
    for (std::int64_t ci = 0; ci < ci_n; ++ci)
        for (std::int64_t id = 0; id < D; ++id)
            for (std::int64_t ih = 0; ih < H; ++ih) {
                std::fill(acc.begin(), acc.end(), T(0));
                for (std::int64_t co = 0; co < co_n; ++co) {
                    const T *g = gout + co * plane;
                    for (std::int64_t kd = 0; kd < 3; ++kd) {
                        const std::int64_t d = id - kd + 1;
                        if (d < 0 || d >= D) continue;
                        for (std::int64_t kh = 0; kh < 3; ++kh) {
                            const std::int64_t h = ih - kh + 1;
                            if (h < 0 || h >= H) continue;
                            const T *row = g + (d * H + h) * W;
                            const T *k = weight + ((co * ci_n + ci) * 27 + kd * 9 + kh * 3);
                            const T k0 = k[0], k1 = k[1], k2 = k[2];
                            // input w receives k0 * g[w + 1] + k1 * g[w] + k2 * g[w - 1]
                            for (std::int64_t w = 0; w < W; ++w) acc[static_cast<std::size_t>(w)] += k1 * row[w];
                            for (std::int64_t w = 0; w + 1 < W; ++w) acc[static_cast<std::size_t>(w)] += k0 * row[w + 1];
                            for (std::int64_t w = 1; w < W; ++w) acc[static_cast<std::size_t>(w)] += k2 * row[w - 1];
                        }
                    }
                }
                T *dst = gin + ci * plane + (id * H + ih) * W;
                for (std::int64_t w = 0; w < W; ++w) dst[w] += acc[static_cast<std::size_t>(w)];
            }
}

template <class T>
void conv3_backward_weight(const T *gout, const T *in, T *gweight, std::int64_t ci_n, std::int64_t co_n,
                           std::int64_t D, std::int64_t H, std::int64_t W) {
    const std::int64_t plane = D * H * W;
    // One accumulator row per (kd, kh, kw) tap, reduced at the end.
    std::vector<T> acc(static_cast<std::size_t>(27 * W));
    for (std::int64_t co = 0; co < co_n; ++co)
        for (std::int64_t ci = 0; ci < ci_n; ++ci) {
            std::fill(acc.begin(), acc.end(), T(0));
            const T *g = gout + co * plane;
            const T *src = in + ci * plane;
            for (std::int64_t d = 0; d < D; ++d)
                for (std::int64_t kd = 0; kd < 3; ++kd) {
                    const std::int64_t id = d + kd - 1;
                    if (id < 0 || id >= D) continue;
                    for (std::int64_t h = 0; h < H; ++h) {
                        const T *grow = g + (d * H + h) * W;
                        for (std::int64_t kh = 0; kh < 3; ++kh) {
                            const std::int64_t ih = h + kh - 1;
                            if (ih < 0 || ih >= H) continue;
                            const T *row = src + (id * H + ih) * W;
                            T *a0 = acc.data() + (kd * 9 + kh * 3) * W;
                            T *a1 = a0 + W;
                            T *a2 = a1 + W;
                            for (std::int64_t w = 1; w < W; ++w) a0[w] += grow[w] * row[w - 1];
                            for (std::int64_t w = 0; w < W; ++w) a1[w] += grow[w] * row[w];
                            for (std::int64_t w = 0; w + 1 < W; ++w) a2[w] += grow[w] * row[w + 1];
                        }
                    }
                }
            T *dst = gweight + (co * ci_n + ci) * 27;
            for (std::int64_t t = 0; t < 27; ++t) {
                T s = T(0);
                const T *a = acc.data() + t * W;
                for (std::int64_t w = 0; w < W; ++w) s += a[w];
                dst[t] += s;
            }
        }
}

template <class T>
void conv1_forward(const T *in, const T *weight, const T *bias, T *out, std::int64_t ci_n, std::int64_t co_n,
                   std::int64_t plane) {
    for (std::int64_t co = 0; co < co_n; ++co) {
        T *dst = out + co * plane;
        std::fill_n(dst, plane, bias[co]);
        for (std::int64_t ci = 0; ci < ci_n; ++ci) {
            const T k = weight[co * ci_n + ci];
            const T *src = in + ci * plane;
            for (std::int64_t v = 0; v < plane; ++v) dst[v] += k * src[v];
        }
    }
}

} // namespace

// ---- ops ------------------------------------------------------------------------------------

template <class T> Tensor<T> conv3d(const Tensor<T> &input, const Tensor<T> &weight, const Tensor<T> &bias) {
    require_spatial(input, "conv3d");
    require(weight.rank() == 5, "conv3d: weight must be [Cout,Cin,k,k,k], got " + shape_string(weight.shape()));
    const std::int64_t N = input.dim(0), ci_n = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const std::int64_t co_n = weight.dim(0), ksize = weight.dim(2);
    require(weight.dim(1) == ci_n, "conv3d: weight expects " + std::to_string(weight.dim(1)) + " input channels, got " +
                                       std::to_string(ci_n));
    require((ksize == 3 || ksize == 1) && weight.dim(3) == ksize && weight.dim(4) == ksize,
            "conv3d: kernel must be 3x3x3 or 1x1x1, got " + shape_string(weight.shape()));
    require(bias.shape() == Shape{co_n}, "conv3d: bias shape " + shape_string(bias.shape()) + " does not match Cout");

    const std::int64_t plane = D * H * W;
    std::vector<T> out(static_cast<std::size_t>(N * co_n * plane));
    const T *x = input.values().data();
    const T *k = weight.values().data();
    const T *b = bias.values().data();
    for (std::int64_t n = 0; n < N; ++n) {
        if (ksize == 3) {
            conv3_forward(x + n * ci_n * plane, k, b, out.data() + n * co_n * plane, ci_n, co_n, D, H, W);
        } else {
            conv1_forward(x + n * ci_n * plane, k, b, out.data() + n * co_n * plane, ci_n, co_n, plane);
        }
    }

    auto bw = [N, ci_n, co_n, D, H, W, ksize, plane](typename Tensor<T>::Node &self) {
        auto &in = *self.parents[0];
        auto &wt = *self.parents[1];
        auto &bs = *self.parents[2];
        const T *g = self.grad.data();
        if (bs.requires_grad) {
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t co = 0; co < co_n; ++co) {
                    T s = T(0);
                    const T *gp = g + (n * co_n + co) * plane;
                    for (std::int64_t v = 0; v < plane; ++v) s += gp[v];
                    bs.grad[static_cast<std::size_t>(co)] += s;
                }
        }
        for (std::int64_t n = 0; n < N; ++n) {
            const T *gn = g + n * co_n * plane;
            const T *xn = in.value.data() + n * ci_n * plane;
            if (wt.requires_grad) {
                if (ksize == 3) {
                    conv3_backward_weight(gn, xn, wt.grad.data(), ci_n, co_n, D, H, W);
                } else {
                    for (std::int64_t co = 0; co < co_n; ++co)
                        for (std::int64_t ci = 0; ci < ci_n; ++ci) {
                            T s = T(0);
                            const T *gp = gn + co * plane;
                            const T *xp = xn + ci * plane;
                            for (std::int64_t v = 0; v < plane; ++v) s += gp[v] * xp[v];
                            wt.grad[static_cast<std::size_t>(co * ci_n + ci)] += s;
                        }
                }
            }
            if (in.requires_grad) {
                T *gi = in.grad.data() + n * ci_n * plane;
                if (ksize == 3) {
                    conv3_backward_input(gn, wt.value.data(), gi, ci_n, co_n, D, H, W);
                } else {
                    for (std::int64_t ci = 0; ci < ci_n; ++ci)
                        for (std::int64_t co = 0; co < co_n; ++co) {
                            const T kv = wt.value[static_cast<std::size_t>(co * ci_n + ci)];
                            const T *gp = gn + co * plane;
                            T *dst = gi + ci * plane;
                            for (std::int64_t v = 0; v < plane; ++v) dst[v] += kv * gp[v];
                        }
                }
            }
        }
    };
    return Tensor<T>::make_op({N, co_n, D, H, W}, std::move(out), {input, weight, bias}, "conv3d", bw);
}

template <class T> Tensor<T> relu(const Tensor<T> &x) {
    auto out = elementwise(x, [](T v) { return v > T(0) ? v : T(0); });
    return Tensor<T>::make_op(x.shape(), std::move(out), {x}, "relu", [](typename Tensor<T>::Node &self) {
        auto &p = *self.parents[0];
        for (std::size_t n = 0; n < self.grad.size(); ++n)
            if (p.value[n] > T(0)) p.grad[n] += self.grad[n];
    });
}

template <class T> Tensor<T> sigmoid(const Tensor<T> &x) {
    auto out = elementwise(x, [](T v) { return T(1) / (T(1) + std::exp(-v)); });
    return Tensor<T>::make_op(x.shape(), std::move(out), {x}, "sigmoid", [](typename Tensor<T>::Node &self) {
        auto &p = *self.parents[0];
        for (std::size_t n = 0; n < self.grad.size(); ++n) {
            const T s = self.value[n];
            p.grad[n] += self.grad[n] * s * (T(1) - s);
        }
    });
}

template <class T> Tensor<T> maxpool3d(const Tensor<T> &x) {
    require_spatial(x, "maxpool3d");
    const std::int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    require(D % 2 == 0 && H % 2 == 0 && W % 2 == 0, "maxpool3d: spatial dims must be even, got " + shape_string(x.shape()));
    const std::int64_t d2 = D / 2, h2 = H / 2, w2 = W / 2;
    std::vector<T> out(static_cast<std::size_t>(N * C * d2 * h2 * w2));
    std::vector<std::int64_t> argmax(out.size());
    const auto v = x.values();
    std::size_t o = 0;
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const std::int64_t base = nc * D * H * W;
        for (std::int64_t d = 0; d < d2; ++d)
            for (std::int64_t h = 0; h < h2; ++h)
                for (std::int64_t w = 0; w < w2; ++w, ++o) {
                    std::int64_t best = -1;
                    for (std::int64_t a = 0; a < 2; ++a)
                        for (std::int64_t b = 0; b < 2; ++b)
                            for (std::int64_t c = 0; c < 2; ++c) {
                                const std::int64_t idx = base + ((2 * d + a) * H + 2 * h + b) * W + 2 * w + c;
                                if (best < 0 || v[static_cast<std::size_t>(idx)] > v[static_cast<std::size_t>(best)])
                                    best = idx;
                            }
                    argmax[o] = best;
                    out[o] = v[static_cast<std::size_t>(best)];
                }
    }
    return Tensor<T>::make_op({N, C, d2, h2, w2}, std::move(out), {x}, "maxpool3d",
                              [argmax = std::move(argmax)](typename Tensor<T>::Node &self) {
                                  auto &p = *self.parents[0];
                                  for (std::size_t n = 0; n < argmax.size(); ++n)
                                      p.grad[static_cast<std::size_t>(argmax[n])] += self.grad[n];
                              });
}

template <class T> Tensor<T> upsample_trilinear(const Tensor<T> &x, int factor) {
    require_spatial(x, "upsample_trilinear");
    require(factor >= 1, "upsample_trilinear: factor must be >= 1");
    if (factor == 1) {
        return Tensor<T>::make_op(x.shape(), std::vector<T>(x.values().begin(), x.values().end()), {x}, "upsample",
                                  [](typename Tensor<T>::Node &self) {
                                      auto &p = *self.parents[0];
                                      for (std::size_t n = 0; n < self.grad.size(); ++n) p.grad[n] += self.grad[n];
                                  });
    }
    const std::int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const std::int64_t oD = D * factor, oH = H * factor, oW = W * factor;
    const auto td = upsample_taps(D, factor), th = upsample_taps(H, factor), tw = upsample_taps(W, factor);
    std::vector<Stencil<T>> stencils;
    stencils.reserve(static_cast<std::size_t>(oD * oH * oW));
    for (std::int64_t d = 0; d < oD; ++d)
        for (std::int64_t h = 0; h < oH; ++h)
            for (std::int64_t w = 0; w < oW; ++w)
                stencils.push_back(make_stencil<T>(td[static_cast<std::size_t>(d)], th[static_cast<std::size_t>(h)],
                                                   tw[static_cast<std::size_t>(w)], H, W));
    const std::int64_t in_plane = D * H * W, out_plane = oD * oH * oW;
    std::vector<T> out(static_cast<std::size_t>(N * C * out_plane));
    const T *v = x.values().data();
    for (std::int64_t nc = 0; nc < N * C; ++nc)
        for (std::int64_t o = 0; o < out_plane; ++o)
            out[static_cast<std::size_t>(nc * out_plane + o)] =
                apply_stencil(stencils[static_cast<std::size_t>(o)], v + nc * in_plane);

    return Tensor<T>::make_op({N, C, oD, oH, oW}, std::move(out), {x}, "upsample",
                              [stencils = std::move(stencils), N, C, in_plane, out_plane](typename Tensor<T>::Node &self) {
                                  auto &p = *self.parents[0];
                                  for (std::int64_t nc = 0; nc < N * C; ++nc)
                                      for (std::int64_t o = 0; o < out_plane; ++o) {
                                          const T g = self.grad[static_cast<std::size_t>(nc * out_plane + o)];
                                          const auto &s = stencils[static_cast<std::size_t>(o)];
                                          T *dst = p.grad.data() + nc * in_plane;
                                          for (std::size_t n = 0; n < 8; ++n) dst[s.offset[n]] += s.weight[n] * g;
                                      }
                              });
}

template <class T>
Tensor<T> gather_upsampled(const Tensor<T> &x, int factor, std::span<const VoxelIndex> voxels) {
    require_spatial(x, "gather_upsampled");
    require(x.dim(0) == 1, "gather_upsampled: batch size must be 1");
    require(factor >= 1, "gather_upsampled: factor must be >= 1");
    const std::int64_t C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const std::int64_t plane = D * H * W;
    const auto K = static_cast<std::int64_t>(voxels.size());
    std::vector<Stencil<T>> stencils;
    stencils.reserve(voxels.size());
    for (const auto &v : voxels) {
        if (v.i < 0 || v.j < 0 || v.k < 0 || v.i >= D * factor || v.j >= H * factor || v.k >= W * factor) {
            throw DataError("gather_upsampled: voxel (" + std::to_string(v.i) + "," + std::to_string(v.j) + "," +
                            std::to_string(v.k) + ") outside the upsampled extent");
        }
        if (factor == 1) {
            Stencil<T> s{};
            s.offset.fill((v.i * H + v.j) * W + v.k);
            s.weight.fill(T(0));
            s.weight[0] = T(1);
            stencils.push_back(s);
        } else {
            stencils.push_back(make_stencil<T>(upsample_tap(v.i, factor, D), upsample_tap(v.j, factor, H),
                                               upsample_tap(v.k, factor, W), H, W));
        }
    }
    std::vector<T> out(static_cast<std::size_t>(K * C));
    const T *src = x.values().data();
    for (std::int64_t r = 0; r < K; ++r) {
        const auto &s = stencils[static_cast<std::size_t>(r)];
        for (std::int64_t c = 0; c < C; ++c) {
            // factor 1 reads the voxel directly so the value is bit-identical to the feature map
            out[static_cast<std::size_t>(r * C + c)] =
                factor == 1 ? src[c * plane + s.offset[0]] : apply_stencil(s, src + c * plane);
        }
    }
    return Tensor<T>::make_op({K, C}, std::move(out), {x}, "gather_upsampled",
                              [stencils = std::move(stencils), K, C, plane](typename Tensor<T>::Node &self) {
                                  auto &p = *self.parents[0];
                                  for (std::int64_t r = 0; r < K; ++r) {
                                      const auto &s = stencils[static_cast<std::size_t>(r)];
                                      for (std::int64_t c = 0; c < C; ++c) {
                                          const T g = self.grad[static_cast<std::size_t>(r * C + c)];
                                          T *dst = p.grad.data() + c * plane;
                                          for (std::size_t n = 0; n < 8; ++n) dst[s.offset[n]] += s.weight[n] * g;
                                      }
                                  }
                              });
}

template <class T> Tensor<T> concat_channels(const Tensor<T> &a, const Tensor<T> &b) {
    require_spatial(a, "concat_channels");
    require_spatial(b, "concat_channels");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3) && a.dim(4) == b.dim(4),
            "concat_channels: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const std::int64_t N = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::int64_t plane = a.dim(2) * a.dim(3) * a.dim(4);
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(N * (ca + cb) * plane));
    for (std::int64_t n = 0; n < N; ++n) {
        auto sa = a.values().subspan(static_cast<std::size_t>(n * ca * plane), static_cast<std::size_t>(ca * plane));
        auto sb = b.values().subspan(static_cast<std::size_t>(n * cb * plane), static_cast<std::size_t>(cb * plane));
        out.insert(out.end(), sa.begin(), sa.end());
        out.insert(out.end(), sb.begin(), sb.end());
    }
    return Tensor<T>::make_op({N, ca + cb, a.dim(2), a.dim(3), a.dim(4)}, std::move(out), {a, b}, "concat_channels",
                              [N, ca, cb, plane](typename Tensor<T>::Node &self) {
                                  auto &pa = *self.parents[0];
                                  auto &pb = *self.parents[1];
                                  for (std::int64_t n = 0; n < N; ++n) {
                                      const T *g = self.grad.data() + n * (ca + cb) * plane;
                                      if (pa.requires_grad) {
                                          T *dst = pa.grad.data() + n * ca * plane;
                                          for (std::int64_t e = 0; e < ca * plane; ++e) dst[e] += g[e];
                                      }
                                      if (pb.requires_grad) {
                                          T *dst = pb.grad.data() + n * cb * plane;
                                          for (std::int64_t e = 0; e < cb * plane; ++e) dst[e] += g[ca * plane + e];
                                      }
                                  }
                              });
}

template <class T> Tensor<T> linear(const Tensor<T> &x, const Tensor<T> &weight, const Tensor<T> &bias) {
    require(x.rank() == 2 && weight.rank() == 2 && bias.rank() == 1, "linear: expected x [K,F], weight [O,F], bias [O]");
    const std::int64_t K = x.dim(0), F = x.dim(1), O = weight.dim(0);
    require(weight.dim(1) == F && bias.dim(0) == O, "linear: shape mismatch " + shape_string(x.shape()) + " * " +
                                                        shape_string(weight.shape()) + " + " + shape_string(bias.shape()));
    std::vector<T> out(static_cast<std::size_t>(K * O));
    const T *xv = x.values().data();
    const T *wv = weight.values().data();
    const T *bv = bias.values().data();
    for (std::int64_t r = 0; r < K; ++r)
        for (std::int64_t o = 0; o < O; ++o) {
            T acc = bv[o];
            for (std::int64_t f = 0; f < F; ++f) acc += xv[r * F + f] * wv[o * F + f];
            out[static_cast<std::size_t>(r * O + o)] = acc;
        }
    return Tensor<T>::make_op({K, O}, std::move(out), {x, weight, bias}, "linear",
                              [K, F, O](typename Tensor<T>::Node &self) {
                                  auto &px = *self.parents[0];
                                  auto &pw = *self.parents[1];
                                  auto &pb = *self.parents[2];
                                  const T *g = self.grad.data();
                                  for (std::int64_t r = 0; r < K; ++r)
                                      for (std::int64_t o = 0; o < O; ++o) {
                                          const T go = g[r * O + o];
                                          if (go == T(0)) continue;
                                          if (pb.requires_grad) pb.grad[static_cast<std::size_t>(o)] += go;
                                          if (pw.requires_grad)
                                              for (std::int64_t f = 0; f < F; ++f)
                                                  pw.grad[static_cast<std::size_t>(o * F + f)] +=
                                                      go * px.value[static_cast<std::size_t>(r * F + f)];
                                          if (px.requires_grad)
                                              for (std::int64_t f = 0; f < F; ++f)
                                                  px.grad[static_cast<std::size_t>(r * F + f)] +=
                                                      go * pw.value[static_cast<std::size_t>(o * F + f)];
                                      }
                              });
}

template <class T> Tensor<T> bce(const Tensor<T> &pred, std::span<const T> target, T pos_weight, T neg_weight) {
    require(target.size() == pred.numel(), "bce: " + std::to_string(pred.numel()) + " predictions but " +
                                               std::to_string(target.size()) + " targets");
    require(pred.numel() > 0, "bce: empty input");
    constexpr T eps = T(1e-7);
    const auto p = pred.values();
    const auto n = static_cast<T>(p.size());
    T acc = T(0);
    for (std::size_t e = 0; e < p.size(); ++e) {
        if (!(p[e] >= T(0) && p[e] <= T(1))) {
            throw NumericError("bce: prediction " + std::to_string(static_cast<double>(p[e])) + " outside [0, 1]");
        }
        if (target[e] != T(0) && target[e] != T(1)) throw DataError("bce: targets must be 0 or 1");
        const T q = std::clamp(p[e], eps, T(1) - eps);
        acc += target[e] == T(1) ? pos_weight * std::log(q) : neg_weight * std::log(T(1) - q);
    }
    std::vector<T> t(target.begin(), target.end());
    return Tensor<T>::make_op({}, {-acc / n}, {pred}, "bce",
                              [t = std::move(t), pos_weight, neg_weight, n](typename Tensor<T>::Node &self) {
                                  auto &pp = *self.parents[0];
                                  const T g = self.grad[0] / n;
                                  for (std::size_t e = 0; e < t.size(); ++e) {
                                      const T q = pp.value[e];
                                      if (q < eps || q > T(1) - eps) continue;
                                      pp.grad[e] += t[e] == T(1) ? -g * pos_weight / q : g * neg_weight / (T(1) - q);
                                  }
                              });
}

template <class T> Tensor<T> pairwise_l2sq(const Tensor<T> &a, const Tensor<T> &b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
            "pairwise_l2sq: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const std::int64_t K1 = a.dim(0), K2 = b.dim(0), F = a.dim(1);
    std::vector<T> out(static_cast<std::size_t>(K1 * K2));
    const T *av = a.values().data();
    const T *bv = b.values().data();
    for (std::int64_t i = 0; i < K1; ++i)
        for (std::int64_t j = 0; j < K2; ++j) {
            T s = T(0);
            for (std::int64_t f = 0; f < F; ++f) {
                const T d = av[i * F + f] - bv[j * F + f];
                s += d * d;
            }
            out[static_cast<std::size_t>(i * K2 + j)] = s;
        }
    return Tensor<T>::make_op({K1, K2}, std::move(out), {a, b}, "pairwise_l2sq",
                              [K1, K2, F](typename Tensor<T>::Node &self) {
                                  auto &pa = *self.parents[0];
                                  auto &pb = *self.parents[1];
                                  for (std::int64_t i = 0; i < K1; ++i)
                                      for (std::int64_t j = 0; j < K2; ++j) {
                                          const T g = self.grad[static_cast<std::size_t>(i * K2 + j)];
                                          if (g == T(0)) continue;
                                          for (std::int64_t f = 0; f < F; ++f) {
                                              const auto ia = static_cast<std::size_t>(i * F + f);
                                              const auto jb = static_cast<std::size_t>(j * F + f);
                                              const T d = T(2) * g * (pa.value[ia] - pb.value[jb]);
                                              if (pa.requires_grad) pa.grad[ia] += d;
                                              if (pb.requires_grad) pb.grad[jb] -= d;
                                          }
                                      }
                              });
}

template <class T> Tensor<T> pairwise_abs_diff(const Tensor<T> &a, const Tensor<T> &b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
            "pairwise_abs_diff: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const std::int64_t K1 = a.dim(0), K2 = b.dim(0), F = a.dim(1);
    std::vector<T> out(static_cast<std::size_t>(K1 * K2 * F));
    const T *av = a.values().data();
    const T *bv = b.values().data();
    for (std::int64_t i = 0; i < K1; ++i)
        for (std::int64_t j = 0; j < K2; ++j)
            for (std::int64_t f = 0; f < F; ++f)
                out[static_cast<std::size_t>((i * K2 + j) * F + f)] = std::abs(av[i * F + f] - bv[j * F + f]);
    return Tensor<T>::make_op({K1 * K2, F}, std::move(out), {a, b}, "pairwise_abs_diff",
                              [K1, K2, F](typename Tensor<T>::Node &self) {
                                  auto &pa = *self.parents[0];
                                  auto &pb = *self.parents[1];
                                  for (std::int64_t i = 0; i < K1; ++i)
                                      for (std::int64_t j = 0; j < K2; ++j)
                                          for (std::int64_t f = 0; f < F; ++f) {
                                              const auto ia = static_cast<std::size_t>(i * F + f);
                                              const auto jb = static_cast<std::size_t>(j * F + f);
                                              const T diff = pa.value[ia] - pb.value[jb];
                                              if (diff == T(0)) continue;
                                              const T g = self.grad[static_cast<std::size_t>((i * K2 + j) * F + f)];
                                              const T s = diff > T(0) ? g : -g;
                                              if (pa.requires_grad) pa.grad[ia] += s;
                                              if (pb.requires_grad) pb.grad[jb] -= s;
                                          }
                              });
}

template <class T> Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b) {
    require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = a.values()[n] + b.values()[n];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, "add", [](typename Tensor<T>::Node &self) {
        for (int s = 0; s < 2; ++s) {
            auto &p = *self.parents[static_cast<std::size_t>(s)];
            if (!p.requires_grad) continue;
            for (std::size_t n = 0; n < self.grad.size(); ++n) p.grad[n] += self.grad[n];
        }
    });
}

template <class T> Tensor<T> sub(const Tensor<T> &a, const Tensor<T> &b) {
    require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = a.values()[n] - b.values()[n];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, "sub", [](typename Tensor<T>::Node &self) {
        auto &pa = *self.parents[0];
        auto &pb = *self.parents[1];
        for (std::size_t n = 0; n < self.grad.size(); ++n) {
            if (pa.requires_grad) pa.grad[n] += self.grad[n];
            if (pb.requires_grad) pb.grad[n] -= self.grad[n];
        }
    });
}

template <class T> Tensor<T> mul(const Tensor<T> &a, const Tensor<T> &b) {
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = a.values()[n] * b.values()[n];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, "mul", [](typename Tensor<T>::Node &self) {
        auto &pa = *self.parents[0];
        auto &pb = *self.parents[1];
        for (std::size_t n = 0; n < self.grad.size(); ++n) {
            if (pa.requires_grad) pa.grad[n] += self.grad[n] * pb.value[n];
            if (pb.requires_grad) pb.grad[n] += self.grad[n] * pa.value[n];
        }
    });
}

template <class T> Tensor<T> scale(const Tensor<T> &x, T factor) {
    auto out = elementwise(x, [factor](T v) { return v * factor; });
    return Tensor<T>::make_op(x.shape(), std::move(out), {x}, "scale", [factor](typename Tensor<T>::Node &self) {
        auto &p = *self.parents[0];
        for (std::size_t n = 0; n < self.grad.size(); ++n) p.grad[n] += self.grad[n] * factor;
    });
}

template <class T> Tensor<T> add_scalar(const Tensor<T> &x, T offset) {
    auto out = elementwise(x, [offset](T v) { return v + offset; });
    return Tensor<T>::make_op(x.shape(), std::move(out), {x}, "add_scalar", [](typename Tensor<T>::Node &self) {
        auto &p = *self.parents[0];
        for (std::size_t n = 0; n < self.grad.size(); ++n) p.grad[n] += self.grad[n];
    });
}

template <class T> Tensor<T> sum(const Tensor<T> &x) {
    T s = T(0);
    for (T v : x.values()) s += v;
    return Tensor<T>::make_op({}, {s}, {x}, "sum", [](typename Tensor<T>::Node &self) {
        auto &p = *self.parents[0];
        for (auto &g : p.grad) g += self.grad[0];
    });
}

template <class T> Tensor<T> mean(const Tensor<T> &x) {
    require(x.numel() > 0, "mean: empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T> Tensor<T> reshape(const Tensor<T> &x, Shape shape) {
    require(shape_numel(shape) == static_cast<std::int64_t>(x.numel()),
            "reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
    return Tensor<T>::make_op(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()), {x}, "reshape",
                              [](typename Tensor<T>::Node &self) {
                                  auto &p = *self.parents[0];
                                  for (std::size_t n = 0; n < self.grad.size(); ++n) p.grad[n] += self.grad[n];
                              });
}

template <class T> Tensor<T> he_init(Shape shape, std::int64_t fan_in, SeededRng &rng, bool requires_grad) {
    require(fan_in > 0, "he_init: fan_in must be positive");
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto &e : v) e = static_cast<T>(rng.normal() * stddev);
    return Tensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

#define LMREG_TENSOR_OPS(T)                                                                                            \
    template Tensor<T> conv3d(const Tensor<T> &, const Tensor<T> &, const Tensor<T> &);                               \
    template Tensor<T> relu(const Tensor<T> &);                                                                        \
    template Tensor<T> sigmoid(const Tensor<T> &);                                                                     \
    template Tensor<T> maxpool3d(const Tensor<T> &);                                                                   \
    template Tensor<T> upsample_trilinear(const Tensor<T> &, int);                                                     \
    template Tensor<T> gather_upsampled(const Tensor<T> &, int, std::span<const VoxelIndex>);                          \
    template Tensor<T> concat_channels(const Tensor<T> &, const Tensor<T> &);                                          \
    template Tensor<T> linear(const Tensor<T> &, const Tensor<T> &, const Tensor<T> &);                                \
    template Tensor<T> bce(const Tensor<T> &, std::span<const T>, T, T);                                               \
    template Tensor<T> pairwise_l2sq(const Tensor<T> &, const Tensor<T> &);                                            \
    template Tensor<T> pairwise_abs_diff(const Tensor<T> &, const Tensor<T> &);                                        \
    template Tensor<T> add(const Tensor<T> &, const Tensor<T> &);                                                      \
    template Tensor<T> sub(const Tensor<T> &, const Tensor<T> &);                                                      \
    template Tensor<T> mul(const Tensor<T> &, const Tensor<T> &);                                                      \
    template Tensor<T> scale(const Tensor<T> &, T);                                                                    \
    template Tensor<T> add_scalar(const Tensor<T> &, T);                                                               \
    template Tensor<T> sum(const Tensor<T> &);                                                                         \
    template Tensor<T> mean(const Tensor<T> &);                                                                        \
    template Tensor<T> reshape(const Tensor<T> &, Shape);                                                              \
    template Tensor<T> he_init(Shape, std::int64_t, SeededRng &, bool);

LMREG_TENSOR_OPS(float)
LMREG_TENSOR_OPS(double)

#undef LMREG_TENSOR_OPS

} // namespace lmreg::tensor
