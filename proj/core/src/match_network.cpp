#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lmreg/dcnn_match.hpp"
#include "lmreg/log.hpp"
#include "lmreg/tensor_ops.hpp"

namespace lmreg::match {

using namespace lmreg::tensor;

// ---- variants and configuration --------------------------------------------------------------

LossVariant LossVariant::of(LossKind kind) {
    LossVariant v;
    v.kind = kind;
    v.m_pos = kind == LossKind::Hinge01CE ? 0.1 : (kind == LossKind::Hinge02CE ? 0.2 : 0.0);
    v.m_neg = 1.0;
    return v;
}

LossVariant LossVariant::parse(const std::string &name) {
    std::string s;
    // Case and separators are ignored, so "hinge01-ce" and "Hinge01CE" name the same variant.
    for (char ch : name)
        if (ch != '-' && ch != '_') s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    if (s == "hinge") return of(LossKind::Hinge);
    if (s == "ce") return of(LossKind::CE);
    if (s == "hingece" || s == "hinge+ce") return of(LossKind::HingeCE);
    if (s == "hinge01ce" || s == "hinge0.1ce") return of(LossKind::Hinge01CE);
    if (s == "hinge02ce" || s == "hinge0.2ce") return of(LossKind::Hinge02CE);
    throw ConfigError("unknown loss variant '" + name + "' (expected Hinge, CE, HingeCE, Hinge01CE, Hinge02CE)");
}

std::string LossVariant::name() const {
    switch (kind) {
    case LossKind::Hinge: return "Hinge";
    case LossKind::CE: return "CE";
    case LossKind::HingeCE: return "HingeCE";
    case LossKind::Hinge01CE: return "Hinge01CE";
    case LossKind::Hinge02CE: return "Hinge02CE";
    }
    return "?";
}

void LossVariant::validate() const {
    if (!(m_pos < m_neg)) throw ConfigError("loss variant needs m_pos < m_neg");
    if (m_pos != of(kind).m_pos || m_neg != 1.0) {
        throw ConfigError("loss variant " + name() + " requires m_pos = " + std::to_string(of(kind).m_pos) + ", m_neg = 1");
    }
}

void NetworkConfig::validate() const {
    if (levels < 1 || levels > 6) throw ConfigError("net.levels must be in [1, 6]");
    if (base_channels < 1) throw ConfigError("net.base_channels must be positive");
    if (top_k < 1) throw ConfigError("net.top_k must be positive");
    const std::int64_t div = std::int64_t{1} << levels;
    for (auto d : patch_dims) {
        if (d <= 0 || d % div != 0) {
            throw ConfigError("net.patch_dims must be positive multiples of 2^levels = " + std::to_string(div));
        }
    }
    if (sampling_margin < 0) throw ConfigError("net.sampling_margin must be >= 0");
    std::int64_t inner = 1;
    for (auto d : patch_dims) inner *= std::max<std::int64_t>(0, d - 2 * std::int64_t{sampling_margin});
    if (static_cast<std::int64_t>(top_k) > inner) {
        throw ConfigError("net.top_k exceeds the " + std::to_string(inner) + " patch voxels inside net.sampling_margin");
    }
    if (!(inference_threshold > 0.0 && inference_threshold < 1.0)) throw ConfigError("net.inference_threshold must be in (0, 1)");
    if (!(gt_radius_voxels >= 0.0)) throw ConfigError("net.gt_radius_voxels must be non-negative");
    if (max_landmarks_per_patch < 0) throw ConfigError("net.max_landmarks_per_patch must be >= 0");
}

std::string NetworkConfig::echo() const {
    std::ostringstream os;
    os.precision(17);
    os << "net.levels=" << levels << '\n'
       << "net.base_channels=" << base_channels << '\n'
       << "net.top_k=" << top_k << '\n'
       << "net.patch_dims=" << patch_dims[0] << ' ' << patch_dims[1] << ' ' << patch_dims[2] << '\n'
       << "net.inference_threshold=" << inference_threshold << '\n'
       << "net.gt_radius_voxels=" << gt_radius_voxels << '\n'
       << "net.max_landmarks_per_patch=" << max_landmarks_per_patch << '\n'
       << "net.sampling_margin=" << sampling_margin << '\n';
    return os.str();
}

namespace {

NetworkConfig parse_echo(const std::string &text) {
    NetworkConfig cfg;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        std::istringstream val(line.substr(eq + 1));
        if (key == "net.levels") val >> cfg.levels;
        else if (key == "net.base_channels") val >> cfg.base_channels;
        else if (key == "net.top_k") val >> cfg.top_k;
        else if (key == "net.patch_dims") val >> cfg.patch_dims[0] >> cfg.patch_dims[1] >> cfg.patch_dims[2];
        else if (key == "net.inference_threshold") val >> cfg.inference_threshold;
        else if (key == "net.gt_radius_voxels") val >> cfg.gt_radius_voxels;
        else if (key == "net.max_landmarks_per_patch") val >> cfg.max_landmarks_per_patch;
        else if (key == "net.sampling_margin") val >> cfg.sampling_margin;
        else continue;
        if (val.fail()) throw DataError("checkpoint config: bad value for " + key);
    }
    return cfg;
}

} // namespace

std::vector<VoxelIndex> LandmarkSet::indices() const {
    std::vector<VoxelIndex> out;
    out.reserve(entries.size());
    for (const auto &e : entries) out.push_back(e.index);
    return out;
}

// ---- network ----------------------------------------------------------------------------------

template <class T> MatchNetwork<T>::MatchNetwork(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    SeededRng rng(seed);
    const int L = cfg_.levels;
    int in = 1;
    for (int l = 0; l < L; ++l) {
        add_conv("down" + std::to_string(l) + ".conv0", in, cfg_.channels(l), 3, rng);
        add_conv("down" + std::to_string(l) + ".conv1", cfg_.channels(l), cfg_.channels(l), 3, rng);
        in = cfg_.channels(l);
    }
    for (int l = L - 2; l >= 0; --l) {
        add_conv("up" + std::to_string(l) + ".conv0", cfg_.channels(l + 1) + cfg_.channels(l), cfg_.channels(l), 3, rng);
        add_conv("up" + std::to_string(l) + ".conv1", cfg_.channels(l), cfg_.channels(l), 3, rng);
    }
    add_conv("prob_head", cfg_.channels(0), 1, 1, rng);
    head_begin_ = layers_.size();
    const int F = cfg_.descriptor_length();
    add_linear("match_fc0", F, F, rng);
    add_linear("match_fc1", F, 1, rng);
}

template <class T> void MatchNetwork<T>::add_conv(const std::string &name, int cin, int cout, int ksize, SeededRng &rng) {
    const std::int64_t k = ksize;
    layers_.push_back({he_init<T>({cout, cin, k, k, k}, static_cast<std::int64_t>(cin) * k * k * k, rng),
                       Tensor<T>::zeros({cout}, true)});
    names_.push_back(name + ".weight");
    names_.push_back(name + ".bias");
}

template <class T> void MatchNetwork<T>::add_linear(const std::string &name, int in, int out, SeededRng &rng) {
    layers_.push_back({he_init<T>({out, in}, in, rng), Tensor<T>::zeros({out}, true)});
    names_.push_back(name + ".weight");
    names_.push_back(name + ".bias");
}

template <class T> Tensor<T> MatchNetwork<T>::apply_conv(std::size_t index, const Tensor<T> &x) const {
    return conv3d(x, layers_[index].weight, layers_[index].bias);
}

template <class T> BranchOutput<T> MatchNetwork<T>::forward_branch(const Tensor<T> &patch) const {
    if (patch.rank() != 5 || patch.dim(0) != 1 || patch.dim(1) != 1) {
        throw DataError("forward_branch: expected a [1,1,D,H,W] patch, got " + shape_string(patch.shape()));
    }
    for (std::size_t a = 2; a < 5; ++a) {
        if (patch.dim(a) % cfg_.alignment() != 0) {
            throw DataError("forward_branch: patch dims " + shape_string(patch.shape()) + " not divisible by " +
                            std::to_string(cfg_.alignment()));
        }
    }
    const int L = cfg_.levels;
    BranchOutput<T> out;
    std::size_t layer = 0;
    Tensor<T> x = patch;
    for (int l = 0; l < L; ++l) {
        x = relu(apply_conv(layer++, x));
        x = relu(apply_conv(layer++, x));
        out.features.push_back(x);
        if (l < L - 1) x = maxpool3d(x);
    }
    for (int l = L - 2; l >= 0; --l) {
        x = concat_channels(upsample_trilinear(x, 2), out.features[static_cast<std::size_t>(l)]);
        x = relu(apply_conv(layer++, x));
        x = relu(apply_conv(layer++, x));
    }
    out.probability = sigmoid(apply_conv(layer++, x));
    return out;
}

template <class T>
Tensor<T> MatchNetwork<T>::descriptors(const BranchOutput<T> &branch, std::span<const VoxelIndex> voxels) const {
    const int L = cfg_.levels;
    const auto K = static_cast<std::int64_t>(voxels.size());
    if (L < 2) return gather_upsampled(branch.features[0], 1, voxels);
    const auto &fa = branch.features[static_cast<std::size_t>(L - 2)];
    const auto &fb = branch.features[static_cast<std::size_t>(L - 1)];
    auto a = gather_upsampled(fa, 1 << (L - 2), voxels);
    auto b = gather_upsampled(fb, 1 << (L - 1), voxels);
    const std::int64_t ca = fa.dim(1), cb = fb.dim(1);
    auto joined = concat_channels(reshape(a, {K, ca, 1, 1, 1}), reshape(b, {K, cb, 1, 1, 1}));
    return reshape(joined, {K, ca + cb});
}

template <class T>
Tensor<T> MatchNetwork<T>::match_probabilities(const Tensor<T> &target_desc, const Tensor<T> &source_desc) const {
    if (target_desc.rank() != 2 || source_desc.rank() != 2 || target_desc.dim(1) != source_desc.dim(1) ||
        target_desc.dim(1) != cfg_.descriptor_length()) {
        throw ConfigError("match_probabilities: descriptor shapes " + shape_string(target_desc.shape()) + " and " +
                          shape_string(source_desc.shape()) + " do not match length " +
                          std::to_string(cfg_.descriptor_length()));
    }
    const auto &fc0 = layers_[head_begin_];
    const auto &fc1 = layers_[head_begin_ + 1];
    auto diff = pairwise_abs_diff(target_desc, source_desc);
    auto hidden = relu(linear(diff, fc0.weight, fc0.bias));
    auto p = sigmoid(linear(hidden, fc1.weight, fc1.bias));
    return reshape(p, {target_desc.dim(0), source_desc.dim(0)});
}

template <class T> std::vector<Tensor<T>> MatchNetwork<T>::parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto &c : layers_) {
        out.push_back(c.weight);
        out.push_back(c.bias);
    }
    return out;
}

template <class T> std::vector<Tensor<T>> MatchNetwork<T>::head_parameters() const {
    std::vector<Tensor<T>> out;
    for (std::size_t n = head_begin_; n < layers_.size(); ++n) {
        out.push_back(layers_[n].weight);
        out.push_back(layers_[n].bias);
    }
    return out;
}

template <class T> Checkpoint MatchNetwork<T>::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.config_echo = cfg_.echo();
    const auto params = parameters();
    for (std::size_t n = 0; n < params.size(); ++n) {
        CheckpointEntry e{names_[n], params[n].shape(), {}};
        e.values.reserve(params[n].numel());
        for (T v : params[n].values()) e.values.push_back(static_cast<float>(v));
        ckpt.entries.push_back(std::move(e));
    }
    return ckpt;
}

template <class T> MatchNetwork<T> MatchNetwork<T>::from_checkpoint(const Checkpoint &ckpt) {
    MatchNetwork net(parse_echo(ckpt.config_echo), 0);
    auto params = net.parameters();
    if (ckpt.entries.size() != params.size()) {
        throw DataError("checkpoint has " + std::to_string(ckpt.entries.size()) + " parameters, network expects " +
                        std::to_string(params.size()));
    }
    for (std::size_t n = 0; n < params.size(); ++n) {
        const auto &e = ckpt.find(net.names_[n]);
        if (e.shape != params[n].shape()) {
            throw DataError("checkpoint parameter " + e.name + " has shape " + shape_string(e.shape) + ", expected " +
                            shape_string(params[n].shape()));
        }
        auto dst = params[n].values();
        for (std::size_t v = 0; v < dst.size(); ++v) dst[v] = static_cast<T>(e.values[v]);
    }
    return net;
}

template <class T> int MatchNetwork<T>::receptive_field_radius() const {
    // Conservative reach in input voxels: each 3x3x3 conv adds one step at the current stride,
    // each pooling or interpolation stage adds one coarse step.
    const int L = cfg_.levels;
    int r = 0, stride = 1;
    std::vector<int> down_reach;
    for (int l = 0; l < L; ++l) {
        r += 2 * stride;
        down_reach.push_back(r);
        if (l < L - 1) {
            r += stride;
            stride *= 2;
        }
    }
    int desc = 0;
    for (int l = std::max(0, L - 2); l < L; ++l) desc = std::max(desc, down_reach[static_cast<std::size_t>(l)] + (1 << l));
    for (int l = L - 2; l >= 0; --l) {
        r += stride;
        stride /= 2;
        r += 2 * stride;
    }
    return std::max(r, desc);
}

template class MatchNetwork<float>;
template class MatchNetwork<double>;

// ---- sampling ---------------------------------------------------------------------------------

namespace {

template <class T> void require_probability_map(const Tensor<T> &p) {
    if (p.rank() != 5 || p.dim(0) != 1 || p.dim(1) != 1) {
        throw ConfigError("probability map must be [1,1,D,H,W], got " + shape_string(p.shape()));
    }
}

template <class T> VoxelIndex unravel(const Tensor<T> &p, std::size_t n) {
    const auto H = p.dim(3), W = p.dim(4);
    const auto idx = static_cast<std::int64_t>(n);
    return {idx / (H * W), (idx / W) % H, idx % W};
}

} // namespace

template <class T> LandmarkSet sample_topk(const Tensor<T> &probability, std::size_t k, std::int64_t margin) {
    require_probability_map(probability);
    if (margin < 0) throw ConfigError("sample_topk: margin must be >= 0");
    const auto v = probability.values();
    const std::int64_t d = probability.dim(2), h = probability.dim(3), w = probability.dim(4);
    auto inside = [&](std::int64_t i, std::int64_t n) { return i >= margin && i < n - margin; };
    std::vector<std::size_t> order;
    order.reserve(v.size());
    for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < h; ++j)
            for (std::int64_t x = 0; x < w; ++x)
                if (inside(i, d) && inside(j, h) && inside(x, w)) order.push_back(static_cast<std::size_t>((i * h + j) * w + x));
    if (k > order.size()) {
        throw ConfigError("sample_topk: K = " + std::to_string(k) + " exceeds the " + std::to_string(order.size()) +
                          " voxels available");
    }
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
    LandmarkSet out;
    for (std::size_t n = 0; n < k; ++n) out.entries.push_back({unravel(probability, order[n]), static_cast<double>(v[order[n]])});
    return out;
}

template <class T> LandmarkSet sample_threshold(const Tensor<T> &probability, double threshold) {
    require_probability_map(probability);
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("sample_threshold: threshold must be in (0, 1)");
    const auto v = probability.values();
    LandmarkSet out;
    for (std::size_t n = 0; n < v.size(); ++n)
        if (static_cast<double>(v[n]) > threshold) out.entries.push_back({unravel(probability, n), static_cast<double>(v[n])});
    return out;
}

template <class T> std::vector<double> surrogate_scores(const Tensor<T> &target_desc, const Tensor<T> &source_desc) {
    NoGradGuard guard;
    const auto d2 = pairwise_l2sq(target_desc, source_desc);
    std::vector<double> out(d2.numel());
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = std::exp(-static_cast<double>(d2.values()[n]));
    return out;
}

MatchGroundTruth make_ground_truth(const LandmarkSet &target, const Grid3 &target_grid, const LandmarkSet &source,
                                   const Grid3 &source_grid, const DenseDVF &dvf, double radius_mm, bool skip_unconverged) {
    if (!(radius_mm >= 0.0)) throw ConfigError("make_ground_truth: radius must be non-negative");
    MatchGroundTruth gt;
    gt.rows = target.size();
    gt.cols = source.size();
    gt.c.assign(gt.rows * gt.cols, 0);
    gt.target_hit.assign(gt.rows, 0);
    gt.source_hit.assign(gt.cols, 0);
    std::vector<WorldPoint> src(gt.cols);
    for (std::size_t j = 0; j < gt.cols; ++j) src[j] = source_grid.world(source.entries[j].index);
    for (std::size_t i = 0; i < gt.rows; ++i) {
        const WorldPoint p = target_grid.world(target.entries[i].index);
        WorldPoint q;
        try {
            q = invert_dvf_at(dvf, p);
        } catch (const NumericError &) {
            if (!skip_unconverged) throw;
            continue;
        }
        for (std::size_t j = 0; j < gt.cols; ++j) {
            if ((q - src[j]).norm() <= radius_mm) {
                gt.c[i * gt.cols + j] = 1;
                gt.target_hit[i] = 1;
                gt.source_hit[j] = 1;
            }
        }
    }
    gt.k_pos = static_cast<std::size_t>(std::count(gt.c.begin(), gt.c.end(), std::uint8_t{1}));
    gt.k_neg = gt.c.size() - gt.k_pos;
    return gt;
}

// ---- losses -----------------------------------------------------------------------------------

template <class T>
Tensor<T> landmark_probability_loss(const Tensor<T> &probability, const LandmarkSet &landmarks,
                                    std::span<const std::uint8_t> hit) {
    if (hit.size() != landmarks.size()) {
        throw ConfigError("landmark_probability_loss: " + std::to_string(landmarks.size()) + " landmarks but " +
                          std::to_string(hit.size()) + " hit flags");
    }
    if (landmarks.size() == 0) return Tensor<T>::scalar(T(0));
    const auto vox = landmarks.indices();
    auto p = gather_upsampled(probability, 1, vox);
    std::vector<T> target(hit.size());
    for (std::size_t n = 0; n < hit.size(); ++n) target[n] = hit[n] ? T(1) : T(0);
    return bce<T>(p, target);
}

template <class T>
Tensor<T> descriptor_hinge_loss(const Tensor<T> &target_desc, const Tensor<T> &source_desc, const MatchGroundTruth &gt,
                                double m_pos, double m_neg) {
    if (!(m_pos < m_neg)) throw ConfigError("descriptor_hinge_loss: m_pos must be < m_neg");
    if (static_cast<std::size_t>(target_desc.dim(0)) != gt.rows || static_cast<std::size_t>(source_desc.dim(0)) != gt.cols) {
        throw ConfigError("descriptor_hinge_loss: descriptor counts do not match the ground truth");
    }
    const auto d2 = pairwise_l2sq(target_desc, source_desc);
    const Shape shape{static_cast<std::int64_t>(gt.rows), static_cast<std::int64_t>(gt.cols)};
    std::optional<Tensor<T>> loss;
    if (gt.k_pos == 0) {
        log_warning("descriptor_hinge_loss: no positive pairs, positive term skipped");
    } else {
        std::vector<T> w(gt.c.size());
        for (std::size_t n = 0; n < w.size(); ++n) w[n] = gt.c[n] ? T(1) / static_cast<T>(gt.k_pos) : T(0);
        loss = sum(mul(relu(add_scalar(d2, static_cast<T>(-m_pos))), Tensor<T>::from(shape, std::move(w))));
    }
    if (gt.k_neg == 0) {
        log_warning("descriptor_hinge_loss: no negative pairs, negative term skipped");
    } else {
        std::vector<T> w(gt.c.size());
        for (std::size_t n = 0; n < w.size(); ++n) w[n] = gt.c[n] ? T(0) : T(1) / static_cast<T>(gt.k_neg);
        auto neg = sum(mul(relu(add_scalar(scale(d2, T(-1)), static_cast<T>(m_neg))), Tensor<T>::from(shape, std::move(w))));
        loss = loss ? add(*loss, neg) : neg;
    }
    return loss ? *loss : Tensor<T>::scalar(T(0));
}

template <class T> Tensor<T> descriptor_ce_loss(const Tensor<T> &match_probs, const MatchGroundTruth &gt) {
    if (match_probs.numel() != gt.c.size()) throw ConfigError("descriptor_ce_loss: probability matrix does not match the ground truth");
    if (gt.c.empty()) return Tensor<T>::scalar(T(0));
    const double total = static_cast<double>(gt.k_pos + gt.k_neg);
    const T w_pos = static_cast<T>(static_cast<double>(gt.k_neg) / total);
    const T w_neg = static_cast<T>(static_cast<double>(gt.k_pos) / total);
    std::vector<T> target(gt.c.size());
    for (std::size_t n = 0; n < target.size(); ++n) target[n] = gt.c[n] ? T(1) : T(0);
    return bce<T>(match_probs, target, w_pos, w_neg);
}

template <class T> Tensor<T> total_loss(const LossVariant &variant, const LossParts<T> &parts) {
    if (!parts.landmark_target || !parts.landmark_source) throw ConfigError("total_loss: landmark probability terms missing");
    if (variant.uses_hinge() && !parts.hinge) throw ConfigError("total_loss: variant " + variant.name() + " needs the hinge term");
    if (variant.uses_ce() && !parts.ce) throw ConfigError("total_loss: variant " + variant.name() + " needs the CE term");
    auto loss = add(*parts.landmark_target, *parts.landmark_source);
    if (variant.uses_hinge()) loss = add(loss, *parts.hinge);
    if (variant.uses_ce()) loss = add(loss, *parts.ce);
    return loss;
}

#define LMREG_MATCH_FUNCS(T)                                                                                           \
    template LandmarkSet sample_topk(const Tensor<T> &, std::size_t, std::int64_t);                                    \
    template LandmarkSet sample_threshold(const Tensor<T> &, double);                                                  \
    template std::vector<double> surrogate_scores(const Tensor<T> &, const Tensor<T> &);                               \
    template Tensor<T> landmark_probability_loss(const Tensor<T> &, const LandmarkSet &, std::span<const std::uint8_t>); \
    template Tensor<T> descriptor_hinge_loss(const Tensor<T> &, const Tensor<T> &, const MatchGroundTruth &, double,   \
                                             double);                                                                  \
    template Tensor<T> descriptor_ce_loss(const Tensor<T> &, const MatchGroundTruth &);                                \
    template Tensor<T> total_loss(const LossVariant &, const LossParts<T> &);

LMREG_MATCH_FUNCS(float)
LMREG_MATCH_FUNCS(double)

#undef LMREG_MATCH_FUNCS

} // namespace lmreg::match
