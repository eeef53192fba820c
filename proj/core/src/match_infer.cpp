#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "lmreg/dcnn_match.hpp"
#include "lmreg/tensor_ops.hpp"

namespace lmreg::match {

using namespace lmreg::tensor;

std::vector<std::int64_t> tile_starts(std::int64_t size, std::int64_t patch) {
    if (size < 1 || patch < 2 || patch % 2 != 0) throw ConfigError("tile_starts: need size >= 1 and an even patch");
    const std::int64_t stride = patch / 2;
    std::vector<std::int64_t> starts{0};
    while (starts.back() + patch < size) starts.push_back(starts.back() + stride);
    return starts;
}

CorrespondenceSet suppress_duplicates(const CorrespondenceSet &pairs, double min_distance_mm) {
    if (!(min_distance_mm > 0.0)) throw ConfigError("suppress_duplicates: distance must be positive");
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t n = 0; n < order.size(); ++n) order[n] = n;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pairs.pairs[a].score > pairs.pairs[b].score; });

    // Spatial hash with cell size = min distance; a conflict can only sit in the 27 neighbours.
    struct Key {
        std::int64_t x, y, z;
        bool operator==(const Key &) const = default;
    };
    struct KeyHash {
        std::size_t operator()(const Key &k) const {
            return static_cast<std::size_t>(k.x * 73856093LL ^ k.y * 19349663LL ^ k.z * 83492791LL);
        }
    };
    using Cells = std::unordered_map<Key, std::vector<WorldPoint>, KeyHash>;
    auto key_of = [&](const WorldPoint &p) {
        return Key{static_cast<std::int64_t>(std::floor(p.x / min_distance_mm)),
                   static_cast<std::int64_t>(std::floor(p.y / min_distance_mm)),
                   static_cast<std::int64_t>(std::floor(p.z / min_distance_mm))};
    };
    auto conflicts = [&](const Cells &cells, const WorldPoint &p) {
        const Key k = key_of(p);
        for (std::int64_t dx = -1; dx <= 1; ++dx)
            for (std::int64_t dy = -1; dy <= 1; ++dy)
                for (std::int64_t dz = -1; dz <= 1; ++dz) {
                    auto it = cells.find(Key{k.x + dx, k.y + dy, k.z + dz});
                    if (it == cells.end()) continue;
                    for (const auto &q : it->second)
                        if ((p - q).norm() <= min_distance_mm) return true;
                }
        return false;
    };

    Cells targets, sources;
    CorrespondenceSet out;
    for (auto n : order) {
        const auto &c = pairs.pairs[n];
        if (conflicts(targets, c.target) || conflicts(sources, c.source)) continue;
        targets[key_of(c.target)].push_back(c.target);
        sources[key_of(c.source)].push_back(c.source);
        out.pairs.push_back(c);
    }
    return out;
}

namespace {

// Landmarks above threshold inside the unpadded region, highest probability first, capped.
template <class T>
LandmarkSet patch_landmarks(const Tensor<T> &prob, const NetworkConfig &cfg, const VoxelIndex &start, const Dims3 &valid) {
    auto all = sample_threshold(prob, cfg.inference_threshold);
    LandmarkSet out;
    for (const auto &e : all.entries) {
        if (start.i + e.index.i < valid[0] && start.j + e.index.j < valid[1] && start.k + e.index.k < valid[2]) {
            out.entries.push_back(e);
        }
    }
    std::stable_sort(out.entries.begin(), out.entries.end(),
                     [](const Landmark &a, const Landmark &b) { return a.probability > b.probability; });
    if (cfg.max_landmarks_per_patch > 0 && out.entries.size() > static_cast<std::size_t>(cfg.max_landmarks_per_patch)) {
        out.entries.resize(static_cast<std::size_t>(cfg.max_landmarks_per_patch));
    }
    return out;
}

// Mutual best matches with score above the threshold; row-major score matrix.
std::vector<std::pair<std::size_t, std::size_t>> mutual_best(const std::vector<double> &scores, std::size_t rows,
                                                             std::size_t cols, double threshold) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (rows == 0 || cols == 0) return out;
    std::vector<std::size_t> best_col(rows, 0), best_row(cols, 0);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 1; j < cols; ++j)
            if (scores[i * cols + j] > scores[i * cols + best_col[i]]) best_col[i] = j;
    for (std::size_t j = 0; j < cols; ++j)
        for (std::size_t i = 1; i < rows; ++i)
            if (scores[i * cols + j] > scores[best_row[j] * cols + j]) best_row[j] = i;
    for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t j = best_col[i];
        if (best_row[j] == i && scores[i * cols + j] > threshold) out.emplace_back(i, j);
    }
    return out;
}

} // namespace

template <class T>
CorrespondenceSet infer_pairs(const Volume3 &target, const Volume3 &source, const MatchNetwork<T> &net,
                              const LossVariant &variant, const InferenceOptions &opts) {
    if (!(target.grid() == source.grid())) throw DataError("infer_pairs: target and source must share one grid");
    const auto &cfg = net.config();
    const auto &dims = target.grid().dims;
    std::array<std::vector<std::int64_t>, 3> starts;
    Dims3 padded{};
    for (std::size_t a = 0; a < 3; ++a) {
        starts[a] = tile_starts(dims[a], cfg.patch_dims[a]);
        padded[a] = starts[a].back() + cfg.patch_dims[a];
    }
    const auto tpad = pad_to(target, padded);
    const auto spad = pad_to(source, padded);

    std::vector<VoxelIndex> tiles;
    for (auto i : starts[0])
        for (auto j : starts[1])
            for (auto k : starts[2]) tiles.push_back({i, j, k});

    const bool ce = variant.uses_ce();
    const double threshold = ce ? cfg.inference_threshold : std::exp(-0.5);
    std::vector<CorrespondenceSet> per_tile(tiles.size());

    auto run_tile = [&](std::size_t t) {
        NoGradGuard guard;
        const auto tp = crop_patch(tpad, tiles[t], cfg.patch_dims);
        const auto sp = crop_patch(spad, tiles[t], cfg.patch_dims);
        const auto bt = net.forward_branch(volume_to_tensor<T>(tp));
        const auto bs = net.forward_branch(volume_to_tensor<T>(sp));
        const auto lt = patch_landmarks(bt.probability, cfg, tiles[t], dims);
        const auto ls = patch_landmarks(bs.probability, cfg, tiles[t], dims);
        if (lt.size() == 0 || ls.size() == 0) return;
        const auto ft = net.descriptors(bt, lt.indices());
        const auto fs = net.descriptors(bs, ls.indices());
        std::vector<double> scores;
        if (ce) {
            const auto p = net.match_probabilities(ft, fs);
            scores.assign(p.values().begin(), p.values().end());
        } else {
            scores = surrogate_scores(ft, fs);
        }
        for (auto [i, j] : mutual_best(scores, lt.size(), ls.size(), threshold)) {
            per_tile[t].pairs.push_back(
                {tp.grid().world(lt.entries[i].index), sp.grid().world(ls.entries[j].index), scores[i * ls.size() + j]});
        }
    };

    const int workers = std::max(1, std::min<int>(opts.threads, static_cast<int>(tiles.size())));
    if (workers == 1) {
        for (std::size_t t = 0; t < tiles.size(); ++t) run_tile(t);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr error;
        std::mutex error_mutex;
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t t = next++; t < tiles.size(); t = next++) {
                    try {
                        run_tile(t);
                    } catch (...) {
                        std::lock_guard lock(error_mutex);
                        if (!error) error = std::current_exception();
                    }
                }
            });
        }
        for (auto &th : pool) th.join();
        if (error) std::rethrow_exception(error);
    }

    CorrespondenceSet merged;
    for (const auto &s : per_tile) merged.pairs.insert(merged.pairs.end(), s.pairs.begin(), s.pairs.end());
    if (!opts.suppress_duplicates) return merged;
    const auto &sp = target.grid().spacing;
    return suppress_duplicates(merged, std::min({sp.x, sp.y, sp.z}));
}

template CorrespondenceSet infer_pairs<float>(const Volume3 &, const Volume3 &, const MatchNetwork<float> &,
                                              const LossVariant &, const InferenceOptions &);
template CorrespondenceSet infer_pairs<double>(const Volume3 &, const Volume3 &, const MatchNetwork<double> &,
                                               const LossVariant &, const InferenceOptions &);

} // namespace lmreg::match
