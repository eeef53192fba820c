#include <algorithm>
#include <cmath>
#include <sstream>

#include "lmreg/dcnn_match.hpp"
#include "lmreg/log.hpp"
#include "lmreg/tensor_ops.hpp"

namespace lmreg::match {

using namespace lmreg::tensor;

template <class T> Tensor<T> volume_to_tensor(const Volume3 &vol) {
    const auto &d = vol.grid().dims;
    std::vector<T> v(vol.data().size());
    std::transform(vol.data().begin(), vol.data().end(), v.begin(), [](double x) { return static_cast<T>(x); });
    return Tensor<T>::from({1, 1, d[0], d[1], d[2]}, std::move(v));
}

template Tensor<float> volume_to_tensor<float>(const Volume3 &);
template Tensor<double> volume_to_tensor<double>(const Volume3 &);

std::vector<double> smoothed_losses(std::span<const StepRecord> curve, std::size_t window) {
    if (window == 0) throw ConfigError("smoothing window must be positive");
    std::vector<double> out(curve.size());
    double acc = 0.0;
    for (std::size_t n = 0; n < curve.size(); ++n) {
        acc += curve[n].total;
        if (n >= window) acc -= curve[n - window].total;
        out[n] = acc / static_cast<double>(std::min(n + 1, window));
    }
    return out;
}

namespace {

double min_spacing(const Grid3 &g) { return std::min({g.spacing.x, g.spacing.y, g.spacing.z}); }

} // namespace

template <class T>
StepRecord train_step(MatchNetwork<T> &net, Adam<T> &opt, const Volume3 &target_patch, const Volume3 &source_patch,
                      const DenseDVF &dvf, const LossVariant &variant) {
    const auto &cfg = net.config();
    opt.zero_grad();
    const auto bt = net.forward_branch(volume_to_tensor<T>(target_patch));
    const auto bs = net.forward_branch(volume_to_tensor<T>(source_patch));
    const auto k = static_cast<std::size_t>(cfg.top_k);
    const auto lt = sample_topk(bt.probability, k, cfg.sampling_margin);
    const auto ls = sample_topk(bs.probability, k, cfg.sampling_margin);
    const auto gt = make_ground_truth(lt, target_patch.grid(), ls, source_patch.grid(), dvf,
                                      cfg.gt_radius_voxels * min_spacing(target_patch.grid()), true);

    LossParts<T> parts;
    parts.landmark_target = landmark_probability_loss(bt.probability, lt, gt.target_hit);
    parts.landmark_source = landmark_probability_loss(bs.probability, ls, gt.source_hit);
    const auto ft = net.descriptors(bt, lt.indices());
    const auto fs = net.descriptors(bs, ls.indices());
    if (variant.uses_hinge()) parts.hinge = descriptor_hinge_loss(ft, fs, gt, variant.m_pos, variant.m_neg);
    if (variant.uses_ce()) parts.ce = descriptor_ce_loss(net.match_probabilities(ft, fs), gt);
    const auto loss = total_loss(variant, parts);

    StepRecord rec;
    rec.total = static_cast<double>(loss.item());
    rec.landmark_target = static_cast<double>(parts.landmark_target->item());
    rec.landmark_source = static_cast<double>(parts.landmark_source->item());
    rec.hinge = parts.hinge ? static_cast<double>(parts.hinge->item()) : 0.0;
    rec.ce = parts.ce ? static_cast<double>(parts.ce->item()) : 0.0;
    rec.k_pos = gt.k_pos;
    rec.target_hits = static_cast<std::size_t>(std::count(gt.target_hit.begin(), gt.target_hit.end(), 1));
    rec.source_hits = static_cast<std::size_t>(std::count(gt.source_hit.begin(), gt.source_hit.end(), 1));
    if (!std::isfinite(rec.total)) {
        std::ostringstream os;
        os << "non-finite training loss (landmark target " << rec.landmark_target << ", source " << rec.landmark_source
           << ", hinge " << rec.hinge << ", ce " << rec.ce << ", K_pos " << gt.k_pos << ")";
        throw NumericError(os.str());
    }
    if (loss.requires_grad()) {
        backward(loss);
        opt.step();
    }
    return rec;
}

template StepRecord train_step<float>(MatchNetwork<float> &, Adam<float> &, const Volume3 &, const Volume3 &,
                                      const DenseDVF &, const LossVariant &);
template StepRecord train_step<double>(MatchNetwork<double> &, Adam<double> &, const Volume3 &, const Volume3 &,
                                       const DenseDVF &, const LossVariant &);

TrainResult train(std::span<const Volume3> dataset, const NetworkConfig &net_cfg, const TrainConfig &train_cfg,
                  const StepCallback &on_step) {
    net_cfg.validate();
    train_cfg.variant.validate();
    train_cfg.deformation.validate();
    train_cfg.adam.validate();
    if (train_cfg.steps < 0) throw ConfigError("train: steps must be >= 0");
    if (dataset.empty()) throw ConfigError("train: empty dataset");
    for (const auto &v : dataset) {
        for (std::size_t a = 0; a < 3; ++a) {
            if (v.grid().dims[a] < net_cfg.patch_dims[a]) {
                throw ConfigError("train: volume smaller than the training patch along axis " + std::to_string(a));
            }
        }
    }

    MatchNetwork<float> net(net_cfg, train_cfg.seed);
    Adam<float> opt(net.parameters(), train_cfg.adam);
    SeededRng data_rng = SeededRng(train_cfg.seed).fork(1);
    TrainResult result;
    int without_positives = 0;
    for (int step = 0; step < train_cfg.steps; ++step) {
        SeededRng rng = data_rng.fork(static_cast<std::uint64_t>(step));
        const auto &vol = dataset[rng.uniform_index(dataset.size())];
        VoxelIndex start;
        const auto &dims = vol.grid().dims;
        start.i = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(dims[0] - net_cfg.patch_dims[0] + 1)));
        start.j = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(dims[1] - net_cfg.patch_dims[1] + 1)));
        start.k = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(dims[2] - net_cfg.patch_dims[2] + 1)));
        const auto target = crop_patch(vol, start, net_cfg.patch_dims);
        TransformKind kind{};
        const auto dvf = sample_training_dvf(rng, train_cfg.deformation, target.grid(), &kind);
        const auto source = warp_volume(vol, dvf);

        auto rec = train_step(net, opt, target, source, dvf, train_cfg.variant);
        rec.step = step;
        rec.transform = kind;
        without_positives = rec.k_pos == 0 ? without_positives + 1 : 0;
        if (without_positives > train_cfg.max_steps_without_positives) {
            throw ConfigError("train: no positive landmark pairs for " + std::to_string(without_positives) +
                              " consecutive steps; check the deformation ranges and net.gt_radius_voxels");
        }
        result.curve.push_back(rec);
        if (on_step) on_step(rec);
    }
    result.checkpoint = net.to_checkpoint();
    return result;
}

} // namespace lmreg::match
