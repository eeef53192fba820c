// dcnn_match.hpp - Siamese landmark detection, description and matching network.
//
// Each branch is a small 3D UNet: `levels` resolution levels with base_channels * 2^l channels,
// two conv+relu per level, 2x max-pool between levels, trilinear up-path with skip
// concatenation, and a 1x1x1 conv + sigmoid landmark probability head. Descriptors are the
// down-path features of the two coarsest levels, upsampled to full resolution and read at the
// landmark voxels. A small fully connected head scores descriptor pairs from |f_t - f_s|.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmreg/checkpoint.hpp"
#include "lmreg/correspondence.hpp"
#include "lmreg/deform_sim.hpp"
#include "lmreg/optim.hpp"
#include "lmreg/tensor.hpp"
#include "lmreg/volume.hpp"

namespace lmreg::match {

using tensor::Tensor;

enum class LossKind { Hinge, CE, HingeCE, Hinge01CE, Hinge02CE };

struct LossVariant {
    LossKind kind = LossKind::CE;
    double m_pos = 0.0;
    double m_neg = 1.0;

    static LossVariant of(LossKind kind); // margins fixed by the kind
    static LossVariant parse(const std::string &name);
    std::string name() const;
    bool uses_hinge() const { return kind != LossKind::CE; }
    bool uses_ce() const { return kind != LossKind::Hinge; }
    void validate() const;
};

struct NetworkConfig {
    int levels = 3;
    int base_channels = 8;
    int top_k = 64;                        // landmarks sampled per branch during training
    Dims3 patch_dims{24, 48, 48};          // depth, height, width in voxels
    double inference_threshold = 0.5;
    double gt_radius_voxels = 2.0;
    int max_landmarks_per_patch = 256;     // 0 disables the cap
    // Training samples landmarks only this many voxels inside the patch faces, where the
    // zero-padded border does not dominate the probability map.
    int sampling_margin = 4;

    int channels(int level) const { return base_channels << level; }
    int descriptor_length() const { return levels >= 2 ? channels(levels - 2) + channels(levels - 1) : channels(0); }
    // Voxel alignment required of tile origins so that pooling windows coincide.
    std::int64_t alignment() const { return std::int64_t{1} << (levels - 1); }
    void validate() const;
    std::string echo() const; // key=value lines, stored in checkpoints
};

struct Landmark {
    VoxelIndex index;
    double probability = 0.0;
    friend bool operator==(const Landmark &, const Landmark &) = default;
};

struct LandmarkSet {
    std::vector<Landmark> entries;
    std::size_t size() const { return entries.size(); }
    std::vector<VoxelIndex> indices() const;
};

struct MatchGroundTruth {
    std::size_t rows = 0; // target landmarks
    std::size_t cols = 0; // source landmarks
    std::vector<std::uint8_t> c; // rows x cols, row-major
    std::size_t k_pos = 0;
    std::size_t k_neg = 0;
    std::vector<std::uint8_t> target_hit; // row has a positive
    std::vector<std::uint8_t> source_hit; // column has a positive

    std::uint8_t at(std::size_t i, std::size_t j) const { return c[i * cols + j]; }
};

template <class T> struct BranchOutput {
    Tensor<T> probability;          // [1, 1, D, H, W]
    std::vector<Tensor<T>> features; // down-path features per level, [1, C_l, D/2^l, H/2^l, W/2^l]
};

template <class T> class MatchNetwork {
  public:
    // He-initialized weights from the seed; biases start at zero.
    MatchNetwork(NetworkConfig cfg, std::uint64_t seed);

    const NetworkConfig &config() const { return cfg_; }

    // patch: [1, 1, D, H, W] with D, H, W divisible by alignment().
    BranchOutput<T> forward_branch(const Tensor<T> &patch) const;

    // [K, descriptor_length] rows for the given full-resolution voxels.
    Tensor<T> descriptors(const BranchOutput<T> &branch, std::span<const VoxelIndex> voxels) const;

    // Descriptor-pair head: [K1, F] x [K2, F] -> [K1, K2] probabilities.
    Tensor<T> match_probabilities(const Tensor<T> &target_desc, const Tensor<T> &source_desc) const;

    std::vector<Tensor<T>> parameters() const;
    std::vector<Tensor<T>> head_parameters() const; // descriptor-pair head only
    const std::vector<std::string> &parameter_names() const { return names_; }

    tensor::Checkpoint to_checkpoint() const;
    static MatchNetwork from_checkpoint(const tensor::Checkpoint &ckpt);

    // Voxel radius outside of which inputs cannot influence the probability map or descriptors.
    int receptive_field_radius() const;

  private:
    struct Conv {
        Tensor<T> weight;
        Tensor<T> bias;
    };
    MatchNetwork() = default;
    void add_conv(const std::string &name, int cin, int cout, int ksize, SeededRng &rng);
    void add_linear(const std::string &name, int in, int out, SeededRng &rng);
    Tensor<T> apply_conv(std::size_t index, const Tensor<T> &x) const;

    NetworkConfig cfg_;
    std::vector<Conv> layers_;        // convs in order: down, up, head; then the two linear layers
    std::vector<std::string> names_;  // parameter names matching parameters()
    std::size_t head_begin_ = 0;      // first linear layer index in layers_
};

// ---- sampling ---------------------------------------------------------------------------------

// The k highest probabilities among voxels at least `margin` voxels from every face, ordered by
// probability descending then linear index ascending.
template <class T> LandmarkSet sample_topk(const Tensor<T> &probability, std::size_t k, std::int64_t margin = 0);
// All voxels with probability > threshold, in linear index order.
template <class T> LandmarkSet sample_threshold(const Tensor<T> &probability, double threshold = 0.5);

// Hinge-mode surrogate score exp(-d^2).
template <class T> std::vector<double> surrogate_scores(const Tensor<T> &target_desc, const Tensor<T> &source_desc);

// c_ij = 1 iff the target landmark, mapped into the source through the inverse of `dvf`, lies
// within radius_mm of source landmark j. Non-converging inversions throw NumericError unless
// skip_unconverged is set, in which case the landmark has no positives.
MatchGroundTruth make_ground_truth(const LandmarkSet &target, const Grid3 &target_grid, const LandmarkSet &source,
                                   const Grid3 &source_grid, const DenseDVF &dvf, double radius_mm,
                                   bool skip_unconverged = false);

// ---- losses -----------------------------------------------------------------------------------

// Binary cross entropy of the probabilities at the landmarks against hit / no-hit targets.
template <class T>
Tensor<T> landmark_probability_loss(const Tensor<T> &probability, const LandmarkSet &landmarks,
                                    std::span<const std::uint8_t> hit);

// Positive pairs: max(0, d^2 - m_pos) / K_pos; negative pairs: max(0, m_neg - d^2) / K_neg. An empty
// class contributes nothing and logs a warning.
template <class T>
Tensor<T> descriptor_hinge_loss(const Tensor<T> &target_desc, const Tensor<T> &source_desc, const MatchGroundTruth &gt,
                                double m_pos, double m_neg);

// Weighted BCE over all pairs with w_pos = K_neg / (K_pos + K_neg) and w_neg = K_pos / (K_pos + K_neg).
template <class T> Tensor<T> descriptor_ce_loss(const Tensor<T> &match_probs, const MatchGroundTruth &gt);

template <class T> struct LossParts {
    std::optional<Tensor<T>> landmark_target;
    std::optional<Tensor<T>> landmark_source;
    std::optional<Tensor<T>> hinge;
    std::optional<Tensor<T>> ce;
};

// Landmark terms for both branches plus the descriptor terms the variant uses, unit weights.
template <class T> Tensor<T> total_loss(const LossVariant &variant, const LossParts<T> &parts);

// ---- training ---------------------------------------------------------------------------------

struct TrainConfig {
    int steps = 2000;
    LossVariant variant;
    DeformationConfig deformation;
    tensor::AdamConfig adam;
    std::uint64_t seed = 0;
    int max_steps_without_positives = 200; // ConfigError beyond this
};

struct StepRecord {
    int step = 0;
    double total = 0.0;
    double landmark_target = 0.0;
    double landmark_source = 0.0;
    double hinge = 0.0;
    double ce = 0.0;
    std::size_t k_pos = 0;
    std::size_t target_hits = 0; // sampled landmarks with a correspondent among the other branch's samples
    std::size_t source_hits = 0;
    TransformKind transform = TransformKind::Translation;
};

struct TrainResult {
    tensor::Checkpoint checkpoint;
    std::vector<StepRecord> curve;
};

// Moving average over the trailing `window` entries (shorter at the start).
std::vector<double> smoothed_losses(std::span<const StepRecord> curve, std::size_t window = 20);

using StepCallback = std::function<void(const StepRecord &)>;

// Single-threaded and deterministic for a given seed. Volumes must be at least patch_dims.
TrainResult train(std::span<const Volume3> dataset, const NetworkConfig &net_cfg, const TrainConfig &train_cfg,
                  const StepCallback &on_step = {});

// One optimization step on an explicit target/source pair; exposed for tests.
template <class T>
StepRecord train_step(MatchNetwork<T> &net, tensor::Adam<T> &opt, const Volume3 &target_patch,
                      const Volume3 &source_patch, const DenseDVF &dvf, const LossVariant &variant);

// ---- inference --------------------------------------------------------------------------------

struct InferenceOptions {
    int threads = 1;          // patch workers; the merge is sequential in tile order
    bool suppress_duplicates = true;
};

// Tile origins along one axis: multiples of half the patch covering `size` voxels.
std::vector<std::int64_t> tile_starts(std::int64_t size, std::int64_t patch);

template <class T>
CorrespondenceSet infer_pairs(const Volume3 &target, const Volume3 &source, const MatchNetwork<T> &net,
                              const LossVariant &variant, const InferenceOptions &opts = {});

// Keeps the highest scoring pairs such that no kept target (or source) point lies within
// min_distance_mm of another kept target (or source) point.
CorrespondenceSet suppress_duplicates(const CorrespondenceSet &pairs, double min_distance_mm);

template <class T> Tensor<T> volume_to_tensor(const Volume3 &vol);

extern template class MatchNetwork<float>;
extern template class MatchNetwork<double>;

} // namespace lmreg::match
