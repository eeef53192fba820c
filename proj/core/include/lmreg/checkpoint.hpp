// checkpoint.hpp - versioned binary parameter files.
//
// Layout (all integers little-endian):
//   "LMREGCKP" | u32 version | u64 n + n bytes config text | u32 count |
//   count x ( u32 n + n bytes name | u32 rank | rank x i64 dim | numel x f32 )

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lmreg/tensor.hpp"

namespace lmreg::tensor {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
    friend bool operator==(const CheckpointEntry &, const CheckpointEntry &) = default;
};

struct Checkpoint {
    std::string config_echo;
    std::vector<CheckpointEntry> entries;

    const CheckpointEntry &find(const std::string &name) const; // DataError when absent
    friend bool operator==(const Checkpoint &, const Checkpoint &) = default;
};

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt);
Checkpoint load_checkpoint(const std::filesystem::path &path);

std::string serialize_checkpoint(const Checkpoint &ckpt);
Checkpoint parse_checkpoint(const std::string &bytes);

} // namespace lmreg::tensor
