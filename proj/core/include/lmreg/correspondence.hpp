// correspondence.hpp - landmark pairs exchanged between matching and registration.
//
// Text format: one pair per line, "tx ty tz sx sy sz score" in world mm. Blank lines and lines
// starting with '#' are ignored.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lmreg/common.hpp"

namespace lmreg {

struct Correspondence {
    WorldPoint target;
    WorldPoint source;
    double score = 1.0;
    friend bool operator==(const Correspondence &, const Correspondence &) = default;
};

struct CorrespondenceSet {
    std::vector<Correspondence> pairs;

    std::size_t size() const { return pairs.size(); }
    bool empty() const { return pairs.empty(); }
    friend bool operator==(const CorrespondenceSet &, const CorrespondenceSet &) = default;
};

std::string format_correspondences(const CorrespondenceSet &set);
CorrespondenceSet parse_correspondences(const std::string &text);
void save_correspondences(const std::filesystem::path &path, const CorrespondenceSet &set);
CorrespondenceSet load_correspondences(const std::filesystem::path &path);

} // namespace lmreg
