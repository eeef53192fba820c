// metaimage.hpp - MetaImage (.mhd + raw) reading and writing.
//
// Supported header keys: NDims (must be 3), DimSize (width height depth), ElementSpacing,
// Offset, ElementType (MET_SHORT or MET_FLOAT), ElementNumberOfChannels, ElementDataFile
// (a file name relative to the header, or LOCAL). Payload is raw little-endian, width fastest,
// channels interleaved per voxel.

#pragma once

#include <filesystem>
#include <vector>

#include "lmreg/volume.hpp"

namespace lmreg {

struct MetaImageFormatError : DataError {
    using DataError::DataError;
};
struct MetaImageLengthError : DataError {
    using DataError::DataError;
};
struct MetaImageTypeError : DataError {
    using DataError::DataError;
};

struct MetaImage {
    Grid3 grid;
    int channels = 1;
    ElementType type = ElementType::Float;
    std::vector<double> values; // voxel_count * channels
};

MetaImage read_metaimage(const std::filesystem::path &header_path);

// Writes header_path and a sibling raw file named after the header stem.
void write_metaimage(const std::filesystem::path &header_path, const MetaImage &img);

} // namespace lmreg
