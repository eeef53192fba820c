#include "lmreg/metaimage.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>
#include <string>

namespace lmreg {

namespace {

std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<double> parse_numbers(const std::string &key, const std::string &value, std::size_t expected) {
    std::istringstream is(value);
    std::vector<double> out;
    double v = 0.0;
    while (is >> v) out.push_back(v);
    if (!is.eof() || out.size() != expected) {
        throw MetaImageFormatError("MetaImage header key " + key + " expects " + std::to_string(expected) +
                                   " numbers, got '" + value + "'");
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::size_t element_size(ElementType t) { return t == ElementType::Short ? 2 : 4; }

template <class T> T load_le(const unsigned char *p) {
    std::array<unsigned char, sizeof(T)> bytes{};
    std::memcpy(bytes.data(), p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
}

template <class T> void store_le(T v, std::string &out) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), bytes.size());
}

} // namespace

MetaImage read_metaimage(const std::filesystem::path &header_path) {
    std::ifstream in(header_path, std::ios::binary);
    if (!in) throw DataError("cannot open MetaImage header " + header_path.string());

    std::map<std::string, std::string> kv;
    std::string line;
    bool local_data = false;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (trim(line).empty()) continue;
            throw MetaImageFormatError("malformed MetaImage header line: '" + line + "'");
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        kv[key] = value;
        if (key == "ElementDataFile") {
            local_data = (value == "LOCAL");
            break;
        }
    }

    for (const char *required : {"NDims", "DimSize", "ElementType", "ElementDataFile"}) {
        if (!kv.contains(required)) {
            throw MetaImageFormatError(std::string("MetaImage header missing key ") + required);
        }
    }
    if (kv["NDims"] != "3") throw MetaImageFormatError("MetaImage NDims must be 3, got " + kv["NDims"]);
    if (kv.contains("CompressedData") && kv["CompressedData"] != "False") {
        throw MetaImageTypeError("compressed MetaImage payloads are not supported");
    }
    if (kv.contains("BinaryDataByteOrderMSB") && kv["BinaryDataByteOrderMSB"] != "False") {
        throw MetaImageTypeError("big-endian MetaImage payloads are not supported");
    }

    MetaImage img;
    const auto type_name = kv["ElementType"];
    if (type_name == "MET_SHORT") {
        img.type = ElementType::Short;
    } else if (type_name == "MET_FLOAT") {
        img.type = ElementType::Float;
    } else {
        throw MetaImageTypeError("unsupported MetaImage ElementType " + type_name);
    }

    const auto size = parse_numbers("DimSize", kv["DimSize"], 3);
    for (double s : size) {
        if (s < 1 || s != static_cast<double>(static_cast<std::int64_t>(s))) {
            throw MetaImageFormatError("MetaImage DimSize entries must be positive integers");
        }
    }
    img.grid.dims = {static_cast<std::int64_t>(size[2]), static_cast<std::int64_t>(size[1]),
                     static_cast<std::int64_t>(size[0])};
    if (kv.contains("ElementSpacing")) {
        const auto sp = parse_numbers("ElementSpacing", kv["ElementSpacing"], 3);
        img.grid.spacing = {sp[0], sp[1], sp[2]};
    }
    for (const char *offset_key : {"Offset", "Origin", "Position"}) {
        if (kv.contains(offset_key)) {
            const auto off = parse_numbers(offset_key, kv[offset_key], 3);
            img.grid.origin = {off[0], off[1], off[2]};
            break;
        }
    }
    if (kv.contains("ElementNumberOfChannels")) {
        const auto ch = parse_numbers("ElementNumberOfChannels", kv["ElementNumberOfChannels"], 1);
        if (ch[0] < 1) throw MetaImageFormatError("ElementNumberOfChannels must be positive");
        img.channels = static_cast<int>(ch[0]);
    }
    try {
        img.grid.validate();
    } catch (const DataError &e) {
        throw MetaImageFormatError(e.what());
    }

    std::string payload;
    if (local_data) {
        payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    } else {
        const auto raw_path = header_path.parent_path() / kv["ElementDataFile"];
        std::ifstream raw(raw_path, std::ios::binary);
        if (!raw) throw DataError("cannot open MetaImage payload " + raw_path.string());
        payload.assign(std::istreambuf_iterator<char>(raw), std::istreambuf_iterator<char>());
    }

    const auto count = static_cast<std::size_t>(img.grid.voxel_count()) * static_cast<std::size_t>(img.channels);
    const auto esize = element_size(img.type);
    if (payload.size() != count * esize) {
        throw MetaImageLengthError("MetaImage payload holds " + std::to_string(payload.size() / esize) +
                                   " values, header declares " + std::to_string(count));
    }
    img.values.resize(count);
    const auto *bytes = reinterpret_cast<const unsigned char *>(payload.data());
    for (std::size_t n = 0; n < count; ++n) {
        img.values[n] = img.type == ElementType::Short ? static_cast<double>(load_le<std::int16_t>(bytes + 2 * n))
                                                       : static_cast<double>(load_le<float>(bytes + 4 * n));
    }
    return img;
}

void write_metaimage(const std::filesystem::path &header_path, const MetaImage &img) {
    img.grid.validate();
    const auto count = static_cast<std::size_t>(img.grid.voxel_count()) * static_cast<std::size_t>(img.channels);
    if (img.values.size() != count) throw DataError("MetaImage value count does not match grid");

    auto raw_name = header_path.stem().string() + ".raw";
    const auto &g = img.grid;
    std::ostringstream hdr;
    hdr << "ObjectType = Image\n"
        << "NDims = 3\n"
        << "BinaryData = True\n"
        << "BinaryDataByteOrderMSB = False\n"
        << "CompressedData = False\n"
        << "Offset = " << format_double(g.origin.x) << ' ' << format_double(g.origin.y) << ' '
        << format_double(g.origin.z) << '\n'
        << "ElementSpacing = " << format_double(g.spacing.x) << ' ' << format_double(g.spacing.y) << ' '
        << format_double(g.spacing.z) << '\n'
        << "DimSize = " << g.dims[2] << ' ' << g.dims[1] << ' ' << g.dims[0] << '\n';
    if (img.channels != 1) hdr << "ElementNumberOfChannels = " << img.channels << '\n';
    hdr << "ElementType = " << (img.type == ElementType::Short ? "MET_SHORT" : "MET_FLOAT") << '\n'
        << "ElementDataFile = " << raw_name << '\n';

    std::string payload;
    payload.reserve(count * element_size(img.type));
    for (double v : img.values) {
        if (img.type == ElementType::Short) {
            const double r = std::clamp(std::round(v), double(std::numeric_limits<std::int16_t>::min()),
                                        double(std::numeric_limits<std::int16_t>::max()));
            store_le(static_cast<std::int16_t>(r), payload);
        } else {
            store_le(static_cast<float>(v), payload);
        }
    }

    std::ofstream h(header_path, std::ios::binary);
    if (!h) throw DataError("cannot write " + header_path.string());
    h << hdr.str();
    std::ofstream r(header_path.parent_path() / raw_name, std::ios::binary);
    if (!r) throw DataError("cannot write raw payload next to " + header_path.string());
    r.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

} // namespace lmreg
