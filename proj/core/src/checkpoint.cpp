#include "lmreg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lmreg/common.hpp"

namespace lmreg::tensor {

namespace {

constexpr char kMagic[8] = {'L', 'M', 'R', 'E', 'G', 'C', 'K', 'P'};

template <class U> void put(std::string &out, U v) {
    static_assert(std::is_integral_v<U>);
    using Unsigned = std::make_unsigned_t<U>;
    auto u = static_cast<Unsigned>(v);
    for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
}

class Reader {
  public:
    explicit Reader(const std::string &bytes) : bytes_(bytes) {}

    template <class U> U get() {
        need(sizeof(U));
        using Unsigned = std::make_unsigned_t<U>;
        Unsigned u = 0;
        for (std::size_t b = 0; b < sizeof(U); ++b)
            u |= static_cast<Unsigned>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
        pos_ += sizeof(U);
        return static_cast<U>(u);
    }

    std::string get_string(std::uint64_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

  private:
    void need(std::uint64_t n) const {
        if (bytes_.size() - pos_ < n) throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    const std::string &bytes_;
    std::size_t pos_ = 0;
};

} // namespace

const CheckpointEntry &Checkpoint::find(const std::string &name) const {
    for (const auto &e : entries)
        if (e.name == name) return e;
    throw DataError("checkpoint has no parameter named '" + name + "'");
}

std::string serialize_checkpoint(const Checkpoint &ckpt) {
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, ckpt.config_echo.size());
    out += ckpt.config_echo;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
    for (const auto &e : ckpt.entries) {
        if (static_cast<std::int64_t>(e.values.size()) != shape_numel(e.shape)) {
            throw ConfigError("checkpoint entry '" + e.name + "' has " + std::to_string(e.values.size()) +
                              " values for shape " + shape_string(e.shape));
        }
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out += e.name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) put<std::int64_t>(out, d);
        for (float v : e.values) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

Checkpoint parse_checkpoint(const std::string &bytes) {
    Reader r(bytes);
    if (r.get_string(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw DataError("not a checkpoint file (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.config_echo = r.get_string(r.get<std::uint64_t>());
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t n = 0; n < count; ++n) {
        CheckpointEntry e;
        e.name = r.get_string(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw DataError("checkpoint entry '" + e.name + "' has implausible rank " + std::to_string(rank));
        for (std::uint32_t a = 0; a < rank; ++a) {
            const auto d = r.get<std::int64_t>();
            if (d < 0) throw DataError("checkpoint entry '" + e.name + "' has a negative dimension");
            e.shape.push_back(d);
        }
        const auto numel = static_cast<std::uint64_t>(shape_numel(e.shape));
        if (numel > bytes.size()) throw DataError("checkpoint truncated in entry '" + e.name + "'");
        e.values.resize(numel);
        for (auto &v : e.values) v = std::bit_cast<float>(r.get<std::uint32_t>());
        ckpt.entries.push_back(std::move(e));
    }
    if (!r.done()) throw DataError("checkpoint has trailing bytes");
    return ckpt;
}

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt) {
    const auto bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint(ss.str());
}

} // namespace lmreg::tensor
