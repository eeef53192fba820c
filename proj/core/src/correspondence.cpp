#include "lmreg/correspondence.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace lmreg {

namespace {

void append_number(std::string &out, double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    out.append(buf, res.ptr);
}

} // namespace

std::string format_correspondences(const CorrespondenceSet &set) {
    std::string out;
    for (const auto &c : set.pairs) {
        const double v[7] = {c.target.x, c.target.y, c.target.z, c.source.x, c.source.y, c.source.z, c.score};
        for (int n = 0; n < 7; ++n) {
            if (n) out.push_back(' ');
            append_number(out, v[n]);
        }
        out.push_back('\n');
    }
    return out;
}

CorrespondenceSet parse_correspondences(const std::string &text) {
    CorrespondenceSet set;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        std::vector<double> v;
        std::string tok;
        while (ls >> tok) {
            double x = 0;
            auto res = std::from_chars(tok.data(), tok.data() + tok.size(), x);
            if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
                throw DataError("correspondence line " + std::to_string(line_no) + ": bad number '" + tok + "'");
            }
            v.push_back(x);
        }
        if (v.size() != 7) {
            throw DataError("correspondence line " + std::to_string(line_no) + ": expected 7 values, got " +
                            std::to_string(v.size()));
        }
        Correspondence c{{v[0], v[1], v[2]}, {v[3], v[4], v[5]}, v[6]};
        if (!c.target.finite() || !c.source.finite() || !std::isfinite(c.score)) {
            throw DataError("correspondence line " + std::to_string(line_no) + ": non-finite value");
        }
        set.pairs.push_back(c);
    }
    return set;
}

void save_correspondences(const std::filesystem::path &path, const CorrespondenceSet &set) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << format_correspondences(set);
}

CorrespondenceSet load_correspondences(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_correspondences(ss.str());
}

} // namespace lmreg
