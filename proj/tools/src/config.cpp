#include "lmreg_cli/config.hpp"

#include "lmreg/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace lmreg::cli {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

bool has_section(const std::string &key) {
    for (const char *p : {"sim.", "net.", "reg.", "eval."})
        if (key.rfind(p, 0) == 0 && key.size() > std::string_view(p).size()) return true;
    return false;
}

std::vector<std::string> split_list(const std::string &value) {
    std::string v = value;
    std::replace(v.begin(), v.end(), ',', ' ');
    std::istringstream in(v);
    std::vector<std::string> out;
    for (std::string tok; in >> tok;) out.push_back(tok);
    return out;
}

double to_double(const std::string &key, const std::string &tok) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size())
        throw ConfigError("config: " + key + " expects a number, got '" + tok + "'");
    return v;
}

std::int64_t to_int(const std::string &key, const std::string &tok) {
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size())
        throw ConfigError("config: " + key + " expects an integer, got '" + tok + "'");
    return v;
}

Dims3 dims3(const FlatConfig &cfg, const std::string &key, const Dims3 &fallback) {
    const auto v = cfg.get_ints(key, {fallback[0], fallback[1], fallback[2]});
    if (v.size() != 3) throw ConfigError("config: " + key + " expects three integers (depth height width)");
    return {v[0], v[1], v[2]};
}

Range range(const FlatConfig &cfg, const std::string &key, const Range &fallback) {
    const auto v = cfg.get_doubles(key, {fallback.lo, fallback.hi});
    if (v.size() != 2) throw ConfigError("config: " + key + " expects two numbers (lo hi)");
    return {v[0], v[1]};
}

int to_int32(const std::string &key, std::int64_t v) {
    if (v < -2147483647 || v > 2147483647) throw ConfigError("config: " + key + " out of range");
    return static_cast<int>(v);
}

} // namespace

FlatConfig FlatConfig::parse(std::string_view text) {
    FlatConfig cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    for (int lineno = 1; std::getline(in, line); ++lineno) {
        const auto t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
        cfg.set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
    }
    return cfg;
}

FlatConfig FlatConfig::load(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return parse(os.str());
}

void FlatConfig::set(const std::string &key, const std::string &value) {
    if (!has_section(key)) throw ConfigError("config key '" + key + "' lacks a sim./net./reg./eval. prefix");
    values_[key] = value;
}

std::string FlatConfig::get_string(const std::string &key, const std::string &fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double FlatConfig::get_double(const std::string &key, double fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : to_double(key, it->second);
}

std::int64_t FlatConfig::get_int(const std::string &key, std::int64_t fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : to_int(key, it->second);
}

bool FlatConfig::get_bool(const std::string &key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto &v = it->second;
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw ConfigError("config: " + key + " expects true or false, got '" + v + "'");
}

std::vector<double> FlatConfig::get_doubles(const std::string &key, const std::vector<double> &fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    for (const auto &tok : split_list(it->second)) out.push_back(to_double(key, tok));
    return out;
}

std::vector<std::int64_t> FlatConfig::get_ints(const std::string &key, const std::vector<std::int64_t> &fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::int64_t> out;
    for (const auto &tok : split_list(it->second)) out.push_back(to_int(key, tok));
    return out;
}

void FlatConfig::require_known(const std::vector<std::string> &known) const {
    for (const auto &[key, value] : values_)
        if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config key '" + key + "'");
}

std::string FlatConfig::canonical() const {
    std::string out;
    for (const auto &[key, value] : values_) out += key + "=" + value + "\n";
    return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (const unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int n = 15; n >= 0; --n, v >>= 4) s[static_cast<std::size_t>(n)] = digits[v & 0xF];
    return s;
}

const std::vector<std::string> &known_keys() {
    static const std::vector<std::string> keys{
        "sim.dims", "sim.spacing", "sim.bump_magnitude_mm", "sim.bump_sigma_mm", "sim.noise_sigma",
        "sim.guidance_points", "sim.evaluation_points", "sim.min_displacement_mm", "sim.margin_mm",
        "net.levels", "net.base_channels", "net.top_k", "net.patch_dims", "net.inference_threshold",
        "net.gt_radius_voxels", "net.max_landmarks_per_patch", "net.sampling_margin", "net.variant", "net.steps",
        "net.learning_rate", "net.weight_decay", "net.phantoms", "net.phantom_dims", "net.threads",
        "reg.NumberOfResolutions", "reg.MaximumNumberOfIterations", "reg.NumberOfSpatialSamples",
        "reg.NumberOfHistogramBins", "reg.FinalGridSpacingInPhysicalUnits", "reg.SP_a", "reg.SP_A", "reg.SP_alpha",
        "reg.Metric0Weight", "reg.Metric1Weight", "reg.Metric2Weight", "reg.affine", "reg.affine_iterations",
        "eval.deformation_edges", "eval.error_threshold_mm", "eval.cdf_edges", "eval.overlay_axis",
        "eval.overlay_slices"};
    return keys;
}

PairSimulationConfig simulation_config(const FlatConfig &cfg) {
    PairSimulationConfig s;
    s.dims = dims3(cfg, "sim.dims", s.dims);
    const auto sp = cfg.get_doubles("sim.spacing", {s.spacing.x, s.spacing.y, s.spacing.z});
    if (sp.size() != 3) throw ConfigError("config: sim.spacing expects three numbers (x y z)");
    s.spacing = {sp[0], sp[1], sp[2]};
    s.bump_magnitude_mm = range(cfg, "sim.bump_magnitude_mm", s.bump_magnitude_mm);
    s.bump_sigma_mm = range(cfg, "sim.bump_sigma_mm", s.bump_sigma_mm);
    s.noise_sigma = cfg.get_double("sim.noise_sigma", s.noise_sigma);
    s.guidance_points = to_int32("sim.guidance_points", cfg.get_int("sim.guidance_points", s.guidance_points));
    s.evaluation_points = to_int32("sim.evaluation_points", cfg.get_int("sim.evaluation_points", s.evaluation_points));
    s.min_displacement_mm = cfg.get_double("sim.min_displacement_mm", s.min_displacement_mm);
    s.margin_mm = cfg.get_double("sim.margin_mm", s.margin_mm);
    s.validate();
    return s;
}

match::NetworkConfig network_config(const FlatConfig &cfg) {
    match::NetworkConfig n;
    n.levels = to_int32("net.levels", cfg.get_int("net.levels", n.levels));
    n.base_channels = to_int32("net.base_channels", cfg.get_int("net.base_channels", n.base_channels));
    n.top_k = to_int32("net.top_k", cfg.get_int("net.top_k", n.top_k));
    n.patch_dims = dims3(cfg, "net.patch_dims", n.patch_dims);
    n.inference_threshold = cfg.get_double("net.inference_threshold", n.inference_threshold);
    n.gt_radius_voxels = cfg.get_double("net.gt_radius_voxels", n.gt_radius_voxels);
    n.max_landmarks_per_patch =
        to_int32("net.max_landmarks_per_patch", cfg.get_int("net.max_landmarks_per_patch", n.max_landmarks_per_patch));
    n.sampling_margin = to_int32("net.sampling_margin", cfg.get_int("net.sampling_margin", n.sampling_margin));
    n.validate();
    return n;
}

TrainingSetup training_setup(const FlatConfig &cfg) {
    TrainingSetup t;
    t.train.steps = to_int32("net.steps", cfg.get_int("net.steps", t.train.steps));
    t.train.variant = match::LossVariant::parse(cfg.get_string("net.variant", "ce"));
    t.train.adam.lr = cfg.get_double("net.learning_rate", t.train.adam.lr);
    t.train.adam.weight_decay = cfg.get_double("net.weight_decay", t.train.adam.weight_decay);
    t.phantoms = to_int32("net.phantoms", cfg.get_int("net.phantoms", t.phantoms));
    t.phantom_dims = dims3(cfg, "net.phantom_dims", t.phantom_dims);
    if (t.phantoms < 1) throw ConfigError("config: net.phantoms must be positive");
    t.train.adam.validate();
    return t;
}

reg::RegistrationConfig registration_config(const FlatConfig &cfg) {
    reg::RegistrationConfig r;
    r.resolutions = to_int32("reg.NumberOfResolutions", cfg.get_int("reg.NumberOfResolutions", r.resolutions));
    std::vector<std::int64_t> iters(r.iterations.begin(), r.iterations.end());
    iters = cfg.get_ints("reg.MaximumNumberOfIterations", iters);
    r.iterations.clear();
    for (auto v : iters) r.iterations.push_back(to_int32("reg.MaximumNumberOfIterations", v));
    r.spatial_samples = to_int32("reg.NumberOfSpatialSamples", cfg.get_int("reg.NumberOfSpatialSamples", r.spatial_samples));
    r.histogram_bins = to_int32("reg.NumberOfHistogramBins", cfg.get_int("reg.NumberOfHistogramBins", r.histogram_bins));
    r.final_grid_spacing_mm = cfg.get_double("reg.FinalGridSpacingInPhysicalUnits", r.final_grid_spacing_mm);
    r.sp_a = cfg.get_doubles("reg.SP_a", r.sp_a);
    r.sp_A = cfg.get_doubles("reg.SP_A", r.sp_A);
    r.sp_alpha = cfg.get_double("reg.SP_alpha", r.sp_alpha);
    // A single value applies to every level; built-in per-level defaults are cut to the first
    // NumberOfResolutions entries when only the level count was changed.
    const auto fit = [&](auto &list, const char *key) {
        const auto n = static_cast<std::size_t>(std::max(r.resolutions, 1));
        if (list.size() == 1) list.assign(n, list.front());
        else if (!cfg.has(key) && list.size() > n) list.resize(n);
    };
    fit(r.iterations, "reg.MaximumNumberOfIterations");
    fit(r.sp_a, "reg.SP_a");
    fit(r.sp_A, "reg.SP_A");
    r.weight_mi = cfg.get_double("reg.Metric0Weight", r.weight_mi);
    r.weight_bending = cfg.get_double("reg.Metric1Weight", r.weight_bending);
    r.weight_points = cfg.get_double("reg.Metric2Weight", r.weight_points);
    r.validate();
    return r;
}

reg::AffineConfig affine_config(const FlatConfig &cfg) {
    reg::AffineConfig a;
    a.iterations = to_int32("reg.affine_iterations", cfg.get_int("reg.affine_iterations", a.iterations));
    a.histogram_bins = to_int32("reg.NumberOfHistogramBins", cfg.get_int("reg.NumberOfHistogramBins", a.histogram_bins));
    a.validate();
    return a;
}

EvaluationSetup evaluation_setup(const FlatConfig &cfg) {
    EvaluationSetup e;
    e.deformation_edges = cfg.get_doubles("eval.deformation_edges", eval::default_deformation_edges());
    e.error_threshold_mm = cfg.get_double("eval.error_threshold_mm", e.error_threshold_mm);
    std::vector<double> cdf;
    for (int mm = 0; mm <= 20; ++mm) cdf.push_back(mm);
    e.cdf_edges = cfg.get_doubles("eval.cdf_edges", cdf);
    e.overlay_axis = to_int32("eval.overlay_axis", cfg.get_int("eval.overlay_axis", e.overlay_axis));
    e.overlay_slices = cfg.get_ints("eval.overlay_slices", {});
    if (e.overlay_axis < 0 || e.overlay_axis > 2) throw ConfigError("config: eval.overlay_axis must be 0, 1 or 2");
    return e;
}

} // namespace lmreg::cli
