// config.hpp - flat key=value experiment configuration.
//
// One "key=value" per line; blank lines and lines starting with '#' are ignored. Keys carry a
// section prefix: sim., net., reg. or eval. List values are separated by spaces or commas.
// Registration keys reuse the parameter-map names of common registration toolboxes, e.g.
// reg.MaximumNumberOfIterations=300 600 900 1200.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "lmreg/dcnn_match.hpp"
#include "lmreg/deform_sim.hpp"
#include "lmreg/registration.hpp"

namespace lmreg::cli {

class FlatConfig {
  public:
    static FlatConfig parse(std::string_view text);
    static FlatConfig load(const std::filesystem::path &path);

    void set(const std::string &key, const std::string &value);
    bool has(const std::string &key) const { return values_.count(key) != 0; }
    const std::map<std::string, std::string> &values() const { return values_; }

    std::string get_string(const std::string &key, const std::string &fallback) const;
    double get_double(const std::string &key, double fallback) const;
    std::int64_t get_int(const std::string &key, std::int64_t fallback) const;
    bool get_bool(const std::string &key, bool fallback) const;
    std::vector<double> get_doubles(const std::string &key, const std::vector<double> &fallback) const;
    std::vector<std::int64_t> get_ints(const std::string &key, const std::vector<std::int64_t> &fallback) const;

    // Throws ConfigError naming the first key that is not in `known`.
    void require_known(const std::vector<std::string> &known) const;

    // Sorted "key=value" lines; the hashed and archived form.
    std::string canonical() const;

  private:
    std::map<std::string, std::string> values_;
};

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Every key the command-line front end understands.
const std::vector<std::string> &known_keys();

PairSimulationConfig simulation_config(const FlatConfig &cfg);
match::NetworkConfig network_config(const FlatConfig &cfg);

struct TrainingSetup {
    match::TrainConfig train;
    int phantoms = 6;
    Dims3 phantom_dims{32, 64, 64};
};
TrainingSetup training_setup(const FlatConfig &cfg);

reg::RegistrationConfig registration_config(const FlatConfig &cfg);
reg::AffineConfig affine_config(const FlatConfig &cfg);

struct EvaluationSetup {
    std::vector<double> deformation_edges;
    double error_threshold_mm = 4.0;
    std::vector<double> cdf_edges;
    int overlay_axis = 0;
    std::vector<std::int64_t> overlay_slices; // empty: middle slice
};
EvaluationSetup evaluation_setup(const FlatConfig &cfg);

} // namespace lmreg::cli
