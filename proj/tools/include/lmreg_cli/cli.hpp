// cli.hpp - the lmreg command-line front end as a library, so tests can drive it in-process.
//
// Subcommands: simulate-pair, train, match, register, evaluate, gradcheck, report. Every
// subcommand that takes --out writes manifest.json and the effective config.txt there.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lmreg/gradcheck.hpp"

namespace lmreg::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitInternal = 1,
    kExitConfig = 2,  // bad flags, unknown subcommand, invalid configuration
    kExitData = 3,    // unreadable or inconsistent inputs
    kExitNumeric = 4, // non-finite values, failed inversion, failed gradient check
};

// argv[0] is the program name.
int cli_main(int argc, const char *const *argv);
int cli_main(const std::vector<std::string> &args);

// kExitNumeric when any check exceeds its tolerance.
int gradcheck_exit_code(std::span<const GradCheckResult> results);

struct RunManifest {
    std::string command_line;
    std::string subcommand;
    std::string config_hash; // FNV-1a of config_text, hex
    std::string config_text;
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::string started_at; // UTC, ISO 8601
    std::string finished_at;
    std::string code_version;
    int threads = 1;
};

void write_manifest(const std::filesystem::path &path, const RunManifest &m);
RunManifest read_manifest(const std::filesystem::path &path);

} // namespace lmreg::cli
