#include <doctest.h>

#include <json.hpp>

#include "lmreg/correspondence.hpp"
#include "lmreg/deform_sim.hpp"
#include "lmreg_cli/cli.hpp"
#include "lmreg_cli/config.hpp"
#include "test_support.hpp"

using namespace lmreg;
using namespace lmreg::cli;
using test_support::read_file;
using test_support::TempDir;

namespace {

int run(std::vector<std::string> args) {
    args.insert(args.begin(), "lmreg");
    return cli_main(args);
}

// Small enough to register in a few seconds.
const std::vector<std::string> kQuickSim{"--set", "sim.dims=32 32 32", "--set", "sim.guidance_points=10",
                                         "--set", "sim.evaluation_points=10"};
const std::vector<std::string> kQuickReg{"--set", "reg.NumberOfResolutions=2",
                                         "--set", "reg.MaximumNumberOfIterations=30 30",
                                         "--set", "reg.NumberOfSpatialSamples=1000",
                                         "--set", "reg.FinalGridSpacingInPhysicalUnits=16"};
const std::vector<std::string> kQuickNet{"--set", "net.levels=2",          "--set", "net.base_channels=4",
                                         "--set", "net.patch_dims=8 16 16", "--set", "net.top_k=16",
                                         "--set", "net.sampling_margin=1",  "--set", "net.phantoms=2",
                                         "--set", "net.phantom_dims=16 32 32"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string> &b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

} // namespace

TEST_CASE("flat config parsing") {
    const auto cfg = FlatConfig::parse("# comment\n\nsim.dims = 16, 32 48\nreg.SP_a=1000\nnet.variant=hinge\n");
    CHECK(cfg.get_ints("sim.dims", {}) == std::vector<std::int64_t>{16, 32, 48});
    CHECK(cfg.get_double("reg.SP_a", 0) == 1000.0);
    CHECK(cfg.get_string("net.variant", "") == "hinge");
    CHECK(cfg.get_int("net.steps", 7) == 7);
    CHECK(cfg.canonical() == "net.variant=hinge\nreg.SP_a=1000\nsim.dims=16, 32 48\n");

    CHECK_THROWS_AS(FlatConfig::parse("no equals sign\n"), ConfigError);
    CHECK_THROWS_AS(FlatConfig::parse("other.key=1\n"), ConfigError);
    CHECK_THROWS_AS(FlatConfig::parse("reg.SP_a=abc\n").get_double("reg.SP_a", 0), ConfigError);
    CHECK_THROWS_AS(FlatConfig::parse("reg.Bogus=1\n").require_known(known_keys()), ConfigError);
    CHECK_NOTHROW(cfg.require_known(known_keys()));
}

TEST_CASE("FNV-1a reference vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
    CHECK(hex64(0xaf63dc4c8601ec8cULL) == "af63dc4c8601ec8c");
}

TEST_CASE("registration keys map onto the registration config") {
    const auto cfg = registration_config(FlatConfig::parse(
        "reg.NumberOfResolutions=2\nreg.MaximumNumberOfIterations=10 20\nreg.Metric2Weight=0.25\nreg.SP_A=7\n"));
    CHECK(cfg.resolutions == 2);
    CHECK(cfg.iterations == std::vector<int>{10, 20});
    CHECK(cfg.weight_points == 0.25);
    CHECK(cfg.sp_A == std::vector<double>{7.0, 7.0});
    CHECK(cfg.sp_a.size() == 2);
    CHECK_THROWS_AS(registration_config(FlatConfig::parse("reg.NumberOfResolutions=3\nreg.MaximumNumberOfIterations=1 2\n")),
                    ConfigError);
}

TEST_CASE("gradient check exit status") {
    GradCheckResult ok{"op", 1e-6, 3, 1e-4};
    GradCheckResult bad{"op2", 5e-3, 3, 1e-4};
    const std::vector<GradCheckResult> good{ok};
    const std::vector<GradCheckResult> mixed{ok, bad};
    CHECK(gradcheck_exit_code(good) == kExitOk);
    CHECK(gradcheck_exit_code(mixed) == kExitNumeric);
}

TEST_CASE("usage errors map to the configuration exit code") {
    TempDir dir;
    const auto out = (dir.path() / "x").string();
    CHECK(run({"no-such-command"}) == kExitConfig);
    CHECK(run({"simulate-pair"}) == kExitConfig); // --out missing
    CHECK(run({"simulate-pair", "--out", out, "--set", "sim.bogus=1"}) == kExitConfig);
    CHECK(run({"register", "--out", out, "--target", "t.mhd", "--source", "s.mhd"}) == kExitConfig);
    CHECK(run({"register", "--out", out, "--target", "t.mhd", "--source", "s.mhd", "--guidance", "g.txt",
               "--no-guidance"}) == kExitConfig);
    CHECK(run({"evaluate", "--out", out}) == kExitConfig);
    CHECK(run({"register", "--out", out, "--target", (dir.path() / "missing.mhd").string(), "--source",
               (dir.path() / "missing.mhd").string(), "--no-guidance"}) == kExitData);
}

TEST_CASE("simulate, register and evaluate end to end") {
    TempDir dir;
    const auto sim = dir.path() / "sim";
    REQUIRE(run(cat({"simulate-pair", "--seed", "5", "--out", sim.string()}, kQuickSim)) == kExitOk);
    const auto sim2 = dir.path() / "sim2";
    REQUIRE(run(cat({"simulate-pair", "--seed", "5", "--out", sim2.string()}, kQuickSim)) == kExitOk);
    for (const char *f : {"target.raw", "source.raw", "dvf.raw", "guidance.txt", "evaluation.txt", "config.txt"})
        CHECK(read_file(sim / f) == read_file(sim2 / f));

    const auto manifest = read_manifest(sim / "manifest.json");
    CHECK(manifest.subcommand == "simulate-pair");
    CHECK(manifest.seed == 5);
    CHECK(manifest.config_hash == hex64(fnv1a64(read_file(sim / "config.txt"))));

    const std::vector<std::string> io{"--target", (sim / "target.mhd").string(), "--source",
                                      (sim / "source.mhd").string(), "--seed", "9"};
    const auto reg_a = dir.path() / "reg_a";
    const auto reg_b = dir.path() / "reg_b";
    const auto reg_n = dir.path() / "reg_n";
    const auto guide = (sim / "guidance.txt").string();
    REQUIRE(run(cat(cat({"register", "--out", reg_a.string(), "--guidance", guide}, io), kQuickReg)) == kExitOk);
    REQUIRE(run(cat(cat({"register", "--out", reg_b.string(), "--guidance", guide}, io), kQuickReg)) == kExitOk);
    CHECK(read_file(reg_a / "dvf.raw") == read_file(reg_b / "dvf.raw"));
    CHECK(read_file(reg_a / "bspline.txt") == read_file(reg_b / "bspline.txt"));

    REQUIRE(run(cat(cat({"register", "--out", reg_n.string(), "--no-guidance"}, io), kQuickReg)) == kExitOk);
    CHECK(read_file(reg_n / "config.txt").find("reg.Metric2Weight=0\n") != std::string::npos);
    const auto summary = nlohmann::json::parse(read_file(reg_n / "registration_summary.json"));
    CHECK(summary["weight_points"].get<double>() == 0.0);
    CHECK(summary["guidance_pairs"].get<int>() == 0);

    const auto ev = dir.path() / "eval";
    REQUIRE(run({"evaluate", "--out", ev.string(), "--true-dvf", (sim / "dvf.mhd").string(), "--evaluation",
                 (sim / "evaluation.txt").string(), "--registered-dvf", (reg_a / "dvf.mhd").string(), "--target",
                 (sim / "target.mhd").string(), "--warped", (reg_a / "warped_source.mhd").string()}) == kExitOk);
    const auto es = nlohmann::json::parse(read_file(ev / "summary.json"));
    CHECK(es["tre_after"]["mean"].get<double>() < es["tre_before"]["mean"].get<double>());
    CHECK(std::filesystem::exists(ev / "tre.csv"));
    CHECK(std::filesystem::exists(ev / "jacobian_histogram.csv"));

    const auto rep = dir.path() / "report";
    REQUIRE(run({"report", "--out", rep.string(), ev.string()}) == kExitOk);
    CHECK(read_file(rep / "report.csv").find("tre_before_mean_mm") != std::string::npos);
}

TEST_CASE("training and matching are reproducible") {
    TempDir dir;
    const auto a = dir.path() / "a";
    const auto b = dir.path() / "b";
    const std::vector<std::string> base{"train", "--seed", "3", "--steps", "3", "--variant", "hinge-ce"};
    REQUIRE(run(cat(cat(base, {"--out", a.string()}), kQuickNet)) == kExitOk);
    REQUIRE(run(cat(cat(base, {"--out", b.string()}), kQuickNet)) == kExitOk);
    CHECK(read_file(a / "model.ckpt") == read_file(b / "model.ckpt"));
    CHECK(read_file(a / "loss_curve.csv") == read_file(b / "loss_curve.csv"));

    const auto sim = dir.path() / "sim";
    REQUIRE(run(cat({"simulate-pair", "--seed", "2", "--out", sim.string()}, kQuickSim)) == kExitOk);
    const auto m1 = dir.path() / "m1";
    const auto m2 = dir.path() / "m2";
    const std::vector<std::string> io{"--target", (sim / "target.mhd").string(), "--source",
                                      (sim / "source.mhd").string(), "--model", (a / "model.ckpt").string()};
    REQUIRE(run(cat(cat({"match", "--out", m1.string()}, io), kQuickNet)) == kExitOk);
    REQUIRE(run(cat(cat({"match", "--out", m2.string(), "--threads", "2"}, io), kQuickNet)) == kExitOk);
    CHECK(read_file(m1 / "correspondences.txt") == read_file(m2 / "correspondences.txt"));
    CHECK_NOTHROW(load_correspondences(m1 / "correspondences.txt"));
}
