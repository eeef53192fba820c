#include "lmreg_cli/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lmreg/correspondence.hpp"
#include "lmreg/dcnn_match.hpp"
#include "lmreg/deform_sim.hpp"
#include "lmreg/evaluation.hpp"
#include "lmreg/gradcheck.hpp"
#include "lmreg/log.hpp"
#include "lmreg/registration.hpp"
#include "lmreg_cli/config.hpp"

namespace lmreg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

int env_threads() {
    if (const char *v = std::getenv("LMREG_THREADS")) {
        const int n = std::atoi(v);
        if (n >= 1) return n;
    }
    return 1;
}

json report_json(const eval::ErrorReport &r) {
    return {{"count", r.count}, {"dropped", r.dropped}, {"mean", r.mean}, {"std", r.std},
            {"percentile_5", r.percentile_5}, {"percentile_95", r.percentile_95}};
}

void write_json(const fs::path &path, const json &j) { eval::write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path &path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception &e) {
        throw DataError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

std::string format_lattice(const reg::BSplineTransform &t) {
    std::ostringstream os;
    os.precision(17);
    os << "# cubic B-spline lattice; coefficients in mm, x index fastest\n";
    os << "size " << t.size()[0] << ' ' << t.size()[1] << ' ' << t.size()[2] << '\n';
    os << "spacing " << t.spacing().x << ' ' << t.spacing().y << ' ' << t.spacing().z << '\n';
    os << "origin " << t.origin().x << ' ' << t.origin().y << ' ' << t.origin().z << '\n';
    for (const auto &c : t.coefficients()) os << c.x << ' ' << c.y << ' ' << c.z << '\n';
    return os.str();
}

std::string format_affine(const AffineTransform3 &a) {
    std::ostringstream os;
    os.precision(17);
    os << "# x' = linear * x + translation (mm)\n";
    for (int r = 0; r < 3; ++r) os << a.linear(r, 0) << ' ' << a.linear(r, 1) << ' ' << a.linear(r, 2) << ' ' << a.translation[static_cast<std::size_t>(r)] << '\n';
    return os.str();
}

std::string trace_csv(const std::vector<reg::TraceEntry> &trace) {
    std::ostringstream os;
    os.precision(17);
    os << "level,iteration,objective,mi,bending,points\n";
    for (const auto &e : trace)
        os << e.level << ',' << e.iteration << ',' << e.objective << ',' << e.mi << ',' << e.bending << ',' << e.points << '\n';
    return os.str();
}

std::string curve_csv(const std::vector<match::StepRecord> &curve) {
    std::ostringstream os;
    os.precision(9);
    os << "step,total,landmark_target,landmark_source,hinge,ce,k_pos,target_hits,source_hits,transform\n";
    for (const auto &s : curve)
        os << s.step << ',' << s.total << ',' << s.landmark_target << ',' << s.landmark_source << ',' << s.hinge << ','
           << s.ce << ',' << s.k_pos << ',' << s.target_hits << ',' << s.source_hits << ',' << static_cast<int>(s.transform)
           << '\n';
    return os.str();
}

// Shared state of one invocation: effective config, manifest, output directory.
struct Run {
    std::vector<std::string> args;
    std::string config_file;
    std::vector<std::string> overrides;
    std::string out;
    std::uint64_t seed = 0;
    FlatConfig config;
    RunManifest manifest;

    void load_config(const std::string &subcommand) {
        if (!config_file.empty()) {
            config = FlatConfig::load(config_file);
            manifest.inputs.push_back(config_file);
        }
        for (const auto &kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            config.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        config.require_known(known_keys());
        manifest.subcommand = subcommand;
        manifest.seed = seed;
        manifest.started_at = utc_now();
        manifest.code_version = LMREG_VERSION;
        std::string cl;
        for (const auto &a : args) cl += (cl.empty() ? "" : " ") + a;
        manifest.command_line = cl;
    }

    fs::path output(const std::string &name) {
        fs::create_directories(out);
        const auto p = fs::path(out) / name;
        manifest.outputs.push_back(p.string());
        return p;
    }

    void finish() {
        if (out.empty()) return;
        manifest.config_text = config.canonical();
        manifest.config_hash = hex64(fnv1a64(manifest.config_text));
        eval::write_text(output("config.txt"), manifest.config_text);
        manifest.finished_at = utc_now();
        write_manifest(fs::path(out) / "manifest.json", manifest);
    }
};

void add_common(CLI::App *cmd, Run &run, bool out_required) {
    cmd->add_option("--config", run.config_file, "flat key=value config file");
    cmd->add_option("--set", run.overrides, "config override key=value (repeatable)");
    auto *o = cmd->add_option("--out", run.out, "output directory");
    if (out_required) o->required();
    cmd->add_option("--seed", run.seed, "random seed");
}

// ---- subcommands ------------------------------------------------------------------------------

void simulate_pair_cmd(Run &run) {
    run.load_config("simulate-pair");
    const auto cfg = simulation_config(run.config);
    const auto pair = simulate_pair(run.seed, cfg);
    save_volume(run.output("target.mhd"), pair.target);
    save_volume(run.output("source.mhd"), pair.source);
    save_dvf(run.output("dvf.mhd"), pair.dvf);
    save_correspondences(run.output("guidance.txt"), pair.guidance);
    save_correspondences(run.output("evaluation.txt"), pair.evaluation);
    std::cout << "simulated pair seed " << run.seed << ": " << pair.guidance.size() << " guidance and "
              << pair.evaluation.size() << " evaluation correspondences\n";
}

struct TrainOptions {
    std::string variant;
    int steps = -1;
    std::vector<std::string> volumes;
};

void train_cmd(Run &run, const TrainOptions &opt) {
    if (!opt.variant.empty()) run.overrides.push_back("net.variant=" + opt.variant);
    if (opt.steps >= 0) run.overrides.push_back("net.steps=" + std::to_string(opt.steps));
    run.load_config("train");
    const auto net_cfg = network_config(run.config);
    auto setup = training_setup(run.config);
    setup.train.seed = run.seed;
    std::vector<Volume3> dataset;
    if (opt.volumes.empty()) {
        SeededRng rng = SeededRng(run.seed).fork(2);
        for (int n = 0; n < setup.phantoms; ++n) dataset.push_back(make_phantom(rng, Grid3{setup.phantom_dims, {2, 2, 2}, {}}));
    } else {
        for (const auto &v : opt.volumes) {
            dataset.push_back(load_volume(v));
            run.manifest.inputs.push_back(v);
        }
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto result = match::train(dataset, net_cfg, setup.train, [&](const match::StepRecord &s) {
        if (s.step % 100 == 0) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::cout << "step " << s.step << " loss " << s.total << " (" << secs << " s)\n" << std::flush;
        }
    });
    result.checkpoint.config_echo += "net.variant=" + setup.train.variant.name() + "\n";
    tensor::save_checkpoint(run.output("model.ckpt"), result.checkpoint);
    eval::write_text(run.output("loss_curve.csv"), curve_csv(result.curve));
    if (!result.curve.empty()) {
        const auto sm = match::smoothed_losses(result.curve);
        const auto first = sm[std::min<std::size_t>(19, sm.size() - 1)];
        write_json(run.output("training_summary.json"),
                   {{"steps", result.curve.size()}, {"variant", setup.train.variant.name()},
                    {"smoothed_first", first}, {"smoothed_last", sm.back()}});
        std::cout << "smoothed loss " << first << " -> " << sm.back() << "\n";
    }
}

std::string checkpoint_variant(const tensor::Checkpoint &ckpt) {
    std::istringstream in(ckpt.config_echo);
    for (std::string line; std::getline(in, line);)
        if (line.rfind("net.variant=", 0) == 0) return line.substr(12);
    return {};
}

struct MatchOptions {
    std::string target, source, model, variant;
    int threads = 0;
};

void match_cmd(Run &run, const MatchOptions &opt) {
    run.load_config("match");
    run.manifest.inputs.insert(run.manifest.inputs.end(), {opt.target, opt.source, opt.model});
    const auto target = load_volume(opt.target);
    const auto source = load_volume(opt.source);
    const auto ckpt = tensor::load_checkpoint(opt.model);
    std::string variant_name = opt.variant.empty() ? checkpoint_variant(ckpt) : opt.variant;
    if (variant_name.empty()) throw ConfigError("match: the model does not record its loss variant; pass --variant");
    const auto variant = match::LossVariant::parse(variant_name);
    const auto net = match::MatchNetwork<float>::from_checkpoint(ckpt);
    match::InferenceOptions io;
    io.threads = opt.threads > 0 ? opt.threads : static_cast<int>(run.config.get_int("net.threads", env_threads()));
    run.manifest.threads = io.threads;
    const auto pairs = match::infer_pairs(target, source, net, variant, io);
    save_correspondences(run.output("correspondences.txt"), pairs);
    std::cout << pairs.size() << " correspondences\n";
}

struct RegisterOptions {
    std::string target, source, guidance;
    bool no_guidance = false;
};

void register_cmd(Run &run, const RegisterOptions &opt) {
    if (opt.no_guidance == !opt.guidance.empty())
        throw ConfigError("register: pass exactly one of --guidance <file> and --no-guidance");
    if (opt.no_guidance) run.overrides.push_back("reg.Metric2Weight=0");
    run.load_config("register");
    run.manifest.inputs.insert(run.manifest.inputs.end(), {opt.target, opt.source});
    auto cfg = registration_config(run.config);
    cfg.seed = run.seed;
    const auto target = load_volume(opt.target);
    auto source = load_volume(opt.source);
    CorrespondenceSet guidance;
    if (!opt.guidance.empty()) {
        guidance = load_correspondences(opt.guidance);
        run.manifest.inputs.push_back(opt.guidance);
    }

    // Optional affine stage: the deformable stage then registers the affinely resampled source and
    // the final map is affine(bspline(x)).
    std::optional<AffineTransform3> affine;
    if (run.config.get_bool("reg.affine", false)) {
        auto acfg = affine_config(run.config);
        acfg.seed = run.seed;
        affine = reg::affine_register(target, source, acfg);
        source = reg::resample_affine(source, *affine, target.grid());
        eval::write_text(run.output("affine.txt"), format_affine(*affine));
        if (!guidance.empty()) {
            // Guidance source points must be expressed in the resampled source frame.
            const auto inv = affine->inverse();
            for (auto &c : guidance.pairs) c.source = inv.apply(c.source);
        }
    }
    const auto res = reg::register_deformable(target, source, guidance, cfg);
    DenseDVF dvf = res.dense_dvf;
    if (affine) {
        const auto &g = dvf.grid();
        for (std::int64_t i = 0; i < g.dims[0]; ++i)
            for (std::int64_t j = 0; j < g.dims[1]; ++j)
                for (std::int64_t k = 0; k < g.dims[2]; ++k) {
                    const auto x = g.world(i, j, k);
                    dvf.at(i, j, k) = affine->apply(x + dvf.at(i, j, k)) - x;
                }
    }
    save_dvf(run.output("dvf.mhd"), dvf);
    save_volume(run.output("warped_source.mhd"), warp_volume(load_volume(opt.source), dvf));
    eval::write_text(run.output("bspline.txt"), format_lattice(res.transform));
    eval::write_text(run.output("trace.csv"), trace_csv(res.trace));
    const auto jac = eval::jacobian_report(dvf);
    write_json(run.output("registration_summary.json"),
               {{"guidance_pairs", guidance.size()}, {"dropped_guidance", res.dropped_guidance},
                {"weight_points", cfg.weight_points}, {"final_objective", res.trace.empty() ? 0.0 : res.trace.back().objective},
                {"min_jacobian", jac.min_determinant}, {"min_interior_jacobian", jac.min_interior},
                {"fraction_nonpositive_jacobian", jac.fraction_nonpositive}});
    std::cout << "registered in " << res.elapsed_seconds << " s; min Jacobian " << jac.min_determinant << "\n";
}

struct EvaluateOptions {
    std::string true_dvf, pairs, evaluation, registered_dvf, target, warped;
};

void evaluate_cmd(Run &run, const EvaluateOptions &opt) {
    run.load_config("evaluate");
    const auto setup = evaluation_setup(run.config);
    json summary;
    if (!opt.pairs.empty()) {
        if (opt.true_dvf.empty()) throw ConfigError("evaluate: --pairs needs --true-dvf");
        const auto dvf = load_dvf(opt.true_dvf);
        const auto pairs = load_correspondences(opt.pairs);
        run.manifest.inputs.insert(run.manifest.inputs.end(), {opt.true_dvf, opt.pairs});
        const auto rep = eval::spatial_matching_error(pairs, dvf);
        eval::write_text(run.output("matching_errors.csv"), eval::errors_csv(rep));
        json m = report_json(rep);
        if (rep.count > 0) {
            const auto cdf = eval::cumulative_error_distribution(rep.errors, setup.cdf_edges);
            eval::write_text(run.output("matching_cdf.csv"), eval::cdf_csv(cdf));
            std::size_t below = 0;
            for (double e : rep.errors) below += e < setup.error_threshold_mm ? 1 : 0;
            m["fraction_below_threshold"] = static_cast<double>(below) / static_cast<double>(rep.count);
            m["threshold_mm"] = setup.error_threshold_mm;
        }
        const auto hist = eval::landmark_deformation_histogram(pairs, dvf, setup.deformation_edges, setup.error_threshold_mm);
        eval::write_text(run.output("deformation_histogram.csv"), eval::deformation_histogram_csv(hist));
        summary["matching"] = m;
    }
    if (!opt.evaluation.empty()) {
        const auto ev = load_correspondences(opt.evaluation);
        run.manifest.inputs.push_back(opt.evaluation);
        const auto before = eval::tre(ev, eval::identity_map());
        summary["tre_before"] = report_json(before);
        std::ostringstream os;
        os.precision(17);
        if (!opt.registered_dvf.empty()) {
            const auto after = eval::tre(ev, eval::dvf_map(load_dvf(opt.registered_dvf)));
            summary["tre_after"] = report_json(after);
            os << "index,tre_before_mm,tre_after_mm\n";
            for (std::size_t n = 0; n < ev.size(); ++n) os << n << ',' << before.errors[n] << ',' << after.errors[n] << '\n';
        } else {
            os << "index,tre_before_mm\n";
            for (std::size_t n = 0; n < ev.size(); ++n) os << n << ',' << before.errors[n] << '\n';
        }
        eval::write_text(run.output("tre.csv"), os.str());
    }
    if (!opt.registered_dvf.empty()) {
        run.manifest.inputs.push_back(opt.registered_dvf);
        const auto jac = eval::jacobian_report(load_dvf(opt.registered_dvf));
        eval::write_text(run.output("jacobian_histogram.csv"), eval::jacobian_histogram_csv(jac));
        summary["jacobian"] = {{"min", jac.min_determinant}, {"min_interior", jac.min_interior},
                               {"max", jac.max_determinant}, {"fraction_nonpositive", jac.fraction_nonpositive}};
    }
    if (!opt.target.empty() || !opt.warped.empty()) {
        if (opt.target.empty() || opt.warped.empty()) throw ConfigError("evaluate: overlays need both --target and --warped");
        const auto t = load_volume(opt.target);
        const auto w = load_volume(opt.warped);
        run.manifest.inputs.insert(run.manifest.inputs.end(), {opt.target, opt.warped});
        auto slices = setup.overlay_slices;
        if (slices.empty()) slices.push_back(t.dims()[static_cast<std::size_t>(setup.overlay_axis)] / 2);
        for (const auto &p : eval::overlay_slices(t, w, setup.overlay_axis, slices, fs::path(run.out) / "overlays"))
            run.manifest.outputs.push_back(p.string());
    }
    if (summary.is_null()) throw ConfigError("evaluate: nothing to evaluate; pass --pairs, --evaluation, --registered-dvf or overlays");
    write_json(run.output("summary.json"), summary);
    std::cout << summary.dump(2) << "\n";
}

int gradcheck_cmd(Run &run) {
    run.load_config("gradcheck");
    auto results = tensor_op_gradcheck_suite(run.seed);
    const auto metric = reg::metric_gradcheck_suite(run.seed);
    results.insert(results.end(), metric.begin(), metric.end());
    std::ostringstream os;
    os.precision(6);
    os << "name,checked,max_relative_error,tolerance,passed\n";
    bool ok = true;
    for (const auto &r : results) {
        ok = ok && r.passed();
        os << r.name << ',' << r.checked << ',' << r.max_relative_error << ',' << r.tolerance << ',' << (r.passed() ? 1 : 0) << '\n';
        std::cout << (r.passed() ? "ok   " : "FAIL ") << r.name << "  max rel err " << r.max_relative_error << " (tol "
                  << r.tolerance << ", " << r.checked << " coords)\n";
    }
    if (!run.out.empty()) eval::write_text(run.output("gradcheck.csv"), os.str());
    std::cout << (ok ? "all gradient checks passed\n" : "gradient check FAILED\n");
    return gradcheck_exit_code(results);
}

void report_cmd(Run &run, const std::vector<std::string> &inputs) {
    run.load_config("report");
    if (inputs.empty()) throw ConfigError("report: list at least one evaluate output directory");
    std::ostringstream table, paired;
    table.precision(10);
    paired.precision(17);
    table << "run,matching_count,matching_mean_mm,matching_fraction_below_threshold,tre_before_mean_mm,tre_after_mean_mm,"
             "min_jacobian\n";
    paired << "run,index,tre_before_mm,tre_after_mm\n";
    json runs = json::array();
    auto field = [](const json &j, const char *section, const char *key) -> std::string {
        if (!j.contains(section) || !j[section].contains(key)) return "";
        std::ostringstream os;
        os.precision(10);
        os << j[section][key].get<double>();
        return os.str();
    };
    for (const auto &dir : inputs) {
        const auto summary = read_json(fs::path(dir) / "summary.json");
        run.manifest.inputs.push_back(dir);
        table << dir << ',' << field(summary, "matching", "count") << ',' << field(summary, "matching", "mean") << ','
              << field(summary, "matching", "fraction_below_threshold") << ',' << field(summary, "tre_before", "mean") << ','
              << field(summary, "tre_after", "mean") << ',' << field(summary, "jacobian", "min") << '\n';
        const auto tre_path = fs::path(dir) / "tre.csv";
        if (fs::exists(tre_path)) {
            std::ifstream in(tre_path);
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line))
                if (!line.empty()) paired << dir << ',' << line << '\n';
        }
        runs.push_back({{"run", dir}, {"summary", summary}});
    }
    eval::write_text(run.output("report.csv"), table.str());
    eval::write_text(run.output("paired_tre.csv"), paired.str());
    write_json(run.output("report.json"), {{"runs", runs}});
    std::cout << table.str();
}

} // namespace

int gradcheck_exit_code(std::span<const GradCheckResult> results) {
    for (const auto &r : results)
        if (!r.passed()) return kExitNumeric;
    return kExitOk;
}

void write_manifest(const fs::path &path, const RunManifest &m) {
    const json j{{"command_line", m.command_line}, {"subcommand", m.subcommand},   {"config_hash", m.config_hash},
                 {"config", m.config_text},        {"seed", m.seed},               {"inputs", m.inputs},
                 {"outputs", m.outputs},           {"started_at", m.started_at},   {"finished_at", m.finished_at},
                 {"code_version", m.code_version}, {"threads", m.threads}};
    write_json(path, j);
}

RunManifest read_manifest(const fs::path &path) {
    const auto j = read_json(path);
    RunManifest m;
    try {
        m.command_line = j.at("command_line").get<std::string>();
        m.subcommand = j.at("subcommand").get<std::string>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.config_text = j.at("config").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.inputs = j.at("inputs").get<std::vector<std::string>>();
        m.outputs = j.at("outputs").get<std::vector<std::string>>();
        m.started_at = j.at("started_at").get<std::string>();
        m.finished_at = j.at("finished_at").get<std::string>();
        m.code_version = j.at("code_version").get<std::string>();
        m.threads = j.at("threads").get<int>();
    } catch (const json::exception &e) {
        throw DataError("manifest " + path.string() + ": " + e.what());
    }
    return m;
}

int cli_main(const std::vector<std::string> &args) {
    CLI::App app{"lmreg: landmark matching and guided deformable registration"};
    app.require_subcommand(1);
    Run run;
    run.args = args;

    auto *sim = app.add_subcommand("simulate-pair", "simulate a target/source pair with its true DVF and correspondences");
    add_common(sim, run, true);

    TrainOptions topt;
    auto *train = app.add_subcommand("train", "train the matching network on simulated pairs");
    add_common(train, run, true);
    train->add_option("--variant", topt.variant, "hinge, ce, hinge-ce, hinge01-ce or hinge02-ce");
    train->add_option("--steps", topt.steps, "training steps");
    train->add_option("--volumes", topt.volumes, "training volumes (default: synthetic phantoms)");

    MatchOptions mopt;
    auto *match = app.add_subcommand("match", "predict landmark correspondences between two volumes");
    add_common(match, run, true);
    match->add_option("--target", mopt.target)->required();
    match->add_option("--source", mopt.source)->required();
    match->add_option("--model", mopt.model)->required();
    match->add_option("--variant", mopt.variant, "override the variant stored with the model");
    match->add_option("--threads", mopt.threads, "patch workers (default LMREG_THREADS or 1)");

    RegisterOptions ropt;
    auto *regc = app.add_subcommand("register", "B-spline registration, optionally guided by correspondences");
    add_common(regc, run, true);
    regc->add_option("--target", ropt.target)->required();
    regc->add_option("--source", ropt.source)->required();
    auto *g = regc->add_option("--guidance", ropt.guidance, "correspondence table used as guidance");
    auto *ng = regc->add_flag("--no-guidance", ropt.no_guidance, "image terms only (points weight 0)");
    g->excludes(ng);

    EvaluateOptions eopt;
    auto *evalc = app.add_subcommand("evaluate", "matching error, TRE, Jacobian statistics and overlays");
    add_common(evalc, run, true);
    evalc->add_option("--true-dvf", eopt.true_dvf, "simulated DVF for matching errors");
    evalc->add_option("--pairs", eopt.pairs, "predicted correspondences");
    evalc->add_option("--evaluation", eopt.evaluation, "true correspondences for TRE");
    evalc->add_option("--registered-dvf", eopt.registered_dvf, "registration output DVF");
    evalc->add_option("--target", eopt.target, "target volume for overlays");
    evalc->add_option("--warped", eopt.warped, "warped source volume for overlays");

    auto *grad = app.add_subcommand("gradcheck", "finite-difference checks of every differentiable operation");
    add_common(grad, run, false);

    std::vector<std::string> report_inputs;
    auto *rep = app.add_subcommand("report", "aggregate several evaluate outputs");
    add_common(rep, run, true);
    rep->add_option("inputs", report_inputs, "evaluate output directories");

    std::vector<const char *> argv;
    for (const auto &a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        int code = kExitOk;
        if (sim->parsed()) simulate_pair_cmd(run);
        else if (train->parsed()) train_cmd(run, topt);
        else if (match->parsed()) match_cmd(run, mopt);
        else if (regc->parsed()) register_cmd(run, ropt);
        else if (evalc->parsed()) evaluate_cmd(run, eopt);
        else if (grad->parsed()) code = gradcheck_cmd(run);
        else if (rep->parsed()) report_cmd(run, report_inputs);
        run.finish();
        return code;
    } catch (const ConfigError &e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError &e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const DataError &e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInternal;
    }
}

int cli_main(int argc, const char *const *argv) { return cli_main(std::vector<std::string>(argv, argv + argc)); }

} // namespace lmreg::cli
