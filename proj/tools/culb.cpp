// culb — continual-unlearning lab for a toy text-conditioned diffusion model.
//
// Subcommands:
//   gen-world   build the synthetic concept world + recognition classifiers
//   train-base  train the base checkpoint and verify the generation gate
//   unlearn     run a request sequence under a strategy, with metrics
//   analyze     smoothness / taylor / similarity / kvshift studies
//   report      compare runs (per-request harmonic mean, baseline-normalized)
//
// Exit codes: 0 success, 1 validation failure, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "culb/analysis.hpp"
#include "culb/bench.hpp"
#include "culb/config.hpp"
#include "culb/container.hpp"
#include "culb/errors.hpp"

namespace fs = std::filesystem;
using namespace culb;

namespace {

struct Paths {
    fs::path out;
    fs::path world() const { return out / "world.culb"; }
    fs::path classifiers() const { return out / "classifiers.culb"; }
    fs::path theta_dagger() const { return out / "theta_dagger.culb"; }
    fs::path analysis_dir() const { return out / "analysis"; }
};

struct LoadedStack {
    World world;
    ClassifierPair classifiers;
    ModelCheckpoint theta_dagger;
};

World load_world_checked(const Paths& p) {
    if (!fs::exists(p.world())) {
        throw ValidationError("missing " + p.world().string() + " (run gen-world first)");
    }
    return read_world(p.world());
}

ClassifierPair load_classifiers_checked(const Paths& p, const World& world) {
    if (!fs::exists(p.classifiers())) {
        throw ValidationError("missing " + p.classifiers().string() + " (run gen-world first)");
    }
    ClassifierPair cp = read_classifiers(p.classifiers());
    if (cp.world_hash != world.content_hash()) {
        throw ValidationError("classifier file does not match the world file");
    }
    return cp;
}

ModelCheckpoint load_theta_checked(const Paths& p, const World& world) {
    if (!fs::exists(p.theta_dagger())) {
        throw ValidationError("missing " + p.theta_dagger().string() + " (run train-base first)");
    }
    ModelCheckpoint ck = read_model_checkpoint(p.theta_dagger());
    if (ck.world_hash != world.content_hash()) {
        throw ValidationError("base checkpoint does not match the world file");
    }
    return ck;
}

NoiseSchedule schedule_from(const ExperimentConfig& cfg) {
    return NoiseSchedule::linear(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end);
}

ModelDims dims_from(const ExperimentConfig& cfg) {
    ModelDims d = cfg.dims;
    d.D = cfg.world.D;
    d.e = cfg.world.e;
    return d;
}

int cmd_gen_world(const ExperimentConfig& cfg) {
    validate_experiment(cfg);
    const Paths paths{cfg.output_dir};
    const World world = generate_world(cfg.world);

    RngStream style_rng = seeded_stream(cfg.classifier.seed, 0);
    RngStream object_rng = seeded_stream(cfg.classifier.seed, 1);
    ClassifierPair cp;
    cp.style = train_classifier(world, Domain::style, cfg.classifier.n_per_pair, style_rng,
                                cfg.classifier.train);
    cp.object = train_classifier(world, Domain::object, cfg.classifier.n_per_pair, object_rng,
                                 cfg.classifier.train);
    cp.world_hash = world.content_hash();

    RngStream acc_rng = seeded_stream(cfg.classifier.seed, 2);
    const double style_acc = classifier_accuracy(world, cp.style, 20, acc_rng);
    const double object_acc = classifier_accuracy(world, cp.object, 20, acc_rng);

    write_world(paths.world(), world);
    write_classifiers(paths.classifiers(), cp);
    std::printf("world %s  (S=%zu O=%zu, hash %s)\n", paths.world().c_str(), world.num_styles(),
                world.num_objects(), world.content_hash().c_str());
    std::printf("classifier accuracy: style %.4f, object %.4f\n", style_acc, object_acc);
    return 0;
}

int cmd_train_base(const ExperimentConfig& cfg) {
    validate_experiment(cfg);
    const Paths paths{cfg.output_dir};
    const World world = load_world_checked(paths);
    const ClassifierPair cp = load_classifiers_checked(paths, world);

    GateResult gate;
    const ModelCheckpoint ck = train_base(world, cp.style, cp.object, dims_from(cfg),
                                          schedule_from(cfg), cfg.train, &gate);
    write_model_checkpoint(paths.theta_dagger(), ck);
    std::printf("base checkpoint %s\n", paths.theta_dagger().c_str());
    std::printf("gate: style %.4f object %.4f (min pair %.2f/%.2f) -> %s\n", gate.style_accuracy,
                gate.object_accuracy, gate.min_pair_style, gate.min_pair_object,
                gate.pass ? "pass" : "FAIL");
    return 0;
}

int cmd_unlearn(const ExperimentConfig& cfg, const std::string& run_dir_flag) {
    validate_experiment(cfg);
    const Paths paths{cfg.output_dir};
    const World world = load_world_checked(paths);
    const ClassifierPair cp = load_classifiers_checked(paths, world);
    const ModelCheckpoint theta = load_theta_checked(paths, world);

    BenchmarkInputs in;
    in.world = &world;
    in.style_cl = &cp.style;
    in.object_cl = &cp.object;
    in.theta_dagger = &theta;
    in.requests = build_requests(cfg, world);
    in.strategy = cfg.unlearn.strategy;
    in.addons = cfg.addons;
    in.protocol = EvalProtocol::from_world(world, cfg.protocol.seeds_per_cell,
                                           cfg.protocol.eval_seed);
    in.unlearn_seed = cfg.unlearn.seed;
    in.gate_samples_per_pair = cfg.train.gate_samples_per_pair;
    in.gate_threshold = cfg.train.gate_threshold;
    in.config_digest = config_digest(cfg);
    in.comparable_digest = comparable_digest(cfg);

    std::string run_name = run_dir_flag;
    if (run_name.empty()) {
        run_name = std::string(strategy_name(in.strategy)) + "_" + in.addons.joined_names();
        for (char& c : run_name) {
            if (c == ',') c = '+';
        }
    }
    const fs::path run_dir =
        fs::path(run_name).is_absolute() ? fs::path(run_name) : paths.out / run_name;

    const RunLog log = run_benchmark(in, run_dir);
    std::printf("run %s (%zu requests)\n", run_dir.c_str(), log.records.size());
    std::printf("%3s %8s %8s %8s %8s %10s %8s\n", "n", "UA", "RA_I", "RA_C", "HM", "drift",
                "steps");
    for (const MetricsRecord& r : log.records) {
        std::printf("%3zu %8.4f %8.4f %8.4f %8.4f %10.4f %8zu\n", r.n, r.ua, r.ra_i, r.ra_c,
                    r.hm, r.drift_total, r.optimizer_steps_cumulative);
    }
    return 0;
}

int cmd_analyze(const ExperimentConfig& cfg, const std::string& kind,
                const std::string& checkpoint_flag, const std::string& before_flag,
                const std::string& after_flag, const std::string& run_dir_flag,
                int target_flag) {
    validate_experiment(cfg);
    const Paths paths{cfg.output_dir};
    const World world = load_world_checked(paths);
    const fs::path adir = paths.analysis_dir();
    fs::create_directories(adir);

    const auto theta_path =
        checkpoint_flag.empty() ? paths.theta_dagger() : fs::path(checkpoint_flag);
    if (!fs::exists(theta_path)) {
        throw ValidationError("missing checkpoint " + theta_path.string());
    }
    const ModelCheckpoint theta = read_model_checkpoint(theta_path);
    if (theta.world_hash != world.content_hash()) {
        throw ValidationError("checkpoint does not match the world file");
    }

    if (kind == "smoothness") {
        const SmoothnessTable table =
            estimate_smoothness(theta, world, cfg.analysis.scales, cfg.analysis.trials,
                                cfg.analysis.batch_size, cfg.analysis.seed);
        atomic_write_file(adir / "smoothness.csv", smoothness_csv(table));
        std::printf("%-10s %-12s %-12s %s\n", "scale", "M_mean", "M_std", "mean|delta|");
        for (const SmoothnessRow& r : table.rows) {
            std::printf("%-10g %-12.6g %-12.6g %g\n", r.scale, r.m_mean, r.m_std,
                        r.mean_delta_norm);
        }
        std::printf("wrote %s\n", (adir / "smoothness.csv").c_str());
        return 0;
    }

    if (kind == "taylor") {
        if (run_dir_flag.empty()) throw ValidationError("taylor: --run-dir required");
        const fs::path run_dir = fs::path(run_dir_flag).is_absolute()
                                     ? fs::path(run_dir_flag)
                                     : paths.out / run_dir_flag;
        const RunLog log =
            runlog_from_json(nlohmann::json::parse(read_file(run_dir / "runlog.json")));
        const SmoothnessTable table =
            estimate_smoothness(theta, world, cfg.analysis.scales, cfg.analysis.trials,
                                cfg.analysis.batch_size, cfg.analysis.seed);

        nlohmann::json out;
        out["grad_norm"] = table.grad_norm_at_base;
        nlohmann::json recs = nlohmann::json::array();
        std::vector<std::pair<double, double>> pairs;
        for (const std::string& file : log.checkpoint_files) {
            const ModelCheckpoint ck = read_model_checkpoint(run_dir / file);
            const double dn = params_l2_distance(ck.params, theta.params);
            // m_hat from the scale whose mean perturbation norm is closest
            double m_hat = table.rows.empty() ? 0.0 : table.rows.front().m_mean;
            double best = std::numeric_limits<double>::infinity();
            for (const SmoothnessRow& r : table.rows) {
                const double gap = std::abs(r.mean_delta_norm - dn);
                if (r.nonfinite < r.trials && gap < best) {
                    best = gap;
                    m_hat = r.m_mean;
                }
            }
            const TaylorRecord tr = taylor_bound_report(theta, ck, world, m_hat,
                                                        cfg.analysis.batch_size,
                                                        cfg.analysis.seed);
            pairs.emplace_back(tr.delta_norm, tr.actual_delta_loss);
            recs.push_back({{"checkpoint", file},
                            {"delta_norm", tr.delta_norm},
                            {"m_hat", tr.m_hat},
                            {"actual_delta_loss", tr.actual_delta_loss},
                            {"bound", tr.bound},
                            {"ratio", tr.ratio},
                            {"violated", tr.violated}});
        }
        out["records"] = recs;
        if (pairs.size() >= 3) {
            const CorrelationReport rep = correlate(pairs);
            out["spearman_delta_vs_loss"] = rep.spearman;
            out["pearson_delta_vs_loss"] = rep.pearson;
        }
        atomic_write_file(adir / "taylor_report.json", out.dump(2) + "\n");
        std::printf("wrote %s\n", (adir / "taylor_report.json").c_str());
        return 0;
    }

    if (kind == "similarity") {
        const ClassifierPair cp = load_classifiers_checked(paths, world);
        int target = target_flag;
        if (target < 0) {
            if (world.splits.unlearn_sequence.empty()) {
                throw ValidationError("similarity: world has no unlearn sequence");
            }
            target = world.splits.unlearn_sequence.front();
        }
        UnlearnRequest req;
        req.target = target;
        req.anchor = auto_anchor(world, target);
        req.loss_variant = cfg.unlearn.loss_variant;
        req.steps = cfg.unlearn.steps;
        req.lr = cfg.unlearn.lr;
        req.batch_size = cfg.unlearn.batch_size;
        const EvalProtocol protocol = EvalProtocol::from_world(world, cfg.protocol.seeds_per_cell,
                                                               cfg.protocol.eval_seed);
        const CorrelationReport rep = similarity_retention_study(
            theta, req, cfg.addons, world, protocol, cp.style, cp.object, cfg.unlearn.seed);
        atomic_write_file(adir / "similarity_retention.csv",
                          correlation_csv(rep, "cosine_similarity", "retention_accuracy"));
        std::printf("similarity-retention: pearson %.4f spearman %.4f%s\n", rep.pearson,
                    rep.spearman, rep.flat ? " (flat)" : "");
        std::printf("wrote %s\n", (adir / "similarity_retention.csv").c_str());
        return 0;
    }

    if (kind == "kvshift") {
        if (after_flag.empty()) throw ValidationError("kvshift: --after checkpoint required");
        const ModelCheckpoint before =
            before_flag.empty() ? theta : read_model_checkpoint(before_flag);
        const ModelCheckpoint after = read_model_checkpoint(after_flag);
        int target = target_flag;
        if (target < 0) {
            if (after.lineage.empty()) {
                throw ValidationError("kvshift: --target required for lineage-free checkpoints");
            }
            target = after.lineage.back().target;
        }
        const CorrelationReport rep = kv_shift_study(before, after, target, world);
        atomic_write_file(adir / "kv_shift.csv",
                          correlation_csv(rep, "cosine_similarity", "kv_shift"));
        std::printf("kv-shift: pearson %.4f spearman %.4f%s\n", rep.pearson, rep.spearman,
                    rep.flat ? " (flat)" : "");
        std::printf("wrote %s\n", (adir / "kv_shift.csv").c_str());
        return 0;
    }

    throw ValidationError("unknown analyze kind: " + kind +
                          " (expected smoothness|taylor|similarity|kvshift)");
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& baseline_dir,
               bool force) {
    if (run_dirs.empty()) throw ValidationError("report: need at least one run directory");
    struct Run {
        std::string dir;
        RunLog log;
    };
    std::vector<Run> runs;
    for (const std::string& d : run_dirs) {
        runs.push_back({d, runlog_from_json(nlohmann::json::parse(
                               read_file(fs::path(d) / "runlog.json")))});
    }
    RunLog baseline;
    const bool have_baseline = !baseline_dir.empty();
    if (have_baseline) {
        baseline = runlog_from_json(
            nlohmann::json::parse(read_file(fs::path(baseline_dir) / "runlog.json")));
    }
    const RunLog& ref = have_baseline ? baseline : runs.front().log;
    for (const Run& r : runs) {
        if (r.log.world_hash != ref.world_hash) {
            throw ValidationError("report: run " + r.dir + " has a different world hash");
        }
        if (!force && r.log.comparable_digest != ref.comparable_digest) {
            throw ValidationError("report: run " + r.dir +
                                  " has a different config digest (use --force to override)");
        }
    }

    std::size_t max_n = 0;
    for (const Run& r : runs) max_n = std::max(max_n, r.log.records.size());

    std::printf("%-4s", "n");
    for (const Run& r : runs) {
        std::printf(" %14s", (r.log.strategy + "/" + r.log.addons).c_str());
        if (have_baseline) std::printf(" %10s", "norm");
    }
    std::printf("\n");
    for (std::size_t n = 1; n <= max_n; ++n) {
        std::printf("%-4zu", n);
        for (const Run& r : runs) {
            if (n <= r.log.records.size()) {
                const double hm = r.log.records[n - 1].hm;
                std::printf(" %14.4f", hm);
                if (have_baseline) {
                    if (n <= baseline.records.size() && baseline.records[n - 1].hm > 0.0) {
                        std::printf(" %10.4f", hm / baseline.records[n - 1].hm);
                    } else {
                        std::printf(" %10s", "-");
                    }
                }
            } else {
                std::printf(" %14s", "-");
                if (have_baseline) std::printf(" %10s", "-");
            }
        }
        std::printf("\n");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual-unlearning lab for a toy conditional diffusion model"};
    app.require_subcommand(1);

    std::string config_path = "configs/default.json";
    std::string run_dir_flag, checkpoint_flag, before_flag, after_flag, baseline_flag;
    std::string analyze_kind;
    std::vector<std::string> report_dirs;
    int target_flag = -1;
    bool force = false;

    // unlearn-section overrides
    std::string strategy_flag, addons_flag, loss_variant_flag;
    long long steps_flag = -1, count_flag = -1;

    auto* gen = app.add_subcommand("gen-world", "generate world + classifiers");
    gen->add_option("--config", config_path, "experiment config (JSON)");

    auto* train = app.add_subcommand("train-base", "train the base checkpoint");
    train->add_option("--config", config_path, "experiment config (JSON)");

    auto* unlearn = app.add_subcommand("unlearn", "run an unlearning sequence");
    unlearn->add_option("--config", config_path, "experiment config (JSON)");
    unlearn->add_option("--run-dir", run_dir_flag, "run directory (default strategy_addons)");
    unlearn->add_option("--strategy", strategy_flag, "sequential|simultaneous|independent");
    unlearn->add_option("--addons", addons_flag, "comma list: l1,l2,selft,merge,gradproj,none");
    unlearn->add_option("--loss-variant", loss_variant_flag, "anchor_data|anchor_teacher");
    unlearn->add_option("--steps", steps_flag, "steps per request");
    unlearn->add_option("--count", count_flag, "number of requests");

    auto* analyze = app.add_subcommand("analyze", "diagnostic studies");
    analyze->add_option("kind", analyze_kind, "smoothness|taylor|similarity|kvshift")
        ->required();
    analyze->add_option("--config", config_path, "experiment config (JSON)");
    analyze->add_option("--checkpoint", checkpoint_flag, "base checkpoint override");
    analyze->add_option("--before", before_flag, "kvshift: before checkpoint");
    analyze->add_option("--after", after_flag, "kvshift: after checkpoint");
    analyze->add_option("--run-dir", run_dir_flag, "taylor: run directory");
    analyze->add_option("--target", target_flag, "target concept id");

    auto* report = app.add_subcommand("report", "compare runs");
    report->add_option("dirs", report_dirs, "run directories")->required();
    report->add_option("--baseline", baseline_flag, "baseline run for normalization");
    report->add_flag("--force", force, "aggregate despite config digest mismatch");

    CLI11_PARSE(app, argc, argv);

    try {
        if (report->parsed()) return cmd_report(report_dirs, baseline_flag, force);

        ExperimentConfig cfg = load_experiment_config(config_path);
        if (!strategy_flag.empty()) cfg.unlearn.strategy = strategy_from_name(strategy_flag);
        if (!loss_variant_flag.empty()) {
            cfg.unlearn.loss_variant = loss_variant_from_name(loss_variant_flag);
        }
        if (!addons_flag.empty()) {
            cfg.addons.kinds.clear();
            if (addons_flag != "none") {
                std::string rest = addons_flag;
                while (!rest.empty()) {
                    const std::size_t comma = rest.find(',');
                    cfg.addons.kinds.push_back(addon_from_name(rest.substr(0, comma)));
                    rest = comma == std::string::npos ? "" : rest.substr(comma + 1);
                }
            }
        }
        if (steps_flag >= 0) cfg.unlearn.steps = static_cast<std::size_t>(steps_flag);
        if (count_flag >= 0) cfg.unlearn.count = static_cast<std::size_t>(count_flag);

        if (gen->parsed()) return cmd_gen_world(cfg);
        if (train->parsed()) return cmd_train_base(cfg);
        if (unlearn->parsed()) return cmd_unlearn(cfg, run_dir_flag);
        if (analyze->parsed()) {
            return cmd_analyze(cfg, analyze_kind, checkpoint_flag, before_flag, after_flag,
                               run_dir_flag, target_flag);
        }
        throw ValidationError("no subcommand");
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return 2;
    }
}
