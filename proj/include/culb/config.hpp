#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "culb/addons.hpp"
#include "culb/bench.hpp"
#include "culb/diffusion.hpp"
#include "culb/errors.hpp"
#include "culb/hash.hpp"
#include "culb/unlearn.hpp"
#include "culb/world.hpp"

namespace culb {

/// One flat config file drives every stage; CLI flags only pick the command
/// and small overrides, so a run is reproducible from a single artifact.
struct ExperimentConfig {
    WorldConfig world;

    ModelDims dims;  // D and e are taken from the world section
    struct ScheduleSection {
        std::size_t T = 32;
        double beta_start = 1e-4;
        double beta_end = 0.35;
    } schedule;
    TrainConfig train;

    struct ClassifierSection {
        std::size_t n_per_pair = 50;
        std::uint64_t seed = 3;
        ClassifierTrainConfig train;
    } classifier;

    struct UnlearnSection {
        Strategy strategy = Strategy::sequential;
        LossVariant loss_variant = LossVariant::anchor_data;
        std::size_t steps = 400;
        double lr = 1e-3;
        std::size_t batch_size = 32;
        std::uint64_t seed = 11;
        std::size_t count = 0;  // 0 = the world's full unlearn sequence
        std::vector<std::pair<int, int>> explicit_requests;  // (target, anchor); anchor -1 = auto
    } unlearn;

    AddonConfig addons;

    struct ProtocolSection {
        std::size_t seeds_per_cell = 5;
        std::uint64_t eval_seed = 1234;
    } protocol;

    struct AnalysisSection {
        std::vector<double> scales{0.01, 0.04, 0.8};
        std::size_t trials = 8;
        std::size_t batch_size = 256;
        std::uint64_t seed = 21;
    } analysis;

    std::string output_dir = "runs/default";
};

inline nlohmann::json experiment_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["world"] = {{"S", c.world.S},
                  {"O", c.world.O},
                  {"e", c.world.e},
                  {"D", c.world.D},
                  {"noise_sigma", c.world.noise_sigma},
                  {"similarity_spread", c.world.similarity_spread},
                  {"seed", c.world.seed},
                  {"unlearn_domain", domain_name(c.world.unlearn_domain)},
                  {"unlearn_count", c.world.unlearn_count}};
    j["model"] = {{"dims",
                   {{"e_t", c.dims.e_t},
                    {"h", c.dims.h},
                    {"dk", c.dims.dk},
                    {"dv", c.dims.dv},
                    {"h2", c.dims.h2}}},
                  {"schedule",
                   {{"T", c.schedule.T},
                    {"beta_start", c.schedule.beta_start},
                    {"beta_end", c.schedule.beta_end}}},
                  {"train",
                   {{"steps", c.train.steps},
                    {"lr", c.train.lr},
                    {"batch_size", c.train.batch_size},
                    {"seed", c.train.seed},
                    {"gate_samples_per_pair", c.train.gate_samples_per_pair},
                    {"gate_threshold", c.train.gate_threshold}}}};
    j["classifier"] = {{"n_per_pair", c.classifier.n_per_pair},
                       {"seed", c.classifier.seed},
                       {"eval_per_pair", c.classifier.train.eval_per_pair},
                       {"max_epochs", c.classifier.train.max_epochs},
                       {"lr", c.classifier.train.lr},
                       {"accuracy_target", c.classifier.train.accuracy_target}};
    nlohmann::json reqs = nlohmann::json::array();
    for (const auto& [target, anchor] : c.unlearn.explicit_requests) {
        reqs.push_back({{"target", target}, {"anchor", anchor}});
    }
    j["unlearn"] = {{"strategy", strategy_name(c.unlearn.strategy)},
                    {"loss_variant", loss_variant_name(c.unlearn.loss_variant)},
                    {"steps", c.unlearn.steps},
                    {"lr", c.unlearn.lr},
                    {"batch_size", c.unlearn.batch_size},
                    {"seed", c.unlearn.seed},
                    {"count", c.unlearn.count},
                    {"requests", reqs}};
    nlohmann::json kinds = nlohmann::json::array();
    for (AddonKind k : c.addons.kinds) kinds.push_back(addon_name(k));
    j["addons"] = {{"kinds", kinds},
                   {"lambda", c.addons.lambda},
                   {"selft_k_percent", c.addons.selft_k_percent},
                   {"merge_k_percent", c.addons.merge_k_percent},
                   {"gradproj_M", c.addons.gradproj_M},
                   {"gradproj_tol", c.addons.gradproj_tol},
                   {"projection_point",
                    c.addons.projection_point == ProjectionPoint::update ? "update" : "gradient"}};
    j["protocol"] = {{"seeds_per_cell", c.protocol.seeds_per_cell},
                     {"eval_seed", c.protocol.eval_seed}};
    j["analysis"] = {{"scales", c.analysis.scales},
                     {"trials", c.analysis.trials},
                     {"batch_size", c.analysis.batch_size},
                     {"seed", c.analysis.seed}};
    j["output_dir"] = c.output_dir;
    return j;
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (j.contains("world")) {
        const auto& w = j.at("world");
        c.world.S = w.value("S", c.world.S);
        c.world.O = w.value("O", c.world.O);
        c.world.e = w.value("e", c.world.e);
        c.world.D = w.value("D", c.world.D);
        c.world.noise_sigma = w.value("noise_sigma", c.world.noise_sigma);
        c.world.similarity_spread = w.value("similarity_spread", c.world.similarity_spread);
        c.world.seed = w.value("seed", c.world.seed);
        if (w.contains("unlearn_domain")) {
            const std::string d = w.at("unlearn_domain").get<std::string>();
            if (d != "style" && d != "object") {
                throw ValidationError("config: unlearn_domain must be style or object");
            }
            c.world.unlearn_domain = d == "style" ? Domain::style : Domain::object;
        }
        c.world.unlearn_count = w.value("unlearn_count", c.world.unlearn_count);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        if (m.contains("dims")) {
            const auto& d = m.at("dims");
            c.dims.e_t = d.value("e_t", c.dims.e_t);
            c.dims.h = d.value("h", c.dims.h);
            c.dims.dk = d.value("dk", c.dims.dk);
            c.dims.dv = d.value("dv", c.dims.dv);
            c.dims.h2 = d.value("h2", c.dims.h2);
        }
        if (m.contains("schedule")) {
            const auto& s = m.at("schedule");
            c.schedule.T = s.value("T", c.schedule.T);
            c.schedule.beta_start = s.value("beta_start", c.schedule.beta_start);
            c.schedule.beta_end = s.value("beta_end", c.schedule.beta_end);
        }
        if (m.contains("train")) {
            const auto& t = m.at("train");
            c.train.steps = t.value("steps", c.train.steps);
            c.train.lr = t.value("lr", c.train.lr);
            c.train.batch_size = t.value("batch_size", c.train.batch_size);
            c.train.seed = t.value("seed", c.train.seed);
            c.train.gate_samples_per_pair =
                t.value("gate_samples_per_pair", c.train.gate_samples_per_pair);
            c.train.gate_threshold = t.value("gate_threshold", c.train.gate_threshold);
        }
    }
    if (j.contains("classifier")) {
        const auto& cl = j.at("classifier");
        c.classifier.n_per_pair = cl.value("n_per_pair", c.classifier.n_per_pair);
        c.classifier.seed = cl.value("seed", c.classifier.seed);
        c.classifier.train.eval_per_pair =
            cl.value("eval_per_pair", c.classifier.train.eval_per_pair);
        c.classifier.train.max_epochs = cl.value("max_epochs", c.classifier.train.max_epochs);
        c.classifier.train.lr = cl.value("lr", c.classifier.train.lr);
        c.classifier.train.accuracy_target =
            cl.value("accuracy_target", c.classifier.train.accuracy_target);
        c.classifier.train.n_per_pair = c.classifier.n_per_pair;
    }
    if (j.contains("unlearn")) {
        const auto& u = j.at("unlearn");
        if (u.contains("strategy")) {
            c.unlearn.strategy = strategy_from_name(u.at("strategy").get<std::string>());
        }
        if (u.contains("loss_variant")) {
            c.unlearn.loss_variant = loss_variant_from_name(u.at("loss_variant").get<std::string>());
        }
        c.unlearn.steps = u.value("steps", c.unlearn.steps);
        c.unlearn.lr = u.value("lr", c.unlearn.lr);
        c.unlearn.batch_size = u.value("batch_size", c.unlearn.batch_size);
        c.unlearn.seed = u.value("seed", c.unlearn.seed);
        c.unlearn.count = u.value("count", c.unlearn.count);
        if (u.contains("requests")) {
            for (const auto& r : u.at("requests")) {
                c.unlearn.explicit_requests.emplace_back(r.at("target").get<int>(),
                                                         r.value("anchor", -1));
            }
        }
    }
    if (j.contains("addons")) {
        const auto& a = j.at("addons");
        if (a.contains("kinds")) {
            for (const auto& k : a.at("kinds")) {
                c.addons.kinds.push_back(addon_from_name(k.get<std::string>()));
            }
        }
        c.addons.lambda = a.value("lambda", c.addons.lambda);
        c.addons.selft_k_percent = a.value("selft_k_percent", c.addons.selft_k_percent);
        c.addons.merge_k_percent = a.value("merge_k_percent", c.addons.merge_k_percent);
        c.addons.gradproj_M = a.value("gradproj_M", c.addons.gradproj_M);
        c.addons.gradproj_tol = a.value("gradproj_tol", c.addons.gradproj_tol);
        if (a.contains("projection_point")) {
            const std::string p = a.at("projection_point").get<std::string>();
            if (p != "update" && p != "gradient") {
                throw ValidationError("config: projection_point must be update or gradient");
            }
            c.addons.projection_point =
                p == "update" ? ProjectionPoint::update : ProjectionPoint::gradient;
        }
    }
    if (j.contains("protocol")) {
        const auto& p = j.at("protocol");
        c.protocol.seeds_per_cell = p.value("seeds_per_cell", c.protocol.seeds_per_cell);
        c.protocol.eval_seed = p.value("eval_seed", c.protocol.eval_seed);
    }
    if (j.contains("analysis")) {
        const auto& a = j.at("analysis");
        if (a.contains("scales")) c.analysis.scales = a.at("scales").get<std::vector<double>>();
        c.analysis.trials = a.value("trials", c.analysis.trials);
        c.analysis.batch_size = a.value("batch_size", c.analysis.batch_size);
        c.analysis.seed = a.value("seed", c.analysis.seed);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config: cannot parse " + path + ": " + e.what());
    }
    return experiment_from_json(j);
}

/// Digest of the fully resolved config (canonical JSON dump).
inline std::string config_digest(const ExperimentConfig& c) {
    Fnv1a h;
    h.str(experiment_to_json(c).dump());
    return hex64(h.digest());
}

/// Digest of the sections runs must share to be comparable in reports:
/// world, model, classifier and protocol (not strategy or add-ons).
inline std::string comparable_digest(const ExperimentConfig& c) {
    nlohmann::json j = experiment_to_json(c);
    nlohmann::json sub;
    sub["world"] = j["world"];
    sub["model"] = j["model"];
    sub["classifier"] = j["classifier"];
    sub["protocol"] = j["protocol"];
    Fnv1a h;
    h.str(sub.dump());
    return hex64(h.digest());
}

/// Cross-module invariants that can be decided before any work starts.
inline void validate_experiment(const ExperimentConfig& c) {
    validate_addon_strategy(c.addons, c.unlearn.strategy);
    if (c.dims.e_t % 2 != 0) throw ValidationError("config: e_t must be even");
    if (c.unlearn.steps == 0 && c.unlearn.count > 1) {
        // allowed: zero-step runs are used for plumbing checks
    }
    if (!(c.unlearn.lr > 0.0)) throw ValidationError("config: unlearn lr must be > 0");
    if (c.unlearn.batch_size == 0) throw ValidationError("config: unlearn batch_size >= 1");
    if (c.protocol.seeds_per_cell < 1) throw ValidationError("config: seeds_per_cell >= 1");
    const std::size_t domain_size =
        c.world.unlearn_domain == Domain::style ? c.world.S : c.world.O;
    const std::size_t seq_len = c.world.unlearn_count;
    const std::size_t run_len =
        c.unlearn.count == 0 ? seq_len : std::min(c.unlearn.count, seq_len);
    if (c.addons.has(AddonKind::gradproj)) {
        // pool at request n is domain_size - n; the last request is tightest
        if (c.addons.gradproj_M + run_len > domain_size) {
            throw ValidationError(
                "config: gradproj_M = " + std::to_string(c.addons.gradproj_M) +
                " exceeds the auxiliary pool at the last request (domain size " +
                std::to_string(domain_size) + ", sequence length " + std::to_string(run_len) +
                ")");
        }
    }
    if (c.analysis.trials < 2) throw ValidationError("config: analysis trials >= 2");
    for (double s : c.analysis.scales) {
        if (!(s > 0.0)) throw ValidationError("config: analysis scales must be > 0");
    }
}

/// Resolves the request list: explicit (target, anchor) pairs when given,
/// otherwise the world's unlearn sequence with automatic anchors.
inline std::vector<UnlearnRequest> build_requests(const ExperimentConfig& c, const World& world) {
    std::vector<UnlearnRequest> reqs;
    auto make = [&](int target, int anchor) {
        UnlearnRequest r;
        r.target = target;
        r.anchor = anchor < 0 ? auto_anchor(world, target) : anchor;
        r.loss_variant = c.unlearn.loss_variant;
        r.steps = c.unlearn.steps;
        r.lr = c.unlearn.lr;
        r.batch_size = c.unlearn.batch_size;
        validate_request(world, r);
        return r;
    };
    if (!c.unlearn.explicit_requests.empty()) {
        for (const auto& [target, anchor] : c.unlearn.explicit_requests) {
            reqs.push_back(make(target, anchor));
        }
    } else {
        std::size_t count = c.unlearn.count == 0 ? world.splits.unlearn_sequence.size()
                                                 : c.unlearn.count;
        count = std::min(count, world.splits.unlearn_sequence.size());
        for (std::size_t i = 0; i < count; ++i) {
            reqs.push_back(make(world.splits.unlearn_sequence[i], -1));
        }
    }
    if (reqs.empty()) throw ValidationError("config: empty request list");
    return reqs;
}

}  // namespace culb
