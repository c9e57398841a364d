#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "culb/container.hpp"
#include "culb/diffusion.hpp"
#include "culb/errors.hpp"
#include "culb/io_util.hpp"
#include "culb/parallel.hpp"
#include "culb/unlearn.hpp"
#include "culb/world.hpp"

namespace culb {

/// 3/(1/a + 1/b + 1/c); 0 as soon as any component is 0 (the harmonic
/// mean's limiting value, and it avoids dividing by zero).
inline double harmonic_mean(double ua, double ra_i, double ra_c) {
    for (double v : {ua, ra_i, ra_c}) {
        if (v < 0.0 || v > 1.0) throw ValidationError("harmonic_mean: inputs must be in [0,1]");
    }
    if (ua == 0.0 || ra_i == 0.0 || ra_c == 0.0) return 0.0;
    return 3.0 / (1.0 / ua + 1.0 / ra_i + 1.0 / ra_c);
}

struct DriftResult {
    double total = 0.0;
    std::array<double, kNumBlocks> per_block{};
};

/// Global L2 distance to the pre-trained weights plus per-block norms
/// (total^2 == sum of squared block norms by construction).
inline DriftResult drift(const ModelCheckpoint& ck, const ModelCheckpoint& theta_dagger) {
    if (!ck.params.same_shapes(theta_dagger.params)) {
        throw ValidationError("drift: checkpoint shapes differ");
    }
    DriftResult res;
    auto a = ck.params.blocks();
    auto b = theta_dagger.params.blocks();
    double ss = 0.0;
    for (std::size_t i = 0; i < kNumBlocks; ++i) {
        double block_ss = 0.0;
        for (std::size_t j = 0; j < a[i]->numel(); ++j) {
            const double d = a[i]->data[j] - b[i]->data[j];
            block_ss += d * d;
        }
        res.per_block[i] = std::sqrt(block_ss);
        ss += block_ss;
    }
    res.total = std::sqrt(ss);
    return res;
}

struct EvalProtocol {
    std::vector<int> heldout_styles;
    std::vector<int> heldout_objects;
    std::size_t seeds_per_cell = 5;
    Domain unlearn_domain = Domain::style;
    std::uint64_t eval_seed = 1234;

    static EvalProtocol from_world(const World& w, std::size_t seeds_per_cell,
                                   std::uint64_t eval_seed) {
        if (seeds_per_cell < 1) throw ValidationError("protocol: seeds_per_cell must be >= 1");
        EvalProtocol p;
        p.heldout_styles = w.splits.heldout_styles;
        p.heldout_objects = w.splits.heldout_objects;
        p.seeds_per_cell = seeds_per_cell;
        p.unlearn_domain = w.config.unlearn_domain;
        p.eval_seed = eval_seed;
        return p;
    }

    /// Held-out partners from the other domain for a given concept.
    const std::vector<int>& partners_for(const World& w, int concept_id) const {
        return w.concept_by_id(concept_id).domain == Domain::style ? heldout_objects
                                                                   : heldout_styles;
    }
};

struct EvalCellCounts {
    std::size_t ua_per_concept = 0;  // seeds x held-out other-domain partners
    std::size_t ua_total = 0;
    std::size_t retention_cells = 0;  // shared grid scoring both RA-I and RA-C
};

inline EvalCellCounts cell_counts(const EvalProtocol& p, std::size_t n_unlearned) {
    EvalCellCounts c;
    const std::size_t partners = p.unlearn_domain == Domain::style ? p.heldout_objects.size()
                                                                   : p.heldout_styles.size();
    c.ua_per_concept = p.seeds_per_cell * partners;
    c.ua_total = c.ua_per_concept * n_unlearned;
    c.retention_cells = p.seeds_per_cell * p.heldout_styles.size() * p.heldout_objects.size();
    return c;
}

struct MetricsRecord {
    std::size_t n = 0;
    double ua = 0.0;
    double ra_i = 0.0;
    double ra_c = 0.0;
    double hm = 0.0;
    double drift_total = 0.0;
    std::array<double, kNumBlocks> drift_per_block{};
    std::size_t optimizer_steps_cumulative = 0;
};

namespace detail {
inline constexpr std::uint64_t kEvalSalt = 0x4556414C;  // "EVAL"

inline RngStream cell_stream(std::uint64_t eval_seed, int style_id, int object_id,
                             std::size_t seed_idx) {
    return seeded_stream(eval_seed,
                         stream_mix(kEvalSalt,
                                    stream_mix(static_cast<std::uint64_t>(style_id),
                                               static_cast<std::uint64_t>(object_id), seed_idx)));
}
}  // namespace detail

/// Runs the full evaluation protocol for one checkpoint.
///
/// UA: for each unlearned concept, prompts pairing it with every held-out
/// other-domain partner, seeds_per_cell samples each; success when the
/// concept's own classifier does NOT return it. RA-I / RA-C: the held-out
/// style x object grid, scored by the style and object heads respectively
/// on the same samples. Cells are keyed by content (concept ids, seed
/// index), so parallel and serial evaluation agree exactly.
inline MetricsRecord evaluate(const ModelCheckpoint& ck, const std::vector<int>& unlearned_ids,
                              const EvalProtocol& protocol, const Classifier& style_cl,
                              const Classifier& object_cl, const World& world) {
    if (unlearned_ids.empty()) throw ValidationError("evaluate: no unlearned ids");
    if (ck.world_hash != world.content_hash()) {
        throw ValidationError("evaluate: checkpoint world hash does not match world");
    }

    struct Cell {
        Prompt prompt;
        std::size_t seed_idx;
        int ua_concept;  // -1 for retention cells
    };
    std::vector<Cell> cells;
    for (int c : unlearned_ids) {
        const Concept& tc = world.concept_by_id(c);
        for (int partner : protocol.partners_for(world, c)) {
            const Prompt p = tc.domain == Domain::style ? Prompt{c, partner} : Prompt{partner, c};
            for (std::size_t k = 0; k < protocol.seeds_per_cell; ++k) {
                cells.push_back({p, k, c});
            }
        }
    }
    const std::size_t ua_cells = cells.size();
    for (int s : protocol.heldout_styles) {
        for (int o : protocol.heldout_objects) {
            for (std::size_t k = 0; k < protocol.seeds_per_cell; ++k) {
                cells.push_back({Prompt{s, o}, k, -1});
            }
        }
    }

    struct Outcome {
        bool ua_success = false;
        bool style_ok = false;
        bool object_ok = false;
    };
    std::vector<Outcome> outcomes(cells.size());
    parallel_for(cells.size(), [&](std::size_t i) {
        const Cell& cell = cells[i];
        RngStream rng = detail::cell_stream(protocol.eval_seed, cell.prompt.style_id,
                                            cell.prompt.object_id, cell.seed_idx);
        const Tensor img = sample(ck.params, cell.prompt, ck.schedule, world, rng);
        if (cell.ua_concept >= 0) {
            const bool is_style = world.concept_by_id(cell.ua_concept).domain == Domain::style;
            const int label = classify(is_style ? style_cl : object_cl, world, img);
            outcomes[i].ua_success = label != cell.ua_concept;
        } else {
            outcomes[i].style_ok = classify(style_cl, world, img) == cell.prompt.style_id;
            outcomes[i].object_ok = classify(object_cl, world, img) == cell.prompt.object_id;
        }
    });

    std::size_t ua_hits = 0, style_hits = 0, object_hits = 0;
    for (std::size_t i = 0; i < ua_cells; ++i) ua_hits += outcomes[i].ua_success;
    for (std::size_t i = ua_cells; i < cells.size(); ++i) {
        style_hits += outcomes[i].style_ok;
        object_hits += outcomes[i].object_ok;
    }
    const std::size_t ret_cells = cells.size() - ua_cells;
    if (ret_cells == 0) throw ValidationError("evaluate: empty retention grid");

    MetricsRecord rec;
    rec.ua = static_cast<double>(ua_hits) / static_cast<double>(ua_cells);
    const double style_acc = static_cast<double>(style_hits) / static_cast<double>(ret_cells);
    const double object_acc = static_cast<double>(object_hits) / static_cast<double>(ret_cells);
    rec.ra_i = protocol.unlearn_domain == Domain::style ? style_acc : object_acc;
    rec.ra_c = protocol.unlearn_domain == Domain::style ? object_acc : style_acc;
    rec.hm = harmonic_mean(rec.ua, rec.ra_i, rec.ra_c);
    return rec;
}

/// Retention accuracy of one concept: prompts pairing it with every held-out
/// other-domain partner, scored by its own domain head. Used by the
/// per-concept studies.
inline double concept_retention_accuracy(const ModelCheckpoint& ck, int concept_id,
                                         const EvalProtocol& protocol,
                                         const Classifier& style_cl, const Classifier& object_cl,
                                         const World& world) {
    const Concept& c = world.concept_by_id(concept_id);
    const std::vector<int>& partners = protocol.partners_for(world, concept_id);
    if (partners.empty()) throw ValidationError("concept_retention_accuracy: no partners");
    struct Cell {
        Prompt prompt;
        std::size_t seed_idx;
    };
    std::vector<Cell> cells;
    for (int partner : partners) {
        const Prompt p =
            c.domain == Domain::style ? Prompt{concept_id, partner} : Prompt{partner, concept_id};
        for (std::size_t k = 0; k < protocol.seeds_per_cell; ++k) cells.push_back({p, k});
    }
    std::vector<unsigned char> ok(cells.size(), 0);
    parallel_for(cells.size(), [&](std::size_t i) {
        RngStream rng = detail::cell_stream(protocol.eval_seed, cells[i].prompt.style_id,
                                            cells[i].prompt.object_id, cells[i].seed_idx);
        const Tensor img = sample(ck.params, cells[i].prompt, ck.schedule, world, rng);
        const Classifier& head = c.domain == Domain::style ? style_cl : object_cl;
        ok[i] = classify(head, world, img) == concept_id;
    });
    std::size_t hits = 0;
    for (unsigned char v : ok) hits += v;
    return static_cast<double>(hits) / static_cast<double>(cells.size());
}

// ---- benchmark orchestration ----

struct RunLog {
    std::string config_digest;       // digest of the full experiment config
    std::string comparable_digest;   // digest of the sections runs must share
    std::uint64_t world_seed = 0;
    std::string world_hash;
    std::string strategy;
    std::string addons;
    std::string loss_variant;
    GateResult gate;
    std::vector<MetricsRecord> records;
    std::vector<std::string> checkpoint_files;
};

inline nlohmann::json runlog_to_json(const RunLog& log) {
    nlohmann::json j;
    j["config_digest"] = log.config_digest;
    j["comparable_digest"] = log.comparable_digest;
    j["world_seed"] = log.world_seed;
    j["world_hash"] = log.world_hash;
    j["strategy"] = log.strategy;
    j["addons"] = log.addons;
    j["loss_variant"] = log.loss_variant;
    j["gate"] = {{"style_accuracy", log.gate.style_accuracy},
                 {"object_accuracy", log.gate.object_accuracy},
                 {"min_pair_style", log.gate.min_pair_style},
                 {"min_pair_object", log.gate.min_pair_object},
                 {"pass", log.gate.pass}};
    nlohmann::json recs = nlohmann::json::array();
    for (const MetricsRecord& r : log.records) {
        nlohmann::json jr;
        jr["n"] = r.n;
        jr["UA"] = r.ua;
        jr["RA_I"] = r.ra_i;
        jr["RA_C"] = r.ra_c;
        jr["HM"] = r.hm;
        jr["drift_total"] = r.drift_total;
        nlohmann::json db;
        for (std::size_t b = 0; b < kNumBlocks; ++b) db[kBlockNames[b]] = r.drift_per_block[b];
        jr["drift_per_block"] = db;
        jr["optimizer_steps_cumulative"] = r.optimizer_steps_cumulative;
        recs.push_back(jr);
    }
    j["records"] = recs;
    j["checkpoints"] = log.checkpoint_files;
    return j;
}

inline RunLog runlog_from_json(const nlohmann::json& j) {
    RunLog log;
    log.config_digest = j.at("config_digest").get<std::string>();
    log.comparable_digest = j.at("comparable_digest").get<std::string>();
    log.world_seed = j.at("world_seed").get<std::uint64_t>();
    log.world_hash = j.at("world_hash").get<std::string>();
    log.strategy = j.at("strategy").get<std::string>();
    log.addons = j.at("addons").get<std::string>();
    log.loss_variant = j.at("loss_variant").get<std::string>();
    log.gate.style_accuracy = j.at("gate").at("style_accuracy").get<double>();
    log.gate.object_accuracy = j.at("gate").at("object_accuracy").get<double>();
    log.gate.min_pair_style = j.at("gate").at("min_pair_style").get<double>();
    log.gate.min_pair_object = j.at("gate").at("min_pair_object").get<double>();
    log.gate.pass = j.at("gate").at("pass").get<bool>();
    for (const auto& jr : j.at("records")) {
        MetricsRecord r;
        r.n = jr.at("n").get<std::size_t>();
        r.ua = jr.at("UA").get<double>();
        r.ra_i = jr.at("RA_I").get<double>();
        r.ra_c = jr.at("RA_C").get<double>();
        r.hm = jr.at("HM").get<double>();
        r.drift_total = jr.at("drift_total").get<double>();
        for (std::size_t b = 0; b < kNumBlocks; ++b) {
            r.drift_per_block[b] = jr.at("drift_per_block").at(kBlockNames[b]).get<double>();
        }
        r.optimizer_steps_cumulative = jr.at("optimizer_steps_cumulative").get<std::size_t>();
        log.records.push_back(r);
    }
    if (j.contains("checkpoints")) {
        log.checkpoint_files = j.at("checkpoints").get<std::vector<std::string>>();
    }
    return log;
}

inline std::string metrics_csv(const std::vector<MetricsRecord>& records) {
    std::string csv = "n,UA,RA_I,RA_C,HM,drift_total,steps_cumulative\n";
    for (const MetricsRecord& r : records) {
        csv += std::to_string(r.n) + "," + fmt_double(r.ua) + "," + fmt_double(r.ra_i) + "," +
               fmt_double(r.ra_c) + "," + fmt_double(r.hm) + "," + fmt_double(r.drift_total) +
               "," + std::to_string(r.optimizer_steps_cumulative) + "\n";
    }
    return csv;
}

inline std::string drift_heatmap_csv(const std::vector<MetricsRecord>& records) {
    std::string csv = "n";
    for (const char* b : kBlockNames) csv += std::string(",") + b;
    csv += "\n";
    for (const MetricsRecord& r : records) {
        csv += std::to_string(r.n);
        for (std::size_t b = 0; b < kNumBlocks; ++b) csv += "," + fmt_double(r.drift_per_block[b]);
        csv += "\n";
    }
    return csv;
}

struct BenchmarkInputs {
    const World* world = nullptr;
    const Classifier* style_cl = nullptr;
    const Classifier* object_cl = nullptr;
    const ModelCheckpoint* theta_dagger = nullptr;
    std::vector<UnlearnRequest> requests;
    Strategy strategy = Strategy::sequential;
    AddonConfig addons;
    EvalProtocol protocol;
    std::uint64_t unlearn_seed = 11;
    std::size_t gate_samples_per_pair = 5;
    double gate_threshold = 0.98;
    std::string config_digest;
    std::string comparable_digest;
};

/// Runs the configured strategy over the request sequence, evaluating after
/// every request, and records drift and cumulative optimizer cost. When
/// `output_dir` is non-empty, writes metrics.csv, drift_heatmap.csv,
/// runlog.json and per-request checkpoints there.
inline RunLog run_benchmark(const BenchmarkInputs& in, const std::filesystem::path& output_dir) {
    const World& world = *in.world;
    const ModelCheckpoint& theta_dagger = *in.theta_dagger;

    RunLog log;
    log.config_digest = in.config_digest;
    log.comparable_digest = in.comparable_digest;
    log.world_seed = world.seed;
    log.world_hash = world.content_hash();
    log.strategy = strategy_name(in.strategy);
    log.addons = in.addons.joined_names();
    log.loss_variant =
        in.requests.empty() ? "" : loss_variant_name(in.requests.front().loss_variant);

    log.gate = generation_gate(theta_dagger.params, theta_dagger.schedule, world, *in.style_cl,
                               *in.object_cl, in.gate_samples_per_pair, in.gate_threshold,
                               in.protocol.eval_seed);
    if (!log.gate.pass) {
        throw RuntimeFailure("run_benchmark: base checkpoint fails the generation gate "
                             "(style acc " + std::to_string(log.gate.style_accuracy) +
                             ", object acc " + std::to_string(log.gate.object_accuracy) + ")");
    }

    SequenceResult seq = run_sequence(theta_dagger, in.requests, in.strategy, in.addons, world,
                                      in.unlearn_seed);

    std::vector<int> unlearned;
    for (std::size_t n = 0; n < seq.checkpoints.size(); ++n) {
        unlearned.push_back(in.requests[n].target);
        MetricsRecord rec = evaluate(seq.checkpoints[n], unlearned, in.protocol, *in.style_cl,
                                     *in.object_cl, world);
        rec.n = n + 1;
        const DriftResult dr = drift(seq.checkpoints[n], theta_dagger);
        rec.drift_total = dr.total;
        rec.drift_per_block = dr.per_block;
        rec.optimizer_steps_cumulative = seq.cumulative_steps[n];
        log.records.push_back(rec);
    }

    if (!output_dir.empty()) {
        std::filesystem::create_directories(output_dir);
        for (std::size_t n = 0; n < seq.checkpoints.size(); ++n) {
            char name[32];
            std::snprintf(name, sizeof(name), "checkpoint_%03zu.culb", n + 1);
            write_model_checkpoint(output_dir / name, seq.checkpoints[n]);
            log.checkpoint_files.push_back(name);
        }
        atomic_write_file(output_dir / "metrics.csv", metrics_csv(log.records));
        atomic_write_file(output_dir / "drift_heatmap.csv", drift_heatmap_csv(log.records));
        atomic_write_file(output_dir / "runlog.json", runlog_to_json(log).dump(2) + "\n");
    }
    return log;
}

}  // namespace culb
