#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "culb/bench.hpp"
#include "culb/diffusion.hpp"
#include "culb/errors.hpp"
#include "culb/rng.hpp"
#include "culb/tensor.hpp"
#include "culb/unlearn.hpp"
#include "culb/world.hpp"

namespace culb {

// ---- correlation ----

struct CorrelationReport {
    std::vector<std::pair<double, double>> pairs;
    double pearson = 0.0;
    double spearman = 0.0;
    std::size_t n = 0;
    bool flat = false;  // zero variance in x or y; coefficients forced to 0
};

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double pearson_raw(const std::vector<double>& x, const std::vector<double>& y,
                          bool* flat) {
    const std::size_t n = x.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        if (flat) *flat = true;
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace detail

inline CorrelationReport correlate(std::vector<std::pair<double, double>> pairs) {
    if (pairs.size() < 3) throw ValidationError("correlate: need at least 3 pairs");
    CorrelationReport rep;
    rep.pairs = std::move(pairs);
    rep.n = rep.pairs.size();
    std::vector<double> x, y;
    x.reserve(rep.n);
    y.reserve(rep.n);
    for (const auto& [a, b] : rep.pairs) {
        x.push_back(a);
        y.push_back(b);
    }
    bool flat = false;
    rep.pearson = detail::pearson_raw(x, y, &flat);
    bool flat_rank = false;
    rep.spearman =
        detail::pearson_raw(detail::average_ranks(x), detail::average_ranks(y), &flat_rank);
    rep.flat = flat || flat_rank;
    if (rep.flat) {
        rep.pearson = 0.0;
        rep.spearman = 0.0;
    }
    return rep;
}

// ---- smoothness constant ----

struct SmoothnessRow {
    double scale = 0.0;
    double m_mean = 0.0;
    double m_std = 0.0;
    std::size_t trials = 0;
    std::size_t nonfinite = 0;       // flagged trials, excluded from the stats
    double mean_delta_norm = 0.0;    // average |theta - theta_dagger| at this scale
};

struct SmoothnessTable {
    std::vector<SmoothnessRow> rows;
    double grad_norm_at_base = 0.0;  // |grad L^r(theta_dagger)| on the study batch
};

namespace detail {
inline constexpr std::uint64_t kAnalysisBatchStream = 0x42415443;  // "BATC"
inline constexpr std::uint64_t kAnalysisPerturbSalt = 0x50455254;  // "PERT"
}  // namespace detail

/// Fixed batch over held-in (retained) pairs used by the smoothness and
/// bound studies, so gradient norms are comparable across trials.
inline std::vector<BatchItem> retention_batch(const World& world, const NoiseSchedule& sched,
                                              std::size_t batch_size, std::uint64_t seed) {
    std::vector<int> styles, objects;
    for (const Concept& c : world.styles) {
        if (std::count(world.splits.unlearn_sequence.begin(),
                       world.splits.unlearn_sequence.end(), c.id) == 0) {
            styles.push_back(c.id);
        }
    }
    for (const Concept& c : world.objects) {
        if (std::count(world.splits.unlearn_sequence.begin(),
                       world.splits.unlearn_sequence.end(), c.id) == 0) {
            objects.push_back(c.id);
        }
    }
    if (styles.empty() || objects.empty()) {
        throw ValidationError("retention_batch: no retained pairs available");
    }
    RngStream rng = seeded_stream(seed, detail::kAnalysisBatchStream);
    std::vector<BatchItem> batch(batch_size);
    for (BatchItem& it : batch) {
        it.prompt = Prompt{styles[rng.uniform_index(styles.size())],
                           objects[rng.uniform_index(objects.size())]};
        it.t = rng.uniform_index(sched.T);
        it.x0 = sample_image(world, it.prompt, rng);
        it.eps = Tensor::zeros({world.data_dim()});
        for (std::size_t i = 0; i < it.eps.numel(); ++i) it.eps[i] = rng.normal();
    }
    return batch;
}

/// Generic estimator core: M = |grad(theta0 + sigma z) - grad(theta0)| / |sigma z|
/// per trial, isotropic Gaussian z over all coordinates, recorded with the
/// exact perturbation norm. grad_fn returning any non-finite value flags the
/// trial instead of dropping the row.
inline SmoothnessTable estimate_smoothness_core(
    const std::vector<Tensor>& theta0,
    const std::function<std::vector<Tensor>(const std::vector<Tensor>&)>& grad_fn,
    const std::vector<double>& scales, std::size_t trials, std::uint64_t seed) {
    if (trials < 2) throw ValidationError("estimate_smoothness: trials must be >= 2");
    for (double s : scales) {
        if (!(s > 0.0)) throw ValidationError("estimate_smoothness: scales must be > 0");
    }
    const std::vector<Tensor> g0 = grad_fn(theta0);

    SmoothnessTable table;
    table.grad_norm_at_base = global_l2_norm(g0);
    for (std::size_t si = 0; si < scales.size(); ++si) {
        SmoothnessRow row;
        row.scale = scales[si];
        row.trials = trials;
        std::vector<double> ms;
        double delta_norm_sum = 0.0;
        for (std::size_t trial = 0; trial < trials; ++trial) {
            RngStream rng = seeded_stream(
                seed, stream_mix(detail::kAnalysisPerturbSalt, si, trial));
            std::vector<Tensor> theta = theta0;
            double ss = 0.0;
            for (Tensor& t : theta) {
                for (double& v : t.data) {
                    const double dz = row.scale * rng.normal();
                    v += dz;
                    ss += dz * dz;
                }
            }
            const double delta_norm = std::sqrt(ss);
            bool finite = true;
            double m = 0.0;
            try {
                const std::vector<Tensor> g = grad_fn(theta);
                double diff_ss = 0.0;
                for (std::size_t b = 0; b < g.size(); ++b) {
                    for (std::size_t i = 0; i < g[b].numel(); ++i) {
                        const double d = g[b].data[i] - g0[b].data[i];
                        if (!std::isfinite(d)) finite = false;
                        diff_ss += d * d;
                    }
                }
                m = std::sqrt(diff_ss) / delta_norm;
                if (!std::isfinite(m)) finite = false;
            } catch (const RuntimeFailure&) {
                finite = false;
            }
            if (finite) {
                ms.push_back(m);
                delta_norm_sum += delta_norm;
            } else {
                ++row.nonfinite;
            }
        }
        if (!ms.empty()) {
            double mean = 0.0;
            for (double m : ms) mean += m;
            mean /= static_cast<double>(ms.size());
            double var = 0.0;
            for (double m : ms) var += (m - mean) * (m - mean);
            var = ms.size() > 1 ? var / static_cast<double>(ms.size() - 1) : 0.0;
            row.m_mean = mean;
            row.m_std = std::sqrt(var);
            row.mean_delta_norm = delta_norm_sum / static_cast<double>(ms.size());
        }
        table.rows.push_back(row);
    }
    return table;
}

/// Smoothness of the retention loss around theta-dagger: perturb all weights
/// with scale-sigma Gaussian noise and measure the gradient-change ratio on
/// a fixed retained-concept batch.
inline SmoothnessTable estimate_smoothness(const ModelCheckpoint& theta_dagger,
                                           const World& world, const std::vector<double>& scales,
                                           std::size_t trials, std::size_t batch_size,
                                           std::uint64_t seed) {
    const std::vector<BatchItem> batch =
        retention_batch(world, theta_dagger.schedule, batch_size, seed);
    const ModelDims dims = theta_dagger.params.dims;
    const NoiseSchedule& sched = theta_dagger.schedule;

    auto grad_fn = [&](const std::vector<Tensor>& flat) {
        DenoiserParams p = DenoiserParams::zeros(dims);
        auto blocks = p.blocks();
        for (std::size_t b = 0; b < kNumBlocks; ++b) *blocks[b] = flat[b];
        DenoiserParams g = DenoiserParams::zeros(dims);
        retention_loss_and_grads(p, batch, world, sched, &g);
        std::vector<Tensor> out;
        for (const Tensor* t : g.blocks()) out.push_back(*t);
        return out;
    };
    std::vector<Tensor> theta0;
    for (const Tensor* t : theta_dagger.params.blocks()) theta0.push_back(*t);
    return estimate_smoothness_core(theta0, grad_fn, scales, trials, seed);
}

inline std::string smoothness_csv(const SmoothnessTable& t) {
    std::string csv = "scale,M_mean,M_std,trials,nonfinite_trials,mean_delta_norm\n";
    for (const SmoothnessRow& r : t.rows) {
        csv += fmt_double(r.scale) + "," + fmt_double(r.m_mean) + "," + fmt_double(r.m_std) +
               "," + std::to_string(r.trials) + "," + std::to_string(r.nonfinite) + "," +
               fmt_double(r.mean_delta_norm) + "\n";
    }
    return csv;
}

// ---- quadratic-bound diagnostics ----

struct TaylorRecord {
    double delta_norm = 0.0;  // |theta_star - theta_dagger|
    double grad_norm = 0.0;   // L term: |grad L^r(theta_dagger)| on the batch
    double m_hat = 0.0;
    double actual_delta_loss = 0.0;  // |L^r(theta_star) - L^r(theta_dagger)|
    double bound = 0.0;              // grad_norm*|delta| + m_hat/2*|delta|^2
    double ratio = 0.0;              // actual / bound, 0 when bound is 0
    bool violated = false;           // diagnostic only; m_hat is a local estimate
};

inline TaylorRecord taylor_bound_report(const ModelCheckpoint& theta_dagger,
                                        const ModelCheckpoint& theta_star, const World& world,
                                        double m_hat, std::size_t batch_size,
                                        std::uint64_t seed) {
    if (!theta_dagger.params.same_shapes(theta_star.params)) {
        throw ValidationError("taylor_bound_report: shape mismatch");
    }
    if (m_hat < 0.0) throw ValidationError("taylor_bound_report: m_hat must be >= 0");
    const std::vector<BatchItem> batch =
        retention_batch(world, theta_dagger.schedule, batch_size, seed);

    DenoiserParams g = DenoiserParams::zeros(theta_dagger.params.dims);
    const double l_base =
        retention_loss_and_grads(theta_dagger.params, batch, world, theta_dagger.schedule, &g);
    const double l_star =
        retention_loss_and_grads(theta_star.params, batch, world, theta_dagger.schedule, nullptr);

    TaylorRecord rec;
    rec.delta_norm = params_l2_distance(theta_star.params, theta_dagger.params);
    rec.grad_norm = global_l2_norm(g.block_ptrs());
    rec.m_hat = m_hat;
    rec.actual_delta_loss = std::abs(l_star - l_base);
    rec.bound = rec.grad_norm * rec.delta_norm + 0.5 * m_hat * rec.delta_norm * rec.delta_norm;
    rec.ratio = rec.bound > 0.0 ? rec.actual_delta_loss / rec.bound : 0.0;
    rec.violated = rec.actual_delta_loss > rec.bound && rec.bound > 0.0;
    return rec;
}

// ---- similarity studies ----

/// Unlearns `target_style` once from theta-dagger, then correlates each
/// retained style's per-concept retention accuracy against its embedding
/// similarity to the target.
inline CorrelationReport similarity_retention_study(const ModelCheckpoint& theta_dagger,
                                                    const UnlearnRequest& request,
                                                    const AddonConfig& addons,
                                                    const World& world,
                                                    const EvalProtocol& protocol,
                                                    const Classifier& style_cl,
                                                    const Classifier& object_cl,
                                                    std::uint64_t seed) {
    const Concept& tgt = world.concept_by_id(request.target);
    if (tgt.domain != Domain::style) {
        throw ValidationError("similarity_retention_study: target must be a style");
    }
    if (world.num_styles() < 4) {
        throw ValidationError("similarity_retention_study: need at least 3 retained styles");
    }
    RngStream rng = seeded_stream(seed, stream_mix(detail::kAnalysisPerturbSalt, 0x53494dULL));
    const ModelCheckpoint after =
        run_request(theta_dagger, request, addons, world, &theta_dagger.params, std::move(rng));

    std::vector<std::pair<double, double>> pairs;
    for (const Concept& c : world.styles) {
        if (c.id == request.target) continue;
        const double sim = cosine_similarity(c.embedding, tgt.embedding);
        const double acc =
            concept_retention_accuracy(after, c.id, protocol, style_cl, object_cl, world);
        pairs.emplace_back(sim, acc);
    }
    return correlate(std::move(pairs));
}

/// Correlates each retained same-domain concept's key/value shift
/// |dW_K E(c)| + |dW_V E(c)| against its similarity to the target.
inline CorrelationReport kv_shift_study(const ModelCheckpoint& before,
                                        const ModelCheckpoint& after, int target,
                                        const World& world) {
    if (before.world_hash != after.world_hash) {
        throw ValidationError("kv_shift_study: world hash mismatch");
    }
    if (!before.params.same_shapes(after.params)) {
        throw ValidationError("kv_shift_study: shape mismatch");
    }
    const Concept& tgt = world.concept_by_id(target);
    Tensor dk = after.params.w_k;
    axpy(-1.0, before.params.w_k, dk);
    Tensor dv = after.params.w_v;
    axpy(-1.0, before.params.w_v, dv);

    const std::vector<int> unlearned = after.unlearned_ids();
    std::vector<std::pair<double, double>> pairs;
    for (const Concept& c : world.domain_concepts(tgt.domain)) {
        if (c.id == target) continue;
        if (std::count(unlearned.begin(), unlearned.end(), c.id) > 0) continue;
        const double sim = cosine_similarity(c.embedding, tgt.embedding);
        const double shift = l2_norm(matvec(dk, c.embedding)) + l2_norm(matvec(dv, c.embedding));
        pairs.emplace_back(sim, shift);
    }
    return correlate(std::move(pairs));
}

inline std::string correlation_csv(const CorrelationReport& rep, const std::string& x_name,
                                   const std::string& y_name) {
    std::string csv = x_name + "," + y_name + ",pearson,spearman,flat\n";
    for (const auto& [x, y] : rep.pairs) {
        csv += fmt_double(x) + "," + fmt_double(y) + "," + fmt_double(rep.pearson) + "," +
               fmt_double(rep.spearman) + "," + (rep.flat ? "1" : "0") + "\n";
    }
    return csv;
}

}  // namespace culb
