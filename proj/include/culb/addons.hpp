#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "culb/diffusion.hpp"
#include "culb/errors.hpp"
#include "culb/tensor.hpp"

namespace culb {

enum class AddonKind { l1, l2, selft, merge, gradproj };

inline const char* addon_name(AddonKind k) {
    switch (k) {
        case AddonKind::l1: return "l1";
        case AddonKind::l2: return "l2";
        case AddonKind::selft: return "selft";
        case AddonKind::merge: return "merge";
        case AddonKind::gradproj: return "gradproj";
    }
    return "?";
}

inline AddonKind addon_from_name(const std::string& s) {
    if (s == "l1") return AddonKind::l1;
    if (s == "l2") return AddonKind::l2;
    if (s == "selft") return AddonKind::selft;
    if (s == "merge") return AddonKind::merge;
    if (s == "gradproj") return AddonKind::gradproj;
    throw ValidationError("unknown add-on kind: " + s);
}

enum class ProjectionPoint { update, gradient };

struct AddonConfig {
    std::vector<AddonKind> kinds;
    double lambda = -1.0;  // < 0 means: default for the active penalty kind
    double selft_k_percent = 10.0;
    double merge_k_percent = 20.0;
    std::size_t gradproj_M = 3;
    double gradproj_tol = 1e-10;
    ProjectionPoint projection_point = ProjectionPoint::update;

    bool has(AddonKind k) const {
        return std::find(kinds.begin(), kinds.end(), k) != kinds.end();
    }

    /// Effective penalty weight: explicit lambda wins, otherwise 1e-2 for l2
    /// and 1e-3 for l1.
    double effective_lambda() const {
        if (lambda >= 0.0) return lambda;
        if (has(AddonKind::l2)) return 1e-2;
        if (has(AddonKind::l1)) return 1e-3;
        return 0.0;
    }

    std::string joined_names() const {
        std::string s;
        for (AddonKind k : kinds) {
            if (!s.empty()) s += ",";
            s += addon_name(k);
        }
        return s.empty() ? "none" : s;
    }

    void validate() const {
        if (has(AddonKind::l1) && has(AddonKind::l2)) {
            throw ValidationError("addons: l1 and l2 are mutually exclusive");
        }
        if (lambda >= 0.0 && !std::isfinite(lambda)) {
            throw ValidationError("addons: lambda must be finite");
        }
        if (selft_k_percent <= 0.0 || selft_k_percent > 100.0) {
            throw ValidationError("addons: selft_k_percent must be in (0,100]");
        }
        if (merge_k_percent <= 0.0 || merge_k_percent > 100.0) {
            throw ValidationError("addons: merge_k_percent must be in (0,100]");
        }
        if (gradproj_tol <= 0.0) throw ValidationError("addons: gradproj_tol must be > 0");
    }
};

// ---- L_p update-norm penalty ----

/// lambda * sum_d |theta_d - ref_d|^p with its (sub)gradient,
/// p in {1, 2}; the p = 1 subgradient is 0 at delta = 0.
/// Added to the unlearning-loss gradient before the optimizer.
inline double penalty_and_grad(const DenoiserParams& params, const DenoiserParams& ref, int p,
                               double lambda, DenoiserParams& grads) {
    if (p != 1 && p != 2) throw ValidationError("penalty_and_grad: p must be 1 or 2");
    if (lambda < 0.0) throw ValidationError("penalty_and_grad: lambda must be >= 0");
    if (!params.same_shapes(ref)) throw ValidationError("penalty_and_grad: shape mismatch");
    double value = 0.0;
    auto bp = params.blocks();
    auto br = ref.blocks();
    auto bg = grads.blocks();
    for (std::size_t b = 0; b < kNumBlocks; ++b) {
        for (std::size_t i = 0; i < bp[b]->numel(); ++i) {
            const double d = bp[b]->data[i] - br[b]->data[i];
            if (p == 2) {
                value += lambda * d * d;
                bg[b]->data[i] += lambda * 2.0 * d;
            } else {
                value += lambda * std::abs(d);
                bg[b]->data[i] += d > 0.0 ? lambda : (d < 0.0 ? -lambda : 0.0);
            }
        }
    }
    return value;
}

// ---- SelFT importance mask ----

/// Per-block binary mask over denoiser parameters. cardinality counts ones.
struct ParamMask {
    std::vector<Tensor> blocks;  // kBlockNames order, entries 0.0 or 1.0
    std::size_t cardinality = 0;
};

namespace detail {

// Rank of each block under lexicographic ordering of kBlockNames; ties in
// score-sorted selections resolve by (name, index).
inline std::array<std::size_t, kNumBlocks> lexical_block_ranks() {
    std::array<std::size_t, kNumBlocks> order{};
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [](std::size_t a, std::size_t b) {
        return std::string(kBlockNames[a]) < std::string(kBlockNames[b]);
    });
    std::array<std::size_t, kNumBlocks> rank{};
    for (std::size_t i = 0; i < kNumBlocks; ++i) rank[order[i]] = i;
    return rank;
}

struct ScoredCoord {
    double score;
    std::size_t name_rank;
    std::size_t block;
    std::size_t index;
};

inline void sort_scored(std::vector<ScoredCoord>& v) {
    std::sort(v.begin(), v.end(), [](const ScoredCoord& a, const ScoredCoord& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.name_rank != b.name_rank) return a.name_rank < b.name_rank;
        return a.index < b.index;
    });
}

}  // namespace detail

/// Importance(d) = |grad_d * param_d| at request start; the mask keeps the
/// top k% scores globally across all blocks, cardinality ceil(k% of total).
inline ParamMask selft_mask(const DenoiserParams& params, const DenoiserParams& grads_at_init,
                            double k_percent) {
    if (k_percent <= 0.0 || k_percent > 100.0) {
        throw ValidationError("selft_mask: k_percent must be in (0,100]");
    }
    if (!params.same_shapes(grads_at_init)) throw ValidationError("selft_mask: shape mismatch");

    const auto ranks = detail::lexical_block_ranks();
    auto bp = params.blocks();
    auto bg = grads_at_init.blocks();

    std::vector<detail::ScoredCoord> scored;
    scored.reserve(params.total_params());
    double max_score = 0.0;
    for (std::size_t b = 0; b < kNumBlocks; ++b) {
        for (std::size_t i = 0; i < bp[b]->numel(); ++i) {
            const double s = std::abs(bg[b]->data[i] * bp[b]->data[i]);
            max_score = std::max(max_score, s);
            scored.push_back({s, ranks[b], b, i});
        }
    }
    if (max_score == 0.0) {
        throw ValidationError("selft_mask: all importance scores are zero (uninformative batch)");
    }
    detail::sort_scored(scored);

    const std::size_t total = scored.size();
    const std::size_t keep = static_cast<std::size_t>(
        std::ceil(k_percent / 100.0 * static_cast<double>(total)));

    ParamMask mask;
    for (std::size_t b = 0; b < kNumBlocks; ++b) mask.blocks.push_back(Tensor::zeros(bp[b]->shape));
    for (std::size_t i = 0; i < keep && i < total; ++i) {
        mask.blocks[scored[i].block].data[scored[i].index] = 1.0;
    }
    mask.cardinality = std::min(keep, total);
    return mask;
}

/// Elementwise product; coordinates outside the mask receive exactly zero
/// update for the whole request.
inline void apply_mask(std::vector<Tensor>& update_delta, const ParamMask& mask) {
    if (update_delta.size() != mask.blocks.size()) {
        throw ValidationError("apply_mask: block count mismatch");
    }
    for (std::size_t b = 0; b < update_delta.size(); ++b) {
        if (!update_delta[b].same_shape(mask.blocks[b])) {
            throw ValidationError("apply_mask: shape mismatch");
        }
        for (std::size_t i = 0; i < update_delta[b].numel(); ++i) {
            update_delta[b].data[i] *= mask.blocks[b].data[i];
        }
    }
}

// ---- TIES merge ----

/// Trim-elect-mean merge of independently produced checkpoints.
///
/// Per candidate i: tau_i = theta_i - theta_dagger, all but the top-k% of
/// |tau_i| entries (global across blocks) zeroed. Per coordinate, the sign
/// with the larger summed magnitude wins; the merged value is the mean of
/// the trimmed entries whose sign matches, 0 when none does.
inline ModelCheckpoint ties_merge(const ModelCheckpoint& theta_dagger,
                                  const std::vector<ModelCheckpoint>& candidates,
                                  double k_percent) {
    if (candidates.empty()) throw ValidationError("ties_merge: need at least one candidate");
    if (k_percent <= 0.0 || k_percent > 100.0) {
        throw ValidationError("ties_merge: k_percent must be in (0,100]");
    }
    for (const ModelCheckpoint& c : candidates) {
        if (!c.params.same_shapes(theta_dagger.params)) {
            throw ValidationError("ties_merge: candidate shape mismatch");
        }
        if (c.world_hash != theta_dagger.world_hash) {
            throw ValidationError("ties_merge: candidate world hash mismatch");
        }
    }

    const auto ranks = detail::lexical_block_ranks();
    auto base_blocks = theta_dagger.params.blocks();
    const std::size_t total = theta_dagger.params.total_params();
    const std::size_t keep = static_cast<std::size_t>(
        std::ceil(k_percent / 100.0 * static_cast<double>(total)));

    // Trimmed task vectors, flattened per candidate in block order.
    std::vector<std::vector<double>> trimmed;
    trimmed.reserve(candidates.size());
    for (const ModelCheckpoint& c : candidates) {
        std::vector<double> tau(total, 0.0);
        std::vector<detail::ScoredCoord> scored;
        scored.reserve(total);
        auto cb = c.params.blocks();
        std::size_t flat = 0;
        for (std::size_t b = 0; b < kNumBlocks; ++b) {
            for (std::size_t i = 0; i < cb[b]->numel(); ++i, ++flat) {
                const double d = cb[b]->data[i] - base_blocks[b]->data[i];
                tau[flat] = d;
                scored.push_back({std::abs(d), ranks[b], b, flat});
            }
        }
        detail::sort_scored(scored);
        std::vector<double> kept(total, 0.0);
        for (std::size_t i = 0; i < keep && i < total; ++i) {
            kept[scored[i].index] = tau[scored[i].index];
        }
        trimmed.push_back(std::move(kept));
    }

    ModelCheckpoint merged = theta_dagger;
    auto mb = merged.params.blocks();
    std::size_t flat = 0;
    for (std::size_t b = 0; b < kNumBlocks; ++b) {
        for (std::size_t i = 0; i < mb[b]->numel(); ++i, ++flat) {
            double sum = 0.0;
            for (const auto& tau : trimmed) sum += tau[flat];
            const int elected = sum > 0.0 ? 1 : (sum < 0.0 ? -1 : 0);
            if (elected == 0) continue;
            double acc = 0.0;
            std::size_t cnt = 0;
            for (const auto& tau : trimmed) {
                const double v = tau[flat];
                if ((elected > 0 && v > 0.0) || (elected < 0 && v < 0.0)) {
                    acc += v;
                    ++cnt;
                }
            }
            if (cnt > 0) mb[b]->data[i] += acc / static_cast<double>(cnt);
        }
    }

    merged.lineage.clear();
    for (const ModelCheckpoint& c : candidates) {
        merged.lineage.insert(merged.lineage.end(), c.lineage.begin(), c.lineage.end());
    }
    return merged;
}

}  // namespace culb
