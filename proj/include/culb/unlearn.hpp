#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "culb/addons.hpp"
#include "culb/diffusion.hpp"
#include "culb/errors.hpp"
#include "culb/gradproj.hpp"
#include "culb/optimizer.hpp"
#include "culb/rng.hpp"
#include "culb/world.hpp"

namespace culb {

enum class Strategy { sequential, simultaneous, independent };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::sequential: return "sequential";
        case Strategy::simultaneous: return "simultaneous";
        case Strategy::independent: return "independent";
    }
    return "?";
}

inline Strategy strategy_from_name(const std::string& s) {
    if (s == "sequential") return Strategy::sequential;
    if (s == "simultaneous") return Strategy::simultaneous;
    if (s == "independent") return Strategy::independent;
    throw ValidationError("unknown strategy: " + s);
}

enum class LossVariant { anchor_data, anchor_teacher };

inline const char* loss_variant_name(LossVariant v) {
    return v == LossVariant::anchor_data ? "anchor_data" : "anchor_teacher";
}

inline LossVariant loss_variant_from_name(const std::string& s) {
    if (s == "anchor_data") return LossVariant::anchor_data;
    if (s == "anchor_teacher") return LossVariant::anchor_teacher;
    throw ValidationError("unknown loss variant: " + s);
}

/// One erasure request: redirect the target concept toward a benign anchor
/// of the same domain.
struct UnlearnRequest {
    int target = -1;
    int anchor = -1;
    LossVariant loss_variant = LossVariant::anchor_data;
    std::size_t steps = 400;
    double lr = 1e-3;
    std::size_t batch_size = 32;
};

/// Default anchor: the held-in same-domain concept with the lowest cosine
/// similarity to the target (maximally benign), ties toward the lower id.
inline int auto_anchor(const World& world, int target) {
    const Concept& tgt = world.concept_by_id(target);
    int best = -1;
    double best_sim = 2.0;
    for (const Concept& c : world.domain_concepts(tgt.domain)) {
        if (c.id == target) continue;
        if (std::count(world.splits.unlearn_sequence.begin(),
                       world.splits.unlearn_sequence.end(), c.id) > 0) {
            continue;
        }
        const double sim = cosine_similarity(c.embedding, tgt.embedding);
        if (sim < best_sim) {
            best_sim = sim;
            best = c.id;
        }
    }
    if (best < 0) throw ValidationError("auto_anchor: no held-in same-domain concept available");
    return best;
}

inline void validate_request(const World& world, const UnlearnRequest& r) {
    const Concept& tgt = world.concept_by_id(r.target);
    const Concept& anc = world.concept_by_id(r.anchor);
    if (tgt.domain != anc.domain) {
        throw ValidationError("request: anchor must share the target's domain");
    }
    if (r.anchor == r.target) throw ValidationError("request: anchor must differ from target");
    if (std::count(world.splits.unlearn_sequence.begin(), world.splits.unlearn_sequence.end(),
                   r.target) == 0) {
        throw ValidationError("request: target " + std::to_string(r.target) +
                              " not in the unlearn sequence split");
    }
    if (std::count(world.splits.unlearn_sequence.begin(), world.splits.unlearn_sequence.end(),
                   r.anchor) > 0) {
        throw ValidationError("request: anchor " + std::to_string(r.anchor) +
                              " is in the unlearn sequence split");
    }
    if (r.batch_size == 0) throw ValidationError("request: batch_size must be >= 1");
    if (!(r.lr > 0.0)) throw ValidationError("request: lr must be > 0");
}

inline void validate_addon_strategy(const AddonConfig& addons, Strategy strategy) {
    addons.validate();
    if (addons.has(AddonKind::merge) && strategy != Strategy::independent) {
        throw ValidationError("addons: merge requires the independent strategy");
    }
    for (AddonKind k : {AddonKind::l1, AddonKind::l2, AddonKind::selft, AddonKind::gradproj}) {
        if (addons.has(k) && strategy != Strategy::sequential) {
            throw ValidationError(std::string("addons: ") + addon_name(k) +
                                  " requires the sequential strategy");
        }
    }
}

/// Redirection loss over one or more targets. Each batch item belongs to one
/// target (round-robin): draw x0 from the anchor's distribution paired with a
/// random held-in partner of the other domain, noise it, and score the model
/// under a prompt that mentions the target.
///
///   anchor_data:    |eps - eps_theta(x_t, prompt[target], t)|^2
///   anchor_teacher: |eps_theta(x_t, prompt[target], t)
///                      - eps_teacher(x_t, prompt[anchor], t)|^2
///
/// Mean over the batch; gradients for every block when `grads` is given.
inline double unlearn_loss_and_grads(const DenoiserParams& params,
                                     const std::vector<UnlearnRequest>& targets,
                                     const World& world, const NoiseSchedule& sched,
                                     const DenoiserParams* teacher, std::size_t batch_size,
                                     RngStream& rng, DenoiserParams* grads) {
    if (targets.empty()) throw ValidationError("unlearn_loss_and_grads: no targets");
    for (const UnlearnRequest& r : targets) {
        validate_request(world, r);
        if (r.loss_variant == LossVariant::anchor_teacher && teacher == nullptr) {
            throw ValidationError("unlearn_loss_and_grads: anchor_teacher needs a teacher");
        }
    }

    // Held-in partners from the other domain (never an unlearned concept).
    const Domain tgt_domain = world.concept_by_id(targets.front().target).domain;
    const Domain partner_domain = tgt_domain == Domain::style ? Domain::object : Domain::style;
    std::vector<int> partners;
    for (const Concept& c : world.domain_concepts(partner_domain)) {
        if (std::count(world.splits.unlearn_sequence.begin(),
                       world.splits.unlearn_sequence.end(), c.id) == 0) {
            partners.push_back(c.id);
        }
    }
    if (partners.empty()) throw ValidationError("unlearn_loss_and_grads: no held-in partners");

    const double inv_b = 1.0 / static_cast<double>(batch_size);
    double loss = 0.0;
    ForwardTrace tr, teacher_tr;
    for (std::size_t i = 0; i < batch_size; ++i) {
        const UnlearnRequest& req = targets[i % targets.size()];
        const int partner = partners[rng.uniform_index(partners.size())];
        const Prompt target_prompt = tgt_domain == Domain::style
                                         ? Prompt{req.target, partner}
                                         : Prompt{partner, req.target};
        const Prompt anchor_prompt = tgt_domain == Domain::style
                                         ? Prompt{req.anchor, partner}
                                         : Prompt{partner, req.anchor};

        const std::size_t t = rng.uniform_index(sched.T);
        const Tensor x0 = sample_image(world, anchor_prompt, rng);
        Tensor eps = Tensor::zeros({params.dims.D});
        for (std::size_t d = 0; d < eps.numel(); ++d) eps[d] = rng.normal();
        const Tensor x_t = forward_noising(x0, t, eps, sched);

        const Tensor& es = world.concept_by_id(target_prompt.style_id).embedding;
        const Tensor& eo = world.concept_by_id(target_prompt.object_id).embedding;
        denoiser_forward(params, x_t, es, eo, t, tr);

        const Tensor* ref = &eps;
        Tensor teacher_out;
        if (req.loss_variant == LossVariant::anchor_teacher) {
            denoiser_forward(*teacher, x_t,
                             world.concept_by_id(anchor_prompt.style_id).embedding,
                             world.concept_by_id(anchor_prompt.object_id).embedding, t,
                             teacher_tr);
            teacher_out = teacher_tr.out;
            ref = &teacher_out;
        }

        Tensor g_out = Tensor::zeros({params.dims.D});
        for (std::size_t d = 0; d < params.dims.D; ++d) {
            const double resid = tr.out[d] - (*ref)[d];
            loss += resid * resid * inv_b;
            g_out[d] = 2.0 * resid * inv_b;
        }
        if (grads) denoiser_backward(params, tr, es, eo, g_out, *grads);
    }
    if (!std::isfinite(loss)) throw RuntimeFailure("unlearn_loss_and_grads: non-finite loss");
    return loss;
}

namespace detail {
inline constexpr std::uint64_t kSelftSalt = 0x53454C46;    // "SELF"
inline constexpr std::uint64_t kUnlearnSalt = 0x554E4C4E;  // "UNLN"
}  // namespace detail

/// Optimizes the redirection loss over `targets` for `total_steps` Adam
/// iterations starting from `init`. Add-ons hook in at fixed points:
/// penalty gradients join the loss gradient before the optimizer; the SelFT
/// mask and the subspace projection act on the post-optimizer update delta.
/// Never mutates `init`.
inline ModelCheckpoint run_targets(const ModelCheckpoint& init,
                                   const std::vector<UnlearnRequest>& targets,
                                   const AddonConfig& addons, const World& world,
                                   const DenoiserParams* teacher, RngStream rng,
                                   std::size_t total_steps) {
    if (targets.empty()) throw ValidationError("run_targets: no requests");
    addons.validate();
    for (const UnlearnRequest& r : targets) validate_request(world, r);
    if (init.world_hash != world.content_hash()) {
        throw ValidationError("run_targets: checkpoint world hash does not match world");
    }
    if (targets.size() > 1 && !addons.kinds.empty()) {
        throw ValidationError("run_targets: add-ons are single-target (sequential) only");
    }

    ModelCheckpoint out = init;
    const UnlearnRequest& lead = targets.back();

    // Validate and prepare add-ons before any optimizer step.
    Subspace subspace;
    if (addons.has(AddonKind::gradproj)) {
        std::vector<int> excluded = init.unlearned_ids();
        for (const UnlearnRequest& r : targets) excluded.push_back(r.target);
        const std::vector<int> aux =
            select_auxiliary(world, lead.target, addons.gradproj_M, excluded);
        std::vector<Tensor> embs;
        for (int id : aux) embs.push_back(world.concept_by_id(id).embedding);
        subspace = build_subspace(embs, addons.gradproj_tol);
        subspace.source_concept_ids = aux;
    }

    ParamMask mask;
    const bool use_selft = addons.has(AddonKind::selft);
    if (use_selft && total_steps > 0) {
        RngStream selft_rng =
            seeded_stream(rng.seed(), stream_mix(rng.stream_id(), detail::kSelftSalt));
        DenoiserParams g0 = DenoiserParams::zeros(init.params.dims);
        unlearn_loss_and_grads(init.params, targets, world, init.schedule, teacher,
                               lead.batch_size, selft_rng, &g0);
        mask = selft_mask(init.params, g0, addons.selft_k_percent);
    }

    const int penalty_p = addons.has(AddonKind::l1) ? 1 : (addons.has(AddonKind::l2) ? 2 : 0);
    const double lambda = addons.effective_lambda();

    if (total_steps > 0) {
        Adam opt(out.params.block_ptrs(), AdamConfig{lead.lr, 0.9, 0.999, 1e-8});
        for (std::size_t step = 0; step < total_steps; ++step) {
            DenoiserParams grads = DenoiserParams::zeros(out.params.dims);
            unlearn_loss_and_grads(out.params, targets, world, out.schedule, teacher,
                                   lead.batch_size, rng, &grads);
            if (penalty_p != 0) {
                penalty_and_grad(out.params, init.params, penalty_p, lambda, grads);
            }
            if (subspace.rank > 0 && addons.projection_point == ProjectionPoint::gradient) {
                grads.w_k = project_update(grads.w_k, subspace);
                grads.w_v = project_update(grads.w_v, subspace);
            }

            std::vector<Tensor> delta = opt.step(grads.block_ptrs());
            if (use_selft) apply_mask(delta, mask);
            if (subspace.rank > 0 && addons.projection_point == ProjectionPoint::update) {
                // kBlockNames order: delta[3] is W_K, delta[4] is W_V.
                delta[3] = project_update(delta[3], subspace);
                delta[4] = project_update(delta[4], subspace);
            }
            auto blocks = out.params.blocks();
            for (std::size_t b = 0; b < kNumBlocks; ++b) axpy(1.0, delta[b], *blocks[b]);
        }
        for (const Tensor* t : out.params.blocks()) t->require_finite("run_targets: parameters");
    }

    for (const UnlearnRequest& r : targets) {
        out.lineage.push_back({r.target, r.anchor, loss_variant_name(r.loss_variant), r.steps,
                               r.lr, r.batch_size, addons.joined_names()});
    }
    return out;
}

/// One request on top of `init` (sequential building block).
inline ModelCheckpoint run_request(const ModelCheckpoint& init, const UnlearnRequest& request,
                                   const AddonConfig& addons, const World& world,
                                   const DenoiserParams* teacher, RngStream rng) {
    return run_targets(init, {request}, addons, world, teacher, std::move(rng), request.steps);
}

struct SequenceResult {
    std::vector<ModelCheckpoint> checkpoints;        // theta*_1 .. theta*_N
    std::vector<std::size_t> cumulative_steps;       // optimizer iterations through request n
    std::vector<ModelCheckpoint> independent_runs;   // only for the independent strategy
};

/// Executes the full request sequence under a strategy:
///   sequential:   theta*_n continues from theta*_{n-1}
///   simultaneous: theta*_n is a fresh run from theta-dagger over targets 1..n
///                 with the summed step budget (cost grows with n)
///   independent:  each target unlearned from theta-dagger alone; with the
///                 merge add-on, theta*_n is the TIES merge of runs 1..n
///
/// Per-request RNG streams are keyed by request index only, so strategies
/// coincide bit-for-bit at n = 1.
inline SequenceResult run_sequence(const ModelCheckpoint& theta_dagger,
                                   const std::vector<UnlearnRequest>& requests,
                                   Strategy strategy, const AddonConfig& addons,
                                   const World& world, std::uint64_t seed) {
    if (requests.empty()) throw ValidationError("run_sequence: no requests");
    validate_addon_strategy(addons, strategy);
    for (const UnlearnRequest& r : requests) validate_request(world, r);

    const DenoiserParams* teacher = &theta_dagger.params;
    SequenceResult res;
    std::size_t cumulative = 0;

    if (strategy == Strategy::sequential) {
        const ModelCheckpoint* prev = &theta_dagger;
        for (std::size_t n = 0; n < requests.size(); ++n) {
            RngStream rng = seeded_stream(seed, stream_mix(detail::kUnlearnSalt, n + 1));
            res.checkpoints.push_back(
                run_request(*prev, requests[n], addons, world, teacher, std::move(rng)));
            prev = &res.checkpoints.back();
            cumulative += requests[n].steps;
            res.cumulative_steps.push_back(cumulative);
        }
    } else if (strategy == Strategy::simultaneous) {
        std::size_t budget = 0;
        for (std::size_t n = 0; n < requests.size(); ++n) {
            budget += requests[n].steps;
            RngStream rng = seeded_stream(seed, stream_mix(detail::kUnlearnSalt, n + 1));
            std::vector<UnlearnRequest> joint(requests.begin(),
                                              requests.begin() + static_cast<long>(n + 1));
            res.checkpoints.push_back(
                run_targets(theta_dagger, joint, addons, world, teacher, std::move(rng), budget));
            cumulative += budget;
            res.cumulative_steps.push_back(cumulative);
        }
    } else {
        AddonConfig solo = addons;
        solo.kinds.clear();  // merge acts at sequence level, not inside runs
        for (std::size_t n = 0; n < requests.size(); ++n) {
            RngStream rng = seeded_stream(seed, stream_mix(detail::kUnlearnSalt, n + 1));
            res.independent_runs.push_back(
                run_request(theta_dagger, requests[n], solo, world, teacher, std::move(rng)));
            cumulative += requests[n].steps;
            res.cumulative_steps.push_back(cumulative);
            if (addons.has(AddonKind::merge)) {
                std::vector<ModelCheckpoint> cands(
                    res.independent_runs.begin(),
                    res.independent_runs.begin() + static_cast<long>(n + 1));
                res.checkpoints.push_back(
                    ties_merge(theta_dagger, cands, addons.merge_k_percent));
            } else {
                res.checkpoints.push_back(res.independent_runs.back());
            }
        }
    }
    return res;
}

}  // namespace culb
