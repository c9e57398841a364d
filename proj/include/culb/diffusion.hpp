#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "culb/errors.hpp"
#include "culb/linalg.hpp"
#include "culb/optimizer.hpp"
#include "culb/rng.hpp"
#include "culb/tensor.hpp"
#include "culb/world.hpp"

namespace culb {

inline constexpr const char* kSamplerId = "ddpm-ancestral-v1";

// ---- noise schedule ----

struct NoiseSchedule {
    std::size_t T = 0;
    std::vector<double> beta;       // increasing, in (0,1)
    std::vector<double> alpha_bar;  // cumulative products, strictly decreasing

    static NoiseSchedule linear(std::size_t T, double beta_start, double beta_end) {
        if (T == 0) throw ValidationError("NoiseSchedule: T must be >= 1");
        if (beta_start <= 0.0 || beta_end >= 1.0 || beta_end < beta_start) {
            throw ValidationError("NoiseSchedule: betas must satisfy 0 < start <= end < 1");
        }
        NoiseSchedule s;
        s.T = T;
        s.beta.resize(T);
        s.alpha_bar.resize(T);
        double prod = 1.0;
        for (std::size_t t = 0; t < T; ++t) {
            s.beta[t] = T == 1 ? beta_start
                               : beta_start + (beta_end - beta_start) *
                                                  static_cast<double>(t) /
                                                  static_cast<double>(T - 1);
            prod *= 1.0 - s.beta[t];
            s.alpha_bar[t] = prod;
        }
        s.validate();
        return s;
    }

    void validate() const {
        if (beta.size() != T || alpha_bar.size() != T) {
            throw ValidationError("NoiseSchedule: length mismatch");
        }
        double prev_beta = 0.0, prev_ab = 1.0;
        for (std::size_t t = 0; t < T; ++t) {
            if (beta[t] <= 0.0 || beta[t] >= 1.0 || beta[t] < prev_beta) {
                throw ValidationError("NoiseSchedule: beta must be increasing in (0,1)");
            }
            if (alpha_bar[t] <= 0.0 || alpha_bar[t] >= prev_ab) {
                throw ValidationError("NoiseSchedule: alpha_bar must be strictly decreasing in (0,1)");
            }
            prev_beta = beta[t];
            prev_ab = alpha_bar[t];
        }
    }
};

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
inline Tensor forward_noising(const Tensor& x0, std::size_t t, const Tensor& eps,
                              const NoiseSchedule& sched) {
    if (t >= sched.T) throw ValidationError("forward_noising: t out of range");
    if (!x0.same_shape(eps)) throw ValidationError("forward_noising: shape mismatch");
    const double ab = sched.alpha_bar[t];
    Tensor x = x0;
    const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = c0 * x0[i] + c1 * eps[i];
    return x;
}

// ---- denoiser ----

struct ModelDims {
    std::size_t D = 32;    // data dim
    std::size_t e = 16;    // concept embedding dim
    std::size_t e_t = 16;  // time embedding dim, must be even
    std::size_t h = 128;   // trunk width
    std::size_t dk = 32;   // attention key/query dim
    std::size_t dv = 32;   // attention value dim
    std::size_t h2 = 128;  // mlp width
};

/// Sinusoidal time embedding: pairs (sin, cos) at geometric frequencies,
/// parameter-free and deterministic.
inline Tensor time_embedding(std::size_t t, std::size_t e_t) {
    if (e_t % 2 != 0 || e_t == 0) throw ValidationError("time_embedding: e_t must be even");
    Tensor tau = Tensor::zeros({e_t});
    for (std::size_t i = 0; i < e_t / 2; ++i) {
        const double freq =
            std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(e_t));
        const double a = static_cast<double>(t) * freq;
        tau[2 * i] = std::sin(a);
        tau[2 * i + 1] = std::cos(a);
    }
    return tau;
}

inline constexpr std::size_t kNumBlocks = 9;
inline constexpr std::array<const char*, kNumBlocks> kBlockNames = {
    "W_in", "W_time", "W_Q", "W_K", "W_V", "W_mlp1", "b_mlp1", "W_out", "b_out"};

/// Named parameter blocks of the conditional denoiser.
///
///   h   = W_in x_t + W_time tau(t)
///   q   = W_Q h;  k_j = W_K E(c_j);  v_j = W_V E(c_j)   (style and object token)
///   w   = softmax(q . k_j / sqrt(dk));  ctx = sum_j w_j v_j
///   out = W_out relu(W_mlp1 [h; ctx] + b_mlp1) + b_out
///
/// W_K and W_V are the projection blocks that map concept embeddings into
/// attention keys/values; they are the blocks subspace projection acts on.
struct DenoiserParams {
    ModelDims dims;
    Tensor w_in, w_time, w_q, w_k, w_v, w_mlp1, b_mlp1, w_out, b_out;

    static DenoiserParams zeros(const ModelDims& d) {
        DenoiserParams p;
        p.dims = d;
        p.w_in = Tensor::zeros({d.h, d.D});
        p.w_time = Tensor::zeros({d.h, d.e_t});
        p.w_q = Tensor::zeros({d.dk, d.h});
        p.w_k = Tensor::zeros({d.dk, d.e});
        p.w_v = Tensor::zeros({d.dv, d.e});
        p.w_mlp1 = Tensor::zeros({d.h2, d.h + d.dv});
        p.b_mlp1 = Tensor::zeros({d.h2});
        p.w_out = Tensor::zeros({d.D, d.h2});
        p.b_out = Tensor::zeros({d.D});
        return p;
    }

    /// Gaussian init scaled by 1/sqrt(fan_in); biases zero.
    static DenoiserParams init(const ModelDims& d, RngStream& rng) {
        DenoiserParams p = zeros(d);
        auto fill = [&](Tensor& w) {
            const double scale = 1.0 / std::sqrt(static_cast<double>(w.cols()));
            for (double& v : w.data) v = scale * rng.normal();
        };
        fill(p.w_in);
        fill(p.w_time);
        fill(p.w_q);
        fill(p.w_k);
        fill(p.w_v);
        fill(p.w_mlp1);
        fill(p.w_out);
        return p;
    }

    std::array<Tensor*, kNumBlocks> blocks() {
        return {&w_in, &w_time, &w_q, &w_k, &w_v, &w_mlp1, &b_mlp1, &w_out, &b_out};
    }
    std::array<const Tensor*, kNumBlocks> blocks() const {
        return {&w_in, &w_time, &w_q, &w_k, &w_v, &w_mlp1, &b_mlp1, &w_out, &b_out};
    }

    std::vector<const Tensor*> block_ptrs() const {
        auto b = blocks();
        return std::vector<const Tensor*>(b.begin(), b.end());
    }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const Tensor* t : blocks()) n += t->numel();
        return n;
    }

    bool same_shapes(const DenoiserParams& o) const {
        auto a = blocks();
        auto b = o.blocks();
        for (std::size_t i = 0; i < kNumBlocks; ++i) {
            if (!a[i]->same_shape(*b[i])) return false;
        }
        return true;
    }
};

/// this += alpha * other, blockwise.
inline void add_scaled(DenoiserParams& p, const DenoiserParams& other, double alpha) {
    auto a = p.blocks();
    auto b = other.blocks();
    for (std::size_t i = 0; i < kNumBlocks; ++i) axpy(alpha, *b[i], *a[i]);
}

inline double params_l2_distance(const DenoiserParams& a, const DenoiserParams& b) {
    if (!a.same_shapes(b)) throw ValidationError("params_l2_distance: shape mismatch");
    double ss = 0.0;
    auto ba = a.blocks();
    auto bb = b.blocks();
    for (std::size_t i = 0; i < kNumBlocks; ++i) {
        for (std::size_t j = 0; j < ba[i]->numel(); ++j) {
            const double d = ba[i]->data[j] - bb[i]->data[j];
            ss += d * d;
        }
    }
    return std::sqrt(ss);
}

// ---- forward / backward ----

/// Intermediate activations of one forward pass, kept for backprop.
struct ForwardTrace {
    Tensor x, tau, h, q, ks, ko, vs, vo, ctx, z, m, r, out;
    double ws = 0.0, wo = 0.0;  // attention weights (style, object)
};

inline void denoiser_forward(const DenoiserParams& p, const Tensor& x, const Tensor& emb_s,
                             const Tensor& emb_o, std::size_t t, ForwardTrace& tr) {
    const ModelDims& d = p.dims;
    if (x.numel() != d.D) throw ValidationError("denoiser_forward: x dim mismatch");
    if (emb_s.numel() != d.e || emb_o.numel() != d.e) {
        throw ValidationError("denoiser_forward: embedding dim mismatch");
    }
    tr.x = x;
    tr.tau = time_embedding(t, d.e_t);

    tr.h = Tensor::zeros({d.h});
    matvec(p.w_in, x.data.data(), tr.h.data.data());
    {
        Tensor ht = Tensor::zeros({d.h});
        matvec(p.w_time, tr.tau.data.data(), ht.data.data());
        axpy(1.0, ht, tr.h);
    }

    tr.q = matvec(p.w_q, tr.h);
    tr.ks = matvec(p.w_k, emb_s);
    tr.ko = matvec(p.w_k, emb_o);
    tr.vs = matvec(p.w_v, emb_s);
    tr.vo = matvec(p.w_v, emb_o);

    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d.dk));
    const double as = dot(tr.q, tr.ks) * inv_sqrt_dk;
    const double ao = dot(tr.q, tr.ko) * inv_sqrt_dk;
    const double mx = std::max(as, ao);
    const double es = std::exp(as - mx), eo = std::exp(ao - mx);
    tr.ws = es / (es + eo);
    tr.wo = eo / (es + eo);

    tr.ctx = Tensor::zeros({d.dv});
    for (std::size_t i = 0; i < d.dv; ++i) tr.ctx[i] = tr.ws * tr.vs[i] + tr.wo * tr.vo[i];

    tr.z = Tensor::zeros({d.h + d.dv});
    for (std::size_t i = 0; i < d.h; ++i) tr.z[i] = tr.h[i];
    for (std::size_t i = 0; i < d.dv; ++i) tr.z[d.h + i] = tr.ctx[i];

    tr.m = Tensor::zeros({d.h2});
    matvec(p.w_mlp1, tr.z.data.data(), tr.m.data.data());
    axpy(1.0, p.b_mlp1, tr.m);
    tr.r = tr.m;
    for (double& v : tr.r.data) v = v > 0.0 ? v : 0.0;

    tr.out = Tensor::zeros({d.D});
    matvec(p.w_out, tr.r.data.data(), tr.out.data.data());
    axpy(1.0, p.b_out, tr.out);
}

/// Accumulates parameter gradients for one example given dLoss/dout.
/// ReLU uses the zero subgradient at exactly 0.
inline void denoiser_backward(const DenoiserParams& p, const ForwardTrace& tr,
                              const Tensor& emb_s, const Tensor& emb_o, const Tensor& g_out,
                              DenoiserParams& grads) {
    const ModelDims& d = p.dims;

    add_outer(grads.w_out, 1.0, g_out.data.data(), tr.r.data.data());
    axpy(1.0, g_out, grads.b_out);

    Tensor gr = Tensor::zeros({d.h2});
    matvec_t(p.w_out, g_out.data.data(), gr.data.data());
    Tensor gm = gr;
    for (std::size_t i = 0; i < d.h2; ++i) gm[i] = tr.m[i] > 0.0 ? gr[i] : 0.0;

    add_outer(grads.w_mlp1, 1.0, gm.data.data(), tr.z.data.data());
    axpy(1.0, gm, grads.b_mlp1);

    Tensor gz = Tensor::zeros({d.h + d.dv});
    matvec_t(p.w_mlp1, gm.data.data(), gz.data.data());
    Tensor gh = Tensor::zeros({d.h});
    Tensor gctx = Tensor::zeros({d.dv});
    for (std::size_t i = 0; i < d.h; ++i) gh[i] = gz[i];
    for (std::size_t i = 0; i < d.dv; ++i) gctx[i] = gz[d.h + i];

    // ctx = ws*vs + wo*vo
    const double gws = dot(gctx, tr.vs);
    const double gwo = dot(gctx, tr.vo);
    Tensor gvs = gctx, gvo = gctx;
    for (std::size_t i = 0; i < d.dv; ++i) {
        gvs[i] = tr.ws * gctx[i];
        gvo[i] = tr.wo * gctx[i];
    }

    // softmax over the two attention logits
    const double mixed = tr.ws * gws + tr.wo * gwo;
    const double gas = tr.ws * (gws - mixed);
    const double gao = tr.wo * (gwo - mixed);

    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d.dk));
    Tensor gq = Tensor::zeros({d.dk});
    Tensor gks = Tensor::zeros({d.dk});
    Tensor gko = Tensor::zeros({d.dk});
    for (std::size_t i = 0; i < d.dk; ++i) {
        gq[i] = (gas * tr.ks[i] + gao * tr.ko[i]) * inv_sqrt_dk;
        gks[i] = gas * tr.q[i] * inv_sqrt_dk;
        gko[i] = gao * tr.q[i] * inv_sqrt_dk;
    }

    add_outer(grads.w_k, 1.0, gks.data.data(), emb_s.data.data());
    add_outer(grads.w_k, 1.0, gko.data.data(), emb_o.data.data());
    add_outer(grads.w_v, 1.0, gvs.data.data(), emb_s.data.data());
    add_outer(grads.w_v, 1.0, gvo.data.data(), emb_o.data.data());

    add_outer(grads.w_q, 1.0, gq.data.data(), tr.h.data.data());
    {
        Tensor gh_q = Tensor::zeros({d.h});
        matvec_t(p.w_q, gq.data.data(), gh_q.data.data());
        axpy(1.0, gh_q, gh);
    }

    add_outer(grads.w_in, 1.0, gh.data.data(), tr.x.data.data());
    add_outer(grads.w_time, 1.0, gh.data.data(), tr.tau.data.data());
}

/// eps_theta(x_t, q, t): one forward pass, prompt resolved to its two
/// concept embeddings.
inline Tensor predict_noise(const DenoiserParams& p, const Tensor& x_t, const Prompt& prompt,
                            std::size_t t, const World& world) {
    validate_prompt(world, prompt);
    ForwardTrace tr;
    denoiser_forward(p, x_t, world.concept_by_id(prompt.style_id).embedding,
                     world.concept_by_id(prompt.object_id).embedding, t, tr);
    return tr.out;
}

// ---- losses ----

struct BatchItem {
    Tensor x0;
    Prompt prompt;
    std::size_t t = 0;
    Tensor eps;
};

/// Mean over the batch of |eps - eps_theta(forward_noising(x0,t,eps), q, t)|^2
/// with reverse-mode gradients for every block.
inline double retention_loss_and_grads(const DenoiserParams& p,
                                       const std::vector<BatchItem>& batch, const World& world,
                                       const NoiseSchedule& sched, DenoiserParams* grads) {
    if (batch.empty()) throw ValidationError("retention_loss_and_grads: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    ForwardTrace tr;
    for (const BatchItem& it : batch) {
        const Tensor& es = world.concept_by_id(it.prompt.style_id).embedding;
        const Tensor& eo = world.concept_by_id(it.prompt.object_id).embedding;
        const Tensor x_t = forward_noising(it.x0, it.t, it.eps, sched);
        denoiser_forward(p, x_t, es, eo, it.t, tr);
        Tensor g_out = Tensor::zeros({p.dims.D});
        for (std::size_t i = 0; i < p.dims.D; ++i) {
            const double resid = tr.out[i] - it.eps[i];
            loss += resid * resid * inv_b;
            g_out[i] = 2.0 * resid * inv_b;
        }
        if (grads) denoiser_backward(p, tr, es, eo, g_out, *grads);
    }
    if (!std::isfinite(loss)) throw RuntimeFailure("retention_loss_and_grads: non-finite loss");
    return loss;
}

// ---- checkpoints ----

struct LineageEntry {
    int target = -1;
    int anchor = -1;
    std::string loss_variant;
    std::size_t steps = 0;
    double lr = 0.0;
    std::size_t batch_size = 0;
    std::string addons;  // comma-joined add-on kinds active for the request
};

struct ModelCheckpoint {
    DenoiserParams params;
    NoiseSchedule schedule;
    std::string world_hash;
    std::vector<LineageEntry> lineage;
    std::string sampler_id = kSamplerId;
    std::string rng_id = kRngAlgorithmId;

    std::vector<int> unlearned_ids() const {
        std::vector<int> ids;
        for (const LineageEntry& e : lineage) ids.push_back(e.target);
        return ids;
    }
};

// ---- sampling ----

/// DDPM ancestral sampling: x_T ~ N(0, I), then T denoising steps
///   x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps_hat) / sqrt(1-beta_t) + sigma_t z
/// with sigma_t^2 = (1-abar_{t-1})/(1-abar_t) beta_t and no noise at t = 0.
inline Tensor sample(const DenoiserParams& p, const Prompt& prompt, const NoiseSchedule& sched,
                     const World& world, RngStream& rng) {
    validate_prompt(world, prompt);
    const std::size_t D = p.dims.D;
    const Tensor& es = world.concept_by_id(prompt.style_id).embedding;
    const Tensor& eo = world.concept_by_id(prompt.object_id).embedding;

    Tensor x = Tensor::zeros({D});
    for (std::size_t i = 0; i < D; ++i) x[i] = rng.normal();

    ForwardTrace tr;
    for (std::size_t step = sched.T; step-- > 0;) {
        denoiser_forward(p, x, es, eo, step, tr);
        const double beta = sched.beta[step];
        const double ab = sched.alpha_bar[step];
        const double c_eps = beta / std::sqrt(1.0 - ab);
        const double c_mean = 1.0 / std::sqrt(1.0 - beta);
        for (std::size_t i = 0; i < D; ++i) x[i] = c_mean * (x[i] - c_eps * tr.out[i]);
        if (step > 0) {
            const double ab_prev = sched.alpha_bar[step - 1];
            const double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta);
            for (std::size_t i = 0; i < D; ++i) x[i] += sigma * rng.normal();
        }
        x.require_finite("sample: denoising state");
    }
    return x;
}

// ---- base training ----

struct TrainConfig {
    std::size_t steps = 20000;
    double lr = 3e-3;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
    std::size_t gate_samples_per_pair = 5;
    double gate_threshold = 0.98;
};

namespace detail {
inline constexpr std::uint64_t kTrainInitStream = 0x494E4954;  // "INIT"
inline constexpr std::uint64_t kTrainDataStream = 0x44415441;  // "DATA"
inline constexpr std::uint64_t kGateSalt = 0x47415445;         // "GATE"
}  // namespace detail

struct GateResult {
    double style_accuracy = 0.0;
    double object_accuracy = 0.0;
    double min_pair_style = 0.0;
    double min_pair_object = 0.0;
    bool pass = false;
};

/// Samples every (style, object) pair and classifies with both heads.
/// The gate passes when every pair reaches the threshold on both heads.
inline GateResult generation_gate(const DenoiserParams& params, const NoiseSchedule& sched,
                                  const World& world, const Classifier& style_cl,
                                  const Classifier& object_cl, std::size_t samples_per_pair,
                                  double threshold, std::uint64_t seed) {
    GateResult res;
    res.min_pair_style = 1.0;
    res.min_pair_object = 1.0;
    std::size_t style_hits = 0, object_hits = 0, total = 0;
    for (std::size_t s = 0; s < world.num_styles(); ++s) {
        for (std::size_t o = 0; o < world.num_objects(); ++o) {
            const Prompt p{static_cast<int>(s), static_cast<int>(world.num_styles() + o)};
            std::size_t sh = 0, oh = 0;
            for (std::size_t k = 0; k < samples_per_pair; ++k) {
                RngStream cell = seeded_stream(
                    seed, stream_mix(detail::kGateSalt,
                                     stream_mix(static_cast<std::uint64_t>(p.style_id),
                                                static_cast<std::uint64_t>(p.object_id), k)));
                const Tensor img = sample(params, p, sched, world, cell);
                sh += classify(style_cl, world, img) == p.style_id;
                oh += classify(object_cl, world, img) == p.object_id;
            }
            const double sa = static_cast<double>(sh) / static_cast<double>(samples_per_pair);
            const double oa = static_cast<double>(oh) / static_cast<double>(samples_per_pair);
            res.min_pair_style = std::min(res.min_pair_style, sa);
            res.min_pair_object = std::min(res.min_pair_object, oa);
            style_hits += sh;
            object_hits += oh;
            total += samples_per_pair;
        }
    }
    res.style_accuracy = static_cast<double>(style_hits) / static_cast<double>(total);
    res.object_accuracy = static_cast<double>(object_hits) / static_cast<double>(total);
    res.pass = res.min_pair_style >= threshold && res.min_pair_object >= threshold;
    return res;
}

/// Trains theta-dagger on the full pair grid with Adam and verifies the
/// generation gate. Throws if the gate fails within the configured budget.
inline ModelCheckpoint train_base(const World& world, const Classifier& style_cl,
                                  const Classifier& object_cl, const ModelDims& dims,
                                  const NoiseSchedule& sched, const TrainConfig& cfg,
                                  GateResult* gate_out = nullptr) {
    if (dims.D != world.data_dim() || dims.e != world.embed_dim()) {
        throw ValidationError("train_base: model dims do not match world dims");
    }
    RngStream init_rng = seeded_stream(cfg.seed, detail::kTrainInitStream);
    DenoiserParams params = DenoiserParams::init(dims, init_rng);

    RngStream data_rng = seeded_stream(cfg.seed, detail::kTrainDataStream);
    Adam opt(params.block_ptrs(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});

    std::vector<BatchItem> batch(cfg.batch_size);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (BatchItem& it : batch) {
            const int s = static_cast<int>(data_rng.uniform_index(world.num_styles()));
            const int o = static_cast<int>(world.num_styles() +
                                           data_rng.uniform_index(world.num_objects()));
            it.prompt = Prompt{s, o};
            it.t = data_rng.uniform_index(sched.T);
            it.x0 = sample_image(world, it.prompt, data_rng);
            it.eps = Tensor::zeros({dims.D});
            for (std::size_t i = 0; i < dims.D; ++i) it.eps[i] = data_rng.normal();
        }
        DenoiserParams grads = DenoiserParams::zeros(dims);
        retention_loss_and_grads(params, batch, world, sched, &grads);
        const std::vector<Tensor> delta = opt.step(grads.block_ptrs());
        auto blocks = params.blocks();
        for (std::size_t b = 0; b < kNumBlocks; ++b) axpy(1.0, delta[b], *blocks[b]);
    }

    const GateResult gate =
        generation_gate(params, sched, world, style_cl, object_cl, cfg.gate_samples_per_pair,
                        cfg.gate_threshold, cfg.seed);
    if (gate_out) *gate_out = gate;
    if (!gate.pass) {
        throw RuntimeFailure(
            "train_base: generation gate failed (style acc " +
            std::to_string(gate.style_accuracy) + ", object acc " +
            std::to_string(gate.object_accuracy) + ", min pair style " +
            std::to_string(gate.min_pair_style) + ", min pair object " +
            std::to_string(gate.min_pair_object) + "); raise steps or adjust config");
    }

    ModelCheckpoint ck;
    ck.params = std::move(params);
    ck.schedule = sched;
    ck.world_hash = world.content_hash();
    return ck;
}

}  // namespace culb
