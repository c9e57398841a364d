#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "culb/errors.hpp"
#include "culb/hash.hpp"
#include "culb/linalg.hpp"
#include "culb/rng.hpp"
#include "culb/tensor.hpp"

namespace culb {

enum class Domain { style, object };

inline const char* domain_name(Domain d) { return d == Domain::style ? "style" : "object"; }

struct Concept {
    int id = -1;
    Domain domain = Domain::style;
    std::string name;
    Tensor embedding;  // dim e, unit L2 norm
};

struct Splits {
    std::vector<int> unlearn_sequence;  // ids, all in one domain
    std::vector<int> heldout_styles;
    std::vector<int> heldout_objects;
};

struct WorldConfig {
    std::size_t S = 12;
    std::size_t O = 8;
    std::size_t e = 16;
    std::size_t D = 32;
    double noise_sigma = 0.05;
    double similarity_spread = 0.85;
    std::uint64_t seed = 7;
    Domain unlearn_domain = Domain::style;
    std::size_t unlearn_count = 8;
};

/// The synthetic concept universe. Style s acts on object o as a linear
/// transform: the pair mean is mu_{s,o} = style_transforms[s] * object_bases[o].
/// Transforms are rank-one updates of the identity built on an orthonormal
/// frame, so style and object information occupy separate directions and the
/// pair means stay linearly separable by construction.
struct World {
    std::vector<Concept> styles;
    std::vector<Concept> objects;
    std::vector<Tensor> style_transforms;  // S matrices, D x D
    std::vector<Tensor> object_bases;      // O vectors, dim D
    double noise_sigma = 0.0;
    Splits splits;
    std::uint64_t seed = 0;
    WorldConfig config;

    std::size_t num_styles() const { return styles.size(); }
    std::size_t num_objects() const { return objects.size(); }
    std::size_t embed_dim() const { return styles.front().embedding.numel(); }
    std::size_t data_dim() const { return object_bases.front().numel(); }

    bool is_style_id(int id) const { return id >= 0 && id < static_cast<int>(styles.size()); }
    bool is_object_id(int id) const {
        return id >= static_cast<int>(styles.size()) &&
               id < static_cast<int>(styles.size() + objects.size());
    }

    const Concept& concept_by_id(int id) const {
        if (is_style_id(id)) return styles[static_cast<std::size_t>(id)];
        if (is_object_id(id)) return objects[static_cast<std::size_t>(id) - styles.size()];
        throw ValidationError("unknown concept id " + std::to_string(id));
    }

    const std::vector<Concept>& domain_concepts(Domain d) const {
        return d == Domain::style ? styles : objects;
    }

    Tensor pair_mean(int style_id, int object_id) const {
        const std::size_t s = static_cast<std::size_t>(style_id);
        const std::size_t o = static_cast<std::size_t>(object_id) - styles.size();
        return matvec(style_transforms[s], object_bases[o]);
    }

    /// Digest over everything that defines the world's identity. Checkpoints
    /// carry this so evaluation can refuse mismatched pairings.
    std::string content_hash() const {
        Fnv1a h;
        h.u64(seed);
        h.u64(styles.size());
        h.u64(objects.size());
        h.f64(noise_sigma);
        for (const Concept& c : styles) {
            h.str(c.name);
            h.f64s(c.embedding.data);
        }
        for (const Concept& c : objects) {
            h.str(c.name);
            h.f64s(c.embedding.data);
        }
        for (const Tensor& t : style_transforms) h.f64s(t.data);
        for (const Tensor& b : object_bases) h.f64s(b.data);
        for (int id : splits.unlearn_sequence) h.i64(id);
        for (int id : splits.heldout_styles) h.i64(id);
        for (int id : splits.heldout_objects) h.i64(id);
        return hex64(h.digest());
    }
};

struct Prompt {
    int style_id = -1;
    int object_id = -1;
};

inline void validate_prompt(const World& w, const Prompt& p) {
    if (!w.is_style_id(p.style_id) || !w.is_object_id(p.object_id)) {
        throw ValidationError("prompt references unknown concept ids (" +
                              std::to_string(p.style_id) + "," + std::to_string(p.object_id) + ")");
    }
}

/// a.b / (|a||b|), in [-1, 1]. Zero vectors are rejected.
inline double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) throw ValidationError("cosine_similarity: dim mismatch");
    const double na = l2_norm(a), nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) throw ValidationError("cosine_similarity: zero vector");
    double c = dot(a, b) / (na * nb);
    return std::clamp(c, -1.0, 1.0);
}

namespace detail {

// Stream ids within the world seed. Fixed so regeneration is reproducible.
inline constexpr std::uint64_t kWorldEmbStream = 1;
inline constexpr std::uint64_t kWorldFrameStream = 2;
inline constexpr std::uint64_t kWorldSplitStream = 3;

inline constexpr double kPi = 3.141592653589793238462643383279502884;

// Cluster centers sit in a random 2-plane of embedding space at 0/50/100
// degrees; members jitter around a center with a fixed-radius offset. This
// yields graded pairwise similarities: near-duplicates inside a cluster,
// moderate across adjacent clusters, slightly negative across far ones.
inline std::vector<Tensor> clustered_embeddings(std::size_t count, std::size_t e,
                                                double similarity_spread, RngStream& rng) {
    Tensor plane = random_orthonormal_columns(e, 2, [&] { return rng.normal(); });
    const double angles[3] = {0.0, 50.0 * kPi / 180.0, 100.0 * kPi / 180.0};
    // Jitter radius: expected within-cluster cosine 1/(1+rho^2) = (1+spread)/2.
    const double rho = std::sqrt(2.0 / (1.0 + similarity_spread) - 1.0);

    std::vector<Tensor> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double phi = angles[i % 3];
        Tensor v = Tensor::zeros({e});
        for (std::size_t d = 0; d < e; ++d) {
            v[d] = std::cos(phi) * plane.at(d, 0) + std::sin(phi) * plane.at(d, 1);
        }
        Tensor z = Tensor::zeros({e});
        for (std::size_t d = 0; d < e; ++d) z[d] = rng.normal();
        const double zn = l2_norm(z);
        for (std::size_t d = 0; d < e; ++d) v[d] += rho * z[d] / zn;
        const double vn = l2_norm(v);
        for (std::size_t d = 0; d < e; ++d) v[d] /= vn;
        out.push_back(std::move(v));
    }
    return out;
}

inline void check_domain_spread(const std::vector<Concept>& cs, double spread,
                                const char* label) {
    if (cs.size() < 5) return;  // too few pairs for the span requirement to bind
    double mx = -2.0, mn = 2.0;
    for (std::size_t i = 0; i < cs.size(); ++i) {
        for (std::size_t j = i + 1; j < cs.size(); ++j) {
            const double c = cosine_similarity(cs[i].embedding, cs[j].embedding);
            mx = std::max(mx, c);
            mn = std::min(mn, c);
        }
    }
    if (mx < spread || mn > 0.1) {
        throw ValidationError(std::string("generate_world: ") + label +
                              " similarity span [" + std::to_string(mn) + "," +
                              std::to_string(mx) + "] does not cover [0.1," +
                              std::to_string(spread) + "]");
    }
}

}  // namespace detail

/// Re-checks every World invariant; generate_world calls this before
/// returning and deserialization calls it after loading.
inline void validate_world(const World& w);

inline World generate_world(const WorldConfig& cfg) {
    if (cfg.S < 4) throw ValidationError("generate_world: S must be >= 4");
    if (cfg.O < 2) throw ValidationError("generate_world: O must be >= 2");
    if (cfg.e < 4) throw ValidationError("generate_world: e must be >= 4");
    if (cfg.D < cfg.e) throw ValidationError("generate_world: D must be >= e");
    if (cfg.noise_sigma < 0.0) throw ValidationError("generate_world: noise_sigma < 0");
    if (cfg.similarity_spread <= 0.0 || cfg.similarity_spread >= 1.0) {
        throw ValidationError("generate_world: similarity_spread must be in (0,1)");
    }
    const std::size_t domain_count = cfg.unlearn_domain == Domain::style ? cfg.S : cfg.O;
    if (cfg.unlearn_count < 1 || cfg.unlearn_count >= domain_count) {
        throw ValidationError("generate_world: unlearn_count must leave at least one held-out "
                              "concept in its domain");
    }

    World w;
    w.noise_sigma = cfg.noise_sigma;
    w.seed = cfg.seed;
    w.config = cfg;

    RngStream emb_rng = seeded_stream(cfg.seed, detail::kWorldEmbStream);
    std::vector<Tensor> style_emb =
        detail::clustered_embeddings(cfg.S, cfg.e, cfg.similarity_spread, emb_rng);
    std::vector<Tensor> object_emb =
        detail::clustered_embeddings(cfg.O, cfg.e, cfg.similarity_spread, emb_rng);

    char buf[32];
    for (std::size_t s = 0; s < cfg.S; ++s) {
        std::snprintf(buf, sizeof(buf), "style_%02zu", s);
        w.styles.push_back({static_cast<int>(s), Domain::style, buf, std::move(style_emb[s])});
    }
    for (std::size_t o = 0; o < cfg.O; ++o) {
        std::snprintf(buf, sizeof(buf), "object_%02zu", o);
        w.objects.push_back(
            {static_cast<int>(cfg.S + o), Domain::object, buf, std::move(object_emb[o])});
    }

    // Data-space frame: one shared direction + one per style + one per object.
    // Orthonormal when it fits in D, otherwise independent random unit vectors
    // (separation is still validated below).
    RngStream frame_rng = seeded_stream(cfg.seed, detail::kWorldFrameStream);
    const std::size_t need = 1 + cfg.S + cfg.O;
    Tensor frame;
    if (need <= cfg.D) {
        frame = random_orthonormal_columns(cfg.D, need, [&] { return frame_rng.normal(); });
    } else {
        frame = Tensor::zeros({cfg.D, need});
        for (std::size_t j = 0; j < need; ++j) {
            double nrm = 0.0;
            std::vector<double> col(cfg.D);
            for (std::size_t i = 0; i < cfg.D; ++i) {
                col[i] = frame_rng.normal();
                nrm += col[i] * col[i];
            }
            nrm = std::sqrt(nrm);
            for (std::size_t i = 0; i < cfg.D; ++i) frame.at(i, j) = col[i] / nrm;
        }
    }
    std::vector<double> base_dir(cfg.D);
    for (std::size_t i = 0; i < cfg.D; ++i) base_dir[i] = frame.at(i, 0);

    for (std::size_t s = 0; s < cfg.S; ++s) {
        Tensor t = Tensor::zeros({cfg.D, cfg.D});
        for (std::size_t i = 0; i < cfg.D; ++i) t.at(i, i) = 1.0;
        std::vector<double> u(cfg.D);
        for (std::size_t i = 0; i < cfg.D; ++i) u[i] = frame.at(i, 1 + s);
        add_outer(t, 1.0, u.data(), base_dir.data());
        const double cond = condition_number(t);
        if (cond > 10.0) {
            throw ValidationError("generate_world: style transform " + std::to_string(s) +
                                  " condition number " + std::to_string(cond) + " exceeds 10");
        }
        w.style_transforms.push_back(std::move(t));
    }
    for (std::size_t o = 0; o < cfg.O; ++o) {
        Tensor b = Tensor::zeros({cfg.D});
        for (std::size_t i = 0; i < cfg.D; ++i) {
            b[i] = base_dir[i] + frame.at(i, 1 + cfg.S + o);
        }
        w.object_bases.push_back(std::move(b));
    }

    // Splits: seeded permutation of the unlearn domain; prefix becomes the
    // unlearn sequence, the remainder is held out. The other domain is held
    // out entirely.
    RngStream split_rng = seeded_stream(cfg.seed, detail::kWorldSplitStream);
    std::vector<int> perm;
    if (cfg.unlearn_domain == Domain::style) {
        for (std::size_t s = 0; s < cfg.S; ++s) perm.push_back(static_cast<int>(s));
    } else {
        for (std::size_t o = 0; o < cfg.O; ++o) perm.push_back(static_cast<int>(cfg.S + o));
    }
    for (std::size_t i = perm.size(); i > 1; --i) {
        const std::size_t j = split_rng.uniform_index(i);
        std::swap(perm[i - 1], perm[j]);
    }
    w.splits.unlearn_sequence.assign(perm.begin(), perm.begin() + cfg.unlearn_count);
    std::vector<int> rest(perm.begin() + cfg.unlearn_count, perm.end());
    std::sort(rest.begin(), rest.end());
    if (cfg.unlearn_domain == Domain::style) {
        w.splits.heldout_styles = rest;
        for (std::size_t o = 0; o < cfg.O; ++o) {
            w.splits.heldout_objects.push_back(static_cast<int>(cfg.S + o));
        }
    } else {
        w.splits.heldout_objects = rest;
        for (std::size_t s = 0; s < cfg.S; ++s) {
            w.splits.heldout_styles.push_back(static_cast<int>(s));
        }
    }

    validate_world(w);
    return w;
}

inline void validate_world(const World& w) {
    const WorldConfig& cfg = w.config;
    for (const Concept& c : w.styles) {
        if (std::abs(l2_norm(c.embedding) - 1.0) > 1e-9) {
            throw ValidationError("world: style embedding not unit norm: " + c.name);
        }
    }
    for (const Concept& c : w.objects) {
        if (std::abs(l2_norm(c.embedding) - 1.0) > 1e-9) {
            throw ValidationError("world: object embedding not unit norm: " + c.name);
        }
    }
    detail::check_domain_spread(w.styles, cfg.similarity_spread, "style");
    detail::check_domain_spread(w.objects, cfg.similarity_spread, "object");

    // Pairwise mean separation >= 4 sigma across all (style, object) cells.
    std::vector<Tensor> means;
    for (std::size_t s = 0; s < w.num_styles(); ++s) {
        for (std::size_t o = 0; o < w.num_objects(); ++o) {
            means.push_back(w.pair_mean(static_cast<int>(s),
                                        static_cast<int>(w.num_styles() + o)));
        }
    }
    const double min_sep = 4.0 * w.noise_sigma;
    for (std::size_t i = 0; i < means.size(); ++i) {
        for (std::size_t j = i + 1; j < means.size(); ++j) {
            Tensor d = means[i];
            axpy(-1.0, means[j], d);
            const double dist = l2_norm(d);
            if (dist < min_sep) {
                throw ValidationError(
                    "generate_world: pair means " + std::to_string(i) + "," + std::to_string(j) +
                    " separated by " + std::to_string(dist) + " < 4*sigma = " +
                    std::to_string(min_sep) + "; loosen noise_sigma or dimensions");
            }
        }
    }

    // Split disjointness.
    for (int id : w.splits.unlearn_sequence) {
        const bool in_styles = std::count(w.splits.heldout_styles.begin(),
                                          w.splits.heldout_styles.end(), id) > 0;
        const bool in_objects = std::count(w.splits.heldout_objects.begin(),
                                           w.splits.heldout_objects.end(), id) > 0;
        if (in_styles || in_objects) {
            throw ValidationError("world: unlearn sequence overlaps held-out split at id " +
                                  std::to_string(id));
        }
    }
}

/// mu_{s,o} + noise_sigma * z with z standard normal.
inline Tensor sample_image(const World& w, const Prompt& p, RngStream& rng) {
    validate_prompt(w, p);
    Tensor x = w.pair_mean(p.style_id, p.object_id);
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] += w.noise_sigma * rng.normal();
    return x;
}

// ---- recognition classifiers ----

struct Classifier {
    Domain domain = Domain::style;
    Tensor weights;  // classes x D
    Tensor bias;     // classes
};

/// Argmax of class scores; ties resolved toward the lowest id. Returns the
/// concept id (style index, or S + object index).
inline int classify(const Classifier& cl, const World& w, const Tensor& x) {
    if (x.numel() != w.data_dim()) throw ValidationError("classify: input dim mismatch");
    const std::size_t n = cl.weights.rows();
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
        double s = cl.bias[k];
        for (std::size_t i = 0; i < x.numel(); ++i) s += cl.weights.at(k, i) * x[i];
        if (s > best_score) {  // strict: first (lowest) index wins ties
            best_score = s;
            best = static_cast<int>(k);
        }
    }
    return cl.domain == Domain::style ? best : best + static_cast<int>(w.num_styles());
}

struct ClassifierTrainConfig {
    std::size_t n_per_pair = 50;
    std::size_t eval_per_pair = 20;
    std::size_t max_epochs = 200;
    double lr = 0.5;
    double accuracy_target = 0.99;
};

/// Accuracy on a fresh sample of every pair, n_per_pair draws each.
inline double classifier_accuracy(const World& w, const Classifier& cl, std::size_t n_per_pair,
                                  RngStream& rng) {
    std::size_t hit = 0, tot = 0;
    for (std::size_t s = 0; s < w.num_styles(); ++s) {
        for (std::size_t o = 0; o < w.num_objects(); ++o) {
            const Prompt p{static_cast<int>(s), static_cast<int>(w.num_styles() + o)};
            const int want = cl.domain == Domain::style
                                 ? static_cast<int>(s)
                                 : static_cast<int>(w.num_styles() + o);
            for (std::size_t k = 0; k < n_per_pair; ++k) {
                hit += classify(cl, w, sample_image(w, p, rng)) == want;
                ++tot;
            }
        }
    }
    return static_cast<double>(hit) / static_cast<double>(tot);
}

/// Multinomial logistic regression on sampled pair data, full-batch gradient
/// descent. Fails loudly if the accuracy target is not reached on a fresh
/// evaluation sample within the epoch budget: a world whose classifiers
/// cannot hit the bar is unusable for benchmarking.
inline Classifier train_classifier(const World& w, Domain domain, std::size_t n_per_pair,
                                   RngStream& rng,
                                   const ClassifierTrainConfig& tc = ClassifierTrainConfig{}) {
    if (n_per_pair < 10) throw ValidationError("train_classifier: n_per_pair must be >= 10");
    const std::size_t C = domain == Domain::style ? w.num_styles() : w.num_objects();
    const std::size_t D = w.data_dim();

    std::vector<Tensor> xs;
    std::vector<std::size_t> ys;
    for (std::size_t s = 0; s < w.num_styles(); ++s) {
        for (std::size_t o = 0; o < w.num_objects(); ++o) {
            const Prompt p{static_cast<int>(s), static_cast<int>(w.num_styles() + o)};
            for (std::size_t k = 0; k < n_per_pair; ++k) {
                xs.push_back(sample_image(w, p, rng));
                ys.push_back(domain == Domain::style ? s : o);
            }
        }
    }

    Classifier cl;
    cl.domain = domain;
    cl.weights = Tensor::zeros({C, D});
    cl.bias = Tensor::zeros({C});

    const std::size_t N = xs.size();
    std::vector<double> scores(C), probs(C);
    Tensor gw = Tensor::zeros({C, D});
    Tensor gb = Tensor::zeros({C});

    RngStream eval_rng = seeded_stream(rng.seed(), stream_mix(rng.stream_id(), 0x45564cULL));
    const auto eval_accuracy = [&]() {
        RngStream er = eval_rng;  // same fresh sample every epoch check
        std::size_t hit = 0, tot = 0;
        for (std::size_t s = 0; s < w.num_styles(); ++s) {
            for (std::size_t o = 0; o < w.num_objects(); ++o) {
                const Prompt p{static_cast<int>(s), static_cast<int>(w.num_styles() + o)};
                for (std::size_t k = 0; k < tc.eval_per_pair; ++k) {
                    const Tensor x = sample_image(w, p, er);
                    const int got = classify(cl, w, x);
                    const int want = domain == Domain::style
                                         ? static_cast<int>(s)
                                         : static_cast<int>(w.num_styles() + o);
                    hit += (got == want);
                    ++tot;
                }
            }
        }
        return static_cast<double>(hit) / static_cast<double>(tot);
    };

    for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
        std::fill(gw.data.begin(), gw.data.end(), 0.0);
        std::fill(gb.data.begin(), gb.data.end(), 0.0);
        for (std::size_t i = 0; i < N; ++i) {
            const Tensor& x = xs[i];
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < C; ++k) {
                double s = cl.bias[k];
                for (std::size_t d = 0; d < D; ++d) s += cl.weights.at(k, d) * x[d];
                scores[k] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (std::size_t k = 0; k < C; ++k) {
                probs[k] = std::exp(scores[k] - mx);
                z += probs[k];
            }
            for (std::size_t k = 0; k < C; ++k) {
                const double g = probs[k] / z - (k == ys[i] ? 1.0 : 0.0);
                gb[k] += g;
                for (std::size_t d = 0; d < D; ++d) gw.at(k, d) += g * x[d];
            }
        }
        const double scale = tc.lr / static_cast<double>(N);
        for (std::size_t i = 0; i < gw.numel(); ++i) cl.weights.data[i] -= scale * gw.data[i];
        for (std::size_t i = 0; i < gb.numel(); ++i) cl.bias.data[i] -= scale * gb.data[i];

        if (epoch >= 4 && (epoch % 5 == 0) && eval_accuracy() >= tc.accuracy_target) {
            return cl;
        }
    }
    const double acc = eval_accuracy();
    if (acc >= tc.accuracy_target) return cl;
    throw RuntimeFailure("train_classifier: " + std::string(domain_name(domain)) +
                         " accuracy " + std::to_string(acc) + " below target " +
                         std::to_string(tc.accuracy_target) + " after budget");
}

}  // namespace culb
