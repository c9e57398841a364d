#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "culb/errors.hpp"
#include "culb/linalg.hpp"
#include "culb/tensor.hpp"
#include "culb/world.hpp"

namespace culb {

/// Rank-tolerant orthonormal basis of the span of auxiliary concept
/// embeddings. Q has orthonormal columns (e x r); projection onto the
/// orthogonal complement is I - QQ^T.
struct Subspace {
    Tensor basis;  // e x r, orthonormal columns; r == 0 means empty basis
    std::size_t rank = 0;
    std::vector<int> source_concept_ids;
    double tol = 1e-10;

    std::size_t dim() const { return basis.shape.empty() ? 0 : basis.rows(); }
};

/// The M same-domain concepts most similar to the target, excluding the
/// target itself and every id in `excluded` (the unlearn lineage). Ties in
/// similarity resolve toward the lower id.
inline std::vector<int> select_auxiliary(const World& world, int target, std::size_t M,
                                         const std::vector<int>& excluded) {
    const Concept& tgt = world.concept_by_id(target);
    std::vector<std::pair<double, int>> pool;  // (-similarity, id) for stable sort
    for (const Concept& c : world.domain_concepts(tgt.domain)) {
        if (c.id == target) continue;
        if (std::count(excluded.begin(), excluded.end(), c.id) > 0) continue;
        pool.emplace_back(-cosine_similarity(c.embedding, tgt.embedding), c.id);
    }
    if (M > pool.size()) {
        throw ValidationError("select_auxiliary: M = " + std::to_string(M) +
                              " exceeds pool size " + std::to_string(pool.size()));
    }
    std::sort(pool.begin(), pool.end());
    std::vector<int> out;
    out.reserve(M);
    for (std::size_t i = 0; i < M; ++i) out.push_back(pool[i].second);
    return out;
}

/// Rank-revealing orthonormalization of the embedding set via SVD: keeps
/// singular directions with sigma > tol * sigma_max. Duplicate or nearly
/// dependent embeddings reduce the rank instead of breaking the projector.
inline Subspace build_subspace(const std::vector<Tensor>& embeddings, double tol) {
    if (tol <= 0.0) throw ValidationError("build_subspace: tol must be > 0");
    Subspace sub;
    sub.tol = tol;
    if (embeddings.empty()) {
        sub.rank = 0;
        return sub;
    }
    const std::size_t e = embeddings.front().numel();
    for (const Tensor& v : embeddings) {
        if (v.numel() != e) throw ValidationError("build_subspace: embedding dim mismatch");
    }
    Tensor c = Tensor::zeros({e, embeddings.size()});
    for (std::size_t j = 0; j < embeddings.size(); ++j) {
        for (std::size_t i = 0; i < e; ++i) c.at(i, j) = embeddings[j][i];
    }
    JacobiSvd svd = jacobi_svd(c);
    const double smax = svd.sigma.empty() ? 0.0 : svd.sigma.front();
    std::size_t r = 0;
    while (r < svd.sigma.size() && svd.sigma[r] > tol * smax && svd.sigma[r] > 0.0) ++r;
    sub.rank = r;
    if (r > 0) {
        sub.basis = Tensor::zeros({e, r});
        for (std::size_t j = 0; j < r; ++j) {
            for (std::size_t i = 0; i < e; ++i) sub.basis.at(i, j) = svd.u.at(i, j);
        }
    }
    return sub;
}

/// G' = G (I - QQ^T) for G with rows acting on embedding inputs. Removing
/// the span(Q) component of each row makes G' E(c) vanish for every c in
/// the subspace, so applying it to W_K / W_V update deltas leaves the
/// protected concepts' keys and values unchanged.
inline Tensor project_update(const Tensor& g, const Subspace& sub) {
    if (sub.rank == 0) return g;
    const std::size_t e = sub.basis.rows();
    if (g.cols() != e) throw ValidationError("project_update: column dim mismatch");
    const std::size_t rows = g.rows(), r = sub.rank;
    Tensor out = g;
    std::vector<double> coef(r);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < e; ++k) s += g.at(i, k) * sub.basis.at(k, j);
            coef[j] = s;
        }
        for (std::size_t k = 0; k < e; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < r; ++j) s += coef[j] * sub.basis.at(k, j);
            out.at(i, k) -= s;
        }
    }
    return out;
}

}  // namespace culb
