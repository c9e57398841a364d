#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "culb/errors.hpp"

namespace culb {

/// Dense row-major tensor of 64-bit reals. The single value carrier for
/// parameters, gradients, embeddings and samples throughout the library.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }

    Tensor(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape)) {
            throw ValidationError("Tensor: data length does not match shape product");
        }
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) {
            if (d == 0) throw ValidationError("Tensor: zero dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    static Tensor vector(std::vector<double> d) {
        std::vector<std::size_t> s{d.size()};
        return Tensor(std::move(s), std::move(d));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // 2-D access, row-major.
    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void require_finite(const char* what) const {
        if (!all_finite()) {
            throw RuntimeFailure(std::string("non-finite value in ") + what);
        }
    }
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "(";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + ")";
}

// ---- elementwise helpers on flat data ----

inline void axpy(double a, const Tensor& x, Tensor& y) {
    if (!x.same_shape(y)) throw ValidationError("axpy: shape mismatch");
    for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] += a * x.data[i];
}

inline double dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) throw ValidationError("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

/// sqrt of the sum of squares over every entry of every tensor; the block
/// partition is irrelevant, the list is treated as one flat vector.
inline double global_l2_norm(const std::vector<const Tensor*>& params) {
    if (params.empty()) throw ValidationError("global_l2_norm: empty parameter list");
    double ss = 0.0;
    for (const Tensor* t : params) {
        for (double v : t->data) {
            if (!std::isfinite(v)) throw RuntimeFailure("global_l2_norm: non-finite entry");
            ss += v * v;
        }
    }
    return std::sqrt(ss);
}

inline double global_l2_norm(const std::vector<Tensor>& params) {
    std::vector<const Tensor*> ps;
    ps.reserve(params.size());
    for (const Tensor& t : params) ps.push_back(&t);
    return global_l2_norm(ps);
}

}  // namespace culb
