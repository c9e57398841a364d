#pragma once

#include <cmath>
#include <cstdint>

namespace culb {

// RNG algorithm identifier written into checkpoint manifests. Bump if the
// sequence ever changes; old artifacts are then no longer comparable.
inline constexpr const char* kRngAlgorithmId = "xoshiro256pp-boxmuller-v1";

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace detail

/// Combines integers into a single stream id (splitmix64 absorption).
/// Used to key RNG streams by content (purpose, request index, cell ids)
/// rather than by execution schedule.
inline std::uint64_t stream_mix(std::uint64_t a) {
    std::uint64_t s = a;
    return detail::splitmix64(s);
}
inline std::uint64_t stream_mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = stream_mix(a) ^ (b + 0x9E3779B97F4A7C15ULL);
    return detail::splitmix64(s);
}
inline std::uint64_t stream_mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t s = stream_mix(a, b) ^ (c + 0xD1B54A32D192ED03ULL);
    return detail::splitmix64(s);
}

/// Deterministic random stream: xoshiro256++ seeded via splitmix64 from
/// (seed, stream_id), normals by Box-Muller with a cached spare.
///
/// Identical (seed, stream_id) reproduce the identical sequence on every
/// platform; distinct stream_ids give independent streams. Single-owner:
/// parallel code allocates one stream per task instead of sharing.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream_id)
        : seed_(seed), stream_id_(stream_id) {
        std::uint64_t sm = stream_mix(seed, stream_id ^ 0xA3C59AC2ED9E4B1DULL);
        for (auto& w : state_) w = detail::splitmix64(sm);
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform index in [0, n). Multiply-shift map of one 64-bit draw.
    std::uint64_t uniform_index(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Standard normal, Box-Muller with cached spare:
    ///   r = sqrt(-2 ln u1), z0 = r cos(2 pi u2), z1 = r sin(2 pi u2).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_id_ = 0;
    std::uint64_t state_[4] = {};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline RngStream seeded_stream(std::uint64_t seed, std::uint64_t stream_id) {
    return RngStream(seed, stream_id);
}

}  // namespace culb
